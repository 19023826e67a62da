//! Self-training pseudo labels.
//!
//! Model detections are score-filtered, merged across prompt sets with
//! class-agnostic NMS, split against the ground truth using a category
//! tree, and gated by an external image-text similarity before they become
//! pseudo labels. Detections that overlap ground truth of an unrelated
//! class become hard-negative categories for the image.

mod mix;
mod pipeline;
mod tree;

pub use mix::{mix_sampler, DataSource, MixSampler, PSEUDO_FRACTION};
pub use pipeline::{
    build_record, filter_by_score, merge_predictions, partition_vs_gt, process_image, run_pipeline,
    similarity_filter, Candidate, FilterConfig, FilterPath, HardNegative, ImageInput, Kept,
    Partition, Provenance, PseudoLabelRecord, SimilarityProvider,
};
pub use tree::CategoryTree;

#[cfg(test)]
mod tests;
