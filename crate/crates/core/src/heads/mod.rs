//! Alignment and fusion detection heads.
//!
//! Both heads classify cells by matching their embeddings against prompt
//! embeddings rather than through a fixed class layer. The fusion head
//! first lets prompts and image features attend to each other and tags
//! each category's prompts with a learnable class embedding. The two heads
//! are trained together; their losses are summed.

mod assign;
mod fusion;
mod losses;
mod model;


pub use assign::{
    assign, decode_obb, encode_hbb, encode_obb, Assignment, FeatureGrid, BOX_DELTAS, HBB_DELTAS,
    OBB_DELTAS,
};
pub use fusion::{
    attach_class_embeddings, draw_class_ids, fusion_block, prompt_slots, ClassEmbeddingTable,
    FusionBlock, FusionLayer, ATTN_OUT_INIT_SCALE, DEFAULT_CLASS_SLOTS, FUSION_LAYERS,
};
pub use losses::{
    alignment_loss, anchor_cells, box_loss, box_loss_var, box_targets, class_logits,
    class_logits_var, cls_loss, cls_loss_var, cls_targets, select_anchors, select_anchors_in,
    supcon_loss, supcon_loss_in, supcon_loss_var, supcon_loss_var_in, total_loss, HeadLoss,
    DEFAULT_TAU, SMOOTH_L1_BETA,
};
pub use model::{
    decode_detections, DenseHead, DetLoss, DetectorHeads, HeadConfig, HeadOutput, HeadVars,
    ImageTargets, InferenceHead, ALPHA_MIN,
};
