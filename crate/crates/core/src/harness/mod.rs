//! Synthetic scenes, the toy detector and its training loop, AP50
//! evaluation and on-disk formats.

mod ap;
mod backbone;
mod checkpoint;
mod config;
mod dictionary;
pub mod io;
mod scene;
mod selftrain;
mod train;

pub use ap::{ap50, average_precision, match_predictions, ApReport, EvalMode, AP_IOU};
pub use backbone::{toy_backbone, ToyBackbone};
pub use checkpoint::{
    load_checkpoint, load_into, read_checkpoint, save_checkpoint, write_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{
    derive_seed, DataConfig, EvalConfig, LrSchedule, RunConfig, SeedStream, SelfTrainConfig,
    TrainConfig, SEED_ENV,
};
pub use dictionary::{simulated_similarities, synthetic_dictionary, DictionarySpec};
pub use scene::{
    generate_scene, generate_scenes, SceneSpec, SyntheticScene, TexturePalette, FIELD_DIM,
    SIGNATURE_DIM,
};
pub use selftrain::{
    flat_tree, labeled_set, predict_prompt_sets, pseudo_label_scenes, run_self_training,
    scene_similarities, self_training_set, under_label, SelfTrainReport,
};
pub use train::{
    evaluate, predict_scenes, train_model, train_toy, EvalSettings, IterLog, Phase, ToyData,
    ToyDetector, TrainImage, TrainOutcome, TrainSet, Trainer,
};
