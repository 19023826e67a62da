use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ap::EvalMode;
use super::dictionary::DictionarySpec;
use super::scene::SceneSpec;
use crate::heads::{HeadConfig, InferenceHead};
use crate::promptdict::{Modality, DEFAULT_NEGATIVES, PROMPTS_PER_CATEGORY};
use crate::pseudolabel::FilterConfig;
use crate::{Error, Result};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "ORSD_SEED";

/// Independent random streams derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum SeedStream {
    TrainScenes = 1,
    EvalScenes = 2,
    Dictionary = 3,
    Init = 4,
    Train = 5,
    Eval = 6,
    Mix = 7,
    Palette = 8,
    Pseudo = 9,
}

pub fn derive_seed(seed: u64, stream: SeedStream) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r.next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 256,
            eval_scenes: 64,
        }
    }
}

/// Learning rate over the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` at the first step towards 0 at `total`; steps
    /// past `total` get 0.
    Cosine,
}

impl LrSchedule {
    /// Rate for zero-based step `t` of `total`.
    pub fn rate(self, lr: f64, t: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => {
                let frac = (t as f64 / total.max(1) as f64).min(1.0);
                0.5 * lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Images per gradient step.
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    /// Leading iterations during which backbone parameters stay fixed.
    pub frozen_backbone_iters: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub negatives: usize,
    pub prompts_per_category: (usize, usize),
    /// AP50 on the eval scenes every this many iterations; 0 disables it.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 2,
            lr: 1e-2,
            lr_schedule: LrSchedule::Cosine,
            momentum: 0.9,
            frozen_backbone_iters: 0,
            grad_clip: 5.0,
            negatives: DEFAULT_NEGATIVES,
            prompts_per_category: PROMPTS_PER_CATEGORY,
            eval_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub prompt_count: usize,
    pub head: InferenceHead,
    pub mode: EvalMode,
    pub modality: Modality,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.05,
            nms_iou: 0.5,
            prompt_count: 5,
            head: InferenceHead::Fusion,
            mode: EvalMode::Obb,
            modality: Modality::Text,
        }
    }
}

/// Under-labeling and pseudo-label retraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfTrainConfig {
    /// Leading training scenes that keep every annotation.
    pub labeled_scenes: usize,
    /// Palette index whose annotations are removed from the other scenes.
    pub withheld_class: u32,
    /// Prompt draws per scene when predicting pseudo labels.
    pub prompt_sets: usize,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            labeled_scenes: 64,
            withheld_class: 2,
            prompt_sets: 3,
        }
    }
}

/// Everything a toy run needs, loadable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneSpec,
    pub data: DataConfig,
    pub dictionary: DictionarySpec,
    pub model: HeadConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub pseudo: FilterConfig,
    pub selftrain: SelfTrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let dictionary = DictionarySpec::default();
        Self {
            seed: 7,
            scene: SceneSpec::default(),
            data: DataConfig::default(),
            model: HeadConfig {
                dim: 64,
                text_dim: dictionary.text_dim,
                image_dim: dictionary.image_dim,
                ..HeadConfig::default()
            },
            dictionary,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            pseudo: FilterConfig::default(),
            selftrain: SelfTrainConfig::default(),
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(msg()))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: "<config>".into(),
            line: 0,
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: path.display().to_string(),
                line,
                msg,
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `ORSD_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())
    }

    /// Replaces the seed with `value` when given.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v.trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("{SEED_ENV}={v} is not an unsigned integer"))
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.pseudo.validate()?;
        let m = &self.model;
        check(m.tau > 0.0, || {
            format!("temperature {} must be positive", m.tau)
        })?;
        check(m.dim > 0 && m.n_heads > 0 && m.dim % m.n_heads == 0, || {
            format!(
                "dim {} must be a positive multiple of n_heads {}",
                m.dim, m.n_heads
            )
        })?;
        check(m.class_slots >= self.scene.n_classes, || {
            "fewer class slots than classes".into()
        })?;
        check(
            m.text_dim == self.dictionary.text_dim && m.image_dim == self.dictionary.image_dim,
            || "model and dictionary raw widths differ".into(),
        )?;
        let t = &self.train;
        check(t.lr > 0.0 && t.lr.is_finite(), || {
            format!("learning rate {} must be positive", t.lr)
        })?;
        check((0.0..1.0).contains(&t.momentum), || {
            format!("momentum {} outside [0, 1)", t.momentum)
        })?;
        check(t.batch_size > 0, || "batch size must be positive".into())?;
        check(t.grad_clip >= 0.0, || {
            "gradient clip must be non-negative".into()
        })?;
        let (lo, hi) = t.prompts_per_category;
        check(lo >= 1 && lo <= hi, || format!("prompt range [{lo}, {hi}]"))?;
        let e = &self.eval;
        check((0.0..=1.0).contains(&e.score_thresh), || {
            format!("eval score threshold {}", e.score_thresh)
        })?;
        check((0.0..=1.0).contains(&e.nms_iou), || {
            format!("eval NMS IoU {}", e.nms_iou)
        })?;
        check((1..=100).contains(&e.prompt_count), || {
            format!("prompt count {}", e.prompt_count)
        })?;
        let st = &self.selftrain;
        check((st.withheld_class as usize) < self.scene.n_classes, || {
            format!(
                "withheld class {} is not a palette class",
                st.withheld_class
            )
        })?;
        check(st.prompt_sets > 0, || "prompt_sets must be positive".into())?;
        Ok(())
    }
}
