use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ap::{ap50, ApReport, EvalMode};
use super::backbone::{toy_backbone, ToyBackbone};
use super::config::{derive_seed, RunConfig, SeedStream, TrainConfig};
use super::dictionary::synthetic_dictionary;
use super::scene::{generate_scenes, SyntheticScene, TexturePalette};
use crate::geom::Detection;
use crate::heads::{
    decode_detections, draw_class_ids, prompt_slots, DetLoss, DetectorHeads, FeatureGrid,
    HeadConfig, ImageTargets, InferenceHead,
};
use crate::numkit::{Graph, ParamStore, Tensor2D, Var};
use crate::promptdict::{
    inference_prompts, sample_training_prompts_range, Modality, PromptBatch, PromptDictionary,
};
use crate::pseudolabel::{mix_sampler, DataSource, MixSampler, PseudoLabelRecord};
use crate::{CategoryId, Error, Result, Vocabulary};

/// Toy backbone plus both detection heads over one parameter store.
#[derive(Debug, Clone)]
pub struct ToyDetector {
    pub store: ParamStore,
    pub backbone: ToyBackbone,
    pub heads: DetectorHeads,
}

impl ToyDetector {
    pub fn new(config: HeadConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = ToyBackbone::new(&mut store, config.dim, &mut rng)?;
        let heads = DetectorHeads::new(&mut store, config, &mut rng)?;
        Ok(Self {
            store,
            backbone,
            heads,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.heads.config
    }

    pub fn features(&self, scene: &SyntheticScene) -> Result<FeatureGrid> {
        toy_backbone(&self.store, &self.backbone, scene)
    }

    /// `L_det` of one image on graph `g` (which must be bound to
    /// `self.store`).
    pub fn image_loss(
        &self,
        g: &mut Graph<'_>,
        scene: &SyntheticScene,
        gt: &[Detection],
        batch: &PromptBatch,
        slots: &[usize],
    ) -> Result<(Var, DetLoss)> {
        let field = g.input(scene.field.clone());
        let x = self.backbone.forward(g, field)?;
        // Targets only need the cell centers.
        let grid = FeatureGrid {
            cells: Tensor2D::zeros(0, 0),
            centers: scene.centers(),
            stride: scene.stride as f64,
            grid_w: scene.grid_w(),
            grid_h: scene.grid_h(),
        };
        let targets = ImageTargets::new(&grid, gt, &batch.categories());
        self.heads.loss(g, x, batch, slots, &targets)
    }

    /// Scored, NMS-merged detections for the categories of `batch`.
    pub fn detect(
        &self,
        scene: &SyntheticScene,
        batch: &PromptBatch,
        head: InferenceHead,
        score_thresh: f64,
        nms_iou: f64,
    ) -> Result<Vec<Detection>> {
        let grid = self.features(scene)?;
        let (out, logits) = self.heads.infer(&self.store, &grid.cells, batch, head)?;
        decode_detections(
            &out,
            &logits,
            &batch.categories(),
            &grid,
            score_thresh,
            nms_iou,
        )
    }
}

/// One training sample: a scene with the boxes and category lists used to
/// supervise it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainImage {
    pub scene: usize,
    pub gt: Vec<Detection>,
    pub positives: BTreeSet<CategoryId>,
    pub hard_negatives: BTreeSet<CategoryId>,
}

impl TrainImage {
    pub fn labeled(scene: usize, gt: Vec<Detection>) -> Self {
        Self {
            scene,
            positives: gt.iter().map(|d| d.category).collect(),
            gt,
            hard_negatives: BTreeSet::new(),
        }
    }

    /// Annotations plus the pseudo labels and category lists of `record`.
    pub fn pseudo(scene: usize, gt: &[Detection], record: &PseudoLabelRecord) -> Self {
        let mut boxes = gt.to_vec();
        boxes.extend(record.detections.iter().cloned());
        Self {
            scene,
            gt: boxes,
            positives: record.positive_categories(),
            hard_negatives: record.hard_negatives.clone(),
        }
    }
}

/// Scenes plus labeled and pseudo-labeled views of them.
#[derive(Debug, Clone, Default)]
pub struct TrainSet {
    pub scenes: Vec<SyntheticScene>,
    pub labeled: Vec<TrainImage>,
    pub pseudo: Vec<TrainImage>,
}

impl TrainSet {
    /// Every scene with its full annotation; scenes without objects are
    /// left out because they have no positive category.
    pub fn fully_labeled(scenes: Vec<SyntheticScene>) -> Self {
        let labeled = scenes
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.gt.is_empty())
            .map(|(i, s)| TrainImage::labeled(i, s.gt.clone()))
            .collect();
        Self {
            scenes,
            labeled,
            pseudo: Vec::new(),
        }
    }

    fn image(&self, source: DataSource, i: usize) -> &TrainImage {
        match source {
            DataSource::Labeled => &self.labeled[i],
            DataSource::Pseudo => &self.pseudo[i],
        }
    }
}

/// Generated inputs of a toy run.
#[derive(Debug, Clone)]
pub struct ToyData {
    pub palette: TexturePalette,
    pub vocab: Vocabulary,
    pub dict: PromptDictionary,
    pub train: Vec<SyntheticScene>,
    pub eval: Vec<SyntheticScene>,
}

impl ToyData {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let palette = TexturePalette::new(cfg.scene.n_classes, cfg.scene.palette_seed)?;
        let seed = cfg.seed;
        Ok(Self {
            vocab: palette.vocabulary(),
            dict: synthetic_dictionary(
                cfg.scene.n_classes,
                &cfg.dictionary,
                derive_seed(seed, SeedStream::Dictionary),
            )?,
            train: generate_scenes(
                &cfg.scene,
                &palette,
                "train",
                cfg.data.train_scenes,
                derive_seed(seed, SeedStream::TrainScenes),
            )?,
            eval: generate_scenes(
                &cfg.scene,
                &palette,
                "eval",
                cfg.data.eval_scenes,
                derive_seed(seed, SeedStream::EvalScenes),
            )?,
            palette,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    FrozenBackbone,
    Full,
}

/// Per-iteration record of the training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterLog {
    pub iteration: usize,
    pub phase: Phase,
    /// Batch-mean `L_det` before the update.
    pub loss: f64,
    pub aln_ct: f64,
    pub aln_cls: f64,
    pub aln_box: f64,
    pub fus_ct: f64,
    pub fus_cls: f64,
    pub fus_box: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap50: Option<f64>,
}

/// Inference settings for evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub modality: Modality,
    pub prompt_count: usize,
    pub head: InferenceHead,
    pub mode: EvalMode,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub seed: u64,
}

impl EvalSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            modality: cfg.eval.modality,
            prompt_count: cfg.eval.prompt_count,
            head: cfg.eval.head,
            mode: cfg.eval.mode,
            score_thresh: cfg.eval.score_thresh,
            nms_iou: cfg.eval.nms_iou,
            seed: derive_seed(cfg.seed, SeedStream::Eval),
        }
    }
}

/// Detections on every scene, each with its own prompt draw; parallel over
/// scenes.
pub fn predict_scenes(
    model: &ToyDetector,
    scenes: &[SyntheticScene],
    dict: &PromptDictionary,
    s: &EvalSettings,
) -> Result<Vec<Vec<Detection>>> {
    let categories = dict.categories(s.modality);
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
            rng.set_stream(i as u64);
            let batch = inference_prompts(&categories, dict, s.modality, s.prompt_count, &mut rng)?;
            model.detect(scene, &batch, s.head, s.score_thresh, s.nms_iou)
        })
        .collect()
}

pub fn evaluate(
    model: &ToyDetector,
    scenes: &[SyntheticScene],
    dict: &PromptDictionary,
    s: &EvalSettings,
) -> Result<ApReport> {
    let preds = predict_scenes(model, scenes, dict, s)?;
    let gt: Vec<Vec<Detection>> = scenes.iter().map(|sc| sc.gt.clone()).collect();
    ap50(&preds, &gt, s.mode)
}

/// Momentum SGD over `L_det`.
pub struct Trainer {
    pub model: ToyDetector,
    pub iteration: usize,
    cfg: TrainConfig,
    velocity: Vec<Tensor2D>,
    backbone_param: Vec<bool>,
    rng: ChaCha8Rng,
    mix: MixSampler,
}

impl Trainer {
    pub fn new(model: ToyDetector, cfg: TrainConfig, data: &TrainSet, seed: u64) -> Result<Self> {
        if data.labeled.is_empty() && data.pseudo.is_empty() {
            return Err(Error::Empty("training images"));
        }
        let velocity = model
            .store
            .ids()
            .map(|id| {
                let (r, c) = model.store.get(id).shape();
                Tensor2D::zeros(r, c)
            })
            .collect();
        let backbone_param = model
            .store
            .ids()
            .map(|id| {
                model
                    .store
                    .name(id)
                    .starts_with(ToyBackbone::param_prefix())
            })
            .collect();
        Ok(Self {
            model,
            iteration: 0,
            cfg,
            velocity,
            backbone_param,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mix: mix_sampler(data.labeled.len(), data.pseudo.len(), seed ^ 0x5eed),
        })
    }

    /// Prompt batch and class-embedding slots for one training image.
    pub fn draw_prompts<R: Rng + ?Sized>(
        image: &TrainImage,
        dict: &PromptDictionary,
        cfg: &TrainConfig,
        class_slots: usize,
        rng: &mut R,
    ) -> Result<(PromptBatch, Vec<usize>)> {
        let batch = sample_training_prompts_range(
            &image.positives,
            &image.hard_negatives,
            dict,
            cfg.negatives,
            cfg.prompts_per_category,
            rng,
        )?;
        let ids = draw_class_ids(&batch.categories(), class_slots, rng)?;
        let slots = prompt_slots(&batch, &ids)?;
        Ok((batch, slots))
    }

    /// One gradient step on `batch_size` sampled images.
    pub fn step(&mut self, data: &TrainSet, dict: &PromptDictionary) -> Result<IterLog> {
        let b = self.cfg.batch_size;
        let mut grads: Vec<Tensor2D> = self
            .velocity
            .iter()
            .map(|v| Tensor2D::zeros(v.rows(), v.cols()))
            .collect();
        let mut loss_sum = 0.0;
        let mut parts = [0.0; 6];
        for _ in 0..b {
            let (src, idx) = self.mix.next().ok_or(Error::Empty("training images"))?;
            let image = data.image(src, idx);
            let scene = &data.scenes[image.scene];
            let (batch, slots) = Self::draw_prompts(
                image,
                dict,
                &self.cfg,
                self.model.config().class_slots,
                &mut self.rng,
            )?;
            let mut g = Graph::new(&self.model.store);
            let (loss, det) = self
                .model
                .image_loss(&mut g, scene, &image.gt, &batch, &slots)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss is {value} at iteration {} on `{}` (aln {:?}, fus {:?})",
                    self.iteration + 1,
                    scene.image_id,
                    det.alignment,
                    det.fusion
                )));
            }
            loss_sum += value;
            for (p, v) in parts.iter_mut().zip([
                det.alignment.ct,
                det.alignment.cls,
                det.alignment.bbox,
                det.fusion.ct,
                det.fusion.cls,
                det.fusion.bbox,
            ]) {
                *p += v;
            }
            let tape_grads = g.tape.backward(loss)?;
            for (acc, gr) in grads.iter_mut().zip(g.param_grads(&tape_grads)) {
                acc.data_mut()
                    .iter_mut()
                    .zip(gr.data())
                    .for_each(|(a, v)| *a += v / b as f64);
            }
        }
        let phase = if self.iteration < self.cfg.frozen_backbone_iters {
            Phase::FrozenBackbone
        } else {
            Phase::Full
        };
        let frozen = phase == Phase::FrozenBackbone;
        let mut sq = 0.0;
        for (gr, &bb) in grads.iter().zip(&self.backbone_param) {
            if !(frozen && bb) {
                sq += gr.data().iter().map(|v| v * v).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!(
                "gradient norm is {norm} at iteration {}",
                self.iteration + 1
            )));
        }
        let scale = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        let lr = self
            .cfg
            .lr_schedule
            .rate(self.cfg.lr, self.iteration, self.cfg.iterations);
        let ids: Vec<_> = self.model.store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if frozen && self.backbone_param[k] {
                continue;
            }
            let mu = self.cfg.momentum;
            let v = self.velocity[k].data_mut();
            let gr = grads[k].data();
            let p = self.model.store.get_mut(id).data_mut();
            for i in 0..p.len() {
                v[i] = mu * v[i] + scale * gr[i];
                p[i] -= lr * v[i];
            }
        }
        self.model.heads.clamp_alpha(&mut self.model.store);
        self.iteration += 1;
        let n = b as f64;
        Ok(IterLog {
            iteration: self.iteration,
            phase,
            loss: loss_sum / n,
            aln_ct: parts[0] / n,
            aln_cls: parts[1] / n,
            aln_box: parts[2] / n,
            fus_ct: parts[3] / n,
            fus_cls: parts[4] / n,
            fus_box: parts[5] / n,
            grad_norm: norm,
            ap50: None,
        })
    }
}

/// Trained model and its log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyDetector,
    pub log: Vec<IterLog>,
}

/// Runs `cfg.train.iterations` steps from `model` on `data`. With
/// `eval_every > 0` and eval scenes given, AP50 is logged periodically.
pub fn train_model(
    model: ToyDetector,
    cfg: &RunConfig,
    data: &TrainSet,
    dict: &PromptDictionary,
    eval_scenes: Option<&[SyntheticScene]>,
    mut on_iter: impl FnMut(&IterLog),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(
        model,
        cfg.train.clone(),
        data,
        derive_seed(cfg.seed, SeedStream::Train),
    )?;
    let settings = EvalSettings::from_config(cfg);
    let mut log = Vec::with_capacity(cfg.train.iterations);
    for _ in 0..cfg.train.iterations {
        let mut entry = trainer.step(data, dict)?;
        if let Some(scenes) = eval_scenes {
            let every = cfg.train.eval_every;
            if every > 0
                && (entry.iteration % every == 0 || entry.iteration == cfg.train.iterations)
            {
                entry.ap50 = Some(evaluate(&trainer.model, scenes, dict, &settings)?.mean);
            }
        }
        on_iter(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome {
        model: trainer.model,
        log,
    })
}

/// Generates the run's data, initializes a model and trains it on the fully
/// labeled training scenes.
pub fn train_toy(
    cfg: &RunConfig,
    on_iter: impl FnMut(&IterLog),
) -> Result<(ToyData, TrainOutcome)> {
    let data = ToyData::generate(cfg)?;
    let model = ToyDetector::new(cfg.model.clone(), derive_seed(cfg.seed, SeedStream::Init))?;
    let set = TrainSet::fully_labeled(data.train.clone());
    let out = train_model(model, cfg, &set, &data.dict, Some(&data.eval), on_iter)?;
    Ok((data, out))
}
