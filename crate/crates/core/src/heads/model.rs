use rand::Rng;
use serde::{Deserialize, Serialize};

use super::assign::{
    assign, decode_obb, Assignment, FeatureGrid, BOX_DELTAS, HBB_DELTAS, OBB_DELTAS,
};
use super::fusion::{ClassEmbeddingTable, FusionBlock, DEFAULT_CLASS_SLOTS, FUSION_LAYERS};
use super::losses::{
    anchor_cells, box_loss_var, class_logits_var, cls_loss_var, cls_targets, supcon_loss_var_in,
    HeadLoss, DEFAULT_TAU,
};
use crate::geom::{class_agnostic_nms, Detection, IouMode, Source};
use crate::numkit::{sigmoid, Graph, Linear, Mlp2, ParamId, ParamStore, Tensor2D, Var};
use crate::promptdict::{Modality, Projector, PromptBatch};
use crate::{CategoryId, Error, Result};

/// Smallest value `alpha` may take after an update.
pub const ALPHA_MIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub dim: usize,
    pub n_heads: usize,
    pub fusion_layers: usize,
    pub class_slots: usize,
    pub tau: f64,
    pub normalize_z: bool,
    pub text_dim: usize,
    pub image_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            n_heads: 8,
            fusion_layers: FUSION_LAYERS,
            class_slots: DEFAULT_CLASS_SLOTS,
            tau: DEFAULT_TAU,
            normalize_z: false,
            text_dim: 768,
            image_dim: 1024,
        }
    }
}

/// Which head's logits and boxes feed decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceHead {
    Alignment,
    #[default]
    Fusion,
}

/// Dense per-cell predictions of one head.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub embeddings: Tensor2D,
    pub hbb_deltas: Tensor2D,
    pub obb_deltas: Tensor2D,
    pub alpha: f64,
    pub beta: f64,
}

/// Stem, classification embedding, box regression, shared mapping MLP and
/// the logit scale/shift of one head.
#[derive(Debug, Clone, Copy)]
pub struct DenseHead {
    pub stem: Linear,
    pub cls: Linear,
    pub reg: Linear,
    pub shared: Mlp2,
    pub alpha: ParamId,
    pub beta: ParamId,
}

/// Tape handles of one head's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub z: Var,
    pub prompts: Var,
    pub hbb: Var,
    pub obb: Var,
    pub logits: Var,
}

impl DenseHead {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            stem: Linear::new(store, &format!("{name}.stem"), dim, dim, rng)?,
            cls: Linear::new(store, &format!("{name}.cls"), dim, dim, rng)?,
            reg: Linear::new(store, &format!("{name}.reg"), dim, BOX_DELTAS, rng)?,
            shared: Mlp2::new(store, &format!("{name}.shared"), dim, dim, dim, rng)?,
            alpha: store.insert(format!("{name}.alpha"), Tensor2D::scalar(1.0))?,
            beta: store.insert(format!("{name}.beta"), Tensor2D::scalar(0.0))?,
        })
    }

    fn stem(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.stem.forward(g, x)?;
        Ok(g.tape.silu(h))
    }

    fn predict(
        &self,
        g: &mut Graph<'_>,
        feats: Var,
        prompts: Var,
        label_cols: &[usize],
        n_classes: usize,
        normalize_z: bool,
    ) -> Result<HeadVars> {
        let e = self.cls.forward(g, feats)?;
        let z = self.shared.forward(g, e)?;
        let p = self.shared.forward(g, prompts)?;
        let reg = self.reg.forward(g, feats)?;
        let hbb = g.tape.slice_cols(reg, 0, HBB_DELTAS)?;
        let obb = g.tape.slice_cols(reg, HBB_DELTAS, OBB_DELTAS)?;
        let (a, b) = (g.param(self.alpha), g.param(self.beta));
        let logits = class_logits_var(g, z, p, label_cols, n_classes, a, b, normalize_z)?;
        Ok(HeadVars {
            z,
            prompts: p,
            hbb,
            obb,
            logits,
        })
    }

    fn loss(
        &self,
        g: &mut Graph<'_>,
        v: &HeadVars,
        labels: &[usize],
        tau: f64,
        t: &ImageTargets<'_>,
    ) -> Result<(Var, HeadLoss)> {
        // A prompt anchors only on cells assigned to its own category.
        let cells_of = anchor_cells(&t.assignment, t.gt, &t.categories);
        let eligible: Vec<Option<&[usize]>> = labels
            .iter()
            .map(|&c| Some(cells_of[c].as_slice()))
            .collect();
        let ct = supcon_loss_var_in(g, v.z, v.prompts, labels, &eligible, tau)?;
        let cls = cls_loss_var(g, v.logits, &t.cls, t.npos)?;
        let bbox = box_loss_var(
            g,
            v.hbb,
            v.obb,
            &t.assignment,
            t.gt,
            &t.grid.centers,
            t.grid.stride,
        )?;
        let report = HeadLoss {
            ct: g.value(ct).item(),
            cls: g.value(cls).item(),
            bbox: g.value(bbox).item(),
        };
        let s = g.tape.add(ct, cls)?;
        Ok((g.tape.add(s, bbox)?, report))
    }
}

/// Supervision for one image against one prompt batch.
pub struct ImageTargets<'a> {
    pub grid: &'a FeatureGrid,
    pub gt: &'a [Detection],
    pub assignment: Assignment,
    /// Logit-column categories, ascending.
    pub categories: Vec<CategoryId>,
    pub cls: Tensor2D,
    pub npos: usize,
}

impl<'a> ImageTargets<'a> {
    pub fn new(grid: &'a FeatureGrid, gt: &'a [Detection], categories: &[CategoryId]) -> Self {
        let assignment = assign(gt, &grid.centers);
        let (cls, npos) = cls_targets(&assignment, gt, categories);
        Self {
            grid,
            gt,
            assignment,
            categories: categories.to_vec(),
            cls,
            npos,
        }
    }
}

/// Both detection heads with their prompt projectors.
#[derive(Debug, Clone)]
pub struct DetectorHeads {
    pub config: HeadConfig,
    pub text_projector: Projector,
    pub image_projector: Projector,
    pub alignment: DenseHead,
    pub fusion: DenseHead,
    pub fusion_block: FusionBlock,
    pub class_table: ClassEmbeddingTable,
}

/// Loss values of one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DetLoss {
    pub alignment: HeadLoss,
    pub fusion: HeadLoss,
}

impl DetLoss {
    pub fn total(&self) -> f64 {
        self.alignment.total() + self.fusion.total()
    }
}

impl DetectorHeads {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = config.dim;
        if !(config.tau > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                config.tau
            )));
        }
        let text_projector = Projector {
            modality: Modality::Text,
            mlp: Mlp2::new(store, "proj.text", config.text_dim, 2 * d, d, rng)?,
        };
        let image_projector = Projector {
            modality: Modality::Image,
            mlp: Mlp2::new(store, "proj.image", config.image_dim, 2 * d, d, rng)?,
        };
        Ok(Self {
            alignment: DenseHead::new(store, "aln", d, rng)?,
            fusion: DenseHead::new(store, "fus", d, rng)?,
            fusion_block: FusionBlock::new(
                store,
                "fus.block",
                d,
                config.n_heads,
                config.fusion_layers,
                rng,
            )?,
            class_table: ClassEmbeddingTable::new(
                store,
                "fus.class_table",
                config.class_slots,
                d,
                rng,
            )?,
            text_projector,
            image_projector,
            config,
        })
    }

    pub fn projector(&self, m: Modality) -> &Projector {
        match m {
            Modality::Text => &self.text_projector,
            Modality::Image => &self.image_projector,
        }
    }

    /// Raw prompt rows projected into the model space.
    pub fn project_prompts(&self, g: &mut Graph<'_>, batch: &PromptBatch) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Empty("prompt batch"));
        }
        let proj = self.projector(batch.modality);
        let rows: Vec<Vec<f64>> = batch.prompts.iter().map(|p| p.raw().to_vec()).collect();
        let raw = Tensor2D::from_rows(&rows)?;
        if raw.cols() != proj.in_dim() {
            return Err(Error::shape(
                "project_prompts",
                format!(
                    "raw width {} vs projector input {}",
                    raw.cols(),
                    proj.in_dim()
                ),
            ));
        }
        let x = g.input(raw);
        proj.mlp.forward(g, x)
    }

    /// Runs both heads on features `x` (cells x dim). `slots` gives the
    /// class-embedding row of every prompt.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        batch: &PromptBatch,
        slots: &[usize],
    ) -> Result<(HeadVars, HeadVars)> {
        if g.value(x).cols() != self.config.dim {
            return Err(Error::shape(
                "heads",
                format!(
                    "feature width {} vs model dim {}",
                    g.value(x).cols(),
                    self.config.dim
                ),
            ));
        }
        if slots.len() != batch.len() {
            return Err(Error::shape("heads", "one class-embedding slot per prompt"));
        }
        let cols = batch.label_columns();
        let n_classes = batch.categories().len();
        let p0 = self.project_prompts(g, batch)?;

        let xa = self.alignment.stem(g, x)?;
        let aln = self
            .alignment
            .predict(g, xa, p0, &cols, n_classes, self.config.normalize_z)?;

        let table = g.param(self.class_table.table);
        let ce = g.tape.gather_rows(table, slots)?;
        let pf0 = g.tape.add(p0, ce)?;
        let xf0 = self.fusion.stem(g, x)?;
        let (pf, xf) = self.fusion_block.forward(g, pf0, xf0)?;
        let fus = self
            .fusion
            .predict(g, xf, pf, &cols, n_classes, self.config.normalize_z)?;
        Ok((aln, fus))
    }

    /// `L_det = L_fus + L_aln` for one image.
    pub fn loss(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        batch: &PromptBatch,
        slots: &[usize],
        targets: &ImageTargets<'_>,
    ) -> Result<(Var, DetLoss)> {
        let (aln, fus) = self.forward(g, x, batch, slots)?;
        let labels = batch.label_columns();
        let (la, ra) = self
            .alignment
            .loss(g, &aln, &labels, self.config.tau, targets)?;
        let (lf, rf) = self
            .fusion
            .loss(g, &fus, &labels, self.config.tau, targets)?;
        let total = g.tape.add(lf, la)?;
        Ok((
            total,
            DetLoss {
                alignment: ra,
                fusion: rf,
            },
        ))
    }

    /// Keeps every `alpha` at or above [`ALPHA_MIN`].
    pub fn clamp_alpha(&self, store: &mut ParamStore) {
        for id in [self.alignment.alpha, self.fusion.alpha] {
            let a = store.get_mut(id);
            let v = a.data()[0].max(ALPHA_MIN);
            a.data_mut()[0] = v;
        }
    }

    /// Inference on fixed features. Class-embedding slots follow the
    /// ascending category order.
    pub fn infer(
        &self,
        store: &ParamStore,
        features: &Tensor2D,
        batch: &PromptBatch,
        head: InferenceHead,
    ) -> Result<(HeadOutput, Tensor2D)> {
        let slots = batch.label_columns();
        if batch.categories().len() > self.config.class_slots {
            return Err(Error::InvalidArgument(format!(
                "{} categories exceed {} class-embedding slots",
                batch.categories().len(),
                self.config.class_slots
            )));
        }
        let mut g = Graph::new(store);
        let x = g.input(features.clone());
        let (aln, fus) = self.forward(&mut g, x, batch, &slots)?;
        let (v, h) = match head {
            InferenceHead::Alignment => (aln, &self.alignment),
            InferenceHead::Fusion => (fus, &self.fusion),
        };
        let out = HeadOutput {
            embeddings: g.value(v.z).clone(),
            hbb_deltas: g.value(v.hbb).clone(),
            obb_deltas: g.value(v.obb).clone(),
            alpha: store.get(h.alpha).item(),
            beta: store.get(h.beta).item(),
        };
        Ok((out, g.value(v.logits).clone()))
    }
}

/// Sigmoid scores, threshold, per-cell best class, box decoding and
/// class-agnostic NMS. `categories` names the logit columns.
pub fn decode_detections(
    output: &HeadOutput,
    logits: &Tensor2D,
    categories: &[CategoryId],
    grid: &FeatureGrid,
    score_thresh: f64,
    nms_thresh: f64,
) -> Result<Vec<Detection>> {
    let n = grid.len();
    if logits.rows() != n || output.obb_deltas.rows() != n {
        return Err(Error::shape(
            "decode_detections",
            "predictions do not match the grid",
        ));
    }
    if logits.cols() != categories.len() {
        return Err(Error::shape(
            "decode_detections",
            "one category per logit column",
        ));
    }
    let mut dets = Vec::new();
    for i in 0..n {
        let row = logits.row(i);
        let Some((c, &best)) = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        else {
            continue;
        };
        let score = sigmoid(best);
        if score < score_thresh {
            continue;
        }
        let obb = decode_obb(output.obb_deltas.row(i), grid.centers[i], grid.stride)?;
        dets.push(Detection::new(
            obb,
            categories[c],
            score,
            Source::ModelPrediction,
        )?);
    }
    Ok(class_agnostic_nms(&dets, nms_thresh, IouMode::Obb))
}
