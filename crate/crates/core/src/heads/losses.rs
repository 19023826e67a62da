use super::assign::{encode_hbb, encode_obb, Assignment, HBB_DELTAS, OBB_DELTAS};
use crate::geom::{Detection, Point};
use crate::numkit::{FocalParams, Graph, ParamStore, Tensor2D, Var};
use crate::{CategoryId, Error, Result};

/// Supervised contrastive temperature.
pub const DEFAULT_TAU: f64 = 0.1;
/// Transition point of the smooth-L1 box loss, in stride units.
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

/// Prompt-matching logits on the tape.
///
/// `s[i][c] = max_{j : label_cols[j] = c} (alpha * z_i . p_j / |p_j| + beta)`.
/// Rows of `z` are left unnormalized unless `normalize_z` is set.
#[allow(clippy::too_many_arguments)]
pub fn class_logits_var(
    g: &mut Graph<'_>,
    z: Var,
    prompts: Var,
    label_cols: &[usize],
    n_classes: usize,
    alpha: Var,
    beta: Var,
    normalize_z: bool,
) -> Result<Var> {
    let (zc, pc) = (g.value(z).cols(), g.value(prompts).cols());
    if zc != pc {
        return Err(Error::shape(
            "class_logits",
            format!("embedding width {zc} vs prompt width {pc}"),
        ));
    }
    let pn = g.tape.l2_normalize_rows(prompts);
    let zn = if normalize_z {
        g.tape.l2_normalize_rows(z)
    } else {
        z
    };
    let s = g.tape.matmul_nt(zn, pn)?;
    let s = g.tape.scale_by(s, alpha)?;
    let s = g.tape.add_scalar(s, beta)?;
    g.tape.group_max_cols(s, label_cols, n_classes)
}

/// Value-level [`class_logits_var`] for already-mapped embeddings.
pub fn class_logits(
    z: &Tensor2D,
    prompts: &Tensor2D,
    label_cols: &[usize],
    n_classes: usize,
    alpha: f64,
    beta: f64,
    normalize_z: bool,
) -> Result<Tensor2D> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let zv = g.input(z.clone());
    let pv = g.input(prompts.clone());
    let a = g.input(Tensor2D::scalar(alpha));
    let b = g.input(Tensor2D::scalar(beta));
    let out = class_logits_var(&mut g, zv, pv, label_cols, n_classes, a, b, normalize_z)?;
    Ok(g.value(out).clone())
}

/// For each prompt row, the index of the embedding row with the highest
/// cosine similarity (first on ties).
pub fn select_anchors(z: &Tensor2D, prompts: &Tensor2D) -> Result<Vec<usize>> {
    if z.rows() == 0 {
        return Err(Error::Empty("prediction embeddings"));
    }
    if z.cols() != prompts.cols() {
        return Err(Error::shape(
            "select_anchors",
            "embedding and prompt widths differ",
        ));
    }
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let znorm: Vec<f64> = (0..z.rows()).map(|i| norm(z.row(i))).collect();
    Ok((0..prompts.rows())
        .map(|j| {
            let p = prompts.row(j);
            let mut best = (0, f64::NEG_INFINITY);
            for i in 0..z.rows() {
                let c: f64 = z.row(i).iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / znorm[i];
                if c > best.1 {
                    best = (i, c);
                }
            }
            best.0
        })
        .collect())
}

/// Supervised contrastive loss between each prompt's best-matching
/// prediction embedding and the prompt batch, with cosine similarities
/// divided by `tau`.
pub fn supcon_loss_var(
    g: &mut Graph<'_>,
    z: Var,
    prompts: Var,
    labels: &[usize],
    tau: f64,
) -> Result<Var> {
    let all: Vec<usize> = (0..g.value(z).rows()).collect();
    let eligible: Vec<Option<&[usize]>> = vec![Some(all.as_slice()); labels.len()];
    supcon_loss_var_in(g, z, prompts, labels, &eligible, tau)
}

/// Cosine argmax of each prompt over its own candidate rows of `z`;
/// `None` candidates (or an empty list) give no anchor.
pub fn select_anchors_in(
    z: &Tensor2D,
    prompts: &Tensor2D,
    eligible: &[Option<&[usize]>],
) -> Result<Vec<Option<usize>>> {
    if z.cols() != prompts.cols() {
        return Err(Error::shape(
            "select_anchors",
            "embedding and prompt widths differ",
        ));
    }
    if eligible.len() != prompts.rows() {
        return Err(Error::shape(
            "select_anchors",
            "one candidate list per prompt",
        ));
    }
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    eligible
        .iter()
        .enumerate()
        .map(|(j, cand)| {
            let p = prompts.row(j);
            let mut best: Option<(usize, f64)> = None;
            for &i in cand.unwrap_or(&[]) {
                if i >= z.rows() {
                    return Err(Error::InvalidArgument(format!(
                        "anchor candidate {i} out of range"
                    )));
                }
                let c = z.row(i).iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / norm(z.row(i));
                if best.map_or(true, |(_, b)| c > b) {
                    best = Some((i, c));
                }
            }
            Ok(best.map(|(i, _)| i))
        })
        .collect()
}

/// Supervised contrastive loss where prompt `j` may only anchor on the
/// rows listed in `eligible[j]`. Prompts without an anchor still appear in
/// every contrast set.
pub fn supcon_loss_var_in(
    g: &mut Graph<'_>,
    z: Var,
    prompts: Var,
    labels: &[usize],
    eligible: &[Option<&[usize]>],
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if g.value(z).rows() == 0 {
        return Err(Error::Empty("prediction embeddings"));
    }
    let anchors = select_anchors_in(g.value(z), g.value(prompts), eligible)?;
    let mask: Vec<bool> = anchors.iter().map(Option::is_some).collect();
    let rows: Vec<usize> = anchors.iter().map(|a| a.unwrap_or(0)).collect();
    let za = g.tape.gather_rows(z, &rows)?;
    let za = g.tape.l2_normalize_rows(za);
    let pn = g.tape.l2_normalize_rows(prompts);
    let sims = g.tape.matmul_nt(za, pn)?;
    let sims = g.tape.scale(sims, 1.0 / tau);
    g.tape.supcon_from_sims_masked(sims, labels, &mask)
}

pub fn supcon_loss(z: &Tensor2D, prompts: &Tensor2D, labels: &[usize], tau: f64) -> Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let zv = g.input(z.clone());
    let pv = g.input(prompts.clone());
    let l = supcon_loss_var(&mut g, zv, pv, labels, tau)?;
    Ok(g.value(l).item())
}

/// [`supcon_loss`] with per-prompt anchor candidates.
pub fn supcon_loss_in(
    z: &Tensor2D,
    prompts: &Tensor2D,
    labels: &[usize],
    eligible: &[Option<&[usize]>],
    tau: f64,
) -> Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let zv = g.input(z.clone());
    let pv = g.input(prompts.clone());
    let l = supcon_loss_var_in(&mut g, zv, pv, labels, eligible, tau)?;
    Ok(g.value(l).item())
}

/// Cells matched to a ground truth of each category column.
pub fn anchor_cells(
    assignment: &Assignment,
    gt: &[Detection],
    categories: &[CategoryId],
) -> Vec<Vec<usize>> {
    let mut cells = vec![Vec::new(); categories.len()];
    for (i, m) in assignment.cell_to_gt.iter().enumerate() {
        if let Some(c) = m.and_then(|gi| categories.binary_search(&gt[gi].category).ok()) {
            cells[c].push(i);
        }
    }
    cells
}

/// 0/1 focal targets: a cell is positive for the column of its matched
/// ground truth's category. Matched cells whose category has no column
/// count as background. Returns the targets and the positive count.
pub fn cls_targets(
    assignment: &Assignment,
    gt: &[Detection],
    categories: &[CategoryId],
) -> (Tensor2D, usize) {
    let n = assignment.cell_to_gt.len();
    let mut t = Tensor2D::zeros(n, categories.len());
    let mut npos = 0;
    for (i, m) in assignment.cell_to_gt.iter().enumerate() {
        if let Some(gi) = *m {
            if let Ok(c) = categories.binary_search(&gt[gi].category) {
                t.set(i, c, 1.0);
                npos += 1;
            }
        }
    }
    (t, npos)
}

pub fn cls_loss_var(
    g: &mut Graph<'_>,
    logits: Var,
    targets: &Tensor2D,
    npos: usize,
) -> Result<Var> {
    g.tape
        .focal_loss(logits, targets, FocalParams::default(), npos.max(1) as f64)
}

/// Focal classification loss. `categories` must be sorted and match the
/// logit columns.
pub fn cls_loss(
    logits: &Tensor2D,
    assignment: &Assignment,
    gt: &[Detection],
    categories: &[CategoryId],
) -> Result<f64> {
    if assignment.cell_to_gt.len() != logits.rows() {
        return Err(Error::shape(
            "cls_loss",
            "assignment does not match logit rows",
        ));
    }
    let (t, npos) = cls_targets(assignment, gt, categories);
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let l = g.input(logits.clone());
    let out = cls_loss_var(&mut g, l, &t, npos)?;
    Ok(g.value(out).item())
}

/// Encoded regression targets, one row per cell, plus per-row weights
/// (1 for matched cells).
pub fn box_targets(
    assignment: &Assignment,
    gt: &[Detection],
    centers: &[Point],
    stride: f64,
) -> (Tensor2D, Tensor2D, Vec<f64>) {
    let n = centers.len();
    let mut th = Tensor2D::zeros(n, HBB_DELTAS);
    let mut to = Tensor2D::zeros(n, OBB_DELTAS);
    let mut w = vec![0.0; n];
    for (i, m) in assignment.cell_to_gt.iter().enumerate() {
        if let Some(gi) = *m {
            th.row_mut(i)
                .copy_from_slice(&encode_hbb(&gt[gi].obb, centers[i], stride));
            to.row_mut(i)
                .copy_from_slice(&encode_obb(&gt[gi].obb, centers[i], stride));
            w[i] = 1.0;
        }
    }
    (th, to, w)
}

/// Smooth-L1 on the HBB and OBB encodings, summed and averaged over
/// matched cells; zero without matches.
pub fn box_loss_var(
    g: &mut Graph<'_>,
    hbb_pred: Var,
    obb_pred: Var,
    assignment: &Assignment,
    gt: &[Detection],
    centers: &[Point],
    stride: f64,
) -> Result<Var> {
    if assignment.cell_to_gt.len() != centers.len() {
        return Err(Error::shape("box_loss", "assignment does not match grid"));
    }
    let (th, to, w) = box_targets(assignment, gt, centers, stride);
    let npos = assignment.num_positive().max(1) as f64;
    let lh = g
        .tape
        .smooth_l1_loss(hbb_pred, &th, &w, SMOOTH_L1_BETA, npos)?;
    let lo = g
        .tape
        .smooth_l1_loss(obb_pred, &to, &w, SMOOTH_L1_BETA, npos)?;
    g.tape.add(lh, lo)
}

pub fn box_loss(
    hbb_deltas: &Tensor2D,
    obb_deltas: &Tensor2D,
    assignment: &Assignment,
    gt: &[Detection],
    centers: &[Point],
    stride: f64,
) -> Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let h = g.input(hbb_deltas.clone());
    let o = g.input(obb_deltas.clone());
    let l = box_loss_var(&mut g, h, o, assignment, gt, centers, stride)?;
    Ok(g.value(l).item())
}

/// Loss terms of one head.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HeadLoss {
    pub ct: f64,
    pub cls: f64,
    pub bbox: f64,
}

impl HeadLoss {
    /// Unweighted sum of the three terms.
    pub fn total(&self) -> f64 {
        self.ct + self.cls + self.bbox
    }
}

/// `L_ct + L_cls + L_box`.
pub fn alignment_loss(ct: f64, cls: f64, bbox: f64) -> f64 {
    HeadLoss { ct, cls, bbox }.total()
}

/// Detection loss: fusion head plus alignment head.
pub fn total_loss(fusion: f64, alignment: f64) -> f64 {
    fusion + alignment
}
