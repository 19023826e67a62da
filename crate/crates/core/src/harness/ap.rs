use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::geom::{hbb_iou, rotated_iou, Detection};
use crate::{CategoryId, Error, Result};

/// IoU threshold for a true positive.
pub const AP_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    #[default]
    Obb,
    Hbb,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "obb" => Ok(EvalMode::Obb),
            "hbb" => Ok(EvalMode::Hbb),
            other => Err(Error::InvalidArgument(format!(
                "unknown evaluation mode `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// AP of every category with at least one ground-truth box.
    pub per_class: BTreeMap<CategoryId, f64>,
    /// Mean of `per_class`; 0 when there is no ground truth.
    pub mean: f64,
}

fn iou(a: &Detection, b: &Detection, mode: EvalMode) -> f64 {
    match mode {
        EvalMode::Obb => rotated_iou(&a.obb, &b.obb),
        EvalMode::Hbb => hbb_iou(&a.hbox, &b.hbox).unwrap_or(0.0),
    }
}

/// True/false-positive flags of one category's predictions in rank order
/// (score descending, then image, then position). Each prediction takes the
/// unmatched ground truth of its class with the highest IoU.
pub fn match_predictions(
    predictions: &[Vec<Detection>],
    gt: &[Vec<Detection>],
    category: CategoryId,
    mode: EvalMode,
) -> Vec<(f64, bool)> {
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (im, dets) in predictions.iter().enumerate() {
        for (k, d) in dets.iter().enumerate() {
            if d.category == category {
                ranked.push((d.score, im, k));
            }
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    ranked
        .into_iter()
        .map(|(score, im, k)| {
            let d = &predictions[im][k];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gt
                .get(im)
                .map(Vec::as_slice)
                .unwrap_or(&[])
                .iter()
                .enumerate()
            {
                if g.category != category || used[im][gi] {
                    continue;
                }
                let v = iou(d, g, mode);
                if v >= AP_IOU && best.map_or(true, |(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                used[im][gi] = true;
            }
            (score, best.is_some())
        })
        .collect()
}

/// Area under the exact precision-recall curve with the precision
/// envelope (all-point interpolation).
pub fn average_precision(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut prec = Vec::with_capacity(flags.len());
    let mut rec = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        prec.push(tp as f64 / (i + 1) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in 0..flags.len() {
        if rec[i] > prev_r {
            ap += (rec[i] - prev_r) * prec[i];
            prev_r = rec[i];
        }
    }
    ap
}

/// Per-class and mean AP at IoU 0.5 over a set of images.
pub fn ap50(
    predictions: &[Vec<Detection>],
    gt: &[Vec<Detection>],
    mode: EvalMode,
) -> Result<ApReport> {
    if predictions.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prediction lists for {} images",
            predictions.len(),
            gt.len()
        )));
    }
    let classes: BTreeSet<CategoryId> = gt.iter().flatten().map(|d| d.category).collect();
    let mut per_class = BTreeMap::new();
    for &c in &classes {
        let n_gt = gt.iter().flatten().filter(|d| d.category == c).count();
        let flags: Vec<bool> = match_predictions(predictions, gt, c, mode)
            .into_iter()
            .map(|(_, f)| f)
            .collect();
        per_class.insert(c, average_precision(&flags, n_gt));
    }
    let mean = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Ok(ApReport { per_class, mean })
}
