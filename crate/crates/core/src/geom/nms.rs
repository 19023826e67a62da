use serde::{Deserialize, Serialize};

use super::{rotated_iou, Detection};

/// Which box representation NMS compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouMode {
    #[default]
    Obb,
    Hbb,
}

impl std::str::FromStr for IouMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "obb" => Ok(IouMode::Obb),
            "hbb" => Ok(IouMode::Hbb),
            other => Err(format!("unknown IoU mode `{other}` (expected obb or hbb)")),
        }
    }
}

impl IouMode {
    /// IoU of two detections under this mode. Zero-area HBBs yield 0.
    pub fn iou(self, a: &Detection, b: &Detection) -> f64 {
        match self {
            IouMode::Obb => rotated_iou(&a.obb, &b.obb),
            IouMode::Hbb => super::hbb_iou(&a.hbox, &b.hbox).unwrap_or(0.0),
        }
    }
}

/// Ranking used everywhere detections are ordered: score descending, then
/// category id ascending, then input position ascending.
pub(crate) fn rank_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .total_cmp(&dets[i].score)
            .then(dets[i].category.cmp(&dets[j].category))
            .then(i.cmp(&j))
    });
    order
}

/// Greedy non-maximum suppression that ignores categories.
///
/// A candidate is dropped when its IoU with an already kept detection
/// exceeds `iou_threshold`. The output is in rank order (see above).
pub fn class_agnostic_nms(dets: &[Detection], iou_threshold: f64, mode: IouMode) -> Vec<Detection> {
    nms_keep(dets, iou_threshold, mode)
        .into_iter()
        .map(|i| dets[i].clone())
        .collect()
}

/// Input indices of the detections kept by [`class_agnostic_nms`], in the
/// same order.
pub fn nms_keep(dets: &[Detection], iou_threshold: f64, mode: IouMode) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in rank_order(dets) {
        let cand = &dets[i];
        let suppressed = kept.iter().any(|&k| {
            let k = &dets[k];
            k.hbox.overlaps(&cand.hbox) && mode.iou(k, cand) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{OrientedBox, Source};
    use crate::CategoryId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(cx: f64, cy: f64, score: f64, cat: u32) -> Detection {
        Detection::new(
            OrientedBox::new(cx, cy, 10.0, 6.0, 0.2).unwrap(),
            CategoryId(cat),
            score,
            Source::ModelPrediction,
        )
        .unwrap()
    }

    /// Repeatedly take the best remaining box and delete everything it covers.
    fn brute_force(dets: &[Detection], thr: f64, mode: IouMode) -> Vec<Detection> {
        let mut remaining: Vec<(usize, Detection)> = dets.iter().cloned().enumerate().collect();
        let mut out = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for k in 1..remaining.len() {
                let (i, a) = &remaining[k];
                let (j, b) = &remaining[best];
                let better = a.score > b.score
                    || (a.score == b.score
                        && (a.category < b.category || (a.category == b.category && i < j)));
                if better {
                    best = k;
                }
            }
            let (_, top) = remaining.remove(best);
            remaining.retain(|(_, d)| mode.iou(&top, d) <= thr);
            out.push(top);
        }
        out
    }

    #[test]
    fn single_and_empty() {
        assert!(class_agnostic_nms(&[], 0.5, IouMode::Obb).is_empty());
        let d = det(0.0, 0.0, 0.4, 1);
        assert_eq!(class_agnostic_nms(&[d.clone()], 0.5, IouMode::Obb), vec![d]);
    }

    #[test]
    fn duplicate_is_suppressed_across_categories() {
        let a = det(0.0, 0.0, 0.8, 1);
        let b = det(0.0, 0.0, 0.9, 2);
        let out = class_agnostic_nms(&[a, b.clone()], 0.5, IouMode::Obb);
        assert_eq!(out, vec![b]);
    }

    #[test]
    fn ties_follow_category_then_index() {
        let a = det(0.0, 0.0, 0.5, 3);
        let b = det(0.0, 0.0, 0.5, 1);
        let c = det(0.0, 0.0, 0.5, 1);
        let out = class_agnostic_nms(&[a, b, c], 0.5, IouMode::Obb);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].category, CategoryId(1));
    }

    #[test]
    fn matches_brute_force_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for mode in [IouMode::Obb, IouMode::Hbb] {
            for _ in 0..5 {
                let dets: Vec<Detection> = (0..1000)
                    .map(|_| {
                        Detection::new(
                            OrientedBox::new(
                                rng.gen_range(0.0..300.0),
                                rng.gen_range(0.0..300.0),
                                rng.gen_range(5.0..40.0),
                                rng.gen_range(5.0..40.0),
                                rng.gen_range(-1.6..1.6),
                            )
                            .unwrap(),
                            CategoryId(rng.gen_range(0..4)),
                            (rng.gen_range(0..50) as f64) / 50.0,
                            Source::ModelPrediction,
                        )
                        .unwrap()
                    })
                    .collect();
                let fast = class_agnostic_nms(&dets, 0.3, mode);
                assert_eq!(fast, brute_force(&dets, 0.3, mode));
                for (i, a) in fast.iter().enumerate() {
                    for b in &fast[i + 1..] {
                        assert!(mode.iou(a, b) <= 0.3);
                    }
                }
                for d in &dets {
                    if !fast.contains(d) {
                        assert!(fast
                            .iter()
                            .any(|k| k.score >= d.score && mode.iou(k, d) > 0.3));
                    }
                }
            }
        }
    }
}
