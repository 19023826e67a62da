use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::CategoryTree;
use crate::geom::{nms_keep, rotated_iou, Detection, IouMode, Source};
use crate::{CategoryId, Error, Result, Vocabulary};

/// Thresholds of the pseudo-label filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub score_thresh: f64,
    pub sim_thresh: f64,
    pub min_side: f64,
    pub overlap_iou: f64,
    pub nms_iou: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.3,
            sim_thresh: 0.24,
            min_side: 16.0,
            overlap_iou: 0.5,
            nms_iou: 0.5,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{name} = {v} outside [0, 1]"
                )))
            }
        };
        unit("score threshold", self.score_thresh)?;
        unit("overlap IoU", self.overlap_iou)?;
        unit("NMS IoU", self.nms_iou)?;
        if !(-1.0..=1.0).contains(&self.sim_thresh) {
            return Err(Error::InvalidArgument(format!(
                "similarity threshold {} outside [-1, 1]",
                self.sim_thresh
            )));
        }
        if !(self.min_side >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "minimum side {} is negative",
                self.min_side
            )));
        }
        Ok(())
    }
}

/// A model detection with its position in the image's input list.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub det_index: usize,
    pub det: Detection,
}

impl Candidate {
    /// Numbers `dets` from `offset`.
    pub fn enumerate(dets: &[Detection], offset: usize) -> Vec<Candidate> {
        dets.iter()
            .enumerate()
            .map(|(i, d)| Candidate {
                det_index: offset + i,
                det: d.clone(),
            })
            .collect()
    }
}

/// Image-level cosine similarities between detection crops and category
/// texts, keyed by `(image_id, det_index, category)`.
#[derive(Debug, Clone, Default)]
pub struct SimilarityProvider {
    map: BTreeMap<(String, usize, CategoryId), f64>,
}

impl SimilarityProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        image_id: &str,
        det_index: usize,
        category: CategoryId,
        cosine: f64,
    ) -> Result<()> {
        if !(-1.0..=1.0).contains(&cosine) {
            return Err(Error::InvalidArgument(format!(
                "cosine similarity {cosine} outside [-1, 1]"
            )));
        }
        self.map
            .insert((image_id.to_string(), det_index, category), cosine);
        Ok(())
    }

    pub fn get(&self, image_id: &str, det_index: usize, category: CategoryId) -> Option<f64> {
        self.map
            .get(&(image_id.to_string(), det_index, category))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub fn filter_by_score(dets: &[Candidate], threshold: f64) -> Vec<Candidate> {
    dets.iter()
        .filter(|c| c.det.score >= threshold)
        .cloned()
        .collect()
}

/// Concatenates the per-prompt-set results and applies class-agnostic
/// OBB NMS.
pub fn merge_predictions(per_prompt_set: &[Vec<Candidate>], nms_iou: f64) -> Vec<Candidate> {
    let all: Vec<Candidate> = per_prompt_set.iter().flatten().cloned().collect();
    let dets: Vec<Detection> = all.iter().map(|c| c.det.clone()).collect();
    nms_keep(&dets, nms_iou, IouMode::Obb)
        .into_iter()
        .map(|i| all[i].clone())
        .collect()
}

/// A detection that overlaps ground truth of another top-level class.
#[derive(Debug, Clone, PartialEq)]
pub struct HardNegative {
    pub candidate: Candidate,
    pub gt_index: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Partition {
    pub novel: Vec<Candidate>,
    pub hard_negatives: Vec<HardNegative>,
    pub discarded: Vec<Candidate>,
}

/// Splits detections by their best OBB IoU against ground truth. Below
/// `overlap_iou` they are novel; otherwise the best-overlapping GT (lowest
/// index on ties) decides: same top-level class is a duplicate of a labeled
/// object, a different one marks a hard negative.
pub fn partition_vs_gt(
    dets: &[Candidate],
    gt: &[Detection],
    tree: &CategoryTree,
    overlap_iou: f64,
) -> Result<Partition> {
    let mut out = Partition::default();
    for c in dets {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gt.iter().enumerate() {
            let iou = rotated_iou(&c.det.obb, &g.obb);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        // Every category must resolve, even when no GT overlaps.
        tree.top_level(c.det.category)?;
        match best {
            Some((gi, iou)) if iou >= overlap_iou => {
                if tree.same_top_level(c.det.category, gt[gi].category)? {
                    out.discarded.push(c.clone());
                } else {
                    out.hard_negatives.push(HardNegative {
                        candidate: c.clone(),
                        gt_index: gi,
                        iou,
                    });
                }
            }
            _ => out.novel.push(c.clone()),
        }
    }
    Ok(out)
}

/// A detection that passed the similarity gate.
#[derive(Debug, Clone, PartialEq)]
pub struct Kept {
    pub candidate: Candidate,
    /// `None` when the box was too small to be checked.
    pub similarity: Option<f64>,
}

/// Keeps small boxes (enclosing HBB side at most `min_side`) unchecked and
/// larger ones whose similarity reaches `sim_thresh`.
pub fn similarity_filter(
    image_id: &str,
    dets: &[Candidate],
    provider: &SimilarityProvider,
    sim_thresh: f64,
    min_side: f64,
) -> Result<Vec<Kept>> {
    let mut out = Vec::new();
    for c in dets {
        let side = c.det.hbox.width().min(c.det.hbox.height());
        if side <= min_side {
            out.push(Kept {
                candidate: c.clone(),
                similarity: None,
            });
            continue;
        }
        let sim = provider
            .get(image_id, c.det_index, c.det.category)
            .ok_or_else(|| Error::MissingSimilarity {
                image_id: image_id.to_string(),
                det_index: c.det_index,
                category: format!("#{}", c.det.category),
            })?;
        if sim >= sim_thresh {
            out.push(Kept {
                candidate: c.clone(),
                similarity: Some(sim),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterPath {
    /// Emitted as a box after the overlap and similarity checks.
    Novel,
    /// Overlapped ground truth of another top-level class; recorded as a
    /// hard-negative category without a box.
    TreeChecked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub det_index: usize,
    pub category: CategoryId,
    pub score: f64,
    pub clip_similarity: Option<f64>,
    pub filter_path: FilterPath,
}

/// Pseudo labels and category list of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelRecord {
    pub image_id: String,
    pub detections: Vec<Detection>,
    /// Ground-truth, pseudo and hard-negative categories, ascending.
    pub category_list: BTreeSet<CategoryId>,
    pub hard_negatives: BTreeSet<CategoryId>,
    /// One entry per emitted detection (same order), then one per
    /// hard-negative instance.
    pub provenance: Vec<Provenance>,
}

impl PseudoLabelRecord {
    /// Categories that must be present in the image: ground truth plus
    /// pseudo labels.
    pub fn positive_categories(&self) -> BTreeSet<CategoryId> {
        self.category_list
            .difference(&self.hard_negatives)
            .copied()
            .collect()
    }
}

/// Assembles the record. A category that is annotated or kept as a pseudo
/// label is never also a hard negative.
pub fn build_record(
    image_id: &str,
    kept: &[Kept],
    hard_negatives: &[HardNegative],
    gt: &[Detection],
) -> PseudoLabelRecord {
    let mut positives: BTreeSet<CategoryId> = gt.iter().map(|d| d.category).collect();
    let mut detections = Vec::new();
    let mut provenance = Vec::new();
    for k in kept {
        let d = &k.candidate.det;
        positives.insert(d.category);
        detections.push(Detection {
            source: Source::PseudoLabel,
            ..d.clone()
        });
        provenance.push(Provenance {
            det_index: k.candidate.det_index,
            category: d.category,
            score: d.score,
            clip_similarity: k.similarity,
            filter_path: FilterPath::Novel,
        });
    }
    let mut hard = BTreeSet::new();
    for h in hard_negatives {
        let d = &h.candidate.det;
        if !positives.contains(&d.category) {
            hard.insert(d.category);
        }
        provenance.push(Provenance {
            det_index: h.candidate.det_index,
            category: d.category,
            score: d.score,
            clip_similarity: None,
            filter_path: FilterPath::TreeChecked,
        });
    }
    PseudoLabelRecord {
        image_id: image_id.to_string(),
        detections,
        category_list: positives.union(&hard).copied().collect(),
        hard_negatives: hard,
        provenance,
    }
}

/// Everything known about one image before filtering.
#[derive(Debug, Clone)]
pub struct ImageInput {
    pub image_id: String,
    pub gt: Vec<Detection>,
    /// Model detections, one list per prompt set.
    pub predictions: Vec<Vec<Detection>>,
}

impl ImageInput {
    /// Per-prompt-set candidates numbered across the concatenated lists.
    pub fn candidates(&self) -> Vec<Vec<Candidate>> {
        let mut offset = 0;
        self.predictions
            .iter()
            .map(|set| {
                let c = Candidate::enumerate(set, offset);
                offset += set.len();
                c
            })
            .collect()
    }
}

/// Score filter, merge, overlap partition, similarity filter and record
/// assembly for one image.
pub fn process_image(
    input: &ImageInput,
    tree: &CategoryTree,
    sims: &SimilarityProvider,
    cfg: &FilterConfig,
) -> Result<PseudoLabelRecord> {
    let scored: Vec<Vec<Candidate>> = input
        .candidates()
        .iter()
        .map(|set| filter_by_score(set, cfg.score_thresh))
        .collect();
    let merged = merge_predictions(&scored, cfg.nms_iou);
    let part = partition_vs_gt(&merged, &input.gt, tree, cfg.overlap_iou)?;
    let kept = similarity_filter(
        &input.image_id,
        &part.novel,
        sims,
        cfg.sim_thresh,
        cfg.min_side,
    )?;
    Ok(build_record(
        &input.image_id,
        &kept,
        &part.hard_negatives,
        &input.gt,
    ))
}

/// Runs [`process_image`] over all images, in parallel when `parallel`,
/// returning records ordered by image id.
pub fn run_pipeline(
    inputs: &[ImageInput],
    tree: &CategoryTree,
    sims: &SimilarityProvider,
    cfg: &FilterConfig,
    parallel: bool,
) -> Result<Vec<PseudoLabelRecord>> {
    cfg.validate()?;
    let mut records: Vec<PseudoLabelRecord> = if parallel {
        inputs
            .par_iter()
            .map(|i| process_image(i, tree, sims, cfg))
            .collect::<Result<_>>()?
    } else {
        inputs
            .iter()
            .map(|i| process_image(i, tree, sims, cfg))
            .collect::<Result<_>>()?
    };
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(records)
}

#[derive(Serialize, Deserialize)]
struct DetectionJson {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    theta_rad: f64,
    category: String,
    score: f64,
    source: Source,
}

#[derive(Serialize, Deserialize)]
struct ProvenanceJson {
    det_index: usize,
    category: String,
    score: f64,
    clip_similarity: Option<f64>,
    filter_path: FilterPath,
}

#[derive(Serialize, Deserialize)]
struct RecordJson {
    image_id: String,
    detections: Vec<DetectionJson>,
    category_list: Vec<String>,
    hard_negatives: Vec<String>,
    provenance: Vec<ProvenanceJson>,
}

impl PseudoLabelRecord {
    /// One JSON object on a single line, with category names.
    pub fn to_json_line(&self, vocab: &Vocabulary) -> Result<String> {
        let name = |c: CategoryId| vocab.name(c).map(str::to_string);
        let rec = RecordJson {
            image_id: self.image_id.clone(),
            detections: self
                .detections
                .iter()
                .map(|d| {
                    Ok(DetectionJson {
                        cx: d.obb.cx(),
                        cy: d.obb.cy(),
                        w: d.obb.w(),
                        h: d.obb.h(),
                        theta_rad: d.obb.theta(),
                        category: name(d.category)?,
                        score: d.score,
                        source: d.source,
                    })
                })
                .collect::<Result<_>>()?,
            category_list: self
                .category_list
                .iter()
                .map(|&c| name(c))
                .collect::<Result<_>>()?,
            hard_negatives: self
                .hard_negatives
                .iter()
                .map(|&c| name(c))
                .collect::<Result<_>>()?,
            provenance: self
                .provenance
                .iter()
                .map(|p| {
                    Ok(ProvenanceJson {
                        det_index: p.det_index,
                        category: name(p.category)?,
                        score: p.score,
                        clip_similarity: p.clip_similarity,
                        filter_path: p.filter_path,
                    })
                })
                .collect::<Result<_>>()?,
        };
        Ok(serde_json::to_string(&rec)?)
    }

    pub fn from_json_line(line: &str, vocab: &mut Vocabulary) -> Result<Self> {
        let r: RecordJson = serde_json::from_str(line)?;
        let detections = r
            .detections
            .into_iter()
            .map(|d| {
                let obb = crate::geom::OrientedBox::new(d.cx, d.cy, d.w, d.h, d.theta_rad)?;
                Detection::new(obb, vocab.intern(&d.category), d.score, d.source)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            image_id: r.image_id,
            detections,
            category_list: r.category_list.iter().map(|n| vocab.intern(n)).collect(),
            hard_negatives: r.hard_negatives.iter().map(|n| vocab.intern(n)).collect(),
            provenance: r
                .provenance
                .into_iter()
                .map(|p| Provenance {
                    det_index: p.det_index,
                    category: vocab.intern(&p.category),
                    score: p.score,
                    clip_similarity: p.clip_similarity,
                    filter_path: p.filter_path,
                })
                .collect(),
        })
    }
}
