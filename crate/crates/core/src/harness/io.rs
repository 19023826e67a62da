//! Line-oriented file formats: embedding dictionaries, annotations,
//! predictions, similarities and pseudo-label records.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::scene::SyntheticScene;
use crate::geom::{Detection, OrientedBox, Source};
use crate::promptdict::{Modality, PromptDictionary, PromptEmbedding};
use crate::pseudolabel::{ImageInput, PseudoLabelRecord, SimilarityProvider};
use crate::{Error, Result, Vocabulary};

pub const EMBEDDING_MAGIC: &str = "ORSD-EMB";
pub const EMBEDDING_VERSION: u32 = 1;

fn parse_err(source: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: source.to_string(),
        line,
        msg: msg.into(),
    }
}

/// Non-empty lines with 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

/// Tab-separated dictionary with a version header. Floats use the
/// shortest representation that round-trips.
pub fn write_dictionary(dict: &PromptDictionary, vocab: &Vocabulary) -> Result<String> {
    let mut out = format!(
        "{EMBEDDING_MAGIC} {EMBEDDING_VERSION} {} {}\n",
        dict.text_dim(),
        dict.image_dim()
    );
    for e in dict.entries() {
        let name = vocab.name(e.category)?;
        if name.contains('\t') || name.contains('\n') {
            return Err(Error::InvalidArgument(format!(
                "category `{name}` contains a tab or newline"
            )));
        }
        write!(out, "{name}\t{}\t{}\t", e.modality.as_str(), e.prompt_id).expect("string write");
        for (i, v) in e.raw().iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{v}").expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn read_dictionary(
    text: &str,
    source: &str,
    vocab: &mut Vocabulary,
) -> Result<PromptDictionary> {
    let mut it = lines(text);
    let (ln, header) = it
        .next()
        .ok_or_else(|| parse_err(source, 1, "missing header"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != EMBEDDING_MAGIC {
        return Err(parse_err(
            source,
            ln,
            format!("expected `{EMBEDDING_MAGIC} <version> <text_dim> <image_dim>`"),
        ));
    }
    if parts[1] != EMBEDDING_VERSION.to_string() {
        return Err(parse_err(
            source,
            ln,
            format!("unsupported version {}", parts[1]),
        ));
    }
    let dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| parse_err(source, ln, format!("bad width `{s}`")))
    };
    let mut dict = PromptDictionary::new(dim(parts[2])?, dim(parts[3])?);
    for (ln, line) in it {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(parse_err(
                source,
                ln,
                format!("expected 4 tab-separated fields, got {}", f.len()),
            ));
        }
        let modality: Modality = f[1]
            .parse()
            .map_err(|e: Error| parse_err(source, ln, e.to_string()))?;
        let prompt_id: u32 = f[2]
            .parse()
            .map_err(|_| parse_err(source, ln, format!("bad prompt id `{}`", f[2])))?;
        let raw: Vec<f64> = f[3]
            .split_whitespace()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| parse_err(source, ln, format!("bad float `{v}`")))
            })
            .collect::<Result<_>>()?;
        let e = PromptEmbedding::new(vocab.intern(f[0]), modality, prompt_id, raw)
            .map_err(|e| parse_err(source, ln, e.to_string()))?;
        dict.insert(e)
            .map_err(|e| parse_err(source, ln, e.to_string()))?;
    }
    Ok(dict)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ObjectJson {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    theta_rad: f64,
    category: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationJson {
    image_id: String,
    width: u32,
    height: u32,
    objects: Vec<ObjectJson>,
}

/// Ground truth of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub gt: Vec<Detection>,
}

impl Annotation {
    pub fn from_scene(scene: &SyntheticScene) -> Self {
        Self {
            image_id: scene.image_id.clone(),
            width: scene.width as u32,
            height: scene.height as u32,
            gt: scene.gt.clone(),
        }
    }
}

pub fn write_annotations(anns: &[Annotation], vocab: &Vocabulary) -> Result<String> {
    let mut out = String::new();
    for a in anns {
        let j = AnnotationJson {
            image_id: a.image_id.clone(),
            width: a.width,
            height: a.height,
            objects: a
                .gt
                .iter()
                .map(|d| {
                    Ok(ObjectJson {
                        cx: d.obb.cx(),
                        cy: d.obb.cy(),
                        w: d.obb.w(),
                        h: d.obb.h(),
                        theta_rad: d.obb.theta(),
                        category: vocab.name(d.category)?.to_string(),
                    })
                })
                .collect::<Result<_>>()?,
        };
        out.push_str(&serde_json::to_string(&j)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_annotations(
    text: &str,
    source: &str,
    vocab: &mut Vocabulary,
) -> Result<Vec<Annotation>> {
    lines(text)
        .map(|(ln, line)| {
            let j: AnnotationJson =
                serde_json::from_str(line).map_err(|e| parse_err(source, ln, e.to_string()))?;
            let gt = j
                .objects
                .iter()
                .map(|o| {
                    let obb = OrientedBox::new(o.cx, o.cy, o.w, o.h, o.theta_rad)
                        .map_err(|e| parse_err(source, ln, e.to_string()))?;
                    Ok(Detection::ground_truth(obb, vocab.intern(&o.category)))
                })
                .collect::<Result<_>>()?;
            Ok(Annotation {
                image_id: j.image_id,
                width: j.width,
                height: j.height,
                gt,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredJson {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    theta_rad: f64,
    category: String,
    score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredLineJson {
    image_id: String,
    detections: Vec<PredJson>,
}

/// Model detections of one image under one prompt set.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub image_id: String,
    pub detections: Vec<Detection>,
}

/// One JSON line per (image, prompt set):
/// `{"image_id":str,"detections":[{cx,cy,w,h,theta_rad,category,score}]}`.
pub fn write_predictions(sets: &[PredictionSet], vocab: &Vocabulary) -> Result<String> {
    let mut out = String::new();
    for s in sets {
        let j = PredLineJson {
            image_id: s.image_id.clone(),
            detections: s
                .detections
                .iter()
                .map(|d| {
                    Ok(PredJson {
                        cx: d.obb.cx(),
                        cy: d.obb.cy(),
                        w: d.obb.w(),
                        h: d.obb.h(),
                        theta_rad: d.obb.theta(),
                        category: vocab.name(d.category)?.to_string(),
                        score: d.score,
                    })
                })
                .collect::<Result<_>>()?,
        };
        out.push_str(&serde_json::to_string(&j)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_predictions(
    text: &str,
    source: &str,
    vocab: &mut Vocabulary,
) -> Result<Vec<PredictionSet>> {
    lines(text)
        .map(|(ln, line)| {
            let j: PredLineJson =
                serde_json::from_str(line).map_err(|e| parse_err(source, ln, e.to_string()))?;
            let detections = j
                .detections
                .iter()
                .map(|p| {
                    let obb = OrientedBox::new(p.cx, p.cy, p.w, p.h, p.theta_rad)?;
                    Detection::new(
                        obb,
                        vocab.intern(&p.category),
                        p.score,
                        Source::ModelPrediction,
                    )
                })
                .collect::<Result<_>>()
                .map_err(|e| parse_err(source, ln, e.to_string()))?;
            Ok(PredictionSet {
                image_id: j.image_id,
                detections,
            })
        })
        .collect()
}

/// Joins annotations with prediction sets. Sets of the same image keep
/// their order of appearance, which fixes detection indices; images
/// without predictions get none, predictions for unknown images are an
/// error.
pub fn pipeline_inputs(anns: &[Annotation], preds: &[PredictionSet]) -> Result<Vec<ImageInput>> {
    let mut by_image: BTreeMap<&str, Vec<Vec<Detection>>> = BTreeMap::new();
    for p in preds {
        by_image
            .entry(p.image_id.as_str())
            .or_default()
            .push(p.detections.clone());
    }
    let mut out = Vec::with_capacity(anns.len());
    for a in anns {
        out.push(ImageInput {
            image_id: a.image_id.clone(),
            gt: a.gt.clone(),
            predictions: by_image.remove(a.image_id.as_str()).unwrap_or_default(),
        });
    }
    if let Some(id) = by_image.keys().next() {
        return Err(Error::InvalidArgument(format!(
            "predictions for unannotated image `{id}`"
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SimJson {
    image_id: String,
    det_index: usize,
    category: String,
    cosine: f64,
}

pub fn read_similarities(
    text: &str,
    source: &str,
    vocab: &mut Vocabulary,
) -> Result<SimilarityProvider> {
    let mut p = SimilarityProvider::new();
    for (ln, line) in lines(text) {
        let j: SimJson =
            serde_json::from_str(line).map_err(|e| parse_err(source, ln, e.to_string()))?;
        p.insert(
            &j.image_id,
            j.det_index,
            vocab.intern(&j.category),
            j.cosine,
        )
        .map_err(|e| parse_err(source, ln, e.to_string()))?;
    }
    Ok(p)
}

/// Entries `(image_id, det_index, category name, cosine)` as JSON lines.
pub fn write_similarities<'a, I>(entries: I) -> Result<String>
where
    I: IntoIterator<Item = (&'a str, usize, &'a str, f64)>,
{
    let mut out = String::new();
    for (image_id, det_index, category, cosine) in entries {
        out.push_str(&serde_json::to_string(&SimJson {
            image_id: image_id.to_string(),
            det_index,
            category: category.to_string(),
            cosine,
        })?);
        out.push('\n');
    }
    Ok(out)
}

/// One vector per line, whitespace-separated decimals, all of one width.
pub fn read_vectors(text: &str, source: &str) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in lines(text) {
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| parse_err(source, ln, format!("bad float `{t}`")))
            })
            .collect::<Result<_>>()?;
        if !v.iter().all(|x| x.is_finite()) {
            return Err(parse_err(source, ln, "non-finite value"));
        }
        if let Some(first) = out.first() {
            if first.len() != v.len() {
                return Err(parse_err(
                    source,
                    ln,
                    format!("width {} differs from {}", v.len(), first.len()),
                ));
            }
        }
        out.push(v);
    }
    Ok(out)
}

pub fn write_records(records: &[PseudoLabelRecord], vocab: &Vocabulary) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_json_line(vocab)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_records(
    text: &str,
    source: &str,
    vocab: &mut Vocabulary,
) -> Result<Vec<PseudoLabelRecord>> {
    lines(text)
        .map(|(ln, line)| {
            PseudoLabelRecord::from_json_line(line, vocab)
                .map_err(|e| parse_err(source, ln, e.to_string()))
        })
        .collect()
}
