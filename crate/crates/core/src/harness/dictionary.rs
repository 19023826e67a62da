use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::{SyntheticScene, TexturePalette, SIGNATURE_DIM};
use crate::geom::Detection;
use crate::promptdict::{select_image_prompts, Modality, PromptDictionary, PromptEmbedding};
use crate::pseudolabel::SimilarityProvider;
use crate::{CategoryId, Error, Result};

/// Shape of a synthetic prompt dictionary. Every class gets a random
/// prototype per modality; prompts are noisy copies of it. Vectors have
/// unit variance per entry (norm about `sqrt(dim)`), the scale a linear
/// layer with fan-in initialization expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DictionarySpec {
    pub text_dim: usize,
    pub image_dim: usize,
    /// Inclusive range of text prompts per class.
    pub text_prompts: (usize, usize),
    pub image_candidates: usize,
    pub image_keep: usize,
    /// Noise norm relative to the prototype norm.
    pub text_noise: f64,
    pub image_noise: f64,
}

impl Default for DictionarySpec {
    fn default() -> Self {
        Self {
            text_dim: 768,
            image_dim: 1024,
            text_prompts: (10, 15),
            image_candidates: 150,
            image_keep: 100,
            text_noise: 0.5,
            image_noise: 0.8,
        }
    }
}

/// Gaussian direction scaled to norm `sqrt(dim)`.
fn gaussian_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let mut v: Vec<f64> = (0..dim).map(|_| n.sample(rng)).collect();
    let scale = (dim as f64).sqrt() / v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x *= scale);
    v
}

fn noisy<R: Rng + ?Sized>(proto: &[f64], noise: f64, rng: &mut R) -> Vec<f64> {
    let e = gaussian_direction(proto.len(), rng);
    proto.iter().zip(&e).map(|(p, e)| p + noise * e).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Text prompts (10 to 15 per class) and image prompts (the `image_keep`
/// candidates closest to the class prototype) for classes `0..n_classes`.
pub fn synthetic_dictionary(
    n_classes: usize,
    spec: &DictionarySpec,
    seed: u64,
) -> Result<PromptDictionary> {
    let (lo, hi) = spec.text_prompts;
    if lo == 0 || lo > hi || hi > Modality::Text.max_prompts() {
        return Err(Error::InvalidArgument(format!(
            "text prompt range [{lo}, {hi}]"
        )));
    }
    if spec.image_keep == 0
        || spec.image_keep > spec.image_candidates
        || spec.image_keep > Modality::Image.max_prompts()
    {
        return Err(Error::InvalidArgument(format!(
            "keeping {} of {} image candidates",
            spec.image_keep, spec.image_candidates
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dict = PromptDictionary::new(spec.text_dim, spec.image_dim);
    for c in 0..n_classes as u32 {
        let cat = CategoryId(c);
        let text_proto = gaussian_direction(spec.text_dim, &mut rng);
        let image_proto = gaussian_direction(spec.image_dim, &mut rng);
        let n_text = rng.gen_range(lo..=hi);
        for p in 0..n_text {
            let raw = noisy(&text_proto, spec.text_noise, &mut rng);
            dict.insert(PromptEmbedding::new(cat, Modality::Text, p as u32, raw)?)?;
        }
        let candidates: Vec<(PromptEmbedding, f64)> = (0..spec.image_candidates)
            .map(|p| {
                let raw = noisy(&image_proto, spec.image_noise, &mut rng);
                let score = cosine(&raw, &image_proto);
                Ok((
                    PromptEmbedding::new(cat, Modality::Image, p as u32, raw)?,
                    score,
                ))
            })
            .collect::<Result<_>>()?;
        for e in select_image_prompts(candidates, spec.image_keep) {
            dict.insert(e)?;
        }
    }
    Ok(dict)
}

/// Stand-in for an external image-text model: cosine between the mean
/// texture signature of the cells inside each detection and the signature
/// of its predicted class. Boxes covering no cell center score 0.
pub fn simulated_similarities(
    scene: &SyntheticScene,
    detections: &[Detection],
    palette: &TexturePalette,
    offset: usize,
    provider: &mut SimilarityProvider,
) -> Result<()> {
    let centers = scene.centers();
    for (k, d) in detections.iter().enumerate() {
        let mut mean = [0.0; SIGNATURE_DIM];
        let mut n = 0usize;
        for (i, &c) in centers.iter().enumerate() {
            if d.obb.contains(c) {
                let row = scene.field.row(i);
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                n += 1;
            }
        }
        let sig = palette
            .signatures
            .get(d.category.0 as usize)
            .ok_or_else(|| Error::UnknownCategory(format!("#{}", d.category)))?;
        let sim = if n == 0 { 0.0 } else { cosine(&mean, sig) };
        provider.insert(&scene.image_id, offset + k, d.category, sim)?;
    }
    Ok(())
}
