//! Prompt embeddings: storage, projection, sampling and clustering.
//!
//! Raw embeddings come from external encoders and are treated as opaque
//! vectors. Text and image prompts may have different raw widths; both are
//! projected into the model's shared space by a per-modality two-layer MLP.

mod kmeans;
mod sampling;

pub use kmeans::{cluster_prompts, kmeans, KMeansResult, KMEANS_MAX_ITERS, KMEANS_TOL};
pub use sampling::{
    inference_prompts, sample_training_prompts, sample_training_prompts_range,
    sample_training_prompts_with, select_image_prompts, PromptBatch, DEFAULT_NEGATIVES,
    PROMPTS_PER_CATEGORY,
};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::numkit::{Graph, Mlp2, ParamStore, Tensor2D};
use crate::{CategoryId, Error, Result};

/// Most text prompts kept per category.
pub const MAX_TEXT_PROMPTS: usize = 15;
/// Most image prompts kept per category.
pub const MAX_IMAGE_PROMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Text, Modality::Image];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }

    pub fn max_prompts(self) -> usize {
        match self {
            Modality::Text => MAX_TEXT_PROMPTS,
            Modality::Image => MAX_IMAGE_PROMPTS,
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            other => Err(Error::InvalidArgument(format!(
                "unknown modality `{other}`"
            ))),
        }
    }
}

/// One stored prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding {
    pub category: CategoryId,
    pub modality: Modality,
    pub prompt_id: u32,
    raw: Vec<f64>,
    projected: Option<Vec<f64>>,
}

impl PromptEmbedding {
    pub fn new(
        category: CategoryId,
        modality: Modality,
        prompt_id: u32,
        raw: Vec<f64>,
    ) -> Result<Self> {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite prompt embedding for category {category}"
            )));
        }
        if raw.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidArgument(format!(
                "all-zero prompt embedding for category {category}"
            )));
        }
        Ok(Self {
            category,
            modality,
            prompt_id,
            raw,
            projected: None,
        })
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn projected(&self) -> Option<&[f64]> {
        self.projected.as_deref()
    }

    pub(crate) fn with_projected(mut self, p: Vec<f64>) -> Self {
        self.projected = Some(p);
        self
    }
}

/// Offline prompt store, indexed by category and modality.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptDictionary {
    text_dim: usize,
    image_dim: usize,
    entries: Vec<PromptEmbedding>,
    index: BTreeMap<(CategoryId, Modality), Vec<usize>>,
}

impl PromptDictionary {
    pub fn new(text_dim: usize, image_dim: usize) -> Self {
        Self {
            text_dim,
            image_dim,
            ..Self::default()
        }
    }

    pub fn text_dim(&self) -> usize {
        self.text_dim
    }

    pub fn image_dim(&self) -> usize {
        self.image_dim
    }

    pub fn raw_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text_dim,
            Modality::Image => self.image_dim,
        }
    }

    pub fn insert(&mut self, e: PromptEmbedding) -> Result<()> {
        if e.raw.len() != self.raw_dim(e.modality) {
            return Err(Error::shape(
                "PromptDictionary::insert",
                format!(
                    "{} prompt of width {} in a dictionary declaring {}",
                    e.modality.as_str(),
                    e.raw.len(),
                    self.raw_dim(e.modality)
                ),
            ));
        }
        let slot = self.index.entry((e.category, e.modality)).or_default();
        if slot
            .iter()
            .any(|&i| self.entries[i].prompt_id == e.prompt_id)
        {
            return Err(Error::InvalidArgument(format!(
                "duplicate prompt ({}, {}, {})",
                e.category,
                e.modality.as_str(),
                e.prompt_id
            )));
        }
        if slot.len() >= e.modality.max_prompts() {
            return Err(Error::InvalidArgument(format!(
                "category {} already holds {} {} prompts",
                e.category,
                slot.len(),
                e.modality.as_str()
            )));
        }
        slot.push(self.entries.len());
        self.entries.push(e);
        Ok(())
    }

    pub fn entries(&self) -> &[PromptEmbedding] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Prompts stored for one category and modality, in insertion order.
    pub fn prompts(&self, c: CategoryId, m: Modality) -> impl Iterator<Item = &PromptEmbedding> {
        self.index
            .get(&(c, m))
            .into_iter()
            .flatten()
            .map(move |&i| &self.entries[i])
    }

    pub fn count(&self, c: CategoryId, m: Modality) -> usize {
        self.index.get(&(c, m)).map_or(0, Vec::len)
    }

    /// Categories holding at least one prompt of modality `m`, ascending.
    pub fn categories(&self, m: Modality) -> BTreeSet<CategoryId> {
        self.index
            .keys()
            .filter(|(_, mm)| *mm == m)
            .map(|(c, _)| *c)
            .collect()
    }

    /// All categories across modalities.
    pub fn all_categories(&self) -> BTreeSet<CategoryId> {
        self.index.keys().map(|(c, _)| *c).collect()
    }

    pub fn modality_counts(&self) -> BTreeMap<Modality, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.modality).or_insert(0) += 1;
        }
        out
    }
}

/// Per-modality projection into the shared prompt space.
#[derive(Debug, Clone, Copy)]
pub struct Projector {
    pub modality: Modality,
    pub mlp: Mlp2,
}

impl Projector {
    pub fn in_dim(&self) -> usize {
        self.mlp.fc1.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.fc2.out_dim
    }
}

/// Returns `e` with `projected = MLP(raw)`.
pub fn project(
    e: &PromptEmbedding,
    projector: &Projector,
    store: &ParamStore,
) -> Result<PromptEmbedding> {
    if e.modality != projector.modality {
        return Err(Error::InvalidArgument(format!(
            "{} projector applied to a {} prompt",
            projector.modality.as_str(),
            e.modality.as_str()
        )));
    }
    if e.raw.len() != projector.in_dim() {
        return Err(Error::shape(
            "project",
            format!(
                "raw width {} vs projector input {}",
                e.raw.len(),
                projector.in_dim()
            ),
        ));
    }
    let mut g = Graph::new(store);
    let x = g.input(Tensor2D::row_vector(&e.raw)?);
    let y = projector.mlp.forward(&mut g, x)?;
    Ok(e.clone().with_projected(g.value(y).data().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn projector(in_dim: usize, out: usize, seed: u64) -> (ParamStore, Projector) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp2::new(&mut store, "proj", in_dim, 2 * out, out, &mut rng).unwrap();
        (
            store,
            Projector {
                modality: Modality::Text,
                mlp,
            },
        )
    }

    #[test]
    fn zero_projector_gives_bias() {
        let (mut store, p) = projector(6, 4, 1);
        for id in [p.mlp.fc1.weight, p.mlp.fc2.weight] {
            let (r, c) = store.get(id).shape();
            store.set(id, Tensor2D::zeros(r, c)).unwrap();
        }
        let e = PromptEmbedding::new(CategoryId(0), Modality::Text, 0, vec![1.0; 6]).unwrap();
        let out = project(&e, &p, &store).unwrap();
        assert_eq!(out.projected().unwrap(), store.get(p.mlp.fc2.bias).data());
        assert_eq!(out.raw(), e.raw());
    }

    #[test]
    fn identity_like_projector_keeps_prefix() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp2::new(&mut store, "proj", 4, 4, 4, &mut rng).unwrap();
        for l in [mlp.fc1, mlp.fc2] {
            store.set(l.weight, Tensor2D::identity(4)).unwrap();
            store.set(l.bias, Tensor2D::zeros(1, 4)).unwrap();
        }
        let p = Projector {
            modality: Modality::Image,
            mlp,
        };
        let e = PromptEmbedding::new(
            CategoryId(1),
            Modality::Image,
            0,
            vec![10.0, 12.0, 15.0, 20.0],
        )
        .unwrap();
        let out = project(&e, &p, &store).unwrap();
        for (a, b) in out.projected().unwrap().iter().zip(e.raw()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn random_projector_matches_mlp_oracle() {
        let (store, p) = projector(5, 3, 3);
        let raw = vec![0.3, -1.2, 0.8, 2.0, -0.4];
        let e = PromptEmbedding::new(CategoryId(0), Modality::Text, 0, raw.clone()).unwrap();
        let got = project(&e, &p, &store).unwrap();
        let (w1, b1) = (store.get(p.mlp.fc1.weight), store.get(p.mlp.fc1.bias));
        let (w2, b2) = (store.get(p.mlp.fc2.weight), store.get(p.mlp.fc2.bias));
        let hidden: Vec<f64> = (0..6)
            .map(|j| {
                let z = b1.get(0, j) + (0..5).map(|k| raw[k] * w1.get(k, j)).sum::<f64>();
                z / (1.0 + (-z).exp())
            })
            .collect();
        for j in 0..3 {
            let e = b2.get(0, j) + (0..6).map(|k| hidden[k] * w2.get(k, j)).sum::<f64>();
            assert!((got.projected().unwrap()[j] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_errors() {
        let (store, p) = projector(5, 3, 3);
        let wrong_mod =
            PromptEmbedding::new(CategoryId(0), Modality::Image, 0, vec![1.0; 5]).unwrap();
        assert!(project(&wrong_mod, &p, &store).is_err());
        let wrong_dim =
            PromptEmbedding::new(CategoryId(0), Modality::Text, 0, vec![1.0; 4]).unwrap();
        assert!(project(&wrong_dim, &p, &store).is_err());
    }

    #[test]
    fn dictionary_invariants() {
        let mut d = PromptDictionary::new(3, 2);
        let e = |c, m, id, n| PromptEmbedding::new(CategoryId(c), m, id, vec![1.0; n]).unwrap();
        d.insert(e(0, Modality::Text, 0, 3)).unwrap();
        assert!(
            d.insert(e(0, Modality::Text, 0, 3)).is_err(),
            "duplicate id"
        );
        assert!(
            d.insert(e(0, Modality::Image, 0, 3)).is_err(),
            "wrong width"
        );
        for id in 1..15 {
            d.insert(e(0, Modality::Text, id, 3)).unwrap();
        }
        assert!(d.insert(e(0, Modality::Text, 99, 3)).is_err(), "text cap");
        for id in 0..100 {
            d.insert(e(1, Modality::Image, id, 2)).unwrap();
        }
        assert!(
            d.insert(e(1, Modality::Image, 100, 2)).is_err(),
            "image cap"
        );
        assert_eq!(d.count(CategoryId(0), Modality::Text), 15);
        assert_eq!(
            d.categories(Modality::Image),
            BTreeSet::from([CategoryId(1)])
        );
        assert!(PromptEmbedding::new(CategoryId(0), Modality::Text, 0, vec![0.0; 3]).is_err());
    }
}
