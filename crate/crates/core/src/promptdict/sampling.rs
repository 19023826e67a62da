use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Modality, PromptDictionary, PromptEmbedding};
use crate::{CategoryId, Error, Result};

/// Inclusive range of prompts drawn per category during training.
pub const PROMPTS_PER_CATEGORY: (usize, usize) = (3, 7);
/// Negative categories drawn per training batch when more are available.
pub const DEFAULT_NEGATIVES: usize = 20;
/// Largest prompt count accepted at inference.
pub const MAX_INFERENCE_PROMPTS: usize = 100;

/// Prompts fed to the detection heads for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBatch {
    pub modality: Modality,
    pub prompts: Vec<PromptEmbedding>,
    /// Category of each prompt, parallel to `prompts`.
    pub labels: Vec<CategoryId>,
    pub positives: BTreeSet<CategoryId>,
    pub negatives: BTreeSet<CategoryId>,
}

impl PromptBatch {
    /// Categories in ascending id order; this order defines logit columns.
    pub fn categories(&self) -> Vec<CategoryId> {
        self.labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// For each prompt, the index of its category in [`Self::categories`].
    pub fn label_columns(&self) -> Vec<usize> {
        let cats = self.categories();
        self.labels
            .iter()
            .map(|l| cats.binary_search(l).expect("label is among categories"))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    fn push_category<R: Rng + ?Sized>(
        &mut self,
        dict: &PromptDictionary,
        c: CategoryId,
        k: usize,
        rng: &mut R,
    ) {
        let pool: Vec<&PromptEmbedding> = dict.prompts(c, self.modality).collect();
        for e in draw(&pool, k, rng) {
            self.labels.push(c);
            self.prompts.push(e.clone());
        }
    }
}

/// `k` items from `pool`: without replacement when the pool is large
/// enough, otherwise the whole pool shuffled and topped up by draws with
/// replacement.
fn draw<'a, T, R: Rng + ?Sized>(pool: &[&'a T], k: usize, rng: &mut R) -> Vec<&'a T> {
    if pool.len() >= k {
        index::sample(rng, pool.len(), k)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        let mut out: Vec<&T> = pool.to_vec();
        out.shuffle(rng);
        while out.len() < k {
            out.push(pool[rng.gen_range(0..pool.len())]);
        }
        out
    }
}

/// Training batch for an image whose annotated categories are `annotated`.
pub fn sample_training_prompts<R: Rng + ?Sized>(
    annotated: &BTreeSet<CategoryId>,
    dict: &PromptDictionary,
    n_negatives: usize,
    rng: &mut R,
) -> Result<PromptBatch> {
    sample_training_prompts_with(annotated, &BTreeSet::new(), dict, n_negatives, rng)
}

/// Like [`sample_training_prompts`], with `hard_negatives` always included
/// as negatives (on top of the `n_negatives` random ones) when the chosen
/// modality has prompts for them.
pub fn sample_training_prompts_with<R: Rng + ?Sized>(
    annotated: &BTreeSet<CategoryId>,
    hard_negatives: &BTreeSet<CategoryId>,
    dict: &PromptDictionary,
    n_negatives: usize,
    rng: &mut R,
) -> Result<PromptBatch> {
    sample_training_prompts_range(
        annotated,
        hard_negatives,
        dict,
        n_negatives,
        PROMPTS_PER_CATEGORY,
        rng,
    )
}

/// Like [`sample_training_prompts_with`] with an explicit inclusive range
/// of prompts per category.
pub fn sample_training_prompts_range<R: Rng + ?Sized>(
    annotated: &BTreeSet<CategoryId>,
    hard_negatives: &BTreeSet<CategoryId>,
    dict: &PromptDictionary,
    n_negatives: usize,
    per_category: (usize, usize),
    rng: &mut R,
) -> Result<PromptBatch> {
    let (lo, hi) = per_category;
    if lo == 0 || lo > hi {
        return Err(Error::InvalidArgument(format!(
            "prompt range [{lo}, {hi}] is empty or starts at 0"
        )));
    }
    if annotated.is_empty() {
        return Err(Error::Empty("annotated categories"));
    }
    let known = dict.all_categories();
    if let Some(c) = annotated.iter().find(|c| !known.contains(c)) {
        return Err(Error::UnknownCategory(format!("#{c}")));
    }
    // A modality only qualifies if it can supply at least one positive.
    let usable: Vec<Modality> = Modality::ALL
        .into_iter()
        .filter(|&m| annotated.iter().any(|&c| dict.count(c, m) > 0))
        .collect();
    let modality = usable[rng.gen_range(0..usable.len())];

    let available = dict.categories(modality);
    let positives: BTreeSet<CategoryId> = annotated.intersection(&available).copied().collect();
    let mut negatives: BTreeSet<CategoryId> = hard_negatives
        .iter()
        .filter(|c| available.contains(c) && !positives.contains(c))
        .copied()
        .collect();
    let pool: Vec<CategoryId> = available
        .iter()
        .filter(|c| !annotated.contains(c) && !negatives.contains(c))
        .copied()
        .collect();
    let n = n_negatives.min(pool.len());
    negatives.extend(
        index::sample(rng, pool.len(), n)
            .into_iter()
            .map(|i| pool[i]),
    );

    let mut batch = PromptBatch {
        modality,
        prompts: Vec::new(),
        labels: Vec::new(),
        positives,
        negatives,
    };
    let cats: BTreeSet<CategoryId> = batch.positives.union(&batch.negatives).copied().collect();
    for c in cats {
        let k = rng.gen_range(lo..=hi);
        batch.push_category(dict, c, k, rng);
    }
    Ok(batch)
}

/// Prompts for detecting `categories` at inference: `count` per category
/// (1 to 100), without replacement where the dictionary allows.
pub fn inference_prompts<R: Rng + ?Sized>(
    categories: &BTreeSet<CategoryId>,
    dict: &PromptDictionary,
    modality: Modality,
    count: usize,
    rng: &mut R,
) -> Result<PromptBatch> {
    if !(1..=MAX_INFERENCE_PROMPTS).contains(&count) {
        return Err(Error::InvalidArgument(format!(
            "inference prompt count {count} outside 1..={MAX_INFERENCE_PROMPTS}"
        )));
    }
    if categories.is_empty() {
        return Err(Error::Empty("inference categories"));
    }
    let mut batch = PromptBatch {
        modality,
        prompts: Vec::new(),
        labels: Vec::new(),
        positives: categories.clone(),
        negatives: BTreeSet::new(),
    };
    for &c in categories {
        if dict.count(c, modality) == 0 {
            return Err(Error::UnknownCategory(format!(
                "#{c} has no {} prompts",
                modality.as_str()
            )));
        }
        batch.push_category(dict, c, count, rng);
    }
    Ok(batch)
}

/// Highest-scoring `cap` candidates; equal scores keep input order.
pub fn select_image_prompts(
    candidates: Vec<(PromptEmbedding, f64)>,
    cap: usize,
) -> Vec<PromptEmbedding> {
    let mut c = candidates;
    c.sort_by(|a, b| b.1.total_cmp(&a.1));
    c.truncate(cap);
    c.into_iter().map(|(e, _)| e).collect()
}
