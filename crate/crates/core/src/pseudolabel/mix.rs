use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Chance of drawing from the pseudo-labeled set: half the labeled rate.
pub const PSEUDO_FRACTION: f64 = 1.0 / 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Labeled,
    Pseudo,
}

/// Endless stream of `(source, index)` draws, labeled:pseudo = 2:1.
#[derive(Debug, Clone)]
pub struct MixSampler {
    labeled: usize,
    pseudo: usize,
    rng: ChaCha8Rng,
}

impl MixSampler {
    pub fn new(labeled_size: usize, pseudo_size: usize, seed: u64) -> Self {
        Self {
            labeled: labeled_size,
            pseudo: pseudo_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Iterator for MixSampler {
    type Item = (DataSource, usize);

    fn next(&mut self) -> Option<Self::Item> {
        let use_pseudo =
            self.pseudo > 0 && (self.labeled == 0 || self.rng.gen_bool(PSEUDO_FRACTION));
        if use_pseudo {
            Some((DataSource::Pseudo, self.rng.gen_range(0..self.pseudo)))
        } else if self.labeled > 0 {
            Some((DataSource::Labeled, self.rng.gen_range(0..self.labeled)))
        } else {
            None
        }
    }
}

/// Convenience constructor matching the other samplers.
pub fn mix_sampler(labeled_size: usize, pseudo_size: usize, seed: u64) -> MixSampler {
    MixSampler::new(labeled_size, pseudo_size, seed)
}
