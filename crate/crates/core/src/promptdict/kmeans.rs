use rand::Rng;

use super::{Modality, PromptEmbedding};
use crate::{CategoryId, Error, Result};

pub const KMEANS_MAX_ITERS: usize = 100;
/// Lloyd iterations stop once no centroid moves farther than this.
pub const KMEANS_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after each assignment step.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn sse(&self) -> f64 {
        *self.sse_history.last().unwrap_or(&0.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Result<KMeansResult> {
    if points.is_empty() {
        return Err(Error::Empty("k-means input"));
    }
    if k == 0 || k > points.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must lie in 1..={}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::shape("kmeans", "points have different widths"));
    }

    // k-means++: next center drawn with probability proportional to D(x)^2.
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen_range(0.0..total);
            let mut chosen = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }

    let mut assignments = vec![0; points.len()];
    let mut sse_history = Vec::new();
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERS {
        iterations += 1;
        let mut sse = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            assignments[i] = j;
            sse += d;
        }
        sse_history.push(sse);

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&assignments) {
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            // An empty cluster keeps its previous centroid.
            if counts[j] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(sq_dist(&new, &centroids[j]).sqrt());
            centroids[j] = new;
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    let final_sse = points
        .iter()
        .zip(&assignments)
        .map(|(p, &j)| sq_dist(p, &centroids[j]))
        .sum();
    sse_history.push(final_sse);
    Ok(KMeansResult {
        centroids,
        assignments,
        sse_history,
        iterations,
    })
}

/// Clusters unlabeled object embeddings and returns one synthetic image
/// prompt per cluster, its centroid, under category `PSEUDO_BASE + i`.
pub fn cluster_prompts<R: Rng + ?Sized>(
    unlabeled: &[Vec<f64>],
    k: usize,
    rng: &mut R,
) -> Result<Vec<PromptEmbedding>> {
    let res = kmeans(unlabeled, k, rng)?;
    res.centroids
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            PromptEmbedding::new(
                CategoryId(CategoryId::PSEUDO_BASE + i as u32),
                Modality::Image,
                0,
                c,
            )
        })
        .collect()
}
