//! Prompts for unnamed categories from k-means centroids of unlabeled
//! embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use orsd::promptdict::kmeans;
use orsd::Result;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0, 0.15).expect("valid std");
    let centers = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let points: Vec<Vec<f64>> = (0..300)
        .map(|i| {
            centers[i % 3]
                .iter()
                .map(|c| c + noise.sample(&mut rng))
                .collect()
        })
        .collect();

    let res = kmeans(&points, 3, &mut rng)?;
    println!(
        "converged after {} iterations, SSE {:.3}",
        res.iterations,
        res.sse()
    );
    for (k, c) in res.centroids.iter().enumerate() {
        let shown: Vec<String> = c.iter().map(|v| format!("{v:.3}")).collect();
        println!("  cluster-{k}: [{}]", shown.join(", "));
    }
    Ok(())
}
