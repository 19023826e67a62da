//! A prompt dictionary with text and image prompts, training-time sampling
//! with hard negatives, and inference-time prompt draws.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use orsd::harness::{synthetic_dictionary, DictionarySpec};
use orsd::promptdict::{inference_prompts, sample_training_prompts_with, Modality};
use orsd::{CategoryId, Result};

fn main() -> Result<()> {
    let dict = synthetic_dictionary(6, &DictionarySpec::default(), 11)?;
    println!(
        "{} prompts, per modality {:?}",
        dict.len(),
        dict.modality_counts()
    );
    for c in dict.all_categories() {
        println!(
            "  category {c}: {} text, {} image",
            dict.count(c, Modality::Text),
            dict.count(c, Modality::Image)
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let annotated = BTreeSet::from([CategoryId(0), CategoryId(2)]);
    let hard = BTreeSet::from([CategoryId(4)]);
    let batch = sample_training_prompts_with(&annotated, &hard, &dict, 2, &mut rng)?;
    println!(
        "training batch: {} {:?} prompts",
        batch.len(),
        batch.modality
    );
    for c in batch.categories() {
        let n = batch.labels.iter().filter(|&&l| l == c).count();
        let role = if annotated.contains(&c) {
            "annotated"
        } else if hard.contains(&c) {
            "hard negative"
        } else {
            "random negative"
        };
        println!("  category {c}: {n} prompts ({role})");
    }

    let wanted = BTreeSet::from([CategoryId(1), CategoryId(3)]);
    let inf = inference_prompts(&wanted, &dict, Modality::Image, 5, &mut rng)?;
    println!(
        "inference batch: {} image prompts for {:?}",
        inf.len(),
        inf.categories()
    );
    Ok(())
}
