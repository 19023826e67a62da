//! One untrained detector on a synthetic scene: the loss of both heads,
//! their logits under text and image prompts, and decoded detections.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use orsd::harness::{RunConfig, ToyData, ToyDetector, TrainImage, Trainer};
use orsd::heads::InferenceHead;
use orsd::numkit::Graph;
use orsd::promptdict::{inference_prompts, Modality};
use orsd::Result;

fn main() -> Result<()> {
    let mut cfg = RunConfig::default();
    cfg.data.train_scenes = 1;
    cfg.data.eval_scenes = 1;
    let data = ToyData::generate(&cfg)?;
    let model = ToyDetector::new(cfg.model.clone(), 1)?;
    let scene = &data.train[0];
    println!("scene {} with {} objects", scene.image_id, scene.gt.len());

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let image = TrainImage::labeled(0, scene.gt.clone());
    let (batch, slots) = Trainer::draw_prompts(
        &image,
        &data.dict,
        &cfg.train,
        cfg.model.class_slots,
        &mut rng,
    )?;
    let mut g = Graph::new(&model.store);
    let (_, parts) = model.image_loss(&mut g, scene, &scene.gt, &batch, &slots)?;
    println!(
        "training loss with {} {:?} prompts: alignment {:?}, fusion {:?}, total {:.4}",
        batch.len(),
        batch.modality,
        parts.alignment,
        parts.fusion,
        parts.total()
    );

    let grid = model.features(scene)?;
    let all: BTreeSet<_> = data.dict.all_categories();
    for modality in Modality::ALL {
        let prompts = inference_prompts(&all, &data.dict, modality, 5, &mut rng)?;
        for head in [InferenceHead::Alignment, InferenceHead::Fusion] {
            let (out, logits) = model
                .heads
                .infer(&model.store, &grid.cells, &prompts, head)?;
            println!(
                "{modality:?}/{head:?}: logits {}x{}, alpha {:.3}, beta {:.3}",
                logits.rows(),
                logits.cols(),
                out.alpha,
                out.beta
            );
        }
        let dets = model.detect(scene, &prompts, InferenceHead::Fusion, 0.05, 0.5)?;
        println!("  {} detections above 0.05 before any training", dets.len());
    }
    Ok(())
}
