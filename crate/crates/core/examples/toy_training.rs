//! Trains the toy detector on synthetic scenes and reports AP50 per prompt
//! modality and head. Pass an iteration count (default 300).

use orsd::harness::{evaluate, train_toy, EvalSettings, RunConfig};
use orsd::heads::InferenceHead;
use orsd::promptdict::Modality;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = RunConfig::default();
    cfg.train.iterations = match std::env::args().nth(1) {
        Some(n) => n.parse()?,
        None => 300,
    };
    cfg.train.eval_every = 100;
    let (data, out) = train_toy(&cfg, |l| {
        if let Some(ap) = l.ap50 {
            println!(
                "iteration {:5}  loss {:.4}  AP50 {ap:.4}",
                l.iteration, l.loss
            );
        }
    })?;
    for modality in Modality::ALL {
        for head in [InferenceHead::Alignment, InferenceHead::Fusion] {
            let s = EvalSettings {
                modality,
                head,
                ..EvalSettings::from_config(&cfg)
            };
            let r = evaluate(&out.model, &data.eval, &data.dict, &s)?;
            println!(
                "{modality:?}/{head:?}: AP50 {:.4} per class {:?}",
                r.mean, r.per_class
            );
        }
    }
    Ok(())
}
