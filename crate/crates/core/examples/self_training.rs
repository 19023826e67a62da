//! Withholds one class from most training scenes, trains a baseline,
//! pseudo-labels the under-labeled scenes and retrains on the mix.
//! Pass an iteration count per run (default 400).

use orsd::harness::{run_self_training, RunConfig, ToyData};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = RunConfig::default();
    cfg.train.iterations = match std::env::args().nth(1) {
        Some(n) => n.parse()?,
        None => 400,
    };
    let data = ToyData::generate(&cfg)?;
    let report = run_self_training(&cfg, &data, |run, l| {
        if l.iteration % 100 == 0 {
            println!("{run:8} {:5}  loss {:.4}", l.iteration, l.loss);
        }
    })?;
    println!(
        "baseline  AP50 {:.4} per class {:?}",
        report.baseline.mean, report.baseline.per_class
    );
    println!(
        "pseudo labels: {} boxes in {} records",
        report.pseudo_boxes,
        report.records.len()
    );
    println!(
        "retrained AP50 {:.4} per class {:?}",
        report.retrained.mean, report.retrained.per_class
    );
    Ok(())
}
