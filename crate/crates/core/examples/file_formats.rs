//! Writes synthetic annotations, predictions, similarities and a prompt
//! dictionary to a directory and reads them back.

use std::fs;

use orsd::geom::{Detection, Source};
use orsd::harness::io::{
    read_annotations, read_dictionary, read_predictions, read_similarities, write_annotations,
    write_dictionary, write_predictions, write_similarities, Annotation, PredictionSet,
};
use orsd::harness::{RunConfig, ToyData};
use orsd::Vocabulary;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "orsd-files".into());
    fs::create_dir_all(&dir)?;
    let mut cfg = RunConfig::default();
    cfg.data.train_scenes = 4;
    cfg.data.eval_scenes = 1;
    let data = ToyData::generate(&cfg)?;

    let anns: Vec<Annotation> = data.train.iter().map(Annotation::from_scene).collect();
    // Stand-in predictions: the annotations themselves at a fixed score.
    let preds: Vec<PredictionSet> = anns
        .iter()
        .map(|a| PredictionSet {
            image_id: a.image_id.clone(),
            detections: a
                .gt
                .iter()
                .map(|g| Detection {
                    score: 0.75,
                    source: Source::ModelPrediction,
                    ..g.clone()
                })
                .collect(),
        })
        .collect();
    let sims: Vec<(&str, usize, &str, f64)> = anns
        .iter()
        .flat_map(|a| {
            a.gt.iter().enumerate().map(|(i, g)| {
                (
                    a.image_id.as_str(),
                    i,
                    data.palette.names[g.category.0 as usize].as_str(),
                    0.5,
                )
            })
        })
        .collect();

    let files = [
        ("dictionary.tsv", write_dictionary(&data.dict, &data.vocab)?),
        ("annotations.jsonl", write_annotations(&anns, &data.vocab)?),
        ("predictions.jsonl", write_predictions(&preds, &data.vocab)?),
        ("similarities.jsonl", write_similarities(sims)?),
    ];
    for (name, text) in &files {
        fs::write(format!("{dir}/{name}"), text)?;
        println!("wrote {dir}/{name} ({} lines)", text.lines().count());
    }

    let mut vocab = Vocabulary::new();
    let read = |n: &str| fs::read_to_string(format!("{dir}/{n}"));
    let dict = read_dictionary(&read("dictionary.tsv")?, "dictionary.tsv", &mut vocab)?;
    let anns2 = read_annotations(&read("annotations.jsonl")?, "annotations.jsonl", &mut vocab)?;
    let preds2 = read_predictions(&read("predictions.jsonl")?, "predictions.jsonl", &mut vocab)?;
    let sims2 = read_similarities(
        &read("similarities.jsonl")?,
        "similarities.jsonl",
        &mut vocab,
    )?;
    println!(
        "read back {} prompts, {} annotated images, {} prediction sets, {} similarities; annotations equal: {}",
        dict.len(),
        anns2.len(),
        preds2.len(),
        sims2.len(),
        anns2 == anns
    );
    Ok(())
}
