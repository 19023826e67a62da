//! Pseudo labels for two images: score cut, merge across prompt sets,
//! overlap with annotations against a category tree, and the similarity
//! gate.

use orsd::geom::{Detection, OrientedBox, Source};
use orsd::pseudolabel::{run_pipeline, CategoryTree, FilterConfig, ImageInput, SimilarityProvider};
use orsd::{Result, Vocabulary};

fn main() -> Result<()> {
    let mut vocab = Vocabulary::new();
    let tree = CategoryTree::from_json(
        r#"[{"name": "vehicle", "children": [{"name": "car"}, {"name": "truck"}]},
            {"name": "ship"}, {"name": "harbor"}]"#,
        &mut vocab,
    )?;
    let id = |n: &str| vocab.id(n);
    let pred = |cx: f64, cy: f64, w: f64, h: f64, c: &str, s: f64| -> Result<Detection> {
        Detection::new(
            OrientedBox::new(cx, cy, w, h, 0.1)?,
            id(c)?,
            s,
            Source::ModelPrediction,
        )
    };
    let gt = |cx: f64, cy: f64, w: f64, h: f64, c: &str| -> Result<Detection> {
        Ok(Detection::ground_truth(
            OrientedBox::new(cx, cy, w, h, 0.1)?,
            id(c)?,
        ))
    };

    let inputs = vec![
        ImageInput {
            image_id: "port".into(),
            gt: vec![gt(50.0, 50.0, 60.0, 20.0, "ship")?],
            predictions: vec![
                vec![
                    pred(50.0, 50.0, 60.0, 20.0, "truck", 0.7)?, // over the ship: hard negative
                    pred(150.0, 80.0, 80.0, 40.0, "harbor", 0.9)?, // novel, checked
                ],
                vec![pred(20.0, 120.0, 10.0, 6.0, "car", 0.4)?], // novel, too small to check
            ],
        },
        ImageInput {
            image_id: "road".into(),
            gt: vec![gt(30.0, 30.0, 20.0, 10.0, "car")?],
            predictions: vec![vec![
                pred(30.0, 30.0, 20.0, 10.0, "truck", 0.8)?, // same root as the car
                pred(90.0, 30.0, 40.0, 20.0, "truck", 0.6)?, // fails the similarity gate
                pred(90.0, 90.0, 40.0, 20.0, "ship", 0.2)?,  // below the score cut
            ]],
        },
    ];
    let mut sims = SimilarityProvider::new();
    sims.insert("port", 1, id("harbor")?, 0.31)?;
    sims.insert("road", 1, id("truck")?, 0.12)?;

    let records = run_pipeline(&inputs, &tree, &sims, &FilterConfig::default(), true)?;
    for r in &records {
        println!("{}", r.to_json_line(&vocab)?);
    }
    Ok(())
}
