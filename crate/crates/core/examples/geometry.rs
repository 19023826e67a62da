//! Rotated boxes: IoU, enclosing boxes and class-agnostic NMS.

use std::f64::consts::FRAC_PI_4;

use orsd::geom::{class_agnostic_nms, rotated_iou, Detection, IouMode, OrientedBox, Source};
use orsd::{CategoryId, Result};

fn main() -> Result<()> {
    let square = OrientedBox::new(0.0, 0.0, 2.0, 2.0, 0.0)?;
    let turned = OrientedBox::new(0.0, 0.0, 2.0, 2.0, FRAC_PI_4)?;
    println!(
        "IoU of a square and its 45 degree turn: {:.4}",
        rotated_iou(&square, &turned)
    );
    let hb = turned.to_hbb();
    println!(
        "enclosing box of the turned square: [{:.3}, {:.3}] x [{:.3}, {:.3}]",
        hb.xmin, hb.xmax, hb.ymin, hb.ymax
    );

    let det = |cx: f64, theta: f64, c: u32, s: f64| {
        Detection::new(
            OrientedBox::new(cx, 10.0, 12.0, 4.0, theta)?,
            CategoryId(c),
            s,
            Source::ModelPrediction,
        )
    };
    let dets = vec![
        det(10.0, 0.0, 0, 0.9)?,
        det(10.5, 0.05, 1, 0.8)?, // near duplicate of the first, other class
        det(10.0, 1.2, 0, 0.7)?,  // same center, crossing orientation
        det(40.0, 0.0, 2, 0.6)?,
    ];
    for mode in [IouMode::Obb, IouMode::Hbb] {
        let kept = class_agnostic_nms(&dets, 0.5, mode);
        let scores: Vec<f64> = kept.iter().map(|d| d.score).collect();
        println!("{mode:?} NMS at 0.5 keeps scores {scores:?}");
    }
    Ok(())
}
