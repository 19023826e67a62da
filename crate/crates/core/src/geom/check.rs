//! Sampling oracles for the geometry kernels and a combined self-check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::{FRAC_PI_4, PI};

use super::{rotated_iou, HorizontalBox, OrientedBox, Point};
use crate::Result;

/// IoU estimated from `samples` uniform points over the joint bounding
/// rectangle of `a` and `b`.
pub fn monte_carlo_iou<R: Rng + ?Sized>(
    a: &OrientedBox,
    b: &OrientedBox,
    samples: usize,
    rng: &mut R,
) -> f64 {
    let (ha, hb) = (a.to_hbb(), b.to_hbb());
    let (x0, x1) = (ha.xmin.min(hb.xmin), ha.xmax.max(hb.xmax));
    let (y0, y1) = (ha.ymin.min(hb.ymin), ha.ymax.max(hb.ymax));
    let frame = |o: &OrientedBox| {
        let (s, c) = o.theta().sin_cos();
        (o.cx(), o.cy(), 0.5 * o.w(), 0.5 * o.h(), s, c)
    };
    let inside = |(cx, cy, hw, hh, s, c): (f64, f64, f64, f64, f64, f64), p: Point| {
        let (dx, dy) = (p.x - cx, p.y - cy);
        (c * dx + s * dy).abs() <= hw && (-s * dx + c * dy).abs() <= hh
    };
    let (fa, fb) = (frame(a), frame(b));
    let ina = |p| inside(fa, p);
    let inb = |p| inside(fb, p);
    let (mut inter, mut union) = (0u64, 0u64);
    for _ in 0..samples {
        let p = Point::new(rng.gen_range(x0..x1), rng.gen_range(y0..y1));
        let (ia, ib) = (ina(p), inb(p));
        inter += (ia && ib) as u64;
        union += (ia || ib) as u64;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Enclosing box by enumerating the corners.
pub fn hbb_by_corners(b: &OrientedBox) -> HorizontalBox {
    let c = b.corners();
    HorizontalBox {
        xmin: c.iter().map(|p| p.x).fold(f64::INFINITY, f64::min),
        ymin: c.iter().map(|p| p.y).fold(f64::INFINITY, f64::min),
        xmax: c.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max),
        ymax: c.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GeomCheckReport {
    pub pairs: usize,
    pub samples: usize,
    pub max_iou_error: f64,
    pub square_45: f64,
    pub hbb_boxes: usize,
    pub hbb_mismatches: usize,
}

/// Random box pair with overlapping extents, so most IoUs are non-zero.
fn random_pair<R: Rng + ?Sized>(rng: &mut R) -> Result<(OrientedBox, OrientedBox)> {
    let draw = |r: &mut R| {
        OrientedBox::new(
            r.gen_range(-3.0..3.0),
            r.gen_range(-3.0..3.0),
            r.gen_range(1.0..8.0),
            r.gen_range(1.0..8.0),
            r.gen_range(-PI..PI),
        )
    };
    Ok((draw(rng)?, draw(rng)?))
}

/// Exact rotated IoU against Monte-Carlo estimates on `pairs` random pairs,
/// the 45 degree square case, and enclosing boxes against corner
/// enumeration on `boxes` random boxes. Pairs run in parallel, each with
/// its own stream of `seed`.
pub fn geom_check(
    pairs: usize,
    samples: usize,
    boxes: usize,
    seed: u64,
) -> Result<GeomCheckReport> {
    let max_iou_error = (0..pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let (a, b) = random_pair(&mut rng)?;
            Ok((rotated_iou(&a, &b) - monte_carlo_iou(&a, &b, samples, &mut rng)).abs())
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let unit = OrientedBox::new(0.0, 0.0, 2.0, 2.0, 0.0)?;
    let turned = OrientedBox::new(0.0, 0.0, 2.0, 2.0, FRAC_PI_4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hbb_mismatches = 0;
    for _ in 0..boxes {
        let b = OrientedBox::new(
            rng.gen_range(-1e3..1e3),
            rng.gen_range(-1e3..1e3),
            rng.gen_range(0.01..500.0),
            rng.gen_range(0.01..500.0),
            rng.gen_range(-4.0..4.0),
        )?;
        if b.to_hbb() != hbb_by_corners(&b) {
            hbb_mismatches += 1;
        }
    }
    Ok(GeomCheckReport {
        pairs,
        samples,
        max_iou_error,
        square_45: rotated_iou(&unit, &turned),
        hbb_boxes: boxes,
        hbb_mismatches,
    })
}
