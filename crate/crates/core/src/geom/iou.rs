use super::{HorizontalBox, OrientedBox, Point};
use crate::{Error, Result};

/// Signed shoelace area; positive for counter-clockwise vertices.
pub fn polygon_area(poly: &[Point]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (i, p) in poly.iter().enumerate() {
        let q = poly[(i + 1) % poly.len()];
        acc += p.x * q.y - q.x * p.y;
    }
    0.5 * acc
}

#[inline]
fn side(a: Point, b: Point, p: Point) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// Sutherland-Hodgman clip of `subject` against the convex, counter-clockwise
/// polygon `clip`. Points on a clip edge count as inside.
pub fn convex_clip(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut out: Vec<Point> = subject.to_vec();
    let mut input = Vec::with_capacity(8);
    for (i, &a) in clip.iter().enumerate() {
        if out.is_empty() {
            break;
        }
        let b = clip[(i + 1) % clip.len()];
        std::mem::swap(&mut input, &mut out);
        out.clear();
        let mut prev = *input.last().unwrap();
        let mut prev_side = side(a, b, prev);
        for &cur in input.iter() {
            let cur_side = side(a, b, cur);
            if cur_side >= 0.0 {
                if prev_side < 0.0 {
                    out.push(crossing(prev, cur, prev_side, cur_side));
                }
                out.push(cur);
            } else if prev_side >= 0.0 {
                out.push(crossing(prev, cur, prev_side, cur_side));
            }
            prev = cur;
            prev_side = cur_side;
        }
    }
    out
}

// Point where segment s->e crosses the clip line; the sides have opposite signs.
#[inline]
fn crossing(s: Point, e: Point, ds: f64, de: f64) -> Point {
    let t = ds / (ds - de);
    Point::new(s.x + t * (e.x - s.x), s.y + t * (e.y - s.y))
}

/// Intersection-over-union of two oriented boxes via exact convex clipping.
///
/// Both boxes have positive area by construction, so the result is always
/// defined. Symmetric up to floating-point rounding.
pub fn rotated_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    if !a.to_hbb().overlaps(&b.to_hbb()) {
        return 0.0;
    }
    let inter = polygon_area(&convex_clip(&a.corners(), &b.corners())).max(0.0);
    let (area_a, area_b) = (a.area(), b.area());
    let inter = inter.min(area_a).min(area_b);
    let union = area_a + area_b - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Axis-aligned IoU. Zero-area inputs are an error.
pub fn hbb_iou(a: &HorizontalBox, b: &HorizontalBox) -> Result<f64> {
    let (area_a, area_b) = (a.area(), b.area());
    if !(area_a > 0.0 && area_b > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "zero-area horizontal box in IoU: {a:?} vs {b:?}"
        )));
    }
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = iw * ih;
    Ok((inter / (area_a + area_b - inter)).clamp(0.0, 1.0))
}
