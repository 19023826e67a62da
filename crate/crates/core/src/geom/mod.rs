//! Rotated-box geometry: corners, enclosing boxes, IoU and NMS.
//!
//! Angles are radians. An [`OrientedBox`] stores `theta` wrapped to
//! `[-pi/2, pi/2)`; a rectangle is unchanged by a half turn, so the wrap
//! loses nothing. `(w, h, theta)` and `(h, w, theta + pi/2)` describe the
//! same region and compare equal under [`rotated_iou`].
//!
//! Corners are returned counter-clockwise in a y-up frame, i.e. with a
//! positive shoelace area. In image coordinates (y down) the same order
//! appears clockwise on screen; nothing here depends on that.

pub mod check;
mod iou;
mod nms;

pub use iou::{convex_clip, hbb_iou, polygon_area, rotated_iou};
pub use nms::{class_agnostic_nms, nms_keep, IouMode};

use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};

use crate::{CategoryId, Error, Result};

/// Smallest admissible side length.
pub const MIN_SIDE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Wraps an angle into `[-pi/2, pi/2)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let mut t = theta - PI * ((theta + FRAC_PI_2) / PI).floor();
    if t >= FRAC_PI_2 {
        t -= PI;
    }
    if t < -FRAC_PI_2 {
        t += PI;
    }
    t
}

/// Rotated rectangle in image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    theta: f64,
}

impl OrientedBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        if !(w > MIN_SIDE && h > MIN_SIDE) {
            return Err(Error::DegenerateBox { w, h });
        }
        if !(cx.is_finite()
            && cy.is_finite()
            && w.is_finite()
            && h.is_finite()
            && theta.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "non-finite box ({cx}, {cy}, {w}, {h}, {theta})"
            )));
        }
        Ok(Self {
            cx,
            cy,
            w,
            h,
            theta: normalize_angle(theta),
        })
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn theta(&self) -> f64 {
        self.theta
    }
    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// The four corners, counter-clockwise (y-up), starting at the
    /// local `(+w/2, -h/2)` corner.
    pub fn corners(&self) -> [Point; 4] {
        let (s, c) = self.theta.sin_cos();
        let hw = 0.5 * self.w;
        let hh = 0.5 * self.h;
        [(hw, -hh), (hw, hh), (-hw, hh), (-hw, -hh)]
            .map(|(lx, ly)| Point::new(self.cx + c * lx - s * ly, self.cy + s * lx + c * ly))
    }

    /// Minimum enclosing horizontal box: the extent of the four corners.
    pub fn to_hbb(&self) -> HorizontalBox {
        let c = self.corners();
        let mut h = HorizontalBox {
            xmin: c[0].x,
            ymin: c[0].y,
            xmax: c[0].x,
            ymax: c[0].y,
        };
        for p in &c[1..] {
            h.xmin = h.xmin.min(p.x);
            h.ymin = h.ymin.min(p.y);
            h.xmax = h.xmax.max(p.x);
            h.ymax = h.ymax.max(p.y);
        }
        h
    }

    /// Whether `p` lies inside or on the boundary of the box.
    pub fn contains(&self, p: Point) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = p.x - self.cx;
        let dy = p.y - self.cy;
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= 0.5 * self.w && ly.abs() <= 0.5 * self.h
    }

    /// Applies a rotation by `angle` about the origin followed by a translation.
    pub fn rigid_motion(&self, angle: f64, tx: f64, ty: f64) -> Result<Self> {
        let (s, c) = angle.sin_cos();
        Self::new(
            c * self.cx - s * self.cy + tx,
            s * self.cx + c * self.cy + ty,
            self.w,
            self.h,
            self.theta + angle,
        )
    }
}

/// Corners of `b`; counter-clockwise, centroid at the box center.
pub fn obb_corners(b: &OrientedBox) -> [Point; 4] {
    b.corners()
}

pub fn obb_to_hbb(b: &OrientedBox) -> HorizontalBox {
    b.to_hbb()
}

/// Axis-aligned box in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizontalBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl HorizontalBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        if !(xmin <= xmax && ymin <= ymax) {
            return Err(Error::InvalidArgument(format!(
                "inverted horizontal box ({xmin}, {ymin}, {xmax}, {ymax})"
            )));
        }
        Ok(Self {
            xmin,
            ymin,
            xmax,
            ymax,
        })
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }
    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
    pub fn center(&self) -> Point {
        Point::new(0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.xmin && p.x <= self.xmax && p.y >= self.ymin && p.y <= self.ymax
    }

    /// The box as a zero-angle oriented box.
    pub fn to_obb(&self) -> Result<OrientedBox> {
        let c = self.center();
        OrientedBox::new(c.x, c.y, self.width(), self.height(), 0.0)
    }

    fn overlaps(&self, other: &HorizontalBox) -> bool {
        self.xmin < other.xmax
            && other.xmin < self.xmax
            && self.ymin < other.ymax
            && other.ymin < self.ymax
    }
}

/// Crop window used to cut image prompts out of a labeled image: `b`
/// scaled about its center by `factor`, clamped to the image.
pub fn prompt_crop_window(
    b: &HorizontalBox,
    factor: f64,
    img_w: u32,
    img_h: u32,
) -> Result<HorizontalBox> {
    if !(factor > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "crop factor must be positive, got {factor}"
        )));
    }
    let c = b.center();
    let hw = 0.5 * b.width() * factor;
    let hh = 0.5 * b.height() * factor;
    let (iw, ih) = (f64::from(img_w), f64::from(img_h));
    HorizontalBox::new(
        (c.x - hw).clamp(0.0, iw),
        (c.y - hh).clamp(0.0, ih),
        (c.x + hw).clamp(0.0, iw),
        (c.y + hh).clamp(0.0, ih),
    )
}

/// Where a detection came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    ModelPrediction,
    GroundTruth,
    PseudoLabel,
}

/// A scored, categorized oriented box together with its enclosing HBB.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub obb: OrientedBox,
    pub hbox: HorizontalBox,
    pub category: CategoryId,
    pub score: f64,
    pub source: Source,
}

impl Detection {
    pub fn new(obb: OrientedBox, category: CategoryId, score: f64, source: Source) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidArgument(format!(
                "detection score {score} outside [0, 1]"
            )));
        }
        Ok(Self {
            hbox: obb.to_hbb(),
            obb,
            category,
            score,
            source,
        })
    }

    pub fn ground_truth(obb: OrientedBox, category: CategoryId) -> Self {
        Self {
            hbox: obb.to_hbb(),
            obb,
            category,
            score: 1.0,
            source: Source::GroundTruth,
        }
    }
}
