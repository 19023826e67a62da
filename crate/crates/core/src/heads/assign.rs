use crate::geom::{Detection, OrientedBox, Point};
use crate::numkit::Tensor2D;
use crate::{Error, Result};

/// Per-cell image features of a single-scale grid.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    /// One row per cell, row-major over the grid.
    pub cells: Tensor2D,
    pub centers: Vec<Point>,
    pub stride: f64,
    pub grid_w: usize,
    pub grid_h: usize,
}

impl FeatureGrid {
    /// Cell centers `((i + 0.5) * stride, (j + 0.5) * stride)` in row-major order.
    pub fn centers_for(grid_w: usize, grid_h: usize, stride: f64) -> Vec<Point> {
        let mut out = Vec::with_capacity(grid_w * grid_h);
        for j in 0..grid_h {
            for i in 0..grid_w {
                out.push(Point::new(
                    (i as f64 + 0.5) * stride,
                    (j as f64 + 0.5) * stride,
                ));
            }
        }
        out
    }

    pub fn new(cells: Tensor2D, grid_w: usize, grid_h: usize, stride: f64) -> Result<Self> {
        if cells.rows() != grid_w * grid_h {
            return Err(Error::shape(
                "FeatureGrid::new",
                format!("{} rows for a {grid_w}x{grid_h} grid", cells.rows()),
            ));
        }
        Ok(Self {
            cells,
            centers: Self::centers_for(grid_w, grid_h, stride),
            stride,
            grid_w,
            grid_h,
        })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Cell-to-ground-truth matching.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// Matched ground-truth index per cell; `None` is background.
    pub cell_to_gt: Vec<Option<usize>>,
    pub gt_to_cells: Vec<Vec<usize>>,
}

impl Assignment {
    pub fn num_positive(&self) -> usize {
        self.cell_to_gt.iter().filter(|c| c.is_some()).count()
    }

    pub fn background(n_cells: usize, n_gt: usize) -> Self {
        Self {
            cell_to_gt: vec![None; n_cells],
            gt_to_cells: vec![Vec::new(); n_gt],
        }
    }
}

/// Center sampling: a cell is a candidate for every ground truth whose
/// oriented box contains the cell center, and takes the smallest-area
/// candidate (earliest index on ties).
pub fn assign(gt: &[Detection], centers: &[Point]) -> Assignment {
    let mut out = Assignment::background(centers.len(), gt.len());
    for (ci, &c) in centers.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, d) in gt.iter().enumerate() {
            if !d.hbox.contains(c) || !d.obb.contains(c) {
                continue;
            }
            let area = d.obb.area();
            if best.map_or(true, |(_, a)| area < a) {
                best = Some((gi, area));
            }
        }
        if let Some((gi, _)) = best {
            out.cell_to_gt[ci] = Some(gi);
            out.gt_to_cells[gi].push(ci);
        }
    }
    out
}

/// Regression target layout: 4 HBB values, then 6 OBB values.
pub const HBB_DELTAS: usize = 4;
pub const OBB_DELTAS: usize = 6;
pub const BOX_DELTAS: usize = HBB_DELTAS + OBB_DELTAS;

/// Largest accepted log-size delta when decoding.
const MAX_LOG_SIZE: f64 = 10.0;

/// Stride-normalized `(dcx, dcy, ln w, ln h)` of the enclosing HBB.
pub fn encode_hbb(b: &OrientedBox, anchor: Point, stride: f64) -> [f64; HBB_DELTAS] {
    let h = b.to_hbb();
    let c = h.center();
    [
        (c.x - anchor.x) / stride,
        (c.y - anchor.y) / stride,
        (h.width() / stride).ln(),
        (h.height() / stride).ln(),
    ]
}

/// Stride-normalized `(dcx, dcy, ln w, ln h, sin 2t, cos 2t)`.
pub fn encode_obb(b: &OrientedBox, anchor: Point, stride: f64) -> [f64; OBB_DELTAS] {
    let (s, c) = (2.0 * b.theta()).sin_cos();
    [
        (b.cx() - anchor.x) / stride,
        (b.cy() - anchor.y) / stride,
        (b.w() / stride).ln(),
        (b.h() / stride).ln(),
        s,
        c,
    ]
}

/// Inverse of [`encode_obb`]. The angle comes from `atan2(sin, cos) / 2`.
pub fn decode_obb(d: &[f64], anchor: Point, stride: f64) -> Result<OrientedBox> {
    if d.len() != OBB_DELTAS {
        return Err(Error::shape("decode_obb", format!("{} deltas", d.len())));
    }
    OrientedBox::new(
        anchor.x + d[0] * stride,
        anchor.y + d[1] * stride,
        stride * d[2].clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp(),
        stride * d[3].clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp(),
        0.5 * d[4].atan2(d[5]),
    )
}
