//! Reverse-mode differentiation over [`Tensor2D`] values.
//!
//! Every op appends one node holding its output value. Nodes only refer to
//! earlier nodes, so the node list is already in topological order and the
//! backward pass is a single reverse sweep.

use super::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Tensor2D};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddScalar(Var, Var),
    Silu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor2D,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    GroupMaxCols {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Focal {
        logits: Var,
        grad: Tensor2D,
    },
    SmoothL1 {
        pred: Var,
        grad: Tensor2D,
    },
    SupCon {
        sims: Var,
        grad: Tensor2D,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor2D,
    op: Op,
}

/// Record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2D>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor2D> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn same_shape(op: &'static str, a: &Tensor2D, b: &Tensor2D) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn is_scalar(op: &'static str, t: &Tensor2D) -> Result<()> {
    if t.shape() != (1, 1) {
        return Err(Error::shape(
            op,
            format!("expected 1x1, got {:?}", t.shape()),
        ));
    }
    Ok(())
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Focal loss parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

/// Value and logit-gradient of the sigmoid focal loss for one entry.
pub(crate) fn focal_term(x: f64, positive: bool, p: FocalParams) -> (f64, f64) {
    let prob = sigmoid(x);
    let g = p.gamma;
    if positive {
        let log_p = -softplus(-x);
        let q = 1.0 - prob;
        let loss = -p.alpha * q.powf(g) * log_p;
        let grad = p.alpha * q.powf(g) * (g * prob * log_p - q);
        (loss, grad)
    } else {
        let log_q = -softplus(x);
        let loss = -(1.0 - p.alpha) * prob.powf(g) * log_q;
        let grad = (1.0 - p.alpha) * prob.powf(g) * (prob - g * (1.0 - prob) * log_q);
        (loss, grad)
    }
}

/// Smooth-L1 value and derivative.
pub(crate) fn smooth_l1(d: f64, beta: f64) -> (f64, f64) {
    let a = d.abs();
    if a < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (a - 0.5 * beta, d.signum())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2D, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor2D {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor2D) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::shape(
                "matmul_nt",
                format!("{:?} * {:?}^T", av.shape(), bv.shape()),
            ));
        }
        let mut out = Tensor2D::zeros(av.rows(), bv.rows());
        gemm_nt(av, bv, &mut out);
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor2D::from_raw(av.rows(), av.cols(), data);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x + 1 * row` for a `1 x cols` row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", xv.shape(), rv.shape()),
            ));
        }
        let mut out = xv.clone();
        let r = rv.row(0).to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * k).collect();
        let out = Tensor2D::from_raw(xv.rows(), xv.cols(), data);
        self.push(out, Op::Scale(x, k))
    }

    /// Multiplies every entry by the 1x1 value `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        is_scalar("scale_by", self.value(s))?;
        let k = self.value(s).item();
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * k).collect();
        let out = Tensor2D::from_raw(xv.rows(), xv.cols(), data);
        Ok(self.push(out, Op::ScaleBy(x, s)))
    }

    /// Adds the 1x1 value `s` to every entry.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        is_scalar("add_scalar", self.value(s))?;
        let k = self.value(s).item();
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v + k).collect();
        let out = Tensor2D::from_raw(xv.rows(), xv.cols(), data);
        Ok(self.push(out, Op::AddScalar(x, s)))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * sigmoid(v)).collect();
        let out = Tensor2D::from_raw(xv.rows(), xv.cols(), data);
        self.push(out, Op::Silu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = super::softmax_rows(self.value(x));
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Per-row normalization to zero mean and unit variance, then `gamma * . + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if gv.shape() != (1, d) || bv.shape() != (1, d) {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    xv.shape(),
                    gv.shape(),
                    bv.shape()
                ),
            ));
        }
        let mut xhat = Tensor2D::zeros(xv.rows(), d);
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Tensor2D::zeros(xv.rows(), d);
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            let xr = xhat.row_mut(i);
            for (h, v) in xr.iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
            let orow = out.row_mut(i);
            for k in 0..d {
                orow[k] = gv.data()[k] * xhat.get(i, k) + bv.data()[k];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Divides each row by its Euclidean norm (floored at 1e-12).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let n = dot(xv.row(i), xv.row(i)).sqrt().max(1e-12);
            norms.push(n);
            for v in out.row_mut(i) {
                *v /= n;
            }
        }
        self.push(out, Op::L2NormalizeRows { x, norms })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {} columns", start + len, xv.cols()),
            ));
        }
        let mut out = Tensor2D::zeros(xv.rows(), len);
        for i in 0..xv.rows() {
            out.row_mut(i)
                .copy_from_slice(&xv.row(i)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&v| self.value(v).rows())
            .ok_or(Error::Empty("concat_cols"))?;
        if parts.iter().any(|&v| self.value(v).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&v| self.value(v).cols()).sum();
        let mut out = Tensor2D::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(i);
                out.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&v| self.value(v).cols())
            .ok_or(Error::Empty("concat_rows"))?;
        if parts.iter().any(|&v| self.value(v).cols() != cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        let out = Tensor2D::from_raw(rows, cols, data);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} of {}", xv.rows()),
            ));
        }
        let mut out = Tensor2D::zeros(index.len(), xv.cols());
        for (r, &i) in index.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// `out[i][g] = max { x[i][j] : groups[j] == g }` for `g < n_groups`.
    /// Ties pick the lowest column.
    pub fn group_max_cols(&mut self, x: Var, groups: &[usize], n_groups: usize) -> Result<Var> {
        let xv = self.value(x);
        if groups.len() != xv.cols() {
            return Err(Error::shape(
                "group_max_cols",
                format!("{} group labels for {} columns", groups.len(), xv.cols()),
            ));
        }
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
        for (j, &g) in groups.iter().enumerate() {
            if g >= n_groups {
                return Err(Error::shape(
                    "group_max_cols",
                    format!("group {g} >= {n_groups}"),
                ));
            }
            members[g].push(j);
        }
        if let Some(g) = members.iter().position(Vec::is_empty) {
            return Err(Error::InvalidArgument(format!("group {g} has no columns")));
        }
        let mut out = Tensor2D::zeros(xv.rows(), n_groups);
        let mut argmax = Vec::with_capacity(xv.rows() * n_groups);
        for i in 0..xv.rows() {
            let row = xv.row(i);
            for (g, cols) in members.iter().enumerate() {
                let mut best = cols[0];
                for &j in &cols[1..] {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                out.set(i, g, row[best]);
                argmax.push(best);
            }
        }
        Ok(self.push(out, Op::GroupMaxCols { x, argmax }))
    }

    /// Sum of all entries, as a 1x1 value.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor2D::scalar(s), Op::Sum(x))
    }

    /// Sigmoid focal loss summed over all entries and divided by `normalizer`.
    /// `targets` holds 0/1 labels with the same shape as `logits`.
    pub fn focal_loss(
        &mut self,
        logits: Var,
        targets: &Tensor2D,
        params: FocalParams,
        normalizer: f64,
    ) -> Result<Var> {
        same_shape("focal_loss", self.value(logits), targets)?;
        let lv = self.value(logits);
        let mut grad = Tensor2D::zeros(lv.rows(), lv.cols());
        let mut total = 0.0;
        for (k, (&x, &t)) in lv.data().iter().zip(targets.data()).enumerate() {
            let (l, g) = focal_term(x, t > 0.5, params);
            total += l;
            grad.data_mut()[k] = g / normalizer;
        }
        Ok(self.push(
            Tensor2D::scalar(total / normalizer),
            Op::Focal { logits, grad },
        ))
    }

    /// Smooth-L1 between `pred` and `target`, over rows with nonzero weight,
    /// summed over columns and divided by `normalizer`.
    pub fn smooth_l1_loss(
        &mut self,
        pred: Var,
        target: &Tensor2D,
        row_weight: &[f64],
        beta: f64,
        normalizer: f64,
    ) -> Result<Var> {
        let pv = self.value(pred);
        same_shape("smooth_l1_loss", pv, target)?;
        if row_weight.len() != pv.rows() {
            return Err(Error::shape("smooth_l1_loss", "row weights length"));
        }
        let mut grad = Tensor2D::zeros(pv.rows(), pv.cols());
        let mut total = 0.0;
        for i in 0..pv.rows() {
            let w = row_weight[i];
            if w == 0.0 {
                continue;
            }
            for j in 0..pv.cols() {
                let (l, g) = smooth_l1(pv.get(i, j) - target.get(i, j), beta);
                total += w * l;
                grad.set(i, j, w * g / normalizer);
            }
        }
        Ok(self.push(
            Tensor2D::scalar(total / normalizer),
            Op::SmoothL1 { pred, grad },
        ))
    }

    /// Supervised contrastive loss over a square matrix of temperature-scaled
    /// similarities: row `j` holds anchor `j` against every prompt `k`.
    ///
    /// For each anchor the contrast set is every prompt except `j` itself and
    /// the positives are those sharing `labels[j]`. Anchors without positives
    /// are skipped; the result is the mean over the remaining anchors (0 if
    /// there are none).
    pub fn supcon_from_sims(&mut self, sims: Var, labels: &[usize]) -> Result<Var> {
        self.supcon_from_sims_masked(sims, labels, &vec![true; labels.len()])
    }

    /// [`Self::supcon_from_sims`] restricted to the rows with `is_anchor`
    /// set; the other rows get no loss and no gradient but stay in every
    /// contrast set.
    pub fn supcon_from_sims_masked(
        &mut self,
        sims: Var,
        labels: &[usize],
        is_anchor: &[bool],
    ) -> Result<Var> {
        let sv = self.value(sims);
        let m = labels.len();
        if sv.shape() != (m, m) || is_anchor.len() != m {
            return Err(Error::shape(
                "supcon",
                format!("{:?} similarities for {m} prompts", sv.shape()),
            ));
        }
        let mut grad = Tensor2D::zeros(m, m);
        let mut total = 0.0;
        let mut anchors = 0usize;
        let mut probs = vec![0.0; m];
        for j in 0..m {
            let n_pos = (0..m).filter(|&k| k != j && labels[k] == labels[j]).count();
            if n_pos == 0 || !is_anchor[j] {
                continue;
            }
            anchors += 1;
            let row = sv.row(j);
            let mx = (0..m)
                .filter(|&k| k != j)
                .map(|k| row[k])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..m {
                probs[k] = if k == j { 0.0 } else { (row[k] - mx).exp() };
                z += probs[k];
            }
            let lse = mx + z.ln();
            let mut lj = 0.0;
            for k in 0..m {
                if k != j && labels[k] == labels[j] {
                    lj -= row[k] - lse;
                }
            }
            total += lj / n_pos as f64;
            for k in 0..m {
                if k == j {
                    continue;
                }
                let pos = if labels[k] == labels[j] {
                    1.0 / n_pos as f64
                } else {
                    0.0
                };
                grad.set(j, k, probs[k] / z - pos);
            }
        }
        let loss = if anchors == 0 {
            0.0
        } else {
            let inv = 1.0 / anchors as f64;
            for g in grad.data_mut() {
                *g *= inv;
            }
            total * inv
        };
        Ok(self.push(Tensor2D::scalar(loss), Op::SupCon { sims, grad }))
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        is_scalar("backward", self.value(output))?;
        let mut grads: Vec<Option<Tensor2D>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor2D::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor2D>], v: Var, g: Tensor2D) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Tensor2D::zeros(av.rows(), av.cols());
                    gemm_nt(&dy, bv, &mut da);
                    let mut db = Tensor2D::zeros(bv.rows(), bv.cols());
                    gemm_tn(av, &dy, &mut db);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulNt(a, b) => {
                    // y = a b^T: da = dy b, db = dy^T a
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Tensor2D::zeros(av.rows(), av.cols());
                    gemm_nn(&dy, bv, &mut da);
                    let mut db = Tensor2D::zeros(bv.rows(), bv.cols());
                    gemm_tn(&dy, av, &mut db);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, dy);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = zip_map(&dy, bv, |g, y| g * y);
                    let db = zip_map(&dy, av, |g, x| g * x);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddRow(x, row) => {
                    let mut dr = Tensor2D::zeros(1, dy.cols());
                    for i in 0..dy.rows() {
                        for (d, g) in dr.row_mut(0).iter_mut().zip(dy.row(i)) {
                            *d += g;
                        }
                    }
                    acc(&mut grads, *row, dr);
                    acc(&mut grads, *x, dy);
                }
                Op::Scale(x, k) => {
                    let k = *k;
                    let dx = map(&dy, |g| g * k);
                    acc(&mut grads, *x, dx);
                }
                Op::ScaleBy(x, s) => {
                    let k = self.value(*s).item();
                    let ds = dot(dy.data(), self.value(*x).data());
                    acc(&mut grads, *s, Tensor2D::scalar(ds));
                    acc(&mut grads, *x, map(&dy, |g| g * k));
                }
                Op::AddScalar(x, s) => {
                    let ds = dy.data().iter().sum();
                    acc(&mut grads, *s, Tensor2D::scalar(ds));
                    acc(&mut grads, *x, dy);
                }
                Op::Silu(x) => {
                    let dx = zip_map(&dy, self.value(*x), |g, v| {
                        let s = sigmoid(v);
                        g * s * (1.0 + v * (1.0 - s))
                    });
                    acc(&mut grads, *x, dx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut dx = Tensor2D::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), dy.row(i));
                        let s = dot(yr, gr);
                        for (k, d) in dx.row_mut(i).iter_mut().enumerate() {
                            *d = yr[k] * (gr[k] - s);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let d = xhat.cols();
                    let mut dgamma = Tensor2D::zeros(1, d);
                    let mut dbeta = Tensor2D::zeros(1, d);
                    let mut dx = Tensor2D::zeros(xhat.rows(), d);
                    let mut dxhat = vec![0.0; d];
                    for i in 0..xhat.rows() {
                        let (gr, hr) = (dy.row(i), xhat.row(i));
                        for k in 0..d {
                            dgamma.data_mut()[k] += gr[k] * hr[k];
                            dbeta.data_mut()[k] += gr[k];
                            dxhat[k] = gr[k] * gv.data()[k];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2 = dot(&dxhat, hr);
                        let scale = inv_std[i] / d as f64;
                        for (k, o) in dx.row_mut(i).iter_mut().enumerate() {
                            *o = scale * (d as f64 * dxhat[k] - s1 - hr[k] * s2);
                        }
                    }
                    acc(&mut grads, *gamma, dgamma);
                    acc(&mut grads, *beta, dbeta);
                    acc(&mut grads, *x, dx);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut dx = Tensor2D::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), dy.row(i));
                        let s = dot(yr, gr);
                        for (k, d) in dx.row_mut(i).iter_mut().enumerate() {
                            *d = (gr[k] - yr[k] * s) / norms[i];
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor2D::zeros(xv.rows(), xv.cols());
                    for i in 0..dy.rows() {
                        dx.row_mut(i)[*start..*start + dy.cols()].copy_from_slice(dy.row(i));
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        let mut dp = Tensor2D::zeros(dy.rows(), c);
                        for i in 0..dy.rows() {
                            dp.row_mut(i).copy_from_slice(&dy.row(i)[off..off + c]);
                        }
                        off += c;
                        acc(&mut grads, p, dp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    let cols = dy.cols();
                    for &p in parts {
                        let r = self.value(p).rows();
                        let dp = Tensor2D::from_raw(
                            r,
                            cols,
                            dy.data()[off * cols..(off + r) * cols].to_vec(),
                        );
                        off += r;
                        acc(&mut grads, p, dp);
                    }
                }
                Op::GatherRows { x, index } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor2D::zeros(xv.rows(), xv.cols());
                    for (r, &i) in index.iter().enumerate() {
                        for (d, g) in dx.row_mut(i).iter_mut().zip(dy.row(r)) {
                            *d += g;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::GroupMaxCols { x, argmax } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor2D::zeros(xv.rows(), xv.cols());
                    let g = dy.cols();
                    for i in 0..dy.rows() {
                        for c in 0..g {
                            let j = argmax[i * g + c];
                            let v = dx.get(i, j) + dy.get(i, c);
                            dx.set(i, j, v);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    let dx = Tensor2D::filled(xv.rows(), xv.cols(), dy.item());
                    acc(&mut grads, *x, dx);
                }
                Op::Focal { logits: x, grad }
                | Op::SmoothL1 { pred: x, grad }
                | Op::SupCon { sims: x, grad } => {
                    let k = dy.item();
                    acc(&mut grads, *x, map(grad, |g| g * k));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn map(t: &Tensor2D, f: impl Fn(f64) -> f64) -> Tensor2D {
    Tensor2D::from_raw(t.rows(), t.cols(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip_map(a: &Tensor2D, b: &Tensor2D, f: impl Fn(f64, f64) -> f64) -> Tensor2D {
    Tensor2D::from_raw(
        a.rows(),
        a.cols(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}
