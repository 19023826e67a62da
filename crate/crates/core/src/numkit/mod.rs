//! Dense numeric kernels with reverse-mode differentiation.
//!
//! [`Tensor2D`] is the only value type. Differentiable code runs on a
//! [`Graph`], which binds a [`Tape`] to a [`ParamStore`]; after
//! [`Tape::backward`] the gradient of every parameter is available through
//! [`Graph::param_grads`]. [`grad_check`] compares those gradients with
//! central finite differences.

mod nn;
mod params;
mod tape;
mod tensor;

pub use nn::{LayerNorm, Linear, Mhca, Mlp2};
pub use params::{Graph, ParamId, ParamStore};
pub use tape::{FocalParams, Gradients, Tape, Var};
pub use tensor::{matmul, Tensor2D};

pub(crate) use tape::sigmoid;

use rand::Rng;

use crate::{Error, Result};

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor2D) -> Tensor2D {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Layer normalization without a tape.
pub fn layer_norm(x: &Tensor2D, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor2D> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let g = tape.leaf(Tensor2D::row_vector(gamma)?);
    let b = tape.leaf(Tensor2D::row_vector(beta)?);
    let y = tape.layer_norm(xv, g, b, eps)?;
    Ok(tape.value(y).clone())
}

/// Denominator floor of the relative error used by [`grad_check`].
///
/// A central difference with `h = 1e-5` in f64 carries roughly 1e-10 of
/// rounding noise on deep graphs, so smaller gradients are compared on this
/// absolute scale instead of their own magnitude.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// Result of a finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Central-difference check of every parameter entry of `store` against
/// the reverse-mode gradient of the scalar built by `f`.
pub fn grad_check<F>(store: &ParamStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    grad_check_entries(store, h, &f, |_, n| (0..n).collect())
}

/// Like [`grad_check`] but probes at most `per_param` random entries of each
/// parameter, for models too large to probe exhaustively.
pub fn grad_check_sampled<F, R>(
    store: &ParamStore,
    h: f64,
    per_param: usize,
    rng: &mut R,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
    R: Rng,
{
    let mut picks = Vec::new();
    for id in store.ids() {
        let n = store.get(id).len();
        let p: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.gen_range(0..n)).collect()
        };
        picks.push(p);
    }
    grad_check_entries(store, h, &f, |id, _| picks[id.0].clone())
}

fn grad_check_entries<F, S>(store: &ParamStore, h: f64, f: &F, select: S) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
    S: Fn(ParamId, usize) -> Vec<usize>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step h must be positive, got {h}"
        )));
    }
    let analytic = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        let grads = g.tape.backward(out)?;
        g.param_grads(&grads)
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let out = f(&mut g)?;
        Ok(g.value(out).item())
    };
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
    };
    for id in store.ids() {
        for k in select(id, store.get(id).len()) {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[id.0].data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((store.name(id).to_string(), k));
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
