use super::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

// Plain-loop helpers used as oracles; none of them touch the tape.

fn oracle_linear(x: &Tensor2D, w: &Tensor2D, b: &Tensor2D) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|i| {
            (0..w.cols())
                .map(|j| {
                    b.get(0, j)
                        + (0..x.cols())
                            .map(|k| x.get(i, k) * w.get(k, j))
                            .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

fn to_tensor(rows: Vec<Vec<f64>>) -> Tensor2D {
    Tensor2D::from_rows(&rows).unwrap()
}

#[test]
fn layer_norm_constant_row_is_zero() {
    let x = Tensor2D::filled(1, 6, 3.5);
    let y = layer_norm(&x, &[1.0; 6], &[0.0; 6], 1e-5).unwrap();
    assert!(y.data().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn layer_norm_standardized_row_is_kept() {
    let x = Tensor2D::row_vector(&[1.0, -1.0, 1.0, -1.0]).unwrap();
    let eps = 1e-12;
    let y = layer_norm(&x, &[1.0; 4], &[0.0; 4], eps).unwrap();
    assert!(y.max_abs_diff(&x) < 1e-11);
}

#[test]
fn layer_norm_matches_direct_formula() {
    let mut r = rng(1);
    let x = Tensor2D::uniform(3, 9, 2.0, &mut r);
    let gamma: Vec<f64> = (0..9).map(|k| 0.5 + 0.1 * k as f64).collect();
    let beta: Vec<f64> = (0..9).map(|k| -0.2 * k as f64).collect();
    let y = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
    for i in 0..3 {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / 9.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
        for k in 0..9 {
            let e = gamma[k] * (row[k] - mean) / (var + 1e-5).sqrt() + beta[k];
            assert!((y.get(i, k) - e).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_closed_forms() {
    let x = Tensor2D::row_vector(&[2.0, 2.0, 2.0, 2.0]).unwrap();
    assert!(softmax_rows(&x)
        .data()
        .iter()
        .all(|v| (v - 0.25).abs() < 1e-15));
    let y = softmax_rows(&Tensor2D::row_vector(&[0.0, 3f64.ln()]).unwrap());
    assert!((y.get(0, 0) - 0.25).abs() < 1e-15 && (y.get(0, 1) - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_matches_direct_exp() {
    let mut r = rng(2);
    let x = Tensor2D::uniform(4, 7, 5.0, &mut r);
    let y = softmax_rows(&x);
    for i in 0..4 {
        let z: f64 = x.row(i).iter().map(|v| v.exp()).sum();
        for k in 0..7 {
            assert!((y.get(i, k) - x.get(i, k).exp() / z).abs() < 1e-12);
        }
    }
}

fn build_mhca(dim: usize, heads: usize, seed: u64) -> (ParamStore, Mhca) {
    let mut store = ParamStore::new();
    let m = Mhca::new(&mut store, "attn", dim, heads, &mut rng(seed)).unwrap();
    (store, m)
}

fn run_mhca(store: &ParamStore, m: &Mhca, q: &Tensor2D, kv: &Tensor2D) -> Tensor2D {
    let mut g = Graph::new(store);
    let qv = g.input(q.clone());
    let kvv = g.input(kv.clone());
    let out = m.forward(&mut g, qv, kvv).unwrap();
    g.value(out).clone()
}

/// Attention computed with explicit loops over queries, keys and heads.
fn oracle_mhca(store: &ParamStore, m: &Mhca, q: &Tensor2D, kv: &Tensor2D) -> Tensor2D {
    let lin = |l: &Linear, x: &Tensor2D| {
        to_tensor(oracle_linear(x, store.get(l.weight), store.get(l.bias)))
    };
    let kp = to_tensor(oracle_linear(
        kv,
        store.get(m.k),
        &Tensor2D::zeros(1, m.dim()),
    ));
    let (qp, vp) = (lin(&m.q, q), lin(&m.v, kv));
    let dim = m.dim();
    let dh = dim / m.n_heads;
    let mut cat = Tensor2D::zeros(q.rows(), dim);
    for h in 0..m.n_heads {
        for i in 0..q.rows() {
            let mut scores = Vec::new();
            for j in 0..kv.rows() {
                let mut s = 0.0;
                for d in 0..dh {
                    s += qp.get(i, h * dh + d) * kp.get(j, h * dh + d);
                }
                scores.push(s / (dh as f64).sqrt());
            }
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for d in 0..dh {
                let mut acc = 0.0;
                for j in 0..kv.rows() {
                    acc += scores[j].exp() / z * vp.get(j, h * dh + d);
                }
                cat.set(i, h * dh + d, acc);
            }
        }
    }
    lin(&m.out, &cat)
}

#[test]
fn mhca_single_key_is_projected_value() {
    let (store, m) = build_mhca(8, 2, 3);
    let mut r = rng(4);
    let kv = Tensor2D::uniform(1, 8, 1.0, &mut r);
    let lin = |l: &Linear, x: &Tensor2D| {
        to_tensor(oracle_linear(x, store.get(l.weight), store.get(l.bias)))
    };
    let expected = lin(&m.out, &lin(&m.v, &kv));
    for _ in 0..3 {
        let q = Tensor2D::uniform(1, 8, 3.0, &mut r);
        assert!(run_mhca(&store, &m, &q, &kv).max_abs_diff(&expected) < 1e-12);
    }
}

#[test]
fn mhca_duplicate_keys_collapse() {
    let (store, m) = build_mhca(8, 4, 5);
    let mut r = rng(6);
    let q = Tensor2D::uniform(3, 8, 1.0, &mut r);
    let one = Tensor2D::uniform(1, 8, 1.0, &mut r);
    let two = Tensor2D::from_rows(&[one.row(0).to_vec(), one.row(0).to_vec()]).unwrap();
    assert!(run_mhca(&store, &m, &q, &one).max_abs_diff(&run_mhca(&store, &m, &q, &two)) < 1e-12);
}

#[test]
fn mhca_matches_loop_oracle() {
    for (heads, seed) in [(1, 7), (4, 8)] {
        let (store, m) = build_mhca(8, heads, seed);
        let mut r = rng(seed + 100);
        let q = Tensor2D::uniform(4, 8, 1.0, &mut r);
        let kv = Tensor2D::uniform(3, 8, 1.0, &mut r);
        let got = run_mhca(&store, &m, &q, &kv);
        assert!(got.max_abs_diff(&oracle_mhca(&store, &m, &q, &kv)) < 1e-10);
    }
}

#[test]
fn mhca_rejects_bad_heads_and_widths() {
    let mut store = ParamStore::new();
    assert!(Mhca::new(&mut store, "a", 10, 3, &mut rng(0)).is_err());
    let (store, m) = build_mhca(8, 2, 1);
    let mut g = Graph::new(&store);
    let q = g.input(Tensor2D::zeros(2, 8));
    let kv = g.input(Tensor2D::zeros(2, 6));
    assert!(m.forward(&mut g, q, kv).is_err());
}

#[test]
fn mlp_zero_weights_give_bias() {
    let mut store = ParamStore::new();
    let mlp = Mlp2::new(&mut store, "mlp", 3, 6, 2, &mut rng(1)).unwrap();
    for id in [mlp.fc1.weight, mlp.fc2.weight] {
        let (r, c) = store.get(id).shape();
        store.set(id, Tensor2D::zeros(r, c)).unwrap();
    }
    let bias = store.get(mlp.fc2.bias).clone();
    let mut g = Graph::new(&store);
    let x = g.input(Tensor2D::uniform(4, 3, 1.0, &mut rng(2)));
    let y = mlp.forward(&mut g, x).unwrap();
    for i in 0..4 {
        assert_eq!(g.value(y).row(i), bias.row(0));
    }
}

#[test]
fn mlp_identity_weights_in_linear_regime() {
    let mut store = ParamStore::new();
    let mlp = Mlp2::new(&mut store, "mlp", 4, 4, 4, &mut rng(1)).unwrap();
    for l in [mlp.fc1, mlp.fc2] {
        store.set(l.weight, Tensor2D::identity(4)).unwrap();
        store.set(l.bias, Tensor2D::zeros(1, 4)).unwrap();
    }
    let mut g = Graph::new(&store);
    let x = g.input(Tensor2D::filled(1, 4, 10.0));
    let y = mlp.forward(&mut g, x).unwrap();
    // SiLU(10) = 10 * sigmoid(10) differs from 10 by ~4.5e-4.
    assert!(g.value(y).data().iter().all(|v| (v - 10.0).abs() < 1e-3));
}

#[test]
fn mlp_matches_composed_oracle() {
    let mut store = ParamStore::new();
    let mlp = Mlp2::new(&mut store, "mlp", 5, 10, 3, &mut rng(9)).unwrap();
    let x = Tensor2D::uniform(6, 5, 2.0, &mut rng(10));
    let h = oracle_linear(&x, store.get(mlp.fc1.weight), store.get(mlp.fc1.bias));
    let h = to_tensor(
        h.into_iter()
            .map(|r| r.into_iter().map(silu).collect())
            .collect(),
    );
    let expected = to_tensor(oracle_linear(
        &h,
        store.get(mlp.fc2.weight),
        store.get(mlp.fc2.bias),
    ));
    let mut g = Graph::new(&store);
    let xv = g.input(x);
    let y = mlp.forward(&mut g, xv).unwrap();
    assert!(g.value(y).max_abs_diff(&expected) < 1e-12);
}

#[test]
fn grad_check_square() {
    let mut store = ParamStore::new();
    let x = store.insert("x", Tensor2D::scalar(3.0)).unwrap();
    let f = |g: &mut Graph<'_>| {
        let v = g.param(x);
        let sq = g.tape.mul(v, v)?;
        Ok(g.tape.sum(sq))
    };
    let mut g = Graph::new(&store);
    let out = f(&mut g).unwrap();
    let grads = g.tape.backward(out).unwrap();
    assert_eq!(g.param_grads(&grads)[0].item(), 6.0);
    let report = grad_check(&store, 1e-5, f).unwrap();
    assert!(report.max_rel_error < 1e-9, "{report:?}");
}

#[test]
fn grad_check_layer_norm_sum() {
    let mut store = ParamStore::new();
    let mut r = rng(3);
    let x = store
        .insert("x", Tensor2D::uniform(3, 5, 2.0, &mut r))
        .unwrap();
    let ln = LayerNorm::new(&mut store, "ln", 5).unwrap();
    store
        .set(ln.gamma, Tensor2D::uniform(1, 5, 1.0, &mut r))
        .unwrap();
    let w = store
        .insert("w", Tensor2D::uniform(3, 5, 1.0, &mut r))
        .unwrap();
    // A plain sum of a normalized row is constant in x, so weight the entries.
    let f = |g: &mut Graph<'_>| {
        let xv = g.param(x);
        let y = ln.forward(g, xv)?;
        let wv = g.param(w);
        let yw = g.tape.mul(y, wv)?;
        Ok(g.tape.sum(yw))
    };
    let report = grad_check(&store, 1e-5, f).unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

/// Every primitive on the tape, checked on random inputs.
#[test]
fn grad_check_every_primitive() {
    let mut r = rng(42);
    let mut store = ParamStore::new();
    let a = store
        .insert("a", Tensor2D::uniform(4, 6, 1.0, &mut r))
        .unwrap();
    let b = store
        .insert("b", Tensor2D::uniform(6, 6, 1.0, &mut r))
        .unwrap();
    let c = store
        .insert("c", Tensor2D::uniform(5, 6, 1.0, &mut r))
        .unwrap();
    let row = store
        .insert("row", Tensor2D::uniform(1, 6, 1.0, &mut r))
        .unwrap();
    let s = store.insert("s", Tensor2D::scalar(0.7)).unwrap();
    let t = store.insert("t", Tensor2D::scalar(-0.3)).unwrap();
    let ln = LayerNorm::new(&mut store, "ln", 6).unwrap();
    store
        .set(ln.gamma, Tensor2D::uniform(1, 6, 1.0, &mut r))
        .unwrap();
    store
        .set(ln.beta, Tensor2D::uniform(1, 6, 1.0, &mut r))
        .unwrap();
    let targets = {
        let mut t = Tensor2D::zeros(4, 3);
        t.set(0, 1, 1.0);
        t.set(2, 0, 1.0);
        t
    };
    let reg_target = Tensor2D::uniform(4, 6, 1.0, &mut r);
    let f = |g: &mut Graph<'_>| {
        let (av, bv, cv) = (g.param(a), g.param(b), g.param(c));
        let x = g.tape.matmul(av, bv)?;
        let rv = g.param(row);
        let x = g.tape.add_row(x, rv)?;
        let x = g.tape.silu(x);
        let x = ln.forward(g, x)?;
        let sm = g.tape.softmax_rows(x);
        let x = g.tape.add(x, sm)?;
        let sv = g.param(s);
        let x = g.tape.scale_by(x, sv)?;
        let tv = g.param(t);
        let x = g.tape.add_scalar(x, tv)?;
        let nt = g.tape.matmul_nt(x, cv)?; // 4x5
        let normed = g.tape.l2_normalize_rows(nt);
        let left = g.tape.slice_cols(normed, 0, 2)?;
        let right = g.tape.slice_cols(normed, 2, 3)?;
        let cat = g.tape.concat_cols(&[right, left])?;
        let rows = g.tape.gather_rows(cat, &[3, 0, 0, 2])?;
        let stacked = g.tape.concat_rows(&[rows, cat])?;
        let top = g.tape.slice_cols(stacked, 0, 5)?;
        let maxed = g.tape.group_max_cols(top, &[0, 1, 0, 2, 1], 3)?; // 8x3
        let first = g.tape.gather_rows(maxed, &[0, 1, 2, 3])?;
        let focal = g
            .tape
            .focal_loss(first, &targets, FocalParams::default(), 2.0)?;
        let l1 = g
            .tape
            .smooth_l1_loss(x, &reg_target, &[1.0, 0.0, 1.0, 1.0], 0.5, 3.0)?;
        let sims = g.tape.matmul_nt(first, first)?;
        let sims = g.tape.scale(sims, 3.0);
        let con = g.tape.supcon_from_sims(sims, &[0, 1, 0, 1])?;
        let m = g.tape.mul(focal, l1)?;
        let total = g.tape.add(m, con)?;
        let total = g.tape.add(total, focal)?;
        Ok(g.tape.sum(total))
    };
    let report = grad_check(&store, 1e-5, f).unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn grad_check_mhca_and_mlp() {
    let mut store = ParamStore::new();
    let mut r = rng(11);
    let m = Mhca::new(&mut store, "attn", 8, 2, &mut r).unwrap();
    let mlp = Mlp2::new(&mut store, "mlp", 8, 16, 8, &mut r).unwrap();
    let q = store
        .insert("q", Tensor2D::uniform(3, 8, 1.0, &mut r))
        .unwrap();
    let kv = store
        .insert("kv", Tensor2D::uniform(5, 8, 1.0, &mut r))
        .unwrap();
    let w = Tensor2D::uniform(3, 8, 1.0, &mut r);
    let f = |g: &mut Graph<'_>| {
        let (qv, kvv) = (g.param(q), g.param(kv));
        let a = m.forward(g, qv, kvv)?;
        let y = mlp.forward(g, a)?;
        let wv = g.input(w.clone());
        let p = g.tape.mul(y, wv)?;
        Ok(g.tape.sum(p))
    };
    let report = grad_check(&store, 1e-5, f).unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn grad_check_rejects_bad_step() {
    let store = ParamStore::new();
    assert!(grad_check(&store, 0.0, |g| Ok(g.input(Tensor2D::scalar(1.0)))).is_err());
}

#[test]
fn supcon_closed_forms() {
    let mut tape = Tape::new();
    // Anchor 0 against a positive (prompt 1) and a negative (prompt 2), equal similarities.
    let s = tape.leaf(Tensor2D::filled(3, 3, 0.4));
    let l = tape.supcon_from_sims(s, &[0, 0, 1]).unwrap();
    assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-12);
    // Single-label pair: the only contrast entry is the positive.
    let s2 = tape.leaf(Tensor2D::from_rows(&[vec![0.0, 0.3], vec![0.9, 0.0]]).unwrap());
    let l2 = tape.supcon_from_sims(s2, &[5, 5]).unwrap();
    assert_eq!(tape.value(l2).item(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        vals in prop::collection::vec(-30.0..30.0f64, 12), shift in -100.0..100.0f64,
    ) {
        let x = Tensor2D::from_vec(3, 4, vals.clone()).unwrap();
        let y = softmax_rows(&x);
        for i in 0..3 {
            prop_assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let shifted = Tensor2D::from_vec(3, 4, vals.iter().map(|v| v + shift).collect()).unwrap();
        prop_assert!(softmax_rows(&shifted).max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn layer_norm_rows_are_standardized(vals in prop::collection::vec(-50.0..50.0f64, 16)) {
        let x = Tensor2D::from_vec(2, 8, vals).unwrap();
        let eps = 1e-5;
        let y = layer_norm(&x, &[1.0; 8], &[0.0; 8], eps).unwrap();
        for i in 0..2 {
            let row = y.row(i);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            let xr = x.row(i);
            let xm = xr.iter().sum::<f64>() / 8.0;
            let xvar = xr.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() <= 1e-10);
            // Exact expectation: var / (var + eps).
            prop_assert!((var - xvar / (xvar + eps)).abs() <= 1e-9);
        }
    }

    #[test]
    fn mhca_is_invariant_to_context_order(seed in 0u64..1000) {
        let (store, m) = build_mhca(8, 2, seed);
        let mut r = rng(seed ^ 0xabc);
        let q = Tensor2D::uniform(2, 8, 1.0, &mut r);
        let kv = Tensor2D::uniform(4, 8, 1.0, &mut r);
        let perm = [2usize, 0, 3, 1];
        let kvp = Tensor2D::from_rows(&perm.iter().map(|&i| kv.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        prop_assert!(run_mhca(&store, &m, &q, &kv).max_abs_diff(&run_mhca(&store, &m, &q, &kvp)) < 1e-12);
    }

    #[test]
    fn random_shapes_pass_grad_check(rows in 1usize..4, inner in 1usize..5, cols in 1usize..5, seed in 0u64..500) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor2D::uniform(rows, inner, 1.0, &mut r)).unwrap();
        let b = store.insert("b", Tensor2D::uniform(inner, cols, 1.0, &mut r)).unwrap();
        let w = Tensor2D::uniform(rows, cols, 1.0, &mut r);
        let f = |g: &mut Graph<'_>| {
            let (av, bv) = (g.param(a), g.param(b));
            let y = g.tape.matmul(av, bv)?;
            let y = g.tape.silu(y);
            let y = g.tape.softmax_rows(y);
            let wv = g.input(w.clone());
            let y = g.tape.mul(y, wv)?;
            Ok(g.tape.sum(y))
        };
        let report = grad_check(&store, 1e-5, f).unwrap();
        prop_assert!(report.max_rel_error <= 1e-4, "{:?}", report);
    }
}
