use super::*;
use crate::error::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

#[test]
fn square_gradient() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::scalar(3.0));
    let mut g = Graph::new();
    let vx = g.param(&store, x);
    let y = g.mul(vx, vx).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(vx).unwrap(), &[6.0]);
}

#[test]
fn sigmoid_gradient_at_zero() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::zeros(1, 4));
    let s = g.sigmoid(x);
    let loss = g.sum(s);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[0.25; 4]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::zeros(2, 2));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn repeated_backward_accumulates() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::scalar(3.0));
    for _ in 0..2 {
        let grads = {
            let mut g = Graph::new();
            let vx = g.param(&store, x);
            let y = g.mul(vx, vx).unwrap();
            g.backward(y).unwrap().param_grads(&g, &store)
        };
        store.accumulate(&grads, 1.0);
    }
    assert_eq!(store.get(x).grad().unwrap(), &[12.0]);
    store.zero_grad();
    assert_eq!(store.get(x).grad().unwrap(), &[0.0]);
}

#[test]
fn squared_norm_of_linear_map_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let w = store.add("w", random(&mut rng, 4, 3));
    let x = store.add("x", random(&mut rng, 3, 1));
    let report = finite_diff_check(&mut store, 1e-5, |g, s| {
        let (vw, vx) = (g.param(s, w), g.param(s, x));
        let y = g.matmul(vw, vx)?;
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(report.max_rel_error() <= 1e-4, "{report:?}");
}

#[test]
fn linear_function_is_exact_under_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let x = store.add("x", random(&mut rng, 3, 3));
    let c = random(&mut rng, 3, 3);
    let report = finite_diff_check(&mut store, 1e-3, |g, s| {
        let vx = g.param(s, x);
        let vc = g.constant(c.clone());
        let y = g.mul(vx, vc)?;
        let y = g.scale(y, 2.5);
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(report.max_rel_error() <= 1e-9, "{report:?}");
}

/// Every built-in op kind, each folded into a scalar through a random
/// projection so no gradient entry is trivially zero.
#[test]
fn every_op_kind_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let a = store.add("a", random(&mut rng, 3, 4));
    let b = store.add("b", random(&mut rng, 4, 2));
    let c = store.add("c", random(&mut rng, 3, 4));
    let row = store.add("row", random(&mut rng, 1, 4));
    let s = store.add("s", Tensor::scalar(0.3));
    let sq = store.add("sq", {
        let mut m = random(&mut rng, 3, 3);
        for i in 0..3 {
            m.set(i, i, m.get(i, i) + 3.0);
        }
        m
    });
    let proj = random(&mut rng, 3, 4);

    type Build = fn(&mut Graph<'_>, [Var; 6]) -> crate::Result<Var>;
    let cases: Vec<(&str, Build)> = vec![
        ("matmul", |g, v| g.matmul(v[0], v[1])),
        ("add", |g, v| g.add(v[0], v[2])),
        ("sub", |g, v| g.sub(v[0], v[2])),
        ("mul", |g, v| g.mul(v[0], v[2])),
        ("add_row", |g, v| g.add_row(v[0], v[3])),
        ("mul_row", |g, v| g.mul_row(v[0], v[3])),
        ("scale", |g, v| Ok(g.scale(v[0], -1.7))),
        ("add_scalar", |g, v| g.add_scalar(v[0], v[4])),
        ("sigmoid", |g, v| Ok(g.sigmoid(v[0]))),
        ("relu", |g, v| {
            let sh = g.add_scalar(v[0], v[4])?;
            Ok(g.relu(sh))
        }),
        ("transpose", |g, v| Ok(g.transpose(v[0]))),
        ("reshape", |g, v| g.reshape(v[0], 4, 3)),
        ("mean_rows", |g, v| Ok(g.mean_rows(v[0]))),
        ("concat_cols", |g, v| g.concat_cols(&[v[0], v[2]])),
        ("concat_rows", |g, v| g.concat_rows(&[v[0], v[2]])),
        ("slice_rows", |g, v| g.slice_rows(v[0], 1, 3)),
        ("inverse", |g, v| g.inverse(v[5])),
        ("mse", |g, v| g.mse(v[0], v[2])),
    ];

    for (name, build) in cases {
        let proj = proj.clone();
        let report = finite_diff_check(&mut store, 1e-5, move |g, st| {
            let vars = [a, b, c, row, s, sq].map(|id| g.param(st, id));
            let out = build(g, vars)?;
            let t = g.value(out);
            let p = Tensor::from_fn(t.rows(), t.cols(), |r, col| {
                proj.data()[(r * 7 + col * 3) % proj.numel()]
            });
            let vp = g.constant(p);
            let weighted = g.mul(out, vp)?;
            Ok(g.sum(weighted))
        })
        .unwrap();
        assert!(
            report.max_rel_error() <= 1e-4,
            "{name}: {:?}",
            report.worst()
        );
    }
}

#[test]
fn least_squares_recovers_generator_against_svd_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, 3, 5);
    let m = random(&mut rng, 3, 3);
    let b = m.matmul(&a).unwrap();
    let k = linalg::least_squares_min_norm(&a, &b, 0.0).unwrap();
    assert!(k.max_abs_diff(&m) <= 1e-8);

    // Independent route: SVD pseudoinverse.
    let na = nalgebra::DMatrix::from_row_slice(3, 5, a.data());
    let nb = nalgebra::DMatrix::from_row_slice(3, 5, b.data());
    let pinv = na.pseudo_inverse(1e-12).unwrap();
    let oracle = nb * pinv;
    for r in 0..3 {
        for c in 0..3 {
            assert!((oracle[(r, c)] - k.get(r, c)).abs() <= 1e-8);
        }
    }
}

#[test]
fn least_squares_tall_snapshot_matrix_is_min_norm() {
    // D = 5 > m = 2: rank-deficient normal equations in the D×D route.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&mut rng, 5, 2);
    let b = random(&mut rng, 5, 2);
    let k = linalg::least_squares_min_norm(&a, &b, 0.0).unwrap();
    let na = nalgebra::DMatrix::from_row_slice(5, 2, a.data());
    let nb = nalgebra::DMatrix::from_row_slice(5, 2, b.data());
    let oracle = nb * na.pseudo_inverse(1e-12).unwrap();
    for r in 0..5 {
        for c in 0..5 {
            assert!((oracle[(r, c)] - k.get(r, c)).abs() <= 1e-9);
        }
    }
    // Exact fit on the snapshots themselves.
    assert!(k.matmul(&a).unwrap().max_abs_diff(&b) <= 1e-10);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = random(&mut rng, 6, 6);
        let b = random(&mut rng, 6, 6);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let k = g.least_squares_min_norm(va, vb, 1e-6).unwrap();
        let s = g.sigmoid(k);
        g.value(s).clone()
    };
    assert_eq!(run().data(), run().data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn least_squares_consistency(seed in any::<u64>(), d in 1usize..5, extra in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m_cols = d + extra;
        // Well-conditioned full-row-rank A: identity block plus small noise.
        let a = Tensor::from_fn(d, m_cols, |r, c| {
            (if r == c { 1.0 } else { 0.0 }) + 0.3 * rng.random_range(-1.0..1.0)
        });
        let m = random(&mut rng, d, d);
        let b = m.matmul(&a).unwrap();
        let k = linalg::least_squares_min_norm(&a, &b, 0.0).unwrap();
        prop_assert!(k.max_abs_diff(&m) <= 1e-8);
    }

    #[test]
    fn matmul_chain_gradients(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let a = store.add("a", random(&mut rng, 2, 3));
        let b = store.add("b", random(&mut rng, 3, 2));
        let report = finite_diff_check(&mut store, 1e-5, |g, s| {
            let (va, vb) = (g.param(s, a), g.param(s, b));
            let p = g.matmul(va, vb)?;
            let q = g.sigmoid(p);
            let r = g.mul(q, p)?;
            Ok(g.mean(r))
        }).unwrap();
        prop_assert!(report.max_rel_error() <= 1e-4);
    }
}

#[test]
fn least_squares_gradients_match_finite_differences() {
    for (d, m) in [(3usize, 5usize), (3, 3), (5, 2)] {
        let mut rng = ChaCha8Rng::seed_from_u64(21 + d as u64 * 7 + m as u64);
        let mut store = ParamStore::new();
        let a = store.add("a", random(&mut rng, d, m));
        let b = store.add("b", random(&mut rng, d, m));
        let proj = random(&mut rng, d, d);
        let report = finite_diff_check(&mut store, 1e-6, |g, s| {
            let (va, vb) = (g.param(s, a), g.param(s, b));
            let k = g.least_squares_min_norm(va, vb, 1e-6)?;
            let vp = g.constant(proj.clone());
            let w = g.mul(k, vp)?;
            Ok(g.sum(w))
        })
        .unwrap();
        assert!(report.max_rel_error() <= 1e-4, "{d}x{m}: {:?}", report.worst());
    }
}
