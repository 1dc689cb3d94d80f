use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let i = g.constant(Tensor::eye(2));
    let b = g.constant(t(&[2, 2], &[5., 6., 7., 8.]));
    let ai = g.matmul(a, i).unwrap();
    assert_eq!(g.value(ai).data(), &[1., 2., 3., 4.]);
    let ab = g.matmul(a, b).unwrap();
    assert_eq!(g.value(ab).data(), &[19., 22., 43., 50.]);

    let z = g.constant(Tensor::zeros(&[2, 3]));
    let any = g.constant(Tensor::from_fn(&[3, 4], |i| i as f64 + 0.5));
    let zz = g.matmul(z, any).unwrap();
    assert_eq!(g.value(zz).shape(), &[2, 4]);
    assert!(g.value(zz).data().iter().all(|&x| x == 0.0));

    let bad = g.matmul(z, a);
    assert!(matches!(bad, Err(Error::Shape(_))));
}

#[test]
fn matmul_transposed_views_match_explicit_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::<f64>::new();
    let a = g.constant(rand_tensor(&mut rng, &[3, 4]));
    let b = g.constant(rand_tensor(&mut rng, &[5, 4]));
    let bt = g.transpose(b).unwrap();
    let explicit = g.matmul(a, bt).unwrap();
    let strided = g.matmul_t(a, b, false, true).unwrap();
    assert!(g.value(explicit).max_abs_diff(g.value(strided)) < 1e-14);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 2], &[0., 0.]));
    let y = g.softmax_rows(x);
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(t(&[1, 2], &[2f64.ln(), 0.]));
    let y = g.softmax_rows(x);
    assert_abs_diff_eq!(g.value(y).data()[0], 2. / 3., epsilon = 1e-15);
    assert_abs_diff_eq!(g.value(y).data()[1], 1. / 3., epsilon = 1e-15);

    let x = g.constant(t(&[1, 3], &[1000., 1000., 1000.]));
    let y = g.softmax_rows(x);
    for &v in g.value(y).data() {
        assert_abs_diff_eq!(v, 1. / 3., epsilon = 1e-15);
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let ones = g.constant(Tensor::ones(&[2]));
    let zeros = g.constant(Tensor::zeros(&[2]));

    let c = g.constant(t(&[1, 2], &[3., 3.]));
    let y = g.layer_norm(c, ones, zeros).unwrap();
    assert_eq!(g.value(y).data(), &[0., 0.]);

    let mut tiny = Graph::<f64>::with_ln_eps(1e-300);
    let ones_t = tiny.constant(Tensor::ones(&[2]));
    let zeros_t = tiny.constant(Tensor::zeros(&[2]));
    let x = tiny.constant(t(&[1, 2], &[1., -1.]));
    let y = tiny.layer_norm(x, ones_t, zeros_t).unwrap();
    assert_abs_diff_eq!(tiny.value(y).data()[0], 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(tiny.value(y).data()[1], -1.0, epsilon = 1e-12);

    let x = g.constant(t(&[1, 2], &[0., 2.]));
    let gamma = g.constant(t(&[2], &[2., 2.]));
    let beta = g.constant(t(&[2], &[1., 1.]));
    let y = g.layer_norm(x, gamma, beta).unwrap();
    assert_abs_diff_eq!(g.value(y).data()[0], -1.0, epsilon = 1e-4);
    assert_abs_diff_eq!(g.value(y).data()[1], 3.0, epsilon = 1e-4);
}

#[test]
fn gelu_examples() {
    let reference = |x: f64| {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    };
    assert_eq!(kernels::gelu(0.0f64), 0.0);
    assert_abs_diff_eq!(kernels::gelu(12.0f64), 12.0, epsilon = 1e-12);
    assert_abs_diff_eq!(kernels::gelu(1.0f64), reference(1.0), epsilon = 1e-15);
    assert_abs_diff_eq!(kernels::gelu(1.0f64), 0.8412, epsilon = 1e-4);
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[3], &[0.3, -1., 2.]), true);
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1., 1., 1.]);

    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[2], &[1., 2.]), true);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2., 4.]);

    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[2], &[1., 2.]), true);
    let c = g.constant(t(&[2], &[5., 5.]));
    let p = g.mul(x, c).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());

    let err = g.backward(p).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn backward_twice_doubles_leaf_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(rand_tensor(&mut rng, &[3, 4]), true);
    let w = g.constant(rand_tensor(&mut rng, &[4, 2]));
    let y = g.matmul(x, w).unwrap();
    let y = g.gelu(y);
    let l = g.sum(y);
    g.backward(l).unwrap();
    let once = g.grad(x).unwrap().clone();
    g.backward(l).unwrap();
    let twice = g.grad(x).unwrap();
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }
}

/// `sum(op(x) ⊙ r)` for a fixed random `r`, so every output coordinate matters.
fn weighted<B>(op: B, r: Tensor<f64>) -> impl Fn(&mut Graph<f64>, Var) -> Result<Var>
where
    B: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    move |g: &mut Graph<f64>, x: Var| {
        let y = op(g, x)?;
        let rv = g.constant(r.clone().reshape(g.shape(y))?);
        let p = g.mul(y, rv)?;
        Ok(g.sum(p))
    }
}

const FD_EPS: f64 = 1e-5;

fn check_op<B>(name: &str, in_shape: &[usize], out_numel: usize, op: B)
where
    B: Fn(&mut Graph<f64>, Var) -> Result<Var> + Clone,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = rand_tensor(&mut rng, in_shape);
        let r = rand_tensor(&mut rng, &[out_numel]);
        let report = grad_check(weighted(op.clone(), r), &x, FD_EPS).unwrap();
        worst = worst.max(report.max_rel_error);
    }
    assert!(worst < 1e-6, "{name}: max relative error {worst:e}");
}

#[test]
fn per_op_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = rand_tensor(&mut rng, &[4, 3]);
    let wt = rand_tensor(&mut rng, &[3, 4]);
    let row = rand_tensor(&mut rng, &[4]);
    let other = rand_tensor(&mut rng, &[3, 4]);
    let gamma = rand_tensor(&mut rng, &[4]);
    let beta = rand_tensor(&mut rng, &[4]);

    check_op("matmul_lhs", &[3, 4], 9, {
        let w = w.clone();
        move |g, x| {
            let c = g.constant(w.clone());
            g.matmul(x, c)
        }
    });
    check_op("matmul_rhs_t", &[3, 4], 9, {
        let other = other.clone();
        move |g, x| {
            let c = g.constant(other.clone());
            g.matmul_t(c, x, false, true)
        }
    });
    check_op("matmul_lhs_t", &[4, 3], 9, {
        let wt = wt.clone();
        move |g, x| {
            let c = g.constant(wt.clone());
            g.matmul_t(x, c, true, true)
        }
    });
    check_op("softmax", &[3, 4], 12, |g, x| Ok(g.softmax_rows(x)));
    check_op("layer_norm_x", &[3, 4], 12, {
        let (gamma, beta) = (gamma.clone(), beta.clone());
        move |g, x| {
            let gm = g.constant(gamma.clone());
            let bt = g.constant(beta.clone());
            g.layer_norm(x, gm, bt)
        }
    });
    check_op("layer_norm_gamma", &[4], 12, {
        let other = other.clone();
        let beta = beta.clone();
        move |g, x| {
            let xs = g.constant(other.clone());
            let bt = g.constant(beta.clone());
            g.layer_norm(xs, x, bt)
        }
    });
    check_op("gelu", &[3, 4], 12, |g, x| Ok(g.gelu(x)));
    check_op("add_row", &[4], 12, {
        let other = other.clone();
        move |g, x| {
            let o = g.constant(other.clone());
            g.add_row(o, x)
        }
    });
    check_op("mul_self", &[3, 4], 12, |g, x| g.mul(x, x));
    check_op("sub", &[3, 4], 12, {
        let other = other.clone();
        move |g, x| {
            let o = g.constant(other.clone());
            g.sub(o, x)
        }
    });
    check_op("concat_slice", &[3, 4], 10, {
        let row = row.clone();
        move |g, x| {
            let r = g.constant(row.clone().reshape(&[1, 4]).unwrap());
            let c = g.concat_rows(&[x, r, x])?;
            let s = g.slice_rows(c, 2, 4)?;
            let cols = g.slice_cols(s, 1, 2)?;
            let extra = g.slice_cols(x, 0, 1)?;
            let extra = g.reshape(extra, &[3, 1])?;
            let t = g.transpose(extra)?;
            let t = g.reshape(t, &[1, 3])?;
            let flat = g.reshape(cols, &[1, 8])?;
            let wide = g.concat_cols(&[flat, t])?;
            g.slice_cols(wide, 1, 10)
        }
    });
    check_op("swap01", &[2, 3, 2], 12, |g, x| g.swap01(x));
    check_op("batch_matmul", &[2, 3, 2], 18, |g, x| g.batch_matmul(x, x, true));
    check_op("batch_matmul_plain", &[2, 2, 2], 8, |g, x| g.batch_matmul(x, x, false));
    check_op("mean_rows_index_scale", &[3, 4], 4, |g, x| {
        let m = g.mean_rows(x);
        let s = g.index(x, 5)?;
        let y = g.scale_by(m, s)?;
        Ok(g.scale(y, 0.5))
    });
    check_op("depth_to_space", &[4, 8], 32, |g, x| g.depth_to_space(x, 2, 2, 2));
    check_op("bilinear", &[3, 2, 2], 5 * 7 * 2, |g, x| g.bilinear(x, 3, 2, 5, 7));
    check_op("mean", &[3, 4], 1, |g, x| {
        let sq = g.mul(x, x)?;
        Ok(g.mean(sq))
    });
}

#[test]
fn grad_check_of_linear_function_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[5, 3]);
    let report = grad_check(|g, v| Ok(g.sum(v)), &x, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-10);
    assert_eq!(report.checked, 15);
}

#[test]
fn depth_to_space_places_blocks() {
    // one pixel, k=2, one channel: packed [a b c d] → [[a b],[c d]]
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 4], &[1., 2., 3., 4.]));
    let y = g.depth_to_space(x, 1, 1, 2).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 2, 1]);
    assert_eq!(g.value(y).data(), &[1., 2., 3., 4.]);
}

#[test]
fn bilinear_preserves_constants() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[4, 4, 2], 0.7));
    let y = g.bilinear(x, 4, 4, 16, 16).unwrap();
    for &v in g.value(y).data() {
        assert_abs_diff_eq!(v, 0.7, epsilon = 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[3, 4], vals).unwrap());
        let y = g.softmax_rows(x);
        for r in 0..3 {
            let row = g.value(y).row(r);
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn small_gemm_matches_a_plain_triple_loop(
        seed in any::<u64>(),
        m in 1usize..6,
        k in 1usize..6,
        n in 1usize..6,
        ta in any::<bool>(),
        tb in any::<bool>(),
        acc in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let init: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (ar, ac) = if ta { (k, m) } else { (m, k) };
        let (br, bc) = if tb { (n, k) } else { (k, n) };
        let av = kernels::MatRef::new(&a, ar, ac, ta);
        let bv = kernels::MatRef::new(&b, br, bc, tb);
        let at = |i: usize, p: usize| if ta { a[p * m + i] } else { a[i * k + p] };
        let bt = |p: usize, j: usize| if tb { b[j * k + p] } else { b[p * n + j] };
        let mut out = init.clone();
        kernels::small_gemm(av, bv, &mut out, acc);
        for i in 0..m {
            for j in 0..n {
                let dot = (0..k).fold(0.0, |s, p| s + at(i, p) * bt(p, j));
                let want = if acc { init[i * n + j] + dot } else { dot };
                prop_assert_eq!(out[i * n + j].to_bits(), want.to_bits());
            }
        }
    }

    #[test]
    fn matmul_is_associative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[3, 5]);
        let b = rand_tensor(&mut rng, &[5, 4]);
        let c = rand_tensor(&mut rng, &[4, 2]);

        let mut g = Graph::<f64>::new();
        let (av, bv, cv) = (g.constant(a.clone()), g.constant(b.clone()), g.constant(c.clone()));
        let ab = g.matmul(av, bv).unwrap();
        let left = g.matmul(ab, cv).unwrap();
        let bc = g.matmul(bv, cv).unwrap();
        let right = g.matmul(av, bc).unwrap();
        let scale = g.value(left).data().iter().fold(1.0f64, |m, x| m.max(x.abs()));
        prop_assert!(g.value(left).max_abs_diff(g.value(right)) / scale < 1e-10);

        let mut g = Graph::<f32>::new();
        let (av, bv, cv) = (g.constant(a.cast()), g.constant(b.cast()), g.constant(c.cast()));
        let ab = g.matmul(av, bv).unwrap();
        let left = g.matmul(ab, cv).unwrap();
        let bc = g.matmul(bv, cv).unwrap();
        let right = g.matmul(av, bc).unwrap();
        prop_assert!(g.value(left).max_abs_diff(g.value(right)) / scale < 1e-4);
    }
}
