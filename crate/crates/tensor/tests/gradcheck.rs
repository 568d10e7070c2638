//! Finite-difference checks of every differentiable op, in f64.

use cpmark_tensor::{Tape, Tensor, Var, IDENTITY_AFFINE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Checks analytic gradients of `sum(f(inputs) * r)` against central differences.
fn check(inputs: &[Tensor<f64>], f: impl for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>, tol: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&vars).shape()
    };
    let r = random(&probe, -1.0, 1.0, &mut rng);
    let loss = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&vars).value().zip_map(&r, |a, b| a * b).sum()
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&vars);
    let grads = tape.backward((out * tape.constant(r.clone())).sum());
    let eps = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k]);
        for i in 0..input.numel() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += eps;
            let up = loss(&xs);
            xs[k].data_mut()[i] -= 2.0 * eps;
            let down = loss(&xs);
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() <= tol * (1.0 + numeric.abs()),
                "input {k} element {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn elementwise_unary() {
    let mut g = rng();
    // keep away from kinks of relu/clamp/round
    let x = Tensor::from_fn([2, 3, 4], |_| {
        let v: f64 = g.random_range(0.05..0.45);
        if g.random_bool(0.5) { v } else { -v }
    });
    check(&[x.clone()], |v| v[0].relu(), 1e-6);
    check(&[x.clone()], |v| v[0].leaky_relu(0.2), 1e-6);
    check(&[x.clone()], |v| v[0].tanh(), 1e-6);
    check(&[x.clone()], |v| v[0].sigmoid(), 1e-6);
    check(&[x.clone()], |v| v[0].square(), 1e-6);
    check(&[x.clone()], |v| v[0].clamp(-0.3, 0.3), 1e-6);
    check(&[x.clone()], |v| v[0].round_cubic(), 1e-6);
    check(&[x.map(|t| t * 7.3)], |v| v[0].round_cubic(), 1e-6);
    check(&[x.clone()], |v| v[0].add_scalar(0.7).mul_scalar(-2.0), 1e-6);
    check(&[x.map(f64::abs)], |v| v[0].sqrt(), 1e-6);
}

#[test]
fn elementwise_binary() {
    let mut g = rng();
    let a = random(&[3, 5], -1.0, 1.0, &mut g);
    let b = random(&[3, 5], 0.5, 1.5, &mut g);
    check(&[a.clone(), b.clone()], |v| v[0] + v[1], 1e-6);
    check(&[a.clone(), b.clone()], |v| v[0] - v[1], 1e-6);
    check(&[a.clone(), b.clone()], |v| v[0] * v[1], 1e-6);
    check(&[a.clone(), b.clone()], |v| v[0] / v[1], 1e-6);
    check(&[a.clone()], |v| -v[0], 1e-6);
    // same var on both sides
    check(&[a], |v| v[0] * v[0] + v[0], 1e-6);
}

#[test]
fn shape_ops() {
    let mut g = rng();
    let x = random(&[2, 3, 4, 5], -1.0, 1.0, &mut g);
    check(&[x.clone()], |v| v[0].reshape([6, 20]), 1e-6);
    check(&[x.clone()], |v| v[0].sum_axes(&[1, 3]), 1e-6);
    check(&[x.clone()], |v| v[0].mean_axes(&[0, 2]), 1e-6);
    check(&[x.clone()], |v| v[0].mean(), 1e-6);
    check(&[x.clone()], |v| v[0].narrow(2, 1, 2), 1e-6);
    check(&[x.clone()], |v| v[0].crop(1, 2, 3, 2), 1e-6);
    let s = random(&[2, 1, 4, 1], -1.0, 1.0, &mut g);
    check(&[s], |v| v[0].expand([2, 3, 4, 5]), 1e-6);
    let y = random(&[2, 2, 4, 5], -1.0, 1.0, &mut g);
    check(&[x, y], |v| Var::cat(&[v[0], v[1], v[0]], 1), 1e-6);
}

#[test]
fn conv2d_all_inputs() {
    let mut g = rng();
    for &(h, w, k, stride, pad) in &[(6, 5, 3, 1, 1), (7, 8, 3, 2, 1), (4, 4, 1, 1, 0)] {
        let x = random(&[2, 3, h, w], -1.0, 1.0, &mut g);
        let wt = random(&[4, 3, k, k], -0.5, 0.5, &mut g);
        let b = random(&[4], -0.5, 0.5, &mut g);
        check(&[x.clone(), wt.clone(), b], |v| v[0].conv2d(v[1], Some(v[2]), stride, pad), 1e-6);
        check(&[x, wt], |v| v[0].conv2d(v[1], None, stride, pad), 1e-6);
    }
}

#[test]
fn matmul_both_sides() {
    let mut g = rng();
    let a = random(&[3, 4], -1.0, 1.0, &mut g);
    let b = random(&[4, 2], -1.0, 1.0, &mut g);
    check(&[a, b], |v| v[0].matmul(v[1]), 1e-6);
}

#[test]
fn resampling_ops() {
    let mut g = rng();
    let x = random(&[1, 2, 6, 4], -1.0, 1.0, &mut g);
    check(&[x.clone()], |v| v[0].upsample_nearest(2), 1e-6);
    check(&[x.clone()], |v| v[0].avg_pool2(), 1e-6);
    check(&[x.clone()], |v| v[0].decimate2(), 1e-6);
    check(&[x.clone()], |v| v[0].upsample_triangle2(), 1e-6);
    check(&[x.clone()], |v| v[0].pad_reflect(2, 3, 1, 3), 1e-6);
}

#[test]
fn affine_grid_sample_image_and_theta() {
    let mut g = rng();
    let x = random(&[2, 2, 5, 6], -1.0, 1.0, &mut g);
    // generic, non-degenerate maps so sample points avoid integer pixel positions
    let theta = Tensor::from_fn([2, 6], |i| IDENTITY_AFFINE[i % 6] + g.random_range(-0.13..0.13));
    check(&[x, theta], |v| v[0].affine_grid_sample(v[1]), 1e-5);
}

#[test]
fn fixed_filters() {
    let mut g = rng();
    let x = random(&[1, 3, 8, 16], -1.0, 1.0, &mut g);
    let m = [0.299, 0.587, 0.114, -0.1687, -0.3313, 0.5, 0.5, -0.4187, -0.0813];
    check(&[x.clone()], |v| v[0].channel_mix(&m, &[0.0, 0.5, 0.5]), 1e-6);
    check(&[x.clone()], |v| v[0].blur_separable(&[0.1, 0.2, 0.4, 0.2, 0.1]), 1e-6);
    check(&[x.clone()], |v| v[0].block_dct8(false), 1e-6);
    check(&[x], |v| v[0].block_dct8(true).square(), 1e-6);
}
