//! Central finite-difference oracle for every differentiable op.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use netshrink::graph::{ConvAttrs, PoolAttrs};
use netshrink::kernels;
use netshrink::Tensor;
use netshrink_train::ops;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;
pub const SHAPES_PER_OP: usize = 24;

/// Relative error with a floor on the denominator so that entries which are
/// zero up to rounding are judged absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0) + rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Values at least 0.02 apart in random order, so no max or relu kink lies
/// within a finite-difference step.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - (n / 2) as f64 + 0.5) * 0.05).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_vec(shape, v).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Max relative error of `analytic` against the central difference of
/// `loss` with respect to `x`.
fn compare(x: &Tensor<f64>, analytic: &Tensor<f64>, loss: impl Fn(&Tensor<f64>) -> f64) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= FD_STEP;
        let numeric = (loss(&xp) - loss(&xm)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    worst
}

#[derive(Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub shapes: usize,
    pub max_rel_err: f64,
}

fn dims(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(2..=7), rng.random_range(2..=7)]
}

fn check_conv(rng: &mut ChaCha8Rng) -> f64 {
    let [n, cin, h, w] = dims(rng);
    let cout = rng.random_range(1..=4);
    let k = *[1usize, 2, 3].get(rng.random_range(0..3)).unwrap();
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=k / 2);
    let (h, w) = (h.max(k), w.max(k));
    let a = ConvAttrs::square(k, stride, pad);
    let x = normal(rng, &[n, cin, h, w]);
    let wt = normal(rng, &[cout, cin, k, k]);
    let bias = rng.random_bool(0.5).then(|| normal(rng, &[cout]));
    let y = ops::conv_forward(&x, &wt, bias.as_ref(), &a);
    let r = normal(rng, y.shape());
    let g = ops::conv_backward(&x, &wt, bias.is_some(), &a, &r);
    let mut e = compare(&x, &g.dx, |x| dot(&ops::conv_forward(x, &wt, bias.as_ref(), &a), &r));
    e = e.max(compare(&wt, &g.dw, |w| dot(&ops::conv_forward(&x, w, bias.as_ref(), &a), &r)));
    if let (Some(b), Some(db)) = (&bias, &g.db) {
        e = e.max(compare(b, db, |b| dot(&ops::conv_forward(&x, &wt, Some(b), &a), &r)));
    }
    e
}

fn check_bn(rng: &mut ChaCha8Rng) -> f64 {
    let [n, c, h, w] = dims(rng);
    let x = normal(rng, &[n, c, h, w]);
    let gamma = normal(rng, &[c]);
    let beta = normal(rng, &[c]);
    let eps = 1e-5;
    let (y, cache) = ops::bn_train_forward(&x, &gamma, &beta, eps);
    let r = normal(rng, y.shape());
    let (dx, dg, db) = ops::bn_train_backward(&cache, &gamma, &r);
    let f = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| dot(&ops::bn_train_forward(x, g, b, eps).0, &r);
    compare(&x, &dx, |x| f(x, &gamma, &beta))
        .max(compare(&gamma, &dg, |g| f(&x, g, &beta)))
        .max(compare(&beta, &db, |b| f(&x, &gamma, b)))
}

fn check_relu(rng: &mut ChaCha8Rng) -> f64 {
    let s = dims(rng);
    let x = separated(rng, &s);
    let y = kernels::relu(&x);
    let r = normal(rng, y.shape());
    compare(&x, &ops::relu_backward(&y, &r), |x| dot(&kernels::relu(x), &r))
}

fn check_add(rng: &mut ChaCha8Rng) -> f64 {
    let s = dims(rng);
    let (a, b) = (normal(rng, &s), normal(rng, &s));
    let r = normal(rng, &s);
    // Both inputs receive the incoming gradient unchanged.
    compare(&a, &r, |a| dot(&kernels::add(a, &b), &r)).max(compare(&b, &r, |b| dot(&kernels::add(&a, b), &r)))
}

fn check_concat(rng: &mut ChaCha8Rng) -> f64 {
    let [n, _, h, w] = dims(rng);
    let channels: Vec<usize> = (0..rng.random_range(2..=3)).map(|_| rng.random_range(1..=3)).collect();
    let parts: Vec<Tensor<f64>> = channels.iter().map(|&c| normal(rng, &[n, c, h, w])).collect();
    let refs: Vec<&Tensor<f64>> = parts.iter().collect();
    let y = kernels::concat_channels(&refs);
    let r = normal(rng, y.shape());
    let grads = ops::concat_backward(&r, &channels);
    let mut e: f64 = 0.0;
    for k in 0..parts.len() {
        e = e.max(compare(&parts[k], &grads[k], |p| {
            let mut refs: Vec<&Tensor<f64>> = parts.iter().collect();
            refs[k] = p;
            dot(&kernels::concat_channels(&refs), &r)
        }));
    }
    e
}

fn check_resize(rng: &mut ChaCha8Rng) -> f64 {
    let s = dims(rng);
    let scale = *[2.0f32, 2.0, 3.0, 0.5].get(rng.random_range(0..4)).unwrap();
    let s = if scale < 1.0 { [s[0], s[1], s[2] * 2, s[3] * 2] } else { s };
    let x = normal(rng, &s);
    let y = kernels::resize_bilinear(&x, [scale, scale]);
    let r = normal(rng, y.shape());
    let dx = ops::resize_backward(&r, x.shape(), [scale, scale]);
    compare(&x, &dx, |x| dot(&kernels::resize_bilinear(x, [scale, scale]), &r))
}

fn check_maxpool(rng: &mut ChaCha8Rng) -> f64 {
    let [n, c, h, w] = dims(rng);
    let k = rng.random_range(2..=3);
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=1);
    let (h, w) = (h.max(k), w.max(k));
    let a = PoolAttrs {
        kernel: [k, k],
        stride: [stride, stride],
        pads: [pad; 4],
    };
    let x = separated(rng, &[n, c, h, w]);
    let (y, arg) = ops::maxpool_forward(&x, &a);
    let r = normal(rng, y.shape());
    let dx = ops::maxpool_backward(&r, &arg, x.shape());
    compare(&x, &dx, |x| dot(&ops::maxpool_forward(x, &a).0, &r))
}

fn check_scatter(rng: &mut ChaCha8Rng) -> f64 {
    let [n, m, h, w] = dims(rng);
    let m = m + 1;
    let mut idx: Vec<usize> = (0..m).filter(|_| rng.random_bool(0.6)).collect();
    if idx.is_empty() {
        idx.push(rng.random_range(0..m));
    }
    let x = normal(rng, &[n, idx.len(), h, w]);
    let r = normal(rng, &[n, m, h, w]);
    let dx = ops::channel_scatter_backward(&r, &idx);
    compare(&x, &dx, |x| dot(&ops::channel_scatter(x, &idx, m), &r))
}

fn check_cross_entropy(rng: &mut ChaCha8Rng) -> f64 {
    let [n, _, h, w] = dims(rng);
    let k = rng.random_range(2..=5);
    let logits = normal(rng, &[n, k, h, w]);
    let mut labels: Vec<u8> = (0..n * h * w).map(|_| if rng.random_bool(0.15) { ops::IGNORE_LABEL } else { rng.random_range(0..k as u8) }).collect();
    labels[0] = 0;
    let (_, g, _) = ops::softmax_cross_entropy(&logits, &labels);
    compare(&logits, &g, |l| ops::softmax_cross_entropy(l, &labels).0)
}

type Checker = fn(&mut ChaCha8Rng) -> f64;

pub const OPS: [(&str, Checker); 9] = [
    ("conv", check_conv),
    ("batch_norm_train", check_bn),
    ("relu", check_relu),
    ("add", check_add),
    ("concat", check_concat),
    ("resize", check_resize),
    ("max_pool", check_maxpool),
    ("channel_scatter", check_scatter),
    ("softmax_cross_entropy", check_cross_entropy),
];

/// Run every op on [`SHAPES_PER_OP`] random shapes.
pub fn gradient_suite(seed: u64) -> Vec<OpCheck> {
    OPS.iter()
        .enumerate()
        .map(|(i, (op, check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(i as u64));
            let max_rel_err = (0..SHAPES_PER_OP).map(|_| check(&mut rng)).fold(0.0, f64::max);
            OpCheck {
                op,
                shapes: SHAPES_PER_OP,
                max_rel_err,
            }
        })
        .collect()
}
