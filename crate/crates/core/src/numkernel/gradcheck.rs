//! Central finite-difference checks of every backward kernel in `f64`.
//!
//! Each instance draws fresh shapes, values and a random upstream gradient
//! `r`, then compares the analytic gradient of `sum(r * layer(x))` with
//! `(f(x + h) - f(x - h)) / 2h` at every coordinate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops;
use super::Tensor;
use crate::error::Result;

pub const STEP: f64 = 1e-5;
/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckedKind {
    Conv2d,
    MaxPool2d,
    Relu,
    Flatten,
    Linear,
    SoftmaxCrossEntropy,
}

impl CheckedKind {
    pub const ALL: [CheckedKind; 6] = [
        CheckedKind::Conv2d,
        CheckedKind::MaxPool2d,
        CheckedKind::Relu,
        CheckedKind::Flatten,
        CheckedKind::Linear,
        CheckedKind::SoftmaxCrossEntropy,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindReport {
    pub kind: CheckedKind,
    pub instances: usize,
    pub coordinates: usize,
    pub max_relative_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values kept at least `gap` away from zero, so ReLU kinks are never crossed.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(gap..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Largest relative error over every coordinate of `x`.
fn check_coords(
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
) -> Result<(usize, f64)> {
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + STEP;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - STEP;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok((x.len(), worst))
}

fn conv_instance(rng: &mut ChaCha8Rng) -> Result<(usize, f64)> {
    let n = rng.gen_range(1..=2);
    let cin = rng.gen_range(1..=3);
    let cout = rng.gen_range(1..=3);
    let k = rng.gen_range(1..=3);
    let stride = rng.gen_range(1..=2);
    let padding = rng.gen_range(0..=1);
    let hw = rng.gen_range(k.max(3)..=6);
    let x = random(rng, &[n, cin, hw, hw]);
    let w = random(rng, &[cout, cin, k, k]);
    let b = random(rng, &[cout]);
    let y = ops::conv2d(&x, &w, &b, stride, padding)?;
    let r = random(rng, y.shape());
    let g = ops::conv2d_backward(&x, &w, &r, stride, padding, true)?;
    let (c1, e1) = check_coords(&x, g.input.as_ref().expect("requested"), |x| {
        Ok(dot(&ops::conv2d(x, &w, &b, stride, padding)?, &r))
    })?;
    let (c2, e2) = check_coords(&w, &g.weights, |w| Ok(dot(&ops::conv2d(&x, w, &b, stride, padding)?, &r)))?;
    let (c3, e3) = check_coords(&b, &g.bias, |b| Ok(dot(&ops::conv2d(&x, &w, b, stride, padding)?, &r)))?;
    Ok((c1 + c2 + c3, e1.max(e2).max(e3)))
}

fn pool_instance(rng: &mut ChaCha8Rng) -> Result<(usize, f64)> {
    let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
    let window = rng.gen_range(2..=3);
    let stride = rng.gen_range(1..=window);
    let hw = rng.gen_range(window..=7);
    let len = n * c * hw * hw;
    // distinct values spaced far wider than the step, so the argmax is stable
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let x = Tensor::new(
        vec![n, c, hw, hw],
        order.iter().map(|&o| o as f64 * 0.01 + rng.gen_range(0.0..0.001)).collect(),
    )?;
    let (y, arg) = ops::maxpool2d(&x, window, stride)?;
    let r = random(rng, y.shape());
    let dx = ops::maxpool2d_backward(x.shape(), &arg, &r)?;
    check_coords(&x, &dx, |x| Ok(dot(&ops::maxpool2d(x, window, stride)?.0, &r)))
}

fn relu_instance(rng: &mut ChaCha8Rng) -> Result<(usize, f64)> {
    let shape = [rng.gen_range(1..=3), rng.gen_range(1..=4), 3, 3];
    let x = away_from_zero(rng, &shape, 0.01);
    let r = random(rng, &shape);
    let dx = ops::relu_backward(&x, &r)?;
    check_coords(&x, &dx, |x| Ok(dot(&ops::relu(x), &r)))
}

fn flatten_instance(rng: &mut ChaCha8Rng) -> Result<(usize, f64)> {
    let shape = vec![rng.gen_range(1..=3), rng.gen_range(1..=3), 2, rng.gen_range(1..=4)];
    let n = shape[0];
    let rest: usize = shape[1..].iter().product();
    let x = random(rng, &shape);
    let r = random(rng, &[n, rest]);
    // flatten's backward is a reshape of the upstream gradient
    let dx = r.clone().reshape(shape)?;
    check_coords(&x, &dx, |x| Ok(dot(&x.clone().reshape(vec![n, rest])?, &r)))
}

fn linear_instance(rng: &mut ChaCha8Rng) -> Result<(usize, f64)> {
    let (n, fin, fout) = (rng.gen_range(1..=4), rng.gen_range(1..=8), rng.gen_range(1..=5));
    let x = random(rng, &[n, fin]);
    let w = random(rng, &[fout, fin]);
    let b = random(rng, &[fout]);
    let r = random(rng, &[n, fout]);
    let g = ops::linear_backward(&x, &w, &r)?;
    let (c1, e1) = check_coords(&x, &g.input, |x| Ok(dot(&ops::linear(x, &w, &b)?, &r)))?;
    let (c2, e2) = check_coords(&w, &g.weights, |w| Ok(dot(&ops::linear(&x, w, &b)?, &r)))?;
    let (c3, e3) = check_coords(&b, &g.bias, |b| Ok(dot(&ops::linear(&x, &w, b)?, &r)))?;
    Ok((c1 + c2 + c3, e1.max(e2).max(e3)))
}

fn softmax_instance(rng: &mut ChaCha8Rng) -> Result<(usize, f64)> {
    let (n, c) = (rng.gen_range(1..=5), rng.gen_range(2..=10));
    let logits = Tensor::from_fn(&[n, c], |_| rng.gen_range(-4.0..4.0));
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
    let (_, d) = ops::softmax_cross_entropy(&logits, &labels)?;
    check_coords(&logits, &d, |z| Ok(ops::softmax_cross_entropy(z, &labels)?.0))
}

/// Runs `instances` randomized checks of `kind`.
pub fn check_kind(kind: CheckedKind, instances: usize, seed: u64) -> Result<KindReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ kind as u64);
    let mut coordinates = 0;
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (c, e) = match kind {
            CheckedKind::Conv2d => conv_instance(&mut rng)?,
            CheckedKind::MaxPool2d => pool_instance(&mut rng)?,
            CheckedKind::Relu => relu_instance(&mut rng)?,
            CheckedKind::Flatten => flatten_instance(&mut rng)?,
            CheckedKind::Linear => linear_instance(&mut rng)?,
            CheckedKind::SoftmaxCrossEntropy => softmax_instance(&mut rng)?,
        };
        coordinates += c;
        worst = worst.max(e);
    }
    Ok(KindReport {
        kind,
        instances,
        coordinates,
        max_relative_error: worst,
    })
}
