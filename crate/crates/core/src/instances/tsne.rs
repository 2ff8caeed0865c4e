//! Exact t-SNE over downsampled grayscale pixels, with a grid layout for
//! diff sets too small or too uniform to embed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::InstanceDiff;
use crate::datasets::Dataset;
use crate::error::{Error, Result};

/// Longest side of the images fed to t-SNE.
pub const MAX_SIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 15.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingMethod {
    Tsne {
        perplexity: f64,
        iterations: usize,
    },
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding2D {
    /// Instance ids, parallel to `points`.
    pub ids: Vec<String>,
    pub points: Vec<[f64; 2]>,
    pub seed: u64,
    pub method: EmbeddingMethod,
}

/// Averages channels and `s x s` blocks so neither side exceeds [`MAX_SIDE`].
/// `image` is one `[C,H,W]` slice.
pub fn downsample_gray(image: &[f32], shape: [usize; 3]) -> Vec<f64> {
    let [c, h, w] = shape;
    let s = h.max(w).div_ceil(MAX_SIDE).max(1);
    let (oh, ow) = (h.div_ceil(s), w.div_ceil(s));
    let mut out = vec![0.0; oh * ow];
    let mut n = vec![0usize; oh * ow];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let o = (y / s) * ow + x / s;
                out[o] += image[(ch * h + y) * w + x] as f64;
                n[o] += 1;
            }
        }
    }
    for (v, k) in out.iter_mut().zip(n) {
        *v /= k as f64;
    }
    out
}

fn grid(n: usize) -> Vec<[f64; 2]> {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    (0..n).map(|i| [(i % cols) as f64, (i / cols) as f64]).collect()
}

fn sq_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Symmetrized affinities with each row's conditional entropy matched to
/// `ln(perplexity)` by bisection on the Gaussian precision.
fn joint_probabilities(d: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        let (mut beta, mut lo, mut hi) = (1.0f64, f64::NEG_INFINITY, f64::INFINITY);
        // Distances are rescaled by the row minimum for numerical range.
        let dmin = (0..n)
            .filter(|&j| j != i)
            .map(|j| d[i * n + j])
            .fold(f64::INFINITY, f64::min);
        for _ in 0..200 {
            let mut sum = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-(d[i * n + j] - dmin) * beta).exp() };
                sum += row[j];
            }
            let mut h = 0.0;
            for j in 0..n {
                if j != i {
                    h += beta * (d[i * n + j] - dmin) * row[j];
                }
            }
            h = h / sum + sum.ln();
            let diff = h - target;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
            }
        }
        let sum: f64 = row.iter().sum();
        for j in 0..n {
            p[i * n + j] = row[j] / sum;
        }
    }
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    joint
}

/// Exact t-SNE of `x` (one row per point) into two dimensions. Needs at
/// least three points.
pub fn tsne(x: &[Vec<f64>], config: &TsneConfig) -> Result<Vec<[f64; 2]>> {
    let n = x.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("t-SNE needs 3 points, got {n}")));
    }
    if !(config.perplexity > 0.0) {
        return Err(Error::InvalidArgument("perplexity must be positive".into()));
    }
    let perplexity = config.perplexity.min((n - 1) as f64 / 3.0).max(1.0);
    let d = sq_distances(x);
    let p = joint_probabilities(&d, n, perplexity);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![[0.0f64; 2]; n];

    for iter in 0..config.iterations {
        let exaggerate = iter < config.exaggeration_iterations;
        let scale = if exaggerate { config.early_exaggeration } else { 1.0 };
        let momentum = if exaggerate { 0.5 } else { 0.8 };

        let mut sum_num = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = q;
                num[j * n + i] = q;
                sum_num += 2.0 * q;
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[i * n + j] / sum_num).max(1e-12);
                let m = (scale * p[i * n + j] - q) * num[i * n + j];
                g[0] += m * (y[i][0] - y[j][0]);
                g[1] += m * (y[i][1] - y[j][1]);
            }
            grad[i] = [4.0 * g[0], 4.0 * g[1]];
        }
        for i in 0..n {
            for k in 0..2 {
                let same_sign = (grad[i][k] > 0.0) == (update[i][k] > 0.0);
                gains[i][k] = if same_sign { gains[i][k] * 0.8 } else { gains[i][k] + 0.2 };
                gains[i][k] = gains[i][k].max(0.01);
                update[i][k] = momentum * update[i][k] - config.learning_rate * gains[i][k] * grad[i][k];
                y[i][k] += update[i][k];
            }
        }
        let mean = y.iter().fold([0.0; 2], |a, p| [a[0] + p[0], a[1] + p[1]]);
        for p in &mut y {
            p[0] -= mean[0] / n as f64;
            p[1] -= mean[1] / n as f64;
        }
    }
    if y.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::InvalidArgument("t-SNE diverged".into()));
    }
    Ok(y)
}

/// Lays out every instance of `diff`, degenerated first.
pub fn embed_instances(diff: &InstanceDiff, test: &Dataset, config: &TsneConfig) -> Result<Embedding2D> {
    let shape = test.image_shape();
    let per = shape.iter().product::<usize>();
    let mut ids = Vec::with_capacity(diff.len());
    let mut x = Vec::with_capacity(diff.len());
    for r in diff.records() {
        if r.index >= test.len() {
            return Err(Error::InvalidArgument(format!("instance {} outside the test set", r.index)));
        }
        ids.push(r.id.clone());
        let img = &test.images.data()[r.index * per..(r.index + 1) * per];
        x.push(downsample_gray(img, shape));
    }
    let grid_layout = |ids: Vec<String>| Embedding2D {
        points: grid(ids.len()),
        ids,
        seed: config.seed,
        method: EmbeddingMethod::Grid,
    };
    if x.len() < 3 {
        return Ok(grid_layout(ids));
    }
    if x.iter().all(|v| v == &x[0]) {
        log::warn!("all {} instances are identical; using grid layout", x.len());
        return Ok(grid_layout(ids));
    }
    let points = tsne(&x, config)?;
    Ok(Embedding2D {
        ids,
        points,
        seed: config.seed,
        method: EmbeddingMethod::Tsne {
            perplexity: config.perplexity.min((x.len() - 1) as f64 / 3.0).max(1.0),
            iterations: config.iterations,
        },
    })
}
