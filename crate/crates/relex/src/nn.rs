//! Numeric building blocks shared by the encoder and the heads: activations,
//! stabilized softmax, layer normalization, seeded initialization, the Adam
//! optimizer, and the warmup/cosine learning-rate schedule.

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub const LAYERNORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;

/// Deterministic RNG for a (base seed, purpose) pair. Distinct purposes give
/// independent streams, so adding a new consumer never shifts existing ones.
pub fn derive_seed(base: u64, purpose: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(purpose.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest longer than 8 bytes"))
}

pub fn seeded_rng(base: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, purpose))
}

pub fn init_normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("std is positive and finite");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

pub fn init_normal_1d(rng: &mut impl Rng, len: usize, std: f64) -> Array1<f64> {
    let dist = Normal::new(0.0, std).expect("std is positive and finite");
    Array1::from_shape_fn(len, |_| dist.sample(rng))
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Stabilized softmax over the first `valid` entries; the rest are exactly 0.
pub fn softmax_prefix(scores: &[f64], valid: usize) -> Vec<f64> {
    debug_assert!(valid >= 1 && valid <= scores.len());
    let max = scores[..valid]
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; scores.len()];
    let mut sum = 0.0;
    for t in 0..valid {
        let e = (scores[t] - max).exp();
        out[t] = e;
        sum += e;
    }
    for v in &mut out[..valid] {
        *v /= sum;
    }
    out
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    softmax_prefix(scores, scores.len())
}

/// Given y = softmax(x) and dL/dy, returns dL/dx. Entries where y is exactly
/// zero (masked positions) stay zero.
pub fn softmax_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(dy).map(|(yi, di)| yi * di).sum();
    y.iter().zip(dy).map(|(yi, di)| yi * (di - dot)).collect()
}

/// Row-wise layer normalization over the first `valid` rows of x.
/// Returns (y, mean, rstd) caches for the backward pass; rows past `valid`
/// are passed through untouched.
pub fn layernorm_rows(
    x: &Array2<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    valid: usize,
) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
    let d = x.ncols();
    let mut y = x.clone();
    let mut means = vec![0.0; valid];
    let mut rstds = vec![0.0; valid];
    for t in 0..valid {
        let row = x.row(t);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LAYERNORM_EPS).sqrt();
        means[t] = mean;
        rstds[t] = rstd;
        let mut out = y.row_mut(t);
        for j in 0..d {
            out[j] = (row[j] - mean) * rstd * gamma[j] + beta[j];
        }
    }
    (y, means, rstds)
}

/// Backward of [`layernorm_rows`]. Accumulates into dgamma/dbeta, returns dx.
pub fn layernorm_rows_backward(
    dy: &Array2<f64>,
    x: &Array2<f64>,
    gamma: &Array1<f64>,
    means: &[f64],
    rstds: &[f64],
    valid: usize,
    dgamma: &mut Array1<f64>,
    dbeta: &mut Array1<f64>,
) -> Array2<f64> {
    let d = x.ncols();
    let mut dx = Array2::zeros(x.raw_dim());
    for t in 0..valid {
        let mean = means[t];
        let rstd = rstds[t];
        let xr = x.row(t);
        let dyr = dy.row(t);
        // xhat_j = (x_j - mean) * rstd
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            let xhat = (xr[j] - mean) * rstd;
            let dxhat = dyr[j] * gamma[j];
            dgamma[j] += dyr[j] * xhat;
            dbeta[j] += dyr[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        let inv_d = 1.0 / d as f64;
        let mut dxr = dx.row_mut(t);
        for j in 0..d {
            let xhat = (xr[j] - mean) * rstd;
            let dxhat = dyr[j] * gamma[j];
            dxr[j] = rstd * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
        }
    }
    dx
}

/// Read-only view of one named parameter tensor.
#[derive(Debug, Clone, Copy)]
pub enum TensorView<'a> {
    D1(&'a Array1<f64>),
    D2(&'a Array2<f64>),
}

impl<'a> TensorView<'a> {
    pub fn len(&self) -> usize {
        match self {
            TensorView::D1(a) => a.len(),
            TensorView::D2(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            TensorView::D1(a) => a.as_slice().expect("standard layout"),
            TensorView::D2(a) => a.as_slice().expect("standard layout"),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorView::D1(a) => a.shape().to_vec(),
            TensorView::D2(a) => a.shape().to_vec(),
        }
    }
}

/// Mutable view of one named parameter tensor.
#[derive(Debug)]
pub enum TensorMut<'a> {
    D1(&'a mut Array1<f64>),
    D2(&'a mut Array2<f64>),
}

impl<'a> TensorMut<'a> {
    pub fn len(&self) -> usize {
        match self {
            TensorMut::D1(a) => a.len(),
            TensorMut::D2(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_slice_mut(&mut self) -> &mut [f64] {
        match self {
            TensorMut::D1(a) => a.as_slice_mut().expect("standard layout"),
            TensorMut::D2(a) => a.as_slice_mut().expect("standard layout"),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            TensorMut::D1(a) => a.as_slice().expect("standard layout"),
            TensorMut::D2(a) => a.as_slice().expect("standard layout"),
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers are keyed by tensor name;
/// tensors outside the trainable set must simply never be passed in.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Adam {
        Adam {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Starts one optimizer step; call [`Adam::update`] once per trainable
    /// tensor afterwards, all with the same learning rate.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, lr: f64, param: &mut TensorMut<'_>, grad: &TensorView<'_>) {
        let p = param.as_slice_mut();
        let g = grad.as_slice();
        assert_eq!(p.len(), g.len(), "gradient shape mismatch for {name}");
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
        assert_eq!(m.len(), p.len(), "stale moment buffer for {name}");
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..p.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[i]);
        }
    }
}

/// Warmup steps for a run: ceil(fraction × total updates).
pub fn warmup_steps(total_steps: usize, fraction: f64) -> usize {
    (fraction * total_steps as f64).ceil() as usize
}

/// Learning rate at 1-indexed step `t`: linear ramp to `peak` over the warmup
/// steps, then cosine decay to zero at `total`.
pub fn lr_at(t: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    debug_assert!(t >= 1 && t <= total);
    if warmup > 0 && t <= warmup {
        return peak * t as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = (t - warmup) as f64 / span;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn derived_seeds_distinct_and_stable() {
        assert_eq!(derive_seed(42, "init"), derive_seed(42, "init"));
        assert_ne!(derive_seed(42, "init"), derive_seed(42, "shuffle"));
        assert_ne!(derive_seed(42, "init"), derive_seed(43, "init"));
    }

    #[test]
    fn softmax_normalizes_and_is_stable() {
        let p = softmax(&[1000.0, 1001.0, 1002.0]);
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v.is_finite() && v > 0.0));
        assert!(p[2] > p[1] && p[1] > p[0]);
    }

    #[test]
    fn softmax_prefix_zeroes_suffix() {
        let p = softmax_prefix(&[0.3, 0.3, 99.0, 99.0], 2);
        assert_eq!(p[2], 0.0);
        assert_eq!(p[3], 0.0);
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_uniform_for_equal_logits() {
        let p = softmax(&[0.7; 5]);
        for v in p {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let x = [0.3, -1.2, 2.5, 0.0];
        let p = softmax(&x);
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        for (pi, xi) in p.iter().zip(&x) {
            assert!((pi - xi.exp() / z).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_backward_matches_fd() {
        let x = [0.4, -0.9, 1.3, 0.2];
        let dy = [0.7, -0.3, 0.1, 0.5];
        let y = softmax(&x);
        let dx = softmax_backward(&y, &dy);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let lp: f64 = softmax(&xp).iter().zip(&dy).map(|(a, b)| a * b).sum();
            let lm: f64 = softmax(&xm).iter().zip(&dy).map(|(a, b)| a * b).sum();
            let fd = (lp - lm) / (2.0 * h);
            assert!((dx[i] - fd).abs() < 1e-7, "component {i}: {} vs {fd}", dx[i]);
        }
    }

    #[test]
    fn gelu_anchor_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-9);
        assert!(gelu(-10.0).abs() < 1e-9);
        assert!(gelu(1.0) > 0.8 && gelu(1.0) < 0.9);
    }

    #[test]
    fn gelu_prime_matches_fd() {
        let h = 1e-6;
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.5, 2.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_prime(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layernorm_standardizes_rows() {
        let x = array![[1.0, 2.0, 3.0, 4.0], [10.0, 10.0, 30.0, -2.0]];
        let gamma = Array1::ones(4);
        let beta = Array1::zeros(4);
        let (y, _, _) = layernorm_rows(&x, &gamma, &beta, 2);
        for t in 0..2 {
            let mean = y.row(t).sum() / 4.0;
            let var = y.row(t).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layernorm_leaves_rows_past_valid_untouched() {
        let x = array![[1.0, 2.0], [5.0, 6.0]];
        let gamma = Array1::ones(2);
        let beta = Array1::zeros(2);
        let (y, _, _) = layernorm_rows(&x, &gamma, &beta, 1);
        assert_eq!(y.row(1), x.row(1));
    }

    #[test]
    fn layernorm_backward_matches_fd() {
        let x = array![[0.3, -1.0, 0.8], [2.0, 0.1, -0.4]];
        let gamma = array![1.1, 0.9, 1.3];
        let beta = array![0.0, 0.2, -0.1];
        let dy = array![[0.5, -0.2, 0.3], [0.1, 0.7, -0.6]];
        let (_, means, rstds) = layernorm_rows(&x, &gamma, &beta, 2);
        let mut dgamma = Array1::zeros(3);
        let mut dbeta = Array1::zeros(3);
        let dx = layernorm_rows_backward(&dy, &x, &gamma, &means, &rstds, 2, &mut dgamma, &mut dbeta);

        let loss = |x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>| -> f64 {
            let (y, _, _) = layernorm_rows(x, gamma, beta, 2);
            (y * &dy).sum()
        };
        let h = 1e-6;
        for t in 0..2 {
            for j in 0..3 {
                let mut xp = x.clone();
                xp[[t, j]] += h;
                let mut xm = x.clone();
                xm[[t, j]] -= h;
                let fd = (loss(&xp, &gamma, &beta) - loss(&xm, &gamma, &beta)) / (2.0 * h);
                assert!((dx[[t, j]] - fd).abs() < 1e-6, "dx[{t},{j}]");
            }
        }
        for j in 0..3 {
            let mut gp = gamma.clone();
            gp[j] += h;
            let mut gm = gamma.clone();
            gm[j] -= h;
            let fd = (loss(&x, &gp, &beta) - loss(&x, &gm, &beta)) / (2.0 * h);
            assert!((dgamma[j] - fd).abs() < 1e-6, "dgamma[{j}]");
            let mut bp = beta.clone();
            bp[j] += h;
            let mut bm = beta.clone();
            bm[j] -= h;
            let fd = (loss(&x, &gamma, &bp) - loss(&x, &gamma, &bm)) / (2.0 * h);
            assert!((dbeta[j] - fd).abs() < 1e-6, "dbeta[{j}]");
        }
    }

    #[test]
    fn adam_first_step_moves_by_signed_lr() {
        let mut opt = Adam::new(0.9, 0.999, 1e-8, 0.0);
        let mut p = array![1.0, -2.0, 0.5];
        let g = array![0.3, -0.7, 0.0001];
        let before = p.clone();
        opt.begin_step();
        opt.update("p", 0.01, &mut TensorMut::D1(&mut p), &TensorView::D1(&g));
        // first step: mhat = g, vhat = g^2, so the move is lr·g/(|g|+eps) ≈ lr·sign(g)
        for i in 0..3 {
            let delta = before[i] - p[i];
            assert!((delta - 0.01 * g[i].signum()).abs() < 1e-4, "i={i} delta={delta}");
        }
    }

    #[test]
    fn adam_weight_decay_shrinks_params_without_gradient() {
        let mut opt = Adam::new(0.9, 0.999, 1e-8, 0.1);
        let mut p = array![2.0];
        let g = array![0.0];
        opt.begin_step();
        opt.update("p", 0.5, &mut TensorMut::D1(&mut p), &TensorView::D1(&g));
        // pure decay: p ← p − lr·wd·p = 2 · (1 − 0.05)
        assert!((p[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn adam_moments_keyed_per_tensor() {
        let mut opt = Adam::new(0.9, 0.999, 1e-8, 0.0);
        let mut a = array![0.0];
        let mut b = array![0.0];
        opt.begin_step();
        opt.update("a", 0.1, &mut TensorMut::D1(&mut a), &TensorView::D1(&array![1.0]));
        opt.update("b", 0.1, &mut TensorMut::D1(&mut b), &TensorView::D1(&array![-1.0]));
        assert!(a[0] < 0.0 && b[0] > 0.0);
        assert_eq!(opt.step_count(), 1);
    }

    // closed-form schedule, written independently of lr_at
    fn schedule_oracle(t: usize, total: usize, warmup: usize, peak: f64) -> f64 {
        if warmup > 0 && t <= warmup {
            peak * (t as f64) / (warmup as f64)
        } else {
            let frac = (t - warmup) as f64 / ((total - warmup) as f64);
            peak * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }

    #[test]
    fn schedule_matches_closed_form() {
        let total = 200;
        let warmup = warmup_steps(total, 0.05); // 10 steps
        assert_eq!(warmup, 10);
        for t in 1..=total {
            let got = lr_at(t, total, warmup, 2e-5);
            let want = schedule_oracle(t, total, warmup, 2e-5);
            assert!((got - want).abs() < 1e-18, "t={t}");
        }
    }

    #[test]
    fn schedule_anchor_points() {
        // 2 epochs over 10 batches at warmup fraction 0.001: 1 warmup step
        let total = 20;
        let warmup = warmup_steps(total, 0.001);
        assert_eq!(warmup, 1);
        assert!((lr_at(1, total, warmup, 2e-5) - 2e-5).abs() < 1e-20);
        assert!(lr_at(20, total, warmup, 2e-5) < 1e-7);
        // midpoint of the cosine phase sits at half peak
        let mid = lr_at(1 + 19 / 2, total, warmup, 2e-5);
        assert!(mid > 0.4 * 2e-5 && mid < 0.6 * 2e-5);
    }

    #[test]
    fn schedule_is_nonnegative_and_peaks_at_warmup_end() {
        let total = 100;
        let warmup = 7;
        let peak = 1e-3;
        let mut max = 0.0f64;
        for t in 1..=total {
            let lr = lr_at(t, total, warmup, peak);
            assert!(lr >= 0.0 && lr <= peak + 1e-18);
            max = max.max(lr);
        }
        assert!((max - peak).abs() < 1e-18);
        assert!((lr_at(warmup, total, warmup, peak) - peak).abs() < 1e-18);
    }
}
