//! Perturbation surrogates over contiguous signal segments (LIME, KernelSHAP).

use rand::seq::index::sample;
use rand::Rng;

use super::MethodParams;
use crate::engine::{Mode, Network};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A scalar-valued model queried on whole signals.
pub trait BlackBox: Sync {
    fn eval_batch(&self, inputs: &[Vec<f32>]) -> Result<Vec<f64>>;
}

/// Target-class logit of a network.
pub struct NetworkLogit<'a> {
    pub net: &'a Network,
    pub target: usize,
}

impl BlackBox for NetworkLogit<'_> {
    fn eval_batch(&self, inputs: &[Vec<f32>]) -> Result<Vec<f64>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let len = inputs[0].len();
        let data: Vec<f32> = inputs.iter().flat_map(|v| v.iter().copied()).collect();
        let x = Tensor::new(vec![inputs.len(), 1, len], data).map_err(|e| Error::Input(e.to_string()))?;
        let (logits, _) = self.net.forward(&x, Mode::Eval, false)?;
        let k = self.net.num_outputs();
        Ok(logits.data().chunks(k).map(|row| row[self.target] as f64).collect())
    }
}

/// Adapter for plain functions of a signal.
pub struct FnModel<F>(pub F);

impl<F: Fn(&[f32]) -> f64 + Sync> BlackBox for FnModel<F> {
    fn eval_batch(&self, inputs: &[Vec<f32>]) -> Result<Vec<f64>> {
        Ok(inputs.iter().map(|x| (self.0)(x)).collect())
    }
}

/// Boundaries `[b_0 = 0, ..., b_n = length]` of `n_segments` contiguous
/// segments of `length / n_segments` samples; the last absorbs the remainder.
pub fn segment_signal(length: usize, n_segments: usize) -> Result<Vec<usize>> {
    if n_segments == 0 || n_segments > length {
        return Err(Error::Input(format!("cannot cut {length} samples into {n_segments} segments")));
    }
    let size = length / n_segments;
    let mut bounds: Vec<usize> = (0..n_segments).map(|i| i * size).collect();
    bounds.push(length);
    Ok(bounds)
}

struct Perturber<'a> {
    x: &'a [f32],
    bounds: Vec<usize>,
    means: Vec<f32>,
}

impl<'a> Perturber<'a> {
    fn new(x: &'a [f32], segments: usize) -> Result<Self> {
        let bounds = segment_signal(x.len(), segments)?;
        let means = bounds
            .windows(2)
            .map(|w| (x[w[0]..w[1]].iter().map(|&v| v as f64).sum::<f64>() / (w[1] - w[0]) as f64) as f32)
            .collect();
        Ok(Perturber { x, bounds, means })
    }

    fn segments(&self) -> usize {
        self.means.len()
    }

    /// Signal with every segment whose mask bit is off replaced by its mean.
    fn apply(&self, mask: &[bool]) -> Vec<f32> {
        let mut out = self.x.to_vec();
        for (s, &keep) in mask.iter().enumerate() {
            if !keep {
                out[self.bounds[s]..self.bounds[s + 1]].fill(self.means[s]);
            }
        }
        out
    }

    fn evaluate(&self, model: &dyn BlackBox, masks: &[Vec<bool>]) -> Result<Vec<f64>> {
        const CHUNK: usize = 32;
        let mut out = Vec::with_capacity(masks.len());
        for chunk in masks.chunks(CHUNK) {
            let inputs: Vec<Vec<f32>> = chunk.iter().map(|m| self.apply(m)).collect();
            out.extend(model.eval_batch(&inputs)?);
        }
        Ok(out)
    }

    fn broadcast(&self, coef: &[f64]) -> Vec<f32> {
        let mut out = vec![0.0f32; self.x.len()];
        for (s, &c) in coef.iter().enumerate() {
            out[self.bounds[s]..self.bounds[s + 1]].fill(c as f32);
        }
        out
    }
}

/// Solves `A x = b` for symmetric positive definite `A` (row-major `n x n`).
fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 1e-12 * a[i * n + i].abs().max(1e-300)) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0f64; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0f64; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Some(x)
}

/// Weighted least squares `min sum_s w_s (y_s - c - f_s . beta)^2 + ridge |beta|^2`
/// with an unpenalised intercept `c`. Returns `beta`.
fn weighted_ridge(features: &[Vec<f64>], y: &[f64], w: &[f64], ridge: f64) -> Result<Vec<f64>> {
    let p = features.first().map_or(0, Vec::len);
    if p == 0 {
        return Ok(Vec::new());
    }
    let wsum: f64 = w.iter().sum();
    if !(wsum > 0.0) {
        return Err(Error::Input("surrogate sample weights sum to zero".into()));
    }
    let mut fmean = vec![0.0f64; p];
    let mut ymean = 0.0;
    for ((f, &yv), &wv) in features.iter().zip(y).zip(w) {
        for (m, &v) in fmean.iter_mut().zip(f) {
            *m += wv * v;
        }
        ymean += wv * yv;
    }
    fmean.iter_mut().for_each(|m| *m /= wsum);
    ymean /= wsum;

    let mut a = vec![0.0f64; p * p];
    let mut rhs = vec![0.0f64; p];
    let mut centered = vec![0.0f64; p];
    for ((f, &yv), &wv) in features.iter().zip(y).zip(w) {
        for (c, (&v, &m)) in centered.iter_mut().zip(f.iter().zip(&fmean)) {
            *c = v - m;
        }
        let yc = yv - ymean;
        for i in 0..p {
            let wi = wv * centered[i];
            if wi == 0.0 {
                continue;
            }
            rhs[i] += wi * yc;
            for j in 0..=i {
                a[i * p + j] += wi * centered[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            a[j * p + i] = a[i * p + j];
        }
    }
    let solve = |lambda: f64| {
        let mut m = a.clone();
        for i in 0..p {
            m[i * p + i] += lambda;
        }
        cholesky_solve(&m, &rhs, p)
    };
    if let Some(beta) = solve(ridge) {
        return Ok(beta);
    }
    let trace: f64 = (0..p).map(|i| a[i * p + i]).sum::<f64>() / p as f64;
    let retry = (ridge * 10.0).max(1e-6 * trace.max(1e-12));
    solve(retry).ok_or_else(|| Error::Input("surrogate regression is singular even with increased ridge".into()))
}

/// LIME with segment masks: each segment kept with probability 1/2, masked
/// segments filled with their mean, proximity weight `exp(-d^2 / width^2)`
/// with `d` the masked fraction. The first sample is the unmasked signal.
pub fn lime_1d<R: Rng>(model: &dyn BlackBox, x: &[f32], params: &MethodParams, rng: &mut R) -> Result<Vec<f32>> {
    let pert = Perturber::new(x, params.segments)?;
    let m = pert.segments();
    let mut masks = Vec::with_capacity(params.samples);
    masks.push(vec![true; m]);
    while masks.len() < params.samples {
        masks.push((0..m).map(|_| rng.gen_bool(0.5)).collect());
    }
    let y = pert.evaluate(model, &masks)?;
    let width = params.lime_kernel_width;
    let weights: Vec<f64> = masks
        .iter()
        .map(|mask| {
            let d = mask.iter().filter(|&&k| !k).count() as f64 / m as f64;
            (-(d * d) / (width * width)).exp()
        })
        .collect();
    let features: Vec<Vec<f64>> = masks.iter().map(|mask| mask.iter().map(|&k| k as u8 as f64).collect()).collect();
    let beta = weighted_ridge(&features, &y, &weights, params.ridge)?;
    Ok(pert.broadcast(&beta))
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley kernel weight of a coalition of size `s` out of `m` players.
pub fn shapley_kernel(m: usize, s: usize) -> f64 {
    (m - 1) as f64 / (binomial(m, s) * s as f64 * (m - s) as f64)
}

/// KernelSHAP with segment players. The empty and full coalitions enter as
/// exact constraints (`phi_0 = f(empty)`, `sum phi = f(full) - f(empty)`).
/// When every proper coalition fits in the sample budget they are enumerated
/// with exact kernel weights; otherwise coalition sizes are drawn in
/// proportion to their total kernel mass and weighted uniformly.
pub fn kernelshap_1d<R: Rng>(model: &dyn BlackBox, x: &[f32], params: &MethodParams, rng: &mut R) -> Result<Vec<f32>> {
    let pert = Perturber::new(x, params.segments)?;
    let m = pert.segments();
    let ends = pert.evaluate(model, &[vec![false; m], vec![true; m]])?;
    let (f_empty, f_full) = (ends[0], ends[1]);
    let delta = f_full - f_empty;
    if m == 1 {
        return Ok(pert.broadcast(&[delta]));
    }

    let mut masks: Vec<Vec<bool>> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let enumerate = m < 63 && (1u64 << m) - 2 <= params.samples as u64;
    if enumerate {
        for bits in 1..(1u64 << m) - 1 {
            let mask: Vec<bool> = (0..m).map(|j| bits >> j & 1 == 1).collect();
            let s = bits.count_ones() as usize;
            masks.push(mask);
            weights.push(shapley_kernel(m, s));
        }
    } else {
        let size_mass: Vec<f64> = (1..m).map(|s| (m - 1) as f64 / (s as f64 * (m - s) as f64)).collect();
        let total: f64 = size_mass.iter().sum();
        for _ in 0..params.samples {
            let mut u = rng.gen::<f64>() * total;
            let mut s = m - 1;
            for (i, &w) in size_mass.iter().enumerate() {
                if u < w {
                    s = i + 1;
                    break;
                }
                u -= w;
            }
            let mut mask = vec![false; m];
            for j in sample(rng, m, s) {
                mask[j] = true;
            }
            masks.push(mask);
            weights.push(1.0);
        }
    }
    let y = pert.evaluate(model, &masks)?;

    // Eliminate the last player: phi_last = delta - sum_{j<last} phi_j.
    let last = m - 1;
    let mut features = Vec::with_capacity(masks.len());
    let mut target = Vec::with_capacity(masks.len());
    for (mask, &fy) in masks.iter().zip(&y) {
        let zl = mask[last] as u8 as f64;
        features.push((0..last).map(|j| mask[j] as u8 as f64 - zl).collect::<Vec<f64>>());
        target.push(fy - f_empty - zl * delta);
    }
    let phi_head = constrained_wls(&features, &target, &weights)?;
    let mut phi = phi_head.clone();
    phi.push(delta - phi_head.iter().sum::<f64>());
    Ok(pert.broadcast(&phi))
}

/// Weighted least squares through the origin (no intercept, no penalty).
fn constrained_wls(features: &[Vec<f64>], y: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    let p = features.first().map_or(0, Vec::len);
    let mut a = vec![0.0f64; p * p];
    let mut rhs = vec![0.0f64; p];
    for ((f, &yv), &wv) in features.iter().zip(y).zip(w) {
        for i in 0..p {
            let wi = wv * f[i];
            if wi == 0.0 {
                continue;
            }
            rhs[i] += wi * yv;
            for j in 0..p {
                a[i * p + j] += wi * f[j];
            }
        }
    }
    if let Some(x) = cholesky_solve(&a, &rhs, p) {
        return Ok(x);
    }
    let trace: f64 = (0..p).map(|i| a[i * p + i]).sum::<f64>() / p.max(1) as f64;
    for i in 0..p {
        a[i * p + i] += 1e-8 * trace.max(1e-12);
    }
    cholesky_solve(&a, &rhs, p).ok_or_else(|| Error::Input("KernelSHAP regression is singular".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_matches_known_solution() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let x = cholesky_solve(&a, &[2.0, 1.0], 2).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-12 && x[1].abs() < 1e-12);
        assert!(cholesky_solve(&[1.0, 1.0, 1.0, 1.0], &[1.0, 1.0], 2).is_none());
    }

    #[test]
    fn kernel_weights_are_symmetric() {
        for s in 1..7 {
            assert!((shapley_kernel(8, s) - shapley_kernel(8, 8 - s)).abs() < 1e-15);
        }
        assert!((shapley_kernel(3, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ridge_recovers_linear_model() {
        let features: Vec<Vec<f64>> = (0..16).map(|i| vec![(i & 1) as f64, (i >> 1 & 1) as f64]).collect();
        let y: Vec<f64> = features.iter().map(|f| 3.0 + 2.0 * f[0] - f[1]).collect();
        let beta = weighted_ridge(&features, &y, &vec![1.0; 16], 0.0).unwrap();
        assert!((beta[0] - 2.0).abs() < 1e-9 && (beta[1] + 1.0).abs() < 1e-9);
    }
}
