//! Batch normalization: training and inference forward passes, the
//! running-statistic recurrences, and folding into the preceding layer.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{ConvParams, DepthwiseConvParams, Tensor};
use serde::{Deserialize, Serialize};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_RHO: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BNParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    /// Weight of the previous running value in each update.
    pub rho: f64,
}

/// Per-channel statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    /// Elements per channel: batch size times spatial extent.
    pub count: usize,
}

/// Saved state for [`bn_backward_train`].
#[derive(Debug, Clone)]
pub struct BnCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BnTrainOutput {
    pub output: Tensor,
    pub stats: BatchStats,
    pub params: BNParams,
    pub cache: BnCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl BNParams {
    /// Fresh parameters: γ = 1, β = 0, Mᵗ = 0, Vᵗ = 1.
    pub fn new(channels: usize, epsilon: f64, rho: f64) -> Result<Self> {
        let p = BNParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon,
            rho,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if c == 0 || self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c
        {
            return Err(shape_err("batch-norm parameter vectors differ in length"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParam(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::InvalidParam(format!("rho must be in (0,1), got {}", self.rho)));
        }
        if self.running_var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidParam("running variance must be >= 0".into()));
        }
        Ok(())
    }

    /// `γ / sqrt(Vᵗ + ε)` for channel `c`.
    pub fn scale(&self, c: usize) -> f64 {
        self.gamma[c] / (self.running_var[c] + self.epsilon).sqrt()
    }

    /// Inference-mode map of a single value on channel `c`.
    pub fn infer_scalar(&self, c: usize, x: f64) -> f64 {
        (x - self.running_mean[c]) / (self.running_var[c] + self.epsilon).sqrt() * self.gamma[c]
            + self.beta[c]
    }

    /// Applies one step of the running-mean / running-variance recurrences.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let n = stats.count as f64;
        let bessel = n / (n - 1.0);
        for c in 0..self.channels() {
            self.running_mean[c] = self.running_mean[c] * self.rho + stats.mu[c] * (1.0 - self.rho);
            self.running_var[c] =
                self.running_var[c] * self.rho + stats.sigma2[c] * (1.0 - self.rho) * bessel;
        }
    }

    pub fn remove_channels(&self, remove: &[usize]) -> BNParams {
        let keep = |v: &Vec<f64>| -> Vec<f64> {
            v.iter()
                .enumerate()
                .filter(|(i, _)| !remove.contains(i))
                .map(|(_, &x)| x)
                .collect()
        };
        BNParams {
            gamma: keep(&self.gamma),
            beta: keep(&self.beta),
            running_mean: keep(&self.running_mean),
            running_var: keep(&self.running_var),
            epsilon: self.epsilon,
            rho: self.rho,
        }
    }
}

fn check_channels(input: &Tensor, params: &BNParams) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    if c != params.channels() {
        return Err(shape_err(format!(
            "batch norm has {} channels, input has {c}",
            params.channels()
        )));
    }
    Ok((n, c, h * w))
}

/// Per-channel batch statistics. The mean is accumulated relative to the
/// channel's first element, so a batch-constant channel gives its value
/// back exactly and a variance of exactly zero.
pub fn batch_stats(input: &Tensor) -> Result<BatchStats> {
    let (n, c, h, w) = input.dims4()?;
    let plane = h * w;
    let count = n * plane;
    let x = input.data();
    let mut mu = vec![0.0; c];
    let mut sigma2 = vec![0.0; c];
    for ch in 0..c {
        let pivot = x[ch * plane];
        let mut shift = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            shift += x[base..base + plane].iter().map(|&v| v - pivot).sum::<f64>();
        }
        let mean = pivot + shift / count as f64;
        let mut var = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            var += x[base..base + plane].iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>();
        }
        mu[ch] = mean;
        sigma2[ch] = var / count as f64;
    }
    Ok(BatchStats { mu, sigma2, count })
}

/// Training-mode forward: normalizes with the biased batch variance and
/// returns the parameters with updated running statistics.
pub fn bn_forward_train(input: &Tensor, params: &BNParams) -> Result<BnTrainOutput> {
    params.validate()?;
    let (n, c, plane) = check_channels(input, params)?;
    if n * plane < 2 {
        return Err(Error::BatchTooSmall(n * plane));
    }
    input.check_finite("batch-norm input")?;
    let stats = batch_stats(input)?;
    let inv_std: Vec<f64> = stats
        .sigma2
        .iter()
        .map(|&s| 1.0 / (s + params.epsilon).sqrt())
        .collect();
    let x = input.data();
    let mut normalized = Tensor::zeros(input.shape());
    let mut output = Tensor::zeros(input.shape());
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                let xh = (x[i] - stats.mu[ch]) * inv_std[ch];
                normalized.data_mut()[i] = xh;
                output.data_mut()[i] = xh * params.gamma[ch] + params.beta[ch];
            }
        }
    }
    let mut updated = params.clone();
    updated.update_running(&stats);
    Ok(BnTrainOutput {
        output,
        stats,
        params: updated,
        cache: BnCache {
            normalized,
            inv_std,
        },
    })
}

/// Exact reverse pass through the batch mean and variance.
pub fn bn_backward_train(grad_out: &Tensor, cache: &BnCache, gamma: &[f64]) -> Result<BnGrads> {
    if grad_out.shape() != cache.normalized.shape() {
        return Err(shape_err(format!(
            "grad {:?} vs cached {:?}",
            grad_out.shape(),
            cache.normalized.shape()
        )));
    }
    let (n, c, h, w) = grad_out.dims4()?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let g = grad_out.data();
    let xh = cache.normalized.data();
    let mut gi = Tensor::zeros(grad_out.shape());
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for ch in 0..c {
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                sum_g += g[i];
                sum_gx += g[i] * xh[i];
            }
        }
        gb[ch] = sum_g;
        gg[ch] = sum_gx;
        let k = gamma[ch] * cache.inv_std[ch] / count;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                gi.data_mut()[i] = k * (count * g[i] - sum_g - xh[i] * sum_gx);
            }
        }
    }
    Ok(BnGrads {
        input: gi,
        gamma: gg,
        beta: gb,
    })
}

/// Inference-mode forward using the running statistics.
pub fn bn_forward_infer(input: &Tensor, params: &BNParams) -> Result<Tensor> {
    params.validate()?;
    let (n, c, plane) = check_channels(input, params)?;
    let mut out = input.clone();
    let y = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for v in &mut y[base..base + plane] {
                *v = params.infer_scalar(ch, *v);
            }
        }
    }
    Ok(out)
}

/// Reverse pass of [`bn_forward_infer`] (running statistics held fixed).
pub fn bn_backward_infer(grad_out: &Tensor, input: &Tensor, params: &BNParams) -> Result<BnGrads> {
    let (n, c, plane) = check_channels(input, params)?;
    if grad_out.shape() != input.shape() {
        return Err(shape_err("batch-norm grad shape"));
    }
    let g = grad_out.data();
    let x = input.data();
    let mut gi = Tensor::zeros(input.shape());
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for ch in 0..c {
        let inv = 1.0 / (params.running_var[ch] + params.epsilon).sqrt();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                gi.data_mut()[i] = g[i] * params.gamma[ch] * inv;
                gg[ch] += g[i] * (x[i] - params.running_mean[ch]) * inv;
                gb[ch] += g[i];
            }
        }
    }
    Ok(BnGrads {
        input: gi,
        gamma: gg,
        beta: gb,
    })
}

fn fold_weights_and_bias(
    weights: &Tensor,
    bias: Option<&[f64]>,
    bn: &BNParams,
) -> Result<(Tensor, Vec<f64>)> {
    let oc = weights.shape()[0];
    if oc != bn.channels() {
        return Err(shape_err(format!(
            "cannot fold {}-channel batch norm into {oc}-channel layer",
            bn.channels()
        )));
    }
    let per = weights.len() / oc;
    let mut w = weights.clone();
    let mut b = Vec::with_capacity(oc);
    for o in 0..oc {
        let s = bn.scale(o);
        for v in &mut w.data_mut()[o * per..(o + 1) * per] {
            *v *= s;
        }
        let prev = bias.map_or(0.0, |bv| bv[o]);
        b.push(s * prev + bn.beta[o] - s * bn.running_mean[o]);
    }
    Ok((w, b))
}

/// Folds a batch norm into the convolution feeding it, using the running
/// statistics. The result always carries a bias.
pub fn fold_bn(conv: &ConvParams, bn: &BNParams) -> Result<ConvParams> {
    conv.validate()?;
    bn.validate()?;
    let (w, b) = fold_weights_and_bias(&conv.weights, conv.bias.as_deref(), bn)?;
    ConvParams::new(w, Some(b))
}

pub fn fold_bn_depthwise(conv: &DepthwiseConvParams, bn: &BNParams) -> Result<DepthwiseConvParams> {
    conv.validate()?;
    bn.validate()?;
    let (w, b) = fold_weights_and_bias(&conv.weights, conv.bias.as_deref(), bn)?;
    DepthwiseConvParams::new(w, Some(b))
}

/// Affine weights are `D x K`, so the per-output scale runs along columns.
pub fn fold_bn_affine(weights: &Tensor, bias: &[f64], bn: &BNParams) -> Result<(Tensor, Vec<f64>)> {
    bn.validate()?;
    let (d, k) = weights.dims2()?;
    if k != bn.channels() || bias.len() != k {
        return Err(shape_err(format!(
            "cannot fold {}-channel batch norm into affine with {k} outputs",
            bn.channels()
        )));
    }
    let mut w = weights.clone();
    for i in 0..d {
        for o in 0..k {
            w.data_mut()[i * k + o] *= bn.scale(o);
        }
    }
    let b = (0..k)
        .map(|o| {
            let s = bn.scale(o);
            s * bias[o] + bn.beta[o] - s * bn.running_mean[o]
        })
        .collect();
    Ok((w, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(gamma: f64, beta: f64, mean: f64, var: f64, eps: f64, rho: f64) -> BNParams {
        BNParams {
            gamma: vec![gamma],
            beta: vec![beta],
            running_mean: vec![mean],
            running_var: vec![var],
            epsilon: eps,
            rho,
        }
    }

    #[test]
    fn constant_channel_outputs_beta() {
        let mut x = Tensor::from_fn(&[3, 2, 2, 2], |i| (i as f64 * 0.71).sin());
        for b in 0..3 {
            for i in 0..4 {
                x.data_mut()[(b * 2 + 1) * 4 + i] = 0.1;
            }
        }
        let mut p = BNParams::new(2, DEFAULT_EPSILON, 0.9).unwrap();
        p.gamma = vec![1.3, 2.0];
        p.beta = vec![0.2, -0.4];
        let out = bn_forward_train(&x, &p).unwrap();
        assert_eq!(out.stats.sigma2[1], 0.0);
        assert_eq!(out.stats.mu[1], 0.1);
        for b in 0..3 {
            for i in 0..4 {
                assert_eq!(out.output.data()[(b * 2 + 1) * 4 + i], -0.4);
            }
        }
    }

    #[test]
    fn zero_variance_batch_decays_running_var() {
        let x = Tensor::full(&[2, 1, 1, 1], 5.0);
        let p = single(1.0, 0.0, 0.0, 1.0, DEFAULT_EPSILON, 0.9);
        let out = bn_forward_train(&x, &p).unwrap();
        assert!((out.params.running_var[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn bessel_corrected_update() {
        let x = Tensor::new(vec![2, 1, 1, 1], vec![0.0, 2.0]).unwrap();
        let p = single(1.0, 0.0, 0.0, 0.0, DEFAULT_EPSILON, 0.5);
        let out = bn_forward_train(&x, &p).unwrap();
        assert_eq!(out.stats.sigma2[0], 1.0);
        assert_eq!(out.stats.count, 2);
        assert_eq!(out.params.running_var[0], 1.0);
        assert_eq!(out.params.running_mean[0], 0.5);
    }

    #[test]
    fn train_needs_two_elements() {
        let x = Tensor::full(&[1, 1, 1, 1], 1.0);
        let p = BNParams::new(1, DEFAULT_EPSILON, 0.9).unwrap();
        assert!(matches!(bn_forward_train(&x, &p), Err(Error::BatchTooSmall(1))));
        let wrong = BNParams::new(2, DEFAULT_EPSILON, 0.9).unwrap();
        assert!(bn_forward_train(&Tensor::zeros(&[2, 1, 1, 1]), &wrong).is_err());
    }

    #[test]
    fn infer_values() {
        let eps = DEFAULT_EPSILON;
        let id = single(1.0, 0.0, 0.0, 1.0 - eps, eps, 0.9);
        let x = Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64 - 1.5);
        let y = bn_forward_infer(&x, &id).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-12);

        let p = single(2.0, 0.5, 1.0, 4.0 - eps, eps, 0.9);
        let y = bn_forward_infer(&Tensor::full(&[1, 1, 1, 1], 3.0), &p).unwrap();
        assert!((y.data()[0] - 2.5).abs() < 1e-12);

        let p = single(1.5, 0.25, 1.0, 0.0, eps, 0.9);
        let y = bn_forward_infer(&Tensor::full(&[1, 1, 1, 1], 1.001), &p).unwrap();
        let expected = 0.25 + 1.5 * 0.001 / eps.sqrt();
        assert!(y.data()[0].is_finite());
        assert!((y.data()[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn fold_hand_value() {
        let eps = DEFAULT_EPSILON;
        let conv = ConvParams::new(Tensor::full(&[1, 1, 1, 1], 2.0), Some(vec![1.0])).unwrap();
        let bn = single(0.5, 0.25, 3.0, 0.04 - eps, eps, 0.9);
        let f = fold_bn(&conv, &bn).unwrap();
        assert!((f.weights.data()[0] - 5.0).abs() < 1e-9);
        assert!((f.bias.unwrap()[0] + 4.75).abs() < 1e-9);
    }

    #[test]
    fn fold_identity_bn() {
        let eps = DEFAULT_EPSILON;
        let conv = ConvParams::new(Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64), None).unwrap();
        let mut bn = BNParams::new(2, eps, 0.9).unwrap();
        bn.running_var = vec![1.0 - eps; 2];
        let f = fold_bn(&conv, &bn).unwrap();
        assert!(f.weights.max_abs_diff(&conv.weights).unwrap() < 1e-12);
        assert!(f.bias.unwrap().iter().all(|b| b.abs() < 1e-12));
    }

    #[test]
    fn fold_rejects_channel_mismatch() {
        let conv = ConvParams::new(Tensor::zeros(&[3, 1, 1, 1]), None).unwrap();
        let bn = BNParams::new(2, DEFAULT_EPSILON, 0.9).unwrap();
        assert!(fold_bn(&conv, &bn).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(BNParams::new(2, 0.0, 0.9).is_err());
        assert!(BNParams::new(2, 1e-5, 1.0).is_err());
        let mut p = BNParams::new(2, 1e-5, 0.9).unwrap();
        p.running_var[0] = -1.0;
        assert!(p.validate().is_err());
    }
}
