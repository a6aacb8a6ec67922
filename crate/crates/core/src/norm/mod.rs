//! JSNorm batch and layer normalization.
//!
//! Both layers run the same pipeline on a *group* of samples: batch norm
//! uses the whole batch as one group, layer norm treats every sample as its
//! own group. Within a group, in order:
//!
//! 1. per-channel mean `mu_b` and biased variance `var_b` over `(n, h, w)`;
//! 2. mean `mu_mu_b` and biased variance `var_mu_b` of the `c` channel means;
//! 3. `mu_js = js(mu_b, var_mu_b)`;
//! 4. the same for the variances: `var_js = max(js(var_b, var_var_b), 0)`;
//! 5. `x_hat = (x - mu_js) / sqrt(var_js + eps)`, `y = gamma * x_hat + beta`.
//!
//! The backward pass is written out by hand and checked against central
//! finite differences in [`crate::gradcheck`].

pub mod reference;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, invalid, Error, Result};
use crate::shrinkage::{js_vjp, penalty_grad, FactorRegime, PenaltyKind, ShrinkPolicy, Shrunk};
use crate::tensor::{biased_var, mean, sum_squares, Axis, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Bn,
    Ln,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl NormParams {
    /// `gamma = 1`, `beta = 0`, default `eps` and momentum.
    pub fn new(channels: usize) -> Self {
        NormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.gamma.len() != channels || self.beta.len() != channels {
            return Err(Error::Shape(format!(
                "gamma/beta lengths {}/{} do not match {} channels",
                self.gamma.len(),
                self.beta.len(),
                channels
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(invalid(format!("eps must be > 0, got {}", self.eps)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(invalid(format!(
                "momentum must lie in [0, 1], got {}",
                self.momentum
            )));
        }
        ensure_finite(&self.gamma, "gamma")?;
        ensure_finite(&self.beta, "beta")
    }
}

/// Which statistics the running averages follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatTracking {
    /// The James-Stein estimates used for standardization.
    #[default]
    Shrunk,
    /// The raw batch statistics (ablation).
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub count: u64,
    #[serde(default)]
    pub tracking: StatTracking,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            count: 0,
            tracking: StatTracking::Shrunk,
        }
    }

    pub fn with_tracking(mut self, tracking: StatTracking) -> Self {
        self.tracking = tracking;
        self
    }

    /// `r <- (1 - m) r + m s` for both vectors.
    pub fn update(&mut self, mean: &[f64], var: &[f64], momentum: f64) -> Result<()> {
        if mean.len() != self.running_mean.len() || var.len() != self.running_var.len() {
            return Err(Error::Shape(format!(
                "running stats have {} channels, update has {}",
                self.running_mean.len(),
                mean.len()
            )));
        }
        for (r, s) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - momentum) * *r + momentum * s;
        }
        for (r, s) in self.running_var.iter_mut().zip(var) {
            *r = (1.0 - momentum) * *r + momentum * s;
        }
        self.count += 1;
        Ok(())
    }

    fn observe(&mut self, cache: &ForwardCache, momentum: f64) -> Result<()> {
        match self.tracking {
            StatTracking::Shrunk => self.update(&cache.mu_js, &cache.var_js, momentum),
            StatTracking::Raw => self.update(&cache.mu_b, &cache.var_b, momentum),
        }
    }
}

/// Every intermediate of one group's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    /// Samples of the input this cache covers.
    pub samples: Range<usize>,
    /// Elements reduced per channel (`n * h * w` of the group).
    pub count: usize,
    pub mu_b: Vec<f64>,
    pub var_b: Vec<f64>,
    pub mu_mu_b: f64,
    pub var_mu_b: f64,
    pub s_mu_b: f64,
    pub mu_js: Vec<f64>,
    pub mu_var_b: f64,
    pub var_var_b: f64,
    pub s_var_b: f64,
    pub var_js: Vec<f64>,
    pub x_hat: Tensor,
    pub mean_factor: f64,
    pub var_factor: f64,
    pub mean_regime: FactorRegime,
    pub var_regime: FactorRegime,
    /// Channels whose shrunk variance went negative and was clamped to 0.
    pub clamp_mask: Vec<bool>,
    pub target: Vec<f64>,
}

impl ForwardCache {
    /// Raw (pre-shrinkage) statistics, the inputs of the Ridge/LASSO penalties.
    pub fn penalty_inputs(&self) -> (&[f64], &[f64]) {
        (&self.mu_b, &self.var_b)
    }

    /// `f(mu_b) + f(var_b)` for this group.
    pub fn penalty(&self, kind: PenaltyKind) -> f64 {
        crate::shrinkage::penalty(&self.mu_b, kind) + crate::shrinkage::penalty(&self.var_b, kind)
    }
}

/// Extra upstream gradient on the raw statistics of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct StatGrads {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl StatGrads {
    /// Gradient of `lambda * (f(mu_b) + f(var_b))`.
    pub fn from_penalty(cache: &ForwardCache, kind: PenaltyKind, lambda: f64) -> Self {
        StatGrads {
            mean: penalty_grad(&cache.mu_b, kind, lambda),
            var: penalty_grad(&cache.var_b, kind, lambda),
        }
    }
}

/// Whether the backward pass includes the terms that are analytically zero.
///
/// `Expanded` evaluates `dl/d(mu_mu_b)`, `dl/d(mu_var_b)` and
/// `d(var_b)/d(mu_b)` explicitly instead of dropping them. It exists to
/// confirm numerically that dropping them is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackwardTerms {
    #[default]
    Simplified,
    Expanded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub grad_x: Tensor,
    pub grad_gamma: Vec<f64>,
    pub grad_beta: Vec<f64>,
}

fn check_input(x: &Tensor, params: &NormParams, policy: &ShrinkPolicy) -> Result<()> {
    if x.c() == 0 {
        return Err(invalid("normalization needs at least one channel"));
    }
    params.validate(x.c())?;
    policy.validate()?;
    ensure_finite(x.data(), "normalization input")
}

/// Statistics, shrinkage and standardization for samples `range` of `x`.
fn forward_group(
    x: &Tensor,
    range: Range<usize>,
    params: &NormParams,
    policy: &ShrinkPolicy,
) -> Result<ForwardCache> {
    let group = x.slice_samples(range.clone())?;
    let c = group.c();
    let reduce = [Axis::N, Axis::H, Axis::W];
    let mean_t = group.reduce_mean(&reduce)?;
    let var_t = group.reduce_var(&reduce, &mean_t)?;
    let mu_b = mean_t.into_vec();
    let var_b = var_t.into_vec();
    let target = policy.target_vector(c)?;

    let mu_mu_b = mean(&mu_b);
    let var_mu_b = biased_var(&mu_b, mu_mu_b);
    let mean_shrunk = policy.apply(&mu_b, var_mu_b)?;

    let mu_var_b = mean(&var_b);
    let var_var_b = biased_var(&var_b, mu_var_b);
    let var_shrunk = policy.apply(&var_b, var_var_b)?;

    let clamp_mask: Vec<bool> = var_shrunk.values.iter().map(|&v| v < 0.0).collect();
    let var_js: Vec<f64> = var_shrunk.values.iter().map(|&v| v.max(0.0)).collect();
    let mu_js = mean_shrunk.values;

    let hw = group.h() * group.w();
    let mut x_hat = group;
    for (i, v) in x_hat.data_mut().iter_mut().enumerate() {
        let ch = (i / hw) % c;
        *v = (*v - mu_js[ch]) / (var_js[ch] + params.eps).sqrt();
    }

    Ok(ForwardCache {
        count: x_hat.n() * hw,
        samples: range,
        s_mu_b: sum_squares(&sub(&mu_b, &target)),
        s_var_b: sum_squares(&sub(&var_b, &target)),
        mu_b,
        var_b,
        mu_mu_b,
        var_mu_b,
        mu_js,
        mu_var_b,
        var_var_b,
        var_js,
        x_hat,
        mean_factor: mean_shrunk.factor,
        var_factor: var_shrunk.factor,
        mean_regime: mean_shrunk.regime,
        var_regime: var_shrunk.regime,
        clamp_mask,
        target,
    })
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn scale_shift(x_hat: &Tensor, params: &NormParams) -> Result<Tensor> {
    x_hat.broadcast_affine(&params.gamma, &params.beta, Axis::C)
}

/// Training-mode JSNorm batch normalization without touching running stats.
pub fn bn_forward(
    x: &Tensor,
    params: &NormParams,
    policy: &ShrinkPolicy,
) -> Result<(Tensor, ForwardCache)> {
    check_input(x, params, policy)?;
    let cache = forward_group(x, 0..x.n(), params, policy)?;
    let y = scale_shift(&cache.x_hat, params)?;
    Ok((y, cache))
}

/// Training-mode JSNorm batch normalization; folds this batch's statistics
/// into `running`.
pub fn bn_forward_train(
    x: &Tensor,
    params: &NormParams,
    policy: &ShrinkPolicy,
    running: &mut RunningStats,
) -> Result<(Tensor, ForwardCache)> {
    let (y, cache) = bn_forward(x, params, policy)?;
    running.observe(&cache, params.momentum)?;
    Ok((y, cache))
}

/// Inference-mode batch normalization from running statistics. No shrinkage
/// is applied here; it is already part of the averages.
pub fn bn_forward_eval(
    x: &Tensor,
    params: &NormParams,
    running: &RunningStats,
    layer: &str,
) -> Result<Tensor> {
    if running.count == 0 {
        return Err(Error::NotCalibrated(layer.to_string()));
    }
    params.validate(x.c())?;
    if running.running_mean.len() != x.c() || running.running_var.len() != x.c() {
        return Err(Error::Shape(format!(
            "running stats have {} channels, input has {}",
            running.running_mean.len(),
            x.c()
        )));
    }
    ensure_finite(x.data(), "normalization input")?;
    let c = x.c();
    let hw = x.h() * x.w();
    let mut y = x.clone();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        let ch = (i / hw) % c;
        let x_hat = (*v - running.running_mean[ch]) / (running.running_var[ch] + params.eps).sqrt();
        *v = params.gamma[ch] * x_hat + params.beta[ch];
    }
    Ok(y)
}

/// JSNorm layer normalization: every sample is normalized on its own, with
/// statistics over `(h, w)` shrunk across its `c` channels.
pub fn ln_forward(
    x: &Tensor,
    params: &NormParams,
    policy: &ShrinkPolicy,
) -> Result<(Tensor, Vec<ForwardCache>)> {
    check_input(x, params, policy)?;
    if x.n() == 0 || x.h() * x.w() == 0 {
        return Err(Error::EmptyReduction);
    }
    let caches = (0..x.n())
        .map(|i| forward_group(x, i..i + 1, params, policy))
        .collect::<Result<Vec<_>>>()?;
    let parts: Vec<Tensor> = caches.iter().map(|c| c.x_hat.clone()).collect();
    let y = scale_shift(&Tensor::concat_samples(&parts)?, params)?;
    Ok((y, caches))
}

#[derive(Debug, Clone, Default)]
pub struct BackwardOptions<'a> {
    /// Additional gradient on each group's raw statistics (penalty terms).
    pub stat_grads: Option<&'a [StatGrads]>,
    pub terms: BackwardTerms,
}

/// Backward pass of one group, accumulating into `out`.
fn backward_group(
    grad_y: &Tensor,
    x: &Tensor,
    cache: &ForwardCache,
    params: &NormParams,
    stat_grads: Option<&StatGrads>,
    terms: BackwardTerms,
    out: &mut Gradients,
) -> Result<()> {
    let c = x.c();
    let hw = x.h() * x.w();
    let per = x.sample_len();
    let lo = cache.samples.start * per;
    let hi = cache.samples.end * per;
    let xs = &x.data()[lo..hi];
    let gs = &grad_y.data()[lo..hi];
    let xh = cache.x_hat.data();
    if xh.len() != xs.len() || cache.mu_b.len() != c {
        return Err(Error::Shape("cache does not match input".into()));
    }
    let count = cache.count as f64;

    // dl/dgamma, dl/dbeta, dl/dmu_js, dl/dvar_js per channel.
    let mut d_mu_js = vec![0.0; c];
    let mut d_var_js = vec![0.0; c];
    for (i, (&g, (&xv, &xhv))) in gs.iter().zip(xs.iter().zip(xh)).enumerate() {
        let ch = (i / hw) % c;
        out.grad_gamma[ch] += g * xhv;
        out.grad_beta[ch] += g;
        let dxhat = g * params.gamma[ch];
        let var_eps = cache.var_js[ch] + params.eps;
        d_mu_js[ch] += -dxhat / var_eps.sqrt();
        d_var_js[ch] += dxhat * (xv - cache.mu_js[ch]) * -0.5 * var_eps.powf(-1.5);
    }
    for (d, &clamped) in d_var_js.iter_mut().zip(&cache.clamp_mask) {
        if clamped {
            *d = 0.0;
        }
    }

    let mut d_var_b = stat_backward(
        &cache.var_b,
        cache.mu_var_b,
        cache.var_var_b,
        &cache.target,
        cache.var_factor,
        cache.var_regime,
        cache.s_var_b,
        &cache.var_js,
        &d_var_js,
        terms,
    );
    let mut d_mu_b = stat_backward(
        &cache.mu_b,
        cache.mu_mu_b,
        cache.var_mu_b,
        &cache.target,
        cache.mean_factor,
        cache.mean_regime,
        cache.s_mu_b,
        &cache.mu_js,
        &d_mu_js,
        terms,
    );
    if let Some(sg) = stat_grads {
        if sg.mean.len() != c || sg.var.len() != c {
            return Err(Error::Shape(
                "statistic gradients do not match channels".into(),
            ));
        }
        for (d, g) in d_mu_b.iter_mut().zip(&sg.mean) {
            *d += g;
        }
        for (d, g) in d_var_b.iter_mut().zip(&sg.var) {
            *d += g;
        }
    }
    if terms == BackwardTerms::Expanded {
        // dl/dvar_b * dvar_b/dmu_b with dvar_b/dmu_b = (1/N) sum -2 (x - mu_b)
        let mut dev_sum = vec![0.0; c];
        for (i, &xv) in xs.iter().enumerate() {
            let ch = (i / hw) % c;
            dev_sum[ch] += -2.0 * (xv - cache.mu_b[ch]);
        }
        for ch in 0..c {
            d_mu_b[ch] += d_var_b[ch] * (dev_sum[ch] / count);
        }
    }

    let gx = &mut out.grad_x.data_mut()[lo..hi];
    for (i, (dst, (&g, &xv))) in gx.iter_mut().zip(gs.iter().zip(xs)).enumerate() {
        let ch = (i / hw) % c;
        let dxhat = g * params.gamma[ch];
        let std = (cache.var_js[ch] + params.eps).sqrt();
        *dst = dxhat / std + d_mu_b[ch] / count + d_var_b[ch] * 2.0 * (xv - cache.mu_b[ch]) / count;
    }
    Ok(())
}

/// Chain `dl/d(stat_js)` back to `dl/d(stat_b)` through the shrinkage step
/// and the plug-in variance of the statistic vector.
#[allow(clippy::too_many_arguments)]
fn stat_backward(
    stat: &[f64],
    stat_mean: f64,
    stat_var: f64,
    target: &[f64],
    factor: f64,
    regime: FactorRegime,
    sum_sq: f64,
    shrunk: &[f64],
    grad_shrunk: &[f64],
    terms: BackwardTerms,
) -> Vec<f64> {
    let c = stat.len() as f64;
    let step = Shrunk {
        values: shrunk.to_vec(),
        factor,
        regime,
        sum_sq,
    };
    let (mut grad, grad_var) = js_vjp(stat, target, stat_var, &step, grad_shrunk);
    if regime != FactorRegime::Active {
        return grad;
    }
    // d(var of stats)/d(stat_i) = 2 (stat_i - mean) / c
    for (g, &s) in grad.iter_mut().zip(stat) {
        *g += grad_var * 2.0 * (s - stat_mean) / c;
    }
    if terms == BackwardTerms::Expanded {
        // dl/d(mean of stats) = dl/d(var of stats) * (1/c) sum -2 (stat_i - mean),
        // fed back with d(mean of stats)/d(stat_i) = 1/c.
        let dev = stat
            .iter()
            .fold(0.0, |acc, &s| acc + -2.0 * (s - stat_mean));
        let grad_mean = grad_var * (dev / c);
        for g in grad.iter_mut() {
            *g += grad_mean / c;
        }
    }
    grad
}

fn check_backward(grad_y: &Tensor, x: &Tensor, params: &NormParams) -> Result<Gradients> {
    grad_y.expect_shape(x.shape())?;
    params.validate(x.c())?;
    ensure_finite(grad_y.data(), "upstream gradient")?;
    Ok(Gradients {
        grad_x: Tensor::zeros(x.shape()),
        grad_gamma: vec![0.0; x.c()],
        grad_beta: vec![0.0; x.c()],
    })
}

pub fn bn_backward(
    grad_y: &Tensor,
    cache: &ForwardCache,
    params: &NormParams,
    x: &Tensor,
) -> Result<Gradients> {
    bn_backward_with(grad_y, cache, params, x, &BackwardOptions::default())
}

pub fn bn_backward_with(
    grad_y: &Tensor,
    cache: &ForwardCache,
    params: &NormParams,
    x: &Tensor,
    opts: &BackwardOptions<'_>,
) -> Result<Gradients> {
    let mut out = check_backward(grad_y, x, params)?;
    if cache.samples != (0..x.n()) {
        return Err(Error::Shape(
            "cache was produced for a different batch".into(),
        ));
    }
    let sg = match opts.stat_grads {
        Some([one]) => Some(one),
        Some(other) => {
            return Err(Error::Shape(format!(
                "batch norm takes one statistic gradient, got {}",
                other.len()
            )))
        }
        None => None,
    };
    backward_group(grad_y, x, cache, params, sg, opts.terms, &mut out)?;
    Ok(out)
}

pub fn ln_backward(
    grad_y: &Tensor,
    caches: &[ForwardCache],
    params: &NormParams,
    x: &Tensor,
) -> Result<Gradients> {
    ln_backward_with(grad_y, caches, params, x, &BackwardOptions::default())
}

pub fn ln_backward_with(
    grad_y: &Tensor,
    caches: &[ForwardCache],
    params: &NormParams,
    x: &Tensor,
    opts: &BackwardOptions<'_>,
) -> Result<Gradients> {
    let mut out = check_backward(grad_y, x, params)?;
    if caches.len() != x.n() {
        return Err(Error::Shape(format!(
            "{} caches for {} samples",
            caches.len(),
            x.n()
        )));
    }
    if let Some(sg) = opts.stat_grads {
        if sg.len() != caches.len() {
            return Err(Error::Shape(
                "one statistic gradient per sample expected".into(),
            ));
        }
    }
    for (i, cache) in caches.iter().enumerate() {
        if cache.samples != (i..i + 1) {
            return Err(Error::Shape(format!(
                "cache {i} covers {:?}",
                cache.samples
            )));
        }
        let sg = opts.stat_grads.map(|s| &s[i]);
        backward_group(grad_y, x, cache, params, sg, opts.terms, &mut out)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shrinkage::ShrinkKind;

    fn worked_batch() -> Tensor {
        // samples (1,2,3) and (3,4,5), c = 3, h = w = 1
        Tensor::from_vec([2, 3, 1, 1], vec![1.0, 2.0, 3.0, 3.0, 4.0, 5.0]).unwrap()
    }

    #[test]
    fn worked_batch_pipeline() {
        let x = worked_batch();
        let params = NormParams::new(3);
        let (y, cache) = bn_forward(&x, &params, &ShrinkPolicy::default()).unwrap();
        assert_eq!(cache.mu_b, vec![2.0, 3.0, 4.0]);
        assert_eq!(cache.var_b, vec![1.0, 1.0, 1.0]);
        assert_eq!(cache.mu_mu_b, 3.0);
        assert!((cache.var_mu_b - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(cache.s_mu_b, 29.0);
        assert!((cache.mean_factor - 85.0 / 87.0).abs() < 1e-15);
        let expect = [
            1.954_022_988_505_747_2,
            2.931_034_482_758_621,
            3.908_045_977_011_494_4,
        ];
        for (a, b) in cache.mu_js.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(cache.var_var_b, 0.0);
        assert_eq!(cache.var_factor, 1.0);
        assert_eq!(cache.var_js, vec![1.0; 3]);
        assert!((cache.x_hat.at(0, 0, 0, 0) - -0.954_018_218_426_580_3).abs() < 1e-12);
        assert_eq!(y, cache.x_hat);
    }

    #[test]
    fn layer_norm_guards() {
        // one sample, channel-constant planes 1, 2, 3 over a 2x2 grid
        let mut data = Vec::new();
        for ch in 1..=3 {
            data.extend(std::iter::repeat(f64::from(ch)).take(4));
        }
        let x = Tensor::from_vec([1, 3, 2, 2], data).unwrap();
        let (y, caches) = ln_forward(&x, &NormParams::new(3), &ShrinkPolicy::default()).unwrap();
        let cache = &caches[0];
        assert_eq!(cache.var_b, vec![0.0; 3]);
        assert!((cache.mean_factor - 20.0 / 21.0).abs() < 1e-15);
        assert_eq!(cache.var_regime, FactorRegime::Identity);
        assert_eq!(cache.var_js, vec![0.0; 3]);
        for k in 0..4 {
            assert!((y.data()[k] - 15.058_465_048_420_87).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_channels_reduce_to_standard_bn() {
        // every channel has the same mean and variance
        let x = Tensor::from_vec([2, 3, 1, 1], vec![0.0, 0.0, 0.0, 2.0, 2.0, 2.0]).unwrap();
        let p = NormParams::new(3);
        let (y, cache) = bn_forward(&x, &p, &ShrinkPolicy::default()).unwrap();
        assert_eq!(cache.var_mu_b, 0.0);
        assert_eq!(cache.mean_factor, 1.0);
        assert_eq!(cache.var_factor, 1.0);
        let (y_ref, _) = reference::batch_norm(&x, &p).unwrap();
        for (a, b) in y.data().iter().zip(y_ref.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn two_channels_fall_back() {
        let x = Tensor::from_vec([2, 2, 1, 1], vec![1.0, 5.0, 2.0, 9.0]).unwrap();
        let (_, cache) = bn_forward(&x, &NormParams::new(2), &ShrinkPolicy::default()).unwrap();
        assert_eq!(cache.mean_factor, 1.0);
        assert_eq!(cache.var_factor, 1.0);
        assert_eq!(cache.mu_js, cache.mu_b);
    }

    #[test]
    fn origin_target_factor_is_bounded_below() {
        // With the plug-in variance, factor = 2/c + (c-2) mean^2 / S >= 2/c.
        let x = Tensor::from_vec(
            [2, 4, 1, 1],
            vec![-10.0, 0.1, -0.1, 0.1, 10.0, -0.1, 0.1, -0.1],
        )
        .unwrap();
        let (_, cache) = bn_forward(&x, &NormParams::new(4), &ShrinkPolicy::default()).unwrap();
        assert!(cache.var_factor >= 0.5 && cache.var_factor < 1.0);
        assert!(cache.mean_factor >= 0.5);
        assert!(cache.clamp_mask.iter().all(|&m| !m));
    }

    #[test]
    fn variance_clamp_marks_channels() {
        // Variances (4, .01, .01, .01) shrunk toward a target just below them:
        // the factor is hugely negative and every shrunk variance drops below 0.
        let x = Tensor::from_vec(
            [2, 4, 1, 1],
            vec![-2.0, 0.1, -0.1, 0.1, 2.0, -0.1, 0.1, -0.1],
        )
        .unwrap();
        let mut policy = ShrinkPolicy::default();
        policy.target = crate::shrinkage::ShrinkTarget::Vector(vec![3.9, -0.09, -0.09, -0.09]);
        let (_, cache) = bn_forward(&x, &NormParams::new(4), &policy).unwrap();
        assert!(cache.var_factor < 0.0);
        assert!(cache.clamp_mask.iter().all(|&m| m));
        assert!(cache.var_js.iter().all(|&v| v == 0.0));
        assert!(cache.x_hat.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_errors() {
        let p = NormParams::new(3);
        let pol = ShrinkPolicy::default();
        let empty = Tensor::zeros([0, 3, 1, 1]);
        assert_eq!(
            bn_forward(&empty, &p, &pol).unwrap_err(),
            Error::EmptyReduction
        );
        let mut bad = worked_batch();
        bad.data_mut()[2] = f64::NAN;
        assert!(matches!(
            bn_forward(&bad, &p, &pol),
            Err(Error::NonFinite(_))
        ));
        assert!(bn_forward(&worked_batch(), &NormParams::new(4), &pol).is_err());
    }

    #[test]
    fn eval_requires_calibration() {
        let x = worked_batch();
        let p = NormParams::new(3);
        let running = RunningStats::new(3);
        assert!(matches!(
            bn_forward_eval(&x, &p, &running, "bn0"),
            Err(Error::NotCalibrated(_))
        ));
    }

    #[test]
    fn eval_with_unit_stats_and_at_the_mean() {
        let x = worked_batch();
        let mut p = NormParams::new(3);
        let mut running = RunningStats::new(3);
        running.count = 1;
        let y = bn_forward_eval(&x, &p, &running, "bn").unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b / (1.0 + p.eps).sqrt()).abs() < 1e-15);
        }
        running.running_mean = vec![1.0, 2.0, 3.0];
        p.beta = vec![0.5, -0.5, 2.0];
        let at_mean = Tensor::from_vec([1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(
            bn_forward_eval(&at_mean, &p, &running, "bn")
                .unwrap()
                .data(),
            &p.beta[..]
        );
    }

    #[test]
    fn eval_after_full_momentum_matches_train() {
        let x = Tensor::from_vec(
            [3, 3, 2, 1],
            (0..18)
                .map(|i| (i as f64 * 0.37).sin() * 3.0 + i as f64 * 0.1)
                .collect(),
        )
        .unwrap();
        let mut p = NormParams::new(3);
        p.momentum = 1.0;
        p.gamma = vec![1.5, 0.5, -1.0];
        p.beta = vec![0.1, 0.2, 0.3];
        let mut running = RunningStats::new(3);
        let (y, _) = bn_forward_train(&x, &p, &ShrinkPolicy::default(), &mut running).unwrap();
        let y_eval = bn_forward_eval(&x, &p, &running, "bn").unwrap();
        for (a, b) in y.data().iter().zip(y_eval.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn raw_tracking() {
        let x = worked_batch();
        let mut p = NormParams::new(3);
        p.momentum = 1.0;
        let mut running = RunningStats::new(3).with_tracking(StatTracking::Raw);
        bn_forward_train(&x, &p, &ShrinkPolicy::default(), &mut running).unwrap();
        assert_eq!(running.running_mean, vec![2.0, 3.0, 4.0]);
        assert_eq!(running.count, 1);
    }

    #[test]
    fn ema_converges_geometrically() {
        let x = worked_batch();
        let p = NormParams::new(3);
        let pol = ShrinkPolicy::default();
        let mut running = RunningStats::new(3);
        let (_, cache) = bn_forward(&x, &p, &pol).unwrap();
        let r0 = running.running_mean.clone();
        for k in 1..=25 {
            bn_forward_train(&x, &p, &pol, &mut running).unwrap();
            let decay = (1.0 - p.momentum).powi(k);
            for ch in 0..3 {
                let want = decay * (r0[ch] - cache.mu_js[ch]).abs();
                let got = (running.running_mean[ch] - cache.mu_js[ch]).abs();
                assert!((got - want).abs() <= 1e-12 * cache.mu_js[ch].abs().max(1.0));
            }
        }
        assert_eq!(running.count, 25);
    }

    #[test]
    fn backward_trivial_cases() {
        let x = worked_batch();
        let p = NormParams::new(3);
        let (_, cache) = bn_forward(&x, &p, &ShrinkPolicy::default()).unwrap();
        let g = bn_backward(&Tensor::filled(x.shape(), 1.0), &cache, &p, &x).unwrap();
        assert_eq!(g.grad_beta, vec![2.0; 3]);

        let g = bn_backward(&Tensor::zeros(x.shape()), &cache, &p, &x).unwrap();
        assert!(g.grad_x.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_gamma.iter().all(|&v| v == 0.0));
        assert!(g.grad_beta.iter().all(|&v| v == 0.0));

        let wrong = Tensor::zeros([2, 3, 1, 2]);
        assert!(bn_backward(&wrong, &cache, &p, &x).is_err());
    }

    #[test]
    fn ln_backward_is_per_sample() {
        let x = Tensor::from_vec(
            [2, 3, 2, 1],
            (0..12)
                .map(|i| ((i * 7) % 5) as f64 + 0.1 * i as f64)
                .collect(),
        )
        .unwrap();
        let p = NormParams::new(3);
        let pol = ShrinkPolicy::default();
        let (_, caches) = ln_forward(&x, &p, &pol).unwrap();
        let g1 = Tensor::from_vec(x.shape(), (0..12).map(|i| (i as f64).cos()).collect()).unwrap();
        let mut g2 = g1.clone();
        for v in &mut g2.data_mut()[6..] {
            *v *= -3.0;
        }
        let a = ln_backward(&g1, &caches, &p, &x).unwrap();
        let b = ln_backward(&g2, &caches, &p, &x).unwrap();
        assert_eq!(&a.grad_x.data()[..6], &b.grad_x.data()[..6]);

        let zero = ln_backward(&Tensor::zeros(x.shape()), &caches, &p, &x).unwrap();
        assert!(zero.grad_x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn penalty_inputs_expose_raw_stats() {
        let x = worked_batch();
        let (_, cache) = bn_forward(&x, &NormParams::new(3), &ShrinkPolicy::default()).unwrap();
        let (m, v) = cache.penalty_inputs();
        assert_eq!(m, &[2.0, 3.0, 4.0]);
        assert_eq!(v, &[1.0, 1.0, 1.0]);
        assert_eq!(cache.penalty(PenaltyKind::Ridge), 32.0);

        let zero = Tensor::zeros([2, 3, 1, 1]);
        let (_, cache) = bn_forward(&zero, &NormParams::new(3), &ShrinkPolicy::default()).unwrap();
        assert_eq!(cache.penalty(PenaltyKind::Ridge), 0.0);
        assert_eq!(cache.penalty(PenaltyKind::Lasso), 0.0);
    }

    #[test]
    fn policy_none_is_passthrough() {
        let x = worked_batch();
        let (_, cache) = bn_forward(
            &x,
            &NormParams::new(3),
            &ShrinkPolicy::new(ShrinkKind::None),
        )
        .unwrap();
        assert_eq!(cache.mu_js, cache.mu_b);
        assert_eq!(cache.var_js, cache.var_b);
    }
}
