//! Plain batch and layer normalization, written with explicit loops.
//!
//! This is the textbook layer with no shrinkage. JSNorm must coincide with it
//! whenever both shrink factors are 1, and the toy harness uses it as the
//! "standard BN" baseline.

use crate::error::{Error, Result};
use crate::norm::{Gradients, NormParams, RunningStats};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PlainCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub x_hat: Tensor,
}

fn channel_stats(x: &Tensor, samples: std::ops::Range<usize>) -> Result<(Vec<f64>, Vec<f64>)> {
    let [_, c, h, w] = x.shape();
    let count = samples.len() * h * w;
    if count == 0 {
        return Err(Error::EmptyReduction);
    }
    let mut mean = vec![0.0; c];
    for n in samples.clone() {
        for (ch, m) in mean.iter_mut().enumerate() {
            for i in 0..h {
                for j in 0..w {
                    *m += x.at(n, ch, i, j);
                }
            }
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; c];
    for n in samples {
        for (ch, v) in var.iter_mut().enumerate() {
            for i in 0..h {
                for j in 0..w {
                    let d = x.at(n, ch, i, j) - mean[ch];
                    *v += d * d;
                }
            }
        }
    }
    for v in &mut var {
        *v /= count as f64;
    }
    Ok((mean, var))
}

fn standardize(
    x: &Tensor,
    samples: std::ops::Range<usize>,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    out: &mut Tensor,
) {
    let [_, c, h, w] = x.shape();
    for n in samples {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let o = x.offset(n, ch, i, j);
                    out.data_mut()[o] = (x.data()[o] - mean[ch]) / (var[ch] + eps).sqrt();
                }
            }
        }
    }
}

fn affine(x_hat: &Tensor, params: &NormParams) -> Tensor {
    let [n, c, h, w] = x_hat.shape();
    let mut y = x_hat.clone();
    for s in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let o = x_hat.offset(s, ch, i, j);
                    y.data_mut()[o] = params.gamma[ch] * x_hat.data()[o] + params.beta[ch];
                }
            }
        }
    }
    y
}

/// Training-mode batch norm with batch statistics.
pub fn batch_norm(x: &Tensor, params: &NormParams) -> Result<(Tensor, PlainCache)> {
    params.validate(x.c())?;
    let (mean, var) = channel_stats(x, 0..x.n())?;
    let mut x_hat = Tensor::zeros(x.shape());
    standardize(x, 0..x.n(), &mean, &var, params.eps, &mut x_hat);
    let y = affine(&x_hat, params);
    Ok((y, PlainCache { mean, var, x_hat }))
}

pub fn batch_norm_train(
    x: &Tensor,
    params: &NormParams,
    running: &mut RunningStats,
) -> Result<(Tensor, PlainCache)> {
    let (y, cache) = batch_norm(x, params)?;
    running.update(&cache.mean, &cache.var, params.momentum)?;
    Ok((y, cache))
}

/// Per-sample normalization over `(h, w)` for each channel.
pub fn layer_norm(x: &Tensor, params: &NormParams) -> Result<(Tensor, Vec<PlainCache>)> {
    params.validate(x.c())?;
    let mut x_hat = Tensor::zeros(x.shape());
    let mut caches = Vec::with_capacity(x.n());
    for s in 0..x.n() {
        let (mean, var) = channel_stats(x, s..s + 1)?;
        standardize(x, s..s + 1, &mean, &var, params.eps, &mut x_hat);
        caches.push(PlainCache {
            x_hat: x_hat.slice_samples(s..s + 1)?,
            mean,
            var,
        });
    }
    Ok((affine(&x_hat, params), caches))
}

fn backward_samples(
    grad_y: &Tensor,
    x: &Tensor,
    samples: std::ops::Range<usize>,
    cache: &PlainCache,
    params: &NormParams,
    out: &mut Gradients,
) {
    let [_, c, h, w] = x.shape();
    let count = (samples.len() * h * w) as f64;
    let mut d_mean = vec![0.0; c];
    let mut d_var = vec![0.0; c];
    for (k, n) in samples.clone().enumerate() {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let o = x.offset(n, ch, i, j);
                    let g = grad_y.data()[o];
                    out.grad_gamma[ch] += g * cache.x_hat.at(k, ch, i, j);
                    out.grad_beta[ch] += g;
                    let dxhat = g * params.gamma[ch];
                    let var_eps = cache.var[ch] + params.eps;
                    d_mean[ch] += -dxhat / var_eps.sqrt();
                    d_var[ch] += dxhat * (x.data()[o] - cache.mean[ch]) * -0.5 * var_eps.powf(-1.5);
                }
            }
        }
    }
    for n in samples {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let o = x.offset(n, ch, i, j);
                    let dxhat = grad_y.data()[o] * params.gamma[ch];
                    let std = (cache.var[ch] + params.eps).sqrt();
                    out.grad_x.data_mut()[o] = dxhat / std
                        + d_mean[ch] / count
                        + d_var[ch] * 2.0 * (x.data()[o] - cache.mean[ch]) / count;
                }
            }
        }
    }
}

pub fn batch_norm_backward(
    grad_y: &Tensor,
    cache: &PlainCache,
    params: &NormParams,
    x: &Tensor,
) -> Result<Gradients> {
    grad_y.expect_shape(x.shape())?;
    let mut out = Gradients {
        grad_x: Tensor::zeros(x.shape()),
        grad_gamma: vec![0.0; x.c()],
        grad_beta: vec![0.0; x.c()],
    };
    backward_samples(grad_y, x, 0..x.n(), cache, params, &mut out);
    Ok(out)
}

pub fn layer_norm_backward(
    grad_y: &Tensor,
    caches: &[PlainCache],
    params: &NormParams,
    x: &Tensor,
) -> Result<Gradients> {
    grad_y.expect_shape(x.shape())?;
    let mut out = Gradients {
        grad_x: Tensor::zeros(x.shape()),
        grad_gamma: vec![0.0; x.c()],
        grad_beta: vec![0.0; x.c()],
    };
    for (s, cache) in caches.iter().enumerate() {
        backward_samples(grad_y, x, s..s + 1, cache, params, &mut out);
    }
    Ok(out)
}
