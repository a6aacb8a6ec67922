//! James-Stein shrinkage, Ridge/LASSO penalties and penalty-weight rescaling.
//!
//! The JS estimate of a `c`-vector `theta` toward a fixed target `v` is
//!
//! ```text
//! theta_js = (1 - (c - 2) * sigma2 / ||theta - v||^2) * (theta - v) + v
//! ```
//!
//! With `v = 0` this shrinks toward the origin, which is what the
//! normalization layers use. `sigma2` is supplied by the caller: the layers
//! plug in the empirical variance of the estimates themselves.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, invalid, Error, Result};
use crate::tensor::sum_squares;

pub const DEFAULT_MIN_DIM: usize = 3;
pub const DEFAULT_DENOM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShrinkKind {
    JsPlain,
    JsPositivePart,
    None,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShrinkTarget {
    #[default]
    Origin,
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShrinkPolicy {
    pub kind: ShrinkKind,
    #[serde(default)]
    pub target: ShrinkTarget,
    #[serde(default = "default_min_dim")]
    pub min_dim_guard: usize,
    #[serde(default = "default_denom_guard")]
    pub denom_guard: f64,
}

fn default_min_dim() -> usize {
    DEFAULT_MIN_DIM
}

fn default_denom_guard() -> f64 {
    DEFAULT_DENOM_GUARD
}

impl Default for ShrinkPolicy {
    fn default() -> Self {
        Self::new(ShrinkKind::JsPlain)
    }
}

impl ShrinkPolicy {
    pub fn new(kind: ShrinkKind) -> Self {
        ShrinkPolicy {
            kind,
            target: ShrinkTarget::Origin,
            min_dim_guard: DEFAULT_MIN_DIM,
            denom_guard: DEFAULT_DENOM_GUARD,
        }
    }

    pub fn none() -> Self {
        Self::new(ShrinkKind::None)
    }

    pub fn positive_part() -> Self {
        Self::new(ShrinkKind::JsPositivePart)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_dim_guard < 3 {
            return Err(invalid(format!(
                "min_dim_guard must be >= 3, got {}",
                self.min_dim_guard
            )));
        }
        if !(self.denom_guard > 0.0 && self.denom_guard.is_finite()) {
            return Err(invalid(format!(
                "denom_guard must be positive and finite, got {}",
                self.denom_guard
            )));
        }
        if let ShrinkTarget::Vector(v) = &self.target {
            ensure_finite(v, "shrink target")?;
        }
        Ok(())
    }

    /// Shrink toward whatever target the policy names.
    pub fn apply(&self, theta: &[f64], sigma2: f64) -> Result<Shrunk> {
        match &self.target {
            ShrinkTarget::Origin => js_shrink(theta, sigma2, self),
            ShrinkTarget::Vector(v) => js_shrink_toward(theta, sigma2, v, self),
        }
    }

    /// Target as a concrete vector of length `c`.
    pub fn target_vector(&self, c: usize) -> Result<Vec<f64>> {
        match &self.target {
            ShrinkTarget::Origin => Ok(vec![0.0; c]),
            ShrinkTarget::Vector(v) if v.len() == c => Ok(v.clone()),
            ShrinkTarget::Vector(v) => Err(Error::Shape(format!(
                "shrink target has length {}, statistics have {}",
                v.len(),
                c
            ))),
        }
    }
}

/// How the shrink factor was arrived at; the backward pass differs per regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorRegime {
    /// `1 - (c-2) sigma2 / S`, differentiable in `theta` and `sigma2`.
    Active,
    /// Forced to 1 by the policy or a guard; the estimate passes through.
    Identity,
    /// Positive-part clamp hit zero; the output is the target itself.
    Clamped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shrunk {
    pub values: Vec<f64>,
    pub factor: f64,
    pub regime: FactorRegime,
    /// `||theta - v||^2` (the S quantity).
    pub sum_sq: f64,
}

/// JS shrinkage toward the origin.
pub fn js_shrink(theta: &[f64], sigma2: f64, policy: &ShrinkPolicy) -> Result<Shrunk> {
    js_shrink_toward(theta, sigma2, &vec![0.0; theta.len()], policy)
}

/// JS shrinkage toward a fixed vector `target`.
pub fn js_shrink_toward(
    theta: &[f64],
    sigma2: f64,
    target: &[f64],
    policy: &ShrinkPolicy,
) -> Result<Shrunk> {
    if target.len() != theta.len() {
        return Err(Error::Shape(format!(
            "target length {} != estimate length {}",
            target.len(),
            theta.len()
        )));
    }
    ensure_finite(theta, "shrinkage input")?;
    ensure_finite(target, "shrink target")?;
    if !sigma2.is_finite() {
        return Err(Error::NonFinite("shrinkage variance"));
    }
    if sigma2 < 0.0 {
        return Err(invalid(format!("variance must be >= 0, got {sigma2}")));
    }

    let c = theta.len();
    let dev: Vec<f64> = theta.iter().zip(target).map(|(t, v)| t - v).collect();
    let sum_sq = sum_squares(&dev);

    let passthrough =
        policy.kind == ShrinkKind::None || c < policy.min_dim_guard || sum_sq < policy.denom_guard;
    if passthrough {
        return Ok(Shrunk {
            values: theta.to_vec(),
            factor: 1.0,
            regime: FactorRegime::Identity,
            sum_sq,
        });
    }

    let mut factor = 1.0 - (c as f64 - 2.0) * sigma2 / sum_sq;
    let mut regime = FactorRegime::Active;
    if policy.kind == ShrinkKind::JsPositivePart && factor <= 0.0 {
        factor = 0.0;
        regime = FactorRegime::Clamped;
    }
    let values = dev
        .iter()
        .zip(target)
        .map(|(d, v)| factor * d + v)
        .collect();
    Ok(Shrunk {
        values,
        factor,
        regime,
        sum_sq,
    })
}

/// Vector-Jacobian product of the shrinkage step.
///
/// Given the upstream gradient on the shrunk vector, returns the gradient on
/// `theta` holding `sigma2` fixed, and the gradient on `sigma2` itself. The
/// caller chains the latter through however `sigma2` was computed.
pub fn js_vjp(
    theta: &[f64],
    target: &[f64],
    sigma2: f64,
    shrunk: &Shrunk,
    grad_out: &[f64],
) -> (Vec<f64>, f64) {
    match shrunk.regime {
        FactorRegime::Identity => (grad_out.to_vec(), 0.0),
        FactorRegime::Clamped => (vec![0.0; theta.len()], 0.0),
        FactorRegime::Active => {
            let c2 = theta.len() as f64 - 2.0;
            let s = shrunk.sum_sq;
            // dl/dS = sum_i g_i * d_i * (c-2) sigma2 / S^2
            // dl/dsigma2 = sum_i g_i * d_i * -(c-2) / S
            let g_dot_dev = grad_out
                .iter()
                .zip(theta.iter().zip(target))
                .fold(0.0, |acc, (g, (t, v))| acc + g * (t - v));
            let grad_s = g_dot_dev * c2 * sigma2 / (s * s);
            let grad_sigma2 = -g_dot_dev * c2 / s;
            let grad_theta = grad_out
                .iter()
                .zip(theta.iter().zip(target))
                .map(|(g, (t, v))| shrunk.factor * g + grad_s * 2.0 * (t - v))
                .collect();
            (grad_theta, grad_sigma2)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    Ridge,
    Lasso,
}

/// Ridge: squared L2 norm. LASSO: L1 norm.
pub fn penalty(v: &[f64], kind: PenaltyKind) -> f64 {
    match kind {
        PenaltyKind::Ridge => sum_squares(v),
        PenaltyKind::Lasso => v.iter().fold(0.0, |acc, x| acc + x.abs()),
    }
}

/// Gradient of `lambda * penalty(v)`; the LASSO subgradient at 0 is 0.
pub fn penalty_grad(v: &[f64], kind: PenaltyKind, lambda: f64) -> Vec<f64> {
    match kind {
        PenaltyKind::Ridge => v.iter().map(|x| 2.0 * lambda * x).collect(),
        PenaltyKind::Lasso => v
            .iter()
            .map(|&x| {
                if x > 0.0 {
                    lambda
                } else if x < 0.0 {
                    -lambda
                } else {
                    0.0
                }
            })
            .collect(),
    }
}

/// Penalty weight that makes the penalty term track the task loss:
/// `lambda = lambda_original * loss_original / penalty_sum`.
///
/// The result is a constant for gradient purposes. Returns 0 when the
/// penalty sum is below [`DEFAULT_DENOM_GUARD`].
pub fn rescale_lambda(lambda_original: f64, loss_original: f64, penalty_sum: f64) -> Result<f64> {
    if !(lambda_original.is_finite() && loss_original.is_finite() && penalty_sum.is_finite()) {
        return Err(Error::NonFinite("penalty weight rescaling"));
    }
    if lambda_original < 0.0 {
        return Err(invalid(format!(
            "lambda_original must be >= 0, got {lambda_original}"
        )));
    }
    if penalty_sum < 0.0 {
        return Err(invalid(format!(
            "penalty sum must be >= 0, got {penalty_sum}"
        )));
    }
    if penalty_sum < DEFAULT_DENOM_GUARD {
        return Ok(0.0);
    }
    Ok(lambda_original * (loss_original / penalty_sum))
}
