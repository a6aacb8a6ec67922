//! Monte Carlo risk of mean estimators under squared-error loss.
//!
//! Each trial draws `X ~ N(theta, I_c)` and scores `||estimate(X) - theta||^2`.
//! Trial `k` always reads substream `k` of the generator keyed by the run
//! seed (see [`crate::random`]), so every estimator and every `theta` on a
//! sweep sees the same noise draws (common random numbers). Trials run in
//! parallel; losses are gathered by trial index and summed sequentially.
//!
//! Risk depends on `theta` only through `||theta||` by rotational symmetry,
//! so sweeps place `theta` on the first axis.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::random::{substream, PolarNormal};
use crate::shrinkage::{js_shrink, ShrinkKind, ShrinkPolicy};
use crate::tensor::{biased_var, mean, sum_squares};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// The observation itself (sample mean / maximum likelihood).
    Mle,
    /// `(1 - (c-2)/||X||^2) X` with the known unit noise variance.
    JsClassic,
    /// Positive-part version of `JsClassic`.
    JsPositive,
    /// Shrinkage with the empirical variance of X's own components, as the
    /// normalization layers do.
    JsPaperPlugin,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [
        Estimator::Mle,
        Estimator::JsClassic,
        Estimator::JsPositive,
        Estimator::JsPaperPlugin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Mle => "mle",
            Estimator::JsClassic => "js_classic",
            Estimator::JsPositive => "js_positive",
            Estimator::JsPaperPlugin => "js_paper_plugin",
        }
    }

    /// Apply the estimator to one observation.
    pub fn estimate(self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Estimator::Mle => Ok(x.to_vec()),
            Estimator::JsClassic => {
                Ok(js_shrink(x, 1.0, &ShrinkPolicy::new(ShrinkKind::JsPlain))?.values)
            }
            Estimator::JsPositive => Ok(js_shrink(x, 1.0, &ShrinkPolicy::positive_part())?.values),
            Estimator::JsPaperPlugin => {
                let s2 = biased_var(x, mean(x));
                Ok(js_shrink(x, s2, &ShrinkPolicy::default())?.values)
            }
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| invalid(format!("unknown estimator `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub estimator: Estimator,
    pub c: usize,
    pub theta_norm: f64,
    pub trials: usize,
    pub risk_hat: f64,
    pub std_err: f64,
    pub seed: u64,
}

/// Draw `X ~ N(theta, I)` and apply `estimator`.
pub fn sample_and_estimate<R: Rng + ?Sized>(
    theta: &[f64],
    estimator: Estimator,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if theta.is_empty() {
        return Err(invalid("dimension must be >= 1"));
    }
    let x = draw(theta, rng);
    estimator.estimate(&x)
}

fn draw<R: Rng + ?Sized>(theta: &[f64], rng: &mut R) -> Vec<f64> {
    let mut normal = PolarNormal::new();
    theta.iter().map(|t| t + normal.sample(rng)).collect()
}

fn sq_err(est: &[f64], theta: &[f64]) -> f64 {
    est.iter()
        .zip(theta)
        .fold(0.0, |acc, (e, t)| acc + (e - t) * (e - t))
}

/// Per-trial losses of several estimators on shared draws; `losses[e][k]`.
fn paired_losses(
    theta: &[f64],
    estimators: &[Estimator],
    trials: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let per_trial: Vec<Result<Vec<f64>>> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut rng = substream(seed, k as u64);
            let x = draw(theta, &mut rng);
            estimators
                .iter()
                .map(|e| e.estimate(&x).map(|est| sq_err(&est, theta)))
                .collect()
        })
        .collect();
    let mut losses = vec![Vec::with_capacity(trials); estimators.len()];
    for row in per_trial {
        for (dst, l) in losses.iter_mut().zip(row?) {
            dst.push(l);
        }
    }
    Ok(losses)
}

/// Mean and standard error (sample std with n - 1, over sqrt(n)).
fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let ss = xs.iter().fold(0.0, |acc, x| acc + (x - m) * (x - m));
    (m, (ss / (n - 1.0)).sqrt() / n.sqrt())
}

fn check_args(c: usize, theta: &[f64], trials: usize) -> Result<()> {
    if c == 0 {
        return Err(invalid("dimension must be >= 1"));
    }
    if theta.len() != c {
        return Err(Error::Shape(format!(
            "theta has length {}, c = {}",
            theta.len(),
            c
        )));
    }
    if trials == 0 {
        return Err(invalid("trials must be >= 1"));
    }
    crate::error::ensure_finite(theta, "theta")
}

pub fn simulate_risk(
    c: usize,
    theta: &[f64],
    estimator: Estimator,
    trials: usize,
    seed: u64,
) -> Result<RiskReport> {
    check_args(c, theta, trials)?;
    let losses = paired_losses(theta, &[estimator], trials, seed)?;
    let (risk_hat, std_err) = mean_and_se(&losses[0]);
    Ok(RiskReport {
        estimator,
        c,
        theta_norm: sum_squares(theta).sqrt(),
        trials,
        risk_hat,
        std_err,
        seed,
    })
}

/// Risks of several estimators at one `theta`, all on the same draws.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub theta_norm: f64,
    pub reports: Vec<RiskReport>,
    losses: Vec<Vec<f64>>,
}

impl SweepPoint {
    /// Mean and standard error of the per-trial loss difference `a - b`.
    pub fn paired_difference(&self, a: Estimator, b: Estimator) -> Option<(f64, f64)> {
        let ia = self.reports.iter().position(|r| r.estimator == a)?;
        let ib = self.reports.iter().position(|r| r.estimator == b)?;
        let diff: Vec<f64> = self.losses[ia]
            .iter()
            .zip(&self.losses[ib])
            .map(|(x, y)| x - y)
            .collect();
        Some(mean_and_se(&diff))
    }

    pub fn report(&self, e: Estimator) -> Option<&RiskReport> {
        self.reports.iter().find(|r| r.estimator == e)
    }
}

/// Risk of every estimator at `theta = norm * e_1` for each norm on the grid.
pub fn dominance_sweep(
    c: usize,
    theta_norms: &[f64],
    estimators: &[Estimator],
    trials: usize,
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    if theta_norms.is_empty() || estimators.is_empty() {
        return Err(invalid("theta norms and estimators must be non-empty"));
    }
    theta_norms
        .iter()
        .map(|&norm| {
            if !(norm >= 0.0 && norm.is_finite()) {
                return Err(invalid(format!(
                    "theta norm must be finite and >= 0, got {norm}"
                )));
            }
            let mut theta = vec![0.0; c];
            if let Some(first) = theta.first_mut() {
                *first = norm;
            }
            check_args(c, &theta, trials)?;
            let losses = paired_losses(&theta, estimators, trials, seed)?;
            let reports = estimators
                .iter()
                .zip(&losses)
                .map(|(&estimator, l)| {
                    let (risk_hat, std_err) = mean_and_se(l);
                    RiskReport {
                        estimator,
                        c,
                        theta_norm: norm,
                        trials,
                        risk_hat,
                        std_err,
                        seed,
                    }
                })
                .collect();
            Ok(SweepPoint {
                theta_norm: norm,
                reports,
                losses,
            })
        })
        .collect()
}

/// CSV with header `estimator,c,theta_norm,trials,risk,std_err,seed`.
pub fn write_csv<W: Write>(reports: &[RiskReport], out: W) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record([
        "estimator",
        "c",
        "theta_norm",
        "trials",
        "risk",
        "std_err",
        "seed",
    ])?;
    for r in reports {
        w.write_record([
            r.estimator.name().to_string(),
            r.c.to_string(),
            r.theta_norm.to_string(),
            r.trials.to_string(),
            r.risk_hat.to_string(),
            r.std_err.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush()
}
