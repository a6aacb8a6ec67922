//! Central-difference oracle for the hand-written backward passes.
//!
//! A layer passes when every gradient element (input, gamma, beta) agrees
//! with `(f(x + h e) - f(x - h e)) / 2h` within `tol.rel` relative **or**
//! `tol.abs` absolute error. The reported relative error uses the
//! denominator `max(|analytic|, |numeric|, tol.abs / tol.rel)`, which makes
//! "every relative error <= tol.rel" equivalent to that pass rule.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::norm::{
    bn_backward_with, bn_forward, ln_backward_with, ln_forward, BackwardOptions, BackwardTerms,
    ForwardCache, Gradients, NormKind, NormParams, StatGrads,
};
use crate::random::{seeded, PolarNormal};
use crate::shrinkage::{PenaltyKind, ShrinkKind, ShrinkPolicy, ShrinkTarget};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rel: 1e-4,
            abs: 1e-7,
        }
    }
}

/// Element-wise central differences of a scalar function.
pub fn numerical_grad<F>(f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(invalid(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite("finite-difference evaluation"));
        }
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// How the layer input is generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputStyle {
    /// Per-channel random offsets and scales.
    Random,
    /// Every channel carries identical data, so the plug-in variances are 0.
    UniformChannels,
    /// Random data plus a shrink target just below the batch variances, so
    /// the variance factor is strongly negative and every channel clamps.
    ClampTriggering,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub kind: NormKind,
    pub shape: [usize; 4],
    pub policy: ShrinkPolicy,
    pub seed: u64,
    pub tol: Tolerances,
    pub input: InputStyle,
    /// Optional penalty term `lambda * sum(f(mu_b) + f(var_b))` in the loss.
    pub penalty: Option<(PenaltyKind, f64)>,
    pub step: f64,
}

impl GradCheckConfig {
    pub fn new(kind: NormKind, shape: [usize; 4], seed: u64) -> Self {
        GradCheckConfig {
            kind,
            shape,
            policy: ShrinkPolicy::default(),
            seed,
            tol: Tolerances::default(),
            input: InputStyle::Random,
            penalty: None,
            step: DEFAULT_STEP,
        }
    }

    pub fn with_policy(mut self, policy: ShrinkPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_input(mut self, input: InputStyle) -> Self {
        self.input = input;
        self
    }

    pub fn with_penalty(mut self, kind: PenaltyKind, lambda: f64) -> Self {
        self.penalty = Some((kind, lambda));
        self
    }

    pub fn with_tolerances(mut self, tol: Tolerances) -> Self {
        self.tol = tol;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    X,
    Gamma,
    Beta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorstIndex {
    pub config: usize,
    pub target: GradTarget,
    /// `(n, c, h, w)` for the input; `(0, c, 0, 0)` for gamma and beta.
    pub index: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: Option<WorstIndex>,
    pub configs_tested: usize,
    pub passed: bool,
}

impl GradReport {
    fn empty() -> Self {
        GradReport {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: None,
            configs_tested: 0,
            passed: true,
        }
    }

    /// Fold another report in; config indices of `other` are offset.
    pub fn merge(&mut self, other: &GradReport) {
        if other.max_rel_err > self.max_rel_err || self.worst_index.is_none() {
            if let Some(mut w) = other.worst_index {
                w.config += self.configs_tested;
                self.worst_index = Some(w);
            }
        }
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.configs_tested += other.configs_tested;
        self.passed &= other.passed;
    }
}

/// Inputs and parameters of one gradient-check problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub x: Tensor,
    pub params: NormParams,
    pub policy: ShrinkPolicy,
    pub weights: Tensor,
}

impl Problem {
    pub fn build(cfg: &GradCheckConfig) -> Result<Problem> {
        let [n, c, h, w] = cfg.shape;
        if c == 0 || n * h * w == 0 {
            return Err(invalid(format!("degenerate shape {:?}", cfg.shape)));
        }
        if cfg.kind == NormKind::Ln && cfg.input == InputStyle::ClampTriggering && h * w < 2 {
            return Err(invalid("clamp-triggering layer norm needs h * w >= 2"));
        }
        let mut rng = seeded(cfg.seed);
        let mut normal = PolarNormal::new();
        let offsets: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let scales: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
        let mut x = Tensor::zeros(cfg.shape);
        let hw = h * w;
        match cfg.input {
            InputStyle::Random => {
                for (i, v) in x.data_mut().iter_mut().enumerate() {
                    let ch = (i / hw) % c;
                    *v = offsets[ch] + scales[ch] * normal.sample(&mut rng);
                }
            }
            InputStyle::UniformChannels => {
                let plane: Vec<f64> = (0..n * hw).map(|_| 1.0 + normal.sample(&mut rng)).collect();
                for (i, v) in x.data_mut().iter_mut().enumerate() {
                    let s = i / (c * hw);
                    *v = plane[s * hw + i % hw];
                }
            }
            InputStyle::ClampTriggering => {
                // Widely spread channel scales; for layer norm every sample is
                // a copy of the first so one target serves all groups.
                let first: Vec<f64> = (0..c * hw)
                    .map(|i| {
                        let ch = i / hw;
                        offsets[ch] + (1.0 + 2.0 * ch as f64) * normal.sample(&mut rng)
                    })
                    .collect();
                for (i, v) in x.data_mut().iter_mut().enumerate() {
                    *v = match cfg.kind {
                        NormKind::Ln => first[i % (c * hw)],
                        NormKind::Bn => {
                            let ch = (i / hw) % c;
                            offsets[ch] + (1.0 + 2.0 * ch as f64) * normal.sample(&mut rng)
                        }
                    };
                }
            }
        }

        let mut params = NormParams::new(c);
        for g in &mut params.gamma {
            *g = rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        }
        for b in &mut params.beta {
            *b = rng.gen_range(-1.0..1.0);
        }
        let weights = Tensor::from_vec(
            cfg.shape,
            (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?;

        let mut policy = cfg.policy.clone();
        if cfg.input == InputStyle::ClampTriggering {
            policy.kind = ShrinkKind::JsPlain;
            let (_, caches) = forward(cfg.kind, &x, &params, &ShrinkPolicy::none())?;
            let var_b = &caches[0].var_b;
            policy.target = ShrinkTarget::Vector(var_b.iter().map(|v| v - 0.1).collect());
        }
        let problem = Problem {
            x,
            params,
            policy,
            weights,
        };
        if cfg.input == InputStyle::ClampTriggering {
            let (_, caches) = forward(cfg.kind, &problem.x, &problem.params, &problem.policy)?;
            if !caches.iter().all(|c| c.clamp_mask.iter().any(|&m| m)) {
                return Err(invalid("failed to construct a clamp-triggering input"));
            }
        }
        Ok(problem)
    }
}

/// Forward in either layout; batch norm yields a single cache.
pub fn forward(
    kind: NormKind,
    x: &Tensor,
    params: &NormParams,
    policy: &ShrinkPolicy,
) -> Result<(Tensor, Vec<ForwardCache>)> {
    match kind {
        NormKind::Bn => bn_forward(x, params, policy).map(|(y, c)| (y, vec![c])),
        NormKind::Ln => ln_forward(x, params, policy),
    }
}

fn loss(
    kind: NormKind,
    x: &Tensor,
    params: &NormParams,
    policy: &ShrinkPolicy,
    weights: &Tensor,
    penalty: Option<(PenaltyKind, f64)>,
) -> Result<f64> {
    let (y, caches) = forward(kind, x, params, policy)?;
    let mut l = y
        .data()
        .iter()
        .zip(weights.data())
        .fold(0.0, |acc, (a, b)| acc + a * b);
    if let Some((pk, lambda)) = penalty {
        l += lambda * caches.iter().map(|c| c.penalty(pk)).sum::<f64>();
    }
    Ok(l)
}

/// Analytic gradients of `sum(w * y) [+ penalty]`.
pub fn analytic_grads(
    kind: NormKind,
    problem: &Problem,
    penalty: Option<(PenaltyKind, f64)>,
    terms: BackwardTerms,
) -> Result<Gradients> {
    let (_, caches) = forward(kind, &problem.x, &problem.params, &problem.policy)?;
    let stat_grads: Option<Vec<StatGrads>> = penalty.map(|(pk, lambda)| {
        caches
            .iter()
            .map(|c| StatGrads::from_penalty(c, pk, lambda))
            .collect()
    });
    let opts = BackwardOptions {
        stat_grads: stat_grads.as_deref(),
        terms,
    };
    match kind {
        NormKind::Bn => bn_backward_with(
            &problem.weights,
            &caches[0],
            &problem.params,
            &problem.x,
            &opts,
        ),
        NormKind::Ln => ln_backward_with(
            &problem.weights,
            &caches,
            &problem.params,
            &problem.x,
            &opts,
        ),
    }
}

fn compare(
    analytic: &[f64],
    numeric: &[f64],
    tol: Tolerances,
    target: GradTarget,
    shape: [usize; 4],
    report: &mut GradReport,
) {
    let floor = tol.abs / tol.rel;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(floor);
        let ok = (rel <= tol.rel || abs <= tol.abs) && abs.is_finite();
        report.passed &= ok;
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err || report.worst_index.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel);
            let [_, c, h, w] = shape;
            let index = match target {
                GradTarget::X => [i / (c * h * w), (i / (h * w)) % c, (i / w) % h, i % w],
                _ => [0, i, 0, 0],
            };
            report.worst_index = Some(WorstIndex {
                config: 0,
                target,
                index,
            });
        }
    }
}

/// Compare the manual gradients of one random layer against central differences.
pub fn check_layer(cfg: &GradCheckConfig) -> Result<GradReport> {
    let problem = Problem::build(cfg)?;
    let grads = analytic_grads(cfg.kind, &problem, cfg.penalty, BackwardTerms::Simplified)?;
    let kind = cfg.kind;
    let p = &problem;

    let num_x = numerical_grad(
        |x| loss(kind, x, &p.params, &p.policy, &p.weights, cfg.penalty),
        &p.x,
        cfg.step,
    )?;
    let c = p.params.channels();
    let as_tensor = |v: &[f64]| Tensor::from_vec([1, c, 1, 1], v.to_vec());
    let num_gamma = numerical_grad(
        |g| {
            let mut params = p.params.clone();
            params.gamma = g.data().to_vec();
            loss(kind, &p.x, &params, &p.policy, &p.weights, cfg.penalty)
        },
        &as_tensor(&p.params.gamma)?,
        cfg.step,
    )?;
    let num_beta = numerical_grad(
        |b| {
            let mut params = p.params.clone();
            params.beta = b.data().to_vec();
            loss(kind, &p.x, &params, &p.policy, &p.weights, cfg.penalty)
        },
        &as_tensor(&p.params.beta)?,
        cfg.step,
    )?;

    let mut report = GradReport::empty();
    report.configs_tested = 1;
    compare(
        grads.grad_x.data(),
        num_x.data(),
        cfg.tol,
        GradTarget::X,
        cfg.shape,
        &mut report,
    );
    compare(
        &grads.grad_gamma,
        num_gamma.data(),
        cfg.tol,
        GradTarget::Gamma,
        cfg.shape,
        &mut report,
    );
    compare(
        &grads.grad_beta,
        num_beta.data(),
        cfg.tol,
        GradTarget::Beta,
        cfg.shape,
        &mut report,
    );
    Ok(report)
}

/// Run many configs (in parallel) and merge their reports in input order.
pub fn check_suite(configs: &[GradCheckConfig]) -> Result<GradReport> {
    let reports: Vec<Result<GradReport>> = configs.par_iter().map(check_layer).collect();
    let mut total = GradReport::empty();
    for r in reports {
        total.merge(&r?);
    }
    Ok(total)
}

/// Largest element-wise change when the analytically-zero terms are
/// evaluated and added instead of dropped.
pub fn expanded_terms_delta(cfg: &GradCheckConfig) -> Result<f64> {
    let problem = Problem::build(cfg)?;
    let a = analytic_grads(cfg.kind, &problem, cfg.penalty, BackwardTerms::Simplified)?;
    let b = analytic_grads(cfg.kind, &problem, cfg.penalty, BackwardTerms::Expanded)?;
    let diff = |u: &[f64], v: &[f64]| {
        u.iter()
            .zip(v)
            .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()))
    };
    Ok(diff(a.grad_x.data(), b.grad_x.data())
        .max(diff(&a.grad_gamma, &b.grad_gamma))
        .max(diff(&a.grad_beta, &b.grad_beta)))
}

/// Randomized configs covering channel counts {3, 4, 8, 16}, batch sizes
/// {2, 4, 8} and spatial extents {1, 2, 3}, followed by guard-path configs
/// (c = 2, policy none, uniform channels), a positive-part config, a penalty
/// config and a clamp-triggering config.
pub fn standard_suite(kind: NormKind, random_configs: usize, seed: u64) -> Vec<GradCheckConfig> {
    const CHANNELS: [usize; 4] = [3, 4, 8, 16];
    const BATCH: [usize; 3] = [2, 4, 8];
    const SPATIAL: [usize; 3] = [1, 2, 3];
    let mut rng = seeded(seed);
    let mut out = Vec::new();
    for k in 0..random_configs {
        let shape = [
            BATCH[rng.gen_range(0..BATCH.len())],
            CHANNELS[k % CHANNELS.len()],
            SPATIAL[rng.gen_range(0..SPATIAL.len())],
            SPATIAL[rng.gen_range(0..SPATIAL.len())],
        ];
        out.push(GradCheckConfig::new(
            kind,
            shape,
            seed.wrapping_add(k as u64),
        ));
    }
    let s = seed.wrapping_add(10_000);
    out.push(GradCheckConfig::new(kind, [4, 2, 2, 2], s));
    out.push(GradCheckConfig::new(kind, [4, 4, 2, 2], s + 1).with_policy(ShrinkPolicy::none()));
    out.push(
        GradCheckConfig::new(kind, [4, 4, 2, 1], s + 2).with_input(InputStyle::UniformChannels),
    );
    out.push(
        GradCheckConfig::new(kind, [4, 8, 2, 2], s + 3).with_policy(ShrinkPolicy::positive_part()),
    );
    out.push(GradCheckConfig::new(kind, [4, 8, 2, 1], s + 4).with_penalty(PenaltyKind::Ridge, 0.3));
    out.push(GradCheckConfig::new(kind, [4, 8, 2, 1], s + 5).with_penalty(PenaltyKind::Lasso, 0.3));
    out.push(
        GradCheckConfig::new(kind, [4, 4, 2, 2], s + 6).with_input(InputStyle::ClampTriggering),
    );
    out
}
