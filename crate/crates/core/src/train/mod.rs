//! Toy-scale training harness: synthetic data, a small network with
//! normalization layers, minibatch SGD and running-statistic export.

mod data;
mod net;

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use data::{class_center, make_synthetic_dataset, DataMode, Dataset, DatasetSpec, Split};
pub use net::{
    argmax_rows, softmax_cross_entropy, Arch, Layer, LayerCache, LayerGrads, Linear, NetSpec,
    NormLayer, NormVariant, ToyNet,
};

use crate::error::{invalid, Error, Result};
use crate::norm::{NormKind, StatGrads};
use crate::random::substream;
use crate::shrinkage::{rescale_lambda, PenaltyKind, ShrinkPolicy};

/// Batch size at which `learning_rate` is taken literally when
/// `lr_scaling` is on.
pub const REFERENCE_BATCH: usize = 64;

fn default_momentum() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default)]
    pub lambda_original: f64,
    #[serde(default)]
    pub penalty_kind: Option<PenaltyKind>,
    /// Norm layer names to penalize; `None` means all of them.
    #[serde(default)]
    pub penalized_layers: Option<BTreeSet<String>>,
    #[serde(default)]
    pub shrink_policy: ShrinkPolicy,
    #[serde(default)]
    pub lr_scaling: bool,
}

impl TrainConfig {
    pub fn new(batch_size: usize, epochs: usize, learning_rate: f64, seed: u64) -> Self {
        TrainConfig {
            batch_size,
            epochs,
            learning_rate,
            momentum: default_momentum(),
            weight_decay: 0.0,
            seed,
            lambda_original: 0.0,
            penalty_kind: None,
            penalized_layers: None,
            shrink_policy: ShrinkPolicy::default(),
            lr_scaling: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid("weight_decay must be finite and >= 0"));
        }
        if !(self.lambda_original >= 0.0 && self.lambda_original.is_finite()) {
            return Err(invalid("lambda_original must be finite and >= 0"));
        }
        self.shrink_policy.validate()
    }

    /// Step size after the optional linear scaling rule.
    pub fn effective_lr(&self) -> f64 {
        if self.lr_scaling {
            self.learning_rate * self.batch_size as f64 / REFERENCE_BATCH as f64
        } else {
            self.learning_rate
        }
    }

    /// Checks the config against a network: batch norm needs two samples per
    /// batch, and penalized layers must exist and run the js variant.
    pub fn validate_for(&self, net: &ToyNet) -> Result<()> {
        self.validate()?;
        if net.has_batch_norm() && self.batch_size < 2 {
            return Err(invalid(format!(
                "batch_size {} is too small for batch norm (need >= 2)",
                self.batch_size
            )));
        }
        self.penalized_indices(net).map(|_| ())
    }

    fn penalized_indices(&self, net: &ToyNet) -> Result<Vec<usize>> {
        if self.penalty_kind.is_none() {
            return Ok(Vec::new());
        }
        if let Some(names) = &self.penalized_layers {
            for name in names {
                if !net.norm_layers().any(|n| &n.name == name) {
                    return Err(invalid(format!(
                        "penalized layer {name:?} is not a norm layer"
                    )));
                }
            }
        }
        let mut out = Vec::new();
        for (i, layer) in net.layers.iter().enumerate() {
            if let Layer::Norm(n) = layer {
                let selected = match &self.penalized_layers {
                    Some(names) => names.contains(&n.name),
                    None => true,
                };
                if selected {
                    if n.variant != NormVariant::Js {
                        return Err(invalid(format!(
                            "{}: statistic penalties need the js variant (use policy none for plain statistics)",
                            n.name
                        )));
                    }
                    out.push(i);
                }
            }
        }
        Ok(out)
    }
}

/// The 4-class comparison benchmark: 8-dimensional Gaussian blobs at
/// separation 5, 500 samples per class.
pub fn four_class_benchmark(seed: u64) -> DatasetSpec {
    DatasetSpec {
        classes: 4,
        mode: DataMode::Vector { feature_dim: 8 },
        samples_per_class: 500,
        separation: 5.0,
        seed,
    }
}

/// Two hidden layers of 32 units, each followed by batch norm.
pub fn benchmark_net(variant: NormVariant) -> NetSpec {
    NetSpec::mlp(vec![32, 32], Some(NormKind::Bn), variant)
}

/// 20 epochs of SGD at 0.05 (for batch 64) with linear LR scaling.
pub fn benchmark_config(batch_size: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr_scaling: true,
        ..TrainConfig::new(batch_size, 20, 0.05, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean task loss over the epoch's steps, without penalty terms.
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// One step's penalty bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyStep {
    pub epoch: usize,
    pub step: usize,
    pub loss_original: f64,
    pub penalty_sum: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub layer: String,
    pub kind: NormKind,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub penalty_steps: Vec<PenaltyStep>,
    pub final_stats: Vec<StatsSnapshot>,
}

impl RunMetrics {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_acc)
    }
}

pub fn snapshot_stats(net: &ToyNet) -> Vec<StatsSnapshot> {
    net.norm_layers()
        .map(|n| StatsSnapshot {
            layer: n.name.clone(),
            kind: n.kind,
            running_mean: n.running.running_mean.clone(),
            running_var: n.running.running_var.clone(),
            count: n.running.count,
        })
        .collect()
}

/// Minibatch SGD with momentum on softmax cross-entropy.
///
/// Each epoch visits the training split in a fresh seeded order; trailing
/// batches with fewer than two samples are dropped. With a penalty kind set,
/// every step computes the task loss and the summed penalty on the raw batch
/// statistics of the penalized layers, rescales the penalty weight so the
/// penalty term equals `lambda_original` times the task loss, and feeds the
/// weighted penalty gradient into the norm backward passes. The weight is a
/// constant for differentiation.
pub fn train(net: &mut ToyNet, data: &Dataset, cfg: &TrainConfig) -> Result<RunMetrics> {
    net.validate()?;
    cfg.validate_for(net)?;
    if net.input_shape != data.sample_shape() || net.classes != data.classes {
        return Err(Error::Shape(format!(
            "network takes {:?} with {} classes, data is {:?} with {}",
            net.input_shape,
            net.classes,
            data.sample_shape(),
            data.classes
        )));
    }
    if data.train.len() < 2 {
        return Err(invalid("training split needs at least 2 samples"));
    }
    let penalized = cfg.penalized_indices(net)?;
    let lr = cfg.effective_lr();
    let mut velocity: Vec<Option<(Vec<f64>, Vec<f64>)>> = net
        .params_mut()
        .into_iter()
        .map(|p| p.map(|(a, b)| (vec![0.0; a.len()], vec![0.0; b.len()])))
        .collect();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut shuffle_rng = substream(cfg.seed, 1);
    let mut metrics = RunMetrics {
        epochs: Vec::with_capacity(cfg.epochs),
        penalty_steps: Vec::new(),
        final_stats: Vec::new(),
    };
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = data.train.subset(chunk);
            let (logits, caches) = net.forward_train(&batch.x)?;
            let (loss, grad_logits) = softmax_cross_entropy(&logits, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }

            let mut stat_grads: Vec<Option<Vec<StatGrads>>> = vec![None; net.layers.len()];
            if let Some(kind) = cfg.penalty_kind {
                let penalty_sum: f64 = penalized
                    .iter()
                    .flat_map(|&i| caches[i].js_caches().unwrap_or(&[]))
                    .map(|c| c.penalty(kind))
                    .sum();
                let lambda = rescale_lambda(cfg.lambda_original, loss, penalty_sum)?;
                metrics.penalty_steps.push(PenaltyStep {
                    epoch,
                    step,
                    loss_original: loss,
                    penalty_sum,
                    lambda,
                });
                if lambda != 0.0 {
                    for &i in &penalized {
                        let groups = caches[i].js_caches().unwrap_or(&[]);
                        stat_grads[i] = Some(
                            groups
                                .iter()
                                .map(|c| StatGrads::from_penalty(c, kind, lambda))
                                .collect(),
                        );
                    }
                }
            }

            let (grads, _) = net.backward(&caches, &grad_logits, &stat_grads)?;
            for ((params, vel), grad) in net.params_mut().into_iter().zip(&mut velocity).zip(grads)
            {
                if let (Some((pa, pb)), Some((va, vb)), Some((ga, gb))) =
                    (params, vel.as_mut(), grad)
                {
                    sgd_update(pa, va, &ga, lr, cfg.momentum, cfg.weight_decay);
                    sgd_update(pb, vb, &gb, lr, cfg.momentum, cfg.weight_decay);
                }
            }
            loss_sum += loss;
            steps += 1;
            step += 1;
        }
        metrics.epochs.push(EpochMetrics {
            epoch,
            loss: loss_sum / steps as f64,
            train_acc: evaluate(net, &data.train)?,
            test_acc: evaluate(net, &data.test)?,
        });
    }
    metrics.final_stats = snapshot_stats(net);
    Ok(metrics)
}

fn sgd_update(
    param: &mut [f64],
    vel: &mut [f64],
    grad: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((p, v), g) in param.iter_mut().zip(vel.iter_mut()).zip(grad) {
        let g = if weight_decay > 0.0 {
            g + weight_decay * *p
        } else {
            *g
        };
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Fraction of `split` classified correctly with inference-mode norms.
pub fn evaluate(net: &ToyNet, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let predicted = argmax_rows(&net.infer(&split.x)?);
    let correct = predicted
        .iter()
        .zip(&split.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / split.len() as f64)
}

/// Runs training-mode forward passes over `split` in order to populate
/// running statistics, without touching any weights.
pub fn calibrate(net: &mut ToyNet, split: &Split, batch_size: usize) -> Result<()> {
    if batch_size < 2 {
        return Err(invalid("calibration batches need at least 2 samples"));
    }
    let indices: Vec<usize> = (0..split.len()).collect();
    for chunk in indices.chunks(batch_size).filter(|c| c.len() >= 2) {
        net.forward_train(&split.x.gather_samples(chunk))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` ascending edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[min, max]`; a constant input `v` gets the
    /// range `[v - 0.5, v + 0.5]`. The top edge is inclusive.
    pub fn build(values: &[f64], bins: usize) -> Result<Histogram> {
        if bins == 0 {
            return Err(invalid("bins must be at least 1"));
        }
        if values.is_empty() {
            return Err(Error::EmptyReduction);
        }
        crate::error::ensure_finite(values, "histogram input")?;
        let mut lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo <= 0.0 {
            lo -= 0.5;
            hi += 0.5;
        }
        let width = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..bins).map(|i| lo + i as f64 * width).collect();
        edges.push(hi);
        let mut counts = vec![0; bins];
        for &v in values {
            let k = (((v - lo) / width).floor() as usize).min(bins - 1);
            counts[k] += 1;
        }
        Ok(Histogram { edges, counts })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHistogram {
    pub layer: String,
    pub running_mean: Histogram,
    pub running_var: Histogram,
    pub mean_abs_running_mean: f64,
    pub mean_running_var: f64,
}

/// Histograms of every batch-norm layer's running means and variances.
/// Layer norm keeps no running statistics and is skipped.
pub fn export_stats_histogram(net: &ToyNet, bins: usize) -> Result<Vec<LayerHistogram>> {
    let mut out = Vec::new();
    for n in net.norm_layers().filter(|n| n.kind == NormKind::Bn) {
        if n.running.count == 0 {
            return Err(Error::NotCalibrated(n.name.clone()));
        }
        let rm = &n.running.running_mean;
        let rv = &n.running.running_var;
        out.push(LayerHistogram {
            layer: n.name.clone(),
            running_mean: Histogram::build(rm, bins)?,
            running_var: Histogram::build(rv, bins)?,
            mean_abs_running_mean: rm.iter().map(|v| v.abs()).sum::<f64>() / rm.len() as f64,
            mean_running_var: rv.iter().sum::<f64>() / rv.len() as f64,
        });
    }
    if out.is_empty() {
        return Err(invalid(
            "network has no batch-norm layer with running statistics",
        ));
    }
    Ok(out)
}

fn csv_writer<W: Write>(writer: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer)
}

/// `epoch,loss,train_acc,test_acc`, one row per epoch.
pub fn write_metrics_csv<W: Write>(metrics: &RunMetrics, writer: W) -> std::io::Result<()> {
    let mut w = csv_writer(writer);
    w.write_record(["epoch", "loss", "train_acc", "test_acc"])?;
    for e in &metrics.epochs {
        w.write_record([
            e.epoch.to_string(),
            e.loss.to_string(),
            e.train_acc.to_string(),
            e.test_acc.to_string(),
        ])?;
    }
    w.flush()
}

/// `layer,kind,bin_lo,bin_hi,count` with kind `running_mean` or
/// `running_var`.
pub fn write_histogram_csv<W: Write>(hists: &[LayerHistogram], writer: W) -> std::io::Result<()> {
    let mut w = csv_writer(writer);
    w.write_record(["layer", "kind", "bin_lo", "bin_hi", "count"])?;
    for h in hists {
        for (kind, hist) in [
            ("running_mean", &h.running_mean),
            ("running_var", &h.running_var),
        ] {
            for (k, count) in hist.counts.iter().enumerate() {
                w.write_record([
                    h.layer.clone(),
                    kind.to_string(),
                    hist.edges[k].to_string(),
                    hist.edges[k + 1].to_string(),
                    count.to_string(),
                ])?;
            }
        }
    }
    w.flush()
}

#[cfg(test)]
mod tests;
