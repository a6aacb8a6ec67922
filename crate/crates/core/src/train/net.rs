//! A small feed-forward network with hand-written backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::norm::reference::{self, PlainCache};
use crate::norm::{
    bn_backward_with, bn_forward_eval, bn_forward_train, ln_backward_with, ln_forward,
    BackwardOptions, ForwardCache, NormKind, NormParams, RunningStats, StatGrads, StatTracking,
    DEFAULT_EPS, DEFAULT_MOMENTUM,
};
use crate::random::seeded;
use crate::shrinkage::ShrinkPolicy;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Dense layers on the flattened input.
    #[default]
    Mlp,
    /// 1x1 convolutions, global average pooling, dense head.
    Conv,
}

/// `Standard` runs the plain normalization code; `Js` runs JSNorm with the
/// layer's shrink policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormVariant {
    Standard,
    #[default]
    Js,
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    #[serde(default)]
    pub arch: Arch,
    pub hidden: Vec<usize>,
    /// `None` builds the network without normalization layers.
    #[serde(default)]
    pub norm: Option<NormKind>,
    #[serde(default)]
    pub variant: NormVariant,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub tracking: StatTracking,
}

impl NetSpec {
    pub fn mlp(hidden: Vec<usize>, norm: Option<NormKind>, variant: NormVariant) -> Self {
        NetSpec {
            arch: Arch::Mlp,
            hidden,
            norm,
            variant,
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            tracking: StatTracking::Shrunk,
        }
    }

    pub fn conv(hidden: Vec<usize>, norm: Option<NormKind>, variant: NormVariant) -> Self {
        NetSpec {
            arch: Arch::Conv,
            ..NetSpec::mlp(hidden, norm, variant)
        }
    }
}

/// Fully connected map; `weight` is row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    /// Uniform fan-in init on `[-1/sqrt(in), 1/sqrt(in))`, zero bias.
    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Linear {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    fn check(&self) -> Result<()> {
        if self.weight.len() != self.in_dim * self.out_dim || self.bias.len() != self.out_dim {
            return Err(Error::Shape(format!(
                "linear {}x{} has {} weights and {} biases",
                self.out_dim,
                self.in_dim,
                self.weight.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }

    /// Applies the map to `in_dim`-long columns with stride `stride`:
    /// stride 1 on flattened samples for a dense layer, `h*w` for a 1x1
    /// convolution.
    fn apply(&self, x: &[f64], n: usize, pixels: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * self.out_dim * pixels];
        for s in 0..n {
            let xs = &x[s * self.in_dim * pixels..(s + 1) * self.in_dim * pixels];
            let ys = &mut out[s * self.out_dim * pixels..(s + 1) * self.out_dim * pixels];
            for o in 0..self.out_dim {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                for p in 0..pixels {
                    let mut acc = self.bias[o];
                    for (i, w) in row.iter().enumerate() {
                        acc += w * xs[i * pixels + p];
                    }
                    ys[o * pixels + p] = acc;
                }
            }
        }
        out
    }

    fn backward(
        &self,
        x: &[f64],
        dy: &[f64],
        n: usize,
        pixels: usize,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut dw = vec![0.0; self.weight.len()];
        let mut db = vec![0.0; self.out_dim];
        let mut dx = vec![0.0; x.len()];
        for s in 0..n {
            let xs = &x[s * self.in_dim * pixels..(s + 1) * self.in_dim * pixels];
            let dys = &dy[s * self.out_dim * pixels..(s + 1) * self.out_dim * pixels];
            let dxs = &mut dx[s * self.in_dim * pixels..(s + 1) * self.in_dim * pixels];
            for o in 0..self.out_dim {
                for p in 0..pixels {
                    let g = dys[o * pixels + p];
                    db[o] += g;
                    for i in 0..self.in_dim {
                        dw[o * self.in_dim + i] += g * xs[i * pixels + p];
                        dxs[i * pixels + p] += self.weight[o * self.in_dim + i] * g;
                    }
                }
            }
        }
        (dw, db, dx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormLayer {
    pub name: String,
    pub kind: NormKind,
    pub variant: NormVariant,
    pub params: NormParams,
    pub policy: ShrinkPolicy,
    /// Only batch norm reads these; layer norm leaves them untouched.
    pub running: RunningStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Dense(Linear),
    Pointwise(Linear),
    Norm(NormLayer),
    Relu,
    AvgPool,
}

impl Layer {
    fn label(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Pointwise(_) => "pointwise",
            Layer::Norm(_) => "norm",
            Layer::Relu => "relu",
            Layer::AvgPool => "avg_pool",
        }
    }
}

/// What a layer needs from its forward pass to run backward.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Linear {
        input: Tensor,
    },
    JsBn {
        input: Tensor,
        cache: ForwardCache,
    },
    JsLn {
        input: Tensor,
        caches: Vec<ForwardCache>,
    },
    StdBn {
        input: Tensor,
        cache: PlainCache,
    },
    StdLn {
        input: Tensor,
        caches: Vec<PlainCache>,
    },
    Relu {
        input: Tensor,
    },
    AvgPool {
        shape: [usize; 4],
    },
}

impl LayerCache {
    /// JSNorm forward caches, one per normalization group.
    pub fn js_caches(&self) -> Option<&[ForwardCache]> {
        match self {
            LayerCache::JsBn { cache, .. } => Some(std::slice::from_ref(cache)),
            LayerCache::JsLn { caches, .. } => Some(caches),
            _ => None,
        }
    }
}

/// Gradients for one layer's two parameter vectors (weight/bias or
/// gamma/beta); `None` for parameter-free layers.
pub type LayerGrads = Option<(Vec<f64>, Vec<f64>)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyNet {
    /// Per-sample input shape `(c, h, w)`.
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub layers: Vec<Layer>,
}

impl ToyNet {
    pub fn build(
        spec: &NetSpec,
        input_shape: [usize; 3],
        classes: usize,
        policy: &ShrinkPolicy,
        seed: u64,
    ) -> Result<ToyNet> {
        policy.validate()?;
        let mut rng = seeded(seed);
        let mut layers = Vec::new();
        let [c, h, w] = input_shape;
        let mut width = match spec.arch {
            Arch::Mlp => c * h * w,
            Arch::Conv => c,
        };
        for (k, &hidden) in spec.hidden.iter().enumerate() {
            let lin = Linear::init(width, hidden, &mut rng);
            layers.push(match spec.arch {
                Arch::Mlp => Layer::Dense(lin),
                Arch::Conv => Layer::Pointwise(lin),
            });
            if let Some(kind) = spec.norm {
                let mut params = NormParams::new(hidden);
                params.eps = spec.eps;
                params.momentum = spec.momentum;
                layers.push(Layer::Norm(NormLayer {
                    name: format!("norm{k}"),
                    kind,
                    variant: spec.variant,
                    params,
                    policy: policy.clone(),
                    running: RunningStats::new(hidden).with_tracking(spec.tracking),
                }));
            }
            layers.push(Layer::Relu);
            width = hidden;
        }
        if spec.arch == Arch::Conv {
            layers.push(Layer::AvgPool);
        }
        layers.push(Layer::Dense(Linear::init(width, classes, &mut rng)));
        let net = ToyNet {
            input_shape,
            classes,
            layers,
        };
        net.validate()?;
        Ok(net)
    }

    /// Checks that every layer accepts its predecessor's output and the last
    /// one emits `classes` logits.
    pub fn validate(&self) -> Result<()> {
        let [mut c, mut h, mut w] = self.input_shape;
        if c * h * w == 0 {
            return Err(Error::Shape("input shape has a zero extent".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense(lin) => {
                    lin.check()?;
                    if lin.in_dim != c * h * w {
                        return Err(Error::Shape(format!(
                            "layer {i}: dense expects {} inputs, gets {}",
                            lin.in_dim,
                            c * h * w
                        )));
                    }
                    (c, h, w) = (lin.out_dim, 1, 1);
                }
                Layer::Pointwise(lin) => {
                    lin.check()?;
                    if lin.in_dim != c {
                        return Err(Error::Shape(format!(
                            "layer {i}: pointwise expects {} channels, gets {c}",
                            lin.in_dim
                        )));
                    }
                    c = lin.out_dim;
                }
                Layer::Norm(norm) => {
                    if c == 0 {
                        return Err(Error::Shape(format!("{}: zero channels", norm.name)));
                    }
                    norm.params.validate(c)?;
                    norm.policy.validate()?;
                    if norm.running.running_mean.len() != c || norm.running.running_var.len() != c {
                        return Err(Error::Shape(format!("{}: running stats length", norm.name)));
                    }
                    if norm.kind == NormKind::Ln && h * w < 2 {
                        return Err(invalid(format!(
                            "{}: layer norm needs a spatial extent of at least 2, got {h}x{w}",
                            norm.name
                        )));
                    }
                }
                Layer::Relu => {}
                Layer::AvgPool => (h, w) = (1, 1),
            }
        }
        if (c, h, w) != (self.classes, 1, 1) {
            return Err(Error::Shape(format!(
                "network ends in ({c}, {h}, {w}), expected {} logits",
                self.classes
            )));
        }
        Ok(())
    }

    pub fn norm_layers(&self) -> impl Iterator<Item = &NormLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Norm(n) => Some(n),
            _ => None,
        })
    }

    pub fn has_batch_norm(&self) -> bool {
        self.norm_layers().any(|n| n.kind == NormKind::Bn)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if [c, h, w] != self.input_shape {
            return Err(Error::Shape(format!(
                "input samples are {:?}, network takes {:?}",
                [c, h, w],
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Training-mode forward. Batch-norm layers normalize with batch
    /// statistics and fold them into their running averages.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, Vec<LayerCache>)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &mut self.layers {
            let (next, cache) = match layer {
                Layer::Dense(lin) => {
                    let out = lin.apply(cur.data(), cur.n(), 1);
                    let y = Tensor::from_vec([cur.n(), lin.out_dim, 1, 1], out)?;
                    (y, LayerCache::Linear { input: cur })
                }
                Layer::Pointwise(lin) => {
                    let [n, _, h, w] = cur.shape();
                    let out = lin.apply(cur.data(), n, h * w);
                    let y = Tensor::from_vec([n, lin.out_dim, h, w], out)?;
                    (y, LayerCache::Linear { input: cur })
                }
                Layer::Norm(norm) => match (norm.kind, norm.variant) {
                    (NormKind::Bn, NormVariant::Js) => {
                        let (y, cache) =
                            bn_forward_train(&cur, &norm.params, &norm.policy, &mut norm.running)?;
                        (y, LayerCache::JsBn { input: cur, cache })
                    }
                    (NormKind::Ln, NormVariant::Js) => {
                        let (y, caches) = ln_forward(&cur, &norm.params, &norm.policy)?;
                        (y, LayerCache::JsLn { input: cur, caches })
                    }
                    (NormKind::Bn, NormVariant::Standard) => {
                        let (y, cache) =
                            reference::batch_norm_train(&cur, &norm.params, &mut norm.running)?;
                        (y, LayerCache::StdBn { input: cur, cache })
                    }
                    (NormKind::Ln, NormVariant::Standard) => {
                        let (y, caches) = reference::layer_norm(&cur, &norm.params)?;
                        (y, LayerCache::StdLn { input: cur, caches })
                    }
                },
                Layer::Relu => (cur.map(|v| v.max(0.0)), LayerCache::Relu { input: cur }),
                Layer::AvgPool => {
                    let shape = cur.shape();
                    (avg_pool(&cur)?, LayerCache::AvgPool { shape })
                }
            };
            caches.push(cache);
            cur = next;
        }
        Ok((cur, caches))
    }

    /// Inference-mode forward; batch norm uses running statistics, so
    /// samples do not interact and nothing is mutated.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Dense(lin) => Tensor::from_vec(
                    [cur.n(), lin.out_dim, 1, 1],
                    lin.apply(cur.data(), cur.n(), 1),
                )?,
                Layer::Pointwise(lin) => {
                    let [n, _, h, w] = cur.shape();
                    Tensor::from_vec([n, lin.out_dim, h, w], lin.apply(cur.data(), n, h * w))?
                }
                Layer::Norm(norm) => match (norm.kind, norm.variant) {
                    (NormKind::Bn, _) => {
                        bn_forward_eval(&cur, &norm.params, &norm.running, &norm.name)?
                    }
                    (NormKind::Ln, NormVariant::Js) => {
                        ln_forward(&cur, &norm.params, &norm.policy)?.0
                    }
                    (NormKind::Ln, NormVariant::Standard) => {
                        reference::layer_norm(&cur, &norm.params)?.0
                    }
                },
                Layer::Relu => cur.map(|v| v.max(0.0)),
                Layer::AvgPool => avg_pool(&cur)?,
            };
        }
        Ok(cur)
    }

    /// Backpropagates `grad_logits` through the cached forward pass.
    /// `stat_grads[i]`, when present, adds gradient on the raw batch
    /// statistics of norm layer `i` (indexed like `layers`).
    pub fn backward(
        &self,
        caches: &[LayerCache],
        grad_logits: &Tensor,
        stat_grads: &[Option<Vec<StatGrads>>],
    ) -> Result<(Vec<LayerGrads>, Tensor)> {
        if caches.len() != self.layers.len() || stat_grads.len() != self.layers.len() {
            return Err(Error::Shape("caches do not match the network".into()));
        }
        let mut grads: Vec<LayerGrads> = vec![None; self.layers.len()];
        let mut g = grad_logits.clone();
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            g = match (layer, cache) {
                (Layer::Dense(lin), LayerCache::Linear { input }) => {
                    let (dw, db, dx) = lin.backward(input.data(), g.data(), input.n(), 1);
                    grads[i] = Some((dw, db));
                    Tensor::from_vec(input.shape(), dx)?
                }
                (Layer::Pointwise(lin), LayerCache::Linear { input }) => {
                    let (dw, db, dx) =
                        lin.backward(input.data(), g.data(), input.n(), input.h() * input.w());
                    grads[i] = Some((dw, db));
                    Tensor::from_vec(input.shape(), dx)?
                }
                (Layer::Norm(norm), cache) => {
                    let opts = BackwardOptions {
                        stat_grads: stat_grads[i].as_deref(),
                        ..Default::default()
                    };
                    let out = match cache {
                        LayerCache::JsBn { input, cache } => {
                            bn_backward_with(&g, cache, &norm.params, input, &opts)?
                        }
                        LayerCache::JsLn { input, caches } => {
                            ln_backward_with(&g, caches, &norm.params, input, &opts)?
                        }
                        LayerCache::StdBn { input, cache } if opts.stat_grads.is_none() => {
                            reference::batch_norm_backward(&g, cache, &norm.params, input)?
                        }
                        LayerCache::StdLn { input, caches } if opts.stat_grads.is_none() => {
                            reference::layer_norm_backward(&g, caches, &norm.params, input)?
                        }
                        LayerCache::StdBn { .. } | LayerCache::StdLn { .. } => {
                            return Err(invalid(format!(
                                "{}: statistic penalties need the js variant",
                                norm.name
                            )))
                        }
                        _ => return Err(Error::Shape(format!("layer {i}: cache kind mismatch"))),
                    };
                    grads[i] = Some((out.grad_gamma, out.grad_beta));
                    out.grad_x
                }
                (Layer::Relu, LayerCache::Relu { input }) => {
                    input.zip_map(&g, |x, d| if x > 0.0 { d } else { 0.0 })?
                }
                (Layer::AvgPool, LayerCache::AvgPool { shape }) => avg_pool_backward(&g, *shape)?,
                (layer, _) => {
                    return Err(Error::Shape(format!(
                        "layer {i} ({}): cache kind mismatch",
                        layer.label()
                    )))
                }
            };
        }
        Ok((grads, g))
    }

    /// Mutable views of each layer's two parameter vectors, aligned with
    /// `layers`.
    pub fn params_mut(&mut self) -> Vec<Option<(&mut Vec<f64>, &mut Vec<f64>)>> {
        self.layers
            .iter_mut()
            .map(|l| match l {
                Layer::Dense(lin) | Layer::Pointwise(lin) => Some((&mut lin.weight, &mut lin.bias)),
                Layer::Norm(n) => Some((&mut n.params.gamma, &mut n.params.beta)),
                Layer::Relu | Layer::AvgPool => None,
            })
            .collect()
    }
}

fn avg_pool(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    if hw == 0 {
        return Err(Error::EmptyReduction);
    }
    let out = x
        .data()
        .chunks(hw)
        .map(|px| px.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::from_vec([n, c, 1, 1], out)
}

fn avg_pool_backward(g: &Tensor, shape: [usize; 4]) -> Result<Tensor> {
    let hw = shape[2] * shape[3];
    let data = g
        .data()
        .iter()
        .flat_map(|&d| vec![d / hw as f64; hw])
        .collect();
    Tensor::from_vec(shape, data)
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [n, k, h, w] = logits.shape();
    if h * w != 1 || n != labels.len() {
        return Err(Error::Shape(format!(
            "logits {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::EmptyReduction);
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * k];
    for (s, (row, &label)) in logits.data().chunks(k).zip(labels).enumerate() {
        if label >= k {
            return Err(invalid(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = z.ln() + max;
        loss += log_z - row[label];
        for (j, v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            grad[s * k + j] = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, Tensor::from_vec([n, k, 1, 1], grad)?))
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.c();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}
