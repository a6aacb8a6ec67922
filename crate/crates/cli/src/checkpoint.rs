//! On-disk network snapshots.
//!
//! A checkpoint is a single JSON document. Floats are written in shortest
//! round-trip form and parsed with correct rounding, so every value comes
//! back as the identical binary64.

use std::collections::HashMap;
use std::path::Path;

use jsnorm::norm::{NormKind, StatTracking};
use jsnorm::train::{Layer, Linear, NormLayer, NormVariant, ToyNet};
use jsnorm::{NormParams, RunningStats, ShrinkPolicy};
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported checkpoint format_version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("inconsistent checkpoint: {0}")]
    Inconsistent(String),
}

/// One normalization layer with its configuration and statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormEntry {
    pub name: String,
    pub kind: NormKind,
    pub variant: NormVariant,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    pub shrink_policy: ShrinkPolicy,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub count: u64,
    pub tracking: StatTracking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologyLayer {
    Dense { in_dim: usize, out_dim: usize },
    Pointwise { in_dim: usize, out_dim: usize },
    Norm { name: String },
    Relu,
    AvgPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub layers: Vec<TopologyLayer>,
}

/// Weights of the dense or pointwise layer at `layer` in the topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearParams {
    pub layer: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub topology: Topology,
    pub layers: Vec<NormEntry>,
    pub linear: Vec<LinearParams>,
}

impl Checkpoint {
    pub fn from_net(net: &ToyNet) -> Checkpoint {
        let mut topology = Vec::with_capacity(net.layers.len());
        let mut layers = Vec::new();
        let mut linear = Vec::new();
        for (i, layer) in net.layers.iter().enumerate() {
            match layer {
                Layer::Dense(lin) | Layer::Pointwise(lin) => {
                    topology.push(if matches!(layer, Layer::Dense(_)) {
                        TopologyLayer::Dense {
                            in_dim: lin.in_dim,
                            out_dim: lin.out_dim,
                        }
                    } else {
                        TopologyLayer::Pointwise {
                            in_dim: lin.in_dim,
                            out_dim: lin.out_dim,
                        }
                    });
                    linear.push(LinearParams {
                        layer: i,
                        weight: lin.weight.clone(),
                        bias: lin.bias.clone(),
                    });
                }
                Layer::Norm(n) => {
                    topology.push(TopologyLayer::Norm {
                        name: n.name.clone(),
                    });
                    layers.push(NormEntry {
                        name: n.name.clone(),
                        kind: n.kind,
                        variant: n.variant,
                        gamma: n.params.gamma.clone(),
                        beta: n.params.beta.clone(),
                        eps: n.params.eps,
                        momentum: n.params.momentum,
                        shrink_policy: n.policy.clone(),
                        running_mean: n.running.running_mean.clone(),
                        running_var: n.running.running_var.clone(),
                        count: n.running.count,
                        tracking: n.running.tracking,
                    });
                }
                Layer::Relu => topology.push(TopologyLayer::Relu),
                Layer::AvgPool => topology.push(TopologyLayer::AvgPool),
            }
        }
        Checkpoint {
            format_version: FORMAT_VERSION,
            topology: Topology {
                input_shape: net.input_shape,
                classes: net.classes,
                layers: topology,
            },
            layers,
            linear,
        }
    }

    pub fn into_net(self) -> Result<ToyNet, CheckpointError> {
        if self.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(self.format_version));
        }
        let bad = |msg: String| CheckpointError::Inconsistent(msg);
        let mut norms: HashMap<String, NormEntry> = HashMap::new();
        for entry in self.layers {
            if let Some(dup) = norms.insert(entry.name.clone(), entry) {
                return Err(bad(format!("norm layer {:?} listed twice", dup.name)));
            }
        }
        let mut linear: HashMap<usize, LinearParams> = HashMap::new();
        for p in self.linear {
            if linear.insert(p.layer, p).is_some() {
                return Err(bad("linear parameters listed twice for one layer".into()));
            }
        }
        let mut layers = Vec::with_capacity(self.topology.layers.len());
        for (i, t) in self.topology.layers.into_iter().enumerate() {
            layers.push(match t {
                TopologyLayer::Dense { in_dim, out_dim }
                | TopologyLayer::Pointwise { in_dim, out_dim } => {
                    let p = linear
                        .remove(&i)
                        .ok_or_else(|| bad(format!("no parameters for layer {i}")))?;
                    let lin = Linear {
                        in_dim,
                        out_dim,
                        weight: p.weight,
                        bias: p.bias,
                    };
                    if matches!(t, TopologyLayer::Dense { .. }) {
                        Layer::Dense(lin)
                    } else {
                        Layer::Pointwise(lin)
                    }
                }
                TopologyLayer::Norm { name } => {
                    let e = norms
                        .remove(&name)
                        .ok_or_else(|| bad(format!("no entry for norm layer {name:?}")))?;
                    Layer::Norm(NormLayer {
                        name: e.name,
                        kind: e.kind,
                        variant: e.variant,
                        params: NormParams {
                            gamma: e.gamma,
                            beta: e.beta,
                            eps: e.eps,
                            momentum: e.momentum,
                        },
                        policy: e.shrink_policy,
                        running: RunningStats {
                            running_mean: e.running_mean,
                            running_var: e.running_var,
                            count: e.count,
                            tracking: e.tracking,
                        },
                    })
                }
                TopologyLayer::Relu => Layer::Relu,
                TopologyLayer::AvgPool => Layer::AvgPool,
            });
        }
        if !norms.is_empty() || !linear.is_empty() {
            return Err(bad("entries that do not belong to any layer".into()));
        }
        let net = ToyNet {
            input_shape: self.topology.input_shape,
            classes: self.topology.classes,
            layers,
        };
        net.validate().map_err(|e| bad(e.to_string()))?;
        Ok(net)
    }

    pub fn to_json(&self) -> String {
        let mut s =
            serde_json::to_string_pretty(self).expect("checkpoint fields are always serializable");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Checkpoint, CheckpointError> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(ck.format_version));
        }
        Ok(ck)
    }
}

pub fn save(net: &ToyNet, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, Checkpoint::from_net(net).to_json()).map_err(|source| {
        CheckpointError::Io {
            path: path.display().to_string(),
            source,
        }
    })
}

pub fn load(path: &Path) -> Result<ToyNet, CheckpointError> {
    let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::from_json(&text)?.into_net()
}
