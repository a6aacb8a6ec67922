//! Synthetic classification data.
//!
//! Vector mode: class centers sit on a circle of radius `separation / 2` in
//! the first two feature dimensions (on a line when `feature_dim == 1`), so
//! two classes are exactly `separation` apart; every sample adds unit
//! Gaussian noise in all dimensions.
//!
//! Image mode: each class owns a Gaussian blob at its own spot on a ring
//! inside the image, with peak `separation` scaled per channel by a
//! class-specific cosine profile, on top of unit pixel noise.
//!
//! Samples are shuffled with the dataset seed and split 80/20 into
//! train/test.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::random::{substream, PolarNormal};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataMode {
    Vector {
        feature_dim: usize,
    },
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub classes: usize,
    pub mode: DataMode,
    pub samples_per_class: usize,
    pub separation: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Split {
        Split {
            x: self.x.gather_samples(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub train: Split,
    pub test: Split,
}

impl Dataset {
    /// Per-sample input shape `(c, h, w)`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let [_, c, h, w] = self.train.x.shape();
        [c, h, w]
    }
}

impl DataMode {
    pub fn sample_shape(&self) -> [usize; 3] {
        match *self {
            DataMode::Vector { feature_dim } => [feature_dim, 1, 1],
            DataMode::Image {
                channels,
                height,
                width,
            } => [channels, height, width],
        }
    }
}

/// Noise-free class prototype, flattened as `(c, h, w)`.
pub fn class_center(spec: &DatasetSpec, class: usize) -> Vec<f64> {
    let [c, h, w] = spec.mode.sample_shape();
    let k = spec.classes as f64;
    match spec.mode {
        DataMode::Vector { feature_dim } => {
            let mut center = vec![0.0; feature_dim];
            if feature_dim == 1 {
                center[0] = spec.separation * (class as f64 - (k - 1.0) / 2.0);
            } else {
                let angle = 2.0 * std::f64::consts::PI * class as f64 / k;
                let r = spec.separation / 2.0;
                center[0] = r * angle.cos();
                center[1] = r * angle.sin();
            }
            center
        }
        DataMode::Image { .. } => {
            let angle = 2.0 * std::f64::consts::PI * class as f64 / k;
            let cy = (h as f64 - 1.0) / 2.0 * (1.0 + 0.5 * angle.sin());
            let cx = (w as f64 - 1.0) / 2.0 * (1.0 + 0.5 * angle.cos());
            let width2 = (h.max(w) as f64 / 4.0).max(0.5).powi(2);
            let mut center = vec![0.0; c * h * w];
            for ch in 0..c {
                let gain = (angle + 2.0 * std::f64::consts::PI * ch as f64 / c as f64).cos();
                for i in 0..h {
                    for j in 0..w {
                        let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                        center[(ch * h + i) * w + j] =
                            gain * spec.separation * (-d2 / (2.0 * width2)).exp();
                    }
                }
            }
            center
        }
    }
}

pub fn make_synthetic_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(invalid("need at least 2 classes"));
    }
    if !(spec.separation >= 0.0 && spec.separation.is_finite()) {
        return Err(invalid(format!(
            "separation must be finite and >= 0, got {}",
            spec.separation
        )));
    }
    let [c, h, w] = spec.mode.sample_shape();
    if c * h * w == 0 {
        return Err(invalid("sample shape has a zero extent"));
    }
    let total = spec.classes * spec.samples_per_class;
    let n_train = total * 4 / 5;
    if n_train == 0 || n_train == total {
        return Err(invalid(format!("{total} samples cannot be split 80/20")));
    }

    let per = c * h * w;
    let mut rng = substream(spec.seed, 0);
    let mut normal = PolarNormal::new();
    let mut data = Vec::with_capacity(total * per);
    let mut labels = Vec::with_capacity(total);
    for class in 0..spec.classes {
        let center = class_center(spec, class);
        for _ in 0..spec.samples_per_class {
            data.extend(center.iter().map(|m| m + normal.sample(&mut rng)));
            labels.push(class);
        }
    }
    let all = Split {
        x: Tensor::from_vec([total, c, h, w], data)?,
        labels,
    };
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut substream(spec.seed, 1));
    Ok(Dataset {
        classes: spec.classes,
        train: all.subset(&order[..n_train]),
        test: all.subset(&order[n_train..]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vector_spec(classes: usize, dim: usize, sep: f64) -> DatasetSpec {
        DatasetSpec {
            classes,
            mode: DataMode::Vector { feature_dim: dim },
            samples_per_class: 100,
            separation: sep,
            seed: 4,
        }
    }

    #[test]
    fn two_class_centers_are_separation_apart() {
        let s = vector_spec(2, 2, 10.0);
        let a = class_center(&s, 0);
        let b = class_center(&s, 1);
        let d: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((d - 10.0).abs() < 1e-12);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = vector_spec(4, 3, 2.0);
        let a = make_synthetic_dataset(&s).unwrap();
        let b = make_synthetic_dataset(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 320);
        assert_eq!(a.test.len(), 80);
        assert_eq!(a.sample_shape(), [3, 1, 1]);
    }

    #[test]
    fn image_mode_shape() {
        let s = DatasetSpec {
            classes: 3,
            mode: DataMode::Image {
                channels: 2,
                height: 5,
                width: 5,
            },
            samples_per_class: 10,
            separation: 3.0,
            seed: 1,
        };
        let d = make_synthetic_dataset(&s).unwrap();
        assert_eq!(d.train.x.shape(), [24, 2, 5, 5]);
        assert_ne!(class_center(&s, 0), class_center(&s, 1));
    }

    #[test]
    fn zero_separation_collapses_centers() {
        let s = vector_spec(3, 2, 0.0);
        assert!(class_center(&s, 0).iter().all(|&v| v == 0.0));
        assert_eq!(class_center(&s, 0), class_center(&s, 2));
    }

    #[test]
    fn degenerate_specs() {
        assert!(make_synthetic_dataset(&vector_spec(1, 2, 1.0)).is_err());
        assert!(make_synthetic_dataset(&vector_spec(2, 0, 1.0)).is_err());
        let mut s = vector_spec(2, 2, 1.0);
        s.samples_per_class = 0;
        assert!(make_synthetic_dataset(&s).is_err());
        s.samples_per_class = 10;
        s.separation = -1.0;
        assert!(make_synthetic_dataset(&s).is_err());
    }
}
