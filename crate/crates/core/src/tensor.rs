//! Dense 4-D float64 tensor with NCHW semantics.
//!
//! Storage is a flat row-major buffer in `(n, c, h, w)` order. Every reduction
//! walks the buffer left to right by flat index and accumulates each output
//! slot in that order with plain summation, so results are deterministic and
//! reproducible bit-for-bit on a given platform.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    N,
    C,
    H,
    W,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::N, Axis::C, Axis::H, Axis::W];

    pub fn index(self) -> usize {
        match self {
            Axis::N => 0,
            Axis::C => 1,
            Axis::H => 2,
            Axis::W => 3,
        }
    }
}

/// Per-channel statistic vector (one entry per channel of the source tensor).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChannelVector(pub Vec<f64>);

impl ChannelVector {
    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ChannelVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for ChannelVector {
    fn from(v: Vec<f64>) -> Self {
        ChannelVector(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::filled(shape, 0.0)
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn c(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    /// Number of elements per sample (`c * h * w`).
    #[inline]
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_shape(other.shape)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_shape(&self, shape: [usize; 4]) -> Result<()> {
        if self.shape == shape {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "expected {:?}, got {:?}",
                shape, self.shape
            )))
        }
    }

    pub fn reshape(self, shape: [usize; 4]) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data)
    }

    /// Copy of samples `range` as a new tensor.
    pub fn slice_samples(&self, range: std::ops::Range<usize>) -> Result<Tensor> {
        if range.start > range.end || range.end > self.n() {
            return Err(Error::Shape(format!(
                "sample range {:?} out of bounds for batch {}",
                range,
                self.n()
            )));
        }
        let per = self.sample_len();
        let mut shape = self.shape;
        shape[0] = range.len();
        Ok(Tensor {
            shape,
            data: self.data[range.start * per..range.end * per].to_vec(),
        })
    }

    /// Gather samples by index (used for minibatching).
    pub fn gather_samples(&self, indices: &[usize]) -> Tensor {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let mut shape = self.shape;
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    /// Stack tensors along the batch axis.
    pub fn concat_samples(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("cannot concatenate zero tensors"))?;
        let mut shape = first.shape;
        shape[0] = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    p.shape, first.shape
                )));
            }
            shape[0] += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape, data })
    }

    fn reduced_shape(&self, axes: &[Axis]) -> Result<([usize; 4], [bool; 4], usize)> {
        let mut reduce = [false; 4];
        for a in axes {
            reduce[a.index()] = true;
        }
        let mut out = self.shape;
        let mut count = 1usize;
        for (i, &r) in reduce.iter().enumerate() {
            if r {
                count *= self.shape[i];
                out[i] = 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyReduction);
        }
        Ok((out, reduce, count))
    }

    /// Visit every element in flat order with the flat index of its reduced slot.
    fn for_each_reduced(&self, out: [usize; 4], reduce: [bool; 4], mut f: impl FnMut(usize, f64)) {
        let [sn, sc, sh, sw] = self.shape;
        let pick = |r: bool, i: usize| if r { 0 } else { i };
        let mut flat = 0;
        for n in 0..sn {
            for c in 0..sc {
                for h in 0..sh {
                    for w in 0..sw {
                        let o = ((pick(reduce[0], n) * out[1] + pick(reduce[1], c)) * out[2]
                            + pick(reduce[2], h))
                            * out[3]
                            + pick(reduce[3], w);
                        f(o, self.data[flat]);
                        flat += 1;
                    }
                }
            }
        }
    }

    /// Arithmetic mean over `axes`; reduced axes are kept with extent 1.
    pub fn reduce_mean(&self, axes: &[Axis]) -> Result<Tensor> {
        let (out, reduce, count) = self.reduced_shape(axes)?;
        let mut sums = vec![0.0; out.iter().product()];
        self.for_each_reduced(out, reduce, |o, v| sums[o] += v);
        let count = count as f64;
        for s in &mut sums {
            *s /= count;
        }
        Ok(Tensor {
            shape: out,
            data: sums,
        })
    }

    /// Biased variance (divides by the element count) around a precomputed mean.
    pub fn reduce_var(&self, axes: &[Axis], mean: &Tensor) -> Result<Tensor> {
        let (out, reduce, count) = self.reduced_shape(axes)?;
        mean.expect_shape(out)?;
        let mut sums = vec![0.0; out.iter().product()];
        self.for_each_reduced(out, reduce, |o, v| {
            let d = v - mean.data[o];
            sums[o] += d * d;
        });
        let count = count as f64;
        for s in &mut sums {
            *s /= count;
        }
        Ok(Tensor {
            shape: out,
            data: sums,
        })
    }

    /// `y = scale[k] * x + shift[k]` where `k` indexes the `per` axis.
    pub fn broadcast_affine(&self, scale: &[f64], shift: &[f64], per: Axis) -> Result<Tensor> {
        let extent = self.shape[per.index()];
        if scale.len() != extent || shift.len() != extent {
            return Err(Error::Shape(format!(
                "affine over {:?} needs {} entries, got scale {} / shift {}",
                per,
                extent,
                scale.len(),
                shift.len()
            )));
        }
        let [sn, sc, sh, sw] = self.shape;
        let mut data = Vec::with_capacity(self.data.len());
        let mut flat = 0;
        for n in 0..sn {
            for c in 0..sc {
                for h in 0..sh {
                    for w in 0..sw {
                        let k = [n, c, h, w][per.index()];
                        data.push(scale[k] * self.data[flat] + shift[k]);
                        flat += 1;
                    }
                }
            }
        }
        Ok(Tensor {
            shape: self.shape,
            data,
        })
    }

    /// Interpret a `(1, c, 1, 1)` tensor as a channel vector.
    pub fn to_channel_vector(&self) -> Result<ChannelVector> {
        if self.shape[0] != 1 || self.shape[2] != 1 || self.shape[3] != 1 {
            return Err(Error::Shape(format!(
                "expected (1, c, 1, 1), got {:?}",
                self.shape
            )));
        }
        Ok(ChannelVector(self.data.clone()))
    }
}

/// `sum(v_i^2)`, the squared L2 norm.
pub fn sum_squares(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, &x| acc + x * x)
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Biased variance of a vector's components around `mean`.
pub fn biased_var(v: &[f64], mean: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().fold(0.0, |acc, &x| acc + (x - mean) * (x - mean)) / v.len() as f64
}
