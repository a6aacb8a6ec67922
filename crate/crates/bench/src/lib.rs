//! Seeded inputs shared by the benchmarks.

use jsnorm::random::{seeded, PolarNormal};
use jsnorm::Tensor;

/// Standard normal tensor, shifted per channel so batch means differ.
pub fn normal_tensor(shape: [usize; 4], seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let mut normal = PolarNormal::new();
    let mut data = vec![0.0; shape.iter().product()];
    normal.fill(&mut rng, &mut data);
    let mut t = Tensor::from_vec(shape, data).expect("length matches shape");
    let hw = shape[2] * shape[3];
    let c = shape[1];
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v += ((i / hw) % c) as f64 * 0.1;
    }
    t
}

pub fn normal_vector(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    let mut normal = PolarNormal::new();
    let mut v = vec![0.0; len];
    normal.fill(&mut rng, &mut v);
    v
}
