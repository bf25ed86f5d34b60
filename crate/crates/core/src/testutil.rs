use rand::Rng as _;

use crate::real::Real;
use crate::rng::{rng_for, Rng, STREAM_TESTS};
use crate::tensor::Tensor;

pub fn rng(seed: u64) -> Rng {
    rng_for(seed, STREAM_TESTS, 0)
}

pub fn uniform<T: Real>(rng: &mut Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(dims, |_| T::from_f64(rng.gen_range(lo..hi))).unwrap()
}
