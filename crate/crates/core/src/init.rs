use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensorcore::Tensor;

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub(crate) fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape has positive extents")
}
