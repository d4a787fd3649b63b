use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Float, Tensor};

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [fan_in, fan_out] => (*fan_in, *fan_out),
        [fan_in, fan_out, rest @ ..] => {
            let field: usize = rest.iter().product();
            (fan_in * field, fan_out * field)
        }
    }
}

/// Glorot uniform half-width `sqrt(6 / (fan_in + fan_out))`. For a 2-D
/// shape `[in, out]` the fans are the two dims.
pub fn xavier_bound(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = fans(shape);
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn xavier_init<T: Float>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    xavier_init_with(shape, &mut rng)
}

pub fn xavier_init_with<T: Float, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    assert!(!shape.is_empty(), "xavier_init needs at least one dimension");
    let bound = xavier_bound(shape);
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("positive dims")
}
