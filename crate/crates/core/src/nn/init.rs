//! Deterministic parameter initialization.

use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

/// Seeded source of initial weights. All draws are taken in f64 and
/// converted, so f32 and f64 models share the same bit stream.
pub struct ParamInit {
    rng: ChaCha20Rng,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        ParamInit {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn normal<F: Scalar>(&mut self, shape: &[usize], std: f64) -> ArrayD<F> {
        let n: usize = shape.iter().product();
        let data: Vec<F> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                F::from_real(z * std)
            })
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    pub fn he_normal<F: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> ArrayD<F> {
        self.normal(shape, (2.0 / fan_in as f64).sqrt())
    }
}
