use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

/// Seeded weight initializer. Values are drawn in `f64` so a given seed
/// produces the same weights (up to rounding) at either precision.
pub struct Initializer {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).unwrap(),
        }
    }

    /// Normal(0, 0.02) resampled until within two standard deviations.
    pub fn trunc_normal<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        self.trunc_normal_std(shape, INIT_STD)
    }

    /// As [`Initializer::trunc_normal`] with standard deviation `std`.
    pub fn trunc_normal_std<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let scale = std / INIT_STD;
        Tensor::from_fn(shape, |_| loop {
            let v = self.normal.sample(&mut self.rng);
            if v.abs() <= 2.0 * INIT_STD {
                break T::from_f64_lossy(v * scale);
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_stay_within_two_sigma() {
        let t: Tensor<f64> = Initializer::new(5).trunc_normal(&[1000]);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.data().iter().sum::<f64>() / 1000.0;
        assert!(mean.abs() < 0.003);
    }

    #[test]
    fn same_seed_same_values() {
        let a: Tensor<f32> = Initializer::new(9).trunc_normal(&[4, 4]);
        let b: Tensor<f32> = Initializer::new(9).trunc_normal(&[4, 4]);
        assert_eq!(a, b);
    }
}
