//! Seeded parameter initialization.

use crate::Real;
use ndarray::{Array, Dimension};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Kaiming-He normal initialization: N(0, sqrt(2 / fan_in)).
///
/// Samples are drawn in f64 and narrowed to `T`, so a given seed produces
/// the same stream regardless of the element type.
pub fn kaiming_normal<T: Real, D: Dimension>(
    shape: impl ndarray::ShapeBuilder<Dim = D>,
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Array<T, D> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    Array::from_shape_simple_fn(shape, || T::of(dist.sample(rng)))
}

/// Uniform samples in [lo, hi].
pub fn uniform<T: Real, D: Dimension>(
    shape: impl ndarray::ShapeBuilder<Dim = D>,
    lo: f64,
    hi: f64,
    rng: &mut ChaCha8Rng,
) -> Array<T, D> {
    Array::from_shape_simple_fn(shape, || T::of(rng.random_range(lo..=hi)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn same_seed_same_weights_across_types() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a: ndarray::Array2<f32> = kaiming_normal((3, 4), 4, &mut r1);
        let b: ndarray::Array2<f64> = kaiming_normal((3, 4), 4, &mut r2);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(*x, *y as f32);
        }
    }

    #[test]
    fn uniform_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: ndarray::Array1<f64> = uniform(1000, -0.5, 0.5, &mut rng);
        assert!(a.iter().all(|v| (-0.5..=0.5).contains(v)));
    }
}
