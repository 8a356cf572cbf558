//! Minimal reverse-mode autodiff over `ndarray` tensors.
//!
//! Every model in this crate (flows, encoders, latent generators, the
//! perceptual feature pyramid) evaluates through one [`Tape`], in both
//! training and inference; inference simply runs with gradients disabled.
//! Values are `f32`; reductions accumulate in `f64` before narrowing.

mod adam;
mod layers;
mod ops;
mod ops_spatial;
mod params;
mod tape;

pub use adam::{clip_global_norm, Adam};
pub use layers::{Conv2d, DenseBlock, Linear};
pub use params::{ParamId, ParamStore, TapeBinding};
pub use tape::{Gradients, Tape, Var};

/// Array-level space-to-depth by 2 (same layout as [`Tape::squeeze2`]).
pub fn squeeze2_owned(x: &ndarray::ArrayD<f32>) -> ndarray::ArrayD<f32> {
    ops_spatial::squeeze2_arr(x)
}

/// Array-level depth-to-space by 2.
pub fn unsqueeze2_owned(x: &ndarray::ArrayD<f32>) -> ndarray::ArrayD<f32> {
    ops_spatial::unsqueeze2_arr(x)
}

use ndarray::ArrayD;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// He-style normal init for a weight tensor with the given fan-in.
pub fn kaiming<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
    let std = (2.0 / fan_in as f32).sqrt();
    ArrayD::from_shape_fn(shape, |_| {
        let v: f32 = StandardNormal.sample(rng);
        v * std
    })
}

/// Max of |x| over an array; 0 for empty.
pub fn max_abs(a: &ArrayD<f32>) -> f32 {
    a.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
}

/// True iff every entry is finite.
pub fn all_finite(a: &ArrayD<f32>) -> bool {
    a.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod gradcheck_tests;
