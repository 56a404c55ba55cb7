#![allow(dead_code)]
#![allow(clippy::needless_range_loop)]

pub mod criteria;
pub mod grad;
pub mod oracle;

use lapx::annotations::PoseAnnotation;
use lapx::{Dims, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(dims: Dims, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(dims, -1.0, 1.0, rng)
}

/// Largest `|a − e| / max(1, |e|)` between a library result and an f64 reference:
/// absolute below unit magnitude, relative above it.
pub fn max_err(actual: &Tensor, expected: &[f64]) -> f64 {
    assert_eq!(actual.numel(), expected.len(), "element count");
    actual
        .data()
        .iter()
        .zip(expected)
        .map(|(&a, &e)| (a as f64 - e).abs() / e.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// A pose with `k` joints inside `[0, extent)²`, roughly a third of them unannotated.
pub fn random_pose(rng: &mut ChaCha8Rng, k: usize, extent: f32) -> PoseAnnotation {
    let joints = (0..k)
        .map(|_| {
            let v = if rng.random_bool(0.7) { 1.0 } else { 0.0 };
            [rng.random_range(0.0..extent), rng.random_range(0.0..extent), v]
        })
        .collect();
    PoseAnnotation::new(joints, rng.random_range(2.0..extent / 2.0))
}

/// `gt` with every joint displaced by up to `spread` pixels per axis.
pub fn jitter(rng: &mut ChaCha8Rng, gt: &PoseAnnotation, spread: f32) -> PoseAnnotation {
    let joints = gt
        .joints
        .iter()
        .map(|j| {
            [
                j[0] + rng.random_range(-spread..=spread),
                j[1] + rng.random_range(-spread..=spread),
                1.0,
            ]
        })
        .collect();
    PoseAnnotation::new(joints, gt.norm)
}
