//! Seeded parameter registration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::exec::BnRefs;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Registers parameters into a store, drawing random weights from one seeded stream.
pub struct Initializer<'s> {
    store: &'s mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'s> Initializer<'s> {
    pub fn new(store: &'s mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Convolution weight `(cout, cin/groups, kh, kw)` drawn from
    /// N(0, 2 / (cout·kh·kw / groups)).
    pub fn conv_weight(&mut self, name: &str, dims: [usize; 4], groups: usize) -> Result<ParamId> {
        let [cout, _, kh, kw] = dims;
        let fan_out = (cout * kh * kw / groups).max(1) as f32;
        let t = Tensor::randn(dims, (2.0 / fan_out).sqrt(), &mut self.rng);
        self.store.add(name, &dims, t, true)
    }

    /// Convolution weight drawn from N(0, std²).
    pub fn conv_weight_std(&mut self, name: &str, dims: [usize; 4], std: f32) -> Result<ParamId> {
        let t = Tensor::randn(dims, std, &mut self.rng);
        self.store.add(name, &dims, t, true)
    }

    /// Per-channel vector with logical shape `[c]`, stored as `(1, c, 1, 1)`.
    pub fn channel_vec(&mut self, name: &str, c: usize, value: f32, trainable: bool) -> Result<ParamId> {
        self.store.add(name, &[c], Tensor::full([1, c, 1, 1], value), trainable)
    }

    /// Scalar with logical shape `[]`.
    pub fn scalar(&mut self, name: &str, value: f32) -> Result<ParamId> {
        self.store.add(name, &[], Tensor::scalar(value), true)
    }

    pub fn batchnorm(&mut self, prefix: &str, c: usize) -> Result<BnRefs> {
        Ok(BnRefs {
            gamma: self.channel_vec(&format!("{prefix}.weight"), c, 1.0, true)?,
            beta: self.channel_vec(&format!("{prefix}.bias"), c, 0.0, true)?,
            running_mean: self.channel_vec(&format!("{prefix}.running_mean"), c, 0.0, false)?,
            running_var: self.channel_vec(&format!("{prefix}.running_var"), c, 1.0, false)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let build = |seed| {
            let mut s = ParamStore::new();
            let mut init = Initializer::new(&mut s, seed);
            init.conv_weight("w", [4, 2, 3, 3], 1).unwrap();
            s
        };
        assert_eq!(build(5), build(5));
        assert_ne!(build(5), build(6));
    }

    #[test]
    fn batchnorm_buffers_are_not_trainable() {
        let mut s = ParamStore::new();
        Initializer::new(&mut s, 0).batchnorm("bn", 3).unwrap();
        assert_eq!(s.trainable_count(), 6);
        assert_eq!(s.len(), 4);
        assert_eq!(s.get(s.find("bn.running_var").unwrap()).tensor.data(), &[1.0; 3]);
    }

    #[test]
    fn fan_out_std() {
        let mut s = ParamStore::new();
        let id = Initializer::new(&mut s, 1).conv_weight("w", [64, 32, 3, 3], 1).unwrap();
        let d = s.tensor(id).data();
        let var = d.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / d.len() as f64;
        let expected = 2.0 / (64.0 * 9.0);
        assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
    }
}
