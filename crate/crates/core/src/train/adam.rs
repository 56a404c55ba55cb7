//! Bias-corrected Adam without weight decay.

use crate::model::{TensorFile, WeightsError};
use crate::params::ParamStore;

pub const ADAM_PREFIX: &str = "adam.";

/// Moments per parameter (indexed like the store) and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |p: &crate::params::ParamTensor| {
            if p.trainable {
                vec![0.0; p.numel()]
            } else {
                Vec::new()
            }
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.iter().map(|(_, p)| zeros(p)).collect(),
            v: store.iter().map(|(_, p)| zeros(p)).collect(),
        }
    }

    pub fn first_moment(&self, index: usize) -> &[f32] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f32] {
        &self.v[index]
    }

    /// Appends `adam.step`, `adam.m/<name>` and `adam.v/<name>` entries.
    pub fn write_sidecar(&self, store: &ParamStore, file: &mut TensorFile) {
        file.push(format!("{ADAM_PREFIX}step"), vec![2], split_step(self.step).to_vec());
        for (id, p) in store.iter() {
            if !p.trainable {
                continue;
            }
            let i = id.index();
            file.push(format!("{ADAM_PREFIX}m/{}", p.name), p.shape.clone(), self.m[i].clone());
            file.push(format!("{ADAM_PREFIX}v/{}", p.name), p.shape.clone(), self.v[i].clone());
        }
    }

    /// Restores state written by [`AdamState::write_sidecar`].
    pub fn read_sidecar(store: &ParamStore, file: &TensorFile) -> Result<Self, WeightsError> {
        let mut state = Self::new(store);
        let name = format!("{ADAM_PREFIX}step");
        let step = file
            .get(&name)
            .ok_or_else(|| WeightsError::MissingTensor(name.clone()))?;
        if step.data.len() != 2 {
            return Err(WeightsError::ShapeMismatch {
                name,
                expected: vec![2],
                actual: step.shape.clone(),
            });
        }
        state.step = join_step([step.data[0], step.data[1]]);
        for (id, p) in store.iter() {
            if !p.trainable {
                continue;
            }
            for (kind, slot) in [("m", &mut state.m), ("v", &mut state.v)] {
                let name = format!("{ADAM_PREFIX}{kind}/{}", p.name);
                let t = file
                    .get(&name)
                    .ok_or_else(|| WeightsError::MissingTensor(name.clone()))?;
                if t.shape != p.shape {
                    return Err(WeightsError::ShapeMismatch {
                        name,
                        expected: p.shape.clone(),
                        actual: t.shape.clone(),
                    });
                }
                slot[id.index()] = t.data.clone();
            }
        }
        Ok(state)
    }
}

// The step is stored as two 24-bit halves so it survives f32 exactly.
fn split_step(step: u64) -> [f32; 2] {
    [(step >> 24) as f32, (step & 0xff_ffff) as f32]
}

fn join_step(parts: [f32; 2]) -> u64 {
    ((parts[0] as u64) << 24) | parts[1] as u64
}

/// One update of every parameter that holds a gradient and receives updates.
///
/// Frozen and untrainable parameters are skipped; the step counter always advances.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1 as f64, state.beta2 as f64);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (id, p) in store.iter_mut() {
        if !p.receives_updates() {
            continue;
        }
        let Some(grad) = p.tensor.grad.take() else { continue };
        let i = id.index();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &g), m), v) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(&grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = state.beta1 * *m + (1.0 - state.beta1) * g;
            *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
            let mhat = *m as f64 / c1;
            let vhat = *v as f64 / c2;
            *w -= (lr * mhat / (vhat.sqrt() + state.eps as f64)) as f32;
        }
    }
}
