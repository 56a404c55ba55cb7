//! Central finite-difference verification of [`Graph`] gradients.
//!
//! The function under test may return a tensor of any shape. It is reduced to
//! a scalar by a fixed random projection with unit norm, so every output
//! element contributes to the checked gradient.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::exec::Exec;
use crate::graph::{Graph, Mode, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub eps: f32,
    pub seed: u64,
    pub mode: Mode,
    /// Coordinates probed per tensor; larger tensors are subsampled.
    pub max_coords: usize,
    /// Also check trainable, unfrozen parameters of the store.
    pub check_params: bool,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            seed: 0,
            mode: Mode::Train,
            max_coords: 64,
            check_params: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Name of the tensor holding the worst coordinate.
    pub worst: String,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU kink or changed a max selection.
    pub skipped: usize,
}

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Max relative error over all input coordinates of `f`, without parameters.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], eps: f32) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let check = GradCheck {
        eps,
        max_coords: usize::MAX,
        check_params: false,
        ..GradCheck::default()
    };
    Ok(check.run(&ParamStore::new(), inputs, f)?.max_rel_error)
}

struct Probe {
    value: f64,
    signature: u64,
}

impl GradCheck {
    pub fn run<F>(&self, store: &ParamStore, inputs: &[Tensor], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);

        // Analytic pass.
        let mut g = Graph::new(store, self.mode);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let out_dims = g.dims(&out);
        let n = out_dims.iter().product::<usize>();
        let proj = Tensor::randn(out_dims, 1.0 / (n as f32).sqrt(), &mut rng);
        let base_sig = g.branch_signature();
        let pv = g.input(proj.clone());
        let prod = g.mul(&out, &pv)?;
        let loss = g.sum(&prod);
        let grads = g.backward(loss)?;

        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: String::new(),
            checked: 0,
            skipped: 0,
        };
        let mut work_inputs = inputs.to_vec();
        let mut work_store = store.clone();

        let probe = |ins: &[Tensor], st: &ParamStore| -> Result<Probe> {
            let mut g = Graph::new(st, self.mode);
            let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            let value = g
                .value(out)
                .data()
                .iter()
                .zip(proj.data())
                .map(|(&y, &r)| y as f64 * r as f64)
                .sum();
            Ok(Probe {
                value,
                signature: g.branch_signature(),
            })
        };

        // `step` is the realized distance between the two perturbed f32 values.
        let record = |report: &mut GradCheckReport, name: &str, analytic: f64, step: f64, plus: Probe, minus: Probe| {
            if plus.signature != base_sig || minus.signature != base_sig {
                report.skipped += 1;
                return;
            }
            let numeric = (plus.value - minus.value) / step;
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = name.to_string();
            }
        };

        for (i, v) in vars.iter().enumerate() {
            let zeros;
            let ga = match grads.input(*v) {
                Some(t) => t,
                None => {
                    zeros = Tensor::zeros(inputs[i].dims());
                    &zeros
                }
            };
            let coords = self.coords(inputs[i].numel(), &mut rng);
            for c in coords {
                let orig = work_inputs[i].data()[c];
                let (hi, lo) = (orig + self.eps, orig - self.eps);
                work_inputs[i].data_mut()[c] = hi;
                let plus = probe(&work_inputs, store)?;
                work_inputs[i].data_mut()[c] = lo;
                let minus = probe(&work_inputs, store)?;
                work_inputs[i].data_mut()[c] = orig;
                let step = hi as f64 - lo as f64;
                record(
                    &mut report,
                    &format!("input{i}"),
                    ga.data()[c] as f64,
                    step,
                    plus,
                    minus,
                );
            }
        }

        if self.check_params {
            let ids: Vec<_> = store
                .iter()
                .filter(|(_, p)| p.receives_updates())
                .map(|(id, _)| id)
                .collect();
            for id in ids {
                let Some(ga) = grads.param(id) else { continue };
                let name = store.get(id).name.clone();
                for c in self.coords(ga.numel(), &mut rng) {
                    let orig = work_store.tensor(id).data()[c];
                    let (hi, lo) = (orig + self.eps, orig - self.eps);
                    work_store.get_mut(id).tensor.data_mut()[c] = hi;
                    let plus = probe(inputs, &work_store)?;
                    work_store.get_mut(id).tensor.data_mut()[c] = lo;
                    let minus = probe(inputs, &work_store)?;
                    work_store.get_mut(id).tensor.data_mut()[c] = orig;
                    let step = hi as f64 - lo as f64;
                    record(&mut report, &name, ga.data()[c] as f64, step, plus, minus);
                }
            }
        }
        Ok(report)
    }

    fn coords(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if len <= self.max_coords {
            (0..len).collect()
        } else {
            let mut v = sample(rng, len, self.max_coords).into_vec();
            v.sort_unstable();
            v
        }
    }
}
