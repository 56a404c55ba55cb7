//! Per-layer parameter, MAC and activation tables.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::Serialize;

use super::tracer::{NodeKind, TVar, TraceNode, Tracer};
use crate::model::{Model, ModelError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Dims};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRow {
    pub name: String,
    pub param_count: u64,
    pub macs: u64,
    /// Batch-norm, activation, pooling and attention element operations.
    pub elem_ops: u64,
    pub output_dims: Dims,
    pub activation_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Totals {
    pub params: u64,
    /// Non-trainable buffers such as running statistics, not included in `params`.
    pub buffers: u64,
    pub macs: u64,
    /// `2 × macs`.
    pub flops: u64,
    pub elem_ops: u64,
    pub activation_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyReport {
    pub rows: Vec<LayerRow>,
    pub totals: Totals,
    pub input_dims: Dims,
    pub config_hash: String,
}

/// Groups traced operations into rows by scope, in order of first appearance.
///
/// Each parameter is attributed to the first row that uses it, so shared
/// parameters are never counted twice.
pub fn rows_from_trace(nodes: &[TraceNode], store: &ParamStore) -> Vec<LayerRow> {
    let mut rows: Vec<LayerRow> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut seen: BTreeSet<ParamId> = BTreeSet::new();
    for n in nodes.iter().filter(|n| n.kind == NodeKind::Op) {
        let i = *index.entry(n.scope.as_str()).or_insert_with(|| {
            rows.push(LayerRow {
                name: n.scope.clone(),
                param_count: 0,
                macs: 0,
                elem_ops: 0,
                output_dims: n.dims,
                activation_bytes: 0,
            });
            rows.len() - 1
        });
        let row = &mut rows[i];
        for &p in &n.params {
            if seen.insert(p) && store.get(p).trainable {
                row.param_count += store.get(p).numel() as u64;
            }
        }
        row.macs += n.macs;
        row.elem_ops += n.elem_ops;
        row.output_dims = n.dims;
        row.activation_bytes = 4 * numel(n.dims) as u64;
    }
    rows
}

impl EfficiencyReport {
    pub fn new(rows: Vec<LayerRow>, store: &ParamStore, input_dims: Dims, config_hash: String) -> Self {
        let macs = rows.iter().map(|r| r.macs).sum::<u64>();
        let totals = Totals {
            params: rows.iter().map(|r| r.param_count).sum(),
            buffers: store
                .iter()
                .filter(|(_, p)| !p.trainable)
                .map(|(_, p)| p.numel() as u64)
                .sum(),
            macs,
            flops: 2 * macs,
            elem_ops: rows.iter().map(|r| r.elem_ops).sum(),
            activation_bytes: rows.iter().map(|r| r.activation_bytes).sum(),
        };
        Self {
            rows,
            totals,
            input_dims,
            config_hash,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table with a totals line.
    pub fn to_text(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<name_w$}  {:>10}  {:>14}  {:>12}  {:>20}  {:>12}",
            "layer", "params", "MACs", "elem ops", "output", "act bytes"
        );
        for r in &self.rows {
            let d = format!(
                "{}x{}x{}x{}",
                r.output_dims[0], r.output_dims[1], r.output_dims[2], r.output_dims[3]
            );
            let _ = writeln!(
                s,
                "{:<name_w$}  {:>10}  {:>14}  {:>12}  {:>20}  {:>12}",
                r.name, r.param_count, r.macs, r.elem_ops, d, r.activation_bytes
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            s,
            "total: {} params ({:.3}M), {} buffers, {} MACs ({:.3}G), {} FLOPs, {} elem ops",
            t.params,
            t.params as f64 / 1e6,
            t.buffers,
            t.macs,
            t.macs as f64 / 1e9,
            t.flops,
            t.elem_ops
        );
        let [n, c, h, w] = self.input_dims;
        let _ = writeln!(s, "input: {n}x{c}x{h}x{w}, config {}", self.config_hash);
        s
    }
}

/// `model` with its input extent replaced, after validating the new config.
pub fn with_input_hw(model: &Model, hw: [usize; 2]) -> Result<Model, ModelError> {
    let mut m = model.clone();
    m.config.input_hw = hw;
    m.config.validate()?;
    Ok(m)
}

/// Records one forward pass of `model` on `input_dims` (N, 3, H, W).
pub fn trace_model(model: &Model, input_dims: Dims) -> Result<(Vec<TraceNode>, Vec<usize>), ModelError> {
    let m = if [input_dims[2], input_dims[3]] == model.config.input_hw {
        None
    } else {
        Some(with_input_hw(model, [input_dims[2], input_dims[3]])?)
    };
    let m = m.as_ref().unwrap_or(model);
    m.check_input(input_dims)?;
    let mut t = Tracer::new(&m.params);
    let x = t.input_dims(input_dims);
    let outs = m.forward(&mut t, &x)?;
    Ok((t.nodes, outs.iter().map(|v| v.index()).collect()))
}

/// Parameter columns at the configured input size, batch 1.
pub fn count_params(model: &Model) -> EfficiencyReport {
    count_flops(model, model.input_dims(1)).expect("configured input is valid")
}

/// Full per-layer report for `input_dims`.
pub fn count_flops(model: &Model, input_dims: Dims) -> Result<EfficiencyReport, ModelError> {
    let (nodes, _) = trace_model(model, input_dims)?;
    let rows = rows_from_trace(&nodes, &model.params);
    Ok(EfficiencyReport::new(
        rows,
        &model.params,
        input_dims,
        model.config.hash(),
    ))
}

/// Runs an arbitrary layer function under a tracer and reports it.
pub fn report_for<F>(store: &ParamStore, input_dims: Dims, f: F) -> Result<EfficiencyReport, crate::TensorError>
where
    F: FnOnce(&mut Tracer<'_>, &TVar) -> Result<TVar, crate::TensorError>,
{
    let mut t = Tracer::new(store);
    let x = t.input_dims(input_dims);
    f(&mut t, &x)?;
    let rows = rows_from_trace(&t.nodes, store);
    Ok(EfficiencyReport::new(rows, store, input_dims, String::new()))
}
