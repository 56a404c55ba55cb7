//! Peak live-activation estimate under a greedy schedule.

use std::collections::HashSet;

use super::report::trace_model;
use super::tracer::{NodeKind, TraceNode};
use crate::model::{Model, ModelError};
use crate::tensor::{numel, Dims};

/// A value in a dataflow graph: its size, producers and whether it is a final output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LiveNode {
    pub name: String,
    pub bytes: u64,
    pub inputs: Vec<usize>,
    pub output: bool,
}

/// Graph nodes from a trace. Parameter references are dropped; their memory
/// is accounted for separately.
pub fn live_nodes(trace: &[TraceNode], outputs: &[usize]) -> Vec<LiveNode> {
    let mut remap = vec![usize::MAX; trace.len()];
    let mut nodes = Vec::new();
    for (i, n) in trace.iter().enumerate() {
        if n.kind == NodeKind::Param {
            continue;
        }
        remap[i] = nodes.len();
        nodes.push(LiveNode {
            name: format!("{:06}:{}/{}", i, n.scope, n.op),
            bytes: 4 * numel(n.dims) as u64,
            inputs: n.inputs.iter().map(|&j| remap[j]).collect(),
            output: outputs.contains(&i),
        });
    }
    nodes
}

/// Peak bytes when nodes run one at a time and each value is freed after its
/// last consumer. At each step the ready node with the smallest net memory
/// change runs next, ties broken by name; outputs and unconsumed values stay live.
pub fn peak_live_bytes(nodes: &[LiveNode]) -> u64 {
    let n = nodes.len();
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, node) in nodes.iter().enumerate() {
        let uniq: HashSet<usize> = node.inputs.iter().copied().collect();
        for j in uniq {
            consumers[j].push(i);
        }
    }
    let mut pending_inputs: Vec<usize> = nodes
        .iter()
        .map(|nd| nd.inputs.iter().collect::<HashSet<_>>().len())
        .collect();
    let mut remaining_consumers: Vec<usize> = consumers.iter().map(Vec::len).collect();
    let mut ready: Vec<usize> = (0..n).filter(|&i| pending_inputs[i] == 0).collect();
    let (mut live, mut peak) = (0u64, 0u64);
    let freed_by = |i: usize, remaining: &[usize]| -> u64 {
        nodes[i]
            .inputs
            .iter()
            .collect::<HashSet<_>>()
            .into_iter()
            .filter(|&&j| remaining[j] == 1 && !nodes[j].output)
            .map(|&j| nodes[j].bytes)
            .sum()
    };
    while !ready.is_empty() {
        let pick = (0..ready.len())
            .min_by(|&a, &b| {
                let (ia, ib) = (ready[a], ready[b]);
                let da = nodes[ia].bytes as i128 - freed_by(ia, &remaining_consumers) as i128;
                let db = nodes[ib].bytes as i128 - freed_by(ib, &remaining_consumers) as i128;
                da.cmp(&db).then_with(|| nodes[ia].name.cmp(&nodes[ib].name))
            })
            .expect("ready is non-empty");
        let i = ready.swap_remove(pick);
        live += nodes[i].bytes;
        peak = peak.max(live);
        for j in nodes[i].inputs.iter().collect::<HashSet<_>>() {
            remaining_consumers[*j] -= 1;
            if remaining_consumers[*j] == 0 && !nodes[*j].output {
                live -= nodes[*j].bytes;
            }
        }
        for &c in &consumers[i] {
            pending_inputs[c] -= 1;
            if pending_inputs[c] == 0 {
                ready.push(c);
            }
        }
    }
    peak
}

/// Peak live activation bytes of one forward pass plus all parameter bytes.
pub fn activation_footprint(model: &Model, input_dims: Dims) -> Result<u64, ModelError> {
    let (trace, outputs) = trace_model(model, input_dims)?;
    Ok(peak_live_bytes(&live_nodes(&trace, &outputs)) + model.params.total_bytes() as u64)
}
