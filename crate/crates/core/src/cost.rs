//! Flop-based cost model: forward, backward, recomputation and encode/decode
//! totals plus the runtime-overhead ratio. Dead mirrors are never executed,
//! so their cost is excluded from the recompute total.

use serde::Serialize;

use crate::graph::{Graph, NodeKind};
use crate::ops::Registry;
use crate::passes::EdgeShapes;

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CostReport {
    pub forward_flops: u64,
    pub backward_flops: u64,
    pub recompute_flops: u64,
    pub encode_decode_flops: u64,
    pub overhead_ratio: f64,
}

pub fn estimate(graph: &Graph, registry: &Registry, shapes: &EdgeShapes) -> CostReport {
    let mut forward = 0u64;
    let mut backward = 0u64;
    let mut recompute = 0u64;
    let mut encdec = 0u64;
    for n in graph.nodes() {
        let ins: Vec<_> = n.inputs.iter().map(|&e| shapes.shape(e).clone()).collect();
        let outs: Vec<_> = n.output_edges().map(|e| shapes.shape(e).clone()).collect();
        let c = registry.node_cost(&n.op, &ins, &outs, &n.attrs);
        match n.kind {
            NodeKind::Forward => forward += c,
            NodeKind::Gradient => backward += c,
            NodeKind::Mirror => recompute += c,
            NodeKind::DeadMirror => {}
            NodeKind::Encode | NodeKind::Decode => encdec += c,
        }
    }
    let denom = forward + backward;
    let overhead_ratio = if denom == 0 {
        0.0
    } else {
        (recompute + encdec) as f64 / denom as f64
    };
    CostReport {
        forward_flops: forward,
        backward_flops: backward,
        recompute_flops: recompute,
        encode_decode_flops: encdec,
        overhead_ratio,
    }
}
