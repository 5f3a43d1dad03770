//! Memory allocation planning: serialize the graph into an execution
//! schedule, run exact liveness over it, and report peak footprint with
//! category and layer-tag breakdowns.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::graph::{EdgeRef, Graph, GraphError, NodeId, NodeKind};
use crate::ops::Registry;
use crate::passes::EdgeShapes;

/// Serialized execution order: forward nodes first, then the backward region
/// (gradients, mirrors, decodes) in dependency order. Mirror chains are
/// emitted just before their earliest gradient consumer so recompute buffers
/// stay transient.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub steps: Vec<NodeId>,
    /// Index of the first backward step (== steps.len() for forward-only graphs).
    pub boundary: usize,
}

fn is_backward(kind: NodeKind) -> bool {
    matches!(
        kind,
        NodeKind::Gradient | NodeKind::Mirror | NodeKind::DeadMirror | NodeKind::Decode
    )
}

pub fn build_schedule(graph: &Graph) -> Result<Schedule, GraphError> {
    let topo = graph.topo_order()?;
    let mut steps: Vec<NodeId> = Vec::with_capacity(topo.len());
    let mut scheduled: BTreeSet<NodeId> = BTreeSet::new();
    for &id in &topo {
        if !is_backward(graph.node(id).kind) {
            steps.push(id);
            scheduled.insert(id);
        }
    }
    let boundary = steps.len();

    // Emit a backward node after all of its backward ancestors; mirrors and
    // decodes are pulled in on demand by their first gradient consumer.
    let mut emit = |root: NodeId, steps: &mut Vec<NodeId>, scheduled: &mut BTreeSet<NodeId>| {
        if scheduled.contains(&root) {
            return;
        }
        let mut stack = vec![root];
        while let Some(&top) = stack.last() {
            if scheduled.contains(&top) {
                stack.pop();
                continue;
            }
            let mut ready = true;
            for &e in graph.node(top).inputs.iter().rev() {
                if is_backward(graph.node(e.node).kind) && !scheduled.contains(&e.node) {
                    stack.push(e.node);
                    ready = false;
                }
            }
            if ready {
                steps.push(top);
                scheduled.insert(top);
                stack.pop();
            }
        }
    };

    // Gradient construction walks the forward graph in reverse, so ascending
    // node id is the natural backward execution order; iterating topologically
    // instead would hoist every ready gradient seed to the front and inflate
    // transient liveness.
    let mut grad_ids: Vec<NodeId> = graph
        .nodes()
        .filter(|n| n.kind == NodeKind::Gradient)
        .map(|n| n.id)
        .collect();
    grad_ids.sort_unstable();
    for id in grad_ids {
        emit(id, &mut steps, &mut scheduled);
    }
    // Stragglers: mirrors or dead mirrors nothing consumed (pre-elimination).
    for &id in &topo {
        emit(id, &mut steps, &mut scheduled);
    }
    Ok(Schedule { steps, boundary })
}

/// Last schedule step that reads each edge; graph outputs never die.
pub fn last_use_steps(graph: &Graph, schedule: &Schedule) -> BTreeMap<EdgeRef, usize> {
    let step_of: BTreeMap<NodeId, usize> = schedule
        .steps
        .iter()
        .enumerate()
        .map(|(t, &id)| (id, t))
        .collect();
    let mut last: BTreeMap<EdgeRef, usize> = BTreeMap::new();
    for &id in &schedule.steps {
        let t = step_of[&id];
        for &e in &graph.node(id).inputs {
            let entry = last.entry(e).or_insert(0);
            *entry = (*entry).max(t);
        }
    }
    for &e in &graph.outputs {
        last.insert(e, usize::MAX);
    }
    last
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct CategoryBytes {
    pub feature_maps: u64,
    pub weights: u64,
    pub workspace: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MemoryReport {
    pub peak_bytes: u64,
    pub peak_step: usize,
    pub by_category: CategoryBytes,
    /// Feature-map bytes live at the peak step, grouped by producer tag.
    pub by_tag: BTreeMap<String, u64>,
    /// Bytes of non-weight edges live across the forward/backward boundary.
    pub stashed_feature_map_bytes: u64,
    pub timeline: Vec<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("edge {0:?} has no inferred shape")]
    MissingShape(EdgeRef),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

struct EdgeLife {
    edge: EdgeRef,
    bytes: u64,
    produce: usize,
    last: usize, // usize::MAX while an output
}

fn edge_lives(
    graph: &Graph,
    shapes: &EdgeShapes,
    schedule: &Schedule,
) -> Result<Vec<EdgeLife>, PlanError> {
    let last = last_use_steps(graph, schedule);
    let step_of: BTreeMap<NodeId, usize> = schedule
        .steps
        .iter()
        .enumerate()
        .map(|(t, &id)| (id, t))
        .collect();
    let mut lives = Vec::new();
    for &id in &schedule.steps {
        // Trainable placeholders are charged via the weight multiplier.
        if graph.placeholder_info(id).map_or(false, |i| i.trainable) {
            continue;
        }
        let n = graph.node(id);
        for e in n.output_edges() {
            let bytes = shapes
                .get(e)
                .map(|(s, d)| d.tensor_bytes(s.elems()))
                .ok_or(PlanError::MissingShape(e))?;
            lives.push(EdgeLife {
                edge: e,
                bytes,
                produce: step_of[&id],
                last: last.get(&e).copied().unwrap_or(step_of[&id]),
            });
        }
    }
    Ok(lives)
}

fn weight_constant(graph: &Graph, weight_multiplier: u64) -> u64 {
    graph
        .placeholder_ids()
        .filter_map(|id| graph.placeholder_info(id))
        .filter(|i| i.trainable)
        .map(|i| i.dtype.tensor_bytes(i.shape.elems()) * weight_multiplier)
        .sum()
}

fn workspace_at(graph: &Graph, registry: &Registry, shapes: &EdgeShapes, id: NodeId) -> u64 {
    let n = graph.node(id);
    registry
        .lookup(&n.op)
        .and_then(|d| d.workspace_fn)
        .map(|f| {
            let ins: Vec<_> = n.inputs.iter().map(|&e| shapes.shape(e).clone()).collect();
            let outs: Vec<_> = n.output_edges().map(|e| shapes.shape(e).clone()).collect();
            f(&ins, &outs, &n.attrs)
        })
        .unwrap_or(0)
}

/// Exact liveness plan: every edge is allocated at its producer step and
/// freed after its last consumer; trainable placeholders persist for the
/// whole schedule at `bytes * weight_multiplier`; per-node workspace is live
/// only during its own step.
pub fn plan(
    graph: &Graph,
    registry: &Registry,
    shapes: &EdgeShapes,
    schedule: &Schedule,
    weight_multiplier: u64,
) -> Result<MemoryReport, PlanError> {
    let n = schedule.steps.len();
    let weights = weight_constant(graph, weight_multiplier);
    let lives = edge_lives(graph, shapes, schedule)?;

    let mut delta = vec![0i128; n + 1];
    for l in &lives {
        delta[l.produce] += l.bytes as i128;
        let end = if l.last == usize::MAX { n - 1 } else { l.last };
        if end + 1 <= n {
            delta[end + 1] -= l.bytes as i128;
        }
    }
    let mut timeline = Vec::with_capacity(n);
    let mut acc: i128 = 0;
    for (t, &id) in schedule.steps.iter().enumerate() {
        acc += delta[t];
        let ws = workspace_at(graph, registry, shapes, id);
        timeline.push(weights + acc as u64 + ws);
    }

    let (peak_step, peak_bytes) = timeline
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(t, &b)| (t, b))
        .unwrap_or((0, weights));

    let peak_ws = if n > 0 {
        workspace_at(graph, registry, shapes, schedule.steps[peak_step])
    } else {
        0
    };
    let mut by_tag: BTreeMap<String, u64> = BTreeMap::new();
    for l in &lives {
        let end = if l.last == usize::MAX { n - 1 } else { l.last };
        if l.produce <= peak_step && peak_step <= end {
            let tag = graph.node(l.edge.node).tag.clone();
            *by_tag.entry(tag).or_insert(0) += l.bytes;
        }
    }

    let outputs = graph.output_set();
    let stashed: u64 = lives
        .iter()
        .filter(|l| {
            !outputs.contains(&l.edge)
                && l.produce < schedule.boundary
                && (l.last == usize::MAX || l.last >= schedule.boundary)
                && schedule.boundary < n
        })
        .map(|l| l.bytes)
        .sum();

    Ok(MemoryReport {
        peak_bytes,
        peak_step,
        by_category: CategoryBytes {
            feature_maps: peak_bytes - weights - peak_ws,
            weights,
            workspace: peak_ws,
        },
        by_tag,
        stashed_feature_map_bytes: stashed,
        timeline,
    })
}

/// Brute-force oracle: per step, scan every edge and re-derive liveness from
/// scratch (a consumer at this step or later, or an output, keeps it live).
pub fn live_bytes_oracle(
    graph: &Graph,
    registry: &Registry,
    shapes: &EdgeShapes,
    schedule: &Schedule,
    weight_multiplier: u64,
) -> Result<Vec<u64>, PlanError> {
    let n = schedule.steps.len();
    let weights = weight_constant(graph, weight_multiplier);
    let step_of: BTreeMap<NodeId, usize> = schedule
        .steps
        .iter()
        .enumerate()
        .map(|(t, &id)| (id, t))
        .collect();
    let outputs = graph.output_set();
    let consumers = graph.consumer_index();

    let mut timeline = Vec::with_capacity(n);
    for t in 0..n {
        let mut live = weights;
        for node in graph.nodes() {
            if graph.placeholder_info(node.id).map_or(false, |i| i.trainable) {
                continue;
            }
            let p = step_of[&node.id];
            if p > t {
                continue;
            }
            for e in node.output_edges() {
                let needed = outputs.contains(&e)
                    || p == t
                    || consumers
                        .get(&e)
                        .map_or(false, |cs| cs.iter().any(|c| step_of[&c] >= t));
                if needed {
                    let bytes = shapes
                        .get(e)
                        .map(|(s, d)| d.tensor_bytes(s.elems()))
                        .ok_or(PlanError::MissingShape(e))?;
                    live += bytes;
                }
            }
        }
        live += workspace_at(graph, registry, shapes, schedule.steps[t]);
        timeline.push(live);
    }
    Ok(timeline)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::build_gradient_graph;
    use crate::graph::{Attrs, Dtype, Shape};
    use crate::ops::default_registry;
    use crate::passes::infer_shapes;

    #[test]
    fn single_trainable_placeholder_constant_timeline() {
        let reg = default_registry();
        let mut g = Graph::new();
        let x = g.add_placeholder("w", Shape(vec![100]), Dtype::F32, true, "").unwrap();
        g.outputs = vec![EdgeRef::new(x, 0)];
        let shapes = infer_shapes(&g, &reg).unwrap();
        let schedule = build_schedule(&g).unwrap();
        let report = plan(&g, &reg, &shapes, &schedule, 4).unwrap();
        assert_eq!(report.timeline, vec![1600]);
        assert_eq!(report.peak_bytes, 1600);
        assert_eq!(report.by_category.weights, 1600);
    }

    #[test]
    fn empty_graph_timeline_is_empty() {
        let reg = default_registry();
        let g = Graph::new();
        let shapes = infer_shapes(&g, &reg).unwrap();
        let schedule = build_schedule(&g).unwrap();
        let report = plan(&g, &reg, &shapes, &schedule, 4).unwrap();
        assert!(report.timeline.is_empty());
        assert_eq!(report.peak_bytes, 0);
        let oracle = live_bytes_oracle(&g, &reg, &shapes, &schedule, 4).unwrap();
        assert!(oracle.is_empty());
    }

    #[test]
    fn add_tanh_baseline_stash_is_z_only() {
        let reg = default_registry();
        let mut g = Graph::new();
        let x = g.add_placeholder("x", Shape(vec![1024]), Dtype::F32, false, "").unwrap();
        let y = g.add_placeholder("y", Shape(vec![1024]), Dtype::F32, false, "").unwrap();
        let s = g
            .add_node(&reg, "add", vec![EdgeRef::new(x, 0), EdgeRef::new(y, 0)], Attrs::new(), "")
            .unwrap();
        let z = g.add_node(&reg, "tanh", vec![EdgeRef::new(s, 0)], Attrs::new(), "").unwrap();
        let loss = g.add_node(&reg, "sum_reduce", vec![EdgeRef::new(z, 0)], Attrs::new(), "").unwrap();
        g.outputs = vec![EdgeRef::new(loss, 0)];
        let (ag, _) = build_gradient_graph(&g, EdgeRef::new(loss, 0), &reg).unwrap();
        let shapes = infer_shapes(&ag, &reg).unwrap();
        let schedule = build_schedule(&ag).unwrap();
        let report = plan(&ag, &reg, &shapes, &schedule, 1).unwrap();
        assert_eq!(report.stashed_feature_map_bytes, 4096);
    }

    #[test]
    fn plan_matches_oracle_on_gradient_graph() {
        let reg = default_registry();
        let mut g = Graph::new();
        let x = g.add_placeholder("x", Shape(vec![4, 5]), Dtype::F32, false, "").unwrap();
        let w = g.add_placeholder("w", Shape(vec![3, 5]), Dtype::F32, true, "").unwrap();
        let b = g.add_placeholder("b", Shape(vec![3]), Dtype::F32, true, "").unwrap();
        let fc = g
            .add_node(
                &reg,
                "fully_connected",
                vec![EdgeRef::new(x, 0), EdgeRef::new(w, 0), EdgeRef::new(b, 0)],
                Attrs::new(),
                "",
            )
            .unwrap();
        let t = g.add_node(&reg, "tanh", vec![EdgeRef::new(fc, 0)], Attrs::new(), "").unwrap();
        let loss = g.add_node(&reg, "sum_reduce", vec![EdgeRef::new(t, 0)], Attrs::new(), "").unwrap();
        g.outputs = vec![EdgeRef::new(loss, 0)];
        let (ag, _) = build_gradient_graph(&g, EdgeRef::new(loss, 0), &reg).unwrap();
        let shapes = infer_shapes(&ag, &reg).unwrap();
        let schedule = build_schedule(&ag).unwrap();
        let report = plan(&ag, &reg, &shapes, &schedule, 4).unwrap();
        let oracle = live_bytes_oracle(&ag, &reg, &shapes, &schedule, 4).unwrap();
        assert_eq!(report.timeline, oracle);
        assert_eq!(report.peak_bytes, *oracle.iter().max().unwrap());
        assert_eq!(
            report.by_category.feature_maps + report.by_category.weights
                + report.by_category.workspace,
            report.peak_bytes
        );
    }
}
