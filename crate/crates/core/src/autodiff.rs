//! Gradient pass: builds the backward graph for a scalar loss and records
//! which forward edges the gradient nodes reference (the feature maps).
//!
//! Construction walks the forward nodes in reverse topological order. Fan-out
//! gradients accumulate through explicit `add_n` nodes so the memory planner
//! sees real buffers. Gradients are built for every placeholder on a
//! differentiable path to the loss, and each placeholder's gradient edge is
//! appended to the graph outputs so it persists through later passes.

use std::collections::{BTreeMap, BTreeSet};

use crate::graph::{attrs, AttrValue, Dtype, EdgeRef, Graph, NodeId, NodeKind, Shape};
use crate::ops::{GradBuild, GradError, Registry};
use crate::passes::{infer_shapes, PassError};

#[derive(Debug, Clone, Default)]
pub struct GradInfo {
    /// Forward edge -> its gradient edge.
    pub grad_of_edge: BTreeMap<EdgeRef, EdgeRef>,
    /// All nodes added by this pass.
    pub grad_nodes: BTreeSet<NodeId>,
    /// Gradient node -> the forward node it differentiates. Accumulation and
    /// seed nodes map to the forward node whose edge they accumulate for.
    pub grad_node_of: BTreeMap<NodeId, NodeId>,
    /// Forward edges referenced as inputs by any gradient node.
    pub feature_map_edges: BTreeSet<EdgeRef>,
    /// Placeholder id -> gradient edge.
    pub placeholder_grads: BTreeMap<NodeId, EdgeRef>,
    pub loss_edge: EdgeRef,
}

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("loss edge has shape {0}, expected a scalar")]
    NonScalarLoss(Shape),
    #[error("non-differentiable op `{op}` (node {node}) on an active path to the loss")]
    NonDifferentiable { node: NodeId, op: String },
    #[error(transparent)]
    Pass(#[from] PassError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Build the backward graph for `loss`. Returns the augmented graph and the
/// bookkeeping needed by the rewrite and planning stages.
pub fn build_gradient_graph(
    graph: &Graph,
    loss: EdgeRef,
    registry: &Registry,
) -> Result<(Graph, GradInfo), AutodiffError> {
    let fwd_shapes = infer_shapes(graph, registry)?;
    let loss_shape = fwd_shapes.shape(loss).clone();
    if !loss_shape.is_scalar() {
        return Err(AutodiffError::NonScalarLoss(loss_shape));
    }
    let loss_dtype = fwd_shapes.dtype(loss);

    // Active set: nodes from which the loss is reachable.
    let consumers = graph.consumer_index();
    let mut active: BTreeSet<NodeId> = BTreeSet::new();
    let mut stack = vec![loss.node];
    while let Some(id) = stack.pop() {
        if !active.insert(id) {
            continue;
        }
        for &e in &graph.node(id).inputs {
            stack.push(e.node);
        }
    }
    for &id in &active {
        if !graph.is_placeholder(id) && !registry.is_differentiable(&graph.node(id).op) {
            return Err(AutodiffError::NonDifferentiable {
                node: id,
                op: graph.node(id).op.clone(),
            });
        }
    }
    let _ = consumers;

    let mut g = graph.clone();
    let mut info = GradInfo { loss_edge: loss, ..GradInfo::default() };
    let fwd_order = g.topo_order().map_err(PassError::Graph)?;
    let first_new_id = g.id_bound();

    // Pending gradient contributions per forward edge.
    let mut contribs: BTreeMap<EdgeRef, Vec<EdgeRef>> = BTreeMap::new();
    let dt_name = match loss_dtype {
        Dtype::F64 => "f64",
        _ => "f32",
    };
    let seed = g
        .add_node_kind(
            registry,
            "ones",
            vec![],
            attrs([
                ("dims", AttrValue::Ints(loss_shape.0.iter().map(|&d| d as i64).collect())),
                ("dtype", AttrValue::Str(dt_name.into())),
            ]),
            &g.node(loss.node).tag.clone(),
            NodeKind::Gradient,
            None,
        )
        .map_err(PassError::Graph)?;
    info.grad_node_of.insert(seed, loss.node);
    contribs.insert(loss, vec![EdgeRef::new(seed, 0)]);

    // Finalize one edge's gradient: a single contribution passes through, a
    // fan-out inserts an explicit accumulation node.
    let finalize = |g: &mut Graph,
                    info: &mut GradInfo,
                    e: EdgeRef,
                    list: Vec<EdgeRef>|
     -> Result<EdgeRef, AutodiffError> {
        let grad = if list.len() == 1 {
            list[0]
        } else {
            let tag = g.node(e.node).tag.clone();
            let id = g
                .add_node_kind(registry, "add_n", list, crate::graph::Attrs::new(), &tag, NodeKind::Gradient, None)
                .map_err(PassError::Graph)?;
            info.grad_node_of.insert(id, e.node);
            EdgeRef::new(id, 0)
        };
        info.grad_of_edge.insert(e, grad);
        Ok(grad)
    };

    for &id in fwd_order.iter().rev() {
        if !active.contains(&id) {
            continue;
        }
        if graph.is_placeholder(id) {
            let e = EdgeRef::new(id, 0);
            if let Some(list) = contribs.remove(&e) {
                let grad = finalize(&mut g, &mut info, e, list)?;
                info.placeholder_grads.insert(id, grad);
            }
            continue;
        }
        let node = g.node(id).clone();
        let mut out_grads: Vec<Option<EdgeRef>> = Vec::with_capacity(node.num_outputs);
        let mut any = false;
        for k in 0..node.num_outputs {
            let e = EdgeRef::new(id, k);
            match contribs.remove(&e) {
                Some(list) => {
                    out_grads.push(Some(finalize(&mut g, &mut info, e, list)?));
                    any = true;
                }
                None => out_grads.push(None),
            }
        }
        if !any {
            continue;
        }
        let builder = registry
            .lookup(&node.op)
            .and_then(|d| d.grad_builder)
            .ok_or_else(|| AutodiffError::NonDifferentiable { node: id, op: node.op.clone() })?;
        let before = g.id_bound();
        let in_grads = {
            let mut b = GradBuild { graph: &mut g, registry, fwd_shapes: &fwd_shapes.0 };
            builder(&mut b, &node, &out_grads)?
        };
        for new_id in before..g.id_bound() {
            info.grad_node_of.insert(new_id, id);
        }
        for (slot, grad) in in_grads.into_iter().enumerate() {
            if let Some(ge) = grad {
                contribs.entry(node.inputs[slot]).or_default().push(ge);
            }
        }
    }

    for new_id in first_new_id..g.id_bound() {
        if g.get_node(new_id).is_some() {
            info.grad_nodes.insert(new_id);
        }
    }

    // Feature maps: forward edges referenced by any gradient node.
    for &gid in &info.grad_nodes {
        for &e in &g.node(gid).inputs {
            if e.node < first_new_id {
                info.feature_map_edges.insert(e);
            }
        }
    }

    // Placeholder gradients persist as graph outputs (deterministic order).
    for (_, &grad) in info.placeholder_grads.iter() {
        g.outputs.push(grad);
    }

    Ok((g, info))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Attrs;
    use crate::ops::default_registry;
    use crate::passes::edge_use_refs;

    fn add_tanh_graph() -> (Graph, Registry, EdgeRef, EdgeRef) {
        let reg = default_registry();
        let mut g = Graph::new();
        let x = g.add_placeholder("x", Shape(vec![8]), Dtype::F64, false, "").unwrap();
        let y = g.add_placeholder("y", Shape(vec![8]), Dtype::F64, false, "").unwrap();
        let s = g
            .add_node(&reg, "add", vec![EdgeRef::new(x, 0), EdgeRef::new(y, 0)], Attrs::new(), "")
            .unwrap();
        let z = g.add_node(&reg, "tanh", vec![EdgeRef::new(s, 0)], Attrs::new(), "").unwrap();
        let loss = g.add_node(&reg, "sum_reduce", vec![EdgeRef::new(z, 0)], Attrs::new(), "").unwrap();
        g.outputs = vec![EdgeRef::new(loss, 0)];
        (g, reg, EdgeRef::new(loss, 0), EdgeRef::new(z, 0))
    }

    #[test]
    fn add_tanh_feature_maps_are_just_z() {
        let (g, reg, loss, z) = add_tanh_graph();
        let (_, info) = build_gradient_graph(&g, loss, &reg).unwrap();
        assert_eq!(info.feature_map_edges, [z].into_iter().collect());
    }

    #[test]
    fn fc_feature_maps_are_x_and_w() {
        let reg = default_registry();
        let mut g = Graph::new();
        let x = g.add_placeholder("x", Shape(vec![2, 3]), Dtype::F64, false, "").unwrap();
        let w = g.add_placeholder("w", Shape(vec![4, 3]), Dtype::F64, true, "").unwrap();
        let b = g.add_placeholder("b", Shape(vec![4]), Dtype::F64, true, "").unwrap();
        let fc = g
            .add_node(
                &reg,
                "fully_connected",
                vec![EdgeRef::new(x, 0), EdgeRef::new(w, 0), EdgeRef::new(b, 0)],
                Attrs::new(),
                "",
            )
            .unwrap();
        let loss = g
            .add_node(&reg, "sum_reduce", vec![EdgeRef::new(fc, 0)], Attrs::new(), "")
            .unwrap();
        g.outputs = vec![EdgeRef::new(loss, 0)];
        let (_, info) = build_gradient_graph(&g, EdgeRef::new(loss, 0), &reg).unwrap();
        assert_eq!(
            info.feature_map_edges,
            [EdgeRef::new(x, 0), EdgeRef::new(w, 0)].into_iter().collect()
        );
    }

    #[test]
    fn loss_of_placeholder_gives_constant_gradient() {
        let reg = default_registry();
        let mut g = Graph::new();
        let x = g.add_placeholder("x", Shape(vec![5]), Dtype::F64, false, "").unwrap();
        let loss = g.add_node(&reg, "sum_reduce", vec![EdgeRef::new(x, 0)], Attrs::new(), "").unwrap();
        g.outputs = vec![EdgeRef::new(loss, 0)];
        let (ag, info) = build_gradient_graph(&g, EdgeRef::new(loss, 0), &reg).unwrap();
        assert!(info.feature_map_edges.is_empty());
        let grad = info.placeholder_grads[&x];
        // constant chain: all-ones seed broadcast to x's shape
        let producer = ag.node(grad.node);
        assert_eq!(producer.op, "broadcast_to");
        let seed = ag.node(producer.inputs[0].node);
        assert_eq!(seed.op, "ones");
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let reg = default_registry();
        let mut g = Graph::new();
        let x = g.add_placeholder("x", Shape(vec![5]), Dtype::F64, false, "").unwrap();
        let t = g.add_node(&reg, "tanh", vec![EdgeRef::new(x, 0)], Attrs::new(), "").unwrap();
        g.outputs = vec![EdgeRef::new(t, 0)];
        assert!(matches!(
            build_gradient_graph(&g, EdgeRef::new(t, 0), &reg),
            Err(AutodiffError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn gradient_shapes_match_forward_shapes() {
        let (g, reg, loss, _) = add_tanh_graph();
        let (ag, info) = build_gradient_graph(&g, loss, &reg).unwrap();
        let shapes = infer_shapes(&ag, &reg).unwrap();
        for (&fwd, &grad) in &info.grad_of_edge {
            assert_eq!(shapes.shape(fwd), shapes.shape(grad), "shape mismatch for {:?}", fwd);
        }
    }

    #[test]
    fn z_has_two_uses_after_gradient_pass() {
        let (g, reg, loss, z) = add_tanh_graph();
        let (ag, _) = build_gradient_graph(&g, loss, &reg).unwrap();
        let refs = edge_use_refs(&ag);
        // loss consumer plus the tanh gradient
        assert_eq!(refs.count(z), 2);
    }

    #[test]
    fn feature_maps_equal_scan_of_gradient_inputs() {
        let (g, reg, loss, _) = add_tanh_graph();
        let (ag, info) = build_gradient_graph(&g, loss, &reg).unwrap();
        let mut scanned = BTreeSet::new();
        for &gid in &info.grad_nodes {
            for &e in &ag.node(gid).inputs {
                if !info.grad_nodes.contains(&e.node) {
                    scanned.insert(e);
                }
            }
        }
        assert_eq!(scanned, info.feature_map_edges);
    }
}
