//! The prior-work recomputation baseline: mirror every cheap feature-map
//! producer (and, transitively, the cheap producers its replay needs), with
//! no released-versus-allocated analysis, no dead nodes and no binarization.
//! Gradients of compute-heavy consumers keep their original references, so
//! a heavy node's input feature map stays stashed even when its producer is
//! mirrored.

use std::collections::{BTreeSet, VecDeque};

use crate::autodiff::GradInfo;
use crate::graph::{Graph, GraphError, NodeId, NodeKind};
use crate::ops::Registry;
use crate::passes::EdgeShapes;

use super::{materialize, Decisions, RecomputePlan, StrategyConfig, Subgraph};

pub fn run_mirror(
    graph: &Graph,
    gradinfo: &GradInfo,
    shapes: &EdgeShapes,
    registry: &Registry,
    config: &StrategyConfig,
) -> Result<(Graph, RecomputePlan), GraphError> {
    // Roots: cheap forward nodes producing a gradient-referenced edge.
    let mut work: VecDeque<NodeId> = VecDeque::new();
    let mut kept: BTreeSet<NodeId> = BTreeSet::new();
    for e in &gradinfo.feature_map_edges {
        let id = e.node;
        if graph.is_placeholder(id)
            || graph.node(id).kind != NodeKind::Forward
            || config.is_heavy(registry, graph, shapes, id)
        {
            continue;
        }
        if kept.insert(id) {
            work.push_back(id);
        }
    }
    // Extend each mirrored chain through cheap producers; placeholders and
    // heavy nodes terminate a chain and their outputs become the stash.
    while let Some(id) = work.pop_front() {
        for &e in &graph.node(id).inputs {
            let p = e.node;
            if graph.is_placeholder(p)
                || graph.node(p).kind != NodeKind::Forward
                || config.is_heavy(registry, graph, shapes, p)
            {
                continue;
            }
            if kept.insert(p) {
                work.push_back(p);
            }
        }
    }

    let mut frontier = BTreeSet::new();
    for &m in &kept {
        for &e in &graph.node(m).inputs {
            if !kept.contains(&e.node) {
                frontier.insert(e);
            }
        }
    }
    let topo = graph.topo_order()?;
    let mut members: Vec<NodeId> = kept.iter().copied().collect();
    let pos: std::collections::BTreeMap<NodeId, usize> =
        topo.into_iter().enumerate().map(|(i, id)| (id, i)).collect();
    members.sort_by_key(|id| pos[id]);

    let seed = members.last().copied().unwrap_or(0);
    let sub = Subgraph {
        seed,
        members: members.clone(),
        member_set: kept.clone(),
        frontier: frontier.clone(),
    };
    let decisions = Decisions { kept: kept.clone(), dead_entries: Vec::new(), binarized: Vec::new() };
    materialize(
        graph,
        registry,
        gradinfo,
        shapes,
        config,
        &decisions,
        vec![(sub, kept, BTreeSet::new())],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::build_gradient_graph;
    use crate::graph::{Attrs, Dtype, EdgeRef, Shape};
    use crate::ops::default_registry;
    use crate::passes::infer_shapes;
    use crate::recompute::Strategy;

    #[test]
    fn add_tanh_mirror_stashes_both_inputs() {
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
        let (ag, info) = build_gradient_graph(&g, EdgeRef::new(loss, 0), &reg).unwrap();
        let shapes = infer_shapes(&ag, &reg).unwrap();
        let cfg = StrategyConfig::for_strategy(Strategy::Mirror);
        let (mg, plan) = run_mirror(&ag, &info, &shapes, &reg, &cfg).unwrap();
        assert_eq!(plan.mirrored_count(), 2);
        // the feature map moved from Z (4096 bytes) to X and Y (8192 bytes)
        assert_eq!(plan.stashed_bytes, 8192);
        mg.validate(&reg).unwrap();
    }

    #[test]
    fn heavy_only_graph_mirrors_nothing() {
        let reg = default_registry();
        let mut g = Graph::new();
        let x = g.add_placeholder("x", Shape(vec![2, 3]), Dtype::F32, false, "").unwrap();
        let w = g.add_placeholder("w", Shape(vec![3, 3]), Dtype::F32, true, "").unwrap();
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
        let loss = g.add_node(&reg, "sum_reduce", vec![EdgeRef::new(fc, 0)], Attrs::new(), "").unwrap();
        g.outputs = vec![EdgeRef::new(loss, 0)];
        let (ag, info) = build_gradient_graph(&g, EdgeRef::new(loss, 0), &reg).unwrap();
        let shapes = infer_shapes(&ag, &reg).unwrap();
        let cfg = StrategyConfig::for_strategy(Strategy::Mirror);
        let (_, plan) = run_mirror(&ag, &info, &shapes, &reg, &cfg).unwrap();
        // sum_reduce's gradient needs nothing; the FC is excluded as heavy
        assert_eq!(plan.mirrored_count(), 0);
    }
}
