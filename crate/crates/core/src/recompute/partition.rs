//! Subgraph partitioning: a worklist seeded with the graph outputs expands
//! backward through cheap forward nodes; compute-heavy blockers become new
//! seeds, so subgraphs are pairwise disjoint and bounded by heavy layers and
//! placeholders.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::graph::{EdgeRef, Graph, NodeId, NodeKind};
use crate::ops::Registry;
use crate::passes::EdgeShapes;

use super::StrategyConfig;

#[derive(Debug, Clone)]
pub struct Subgraph {
    /// The output-side node the backward expansion started from. A cheap seed
    /// is also a member; a compute-heavy seed only contributes its inputs.
    pub seed: NodeId,
    /// Members in topological order; never contains a compute-heavy node.
    pub members: Vec<NodeId>,
    pub member_set: BTreeSet<NodeId>,
    /// Edges entering the subgraph from outside: the stash candidates.
    pub frontier: BTreeSet<EdgeRef>,
}

pub fn partition_subgraphs(
    graph: &Graph,
    registry: &Registry,
    config: &StrategyConfig,
    shapes: &EdgeShapes,
) -> Vec<Subgraph> {
    let topo_pos: BTreeMap<NodeId, usize> = match graph.topo_order() {
        Ok(order) => order.into_iter().enumerate().map(|(i, id)| (id, i)).collect(),
        Err(_) => return Vec::new(),
    };
    let mut seeds: VecDeque<NodeId> = VecDeque::new();
    let mut seen_seeds: BTreeSet<NodeId> = BTreeSet::new();
    for e in &graph.outputs {
        let n = graph.node(e.node);
        if n.kind == NodeKind::Forward && seen_seeds.insert(e.node) {
            seeds.push_back(e.node);
        }
    }

    let mut claimed: BTreeSet<NodeId> = BTreeSet::new();
    let mut subgraphs = Vec::new();
    while let Some(seed) = seeds.pop_front() {
        if graph.is_placeholder(seed) {
            continue;
        }
        let mut members: BTreeSet<NodeId> = BTreeSet::new();
        let mut work: VecDeque<NodeId> = VecDeque::new();
        if config.is_heavy(registry, graph, shapes, seed) {
            for &e in &graph.node(seed).inputs {
                work.push_back(e.node);
            }
        } else if claimed.insert(seed) {
            members.insert(seed);
            for &e in &graph.node(seed).inputs {
                work.push_back(e.node);
            }
        } else {
            continue;
        }
        while let Some(w) = work.pop_front() {
            if graph.is_placeholder(w) || members.contains(&w) {
                continue;
            }
            if config.is_heavy(registry, graph, shapes, w) {
                if seen_seeds.insert(w) {
                    seeds.push_back(w);
                }
                continue;
            }
            if !claimed.insert(w) {
                continue; // owned by an earlier subgraph
            }
            members.insert(w);
            for &e in &graph.node(w).inputs {
                work.push_back(e.node);
            }
        }
        if members.is_empty() {
            continue;
        }
        let mut ordered: Vec<NodeId> = members.iter().copied().collect();
        ordered.sort_by_key(|id| topo_pos[id]);
        let mut frontier = BTreeSet::new();
        for &m in &ordered {
            for &e in &graph.node(m).inputs {
                if !members.contains(&e.node) {
                    frontier.insert(e);
                }
            }
        }
        subgraphs.push(Subgraph { seed, members: ordered, member_set: members, frontier });
    }
    subgraphs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Attrs, Dtype, Shape};
    use crate::ops::default_registry;
    use crate::passes::infer_shapes;

    #[test]
    fn two_fc_feeding_add_tanh_gives_one_subgraph() {
        let reg = default_registry();
        let mut g = Graph::new();
        let x = g.add_placeholder("x", Shape(vec![2, 3]), Dtype::F32, false, "").unwrap();
        let w1 = g.add_placeholder("w1", Shape(vec![3, 3]), Dtype::F32, true, "").unwrap();
        let b1 = g.add_placeholder("b1", Shape(vec![3]), Dtype::F32, true, "").unwrap();
        let w2 = g.add_placeholder("w2", Shape(vec![3, 3]), Dtype::F32, true, "").unwrap();
        let b2 = g.add_placeholder("b2", Shape(vec![3]), Dtype::F32, true, "").unwrap();
        let fc1 = g
            .add_node(
                &reg,
                "fully_connected",
                vec![EdgeRef::new(x, 0), EdgeRef::new(w1, 0), EdgeRef::new(b1, 0)],
                Attrs::new(),
                "",
            )
            .unwrap();
        let fc2 = g
            .add_node(
                &reg,
                "fully_connected",
                vec![EdgeRef::new(x, 0), EdgeRef::new(w2, 0), EdgeRef::new(b2, 0)],
                Attrs::new(),
                "",
            )
            .unwrap();
        let s = g
            .add_node(&reg, "add", vec![EdgeRef::new(fc1, 0), EdgeRef::new(fc2, 0)], Attrs::new(), "")
            .unwrap();
        let t = g.add_node(&reg, "tanh", vec![EdgeRef::new(s, 0)], Attrs::new(), "").unwrap();
        g.outputs = vec![EdgeRef::new(t, 0)];

        let shapes = infer_shapes(&g, &reg).unwrap();
        let cfg = StrategyConfig::default();
        let subs = partition_subgraphs(&g, &reg, &cfg, &shapes);
        assert_eq!(subs.len(), 1);
        assert_eq!(subs[0].members, vec![s, t]);
        assert_eq!(
            subs[0].frontier,
            [EdgeRef::new(fc1, 0), EdgeRef::new(fc2, 0)].into_iter().collect()
        );
    }

    #[test]
    fn pure_cheap_chain_is_one_subgraph() {
        let reg = default_registry();
        let mut g = Graph::new();
        let x = g.add_placeholder("x", Shape(vec![4]), Dtype::F32, false, "").unwrap();
        let mut prev = EdgeRef::new(x, 0);
        let mut ids = Vec::new();
        for _ in 0..5 {
            let t = g.add_node(&reg, "tanh", vec![prev], Attrs::new(), "").unwrap();
            ids.push(t);
            prev = EdgeRef::new(t, 0);
        }
        g.outputs = vec![prev];
        let shapes = infer_shapes(&g, &reg).unwrap();
        let subs = partition_subgraphs(&g, &reg, &StrategyConfig::default(), &shapes);
        assert_eq!(subs.len(), 1);
        assert_eq!(subs[0].members, ids);
        assert_eq!(subs[0].seed, *ids.last().unwrap());
    }

    #[test]
    fn subgraphs_are_disjoint() {
        let reg = default_registry();
        let mut g = Graph::new();
        let x = g.add_placeholder("x", Shape(vec![2, 4]), Dtype::F32, false, "").unwrap();
        let w = g.add_placeholder("w", Shape(vec![4, 4]), Dtype::F32, true, "").unwrap();
        let b = g.add_placeholder("b", Shape(vec![4]), Dtype::F32, true, "").unwrap();
        let t0 = g.add_node(&reg, "tanh", vec![EdgeRef::new(x, 0)], Attrs::new(), "").unwrap();
        let fc = g
            .add_node(
                &reg,
                "fully_connected",
                vec![EdgeRef::new(t0, 0), EdgeRef::new(w, 0), EdgeRef::new(b, 0)],
                Attrs::new(),
                "",
            )
            .unwrap();
        let t1 = g.add_node(&reg, "tanh", vec![EdgeRef::new(fc, 0)], Attrs::new(), "").unwrap();
        g.outputs = vec![EdgeRef::new(t1, 0)];
        let shapes = infer_shapes(&g, &reg).unwrap();
        let subs = partition_subgraphs(&g, &reg, &StrategyConfig::default(), &shapes);
        assert_eq!(subs.len(), 2);
        let mut all = BTreeSet::new();
        for s in &subs {
            for &m in &s.members {
                assert!(all.insert(m), "member {} appears twice", m);
            }
        }
    }
}
