//! The selective-recomputation strategy.
//!
//! Phases, per run:
//!  1. partition the forward graph at compute-heavy boundaries;
//!  2. assume every member is mirrored (the full recomputation path);
//!  3. dead-node analysis: a compute-heavy node whose gradient needs only
//!     its inputs gets those inputs served by the mirror path, pinning the
//!     producing members on the path (they are only trimmed later if removal
//!     is strictly cheaper);
//!  4. forward trimming: visit members in topological order and remove a
//!     co-removal group whenever the stashed bytes it releases reach the
//!     bytes its removal would newly stash, iterated to a fixed point;
//!  5. binarization: a removed relu/dropout feature map whose only backward
//!     consumers are its own gradient nodes is stashed as a 1-bit mask.
//!
//! The trimming ledger works on edge obligations: `stash` is the set of
//! edges that currently must persist into the backward pass. An edge
//! referenced directly by a gradient node (its producer is off the mirror
//! path) is pinned and never releasable.

use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::GradInfo;
use crate::graph::{EdgeRef, Graph, GraphError, NodeId, NodeKind};
use crate::ops::Registry;
use crate::passes::{EdgeShapes, UseRefMap};

use super::{
    materialize, partition_subgraphs, Decisions, DeadEntry, RecomputePlan, StrategyConfig, Subgraph,
};

pub struct EchoState<'a> {
    graph: &'a Graph,
    gradinfo: &'a GradInfo,
    shapes: &'a EdgeShapes,
    use_refs: &'a UseRefMap,
    registry: &'a Registry,
    config: &'a StrategyConfig,
    pub subgraphs: Vec<Subgraph>,
    /// Members still on the recomputation path.
    pub kept: BTreeSet<NodeId>,
    pub removed: BTreeSet<NodeId>,
    /// Edges currently obligated to persist into the backward pass.
    pub stash: BTreeSet<EdgeRef>,
    /// Members whose mirrors feed a dead-node redirect.
    locked: BTreeSet<NodeId>,
    dead_entries: Vec<DeadEntry>,
    binarized: Vec<(NodeId, EdgeRef)>,
    member_subgraph: BTreeMap<NodeId, usize>,
    /// Forward-member consumers per edge (any subgraph).
    member_consumers: BTreeMap<EdgeRef, Vec<NodeId>>,
    /// Gradient-node consumers per edge.
    grad_consumers: BTreeMap<EdgeRef, Vec<NodeId>>,
    /// Forward node -> its gradient nodes.
    grads_of_fwd: BTreeMap<NodeId, Vec<NodeId>>,
    graph_outputs: BTreeSet<EdgeRef>,
}

impl<'a> EchoState<'a> {
    pub fn new(
        graph: &'a Graph,
        gradinfo: &'a GradInfo,
        shapes: &'a EdgeShapes,
        use_refs: &'a UseRefMap,
        registry: &'a Registry,
        config: &'a StrategyConfig,
    ) -> Self {
        let subgraphs = partition_subgraphs(graph, registry, config, shapes);
        let mut member_subgraph = BTreeMap::new();
        let mut kept = BTreeSet::new();
        for (i, s) in subgraphs.iter().enumerate() {
            for &m in &s.members {
                member_subgraph.insert(m, i);
                kept.insert(m);
            }
        }
        // Initial obligations: every frontier edge, plus feature maps whose
        // producer is outside the mirror path (placeholders, heavy outputs).
        let mut stash: BTreeSet<EdgeRef> = BTreeSet::new();
        for s in &subgraphs {
            stash.extend(s.frontier.iter().copied());
        }
        for &e in &gradinfo.feature_map_edges {
            if !kept.contains(&e.node) {
                stash.insert(e);
            }
        }
        let mut member_consumers: BTreeMap<EdgeRef, Vec<NodeId>> = BTreeMap::new();
        let mut grad_consumers: BTreeMap<EdgeRef, Vec<NodeId>> = BTreeMap::new();
        for n in graph.nodes() {
            let is_member = member_subgraph.contains_key(&n.id);
            let is_grad = n.kind == NodeKind::Gradient;
            if !is_member && !is_grad {
                continue;
            }
            let mut seen = BTreeSet::new();
            for &e in &n.inputs {
                if !seen.insert(e) {
                    continue;
                }
                if is_member {
                    member_consumers.entry(e).or_default().push(n.id);
                } else {
                    grad_consumers.entry(e).or_default().push(n.id);
                }
            }
        }
        let mut grads_of_fwd: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for (&g, &f) in &gradinfo.grad_node_of {
            grads_of_fwd.entry(f).or_default().push(g);
        }
        EchoState {
            graph,
            gradinfo,
            shapes,
            use_refs,
            registry,
            config,
            subgraphs,
            kept,
            removed: BTreeSet::new(),
            stash,
            locked: BTreeSet::new(),
            dead_entries: Vec::new(),
            binarized: Vec::new(),
            member_subgraph,
            member_consumers,
            grad_consumers,
            grads_of_fwd,
            graph_outputs: graph.output_set(),
        }
    }

    fn bytes(&self, e: EdgeRef) -> u64 {
        self.shapes.bytes(e)
    }

    /// Dead-node handling for one compute-heavy node: applies when its
    /// gradient needs none of its outputs and at least one of its input
    /// feature maps is producible by the mirror path.
    pub fn apply_dead_node(&mut self, heavy: NodeId) -> bool {
        if self.grads_of_fwd.get(&heavy).map_or(true, Vec::is_empty) {
            return false;
        }
        let op = &self.graph.node(heavy).op;
        match self.registry.grad_deps(op) {
            Ok(deps) if deps.needs_outputs.is_empty() => {}
            _ => return false, // handled as an ordinary blocker
        }
        let mut redirects = Vec::new();
        let mut seen = BTreeSet::new();
        for &e in &self.graph.node(heavy).inputs {
            if !seen.insert(e) {
                continue;
            }
            if self.gradinfo.feature_map_edges.contains(&e) && self.kept.contains(&e.node) {
                redirects.push((e, e.node));
            }
        }
        if redirects.is_empty() {
            return false;
        }
        for &(_, m) in &redirects {
            self.locked.insert(m);
        }
        // The served feature maps are no longer direct gradient references.
        for &(e, _) in &redirects {
            self.stash.remove(&e);
        }
        self.dead_entries.push(DeadEntry { heavy, redirects });
        true
    }

    pub fn apply_dead_nodes(&mut self) {
        if !self.config.enable_dead_node {
            return;
        }
        let heavies: Vec<NodeId> = self
            .graph
            .nodes()
            .filter(|n| {
                n.kind == NodeKind::Forward
                    && !self.graph.is_placeholder(n.id)
                    && self.config.is_heavy(self.registry, self.graph, self.shapes, n.id)
            })
            .map(|n| n.id)
            .collect();
        for h in heavies {
            self.apply_dead_node(h);
        }
    }

    /// Co-removal group: the transitive closure of still-mirrored members of
    /// the same subgraph that share a currently-stashed input edge with `s`.
    fn closure(&self, s: NodeId) -> BTreeSet<NodeId> {
        let sub = self.member_subgraph[&s];
        let mut group = BTreeSet::from([s]);
        let mut queue = vec![s];
        while let Some(n) = queue.pop() {
            for &e in &self.graph.node(n).inputs {
                if !self.stash.contains(&e) || self.use_refs.count(e) <= 1 {
                    continue;
                }
                if let Some(consumers) = self.member_consumers.get(&e) {
                    for &c in consumers {
                        if self.kept.contains(&c)
                            && self.member_subgraph.get(&c) == Some(&sub)
                            && group.insert(c)
                        {
                            queue.push(c);
                        }
                    }
                }
            }
        }
        group
    }

    /// Would removing `group` from the mirror path pay for itself?
    /// Returns (alloc edges, rel edges).
    fn evaluate(&self, group: &BTreeSet<NodeId>) -> (BTreeSet<EdgeRef>, BTreeSet<EdgeRef>) {
        let survives = |c: &NodeId| self.kept.contains(c) && !group.contains(c);
        let mut alloc: BTreeSet<EdgeRef> = BTreeSet::new();
        let mut rel: BTreeSet<EdgeRef> = BTreeSet::new();
        for &n in group {
            for o in self.graph.node(n).output_edges() {
                if self.graph_outputs.contains(&o) || self.stash.contains(&o) {
                    continue; // already persistent either way
                }
                let needed = self.gradinfo.feature_map_edges.contains(&o)
                    || self
                        .member_consumers
                        .get(&o)
                        .map_or(false, |cs| cs.iter().any(survives));
                if needed {
                    alloc.insert(o);
                }
            }
            for &e in &self.graph.node(n).inputs {
                if !self.stash.contains(&e) || self.pinned(e) {
                    continue;
                }
                let still_used = self
                    .member_consumers
                    .get(&e)
                    .map_or(false, |cs| cs.iter().any(survives));
                if !still_used {
                    rel.insert(e);
                }
            }
        }
        (alloc, rel)
    }

    /// Edge pinned: a gradient node references it directly (its producer is
    /// off the mirror path, so the reference cannot be redirected).
    fn pinned(&self, e: EdgeRef) -> bool {
        self.gradinfo.feature_map_edges.contains(&e) && !self.kept.contains(&e.node)
    }

    /// One topological sweep over a subgraph's members; returns true if any
    /// group was removed from the mirror path.
    pub fn trim_forward(&mut self, subgraph_idx: usize) -> bool {
        let members = self.subgraphs[subgraph_idx].members.clone();
        let mut changed = false;
        for s in members {
            if !self.kept.contains(&s) {
                continue;
            }
            let group = self.closure(s);
            let (alloc_edges, rel_edges) = self.evaluate(&group);
            let alloc: u64 = alloc_edges.iter().map(|&e| self.bytes(e)).sum();
            let rel: u64 = rel_edges.iter().map(|&e| self.bytes(e)).sum();
            // Members feeding a dead-node redirect come off the path only
            // when removal is strictly cheaper: the redirect already released
            // the heavy node's input feature map.
            let strict = group.iter().any(|m| self.locked.contains(m));
            let remove = if strict { rel > alloc } else { rel >= alloc };
            if !remove {
                continue;
            }
            for &m in &group {
                self.kept.remove(&m);
                self.removed.insert(m);
            }
            for e in rel_edges {
                self.stash.remove(&e);
            }
            for e in alloc_edges {
                self.stash.insert(e);
            }
            changed = true;
        }
        changed
    }

    /// Sweep all subgraphs to a fixed point.
    pub fn trim_all(&mut self) {
        loop {
            let mut changed = false;
            for i in 0..self.subgraphs.len() {
                changed |= self.trim_forward(i);
            }
            if !changed {
                return;
            }
        }
    }

    /// Stash a trimmed member's feature map as a 1-bit mask when every
    /// backward consumer of that edge is one of the member's own gradient
    /// nodes. Returns how many edges were binarized.
    pub fn apply_binarization(&mut self, member: NodeId) -> usize {
        if self.kept.contains(&member) {
            return 0; // still recomputed, nothing is stashed
        }
        let op = self.graph.node(member).op.clone();
        if !self.config.is_binarizable(self.registry, &op) {
            return 0;
        }
        let mut count = 0;
        for f in self.graph.node(member).output_edges() {
            if !self.gradinfo.feature_map_edges.contains(&f)
                || self.graph_outputs.contains(&f)
                || !self.stash.contains(&f)
            {
                continue;
            }
            let own_grads_only = self.grad_consumers.get(&f).map_or(false, |gs| {
                !gs.is_empty()
                    && gs.iter().all(|g| self.gradinfo.grad_node_of.get(g) == Some(&member))
            });
            let mirrored_reader = self
                .member_consumers
                .get(&f)
                .map_or(false, |cs| cs.iter().any(|c| self.kept.contains(c)));
            if own_grads_only && !mirrored_reader {
                self.binarized.push((member, f));
                count += 1;
            }
        }
        count
    }

    pub fn apply_binarization_all(&mut self) {
        if !self.config.enable_binarization {
            return;
        }
        let members: Vec<NodeId> = self.member_subgraph.keys().copied().collect();
        for m in members {
            self.apply_binarization(m);
        }
    }

    pub fn finish(&self) -> Result<(Graph, RecomputePlan), GraphError> {
        let decisions = Decisions {
            kept: self.kept.clone(),
            dead_entries: self.dead_entries.clone(),
            binarized: self.binarized.clone(),
        };
        let subs: Vec<(Subgraph, BTreeSet<NodeId>, BTreeSet<NodeId>)> = self
            .subgraphs
            .iter()
            .map(|s| {
                let mirrored: BTreeSet<NodeId> =
                    s.members.iter().filter(|m| self.kept.contains(m)).copied().collect();
                let removed: BTreeSet<NodeId> =
                    s.members.iter().filter(|m| self.removed.contains(m)).copied().collect();
                (s.clone(), mirrored, removed)
            })
            .collect();
        materialize(
            self.graph,
            self.registry,
            self.gradinfo,
            self.shapes,
            self.config,
            &decisions,
            subs,
        )
    }

    /// Bytes the subgraph's surviving mirrors save: released feature maps
    /// minus the frontier they pin.
    fn subgraph_benefit(&self, idx: usize) -> i128 {
        let sub = &self.subgraphs[idx];
        let mut released: i128 = 0;
        let mut pinned_frontier: BTreeSet<EdgeRef> = BTreeSet::new();
        for &m in &sub.members {
            if !self.kept.contains(&m) {
                continue;
            }
            for o in self.graph.node(m).output_edges() {
                if self.gradinfo.feature_map_edges.contains(&o) {
                    released += self.bytes(o) as i128;
                }
            }
            for &e in &self.graph.node(m).inputs {
                if !sub.member_set.contains(&e.node) {
                    pinned_frontier.insert(e);
                }
            }
        }
        released - pinned_frontier.iter().map(|&e| self.bytes(e) as i128).sum::<i128>()
    }

    /// Take the least beneficial subgraph off the recomputation path
    /// entirely; once none are left, drop binarizations. Returns false when
    /// the state already equals the baseline.
    pub fn demote_one(&mut self) -> bool {
        let candidate = (0..self.subgraphs.len())
            .filter(|&i| self.subgraphs[i].members.iter().any(|m| self.kept.contains(m)))
            .min_by_key(|&i| (self.subgraph_benefit(i), i));
        if let Some(i) = candidate {
            for m in self.subgraphs[i].members.clone() {
                if self.kept.remove(&m) {
                    self.removed.insert(m);
                }
            }
            return true;
        }
        if !self.binarized.is_empty() {
            self.binarized.clear();
            return true;
        }
        false
    }
}

/// Peak bytes of a cleaned graph under a unit weight multiplier; the
/// multiplier contributes the same constant to any rewrite of one graph, so
/// it cancels out of never-worse comparisons.
fn peak_of(graph: &Graph, registry: &Registry) -> Result<u64, GraphError> {
    let cleaned = crate::passes::eliminate_dead_nodes(graph);
    let shapes = crate::passes::infer_shapes(&cleaned, registry)
        .map_err(|e| GraphError::Parse(e.to_string()))?;
    let schedule = crate::planner::build_schedule(&cleaned)?;
    let report = crate::planner::plan(&cleaned, registry, &shapes, &schedule, 1)
        .map_err(|e| GraphError::Parse(e.to_string()))?;
    Ok(report.peak_bytes)
}

pub fn run_echo(
    graph: &Graph,
    gradinfo: &GradInfo,
    shapes: &EdgeShapes,
    use_refs: &UseRefMap,
    registry: &Registry,
    config: &StrategyConfig,
) -> Result<(Graph, RecomputePlan), GraphError> {
    let mut state = EchoState::new(graph, gradinfo, shapes, use_refs, registry, config);
    state.apply_dead_nodes();
    state.trim_all();
    state.apply_binarization_all();

    // Footprint guarantee: a rewrite may never plan worse than the baseline.
    // Recompute transients can outweigh the stash savings on small graphs;
    // when they do, subgraphs come off the path (least beneficial first)
    // until the plan is no worse. With everything demoted the graph equals
    // the baseline exactly, so the loop always terminates.
    let baseline_peak = peak_of(graph, registry)?;
    loop {
        let (out, plan) = state.finish()?;
        if peak_of(&out, registry)? <= baseline_peak {
            return Ok((out, plan));
        }
        if !state.demote_one() {
            return Ok((out, plan));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::build_gradient_graph;
    use crate::graph::{Attrs, Dtype, Shape};
    use crate::ops::default_registry;
    use crate::passes::{edge_use_refs, eliminate_dead_nodes, infer_shapes};
    use crate::recompute::Strategy;

    struct Setup {
        graph: Graph,
        gradinfo: GradInfo,
        shapes: EdgeShapes,
        use_refs: UseRefMap,
    }

    fn prepare(forward: &Graph, reg: &Registry) -> Setup {
        let loss = forward.outputs[0];
        let (graph, gradinfo) = build_gradient_graph(forward, loss, reg).unwrap();
        let shapes = infer_shapes(&graph, reg).unwrap();
        let use_refs = edge_use_refs(&graph);
        Setup { graph, gradinfo, shapes, use_refs }
    }

    #[test]
    fn add_tanh_trims_everything() {
        let reg = default_registry();
        let fwd = crate::zoo::build(
            &crate::zoo::ZooSpec::new(crate::zoo::ZooModel::AddTanh { n: 1024 }, Dtype::F32),
            &reg,
        )
        .unwrap();
        let s = prepare(&fwd, &reg);
        let cfg = StrategyConfig::for_strategy(Strategy::Echo);
        let (out, plan) =
            run_echo(&s.graph, &s.gradinfo, &s.shapes, &s.use_refs, &reg, &cfg).unwrap();
        assert_eq!(plan.mirrored_count(), 0);
        assert_eq!(plan.stashed_bytes, 4096);
        let cleaned = eliminate_dead_nodes(&out);
        assert!(cleaned.nodes().all(|n| n.kind != NodeKind::Mirror));
    }

    #[test]
    fn shared_state_keeps_the_whole_path_mirrored() {
        let reg = default_registry();
        let (t, n) = (64u64, 256u64);
        let fwd = crate::zoo::build(
            &crate::zoo::ZooSpec::new(crate::zoo::ZooModel::BroadcastAttn { t, n }, Dtype::F32),
            &reg,
        )
        .unwrap();
        let s = prepare(&fwd, &reg);
        let cfg = StrategyConfig::for_strategy(Strategy::Echo);
        let (out, plan) =
            run_echo(&s.graph, &s.gradinfo, &s.shapes, &s.use_refs, &reg, &cfg).unwrap();
        // all T scoring adds and activations stay on the recomputation path
        let cleaned = eliminate_dead_nodes(&out);
        let mirrors: Vec<&crate::graph::Node> =
            cleaned.nodes().filter(|nd| nd.kind == NodeKind::Mirror).collect();
        let mirrored_adds =
            mirrors.iter().filter(|nd| nd.op == "broadcast_add").count() as u64;
        let mirrored_tanhs = mirrors.iter().filter(|nd| nd.op == "tanh").count() as u64;
        assert_eq!(mirrored_adds, t);
        assert_eq!(mirrored_tanhs, t);
        // stash is the frontier: the shared [T,N] state plus the T queries
        assert_eq!(plan.stashed_bytes, (t * n + t * n) * 4);
    }

    #[test]
    fn dead_node_releases_heavy_input_feature_map() {
        let reg = default_registry();
        let fwd = crate::zoo::tanh_fc_chain(&reg, 4, 8, Dtype::F32);
        let s = prepare(&fwd, &reg);
        let cfg = StrategyConfig::for_strategy(Strategy::Echo);
        let (out, plan) =
            run_echo(&s.graph, &s.gradinfo, &s.shapes, &s.use_refs, &reg, &cfg).unwrap();
        assert_eq!(plan.mirrored_count(), 1);
        assert_eq!(plan.dead_mirror_count(), 1);
        // the tanh output is released; only the chain input x stays stashed
        let tanh_out = s
            .graph
            .nodes()
            .find(|n| n.op == "tanh" && n.kind == NodeKind::Forward)
            .map(|n| crate::graph::EdgeRef::new(n.id, 0))
            .unwrap();
        let stashed = crate::recompute::stashed_edges(&eliminate_dead_nodes(&out));
        assert!(!stashed.contains(&tanh_out));
        assert_eq!(plan.stashed_bytes, 4 * 8 * 4); // x: [4,8] f32
        // the dead mirror disappears during dead-node elimination
        let cleaned = eliminate_dead_nodes(&out);
        assert!(cleaned.nodes().all(|n| n.kind != NodeKind::DeadMirror));
        assert_eq!(cleaned.nodes().filter(|n| n.kind == NodeKind::Mirror).count(), 1);
    }

    #[test]
    fn dead_node_disabled_reverts_to_baseline_stash() {
        let reg = default_registry();
        let fwd = crate::zoo::tanh_fc_chain(&reg, 4, 8, Dtype::F32);
        let s = prepare(&fwd, &reg);
        let mut cfg = StrategyConfig::for_strategy(Strategy::Echo);
        cfg.enable_dead_node = false;
        let (_, plan) =
            run_echo(&s.graph, &s.gradinfo, &s.shapes, &s.use_refs, &reg, &cfg).unwrap();
        assert_eq!(plan.mirrored_count(), 0);
        assert_eq!(plan.dead_mirror_count(), 0);
        assert_eq!(plan.stashed_bytes, 4 * 8 * 4); // tanh output, same bytes as x
    }

    #[test]
    fn conv_with_placeholder_input_gets_no_dead_node() {
        let reg = default_registry();
        let mut g = Graph::new();
        let x = g.add_placeholder("x", Shape(vec![1, 2, 5, 5]), Dtype::F32, false, "").unwrap();
        let w = g.add_placeholder("k", Shape(vec![2, 2, 3, 3]), Dtype::F32, true, "").unwrap();
        let conv = g
            .add_node(&reg, "conv2d", vec![(x, 0).into(), (w, 0).into()], Attrs::new(), "")
            .unwrap();
        let loss = g.add_node(&reg, "sum_reduce", vec![(conv, 0).into()], Attrs::new(), "").unwrap();
        g.outputs = vec![(loss, 0).into()];
        let s = prepare(&g, &reg);
        let cfg = StrategyConfig::for_strategy(Strategy::Echo);
        let (_, plan) =
            run_echo(&s.graph, &s.gradinfo, &s.shapes, &s.use_refs, &reg, &cfg).unwrap();
        assert_eq!(plan.dead_mirror_count(), 0);
    }

    #[test]
    fn fc_fc_chain_is_unchanged() {
        let reg = default_registry();
        let fwd = crate::zoo::fc_fc_chain(&reg, 4, 8, Dtype::F32);
        let s = prepare(&fwd, &reg);
        let cfg = StrategyConfig::for_strategy(Strategy::Echo);
        let (_, plan) =
            run_echo(&s.graph, &s.gradinfo, &s.shapes, &s.use_refs, &reg, &cfg).unwrap();
        // the inner feature map has no cheap producer to replay it
        assert_eq!(plan.dead_mirror_count(), 0);
        assert_eq!(plan.mirrored_count(), 0);
        // both x and the first FC's output are gradient inputs and stay put
        assert_eq!(plan.stashed_bytes, 2 * (4 * 8 * 4));
    }

    #[test]
    fn dropout_mask_binarized_when_stashed() {
        let reg = default_registry();
        let fwd = crate::zoo::dropout_loss(&reg, 1024, 0.5, Dtype::F32);
        let s = prepare(&fwd, &reg);
        let cfg = StrategyConfig::for_strategy(Strategy::Echo);
        let (out, plan) =
            run_echo(&s.graph, &s.gradinfo, &s.shapes, &s.use_refs, &reg, &cfg).unwrap();
        assert_eq!(plan.binarized_count(), 1);
        // 1024 mask elements pack into 128 bytes instead of 4096
        assert_eq!(plan.stashed_bytes, 128);
        let cleaned = eliminate_dead_nodes(&out);
        assert_eq!(cleaned.nodes().filter(|n| n.kind == NodeKind::Encode).count(), 1);
        assert_eq!(cleaned.nodes().filter(|n| n.kind == NodeKind::Decode).count(), 1);
    }

    #[test]
    fn binarization_disabled_keeps_full_precision_mask() {
        let reg = default_registry();
        let fwd = crate::zoo::dropout_loss(&reg, 1024, 0.5, Dtype::F32);
        let s = prepare(&fwd, &reg);
        let mut cfg = StrategyConfig::for_strategy(Strategy::Echo);
        cfg.enable_binarization = false;
        let (_, plan) =
            run_echo(&s.graph, &s.gradinfo, &s.shapes, &s.use_refs, &reg, &cfg).unwrap();
        assert_eq!(plan.binarized_count(), 0);
        assert_eq!(plan.stashed_bytes, 4096);
    }

    #[test]
    fn pinned_input_keeps_node_mirrored() {
        // x -> tanh(a) -> sigmoid(b) -> mul(a, b): `a` is pinned by the mul
        // gradient once tanh leaves the path, so sigmoid and mul stay on it.
        let reg = default_registry();
        let mut g = Graph::new();
        let x = g.add_placeholder("x", Shape(vec![64]), Dtype::F32, false, "").unwrap();
        let a = g.add_node(&reg, "tanh", vec![(x, 0).into()], Attrs::new(), "").unwrap();
        let b = g.add_node(&reg, "sigmoid", vec![(a, 0).into()], Attrs::new(), "").unwrap();
        let m = g
            .add_node(&reg, "mul", vec![(a, 0).into(), (b, 0).into()], Attrs::new(), "")
            .unwrap();
        let loss = g.add_node(&reg, "sum_reduce", vec![(m, 0).into()], Attrs::new(), "").unwrap();
        g.outputs = vec![(loss, 0).into()];
        let s = prepare(&g, &reg);
        let cfg = StrategyConfig::for_strategy(Strategy::Echo);
        let mut state = EchoState::new(&s.graph, &s.gradinfo, &s.shapes, &s.use_refs, &reg, &cfg);
        state.apply_dead_nodes();
        state.trim_all();
        // tanh was removed (its output is pinned either way); its output edge
        // is now a direct gradient reference, so downstream stays mirrored
        assert!(state.removed.contains(&a));
        assert!(state.kept.contains(&b));
        assert!(state.kept.contains(&m));
        assert!(state.stash.contains(&(a, 0).into()));
    }
}
