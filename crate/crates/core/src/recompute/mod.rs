//! Recomputation strategies: rewrite a gradient graph so cheap feature maps
//! are recomputed in the backward pass instead of stashed.
//!
//! `mirror` replays every cheap feature-map producer unconditionally (the
//! prior-work baseline); `echo` partitions the forward graph at compute-heavy
//! boundaries, then trims the mirror set with a released-versus-allocated
//! bytes comparison per co-removal group, handles compute-heavy gradients
//! that need only their inputs via dead mirrors, and stashes binarizable
//! feature maps as 1-bit masks.

mod echo;
mod mirror;
mod partition;

pub use echo::{run_echo, EchoState};
pub use mirror::run_mirror;
pub use partition::{partition_subgraphs, Subgraph};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::GradInfo;
use crate::graph::{attrs, AttrValue, EdgeRef, Graph, GraphError, NodeId, NodeKind};
use crate::ops::Registry;
use crate::passes::EdgeShapes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Baseline,
    Mirror,
    Echo,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Strategy::Baseline => write!(f, "baseline"),
            Strategy::Mirror => write!(f, "mirror"),
            Strategy::Echo => write!(f, "echo"),
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Strategy::Baseline),
            "mirror" => Ok(Strategy::Mirror),
            "echo" => Ok(Strategy::Echo),
            other => Err(format!("unknown strategy `{}`", other)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    /// Overrides the registry's compute-heavy flags when set.
    pub compute_heavy_ops: Option<BTreeSet<String>>,
    pub binarizable_ops: Option<BTreeSet<String>>,
    pub enable_dead_node: bool,
    pub enable_binarization: bool,
    /// When set, a node is compute-heavy iff its flop cost reaches this bound.
    pub flop_threshold_override: Option<u64>,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            strategy: Strategy::Echo,
            compute_heavy_ops: None,
            binarizable_ops: None,
            enable_dead_node: true,
            enable_binarization: true,
            flop_threshold_override: None,
        }
    }
}

impl StrategyConfig {
    pub fn for_strategy(strategy: Strategy) -> Self {
        StrategyConfig { strategy, ..StrategyConfig::default() }
    }

    pub fn is_heavy(
        &self,
        registry: &Registry,
        graph: &Graph,
        shapes: &EdgeShapes,
        id: NodeId,
    ) -> bool {
        let n = graph.node(id);
        if graph.is_placeholder(id) {
            return false;
        }
        if let Some(t) = self.flop_threshold_override {
            let ins: Vec<_> = n.inputs.iter().map(|&e| shapes.shape(e).clone()).collect();
            let outs: Vec<_> = n.output_edges().map(|e| shapes.shape(e).clone()).collect();
            return registry.node_cost(&n.op, &ins, &outs, &n.attrs) >= t;
        }
        if let Some(set) = &self.compute_heavy_ops {
            return set.contains(&n.op);
        }
        registry.lookup(&n.op).map_or(false, |d| d.compute_heavy)
    }

    pub fn is_binarizable(&self, registry: &Registry, op: &str) -> bool {
        match &self.binarizable_ops {
            Some(set) => set.contains(op),
            None => registry.lookup(op).map_or(false, |d| d.binarizable),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BinarizedEdge {
    pub edge: EdgeRef,
    pub encode: NodeId,
    pub decodes: Vec<NodeId>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SubgraphPlan {
    pub seed: NodeId,
    pub members: Vec<NodeId>,
    /// Members still on the recomputation path.
    pub mirrored: BTreeSet<NodeId>,
    /// Members trimmed off the path; their outputs are stashed instead.
    pub removed: BTreeSet<NodeId>,
    pub frontier: BTreeSet<EdgeRef>,
    pub dead_mirrors: Vec<NodeId>,
    pub binarized: Vec<BinarizedEdge>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RecomputePlan {
    pub subgraphs: Vec<SubgraphPlan>,
    /// Forward node -> its mirror node in the transformed graph.
    pub mirror_map: BTreeMap<NodeId, NodeId>,
    /// Bytes that persist across the forward/backward boundary (planner
    /// conventions: trainable placeholders and graph outputs excluded).
    pub stashed_bytes: u64,
    /// Flop total of live mirror nodes (dead mirrors excluded).
    pub recompute_flops: u64,
}

impl RecomputePlan {
    pub fn mirrored_count(&self) -> usize {
        self.subgraphs.iter().map(|s| s.mirrored.len()).sum()
    }

    pub fn removed_count(&self) -> usize {
        self.subgraphs.iter().map(|s| s.removed.len()).sum()
    }

    pub fn dead_mirror_count(&self) -> usize {
        self.subgraphs.iter().map(|s| s.dead_mirrors.len()).sum()
    }

    pub fn binarized_count(&self) -> usize {
        self.subgraphs.iter().map(|s| s.binarized.len()).sum()
    }
}

/// A compute-heavy node whose gradient needs only inputs, together with the
/// feature-map edges we can serve from the recomputation path.
#[derive(Debug, Clone)]
pub struct DeadEntry {
    pub heavy: NodeId,
    /// (feature-map edge, producing member) pairs; a redirect applies only
    /// while its producing member stays mirrored.
    pub redirects: Vec<(EdgeRef, NodeId)>,
}

/// Everything the graph rewrite needs after planning decisions are final.
pub(crate) struct Decisions {
    pub kept: BTreeSet<NodeId>,
    pub dead_entries: Vec<DeadEntry>,
    /// (producing member, feature-map edge) pairs stashed as 1-bit masks.
    pub binarized: Vec<(NodeId, EdgeRef)>,
}

fn backward_consumer(kind: NodeKind) -> bool {
    matches!(kind, NodeKind::Gradient | NodeKind::Mirror | NodeKind::Decode)
}

/// Edges that persist across the forward/backward boundary: produced in the
/// forward region (including encodes) with at least one backward consumer,
/// excluding graph outputs and trainable placeholders. Dead mirrors do not
/// count as consumers (they are eliminated before planning).
pub fn stashed_edges(graph: &Graph) -> BTreeSet<crate::graph::EdgeRef> {
    let outputs = graph.output_set();
    let consumers = graph.consumer_index();
    let mut set = BTreeSet::new();
    for n in graph.nodes() {
        if !matches!(n.kind, NodeKind::Forward | NodeKind::Encode) {
            continue;
        }
        if graph.placeholder_info(n.id).map_or(false, |i| i.trainable) {
            continue;
        }
        for e in n.output_edges() {
            if outputs.contains(&e) {
                continue;
            }
            let crosses = consumers
                .get(&e)
                .map_or(false, |cs| cs.iter().any(|&c| backward_consumer(graph.node(c).kind)));
            if crosses {
                set.insert(e);
            }
        }
    }
    set
}

pub(crate) fn stash_bytes(graph: &Graph, shapes: &EdgeShapes) -> u64 {
    stashed_edges(graph)
        .into_iter()
        .filter_map(|e| shapes.get(e).map(|(s, d)| d.tensor_bytes(s.elems())))
        .sum()
}

/// Apply final mirror/dead-node/binarization decisions to the graph.
pub(crate) fn materialize(
    graph: &Graph,
    registry: &Registry,
    gradinfo: &GradInfo,
    shapes: &EdgeShapes,
    config: &StrategyConfig,
    decisions: &Decisions,
    subgraphs: Vec<(Subgraph, BTreeSet<NodeId>, BTreeSet<NodeId>)>,
) -> Result<(Graph, RecomputePlan), GraphError> {
    let mut g = graph.clone();
    let topo_pos: BTreeMap<NodeId, usize> = graph
        .topo_order()?
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i))
        .collect();

    // Mirror nodes, producers before consumers.
    let mut kept_sorted: Vec<NodeId> = decisions.kept.iter().copied().collect();
    kept_sorted.sort_by_key(|id| topo_pos[id]);
    let mut mirror_edges: BTreeMap<EdgeRef, EdgeRef> = BTreeMap::new();
    let mut mirror_map: BTreeMap<NodeId, NodeId> = BTreeMap::new();
    for &m in &kept_sorted {
        let node = graph.node(m).clone();
        let inputs: Vec<EdgeRef> = node
            .inputs
            .iter()
            .map(|e| mirror_edges.get(e).copied().unwrap_or(*e))
            .collect();
        let id = g.add_node_kind(
            registry,
            &node.op,
            inputs,
            node.attrs.clone(),
            &node.tag,
            NodeKind::Mirror,
            Some(m),
        )?;
        mirror_map.insert(m, id);
        for k in 0..node.num_outputs {
            mirror_edges.insert(EdgeRef::new(m, k), EdgeRef::new(id, k));
        }
    }

    // Redirect gradient references to recomputed edges. Gradients of
    // compute-heavy nodes keep their original references; the dead-node
    // entries below are the only mechanism that may move them.
    let grad_ids: Vec<NodeId> = gradinfo.grad_nodes.iter().copied().collect();
    for &gid in &grad_ids {
        if g.get_node(gid).is_none() {
            continue;
        }
        let fwd = gradinfo.grad_node_of.get(&gid).copied();
        let fwd_heavy = fwd.map_or(false, |f| config.is_heavy(registry, graph, shapes, f));
        if fwd_heavy {
            continue;
        }
        let node = g.node_mut(gid);
        for e in node.inputs.iter_mut() {
            if let Some(&me) = mirror_edges.get(e) {
                *e = me;
            }
        }
    }

    // Dead mirrors for heavy nodes whose input feature maps are recomputed.
    let mut dead_records: Vec<(NodeId, NodeId)> = Vec::new(); // (heavy, dead mirror id)
    for entry in &decisions.dead_entries {
        let valid: Vec<&(EdgeRef, NodeId)> = entry
            .redirects
            .iter()
            .filter(|(_, m)| decisions.kept.contains(m))
            .collect();
        if valid.is_empty() {
            continue;
        }
        for (e, _) in &valid {
            let me = mirror_edges[e];
            for &gid in &grad_ids {
                if gradinfo.grad_node_of.get(&gid) != Some(&entry.heavy) {
                    continue;
                }
                let node = g.node_mut(gid);
                for slot in node.inputs.iter_mut() {
                    if slot == e {
                        *slot = me;
                    }
                }
            }
        }
        let heavy_node = graph.node(entry.heavy).clone();
        let inputs: Vec<EdgeRef> = heavy_node
            .inputs
            .iter()
            .map(|e| mirror_edges.get(e).copied().unwrap_or(*e))
            .collect();
        let dead_id = g.add_node_kind(
            registry,
            &heavy_node.op,
            inputs,
            heavy_node.attrs.clone(),
            &heavy_node.tag,
            NodeKind::DeadMirror,
            Some(entry.heavy),
        )?;
        dead_records.push((entry.heavy, dead_id));
    }

    // Binarized feature maps: encode right after the producer, decode before
    // each gradient consumer.
    let mut bin_records: Vec<(NodeId, BinarizedEdge)> = Vec::new();
    for &(producer, f) in &decisions.binarized {
        let dtype = shapes.dtype(f);
        let tag = graph.node(producer).tag.clone();
        let enc = g.add_node_kind(
            registry,
            "encode",
            vec![f],
            crate::graph::Attrs::new(),
            &tag,
            NodeKind::Encode,
            None,
        )?;
        let dt_attr = attrs([(
            "dtype",
            AttrValue::Str(match dtype {
                crate::graph::Dtype::F64 => "f64".into(),
                _ => "f32".into(),
            }),
        )]);
        let mut decodes = Vec::new();
        for &gid in &grad_ids {
            if g.get_node(gid).map_or(true, |n| !n.inputs.contains(&f)) {
                continue;
            }
            let dec = g.add_node_kind(
                registry,
                "decode",
                vec![EdgeRef::new(enc, 0)],
                dt_attr.clone(),
                &tag,
                NodeKind::Decode,
                None,
            )?;
            let node = g.node_mut(gid);
            for slot in node.inputs.iter_mut() {
                if *slot == f {
                    *slot = EdgeRef::new(dec, 0);
                }
            }
            decodes.push(dec);
        }
        bin_records.push((producer, BinarizedEdge { edge: f, encode: enc, decodes }));
    }

    // Assemble the per-subgraph plan.
    let mut plan = RecomputePlan::default();
    plan.mirror_map = mirror_map;
    for (sub, mirrored, removed) in subgraphs {
        let mut sp = SubgraphPlan {
            seed: sub.seed,
            members: sub.members.clone(),
            mirrored,
            removed,
            frontier: sub.frontier.clone(),
            dead_mirrors: Vec::new(),
            binarized: Vec::new(),
        };
        for &(heavy, dead_id) in &dead_records {
            // associate with the subgraph providing the mirror path
            let entry = decisions.dead_entries.iter().find(|d| d.heavy == heavy).unwrap();
            if entry
                .redirects
                .iter()
                .any(|(_, m)| sub.member_set.contains(m) && decisions.kept.contains(m))
            {
                sp.dead_mirrors.push(dead_id);
            }
        }
        for (producer, rec) in &bin_records {
            if sub.member_set.contains(producer) {
                sp.binarized.push(rec.clone());
            }
        }
        plan.subgraphs.push(sp);
    }

    // Shapes for the appended nodes are needed for the flop estimate.
    let new_shapes = crate::passes::infer_shapes(&g, registry)
        .map_err(|e| GraphError::Parse(format!("post-rewrite inference failed: {}", e)))?;
    plan.stashed_bytes = stash_bytes(&g, &new_shapes);
    for (&m, &mid) in &plan.mirror_map {
        let _ = m;
        let n = g.node(mid);
        let ins: Vec<_> = n.inputs.iter().map(|&e| new_shapes.shape(e).clone()).collect();
        let outs: Vec<_> = n.output_edges().map(|e| new_shapes.shape(e).clone()).collect();
        plan.recompute_flops += registry.node_cost(&n.op, &ins, &outs, &n.attrs);
    }
    Ok((g, plan))
}
