//! Core computation-graph data model: nodes, tensor edges, shapes and dtypes.
//!
//! Graphs are append-only while a pass runs; node ids stay stable for the
//! lifetime of a graph, passes may only append new nodes or tombstone dead
//! ones. Traversal order ties are always broken by ascending node id so that
//! every downstream report is reproducible.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::cmp::Reverse;

use serde::{Deserialize, Serialize};

use crate::ops::Registry;

pub type NodeId = usize;

/// Identifies one tensor: the producing node plus its output slot.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeRef {
    pub node: NodeId,
    pub output: usize,
}

impl EdgeRef {
    pub fn new(node: NodeId, output: usize) -> Self {
        EdgeRef { node, output }
    }
}

impl From<(NodeId, usize)> for EdgeRef {
    fn from((node, output): (NodeId, usize)) -> Self {
        EdgeRef { node, output }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    Bit,
}

impl Dtype {
    /// Bytes needed for `elems` elements; bit tensors pack 8 per byte,
    /// rounded up to whole bytes, at least one byte when non-empty.
    pub fn tensor_bytes(self, elems: u64) -> u64 {
        match self {
            Dtype::F32 => elems * 4,
            Dtype::F64 => elems * 8,
            Dtype::Bit => {
                if elems == 0 {
                    0
                } else {
                    (elems + 7) / 8
                }
            }
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
            Dtype::Bit => write!(f, "bit"),
        }
    }
}

/// Tensor shape. An empty dim list is a scalar (one element).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Shape(pub Vec<u64>);

impl Shape {
    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[u64] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn elems(&self) -> u64 {
        self.0.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.elems() == 1
    }

    /// All dims must be positive and the element count must fit in 64 bits.
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut total: u64 = 1;
        for &d in &self.0 {
            if d == 0 {
                return Err(GraphError::BadShape(format!("non-positive dim in {:?}", self.0)));
            }
            total = total
                .checked_mul(d)
                .ok_or_else(|| GraphError::BadShape(format!("element count overflow in {:?}", self.0)))?;
        }
        let _ = total;
        Ok(())
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", d)?;
        }
        write!(f, "]")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    Ints(Vec<i64>),
}

impl AttrValue {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            AttrValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            AttrValue::Bool(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_float(&self) -> Option<f64> {
        match self {
            AttrValue::Float(v) => Some(*v),
            AttrValue::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            AttrValue::Str(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_ints(&self) -> Option<&[i64]> {
        match self {
            AttrValue::Ints(v) => Some(v),
            _ => None,
        }
    }
}

pub type Attrs = BTreeMap<String, AttrValue>;

/// Convenience constructor for attribute maps.
pub fn attrs<const N: usize>(pairs: [(&str, AttrValue); N]) -> Attrs {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKind {
    Forward,
    Gradient,
    Mirror,
    DeadMirror,
    Encode,
    Decode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub op: String,
    pub inputs: Vec<EdgeRef>,
    pub attrs: Attrs,
    pub tag: String,
    pub kind: NodeKind,
    /// Set iff kind is Mirror or DeadMirror: the forward node this one replays.
    pub mirror_of: Option<NodeId>,
    pub num_outputs: usize,
}

impl Node {
    pub fn output_edges(&self) -> impl Iterator<Item = EdgeRef> + '_ {
        (0..self.num_outputs).map(move |k| EdgeRef::new(self.id, k))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaceholderInfo {
    pub name: String,
    pub shape: Shape,
    pub dtype: Dtype,
    pub trainable: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("unknown op `{0}`")]
    UnknownOp(String),
    #[error("op `{op}` expects {expected} inputs, got {got}")]
    ArityMismatch { op: String, expected: String, got: usize },
    #[error("dangling edge reference {0:?}")]
    DanglingEdge(EdgeRef),
    #[error("cycle detected involving node {0}")]
    Cycle(NodeId),
    #[error("invalid shape: {0}")]
    BadShape(String),
    #[error("duplicate placeholder name `{0}`")]
    DuplicatePlaceholder(String),
    #[error("node {0} not found")]
    NoSuchNode(NodeId),
    #[error("graph has no outputs")]
    NoOutputs,
    #[error("parse error: {0}")]
    Parse(String),
}

/// Directed acyclic computation graph. Node storage is a dense slot vector:
/// deleting a node leaves a tombstone so surviving ids never shift.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Option<Node>>,
    placeholders: BTreeMap<NodeId, PlaceholderInfo>,
    pub outputs: Vec<EdgeRef>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn add_placeholder(
        &mut self,
        name: &str,
        shape: Shape,
        dtype: Dtype,
        trainable: bool,
        tag: &str,
    ) -> Result<NodeId, GraphError> {
        shape.validate()?;
        if self.placeholders.values().any(|p| p.name == name) {
            return Err(GraphError::DuplicatePlaceholder(name.to_string()));
        }
        let id = self.nodes.len();
        self.nodes.push(Some(Node {
            id,
            op: "placeholder".to_string(),
            inputs: Vec::new(),
            attrs: Attrs::new(),
            tag: tag.to_string(),
            kind: NodeKind::Forward,
            mirror_of: None,
            num_outputs: 1,
        }));
        self.placeholders.insert(
            id,
            PlaceholderInfo { name: name.to_string(), shape, dtype, trainable },
        );
        Ok(id)
    }

    /// Append a forward operator node, validating against the registry.
    pub fn add_node(
        &mut self,
        registry: &Registry,
        op: &str,
        inputs: Vec<EdgeRef>,
        attrs: Attrs,
        tag: &str,
    ) -> Result<NodeId, GraphError> {
        self.add_node_kind(registry, op, inputs, attrs, tag, NodeKind::Forward, None)
    }

    pub fn add_node_kind(
        &mut self,
        registry: &Registry,
        op: &str,
        inputs: Vec<EdgeRef>,
        attrs: Attrs,
        tag: &str,
        kind: NodeKind,
        mirror_of: Option<NodeId>,
    ) -> Result<NodeId, GraphError> {
        let def = registry
            .lookup(op)
            .ok_or_else(|| GraphError::UnknownOp(op.to_string()))?;
        if !def.arity.accepts(inputs.len()) {
            return Err(GraphError::ArityMismatch {
                op: op.to_string(),
                expected: def.arity.to_string(),
                got: inputs.len(),
            });
        }
        for &e in &inputs {
            self.check_edge(e)?;
        }
        debug_assert_eq!(
            mirror_of.is_some(),
            matches!(kind, NodeKind::Mirror | NodeKind::DeadMirror)
        );
        let id = self.nodes.len();
        self.nodes.push(Some(Node {
            id,
            op: op.to_string(),
            inputs,
            attrs,
            tag: tag.to_string(),
            kind,
            mirror_of,
            num_outputs: def.num_outputs,
        }));
        Ok(id)
    }

    fn check_edge(&self, e: EdgeRef) -> Result<(), GraphError> {
        match self.nodes.get(e.node).and_then(|n| n.as_ref()) {
            Some(n) if e.output < n.num_outputs => Ok(()),
            _ => Err(GraphError::DanglingEdge(e)),
        }
    }

    pub fn node(&self, id: NodeId) -> &Node {
        self.nodes[id].as_ref().expect("node id points at a tombstone")
    }

    pub fn get_node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id).and_then(|n| n.as_ref())
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> &mut Node {
        self.nodes[id].as_mut().expect("node id points at a tombstone")
    }

    pub(crate) fn delete_node(&mut self, id: NodeId) {
        self.placeholders.remove(&id);
        self.nodes[id] = None;
    }

    /// Ids of all live nodes in ascending order.
    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().filter_map(|n| n.as_ref().map(|n| n.id))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> + '_ {
        self.nodes.iter().filter_map(|n| n.as_ref())
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_some()).count()
    }

    /// Total edge count (one per declared output of each live node).
    pub fn num_edges(&self) -> usize {
        self.nodes().map(|n| n.num_outputs).sum()
    }

    pub fn id_bound(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_placeholder(&self, id: NodeId) -> bool {
        self.placeholders.contains_key(&id)
    }

    pub fn placeholder_info(&self, id: NodeId) -> Option<&PlaceholderInfo> {
        self.placeholders.get(&id)
    }

    pub fn placeholder_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.placeholders.keys().copied()
    }

    pub fn output_set(&self) -> BTreeSet<EdgeRef> {
        self.outputs.iter().copied().collect()
    }

    /// Map from edge to the (sorted, deduplicated) list of consumer node ids.
    pub fn consumer_index(&self) -> BTreeMap<EdgeRef, Vec<NodeId>> {
        let mut map: BTreeMap<EdgeRef, BTreeSet<NodeId>> = BTreeMap::new();
        for n in self.nodes() {
            for &e in &n.inputs {
                map.entry(e).or_default().insert(n.id);
            }
        }
        map.into_iter().map(|(e, s)| (e, s.into_iter().collect())).collect()
    }

    /// Deterministic topological order: Kahn's algorithm with ties broken by
    /// ascending node id. Fails if an input-rewiring pass introduced a cycle.
    pub fn topo_order(&self) -> Result<Vec<NodeId>, GraphError> {
        let mut indegree: BTreeMap<NodeId, usize> = BTreeMap::new();
        let mut succs: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for n in self.nodes() {
            indegree.entry(n.id).or_insert(0);
            let mut preds: BTreeSet<NodeId> = BTreeSet::new();
            for &e in &n.inputs {
                if self.get_node(e.node).is_none() {
                    return Err(GraphError::DanglingEdge(e));
                }
                preds.insert(e.node);
            }
            *indegree.get_mut(&n.id).unwrap() += preds.len();
            for p in preds {
                succs.entry(p).or_default().push(n.id);
            }
        }
        let mut heap: BinaryHeap<Reverse<NodeId>> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&id, _)| Reverse(id))
            .collect();
        let mut order = Vec::with_capacity(indegree.len());
        while let Some(Reverse(id)) = heap.pop() {
            order.push(id);
            if let Some(ss) = succs.get(&id) {
                for &s in ss {
                    let d = indegree.get_mut(&s).unwrap();
                    *d -= 1;
                    if *d == 0 {
                        heap.push(Reverse(s));
                    }
                }
            }
        }
        if order.len() != indegree.len() {
            let stuck = indegree
                .iter()
                .find(|(id, _)| !order.contains(id))
                .map(|(&id, _)| id)
                .unwrap_or(0);
            return Err(GraphError::Cycle(stuck));
        }
        Ok(order)
    }

    /// Structural validation: ops resolve, arities match, edges exist,
    /// outputs are valid, the graph is acyclic.
    pub fn validate(&self, registry: &Registry) -> Result<(), GraphError> {
        for n in self.nodes() {
            let def = registry
                .lookup(&n.op)
                .ok_or_else(|| GraphError::UnknownOp(n.op.clone()))?;
            if !def.arity.accepts(n.inputs.len()) {
                return Err(GraphError::ArityMismatch {
                    op: n.op.clone(),
                    expected: def.arity.to_string(),
                    got: n.inputs.len(),
                });
            }
            for &e in &n.inputs {
                self.check_edge(e)?;
            }
        }
        for &e in &self.outputs {
            self.check_edge(e)?;
        }
        self.topo_order()?;
        Ok(())
    }

    /// Field-by-field structural equality over live nodes, placeholders and
    /// outputs; tombstone layout does not matter.
    pub fn structural_eq(&self, other: &Graph) -> bool {
        let a: Vec<&Node> = self.nodes().collect();
        let b: Vec<&Node> = other.nodes().collect();
        a == b && self.placeholders == other.placeholders && self.outputs == other.outputs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::default_registry;

    fn tanh_chain() -> (Graph, Registry) {
        let reg = default_registry();
        let mut g = Graph::new();
        let x = g
            .add_placeholder("x", Shape(vec![8]), Dtype::F32, false, "")
            .unwrap();
        let t = g
            .add_node(&reg, "tanh", vec![EdgeRef::new(x, 0)], Attrs::new(), "")
            .unwrap();
        g.outputs = vec![EdgeRef::new(t, 0)];
        (g, reg)
    }

    #[test]
    fn first_non_placeholder_node_gets_id_one() {
        let (g, _) = tanh_chain();
        assert_eq!(g.node(1).op, "tanh");
    }

    #[test]
    fn fully_connected_takes_three_inputs() {
        let reg = default_registry();
        let mut g = Graph::new();
        let x = g.add_placeholder("x", Shape(vec![2, 3]), Dtype::F32, false, "").unwrap();
        let w = g.add_placeholder("w", Shape(vec![12, 3]), Dtype::F32, true, "").unwrap();
        let b = g.add_placeholder("b", Shape(vec![12]), Dtype::F32, true, "").unwrap();
        let fc = g
            .add_node(
                &reg,
                "fully_connected",
                vec![EdgeRef::new(x, 0), EdgeRef::new(w, 0), EdgeRef::new(b, 0)],
                Attrs::new(),
                "",
            )
            .unwrap();
        assert_eq!(g.node(fc).inputs.len(), 3);
    }

    #[test]
    fn tanh_rejects_two_inputs() {
        let reg = default_registry();
        let mut g = Graph::new();
        let x = g.add_placeholder("x", Shape(vec![4]), Dtype::F32, false, "").unwrap();
        let y = g.add_placeholder("y", Shape(vec![4]), Dtype::F32, false, "").unwrap();
        let err = g
            .add_node(&reg, "tanh", vec![EdgeRef::new(x, 0), EdgeRef::new(y, 0)], Attrs::new(), "")
            .unwrap_err();
        assert!(matches!(err, GraphError::ArityMismatch { .. }));
    }

    #[test]
    fn unknown_op_rejected() {
        let reg = default_registry();
        let mut g = Graph::new();
        let x = g.add_placeholder("x", Shape(vec![4]), Dtype::F32, false, "").unwrap();
        let err = g
            .add_node(&reg, "gelu", vec![EdgeRef::new(x, 0)], Attrs::new(), "")
            .unwrap_err();
        assert!(matches!(err, GraphError::UnknownOp(_)));
    }

    #[test]
    fn dangling_edge_rejected() {
        let reg = default_registry();
        let mut g = Graph::new();
        let err = g
            .add_node(&reg, "tanh", vec![EdgeRef::new(42, 0)], Attrs::new(), "")
            .unwrap_err();
        assert!(matches!(err, GraphError::DanglingEdge(_)));
    }

    #[test]
    fn topo_order_chain() {
        let reg = default_registry();
        let mut g = Graph::new();
        let a = g.add_placeholder("a", Shape(vec![4]), Dtype::F32, false, "").unwrap();
        let b = g.add_node(&reg, "tanh", vec![EdgeRef::new(a, 0)], Attrs::new(), "").unwrap();
        let c = g.add_node(&reg, "tanh", vec![EdgeRef::new(b, 0)], Attrs::new(), "").unwrap();
        assert_eq!(g.topo_order().unwrap(), vec![a, b, c]);
    }

    #[test]
    fn topo_order_diamond_ties_by_id() {
        let reg = default_registry();
        let mut g = Graph::new();
        let a = g.add_placeholder("a", Shape(vec![4]), Dtype::F32, false, "").unwrap();
        let b = g.add_node(&reg, "tanh", vec![EdgeRef::new(a, 0)], Attrs::new(), "").unwrap();
        let c = g.add_node(&reg, "sigmoid", vec![EdgeRef::new(a, 0)], Attrs::new(), "").unwrap();
        let d = g
            .add_node(&reg, "add", vec![EdgeRef::new(b, 0), EdgeRef::new(c, 0)], Attrs::new(), "")
            .unwrap();
        assert_eq!(g.topo_order().unwrap(), vec![a, b, c, d]);
    }

    #[test]
    fn cycle_detected() {
        let (mut g, _) = tanh_chain();
        // Force a back-edge: tanh consumes its own output.
        g.node_mut(1).inputs = vec![EdgeRef::new(1, 0)];
        assert!(matches!(g.topo_order(), Err(GraphError::Cycle(_))));
    }

    #[test]
    fn bit_dtype_rounds_up_to_whole_bytes() {
        assert_eq!(Dtype::Bit.tensor_bytes(1), 1);
        assert_eq!(Dtype::Bit.tensor_bytes(8), 1);
        assert_eq!(Dtype::Bit.tensor_bytes(9), 2);
        assert_eq!(Dtype::Bit.tensor_bytes(1024), 128);
        assert_eq!(Dtype::F32.tensor_bytes(1024), 4096);
    }

    #[test]
    fn node_ids_stable_after_delete() {
        let reg = default_registry();
        let mut g = Graph::new();
        let a = g.add_placeholder("a", Shape(vec![4]), Dtype::F32, false, "").unwrap();
        let b = g.add_node(&reg, "tanh", vec![EdgeRef::new(a, 0)], Attrs::new(), "").unwrap();
        let c = g.add_node(&reg, "sigmoid", vec![EdgeRef::new(a, 0)], Attrs::new(), "").unwrap();
        g.outputs = vec![EdgeRef::new(c, 0)];
        g.delete_node(b);
        assert_eq!(g.node(c).id, c);
        assert!(g.get_node(b).is_none());
        assert_eq!(g.num_nodes(), 2);
    }
}
