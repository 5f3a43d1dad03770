//! Supporting pipeline passes: shape/dtype inference over full graphs, edge
//! use-reference counting, and dead-node elimination.

use std::collections::BTreeMap;

use crate::graph::{Dtype, EdgeRef, Graph, NodeId, Shape};
use crate::ops::Registry;

/// Shapes and dtypes per tensor edge, filled by inference.
#[derive(Debug, Clone, Default)]
pub struct EdgeShapes(pub BTreeMap<EdgeRef, (Shape, Dtype)>);

impl EdgeShapes {
    pub fn shape(&self, e: EdgeRef) -> &Shape {
        &self.0[&e].0
    }

    pub fn dtype(&self, e: EdgeRef) -> Dtype {
        self.0[&e].1
    }

    pub fn bytes(&self, e: EdgeRef) -> u64 {
        let (s, d) = &self.0[&e];
        d.tensor_bytes(s.elems())
    }

    pub fn elems(&self, e: EdgeRef) -> u64 {
        self.0[&e].0.elems()
    }

    pub fn get(&self, e: EdgeRef) -> Option<&(Shape, Dtype)> {
        self.0.get(&e)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PassError {
    #[error("shape inference failed at node {node} ({op}): {msg}")]
    Shape { node: NodeId, op: String, msg: String },
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
}

/// Walk the graph in topological order and infer every edge's shape and dtype.
pub fn infer_shapes(graph: &Graph, registry: &Registry) -> Result<EdgeShapes, PassError> {
    let order = graph.topo_order()?;
    let mut shapes = EdgeShapes::default();
    for id in order {
        let n = graph.node(id);
        if let Some(info) = graph.placeholder_info(id) {
            shapes
                .0
                .insert(EdgeRef::new(id, 0), (info.shape.clone(), info.dtype));
            continue;
        }
        let in_shapes: Vec<Shape> = n.inputs.iter().map(|&e| shapes.shape(e).clone()).collect();
        let in_dtypes: Vec<Dtype> = n.inputs.iter().map(|&e| shapes.dtype(e)).collect();
        let outs = registry
            .infer_shape(&n.op, &in_shapes, &n.attrs)
            .map_err(|e| PassError::Shape { node: id, op: n.op.clone(), msg: e.to_string() })?;
        let dts = registry.infer_dtype(&n.op, &in_dtypes, &n.attrs);
        for (k, (s, d)) in outs.into_iter().zip(dts.into_iter()).enumerate() {
            shapes.0.insert(EdgeRef::new(id, k), (s, d));
        }
    }
    Ok(shapes)
}

/// Count of distinct consumer nodes per edge; graph outputs add one.
#[derive(Debug, Clone, Default)]
pub struct UseRefMap(pub BTreeMap<EdgeRef, usize>);

impl UseRefMap {
    pub fn count(&self, e: EdgeRef) -> usize {
        self.0.get(&e).copied().unwrap_or(0)
    }
}

pub fn edge_use_refs(graph: &Graph) -> UseRefMap {
    let mut map = UseRefMap::default();
    for n in graph.nodes() {
        for e in n.output_edges() {
            map.0.entry(e).or_insert(0);
        }
    }
    for (e, consumers) in graph.consumer_index() {
        map.0.insert(e, consumers.len());
    }
    for e in graph.output_set() {
        *map.0.entry(e).or_insert(0) += 1;
    }
    map
}

/// Iteratively drop nodes with zero consumers that are neither outputs nor
/// placeholders; runs to a fixed point since a removal can orphan producers.
pub fn eliminate_dead_nodes(graph: &Graph) -> Graph {
    let mut g = graph.clone();
    let output_nodes: std::collections::BTreeSet<NodeId> =
        g.outputs.iter().map(|e| e.node).collect();
    loop {
        let consumers = g.consumer_index();
        let dead: Vec<NodeId> = g
            .node_ids()
            .filter(|&id| {
                !g.is_placeholder(id)
                    && !output_nodes.contains(&id)
                    && g.node(id)
                        .output_edges()
                        .all(|e| consumers.get(&e).map_or(true, |c| c.is_empty()))
            })
            .collect();
        if dead.is_empty() {
            return g;
        }
        for id in dead {
            g.delete_node(id);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Attrs, Dtype, EdgeRef, Shape};
    use crate::ops::default_registry;

    #[test]
    fn chain_edges_all_same_shape() {
        let reg = default_registry();
        let mut g = Graph::new();
        let x = g.add_placeholder("x", Shape(vec![8]), Dtype::F32, false, "").unwrap();
        let y = g.add_placeholder("y", Shape(vec![8]), Dtype::F32, false, "").unwrap();
        let s = g
            .add_node(&reg, "add", vec![EdgeRef::new(x, 0), EdgeRef::new(y, 0)], Attrs::new(), "")
            .unwrap();
        let t = g.add_node(&reg, "tanh", vec![EdgeRef::new(s, 0)], Attrs::new(), "").unwrap();
        g.outputs = vec![EdgeRef::new(t, 0)];
        let shapes = infer_shapes(&g, &reg).unwrap();
        for (_, (s, _)) in shapes.0.iter() {
            assert_eq!(s, &Shape(vec![8]));
        }
    }

    #[test]
    fn fc_chain_shape() {
        let reg = default_registry();
        let mut g = Graph::new();
        let x = g.add_placeholder("x", Shape(vec![4, 5]), Dtype::F32, false, "").unwrap();
        let w = g.add_placeholder("w", Shape(vec![20, 5]), Dtype::F32, true, "").unwrap();
        let b = g.add_placeholder("b", Shape(vec![20]), Dtype::F32, true, "").unwrap();
        let fc = g
            .add_node(
                &reg,
                "fully_connected",
                vec![EdgeRef::new(x, 0), EdgeRef::new(w, 0), EdgeRef::new(b, 0)],
                Attrs::new(),
                "",
            )
            .unwrap();
        g.outputs = vec![EdgeRef::new(fc, 0)];
        let shapes = infer_shapes(&g, &reg).unwrap();
        assert_eq!(shapes.shape(EdgeRef::new(fc, 0)), &Shape(vec![4, 20]));
    }

    #[test]
    fn shape_error_names_the_node() {
        let reg = default_registry();
        let mut g = Graph::new();
        let x = g.add_placeholder("x", Shape(vec![4]), Dtype::F32, false, "").unwrap();
        let y = g.add_placeholder("y", Shape(vec![5]), Dtype::F32, false, "").unwrap();
        let s = g
            .add_node(&reg, "add", vec![EdgeRef::new(x, 0), EdgeRef::new(y, 0)], Attrs::new(), "")
            .unwrap();
        g.outputs = vec![EdgeRef::new(s, 0)];
        match infer_shapes(&g, &reg) {
            Err(PassError::Shape { node, .. }) => assert_eq!(node, s),
            other => panic!("expected shape error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn interior_chain_counts_are_one() {
        let reg = default_registry();
        let mut g = Graph::new();
        let x = g.add_placeholder("x", Shape(vec![4]), Dtype::F32, false, "").unwrap();
        let a = g.add_node(&reg, "tanh", vec![EdgeRef::new(x, 0)], Attrs::new(), "").unwrap();
        let b = g.add_node(&reg, "tanh", vec![EdgeRef::new(a, 0)], Attrs::new(), "").unwrap();
        g.outputs = vec![EdgeRef::new(b, 0)];
        let refs = edge_use_refs(&g);
        assert_eq!(refs.count(EdgeRef::new(x, 0)), 1);
        assert_eq!(refs.count(EdgeRef::new(a, 0)), 1);
        assert_eq!(refs.count(EdgeRef::new(b, 0)), 1); // the output reference
    }

    #[test]
    fn dead_branch_removed_and_idempotent() {
        let reg = default_registry();
        let mut g = Graph::new();
        let x = g.add_placeholder("x", Shape(vec![4]), Dtype::F32, false, "").unwrap();
        let live = g.add_node(&reg, "tanh", vec![EdgeRef::new(x, 0)], Attrs::new(), "").unwrap();
        let dead1 = g.add_node(&reg, "sigmoid", vec![EdgeRef::new(x, 0)], Attrs::new(), "").unwrap();
        let _dead2 = g.add_node(&reg, "tanh", vec![EdgeRef::new(dead1, 0)], Attrs::new(), "").unwrap();
        g.outputs = vec![EdgeRef::new(live, 0)];

        let cleaned = eliminate_dead_nodes(&g);
        assert_eq!(cleaned.num_nodes(), 2);
        let again = eliminate_dead_nodes(&cleaned);
        assert!(cleaned.structural_eq(&again));
    }
}
