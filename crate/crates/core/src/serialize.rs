//! Graph documents: a versioned JSON tree.
//!
//! Schema (version 1):
//! `{version, placeholders:[{id,name,shape,dtype,trainable,tag}],
//!   nodes:[{id,op,inputs:[[node,out]],attrs,tag}], outputs:[[node,out]]}`
//!
//! Forward graphs round-trip through exactly these fields. Transformed graphs
//! additionally carry `kind`/`mirror_of` on nodes, omitted when default, so
//! plain forward documents stay schema-minimal.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::graph::{Attrs, Dtype, EdgeRef, Graph, GraphError, NodeKind, Shape};
use crate::ops::Registry;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PlaceholderDoc {
    id: usize,
    name: String,
    shape: Vec<u64>,
    dtype: Dtype,
    trainable: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    tag: String,
}

#[derive(Serialize, Deserialize)]
struct NodeDoc {
    id: usize,
    op: String,
    inputs: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    attrs: Attrs,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<NodeKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mirror_of: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    version: u32,
    placeholders: Vec<PlaceholderDoc>,
    nodes: Vec<NodeDoc>,
    outputs: Vec<(usize, usize)>,
}

pub fn serialize(graph: &Graph) -> Vec<u8> {
    serialize_string(graph).into_bytes()
}

pub fn serialize_string(graph: &Graph) -> String {
    let mut doc = GraphDoc {
        version: SCHEMA_VERSION,
        placeholders: Vec::new(),
        nodes: Vec::new(),
        outputs: graph.outputs.iter().map(|e| (e.node, e.output)).collect(),
    };
    for n in graph.nodes() {
        if let Some(info) = graph.placeholder_info(n.id) {
            doc.placeholders.push(PlaceholderDoc {
                id: n.id,
                name: info.name.clone(),
                shape: info.shape.0.clone(),
                dtype: info.dtype,
                trainable: info.trainable,
                tag: n.tag.clone(),
            });
        } else {
            doc.nodes.push(NodeDoc {
                id: n.id,
                op: n.op.clone(),
                inputs: n.inputs.iter().map(|e| (e.node, e.output)).collect(),
                attrs: n.attrs.clone(),
                tag: n.tag.clone(),
                kind: match n.kind {
                    NodeKind::Forward => None,
                    k => Some(k),
                },
                mirror_of: n.mirror_of,
            });
        }
    }
    serde_json::to_string_pretty(&doc).expect("graph document always serializes")
}

pub fn deserialize(bytes: &[u8], registry: &Registry) -> Result<Graph, GraphError> {
    let doc: GraphDoc = serde_json::from_slice(bytes)
        .map_err(|e| GraphError::Parse(format!("malformed graph document: {}", e)))?;
    if doc.version != SCHEMA_VERSION {
        return Err(GraphError::Parse(format!(
            "unsupported document version {}",
            doc.version
        )));
    }

    // Nodes may appear in any id order in the document; rebuild slots densely.
    let mut graph = Graph::new();
    let mut entries: Vec<(usize, Option<&PlaceholderDoc>, Option<&NodeDoc>)> = Vec::new();
    for p in &doc.placeholders {
        entries.push((p.id, Some(p), None));
    }
    for n in &doc.nodes {
        entries.push((n.id, None, Some(n)));
    }
    entries.sort_by_key(|(id, _, _)| *id);
    for w in entries.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(GraphError::Parse(format!("duplicate node id {}", w[0].0)));
        }
    }

    let mut id_map: BTreeMap<usize, usize> = BTreeMap::new();
    for (orig_id, ph, node) in &entries {
        if let Some(p) = ph {
            let shape = Shape(p.shape.clone());
            shape.validate()?;
            let new = graph.add_placeholder(&p.name, shape, p.dtype, p.trainable, &p.tag)?;
            id_map.insert(*orig_id, new);
        } else if let Some(n) = node {
            let inputs: Result<Vec<EdgeRef>, GraphError> = n
                .inputs
                .iter()
                .map(|&(nid, out)| {
                    id_map
                        .get(&nid)
                        .map(|&m| EdgeRef::new(m, out))
                        .ok_or(GraphError::DanglingEdge(EdgeRef::new(nid, out)))
                })
                .collect();
            let kind = n.kind.unwrap_or(NodeKind::Forward);
            let mirror_of = n.mirror_of.and_then(|m| id_map.get(&m).copied());
            let new = graph.add_node_kind(
                registry,
                &n.op,
                inputs?,
                n.attrs.clone(),
                &n.tag,
                kind,
                mirror_of,
            )?;
            id_map.insert(*orig_id, new);
        }
    }
    graph.outputs = doc
        .outputs
        .iter()
        .map(|&(nid, out)| {
            id_map
                .get(&nid)
                .map(|&m| EdgeRef::new(m, out))
                .ok_or(GraphError::DanglingEdge(EdgeRef::new(nid, out)))
        })
        .collect::<Result<_, _>>()?;
    graph.validate(registry)?;
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{attrs, AttrValue};
    use crate::ops::default_registry;

    #[test]
    fn round_trip_add_tanh() {
        let reg = default_registry();
        let mut g = Graph::new();
        let x = g.add_placeholder("x", Shape(vec![8]), Dtype::F32, false, "cell").unwrap();
        let y = g.add_placeholder("y", Shape(vec![8]), Dtype::F32, false, "cell").unwrap();
        let s = g
            .add_node(&reg, "add", vec![EdgeRef::new(x, 0), EdgeRef::new(y, 0)], Attrs::new(), "cell")
            .unwrap();
        let t = g
            .add_node(
                &reg,
                "tanh",
                vec![EdgeRef::new(s, 0)],
                attrs([("note", AttrValue::Str("demo".into()))]),
                "cell",
            )
            .unwrap();
        g.outputs = vec![EdgeRef::new(t, 0)];

        let bytes = serialize(&g);
        let back = deserialize(&bytes, &reg).unwrap();
        assert!(g.structural_eq(&back));
    }

    #[test]
    fn missing_nodes_key_is_a_parse_error() {
        let reg = default_registry();
        let doc = br#"{"version":1,"placeholders":[],"outputs":[]}"#;
        assert!(matches!(deserialize(doc, &reg), Err(GraphError::Parse(_))));
    }

    #[test]
    fn unknown_op_on_load() {
        let reg = default_registry();
        let doc = br#"{"version":1,"placeholders":[{"id":0,"name":"x","shape":[4],"dtype":"f32","trainable":false}],"nodes":[{"id":1,"op":"gelu","inputs":[[0,0]]}],"outputs":[[1,0]]}"#;
        assert!(matches!(deserialize(doc, &reg), Err(GraphError::UnknownOp(_))));
    }

    #[test]
    fn non_positive_dim_rejected() {
        let reg = default_registry();
        let doc = br#"{"version":1,"placeholders":[{"id":0,"name":"x","shape":[0],"dtype":"f32","trainable":false}],"nodes":[],"outputs":[[0,0]]}"#;
        assert!(matches!(deserialize(doc, &reg), Err(GraphError::BadShape(_))));
    }
}
