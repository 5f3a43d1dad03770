//! DOT export for eyeballing graphs and recomputation plans.

use std::collections::BTreeSet;

use crate::graph::{EdgeRef, Graph, NodeKind};

/// Extra styling inputs: which edges persist as stashed feature maps.
#[derive(Debug, Default, Clone)]
pub struct DotHighlights {
    pub feature_map_edges: BTreeSet<EdgeRef>,
}

pub fn export_dot(graph: &Graph, highlights: Option<&DotHighlights>) -> String {
    let mut out = String::from("digraph g {\n  rankdir=TB;\n");
    for n in graph.nodes() {
        let label = if graph.is_placeholder(n.id) {
            let info = graph.placeholder_info(n.id).unwrap();
            format!("{}\\n{}", info.name, info.shape)
        } else {
            format!("{}#{}", n.op, n.id)
        };
        let style = match n.kind {
            NodeKind::Forward if graph.is_placeholder(n.id) => {
                "shape=ellipse, style=filled, fillcolor=white"
            }
            NodeKind::Forward => "shape=box",
            NodeKind::Gradient => "shape=box, style=filled, fillcolor=lightyellow",
            NodeKind::Mirror => "shape=box, style=\"filled,dashed\", fillcolor=gray80, mirror=true",
            NodeKind::DeadMirror => {
                "shape=box, style=\"filled,dotted\", fillcolor=gray90, mirror=dead"
            }
            NodeKind::Encode => "shape=hexagon, style=filled, fillcolor=lightblue",
            NodeKind::Decode => "shape=hexagon, style=filled, fillcolor=lightcyan",
        };
        out.push_str(&format!("  n{} [label=\"{}\", {}];\n", n.id, label, style));
    }
    for n in graph.nodes() {
        for &e in &n.inputs {
            let stashed = highlights
                .map(|h| h.feature_map_edges.contains(&e))
                .unwrap_or(false);
            let attrs = if stashed {
                " [color=red, penwidth=2.0, stash=true]"
            } else {
                ""
            };
            out.push_str(&format!("  n{} -> n{}{};\n", e.node, n.id, attrs));
        }
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Attrs, Dtype, Shape};
    use crate::ops::default_registry;

    #[test]
    fn empty_graph_skeleton() {
        let dot = export_dot(&Graph::new(), None);
        assert!(dot.starts_with("digraph g {"));
        assert!(dot.ends_with("}\n"));
        assert!(!dot.contains("->"));
    }

    #[test]
    fn add_tanh_statement_counts() {
        let reg = default_registry();
        let mut g = Graph::new();
        let x = g.add_placeholder("x", Shape(vec![8]), Dtype::F32, false, "").unwrap();
        let y = g.add_placeholder("y", Shape(vec![8]), Dtype::F32, false, "").unwrap();
        let s = g
            .add_node(&reg, "add", vec![EdgeRef::new(x, 0), EdgeRef::new(y, 0)], Attrs::new(), "")
            .unwrap();
        let t = g.add_node(&reg, "tanh", vec![EdgeRef::new(s, 0)], Attrs::new(), "").unwrap();
        g.outputs = vec![EdgeRef::new(t, 0)];
        let dot = export_dot(&g, None);
        assert_eq!(dot.matches("[label=").count(), 4);
        assert_eq!(dot.matches("->").count(), 3);
    }
}
