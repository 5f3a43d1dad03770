//! Computation-graph middle-end with selective recomputation.
//!
//! The crate models training graphs (forward plus reverse-mode gradients),
//! rewrites them so cheap feature maps are recomputed during the backward
//! pass instead of stashed, plans memory analytically, and provides a
//! reference interpreter that proves rewrites preserve outputs and gradients.

pub mod autodiff;
pub mod cost;
pub mod dot;
pub mod gen;
pub mod graph;
pub mod interp;
pub mod ops;
pub mod passes;
pub mod pipeline;
pub mod planner;
pub mod recompute;
pub mod serialize;
pub mod zoo;

pub use autodiff::{build_gradient_graph, GradInfo};
pub use cost::{estimate, CostReport};
pub use graph::{AttrValue, Attrs, Dtype, EdgeRef, Graph, GraphError, Node, NodeId, NodeKind, Shape};
pub use ops::{default_registry, GradDeps, OpDef, Registry};
pub use passes::{edge_use_refs, eliminate_dead_nodes, infer_shapes, EdgeShapes, UseRefMap};
pub use pipeline::{run_pipeline, PipelineError, PipelineResult};
pub use planner::{build_schedule, live_bytes_oracle, plan, MemoryReport, Schedule};
pub use recompute::{
    partition_subgraphs, run_echo, run_mirror, RecomputePlan, Strategy, StrategyConfig,
};
pub use zoo::{ZooModel, ZooSpec};
