//! The end-to-end pass pipeline:
//! Gradient -> InferShape&Type -> EdgeUseRef -> strategy rewrite ->
//! DeadNodeElimination -> InferShape&Type -> AllocateMemory.
//! The first gradient pass never performs recomputation; the rewrite works
//! on a fully shape-annotated graph.

use std::collections::BTreeMap;

use crate::autodiff::{build_gradient_graph, AutodiffError, GradInfo};
use crate::cost::{estimate, CostReport};
use crate::graph::{Graph, GraphError};
use crate::interp::{execute, ExecEnv, ExecError, TensorValue};
use crate::ops::Registry;
use crate::passes::{edge_use_refs, eliminate_dead_nodes, infer_shapes, EdgeShapes, PassError, UseRefMap};
use crate::planner::{build_schedule, plan, MemoryReport, PlanError, Schedule};
use crate::recompute::{
    partition_subgraphs, run_echo, run_mirror, RecomputePlan, Strategy, StrategyConfig,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Pass(#[from] PassError),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

pub struct PipelineResult {
    /// Transformed graph after dead-node elimination.
    pub graph: Graph,
    pub gradinfo: GradInfo,
    pub plan: RecomputePlan,
    pub shapes: EdgeShapes,
    pub use_refs: UseRefMap,
    pub schedule: Schedule,
    pub memory: MemoryReport,
    pub cost: CostReport,
    pub subgraph_count: usize,
    /// Output slots of the original forward graph (before gradient outputs).
    pub forward_output_count: usize,
}

/// Run the full pipeline on a forward graph whose first output is the loss.
pub fn run_pipeline(
    forward: &Graph,
    registry: &Registry,
    config: &StrategyConfig,
    weight_multiplier: u64,
) -> Result<PipelineResult, PipelineError> {
    let loss = *forward.outputs.first().ok_or(GraphError::NoOutputs)?;
    let forward_output_count = forward.outputs.len();

    let (grad_graph, gradinfo) = build_gradient_graph(forward, loss, registry)?;
    let shapes1 = infer_shapes(&grad_graph, registry)?;
    let use_refs = edge_use_refs(&grad_graph);

    let (rewritten, plan_info) = match config.strategy {
        Strategy::Baseline => (grad_graph.clone(), RecomputePlan::default()),
        Strategy::Mirror => run_mirror(&grad_graph, &gradinfo, &shapes1, registry, config)?,
        Strategy::Echo => {
            run_echo(&grad_graph, &gradinfo, &shapes1, &use_refs, registry, config)?
        }
    };

    let cleaned = eliminate_dead_nodes(&rewritten);
    let shapes = infer_shapes(&cleaned, registry)?;
    let schedule = build_schedule(&cleaned)?;
    let memory = plan(&cleaned, registry, &shapes, &schedule, weight_multiplier)?;
    let cost = estimate(&cleaned, registry, &shapes);
    let subgraph_count = partition_subgraphs(&grad_graph, registry, config, &shapes1).len();

    Ok(PipelineResult {
        graph: cleaned,
        gradinfo,
        plan: plan_info,
        shapes,
        use_refs,
        schedule,
        memory,
        cost,
        subgraph_count,
        forward_output_count,
    })
}

/// Output-slot index of each placeholder's gradient in the augmented graph.
pub fn placeholder_grad_indices(
    graph: &Graph,
    gradinfo: &GradInfo,
    forward_output_count: usize,
) -> BTreeMap<String, usize> {
    gradinfo
        .placeholder_grads
        .keys()
        .enumerate()
        .map(|(i, &id)| {
            let name = graph.placeholder_info(id).expect("gradient of a placeholder").name.clone();
            (name, forward_output_count + i)
        })
        .collect()
}

pub struct RunValues {
    pub outputs: Vec<TensorValue>,
    pub placeholder_grads: BTreeMap<String, TensorValue>,
    pub live_bytes: Vec<u64>,
}

/// Execute a pipeline result on the given environment.
pub fn run_values(
    result: &PipelineResult,
    registry: &Registry,
    env: &ExecEnv,
    weight_multiplier: u64,
) -> Result<RunValues, ExecError> {
    let out = execute(&result.graph, registry, env, &result.schedule, weight_multiplier)?;
    let idx = placeholder_grad_indices(&result.graph, &result.gradinfo, result.forward_output_count);
    let mut grads = BTreeMap::new();
    for (name, i) in idx {
        grads.insert(name, out.outputs[i].clone());
    }
    Ok(RunValues { outputs: out.outputs, placeholder_grads: grads, live_bytes: out.live_bytes })
}
