use remat_core::autodiff::build_gradient_graph;
use remat_core::graph::Dtype;
use remat_core::ops::default_registry;
use remat_core::passes::{edge_use_refs, eliminate_dead_nodes, infer_shapes};
use remat_core::planner::{build_schedule, plan};
use remat_core::recompute::{run_echo, Strategy, StrategyConfig};
use remat_core::zoo::{build, ZooModel, ZooSpec};

fn peak(g: &remat_core::Graph, reg: &remat_core::Registry) -> u64 {
    let c = eliminate_dead_nodes(g);
    let s = infer_shapes(&c, reg).unwrap();
    let sch = build_schedule(&c).unwrap();
    plan(&c, reg, &s, &sch, 1).unwrap().peak_bytes
}

fn main() {
    let reg = default_registry();
    let g = build(&ZooSpec::new(ZooModel::BroadcastAttn { t: 64, n: 256 }, Dtype::F32), &reg).unwrap();
    let (ag, info) = build_gradient_graph(&g, g.outputs[0], &reg).unwrap();
    let shapes = infer_shapes(&ag, &reg).unwrap();
    let refs = edge_use_refs(&ag);
    let cfg = StrategyConfig::for_strategy(Strategy::Echo);
    println!("baseline peak = {}", peak(&ag, &reg));
    let (out, p) = run_echo(&ag, &info, &shapes, &refs, &reg, &cfg).unwrap();
    println!("echo peak = {}, mirrors = {}, stash = {}", peak(&out, &reg), p.mirrored_count(), p.stashed_bytes);
}
