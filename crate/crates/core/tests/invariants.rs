//! Cross-module invariants, checked over the model zoo and seeded random
//! graphs: rewrites preserve semantics bitwise, autodiff matches finite
//! differences, the analytical plan agrees with both the brute-force oracle
//! and the measured execution trace, and the footprint guarantees hold.

use remat_core::gen::{random_graph, GenConfig};
use remat_core::graph::{Dtype, Graph};
use remat_core::interp::{finite_diff, measure_live_bytes, ExecEnv};
use remat_core::ops::{default_registry, Registry};
use remat_core::pipeline::{run_pipeline, run_values, PipelineResult};
use remat_core::planner::live_bytes_oracle;
use remat_core::recompute::{Strategy, StrategyConfig};
use remat_core::zoo::{build, test_suite};

fn pipeline(graph: &Graph, reg: &Registry, strategy: Strategy) -> PipelineResult {
    let cfg = StrategyConfig::for_strategy(strategy);
    run_pipeline(graph, reg, &cfg, 4).expect("pipeline runs")
}

fn zoo_graphs(reg: &Registry, dtype: Dtype) -> Vec<(String, Graph)> {
    test_suite(dtype)
        .into_iter()
        .map(|(name, spec)| (name.clone(), build(&spec, reg).unwrap()))
        .collect()
}

#[test]
fn strategies_preserve_outputs_and_gradients_bitwise_on_zoo() {
    let reg = default_registry();
    for (name, graph) in zoo_graphs(&reg, Dtype::F64) {
        let env = ExecEnv::random_for(&graph, 11);
        let base = pipeline(&graph, &reg, Strategy::Baseline);
        let base_vals = run_values(&base, &reg, &env, 4).unwrap();
        for strategy in [Strategy::Mirror, Strategy::Echo] {
            let subject = pipeline(&graph, &reg, strategy);
            let vals = run_values(&subject, &reg, &env, 4).unwrap();
            for (i, (a, b)) in base_vals.outputs.iter().zip(&vals.outputs).enumerate() {
                assert!(
                    a.bit_eq(b),
                    "{}: output {} differs under {:?} (rel {:.3e})",
                    name,
                    i,
                    strategy,
                    a.max_rel_diff(b)
                );
            }
            for (ph, a) in &base_vals.placeholder_grads {
                let b = &vals.placeholder_grads[ph];
                assert!(
                    a.bit_eq(b),
                    "{}: gradient of {} differs under {:?} (rel {:.3e})",
                    name,
                    ph,
                    strategy,
                    a.max_rel_diff(b)
                );
            }
        }
    }
}

#[test]
fn f32_runs_agree_within_tolerance() {
    let reg = default_registry();
    for (name, graph) in zoo_graphs(&reg, Dtype::F32) {
        let env = ExecEnv::random_for(&graph, 3);
        let base = pipeline(&graph, &reg, Strategy::Baseline);
        let base_vals = run_values(&base, &reg, &env, 4).unwrap();
        for strategy in [Strategy::Mirror, Strategy::Echo] {
            let subject = pipeline(&graph, &reg, strategy);
            let vals = run_values(&subject, &reg, &env, 4).unwrap();
            for (a, b) in base_vals.outputs.iter().zip(&vals.outputs) {
                assert!(
                    a.max_rel_diff(b) <= 1e-6,
                    "{} under {:?}: rel diff {:.3e}",
                    name,
                    strategy,
                    a.max_rel_diff(b)
                );
            }
        }
    }
}

#[test]
fn autodiff_matches_central_differences_on_zoo() {
    let reg = default_registry();
    for (name, graph) in zoo_graphs(&reg, Dtype::F64) {
        let env = ExecEnv::random_for(&graph, 23);
        let base = pipeline(&graph, &reg, Strategy::Baseline);
        let vals = run_values(&base, &reg, &env, 1).unwrap();
        let fd = finite_diff(&graph, &reg, &env, 1e-5).unwrap();
        for (ph, grad) in &vals.placeholder_grads {
            let ad = grad.to_f64_vec();
            let nd = &fd[ph];
            for (i, (&a, &n)) in ad.iter().zip(nd).enumerate() {
                let denom = f64::max(1.0, f64::max(a.abs(), n.abs()));
                assert!(
                    (a - n).abs() / denom <= 1e-4,
                    "{}: d loss/d {}[{}] = {} (autodiff) vs {} (finite diff)",
                    name,
                    ph,
                    i,
                    a,
                    n
                );
            }
        }
    }
}

#[test]
fn dropout_gradient_matches_finite_differences_through_fixed_mask() {
    let reg = default_registry();
    let graph = remat_core::zoo::dropout_loss(&reg, 32, 0.5, Dtype::F64);
    let env = ExecEnv::random_for(&graph, 5);
    let base = pipeline(&graph, &reg, Strategy::Baseline);
    let vals = run_values(&base, &reg, &env, 1).unwrap();
    let fd = finite_diff(&graph, &reg, &env, 1e-5).unwrap();
    let ad = vals.placeholder_grads["x"].to_f64_vec();
    for (a, n) in ad.iter().zip(&fd["x"]) {
        assert!((a - n).abs() <= 1e-4 * f64::max(1.0, n.abs()));
    }
}

#[test]
fn linear_loss_gradient_is_exact() {
    // loss = sum(x + x): the gradient is exactly 2 everywhere
    let reg = default_registry();
    let mut g = Graph::new();
    let x = g
        .add_placeholder("x", remat_core::Shape(vec![6]), Dtype::F64, false, "")
        .unwrap();
    let two = g
        .add_node(&reg, "add", vec![(x, 0).into(), (x, 0).into()], Default::default(), "")
        .unwrap();
    let loss = g
        .add_node(&reg, "sum_reduce", vec![(two, 0).into()], Default::default(), "")
        .unwrap();
    g.outputs = vec![(loss, 0).into()];
    let env = ExecEnv::random_for(&g, 1);
    let base = pipeline(&g, &reg, Strategy::Baseline);
    let vals = run_values(&base, &reg, &env, 1).unwrap();
    assert!(vals.placeholder_grads["x"].to_f64_vec().iter().all(|&v| v == 2.0));
}

#[test]
fn plan_equals_oracle_equals_measurement_on_zoo() {
    let reg = default_registry();
    for (name, graph) in zoo_graphs(&reg, Dtype::F64) {
        for strategy in [Strategy::Baseline, Strategy::Mirror, Strategy::Echo] {
            let r = pipeline(&graph, &reg, strategy);
            let oracle =
                live_bytes_oracle(&r.graph, &reg, &r.shapes, &r.schedule, 4).unwrap();
            assert_eq!(r.memory.timeline, oracle, "{} {:?}: plan vs oracle", name, strategy);
            let env = ExecEnv::random_for(&graph, 9);
            let measured =
                measure_live_bytes(&r.graph, &reg, &env, &r.schedule, 4).unwrap();
            assert_eq!(r.memory.timeline, measured, "{} {:?}: plan vs measured", name, strategy);
            assert_eq!(
                r.memory.peak_bytes,
                *r.memory.timeline.iter().max().unwrap_or(&0),
                "{} {:?}: peak is the timeline max",
                name,
                strategy
            );
        }
    }
}

#[test]
fn baseline_stash_equals_feature_map_bytes_excluding_weights() {
    let reg = default_registry();
    for (name, graph) in zoo_graphs(&reg, Dtype::F32) {
        let r = pipeline(&graph, &reg, Strategy::Baseline);
        let expect: u64 = r
            .gradinfo
            .feature_map_edges
            .iter()
            .filter(|e| {
                !r.graph.placeholder_info(e.node).map_or(false, |i| i.trainable)
                    && !r.graph.outputs.contains(e)
            })
            .map(|&e| r.shapes.bytes(e))
            .sum();
        assert_eq!(r.memory.stashed_feature_map_bytes, expect, "{}", name);
    }
}

#[test]
fn never_worse_on_zoo() {
    let reg = default_registry();
    for (name, graph) in zoo_graphs(&reg, Dtype::F32) {
        let base = pipeline(&graph, &reg, Strategy::Baseline);
        let mirror = pipeline(&graph, &reg, Strategy::Mirror);
        let echo = pipeline(&graph, &reg, Strategy::Echo);
        assert!(
            echo.memory.peak_bytes <= base.memory.peak_bytes,
            "{}: echo peak {} > baseline {}",
            name,
            echo.memory.peak_bytes,
            base.memory.peak_bytes
        );
        assert!(
            echo.memory.stashed_feature_map_bytes <= base.memory.stashed_feature_map_bytes,
            "{}: echo stash regressed",
            name
        );
        assert!(
            echo.cost.recompute_flops <= mirror.cost.recompute_flops,
            "{}: echo recompute {} > mirror {}",
            name,
            echo.cost.recompute_flops,
            mirror.cost.recompute_flops
        );
        assert!(echo.cost.overhead_ratio <= mirror.cost.overhead_ratio, "{}", name);
        // stash equality holds exactly when nothing was rewritten
        let untouched = echo.plan.mirrored_count() == 0
            && echo.plan.binarized_count() == 0
            && echo.plan.dead_mirror_count() == 0;
        if untouched {
            assert_eq!(
                echo.memory.stashed_feature_map_bytes, base.memory.stashed_feature_map_bytes,
                "{}: untouched plan must match baseline stash",
                name
            );
        }
    }
}

#[test]
fn mirror_count_and_execution_structure() {
    let reg = default_registry();
    for (name, graph) in zoo_graphs(&reg, Dtype::F32) {
        let echo = pipeline(&graph, &reg, Strategy::Echo);
        // no compute-heavy node is ever a live mirror
        for n in echo.graph.nodes() {
            if n.kind == remat_core::NodeKind::Mirror {
                let heavy = reg.lookup(&n.op).map_or(false, |d| d.compute_heavy);
                assert!(!heavy, "{}: heavy op {} survives as a live mirror", name, n.op);
            }
        }
        // at most one mirror per forward node
        let mut seen = std::collections::BTreeSet::new();
        for n in echo.graph.nodes() {
            if let Some(m) = n.mirror_of {
                if n.kind == remat_core::NodeKind::Mirror {
                    assert!(seen.insert(m), "{}: node {} mirrored twice", name, m);
                }
            }
        }
        // node ids of the forward graph survive every pass
        for id in graph.node_ids() {
            let orig = graph.node(id);
            let now = echo.graph.node(id);
            assert_eq!(orig.op, now.op, "{}: node {} renumbered", name, id);
        }
    }
}

#[test]
fn random_graphs_never_worse_and_equivalent() {
    let reg = default_registry();
    let mut rewritten = 0;
    for seed in 0..50 {
        let graph = random_graph(&reg, &GenConfig::new(seed));
        let base = pipeline(&graph, &reg, Strategy::Baseline);
        let mirror = pipeline(&graph, &reg, Strategy::Mirror);
        let echo = pipeline(&graph, &reg, Strategy::Echo);
        assert!(
            echo.memory.peak_bytes <= base.memory.peak_bytes,
            "seed {}: echo peak {} > baseline {}",
            seed,
            echo.memory.peak_bytes,
            base.memory.peak_bytes
        );
        assert!(echo.cost.recompute_flops <= mirror.cost.recompute_flops, "seed {}", seed);
        rewritten += echo.plan.mirrored_count() + echo.plan.binarized_count();

        let env = ExecEnv::random_for(&graph, seed ^ 0xabcd);
        let base_vals = run_values(&base, &reg, &env, 4).unwrap();
        for subject in [&mirror, &echo] {
            let vals = run_values(subject, &reg, &env, 4).unwrap();
            for (a, b) in base_vals.outputs.iter().zip(&vals.outputs) {
                assert!(a.bit_eq(b), "seed {}: values diverge", seed);
            }
            for (ph, a) in &base_vals.placeholder_grads {
                assert!(a.bit_eq(&vals.placeholder_grads[ph]), "seed {}: grad {} diverges", seed, ph);
            }
        }
        let oracle = live_bytes_oracle(&echo.graph, &reg, &echo.shapes, &echo.schedule, 4).unwrap();
        assert_eq!(echo.memory.timeline, oracle, "seed {}", seed);
    }
    // the suite only means something if the strategy actually fires
    assert!(rewritten > 0, "echo never rewrote anything across 50 random graphs");
}

#[test]
fn serialization_round_trips_zoo_and_random_graphs() {
    let reg = default_registry();
    for (name, graph) in zoo_graphs(&reg, Dtype::F32) {
        let bytes = remat_core::serialize::serialize(&graph);
        let back = remat_core::serialize::deserialize(&bytes, &reg).unwrap();
        assert!(graph.structural_eq(&back), "{} round trip", name);
    }
    for seed in 0..200 {
        let graph = random_graph(&reg, &GenConfig::new(seed));
        let bytes = remat_core::serialize::serialize(&graph);
        let back = remat_core::serialize::deserialize(&bytes, &reg).unwrap();
        assert!(back.structural_eq(&graph), "seed {} round trip", seed);
    }
}

#[test]
fn pipeline_reports_are_deterministic() {
    let reg = default_registry();
    let graph = build(&test_suite(Dtype::F32)[4].1, &reg).unwrap(); // nmt_like
    let a = pipeline(&graph, &reg, Strategy::Echo);
    let b = pipeline(&graph, &reg, Strategy::Echo);
    assert_eq!(a.memory.timeline, b.memory.timeline);
    assert_eq!(a.memory.peak_bytes, b.memory.peak_bytes);
    assert_eq!(a.cost, b.cost);
    assert_eq!(a.schedule.steps, b.schedule.steps);
    assert!(a.graph.structural_eq(&b.graph));
}

#[test]
fn dead_node_elimination_preserves_output_values() {
    let reg = default_registry();
    for (name, graph) in zoo_graphs(&reg, Dtype::F64) {
        let echo = pipeline(&graph, &reg, Strategy::Echo);
        // re-running elimination is a no-op on an already-clean graph
        let again = remat_core::eliminate_dead_nodes(&echo.graph);
        assert!(echo.graph.structural_eq(&again), "{}: elimination not idempotent", name);
    }
}
