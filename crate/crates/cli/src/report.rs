//! Report assembly: a stable JSON document plus human-readable tables.

use serde::Serialize;

use remat_core::cost::CostReport;
use remat_core::pipeline::PipelineResult;
use remat_core::planner::MemoryReport;
use remat_core::recompute::Strategy;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub edges: usize,
    pub subgraphs: usize,
}

#[derive(Serialize)]
pub struct PlanSummary {
    pub mirrored: usize,
    pub removed: usize,
    pub dead_mirrors: usize,
    pub binarized: usize,
}

#[derive(Serialize)]
pub struct AnalyzeReport {
    pub schema_version: u32,
    pub strategy: Strategy,
    pub graph: GraphStats,
    pub memory: MemoryReport,
    pub cost: CostReport,
    pub plan: PlanSummary,
}

impl AnalyzeReport {
    pub fn new(strategy: Strategy, result: &PipelineResult) -> Self {
        AnalyzeReport {
            schema_version: REPORT_SCHEMA_VERSION,
            strategy,
            graph: GraphStats {
                nodes: result.graph.num_nodes(),
                edges: result.graph.num_edges(),
                subgraphs: result.subgraph_count,
            },
            memory: result.memory.clone(),
            cost: result.cost.clone(),
            plan: PlanSummary {
                mirrored: result.plan.mirrored_count(),
                removed: result.plan.removed_count(),
                dead_mirrors: result.plan.dead_mirror_count(),
                binarized: result.plan.binarized_count(),
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let m = &self.memory;
        let c = &self.cost;
        let mut s = String::new();
        s.push_str(&format!("strategy            {}\n", self.strategy));
        s.push_str(&format!(
            "graph               {} nodes, {} edges, {} subgraphs\n",
            self.graph.nodes, self.graph.edges, self.graph.subgraphs
        ));
        s.push_str(&format!(
            "peak memory         {} bytes at step {}\n",
            m.peak_bytes, m.peak_step
        ));
        s.push_str(&format!(
            "  feature maps      {} bytes\n  weights           {} bytes\n  workspace         {} bytes\n",
            m.by_category.feature_maps, m.by_category.weights, m.by_category.workspace
        ));
        s.push_str(&format!("stashed feature maps {} bytes\n", m.stashed_feature_map_bytes));
        if !m.by_tag.is_empty() {
            s.push_str("  by tag at peak:\n");
            for (tag, bytes) in &m.by_tag {
                let label = if tag.is_empty() { "(untagged)" } else { tag };
                s.push_str(&format!("    {:<16} {} bytes\n", label, bytes));
            }
        }
        s.push_str(&format!(
            "flops               forward {}, backward {}, recompute {}, encode/decode {}\n",
            c.forward_flops, c.backward_flops, c.recompute_flops, c.encode_decode_flops
        ));
        s.push_str(&format!("overhead ratio      {:.6}\n", c.overhead_ratio));
        s.push_str(&format!(
            "plan                {} mirrored, {} removed, {} dead mirrors, {} binarized\n",
            self.plan.mirrored, self.plan.removed, self.plan.dead_mirrors, self.plan.binarized
        ));
        s
    }
}

#[derive(Serialize)]
pub struct CompareRow {
    pub strategy: Strategy,
    pub peak_bytes: u64,
    pub stashed_bytes: u64,
    pub recompute_flops: u64,
    pub overhead_ratio: f64,
}

impl CompareRow {
    pub fn from_report(r: &AnalyzeReport) -> Self {
        CompareRow {
            strategy: r.strategy,
            peak_bytes: r.memory.peak_bytes,
            stashed_bytes: r.memory.stashed_feature_map_bytes,
            recompute_flops: r.cost.recompute_flops,
            overhead_ratio: r.cost.overhead_ratio,
        }
    }
}

#[derive(Serialize)]
struct CompareDoc<'a> {
    schema_version: u32,
    rows: &'a [CompareRow],
}

pub fn compare_json(rows: &[CompareRow]) -> String {
    serde_json::to_string_pretty(&CompareDoc { schema_version: REPORT_SCHEMA_VERSION, rows })
        .expect("comparison serializes")
}

pub fn compare_table(rows: &[CompareRow]) -> String {
    let base = &rows[0];
    let ratio = |v: u64, b: u64| -> String {
        if v == 0 {
            "0.00x".to_string()
        } else if b == 0 {
            "-".to_string()
        } else {
            format!("{:.2}x", v as f64 / b as f64)
        }
    };
    let mut s = String::new();
    s.push_str(&format!(
        "{:<10} {:>14} {:>8} {:>14} {:>8} {:>14} {:>10}\n",
        "strategy", "peak_bytes", "vs_base", "stashed_bytes", "vs_base", "recompute", "overhead"
    ));
    for r in rows {
        s.push_str(&format!(
            "{:<10} {:>14} {:>8} {:>14} {:>8} {:>14} {:>10.4}\n",
            r.strategy.to_string(),
            r.peak_bytes,
            ratio(r.peak_bytes, base.peak_bytes),
            r.stashed_bytes,
            ratio(r.stashed_bytes, base.stashed_bytes),
            r.recompute_flops,
            r.overhead_ratio
        ));
    }
    s
}
