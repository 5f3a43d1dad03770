//! Seeded random graph generator for property suites: mixed cheap, heavy and
//! binarizable ops over small shapes, always ending in a scalar loss.
//!
//! Op inputs prefer edges nothing has consumed yet, which keeps the number of
//! dangling sinks (and so the final loss-assembly nodes) small enough that
//! every generated graph stays within the configured node bound.

use std::collections::BTreeSet;

use crate::graph::{attrs, AttrValue, Attrs, Dtype, EdgeRef, Graph, Shape};
use crate::interp::mix64;
use crate::ops::Registry;

pub struct Rng(u64);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        mix64(self.0)
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next_u64() % n.max(1)
    }

    pub fn chance(&mut self, percent: u64) -> bool {
        self.below(100) < percent
    }
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub seed: u64,
    pub max_nodes: usize,
    pub dtype: Dtype,
    pub allow_heavy: bool,
    pub allow_binarizable: bool,
}

impl GenConfig {
    pub fn new(seed: u64) -> Self {
        GenConfig {
            seed,
            max_nodes: 60,
            dtype: Dtype::F64,
            allow_heavy: true,
            allow_binarizable: true,
        }
    }
}

struct Gen<'a> {
    rng: Rng,
    g: Graph,
    reg: &'a Registry,
    pool: Vec<(EdgeRef, Shape)>,
    consumed: BTreeSet<EdgeRef>,
    dt: Dtype,
    weights_left: usize,
}

impl<'a> Gen<'a> {
    /// Candidate indices, restricted to unconsumed edges when any exist.
    fn prefer_fresh(&self, idxs: Vec<usize>) -> Vec<usize> {
        let fresh: Vec<usize> = idxs
            .iter()
            .copied()
            .filter(|&i| !self.consumed.contains(&self.pool[i].0))
            .collect();
        if fresh.is_empty() {
            idxs
        } else {
            fresh
        }
    }

    fn pick(&mut self, idxs: &[usize]) -> Option<usize> {
        if idxs.is_empty() {
            None
        } else {
            Some(idxs[self.rng.below(idxs.len() as u64) as usize])
        }
    }

    fn add_op(&mut self, op: &str, inputs: Vec<EdgeRef>, a: Attrs, out_shape: Shape) {
        for &e in &inputs {
            self.consumed.insert(e);
        }
        let id = self.g.add_node(self.reg, op, inputs, a, "gen").unwrap();
        self.pool.push((EdgeRef::new(id, 0), out_shape));
    }

    fn step(&mut self, allow_heavy: bool, allow_bin: bool) {
        let pick = self.rng.below(10);
        match pick {
            0 | 1 => {
                let cands: Vec<usize> = (0..self.pool.len()).collect();
                let mut pairs = Vec::new();
                for &i in &self.prefer_fresh(cands) {
                    for j in 0..self.pool.len() {
                        if i != j && self.pool[i].1 == self.pool[j].1 {
                            pairs.push((i, j));
                        }
                    }
                }
                if pairs.is_empty() {
                    return self.fallback();
                }
                let (i, j) = pairs[self.rng.below(pairs.len() as u64) as usize];
                let op = if self.rng.chance(50) { "add" } else { "mul" };
                let shape = self.pool[i].1.clone();
                self.add_op(op, vec![self.pool[i].0, self.pool[j].0], Attrs::new(), shape);
            }
            2 | 3 => {
                let cands = self.prefer_fresh((0..self.pool.len()).collect());
                let Some(i) = self.pick(&cands) else { return };
                let op = match self.rng.below(4) {
                    0 => "tanh",
                    1 => "sigmoid",
                    2 if allow_bin => "relu",
                    _ => "tanh",
                };
                let shape = self.pool[i].1.clone();
                self.add_op(op, vec![self.pool[i].0], Attrs::new(), shape);
            }
            4 => {
                if !allow_bin {
                    return self.fallback();
                }
                let cands = self.prefer_fresh((0..self.pool.len()).collect());
                let Some(i) = self.pick(&cands) else { return };
                let shape = self.pool[i].1.clone();
                self.add_op(
                    "dropout",
                    vec![self.pool[i].0],
                    attrs([("rate", AttrValue::Float(0.25))]),
                    shape,
                );
            }
            5 => {
                let mut cands = Vec::new();
                for i in 0..self.pool.len() {
                    for j in 0..self.pool.len() {
                        let (a, b) = (&self.pool[i].1, &self.pool[j].1);
                        if a.rank() < b.rank() && b.0[b.rank() - a.rank()..] == a.0[..] {
                            cands.push((i, j));
                        }
                    }
                }
                if cands.is_empty() {
                    return self.fallback();
                }
                let (small, big) = cands[self.rng.below(cands.len() as u64) as usize];
                let shape = self.pool[big].1.clone();
                self.add_op(
                    "broadcast_add",
                    vec![self.pool[small].0, self.pool[big].0],
                    Attrs::new(),
                    shape,
                );
            }
            6 => {
                let cands: Vec<usize> = (0..self.pool.len())
                    .filter(|&i| self.pool[i].1 .0.iter().any(|&d| d >= 2))
                    .collect();
                let cands = self.prefer_fresh(cands);
                let Some(i) = self.pick(&cands) else { return self.fallback() };
                let shape = self.pool[i].1.clone();
                let axis = shape.0.iter().position(|&d| d >= 2).unwrap();
                let half = shape.0[axis] / 2;
                let mut dims = shape.0.clone();
                dims[axis] = half;
                self.add_op(
                    "slice",
                    vec![self.pool[i].0],
                    attrs([
                        ("axis", AttrValue::Int(axis as i64)),
                        ("begin", AttrValue::Int(0)),
                        ("end", AttrValue::Int(half as i64)),
                    ]),
                    Shape(dims),
                );
            }
            7 => {
                let cands: Vec<usize> = (0..self.pool.len()).collect();
                let mut pairs = Vec::new();
                for &i in &self.prefer_fresh(cands) {
                    for j in 0..self.pool.len() {
                        if i != j && self.pool[i].1 == self.pool[j].1 {
                            pairs.push((i, j));
                        }
                    }
                }
                if pairs.is_empty() {
                    return self.fallback();
                }
                let (i, j) = pairs[self.rng.below(pairs.len() as u64) as usize];
                let mut dims = self.pool[i].1 .0.clone();
                dims[0] *= 2;
                self.add_op(
                    "concat",
                    vec![self.pool[i].0, self.pool[j].0],
                    attrs([("axis", AttrValue::Int(0))]),
                    Shape(dims),
                );
            }
            _ => {
                if !allow_heavy || self.weights_left == 0 {
                    return self.fallback();
                }
                let cands: Vec<usize> =
                    (0..self.pool.len()).filter(|&i| self.pool[i].1.rank() == 2).collect();
                let cands = self.prefer_fresh(cands);
                let Some(i) = self.pick(&cands) else { return self.fallback() };
                let (batch, infeat) = (self.pool[i].1 .0[0], self.pool[i].1 .0[1]);
                let out = 2 + self.rng.below(4);
                self.weights_left -= 1;
                let tag = self.weights_left;
                let w = self
                    .g
                    .add_placeholder(&format!("w{}", tag), Shape(vec![out, infeat]), self.dt, true, "gen")
                    .unwrap();
                let bb = self
                    .g
                    .add_placeholder(&format!("bias{}", tag), Shape(vec![out]), self.dt, true, "gen")
                    .unwrap();
                let x = self.pool[i].0;
                self.consumed.insert(x);
                let id = self
                    .g
                    .add_node(
                        self.reg,
                        "fully_connected",
                        vec![x, EdgeRef::new(w, 0), EdgeRef::new(bb, 0)],
                        Attrs::new(),
                        "gen",
                    )
                    .unwrap();
                self.pool.push((EdgeRef::new(id, 0), Shape(vec![batch, out])));
            }
        }
    }

    fn fallback(&mut self) {
        let cands = self.prefer_fresh((0..self.pool.len()).collect());
        if let Some(i) = self.pick(&cands) {
            let shape = self.pool[i].1.clone();
            self.add_op("tanh", vec![self.pool[i].0], Attrs::new(), shape);
        }
    }
}

/// Build a random forward graph: a handful of placeholders, a run of sampled
/// ops over a pool of live edges, then every sink reduced and summed into a
/// single scalar loss output.
pub fn random_graph(registry: &Registry, cfg: &GenConfig) -> Graph {
    let mut rng = Rng::new(cfg.seed);
    let mut g = Graph::new();
    let mut pool: Vec<(EdgeRef, Shape)> = Vec::new();
    let n_ph = 2 + rng.below(3);
    for i in 0..n_ph {
        let shape = match rng.below(3) {
            0 => Shape(vec![2 + rng.below(5)]),
            1 => Shape(vec![2 + rng.below(3), 2 + rng.below(4)]),
            _ => Shape(vec![2 + rng.below(3), 2 + rng.below(3)]),
        };
        let id = g
            .add_placeholder(&format!("p{}", i), shape.clone(), cfg.dtype, rng.chance(30), "gen")
            .unwrap();
        pool.push((EdgeRef::new(id, 0), shape));
    }

    let mut gen = Gen {
        rng,
        g,
        reg: registry,
        pool,
        consumed: BTreeSet::new(),
        dt: cfg.dtype,
        weights_left: 3,
    };
    // Leave headroom for the loss assembly: each dangling sink costs one
    // reduce node plus one accumulating add.
    let op_budget = cfg.max_nodes.saturating_sub(25).max(8);
    let target = 8 + gen.rng.below(op_budget.saturating_sub(8) as u64 + 1) as usize;
    while gen.g.num_nodes() < target + n_ph as usize {
        gen.step(cfg.allow_heavy, cfg.allow_binarizable);
    }

    let Gen { mut g, pool, consumed, .. } = gen;
    let sinks: Vec<EdgeRef> =
        pool.iter().map(|(e, _)| *e).filter(|e| !consumed.contains(e)).collect();
    let mut terms = Vec::new();
    for e in sinks {
        let s = g.add_node(registry, "sum_reduce", vec![e], Attrs::new(), "gen").unwrap();
        terms.push(EdgeRef::new(s, 0));
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        let a = g.add_node(registry, "add", vec![loss, t], Attrs::new(), "gen").unwrap();
        loss = EdgeRef::new(a, 0);
    }
    g.outputs = vec![loss];
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::default_registry;

    #[test]
    fn generated_graphs_validate_and_stay_bounded() {
        let reg = default_registry();
        for seed in 0..200 {
            let cfg = GenConfig::new(seed);
            let g = random_graph(&reg, &cfg);
            g.validate(&reg).unwrap_or_else(|e| panic!("seed {}: {}", seed, e));
            crate::passes::infer_shapes(&g, &reg)
                .unwrap_or_else(|e| panic!("seed {}: {}", seed, e));
            assert!(
                g.num_nodes() <= cfg.max_nodes,
                "seed {} produced {} nodes",
                seed,
                g.num_nodes()
            );
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let reg = default_registry();
        let a = random_graph(&reg, &GenConfig::new(7));
        let b = random_graph(&reg, &GenConfig::new(7));
        assert!(a.structural_eq(&b));
    }
}
