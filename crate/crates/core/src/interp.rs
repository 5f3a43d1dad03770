//! Reference interpreter: executes any (transformed) graph on small tensors,
//! with deterministic dropout, a finite-difference oracle, and a measured
//! live-bytes trace that must agree with the analytical planner.
//!
//! Accumulations run left to right in ascending index order everywhere, so
//! two runs with the same environment are bitwise identical, and a rewritten
//! graph can be compared against its baseline without tolerances in f64.

use std::collections::BTreeMap;

use crate::graph::{AttrValue, Dtype, EdgeRef, Graph, NodeId, Shape};
use crate::ops::Registry;
use crate::planner::{last_use_steps, Schedule};

/// splitmix64; the one PRNG used for masks, bindings and test graphs.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 / (1u64 << 53) as f64
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic dropout mask: a pure function of (seed, original node id,
/// element index), so a mirror node regenerates the identical mask.
fn dropout_keep(seed: u64, node_key: u64, idx: u64, rate: f64) -> bool {
    let v = mix64(seed ^ node_key.wrapping_mul(0x9e3779b97f4a7c15) ^ idx.wrapping_mul(0xd1b54a32d192ed03));
    unit_f64(v) >= rate
}

#[derive(Debug, Clone)]
pub enum TensorValue {
    F32(Shape, Vec<f32>),
    F64(Shape, Vec<f64>),
    /// Packed mask bits, least significant bit first.
    Bits(Shape, Vec<u8>),
}

impl TensorValue {
    pub fn shape(&self) -> &Shape {
        match self {
            TensorValue::F32(s, _) | TensorValue::F64(s, _) | TensorValue::Bits(s, _) => s,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            TensorValue::F32(_, v) => v.iter().map(|&x| x as f64).collect(),
            TensorValue::F64(_, v) => v.clone(),
            TensorValue::Bits(s, v) => (0..s.elems())
                .map(|i| if (v[(i / 8) as usize] >> (i % 8)) & 1 == 1 { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn bit_eq(&self, other: &TensorValue) -> bool {
        match (self, other) {
            (TensorValue::F32(s1, a), TensorValue::F32(s2, b)) => {
                s1 == s2 && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorValue::F64(s1, a), TensorValue::F64(s2, b)) => {
                s1 == s2 && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorValue::Bits(s1, a), TensorValue::Bits(s2, b)) => s1 == s2 && a == b,
            _ => false,
        }
    }

    pub fn max_rel_diff(&self, other: &TensorValue) -> f64 {
        let a = self.to_f64_vec();
        let b = other.to_f64_vec();
        a.iter()
            .zip(&b)
            .map(|(&x, &y)| (x - y).abs() / f64::max(1.0, f64::max(x.abs(), y.abs())))
            .fold(0.0, f64::max)
    }
}

/// Execution environment: rng seed, placeholder bindings (f64, cast at load),
/// and an optional corruption hook used as a negative control in `verify`.
#[derive(Debug, Clone, Default)]
pub struct ExecEnv {
    pub seed: u64,
    pub bindings: BTreeMap<String, Vec<f64>>,
    pub corrupt_edge: Option<EdgeRef>,
}

impl ExecEnv {
    /// Uniform bindings in [-1, 1], keyed by placeholder name so they are
    /// stable across structurally equal graphs.
    pub fn random_for(graph: &Graph, seed: u64) -> ExecEnv {
        let mut env = ExecEnv { seed, ..ExecEnv::default() };
        for id in graph.placeholder_ids() {
            let info = graph.placeholder_info(id).unwrap();
            let key = seed ^ fnv1a(&info.name);
            let vals: Vec<f64> = (0..info.shape.elems())
                .map(|i| unit_f64(mix64(key.wrapping_add(i))) * 2.0 - 1.0)
                .collect();
            env.bindings.insert(info.name.clone(), vals);
        }
        env
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("placeholder `{0}` is unbound")]
    Unbound(String),
    #[error("binding for `{name}` has {got} values, shape wants {want}")]
    BindingShape { name: String, got: usize, want: u64 },
    #[error("runtime shape mismatch at node {0}")]
    RuntimeShape(NodeId),
    #[error("op `{0}` has no interpreter semantics")]
    UnknownOp(String),
    #[error("graph too large to interpret: {elems} elements exceeds cap {cap}")]
    CapExceeded { elems: u64, cap: u64 },
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
}

pub struct ExecOutputs {
    /// One value per graph output, in declaration order.
    pub outputs: Vec<TensorValue>,
    /// Live-bytes trace per schedule step (planner conventions).
    pub live_bytes: Vec<u64>,
}

trait Real: Copy + PartialOrd {
    const DT: Dtype;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn zero() -> Self;
    fn one() -> Self;
    fn add(self, o: Self) -> Self;
    fn sub(self, o: Self) -> Self;
    fn mul(self, o: Self) -> Self;
    fn div(self, o: Self) -> Self;
    fn tanh_(self) -> Self;
    fn exp_(self) -> Self;
    fn ln_(self) -> Self;
    fn gt_zero(self) -> bool;
}

impl Real for f32 {
    const DT: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self { v as f32 }
    fn to_f64(self) -> f64 { self as f64 }
    fn zero() -> Self { 0.0 }
    fn one() -> Self { 1.0 }
    fn add(self, o: Self) -> Self { self + o }
    fn sub(self, o: Self) -> Self { self - o }
    fn mul(self, o: Self) -> Self { self * o }
    fn div(self, o: Self) -> Self { self / o }
    fn tanh_(self) -> Self { self.tanh() }
    fn exp_(self) -> Self { self.exp() }
    fn ln_(self) -> Self { self.ln() }
    fn gt_zero(self) -> bool { self > 0.0 }
}

impl Real for f64 {
    const DT: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self { v }
    fn to_f64(self) -> f64 { self }
    fn zero() -> Self { 0.0 }
    fn one() -> Self { 1.0 }
    fn add(self, o: Self) -> Self { self + o }
    fn sub(self, o: Self) -> Self { self - o }
    fn mul(self, o: Self) -> Self { self * o }
    fn div(self, o: Self) -> Self { self / o }
    fn tanh_(self) -> Self { self.tanh() }
    fn exp_(self) -> Self { self.exp() }
    fn ln_(self) -> Self { self.ln() }
    fn gt_zero(self) -> bool { self > 0.0 }
}

enum Val<R> {
    Float(Shape, Vec<R>),
    Bits(Shape, Vec<u8>),
}

impl<R: Real> Val<R> {
    fn shape(&self) -> &Shape {
        match self {
            Val::Float(s, _) | Val::Bits(s, _) => s,
        }
    }

    fn floats(&self) -> &[R] {
        match self {
            Val::Float(_, v) => v,
            Val::Bits(..) => panic!("expected float tensor"),
        }
    }

    fn bytes(&self) -> u64 {
        match self {
            Val::Float(s, _) => R::DT.tensor_bytes(s.elems()),
            Val::Bits(s, _) => Dtype::Bit.tensor_bytes(s.elems()),
        }
    }

    fn to_tensor(&self) -> TensorValue {
        match self {
            Val::Float(s, v) => match R::DT {
                Dtype::F32 => TensorValue::F32(s.clone(), v.iter().map(|x| x.to_f64() as f32).collect()),
                _ => TensorValue::F64(s.clone(), v.iter().map(|x| x.to_f64()).collect()),
            },
            Val::Bits(s, v) => TensorValue::Bits(s.clone(), v.clone()),
        }
    }
}

fn decode_bits<R: Real>(shape: &Shape, bits: &[u8]) -> Vec<R> {
    (0..shape.elems())
        .map(|i| {
            if (bits[(i / 8) as usize] >> (i % 8)) & 1 == 1 {
                R::one()
            } else {
                R::zero()
            }
        })
        .collect()
}

/// Default element-count cap for interpretation (the CLI `verify` gate).
pub const DEFAULT_ELEM_CAP: u64 = 100_000;

/// Execute following `schedule`, tracking live buffer bytes per step with the
/// same conventions the analytical planner uses.
pub fn execute(
    graph: &Graph,
    registry: &Registry,
    env: &ExecEnv,
    schedule: &Schedule,
    weight_multiplier: u64,
) -> Result<ExecOutputs, ExecError> {
    let any_f64 = graph
        .placeholder_ids()
        .any(|id| graph.placeholder_info(id).unwrap().dtype == Dtype::F64);
    if any_f64 {
        execute_typed::<f64>(graph, registry, env, schedule, weight_multiplier)
    } else {
        execute_typed::<f32>(graph, registry, env, schedule, weight_multiplier)
    }
}

fn execute_typed<R: Real>(
    graph: &Graph,
    registry: &Registry,
    env: &ExecEnv,
    schedule: &Schedule,
    weight_multiplier: u64,
) -> Result<ExecOutputs, ExecError> {
    let last_use = last_use_steps(graph, schedule);
    let outputs_set = graph.output_set();

    // Constant charge: trainable placeholders live for the whole schedule at
    // bytes * weight-multiplier (weight + gradient + optimizer states).
    let mut weight_bytes = 0u64;
    for id in graph.placeholder_ids() {
        let info = graph.placeholder_info(id).unwrap();
        if info.trainable {
            weight_bytes += info.dtype.tensor_bytes(info.shape.elems()) * weight_multiplier;
        }
    }

    let mut buffers: BTreeMap<EdgeRef, Val<R>> = BTreeMap::new();
    let mut held_bytes = 0u64;
    let mut live_bytes = Vec::with_capacity(schedule.steps.len());
    let mut kept_outputs: BTreeMap<EdgeRef, TensorValue> = BTreeMap::new();

    for (step, &id) in schedule.steps.iter().enumerate() {
        let node = graph.node(id);
        let in_shapes: Vec<Shape> = node
            .inputs
            .iter()
            .map(|e| buffers[e].shape().clone())
            .collect();
        let produced = {
            let ctx = Ctx { graph, env, buffers: &buffers };
            ctx.eval(node)?
        };
        let ws = registry
            .lookup(&node.op)
            .and_then(|d| d.workspace_fn)
            .map(|f| {
                let outs: Vec<Shape> = produced.iter().map(|v| v.shape().clone()).collect();
                f(&in_shapes, &outs, &node.attrs)
            })
            .unwrap_or(0);

        let trainable_ph = graph
            .placeholder_info(id)
            .map(|info| info.trainable)
            .unwrap_or(false);
        for (k, val) in produced.into_iter().enumerate() {
            let e = EdgeRef::new(id, k);
            let mut val = val;
            if env.corrupt_edge == Some(e) {
                if let Val::Float(_, data) = &mut val {
                    if let Some(v0) = data.first_mut() {
                        *v0 = v0.add(R::one());
                    }
                }
            }
            if outputs_set.contains(&e) {
                kept_outputs.insert(e, val.to_tensor());
            }
            // Trainable placeholder buffers are pre-charged via the
            // weight-multiplier term.
            if !trainable_ph {
                held_bytes += val.bytes();
            }
            buffers.insert(e, val);
        }

        live_bytes.push(weight_bytes + held_bytes + ws);

        // Free buffers after their last consumer.
        let dead: Vec<EdgeRef> = buffers
            .keys()
            .filter(|e| last_use.get(e).map_or(true, |&lu| lu <= step))
            .copied()
            .collect();
        for e in dead {
            let trainable = graph
                .placeholder_info(e.node)
                .map(|i| i.trainable)
                .unwrap_or(false);
            if let Some(v) = buffers.remove(&e) {
                if !trainable {
                    held_bytes -= v.bytes();
                }
            }
        }
    }

    let mut outputs = Vec::new();
    for e in &graph.outputs {
        outputs.push(kept_outputs[e].clone());
    }
    Ok(ExecOutputs { outputs, live_bytes })
}

// Evaluation borrows the buffer map immutably; results are inserted by the
// scheduler loop afterwards.
struct Ctx<'a, R: Real> {
    graph: &'a Graph,
    env: &'a ExecEnv,
    buffers: &'a BTreeMap<EdgeRef, Val<R>>,
}

#[allow(clippy::needless_range_loop)]
impl<'a, R: Real> Ctx<'a, R> {
    fn input(&self, node: &crate::graph::Node, k: usize) -> &Val<R> {
        &self.buffers[&node.inputs[k]]
    }

    fn eval(&self, node: &crate::graph::Node) -> Result<Vec<Val<R>>, ExecError> {
        let op: &str = &node.op;
        if self.graph.is_placeholder(node.id) {
            let info = self.graph.placeholder_info(node.id).unwrap();
            let data = self
                .env
                .bindings
                .get(&info.name)
                .ok_or_else(|| ExecError::Unbound(info.name.clone()))?;
            if data.len() as u64 != info.shape.elems() {
                return Err(ExecError::BindingShape {
                    name: info.name.clone(),
                    got: data.len(),
                    want: info.shape.elems(),
                });
            }
            let vals: Vec<R> = data.iter().map(|&v| R::from_f64(v)).collect();
            return Ok(vec![Val::Float(info.shape.clone(), vals)]);
        }
        let a = &node.attrs;
        let out = match op {
            "add" => {
                let (x, y) = (self.input(node, 0), self.input(node, 1));
                let v: Vec<R> = x
                    .floats()
                    .iter()
                    .zip(y.floats())
                    .map(|(&p, &q)| p.add(q))
                    .collect();
                vec![Val::Float(x.shape().clone(), v)]
            }
            "mul" => {
                let (x, y) = (self.input(node, 0), self.input(node, 1));
                let v: Vec<R> = x
                    .floats()
                    .iter()
                    .zip(y.floats())
                    .map(|(&p, &q)| p.mul(q))
                    .collect();
                vec![Val::Float(x.shape().clone(), v)]
            }
            "add_n" => {
                let first = self.input(node, 0);
                let mut acc: Vec<R> = first.floats().to_vec();
                for k in 1..node.inputs.len() {
                    for (dst, &src) in acc.iter_mut().zip(self.input(node, k).floats()) {
                        *dst = dst.add(src);
                    }
                }
                vec![Val::Float(first.shape().clone(), acc)]
            }
            "tanh" => {
                let x = self.input(node, 0);
                let v: Vec<R> = x.floats().iter().map(|&p| p.tanh_()).collect();
                vec![Val::Float(x.shape().clone(), v)]
            }
            "sigmoid" => {
                let x = self.input(node, 0);
                let v: Vec<R> = x
                    .floats()
                    .iter()
                    .map(|&p| R::one().div(R::one().add(R::zero().sub(p).exp_())))
                    .collect();
                vec![Val::Float(x.shape().clone(), v)]
            }
            "relu" => {
                let x = self.input(node, 0);
                let v: Vec<R> = x
                    .floats()
                    .iter()
                    .map(|&p| if p.gt_zero() { p } else { R::zero() })
                    .collect();
                vec![Val::Float(x.shape().clone(), v)]
            }
            "tanh_grad" => {
                let (y, gy) = (self.input(node, 0), self.input(node, 1));
                let v: Vec<R> = y
                    .floats()
                    .iter()
                    .zip(gy.floats())
                    .map(|(&yv, &g)| g.mul(R::one().sub(yv.mul(yv))))
                    .collect();
                vec![Val::Float(y.shape().clone(), v)]
            }
            "sigmoid_grad" => {
                let (y, gy) = (self.input(node, 0), self.input(node, 1));
                let v: Vec<R> = y
                    .floats()
                    .iter()
                    .zip(gy.floats())
                    .map(|(&yv, &g)| g.mul(yv.mul(R::one().sub(yv))))
                    .collect();
                vec![Val::Float(y.shape().clone(), v)]
            }
            "relu_grad" => {
                let (y, gy) = (self.input(node, 0), self.input(node, 1));
                let yv: Vec<R> = match y {
                    Val::Bits(s, bits) => decode_bits(s, bits),
                    Val::Float(_, v) => v.clone(),
                };
                let v: Vec<R> = yv
                    .iter()
                    .zip(gy.floats())
                    .map(|(&m, &g)| if m.gt_zero() { g } else { R::zero() })
                    .collect();
                vec![Val::Float(gy.shape().clone(), v)]
            }
            "dropout" => {
                let x = self.input(node, 0);
                let rate = a.get("rate").and_then(AttrValue::as_float).unwrap_or(0.5);
                let keep_scale = R::from_f64(1.0 / (1.0 - rate));
                let key = node.mirror_of.unwrap_or(node.id) as u64;
                let mut y = Vec::with_capacity(x.floats().len());
                let mut mask = Vec::with_capacity(x.floats().len());
                for (i, &p) in x.floats().iter().enumerate() {
                    if dropout_keep(self.env.seed, key, i as u64, rate) {
                        y.push(p.mul(keep_scale));
                        mask.push(R::one());
                    } else {
                        y.push(R::zero());
                        mask.push(R::zero());
                    }
                }
                vec![
                    Val::Float(x.shape().clone(), y),
                    Val::Float(x.shape().clone(), mask),
                ]
            }
            "dropout_grad" => {
                let (mask, gy) = (self.input(node, 0), self.input(node, 1));
                let rate = a.get("rate").and_then(AttrValue::as_float).unwrap_or(0.5);
                let keep_scale = R::from_f64(1.0 / (1.0 - rate));
                let mv: Vec<R> = match mask {
                    Val::Bits(s, bits) => decode_bits(s, bits),
                    Val::Float(_, v) => v.clone(),
                };
                let v: Vec<R> = mv
                    .iter()
                    .zip(gy.floats())
                    .map(|(&m, &g)| g.mul(m).mul(keep_scale))
                    .collect();
                vec![Val::Float(gy.shape().clone(), v)]
            }
            "fully_connected" => {
                let (x, w, b) = (self.input(node, 0), self.input(node, 1), self.input(node, 2));
                let (bs, inf) = (x.shape().0[0] as usize, x.shape().0[1] as usize);
                let out = w.shape().0[0] as usize;
                let (xv, wv, bv) = (x.floats(), w.floats(), b.floats());
                let mut y = vec![R::zero(); bs * out];
                for i in 0..bs {
                    for o in 0..out {
                        let mut acc = R::zero();
                        for k in 0..inf {
                            acc = acc.add(xv[i * inf + k].mul(wv[o * inf + k]));
                        }
                        y[i * out + o] = acc.add(bv[o]);
                    }
                }
                vec![Val::Float(Shape(vec![bs as u64, out as u64]), y)]
            }
            "matmul" => {
                let (x, y) = (self.input(node, 0), self.input(node, 1));
                let ta = a.get("ta").and_then(AttrValue::as_bool).unwrap_or(false);
                let tb = a.get("tb").and_then(AttrValue::as_bool).unwrap_or(false);
                let v = matmul2(x.floats(), x.shape(), ta, y.floats(), y.shape(), tb);
                vec![v]
            }
            "batched_dot" => {
                let (x, y) = (self.input(node, 0), self.input(node, 1));
                let ta = a.get("ta").and_then(AttrValue::as_bool).unwrap_or(false);
                let tb = a.get("tb").and_then(AttrValue::as_bool).unwrap_or(false);
                let l = x.shape().0[0] as usize;
                let (xm, xk) = (x.shape().0[1] as usize, x.shape().0[2] as usize);
                let (ym, yk) = (y.shape().0[1] as usize, y.shape().0[2] as usize);
                let (m, k1) = if ta { (xk, xm) } else { (xm, xk) };
                let (k2, n) = if tb { (yk, ym) } else { (ym, yk) };
                debug_assert_eq!(k1, k2);
                let (xv, yv) = (x.floats(), y.floats());
                let mut out = vec![R::zero(); l * m * n];
                for b in 0..l {
                    let xo = b * xm * xk;
                    let yo = b * ym * yk;
                    for i in 0..m {
                        for j in 0..n {
                            let mut acc = R::zero();
                            for k in 0..k1 {
                                let xe = if ta { xv[xo + k * xm + i] } else { xv[xo + i * xk + k] };
                                let ye = if tb { yv[yo + j * yk + k] } else { yv[yo + k * yk + j] };
                                acc = acc.add(xe.mul(ye));
                            }
                            out[b * m * n + i * n + j] = acc;
                        }
                    }
                }
                vec![Val::Float(Shape(vec![l as u64, m as u64, n as u64]), out)]
            }
            "conv2d" => {
                let (x, w) = (self.input(node, 0), self.input(node, 1));
                let v = conv2d_fwd(x.floats(), x.shape(), w.floats(), w.shape());
                vec![v]
            }
            "conv2d_grad_input" => {
                let (w, gy) = (self.input(node, 0), self.input(node, 1));
                let v = conv2d_grad_input(w.floats(), w.shape(), gy.floats(), gy.shape());
                vec![v]
            }
            "conv2d_grad_weight" => {
                let (x, gy) = (self.input(node, 0), self.input(node, 1));
                let v = conv2d_grad_weight(x.floats(), x.shape(), gy.floats(), gy.shape());
                vec![v]
            }
            "broadcast_add" => {
                let (x, y) = (self.input(node, 0), self.input(node, 1));
                let small = x.floats();
                let rep = small.len();
                let v: Vec<R> = y
                    .floats()
                    .iter()
                    .enumerate()
                    .map(|(i, &q)| small[i % rep].add(q))
                    .collect();
                vec![Val::Float(y.shape().clone(), v)]
            }
            "concat" => {
                let axis = a.get("axis").and_then(AttrValue::as_int).unwrap_or(0) as usize;
                let stack = a.get("stack").and_then(AttrValue::as_bool).unwrap_or(false);
                if stack {
                    let first = self.input(node, 0);
                    let mut dims = first.shape().0.clone();
                    dims.insert(axis, node.inputs.len() as u64);
                    let outer: u64 = dims[..axis].iter().product();
                    let inner: u64 = dims[axis + 1..].iter().product();
                    let mut out = vec![R::zero(); (outer * dims[axis] * inner) as usize];
                    for (s, _) in node.inputs.iter().enumerate() {
                        let src = self.input(node, s).floats();
                        for o in 0..outer as usize {
                            let dst_base = (o as u64 * dims[axis] * inner + s as u64 * inner) as usize;
                            let src_base = o * inner as usize;
                            out[dst_base..dst_base + inner as usize]
                                .copy_from_slice(&src[src_base..src_base + inner as usize]);
                        }
                    }
                    vec![Val::Float(Shape(dims), out)]
                } else {
                    let first = self.input(node, 0);
                    let rank = first.shape().rank();
                    let outer: u64 = first.shape().0[..axis].iter().product();
                    let inner: u64 = first.shape().0[axis + 1..].iter().product();
                    let total_axis: u64 = (0..node.inputs.len())
                        .map(|k| self.input(node, k).shape().0[axis])
                        .sum();
                    let mut dims = first.shape().0.clone();
                    dims[axis] = total_axis;
                    let _ = rank;
                    let mut out = vec![R::zero(); (outer * total_axis * inner) as usize];
                    let mut offset = 0u64;
                    for k in 0..node.inputs.len() {
                        let val = self.input(node, k);
                        let len = val.shape().0[axis];
                        let src = val.floats();
                        for o in 0..outer as usize {
                            let src_base = o * (len * inner) as usize;
                            let dst_base =
                                (o as u64 * total_axis * inner + offset * inner) as usize;
                            out[dst_base..dst_base + (len * inner) as usize]
                                .copy_from_slice(&src[src_base..src_base + (len * inner) as usize]);
                        }
                        offset += len;
                    }
                    vec![Val::Float(Shape(dims), out)]
                }
            }
            "slice" => {
                let axis = a.get("axis").and_then(AttrValue::as_int).unwrap_or(0) as usize;
                let begin = a.get("begin").and_then(AttrValue::as_int).unwrap_or(0) as u64;
                let end = a.get("end").and_then(AttrValue::as_int).unwrap_or(0) as u64;
                let squeeze = a.get("squeeze").and_then(AttrValue::as_bool).unwrap_or(false);
                let x = self.input(node, 0);
                let dims = &x.shape().0;
                let outer: u64 = dims[..axis].iter().product();
                let inner: u64 = dims[axis + 1..].iter().product();
                let len = end - begin;
                let src = x.floats();
                let mut out = vec![R::zero(); (outer * len * inner) as usize];
                for o in 0..outer as usize {
                    let src_base = (o as u64 * dims[axis] * inner + begin * inner) as usize;
                    let dst_base = o * (len * inner) as usize;
                    out[dst_base..dst_base + (len * inner) as usize]
                        .copy_from_slice(&src[src_base..src_base + (len * inner) as usize]);
                }
                let mut new_dims = dims.clone();
                new_dims[axis] = len;
                if squeeze {
                    new_dims.remove(axis);
                }
                vec![Val::Float(Shape(new_dims), out)]
            }
            "pad" => {
                let axis = a.get("axis").and_then(AttrValue::as_int).unwrap_or(0) as usize;
                let begin = a.get("begin").and_then(AttrValue::as_int).unwrap_or(0) as u64;
                let total = a.get("total").and_then(AttrValue::as_int).unwrap_or(0) as u64;
                let unsqueeze = a.get("unsqueeze").and_then(AttrValue::as_bool).unwrap_or(false);
                let x = self.input(node, 0);
                let mut dims = x.shape().0.clone();
                if unsqueeze {
                    dims.insert(axis, 1);
                }
                let len = dims[axis];
                let outer: u64 = dims[..axis].iter().product();
                let inner: u64 = dims[axis + 1..].iter().product();
                let src = x.floats();
                let mut out = vec![R::zero(); (outer * total * inner) as usize];
                for o in 0..outer as usize {
                    let src_base = o * (len * inner) as usize;
                    let dst_base = (o as u64 * total * inner + begin * inner) as usize;
                    out[dst_base..dst_base + (len * inner) as usize]
                        .copy_from_slice(&src[src_base..src_base + (len * inner) as usize]);
                }
                let mut new_dims = dims;
                new_dims[axis] = total;
                vec![Val::Float(Shape(new_dims), out)]
            }
            "sum_reduce" => {
                let x = self.input(node, 0);
                let axes: Vec<usize> = match a.get("axes").and_then(AttrValue::as_ints) {
                    None => (0..x.shape().rank()).collect(),
                    Some(&[]) => (0..x.shape().rank()).collect(),
                    Some(list) => list.iter().map(|&v| v as usize).collect(),
                };
                let dims = &x.shape().0;
                let keep: Vec<u64> = dims
                    .iter()
                    .enumerate()
                    .filter(|(d, _)| !axes.contains(d))
                    .map(|(_, &v)| v)
                    .collect();
                let out_elems: u64 = keep.iter().product();
                let mut out = vec![R::zero(); out_elems as usize];
                // ascending flat order keeps accumulation deterministic
                let strides = row_major_strides(dims);
                let out_dims = Shape(keep.clone());
                let out_strides = row_major_strides(&out_dims.0);
                for (flat, &v) in x.floats().iter().enumerate() {
                    let mut rem = flat as u64;
                    let mut out_idx = 0u64;
                    let mut kept_pos = 0usize;
                    for (d, &st) in strides.iter().enumerate() {
                        let coord = rem / st;
                        rem %= st;
                        if !axes.contains(&d) {
                            out_idx += coord * out_strides[kept_pos];
                            kept_pos += 1;
                        }
                    }
                    out[out_idx as usize] = out[out_idx as usize].add(v);
                }
                vec![Val::Float(out_dims, out)]
            }
            "broadcast_to" => {
                let x = self.input(node, 0);
                let dims: Vec<u64> = a
                    .get("dims")
                    .and_then(AttrValue::as_ints)
                    .map(|v| v.iter().map(|&d| d as u64).collect())
                    .unwrap_or_default();
                let axes: Vec<usize> = a
                    .get("axes")
                    .and_then(AttrValue::as_ints)
                    .map(|v| v.iter().map(|&d| d as usize).collect())
                    .unwrap_or_default();
                let strides = row_major_strides(&dims);
                let kept: Vec<u64> = dims
                    .iter()
                    .enumerate()
                    .filter(|(d, _)| !axes.contains(d))
                    .map(|(_, &v)| v)
                    .collect();
                let src_strides = row_major_strides(&kept);
                let total: u64 = dims.iter().product();
                let src = x.floats();
                let mut out = vec![R::zero(); total as usize];
                for flat in 0..total {
                    let mut rem = flat;
                    let mut src_idx = 0u64;
                    let mut kept_pos = 0usize;
                    for (d, &st) in strides.iter().enumerate() {
                        let coord = rem / st;
                        rem %= st;
                        if !axes.contains(&d) {
                            src_idx += coord * src_strides[kept_pos];
                            kept_pos += 1;
                        }
                    }
                    out[flat as usize] = src[src_idx as usize];
                }
                vec![Val::Float(Shape(dims), out)]
            }
            "ones" => {
                let dims: Vec<u64> = a
                    .get("dims")
                    .and_then(AttrValue::as_ints)
                    .map(|v| v.iter().map(|&d| d as u64).collect())
                    .unwrap_or_default();
                let total: u64 = dims.iter().product();
                vec![Val::Float(Shape(dims), vec![R::one(); total as usize])]
            }
            "softmax_ce_loss" => {
                let (x, l) = (self.input(node, 0), self.input(node, 1));
                let (bs, c) = (x.shape().0[0] as usize, x.shape().0[1] as usize);
                let (xv, lv) = (x.floats(), l.floats());
                let mut loss = R::zero();
                for b in 0..bs {
                    let row = &xv[b * c..(b + 1) * c];
                    let mut m = row[0];
                    for &v in row.iter().skip(1) {
                        if v > m {
                            m = v;
                        }
                    }
                    let mut s = R::zero();
                    for &v in row {
                        s = s.add(v.sub(m).exp_());
                    }
                    let lse = s.ln_().add(m);
                    for j in 0..c {
                        loss = loss.add(lv[b * c + j].mul(lse.sub(row[j])));
                    }
                }
                vec![Val::Float(Shape::scalar(), vec![loss])]
            }
            "softmax_ce_loss_grad" => {
                let (x, l, gy) = (self.input(node, 0), self.input(node, 1), self.input(node, 2));
                let (bs, c) = (x.shape().0[0] as usize, x.shape().0[1] as usize);
                let (xv, lv) = (x.floats(), l.floats());
                let g = gy.floats()[0];
                let mut out = vec![R::zero(); bs * c];
                for b in 0..bs {
                    let row = &xv[b * c..(b + 1) * c];
                    let mut m = row[0];
                    for &v in row.iter().skip(1) {
                        if v > m {
                            m = v;
                        }
                    }
                    let mut s = R::zero();
                    for &v in row {
                        s = s.add(v.sub(m).exp_());
                    }
                    let mut lsum = R::zero();
                    for j in 0..c {
                        lsum = lsum.add(lv[b * c + j]);
                    }
                    for j in 0..c {
                        let p = row[j].sub(m).exp_().div(s);
                        out[b * c + j] = g.mul(lsum.mul(p).sub(lv[b * c + j]));
                    }
                }
                vec![Val::Float(x.shape().clone(), out)]
            }
            "encode" => {
                let x = self.input(node, 0);
                let elems = x.shape().elems();
                let mut bits = vec![0u8; ((elems + 7) / 8) as usize];
                for (i, &v) in x.floats().iter().enumerate() {
                    if v.gt_zero() {
                        bits[i / 8] |= 1 << (i % 8);
                    }
                }
                vec![Val::Bits(x.shape().clone(), bits)]
            }
            "decode" => {
                let x = self.input(node, 0);
                match x {
                    Val::Bits(s, bits) => vec![Val::Float(s.clone(), decode_bits(s, bits))],
                    Val::Float(s, v) => vec![Val::Float(s.clone(), v.clone())],
                }
            }
            other => return Err(ExecError::UnknownOp(other.to_string())),
        };
        Ok(out)
    }
}

fn row_major_strides(dims: &[u64]) -> Vec<u64> {
    let mut strides = vec![1u64; dims.len()];
    for d in (0..dims.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * dims[d + 1];
    }
    strides
}

fn matmul2<R: Real>(x: &[R], xs: &Shape, ta: bool, y: &[R], ys: &Shape, tb: bool) -> Val<R> {
    let (xm, xk) = (xs.0[0] as usize, xs.0[1] as usize);
    let (ym, yk) = (ys.0[0] as usize, ys.0[1] as usize);
    let (m, k1) = if ta { (xk, xm) } else { (xm, xk) };
    let (k2, n) = if tb { (yk, ym) } else { (ym, yk) };
    debug_assert_eq!(k1, k2);
    let mut out = vec![R::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = R::zero();
            for k in 0..k1 {
                let xe = if ta { x[k * xk + i] } else { x[i * xk + k] };
                let ye = if tb { y[j * yk + k] } else { y[k * yk + j] };
                acc = acc.add(xe.mul(ye));
            }
            out[i * n + j] = acc;
        }
    }
    Val::Float(Shape(vec![m as u64, n as u64]), out)
}

fn conv2d_fwd<R: Real>(x: &[R], xs: &Shape, w: &[R], ws: &Shape) -> Val<R> {
    let (b, cin, h, wd) = (
        xs.0[0] as usize,
        xs.0[1] as usize,
        xs.0[2] as usize,
        xs.0[3] as usize,
    );
    let (cout, _, kh, kw) = (
        ws.0[0] as usize,
        ws.0[1] as usize,
        ws.0[2] as usize,
        ws.0[3] as usize,
    );
    let (ho, wo) = (h - kh + 1, wd - kw + 1);
    let mut out = vec![R::zero(); b * cout * ho * wo];
    for bi in 0..b {
        for co in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = R::zero();
                    for ci in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let xv = x[((bi * cin + ci) * h + i + u) * wd + j + v];
                                let wv = w[((co * cin + ci) * kh + u) * kw + v];
                                acc = acc.add(xv.mul(wv));
                            }
                        }
                    }
                    out[((bi * cout + co) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Val::Float(Shape(vec![b as u64, cout as u64, ho as u64, wo as u64]), out)
}

fn conv2d_grad_input<R: Real>(w: &[R], ws: &Shape, gy: &[R], gys: &Shape) -> Val<R> {
    let (cout, cin, kh, kw) = (
        ws.0[0] as usize,
        ws.0[1] as usize,
        ws.0[2] as usize,
        ws.0[3] as usize,
    );
    let (b, _, ho, wo) = (
        gys.0[0] as usize,
        gys.0[1] as usize,
        gys.0[2] as usize,
        gys.0[3] as usize,
    );
    let (h, wd) = (ho + kh - 1, wo + kw - 1);
    let mut out = vec![R::zero(); b * cin * h * wd];
    for bi in 0..b {
        for ci in 0..cin {
            for p in 0..h {
                for q in 0..wd {
                    let mut acc = R::zero();
                    for co in 0..cout {
                        for u in 0..kh {
                            for v in 0..kw {
                                if p >= u && q >= v && p - u < ho && q - v < wo {
                                    let g = gy[((bi * cout + co) * ho + p - u) * wo + q - v];
                                    let wv = w[((co * cin + ci) * kh + u) * kw + v];
                                    acc = acc.add(g.mul(wv));
                                }
                            }
                        }
                    }
                    out[((bi * cin + ci) * h + p) * wd + q] = acc;
                }
            }
        }
    }
    Val::Float(Shape(vec![b as u64, cin as u64, h as u64, wd as u64]), out)
}

/// Total interpreted elements across all edges; used for the `verify` cap.
pub fn total_elements(graph: &Graph, registry: &Registry) -> Result<u64, crate::passes::PassError> {
    let shapes = crate::passes::infer_shapes(graph, registry)?;
    Ok(shapes.0.values().map(|(s, _)| s.elems()).sum())
}

/// Measured live-bytes trace: runs the graph and reports the buffers actually
/// held at each step, with the planner's weight and workspace conventions.
pub fn measure_live_bytes(
    graph: &Graph,
    registry: &Registry,
    env: &ExecEnv,
    schedule: &Schedule,
    weight_multiplier: u64,
) -> Result<Vec<u64>, ExecError> {
    Ok(execute(graph, registry, env, schedule, weight_multiplier)?.live_bytes)
}

/// Central finite differences of the loss (graph output 0) with respect to
/// every placeholder element, step `eps * max(1, |x|)` per element.
pub fn finite_diff(
    graph: &Graph,
    registry: &Registry,
    env: &ExecEnv,
    eps: f64,
) -> Result<BTreeMap<String, Vec<f64>>, ExecError> {
    let schedule = crate::planner::build_schedule(graph)?;
    let loss_of = |env: &ExecEnv| -> Result<f64, ExecError> {
        let out = execute(graph, registry, env, &schedule, 1)?;
        Ok(out.outputs[0].to_f64_vec()[0])
    };
    let mut grads = BTreeMap::new();
    let names: Vec<String> = graph
        .placeholder_ids()
        .map(|id| graph.placeholder_info(id).unwrap().name.clone())
        .collect();
    for name in names {
        let base = env.bindings[&name].clone();
        let mut g = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let h = eps * f64::max(1.0, base[i].abs());
            let mut up = env.clone();
            up.bindings.get_mut(&name).unwrap()[i] = base[i] + h;
            let lu = loss_of(&up)?;
            let mut dn = env.clone();
            dn.bindings.get_mut(&name).unwrap()[i] = base[i] - h;
            let ld = loss_of(&dn)?;
            g.push((lu - ld) / (2.0 * h));
        }
        grads.insert(name, g);
    }
    Ok(grads)
}

fn conv2d_grad_weight<R: Real>(x: &[R], xs: &Shape, gy: &[R], gys: &Shape) -> Val<R> {
    let (b, cin, h, wd) = (
        xs.0[0] as usize,
        xs.0[1] as usize,
        xs.0[2] as usize,
        xs.0[3] as usize,
    );
    let (_, cout, ho, wo) = (
        gys.0[0] as usize,
        gys.0[1] as usize,
        gys.0[2] as usize,
        gys.0[3] as usize,
    );
    let (kh, kw) = (h - ho + 1, wd - wo + 1);
    let mut out = vec![R::zero(); cout * cin * kh * kw];
    for co in 0..cout {
        for ci in 0..cin {
            for u in 0..kh {
                for v in 0..kw {
                    let mut acc = R::zero();
                    for bi in 0..b {
                        for i in 0..ho {
                            for j in 0..wo {
                                let g = gy[((bi * cout + co) * ho + i) * wo + j];
                                let xv = x[((bi * cin + ci) * h + i + u) * wd + j + v];
                                acc = acc.add(g.mul(xv));
                            }
                        }
                    }
                    out[((co * cin + ci) * kh + u) * kw + v] = acc;
                }
            }
        }
    }
    Val::Float(Shape(vec![cout as u64, cin as u64, kh as u64, kw as u64]), out)
}
