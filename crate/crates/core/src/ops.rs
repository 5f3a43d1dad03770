//! Operator registry: per-op shape rules, gradient builders, gradient data
//! dependencies, flop costs and strategy-relevant flags.
//!
//! Gradient dependencies are declared up front (`GradDeps`) so the rewrite
//! passes can query them cheaply; `probe_grad_deps` rebuilds each gradient on
//! a dummy node and checks the declaration against what the builder actually
//! references, so the two can never drift.

use std::collections::{BTreeMap, BTreeSet};

use crate::graph::{
    attrs, AttrValue, Attrs, Dtype, EdgeRef, Graph, GraphError, Node, NodeKind, Shape,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arity {
    Fixed(usize),
    AtLeast(usize),
}

impl Arity {
    pub fn accepts(self, n: usize) -> bool {
        match self {
            Arity::Fixed(k) => n == k,
            Arity::AtLeast(k) => n >= k,
        }
    }
}

impl std::fmt::Display for Arity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Arity::Fixed(k) => write!(f, "{}", k),
            Arity::AtLeast(k) => write!(f, ">={}", k),
        }
    }
}

/// Which forward tensors a gradient needs: input slots, output slots, and the
/// incoming output gradient itself.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GradDeps {
    pub needs_inputs: BTreeSet<usize>,
    pub needs_outputs: BTreeSet<usize>,
    pub needs_output_grad: bool,
}

impl GradDeps {
    fn new(inputs: &[usize], outputs: &[usize]) -> Self {
        GradDeps {
            needs_inputs: inputs.iter().copied().collect(),
            needs_outputs: outputs.iter().copied().collect(),
            needs_output_grad: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ShapeError {
    #[error("{0}")]
    Mismatch(String),
}

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("op `{0}` is not differentiable")]
    NotDifferentiable(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("gradient construction for `{op}`: {msg}")]
    Build { op: String, msg: String },
}

pub type ShapeFn = fn(&[Shape], &Attrs) -> Result<Vec<Shape>, ShapeError>;
pub type DtypeFn = fn(&[Dtype], &Attrs) -> Vec<Dtype>;
pub type CostFn = fn(&[Shape], &[Shape], &Attrs) -> u64;
pub type WorkspaceFn = fn(&[Shape], &[Shape], &Attrs) -> u64;

/// Builds gradient nodes for one forward node. `out_grads[k]` is the gradient
/// flowing into output `k` (absent when nothing downstream consumed it);
/// returns one optional gradient edge per forward input.
pub type GradBuilderFn =
    fn(&mut GradBuild<'_>, &Node, &[Option<EdgeRef>]) -> Result<Vec<Option<EdgeRef>>, GradError>;

/// Mutable view handed to gradient builders.
pub struct GradBuild<'a> {
    pub graph: &'a mut Graph,
    pub registry: &'a Registry,
    /// Shapes of the forward edges (the backward part is not yet inferred).
    pub fwd_shapes: &'a BTreeMap<EdgeRef, (Shape, Dtype)>,
}

impl<'a> GradBuild<'a> {
    pub fn add(
        &mut self,
        op: &str,
        inputs: Vec<EdgeRef>,
        a: Attrs,
        tag: &str,
    ) -> Result<EdgeRef, GradError> {
        let id = self
            .graph
            .add_node_kind(self.registry, op, inputs, a, tag, NodeKind::Gradient, None)?;
        Ok(EdgeRef::new(id, 0))
    }

    pub fn shape(&self, e: EdgeRef) -> &Shape {
        &self.fwd_shapes[&e].0
    }
}

pub struct OpDef {
    pub name: &'static str,
    pub arity: Arity,
    pub num_outputs: usize,
    pub shape_fn: ShapeFn,
    /// Defaults to "same dtype as input 0" when absent.
    pub dtype_fn: Option<DtypeFn>,
    pub cost_fn: CostFn,
    pub workspace_fn: Option<WorkspaceFn>,
    pub grad_builder: Option<GradBuilderFn>,
    pub grad_deps: Option<GradDeps>,
    pub compute_heavy: bool,
    pub binarizable: bool,
}

#[derive(Default)]
pub struct Registry {
    ops: BTreeMap<&'static str, OpDef>,
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    pub fn register(&mut self, def: OpDef) -> Result<(), GraphError> {
        if self.ops.contains_key(def.name) {
            return Err(GraphError::Parse(format!("duplicate op `{}`", def.name)));
        }
        debug_assert!(
            !(def.compute_heavy && def.binarizable),
            "compute-heavy and binarizable are mutually exclusive"
        );
        self.ops.insert(def.name, def);
        Ok(())
    }

    pub fn lookup(&self, name: &str) -> Option<&OpDef> {
        self.ops.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.ops.contains_key(name)
    }

    pub fn op_names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.ops.keys().copied()
    }

    pub fn grad_deps(&self, name: &str) -> Result<&GradDeps, GradError> {
        let def = self
            .lookup(name)
            .ok_or_else(|| GradError::NotDifferentiable(name.to_string()))?;
        def.grad_deps
            .as_ref()
            .ok_or_else(|| GradError::NotDifferentiable(name.to_string()))
    }

    pub fn is_differentiable(&self, name: &str) -> bool {
        self.lookup(name).map_or(false, |d| d.grad_builder.is_some())
    }

    pub fn compute_heavy_ops(&self) -> BTreeSet<String> {
        self.ops
            .values()
            .filter(|d| d.compute_heavy)
            .map(|d| d.name.to_string())
            .collect()
    }

    pub fn binarizable_ops(&self) -> BTreeSet<String> {
        self.ops
            .values()
            .filter(|d| d.binarizable)
            .map(|d| d.name.to_string())
            .collect()
    }

    pub fn infer_shape(
        &self,
        op: &str,
        input_shapes: &[Shape],
        a: &Attrs,
    ) -> Result<Vec<Shape>, ShapeError> {
        let def = self
            .lookup(op)
            .ok_or_else(|| ShapeError::Mismatch(format!("unknown op `{}`", op)))?;
        (def.shape_fn)(input_shapes, a)
    }

    pub fn infer_dtype(&self, op: &str, input_dtypes: &[Dtype], a: &Attrs) -> Vec<Dtype> {
        let def = self.lookup(op).expect("op checked before dtype inference");
        match def.dtype_fn {
            Some(f) => f(input_dtypes, a),
            None => {
                let d = input_dtypes.first().copied().unwrap_or(Dtype::F32);
                vec![d; def.num_outputs]
            }
        }
    }

    pub fn node_cost(&self, op: &str, in_shapes: &[Shape], out_shapes: &[Shape], a: &Attrs) -> u64 {
        match self.lookup(op) {
            Some(def) => (def.cost_fn)(in_shapes, out_shapes, a),
            None => 0,
        }
    }
}

// ---------------------------------------------------------------------------
// Shape rules
// ---------------------------------------------------------------------------

fn same_as_first(ins: &[Shape], _: &Attrs) -> Result<Vec<Shape>, ShapeError> {
    Ok(vec![ins[0].clone()])
}

fn elementwise_pair(ins: &[Shape], _: &Attrs) -> Result<Vec<Shape>, ShapeError> {
    if ins[0] != ins[1] {
        return Err(ShapeError::Mismatch(format!(
            "elementwise operands differ: {} vs {}",
            ins[0], ins[1]
        )));
    }
    Ok(vec![ins[0].clone()])
}

fn placeholder_shape(_: &[Shape], _: &Attrs) -> Result<Vec<Shape>, ShapeError> {
    Err(ShapeError::Mismatch(
        "placeholder shapes come from the graph, not inference".into(),
    ))
}

fn fully_connected_shape(ins: &[Shape], _: &Attrs) -> Result<Vec<Shape>, ShapeError> {
    let (x, w, b) = (&ins[0], &ins[1], &ins[2]);
    if x.rank() != 2 || w.rank() != 2 || b.rank() != 1 {
        return Err(ShapeError::Mismatch(format!(
            "fully_connected wants X:[B,in] W:[out,in] b:[out], got {} {} {}",
            x, w, b
        )));
    }
    let (batch, inf) = (x.0[0], x.0[1]);
    let (out, win) = (w.0[0], w.0[1]);
    if inf != win || b.0[0] != out {
        return Err(ShapeError::Mismatch(format!(
            "fully_connected dims disagree: X {} W {} b {}",
            x, w, b
        )));
    }
    Ok(vec![Shape(vec![batch, out])])
}

fn transposed(s: &Shape, t: bool) -> (u64, u64) {
    if t {
        (s.0[s.rank() - 1], s.0[s.rank() - 2])
    } else {
        (s.0[s.rank() - 2], s.0[s.rank() - 1])
    }
}

fn matmul_shape(ins: &[Shape], a: &Attrs) -> Result<Vec<Shape>, ShapeError> {
    if ins[0].rank() != 2 || ins[1].rank() != 2 {
        return Err(ShapeError::Mismatch("matmul wants rank-2 operands".into()));
    }
    let ta = a.get("ta").and_then(AttrValue::as_bool).unwrap_or(false);
    let tb = a.get("tb").and_then(AttrValue::as_bool).unwrap_or(false);
    let (m, k1) = transposed(&ins[0], ta);
    let (k2, n) = transposed(&ins[1], tb);
    if k1 != k2 {
        return Err(ShapeError::Mismatch(format!(
            "matmul inner dims disagree: {} vs {}",
            k1, k2
        )));
    }
    Ok(vec![Shape(vec![m, n])])
}

fn batched_dot_shape(ins: &[Shape], a: &Attrs) -> Result<Vec<Shape>, ShapeError> {
    if ins[0].rank() != 3 || ins[1].rank() != 3 || ins[0].0[0] != ins[1].0[0] {
        return Err(ShapeError::Mismatch(
            "batched_dot wants [L,m,k] and [L,k,n]".into(),
        ));
    }
    let ta = a.get("ta").and_then(AttrValue::as_bool).unwrap_or(false);
    let tb = a.get("tb").and_then(AttrValue::as_bool).unwrap_or(false);
    let (m, k1) = transposed(&ins[0], ta);
    let (k2, n) = transposed(&ins[1], tb);
    if k1 != k2 {
        return Err(ShapeError::Mismatch(format!(
            "batched_dot inner dims disagree: {} vs {}",
            k1, k2
        )));
    }
    Ok(vec![Shape(vec![ins[0].0[0], m, n])])
}

fn conv2d_shape(ins: &[Shape], _: &Attrs) -> Result<Vec<Shape>, ShapeError> {
    let (x, w) = (&ins[0], &ins[1]);
    if x.rank() != 4 || w.rank() != 4 || x.0[1] != w.0[1] {
        return Err(ShapeError::Mismatch(format!(
            "conv2d wants X:[B,Cin,H,W] W:[Cout,Cin,kh,kw], got {} {}",
            x, w
        )));
    }
    let (kh, kw) = (w.0[2], w.0[3]);
    if x.0[2] < kh || x.0[3] < kw {
        return Err(ShapeError::Mismatch("conv2d kernel larger than input".into()));
    }
    Ok(vec![Shape(vec![x.0[0], w.0[0], x.0[2] - kh + 1, x.0[3] - kw + 1])])
}

fn conv2d_grad_input_shape(ins: &[Shape], _: &Attrs) -> Result<Vec<Shape>, ShapeError> {
    // inputs: weight [Cout,Cin,kh,kw], output-grad [B,Cout,Ho,Wo]
    let (w, gy) = (&ins[0], &ins[1]);
    if w.rank() != 4 || gy.rank() != 4 || gy.0[1] != w.0[0] {
        return Err(ShapeError::Mismatch("conv2d_grad_input operand mismatch".into()));
    }
    Ok(vec![Shape(vec![gy.0[0], w.0[1], gy.0[2] + w.0[2] - 1, gy.0[3] + w.0[3] - 1])])
}

fn conv2d_grad_weight_shape(ins: &[Shape], _: &Attrs) -> Result<Vec<Shape>, ShapeError> {
    // inputs: x [B,Cin,H,W], output-grad [B,Cout,Ho,Wo]
    let (x, gy) = (&ins[0], &ins[1]);
    if x.rank() != 4 || gy.rank() != 4 || x.0[0] != gy.0[0] {
        return Err(ShapeError::Mismatch("conv2d_grad_weight operand mismatch".into()));
    }
    if x.0[2] < gy.0[2] || x.0[3] < gy.0[3] {
        return Err(ShapeError::Mismatch("conv2d_grad_weight spatial mismatch".into()));
    }
    Ok(vec![Shape(vec![gy.0[1], x.0[1], x.0[2] - gy.0[2] + 1, x.0[3] - gy.0[3] + 1])])
}

/// Leading-axis broadcast: `a`'s dims must equal a suffix of `b`'s.
fn broadcast_add_shape(ins: &[Shape], _: &Attrs) -> Result<Vec<Shape>, ShapeError> {
    let (a, b) = (&ins[0], &ins[1]);
    if a.rank() > b.rank() || &b.0[b.rank() - a.rank()..] != a.0.as_slice() {
        return Err(ShapeError::Mismatch(format!(
            "broadcast_add: {} is not a trailing suffix of {}",
            a, b
        )));
    }
    Ok(vec![b.clone()])
}

fn concat_shape(ins: &[Shape], a: &Attrs) -> Result<Vec<Shape>, ShapeError> {
    let axis = a.get("axis").and_then(AttrValue::as_int).unwrap_or(0) as usize;
    let stack = a.get("stack").and_then(AttrValue::as_bool).unwrap_or(false);
    let first = &ins[0];
    if stack {
        for s in ins {
            if s != first {
                return Err(ShapeError::Mismatch("stacked concat wants equal shapes".into()));
            }
        }
        if axis > first.rank() {
            return Err(ShapeError::Mismatch("stack axis out of range".into()));
        }
        let mut dims = first.0.clone();
        dims.insert(axis, ins.len() as u64);
        return Ok(vec![Shape(dims)]);
    }
    if axis >= first.rank() {
        return Err(ShapeError::Mismatch("concat axis out of range".into()));
    }
    let mut dims = first.0.clone();
    let mut total = 0u64;
    for s in ins {
        if s.rank() != first.rank() {
            return Err(ShapeError::Mismatch("concat rank mismatch".into()));
        }
        for (d, (&sd, &fd)) in s.0.iter().zip(first.0.iter()).enumerate() {
            if d != axis && sd != fd {
                return Err(ShapeError::Mismatch(format!(
                    "concat dim {} mismatch: {} vs {}",
                    d, s, first
                )));
            }
        }
        total += s.0[axis];
    }
    dims[axis] = total;
    Ok(vec![Shape(dims)])
}

fn slice_shape(ins: &[Shape], a: &Attrs) -> Result<Vec<Shape>, ShapeError> {
    let axis = a.get("axis").and_then(AttrValue::as_int).unwrap_or(0) as usize;
    let begin = a.get("begin").and_then(AttrValue::as_int).unwrap_or(0) as u64;
    let end = a.get("end").and_then(AttrValue::as_int).unwrap_or(0) as u64;
    let squeeze = a.get("squeeze").and_then(AttrValue::as_bool).unwrap_or(false);
    let x = &ins[0];
    if axis >= x.rank() || begin >= end || end > x.0[axis] {
        return Err(ShapeError::Mismatch(format!(
            "slice [{},{}) on axis {} of {}",
            begin, end, axis, x
        )));
    }
    let mut dims = x.0.clone();
    dims[axis] = end - begin;
    if squeeze {
        if end - begin != 1 {
            return Err(ShapeError::Mismatch("squeeze wants a width-1 slice".into()));
        }
        dims.remove(axis);
    }
    Ok(vec![Shape(dims)])
}

fn pad_shape(ins: &[Shape], a: &Attrs) -> Result<Vec<Shape>, ShapeError> {
    let axis = a.get("axis").and_then(AttrValue::as_int).unwrap_or(0) as usize;
    let total = a.get("total").and_then(AttrValue::as_int).unwrap_or(0) as u64;
    let begin = a.get("begin").and_then(AttrValue::as_int).unwrap_or(0) as u64;
    let unsqueeze = a.get("unsqueeze").and_then(AttrValue::as_bool).unwrap_or(false);
    let mut dims = ins[0].0.clone();
    if unsqueeze {
        if axis > dims.len() {
            return Err(ShapeError::Mismatch("pad unsqueeze axis out of range".into()));
        }
        dims.insert(axis, 1);
    }
    if axis >= dims.len() || begin + dims[axis] > total {
        return Err(ShapeError::Mismatch("pad segment exceeds total".into()));
    }
    dims[axis] = total;
    Ok(vec![Shape(dims)])
}

fn sum_reduce_shape(ins: &[Shape], a: &Attrs) -> Result<Vec<Shape>, ShapeError> {
    let x = &ins[0];
    match a.get("axes").and_then(AttrValue::as_ints) {
        None | Some(&[]) => Ok(vec![Shape::scalar()]),
        Some(axes) => {
            let mut keep: Vec<u64> = Vec::new();
            let axes: BTreeSet<usize> = axes.iter().map(|&v| v as usize).collect();
            for ax in &axes {
                if *ax >= x.rank() {
                    return Err(ShapeError::Mismatch("reduce axis out of range".into()));
                }
            }
            for (d, &v) in x.0.iter().enumerate() {
                if !axes.contains(&d) {
                    keep.push(v);
                }
            }
            Ok(vec![Shape(keep)])
        }
    }
}

fn broadcast_to_shape(ins: &[Shape], a: &Attrs) -> Result<Vec<Shape>, ShapeError> {
    let dims: Vec<u64> = a
        .get("dims")
        .and_then(AttrValue::as_ints)
        .map(|v| v.iter().map(|&d| d as u64).collect())
        .unwrap_or_default();
    let axes: BTreeSet<usize> = a
        .get("axes")
        .and_then(AttrValue::as_ints)
        .map(|v| v.iter().map(|&d| d as usize).collect())
        .unwrap_or_default();
    let kept: Vec<u64> = dims
        .iter()
        .enumerate()
        .filter(|(d, _)| !axes.contains(d))
        .map(|(_, &v)| v)
        .collect();
    if kept != ins[0].0 {
        return Err(ShapeError::Mismatch(format!(
            "broadcast_to: {} does not match target {:?} minus axes",
            ins[0], dims
        )));
    }
    Ok(vec![Shape(dims)])
}

fn ones_shape(_: &[Shape], a: &Attrs) -> Result<Vec<Shape>, ShapeError> {
    let dims: Vec<u64> = a
        .get("dims")
        .and_then(AttrValue::as_ints)
        .map(|v| v.iter().map(|&d| d as u64).collect())
        .unwrap_or_default();
    Ok(vec![Shape(dims)])
}

fn softmax_ce_shape(ins: &[Shape], _: &Attrs) -> Result<Vec<Shape>, ShapeError> {
    if ins[0].rank() != 2 || ins[0] != ins[1] {
        return Err(ShapeError::Mismatch(format!(
            "softmax_ce_loss wants matching [B,C] logits and labels, got {} {}",
            ins[0], ins[1]
        )));
    }
    Ok(vec![Shape::scalar()])
}

fn softmax_ce_grad_shape(ins: &[Shape], _: &Attrs) -> Result<Vec<Shape>, ShapeError> {
    Ok(vec![ins[0].clone()])
}

fn dropout_shape(ins: &[Shape], _: &Attrs) -> Result<Vec<Shape>, ShapeError> {
    Ok(vec![ins[0].clone(), ins[0].clone()])
}

fn unary_grad_shape(ins: &[Shape], _: &Attrs) -> Result<Vec<Shape>, ShapeError> {
    if ins[0] != ins[1] {
        return Err(ShapeError::Mismatch("gradient operand shapes differ".into()));
    }
    Ok(vec![ins[0].clone()])
}

fn add_n_shape(ins: &[Shape], _: &Attrs) -> Result<Vec<Shape>, ShapeError> {
    for s in ins {
        if s != &ins[0] {
            return Err(ShapeError::Mismatch("add_n operands differ".into()));
        }
    }
    Ok(vec![ins[0].clone()])
}

// ---------------------------------------------------------------------------
// Dtype rules
// ---------------------------------------------------------------------------

fn encode_dtype(_: &[Dtype], _: &Attrs) -> Vec<Dtype> {
    vec![Dtype::Bit]
}

fn decode_dtype(_: &[Dtype], a: &Attrs) -> Vec<Dtype> {
    match a.get("dtype").and_then(AttrValue::as_str) {
        Some("f64") => vec![Dtype::F64],
        _ => vec![Dtype::F32],
    }
}

fn ones_dtype(_: &[Dtype], a: &Attrs) -> Vec<Dtype> {
    match a.get("dtype").and_then(AttrValue::as_str) {
        Some("f64") => vec![Dtype::F64],
        _ => vec![Dtype::F32],
    }
}

// ---------------------------------------------------------------------------
// Cost rules (flops)
// ---------------------------------------------------------------------------

fn cost_output_elems(_: &[Shape], outs: &[Shape], _: &Attrs) -> u64 {
    outs.iter().map(Shape::elems).sum()
}

fn cost_zero(_: &[Shape], _: &[Shape], _: &Attrs) -> u64 {
    0
}

fn cost_fully_connected(ins: &[Shape], _: &[Shape], _: &Attrs) -> u64 {
    // 2 * B * in * out
    let (x, w) = (&ins[0], &ins[1]);
    2 * x.0[0] * x.0[1] * w.0[0]
}

fn cost_matmul(ins: &[Shape], outs: &[Shape], a: &Attrs) -> u64 {
    let ta = a.get("ta").and_then(AttrValue::as_bool).unwrap_or(false);
    let (_, k) = transposed(&ins[0], ta);
    2 * outs[0].elems() * k
}

fn cost_batched_dot(ins: &[Shape], outs: &[Shape], a: &Attrs) -> u64 {
    let ta = a.get("ta").and_then(AttrValue::as_bool).unwrap_or(false);
    let (_, k) = transposed(&ins[0], ta);
    2 * outs[0].elems() * k
}

fn cost_conv2d(ins: &[Shape], outs: &[Shape], _: &Attrs) -> u64 {
    // 2 * kh*kw * Cin * Cout * Hout * Wout * B
    let w = &ins[1];
    2 * w.0[2] * w.0[3] * w.0[1] * outs[0].elems()
}

fn cost_conv2d_grad_input(ins: &[Shape], outs: &[Shape], _: &Attrs) -> u64 {
    // mirrors the forward rule: 2 * k^2 * Cin * Cout * Ho * Wo * B
    let (w, gy) = (&ins[0], &ins[1]);
    let _ = outs;
    2 * w.0[2] * w.0[3] * w.0[1] * gy.elems()
}

fn cost_conv2d_grad_weight(ins: &[Shape], _: &[Shape], _: &Attrs) -> u64 {
    let (x, gy) = (&ins[0], &ins[1]);
    // k dims recovered from the spatial difference
    let kh = x.0[2] - gy.0[2] + 1;
    let kw = x.0[3] - gy.0[3] + 1;
    2 * kh * kw * x.0[1] * gy.elems()
}

fn cost_dropout(_: &[Shape], outs: &[Shape], _: &Attrs) -> u64 {
    // mask generation plus the multiply
    2 * outs[0].elems()
}

fn cost_softmax_ce(ins: &[Shape], _: &[Shape], _: &Attrs) -> u64 {
    // exp, shift, sum, log, dot — a handful of sweeps over the logits
    5 * ins[0].elems()
}

fn cost_softmax_ce_grad(ins: &[Shape], _: &[Shape], _: &Attrs) -> u64 {
    5 * ins[0].elems()
}

// ---------------------------------------------------------------------------
// Gradient builders
// ---------------------------------------------------------------------------

fn need(g: &[Option<EdgeRef>], k: usize, op: &str) -> Result<EdgeRef, GradError> {
    g.get(k).copied().flatten().ok_or_else(|| GradError::Build {
        op: op.to_string(),
        msg: format!("missing output gradient {}", k),
    })
}

fn grad_add(
    _: &mut GradBuild<'_>,
    n: &Node,
    gys: &[Option<EdgeRef>],
) -> Result<Vec<Option<EdgeRef>>, GradError> {
    let gy = need(gys, 0, &n.op)?;
    Ok(vec![Some(gy), Some(gy)])
}

fn grad_mul(
    b: &mut GradBuild<'_>,
    n: &Node,
    gys: &[Option<EdgeRef>],
) -> Result<Vec<Option<EdgeRef>>, GradError> {
    let gy = need(gys, 0, &n.op)?;
    let ga = b.add("mul", vec![gy, n.inputs[1]], Attrs::new(), &n.tag)?;
    let gb = b.add("mul", vec![gy, n.inputs[0]], Attrs::new(), &n.tag)?;
    Ok(vec![Some(ga), Some(gb)])
}

fn grad_tanh(
    b: &mut GradBuild<'_>,
    n: &Node,
    gys: &[Option<EdgeRef>],
) -> Result<Vec<Option<EdgeRef>>, GradError> {
    let gy = need(gys, 0, &n.op)?;
    let y = EdgeRef::new(n.id, 0);
    let gx = b.add("tanh_grad", vec![y, gy], Attrs::new(), &n.tag)?;
    Ok(vec![Some(gx)])
}

fn grad_sigmoid(
    b: &mut GradBuild<'_>,
    n: &Node,
    gys: &[Option<EdgeRef>],
) -> Result<Vec<Option<EdgeRef>>, GradError> {
    let gy = need(gys, 0, &n.op)?;
    let y = EdgeRef::new(n.id, 0);
    let gx = b.add("sigmoid_grad", vec![y, gy], Attrs::new(), &n.tag)?;
    Ok(vec![Some(gx)])
}

fn grad_relu(
    b: &mut GradBuild<'_>,
    n: &Node,
    gys: &[Option<EdgeRef>],
) -> Result<Vec<Option<EdgeRef>>, GradError> {
    let gy = need(gys, 0, &n.op)?;
    let y = EdgeRef::new(n.id, 0);
    let gx = b.add("relu_grad", vec![y, gy], Attrs::new(), &n.tag)?;
    Ok(vec![Some(gx)])
}

fn grad_dropout(
    b: &mut GradBuild<'_>,
    n: &Node,
    gys: &[Option<EdgeRef>],
) -> Result<Vec<Option<EdgeRef>>, GradError> {
    let gy = need(gys, 0, &n.op)?;
    let mask = EdgeRef::new(n.id, 1);
    let gx = b.add("dropout_grad", vec![mask, gy], n.attrs.clone(), &n.tag)?;
    Ok(vec![Some(gx)])
}

fn grad_fully_connected(
    b: &mut GradBuild<'_>,
    n: &Node,
    gys: &[Option<EdgeRef>],
) -> Result<Vec<Option<EdgeRef>>, GradError> {
    let gy = need(gys, 0, &n.op)?;
    let (x, w) = (n.inputs[0], n.inputs[1]);
    // dX = dY W, dW = dY^T X, db = sum over batch of dY
    let gx = b.add("matmul", vec![gy, w], Attrs::new(), &n.tag)?;
    let gw = b.add("matmul", vec![gy, x], attrs([("ta", AttrValue::Bool(true))]), &n.tag)?;
    let gb = b.add(
        "sum_reduce",
        vec![gy],
        attrs([("axes", AttrValue::Ints(vec![0]))]),
        &n.tag,
    )?;
    Ok(vec![Some(gx), Some(gw), Some(gb)])
}

fn grad_matmul(
    b: &mut GradBuild<'_>,
    n: &Node,
    gys: &[Option<EdgeRef>],
) -> Result<Vec<Option<EdgeRef>>, GradError> {
    let gy = need(gys, 0, &n.op)?;
    let ta = n.attrs.get("ta").and_then(AttrValue::as_bool).unwrap_or(false);
    let tb = n.attrs.get("tb").and_then(AttrValue::as_bool).unwrap_or(false);
    if ta || tb {
        return Err(GradError::Build {
            op: n.op.clone(),
            msg: "gradients for transposed matmul operands are not supported in forward graphs"
                .into(),
        });
    }
    let (a, c) = (n.inputs[0], n.inputs[1]);
    let ga = b.add("matmul", vec![gy, c], attrs([("tb", AttrValue::Bool(true))]), &n.tag)?;
    let gb = b.add("matmul", vec![a, gy], attrs([("ta", AttrValue::Bool(true))]), &n.tag)?;
    Ok(vec![Some(ga), Some(gb)])
}

fn grad_batched_dot(
    b: &mut GradBuild<'_>,
    n: &Node,
    gys: &[Option<EdgeRef>],
) -> Result<Vec<Option<EdgeRef>>, GradError> {
    let gy = need(gys, 0, &n.op)?;
    let ta = n.attrs.get("ta").and_then(AttrValue::as_bool).unwrap_or(false);
    let tb = n.attrs.get("tb").and_then(AttrValue::as_bool).unwrap_or(false);
    if ta || tb {
        return Err(GradError::Build {
            op: n.op.clone(),
            msg: "gradients for transposed batched_dot operands are not supported".into(),
        });
    }
    let (a, c) = (n.inputs[0], n.inputs[1]);
    let ga = b.add("batched_dot", vec![gy, c], attrs([("tb", AttrValue::Bool(true))]), &n.tag)?;
    let gb = b.add("batched_dot", vec![a, gy], attrs([("ta", AttrValue::Bool(true))]), &n.tag)?;
    Ok(vec![Some(ga), Some(gb)])
}

fn grad_conv2d(
    b: &mut GradBuild<'_>,
    n: &Node,
    gys: &[Option<EdgeRef>],
) -> Result<Vec<Option<EdgeRef>>, GradError> {
    let gy = need(gys, 0, &n.op)?;
    let (x, w) = (n.inputs[0], n.inputs[1]);
    let gx = b.add("conv2d_grad_input", vec![w, gy], Attrs::new(), &n.tag)?;
    let gw = b.add("conv2d_grad_weight", vec![x, gy], Attrs::new(), &n.tag)?;
    Ok(vec![Some(gx), Some(gw)])
}

fn grad_broadcast_add(
    b: &mut GradBuild<'_>,
    n: &Node,
    gys: &[Option<EdgeRef>],
) -> Result<Vec<Option<EdgeRef>>, GradError> {
    let gy = need(gys, 0, &n.op)?;
    let ra = b.shape(n.inputs[0]).rank();
    let rb = b.shape(n.inputs[1]).rank();
    let lead: Vec<i64> = (0..(rb - ra) as i64).collect();
    let ga = if lead.is_empty() {
        gy
    } else {
        b.add(
            "sum_reduce",
            vec![gy],
            attrs([("axes", AttrValue::Ints(lead))]),
            &n.tag,
        )?
    };
    Ok(vec![Some(ga), Some(gy)])
}

fn grad_concat(
    b: &mut GradBuild<'_>,
    n: &Node,
    gys: &[Option<EdgeRef>],
) -> Result<Vec<Option<EdgeRef>>, GradError> {
    let gy = need(gys, 0, &n.op)?;
    let axis = n.attrs.get("axis").and_then(AttrValue::as_int).unwrap_or(0);
    let stack = n.attrs.get("stack").and_then(AttrValue::as_bool).unwrap_or(false);
    let mut out = Vec::with_capacity(n.inputs.len());
    if stack {
        for (i, _) in n.inputs.iter().enumerate() {
            let g = b.add(
                "slice",
                vec![gy],
                attrs([
                    ("axis", AttrValue::Int(axis)),
                    ("begin", AttrValue::Int(i as i64)),
                    ("end", AttrValue::Int(i as i64 + 1)),
                    ("squeeze", AttrValue::Bool(true)),
                ]),
                &n.tag,
            )?;
            out.push(Some(g));
        }
        return Ok(out);
    }
    let mut offset = 0i64;
    for &inp in &n.inputs {
        let len = b.shape(inp).0[axis as usize] as i64;
        let g = b.add(
            "slice",
            vec![gy],
            attrs([
                ("axis", AttrValue::Int(axis)),
                ("begin", AttrValue::Int(offset)),
                ("end", AttrValue::Int(offset + len)),
            ]),
            &n.tag,
        )?;
        out.push(Some(g));
        offset += len;
    }
    Ok(out)
}

fn grad_slice(
    b: &mut GradBuild<'_>,
    n: &Node,
    gys: &[Option<EdgeRef>],
) -> Result<Vec<Option<EdgeRef>>, GradError> {
    let gy = need(gys, 0, &n.op)?;
    let axis = n.attrs.get("axis").and_then(AttrValue::as_int).unwrap_or(0);
    let begin = n.attrs.get("begin").and_then(AttrValue::as_int).unwrap_or(0);
    let squeeze = n.attrs.get("squeeze").and_then(AttrValue::as_bool).unwrap_or(false);
    let total = b.shape(n.inputs[0]).0[axis as usize] as i64;
    let g = b.add(
        "pad",
        vec![gy],
        attrs([
            ("axis", AttrValue::Int(axis)),
            ("begin", AttrValue::Int(begin)),
            ("total", AttrValue::Int(total)),
            ("unsqueeze", AttrValue::Bool(squeeze)),
        ]),
        &n.tag,
    )?;
    Ok(vec![Some(g)])
}

fn grad_sum_reduce(
    b: &mut GradBuild<'_>,
    n: &Node,
    gys: &[Option<EdgeRef>],
) -> Result<Vec<Option<EdgeRef>>, GradError> {
    let gy = need(gys, 0, &n.op)?;
    let x_shape = b.shape(n.inputs[0]).clone();
    let axes: Vec<i64> = match n.attrs.get("axes").and_then(AttrValue::as_ints) {
        None => (0..x_shape.rank() as i64).collect(),
        Some(&[]) => (0..x_shape.rank() as i64).collect(),
        Some(axes) => axes.to_vec(),
    };
    let dims: Vec<i64> = x_shape.0.iter().map(|&d| d as i64).collect();
    let g = b.add(
        "broadcast_to",
        vec![gy],
        attrs([("dims", AttrValue::Ints(dims)), ("axes", AttrValue::Ints(axes))]),
        &n.tag,
    )?;
    Ok(vec![Some(g)])
}

fn grad_softmax_ce(
    b: &mut GradBuild<'_>,
    n: &Node,
    gys: &[Option<EdgeRef>],
) -> Result<Vec<Option<EdgeRef>>, GradError> {
    let gy = need(gys, 0, &n.op)?;
    let (logits, labels) = (n.inputs[0], n.inputs[1]);
    let g = b.add("softmax_ce_loss_grad", vec![logits, labels, gy], Attrs::new(), &n.tag)?;
    // labels are targets, no gradient flows into them
    Ok(vec![Some(g), None])
}

// ---------------------------------------------------------------------------
// Default registry
// ---------------------------------------------------------------------------

/// The 16 user-facing ops plus the internal support ops used by gradient
/// construction and feature-map binarization.
pub fn default_registry() -> Registry {
    let mut r = Registry::new();
    let defs = vec![
        OpDef {
            name: "placeholder",
            arity: Arity::Fixed(0),
            num_outputs: 1,
            shape_fn: placeholder_shape,
            dtype_fn: None,
            cost_fn: cost_zero,
            workspace_fn: None,
            grad_builder: None,
            grad_deps: None,
            compute_heavy: false,
            binarizable: false,
        },
        OpDef {
            name: "fully_connected",
            arity: Arity::Fixed(3),
            num_outputs: 1,
            shape_fn: fully_connected_shape,
            dtype_fn: None,
            cost_fn: cost_fully_connected,
            workspace_fn: None,
            grad_builder: Some(grad_fully_connected),
            grad_deps: Some(GradDeps::new(&[0, 1], &[])),
            compute_heavy: true,
            binarizable: false,
        },
        OpDef {
            name: "matmul",
            arity: Arity::Fixed(2),
            num_outputs: 1,
            shape_fn: matmul_shape,
            dtype_fn: None,
            cost_fn: cost_matmul,
            workspace_fn: None,
            grad_builder: Some(grad_matmul),
            grad_deps: Some(GradDeps::new(&[0, 1], &[])),
            compute_heavy: true,
            binarizable: false,
        },
        OpDef {
            name: "batched_dot",
            arity: Arity::Fixed(2),
            num_outputs: 1,
            shape_fn: batched_dot_shape,
            dtype_fn: None,
            cost_fn: cost_batched_dot,
            workspace_fn: None,
            grad_builder: Some(grad_batched_dot),
            grad_deps: Some(GradDeps::new(&[0, 1], &[])),
            compute_heavy: true,
            binarizable: false,
        },
        OpDef {
            name: "conv2d",
            arity: Arity::Fixed(2),
            num_outputs: 1,
            shape_fn: conv2d_shape,
            dtype_fn: None,
            cost_fn: cost_conv2d,
            workspace_fn: None,
            grad_builder: Some(grad_conv2d),
            grad_deps: Some(GradDeps::new(&[0, 1], &[])),
            compute_heavy: true,
            binarizable: false,
        },
        OpDef {
            name: "add",
            arity: Arity::Fixed(2),
            num_outputs: 1,
            shape_fn: elementwise_pair,
            dtype_fn: None,
            cost_fn: cost_output_elems,
            workspace_fn: None,
            grad_builder: Some(grad_add),
            grad_deps: Some(GradDeps::new(&[], &[])),
            compute_heavy: false,
            binarizable: false,
        },
        OpDef {
            name: "mul",
            arity: Arity::Fixed(2),
            num_outputs: 1,
            shape_fn: elementwise_pair,
            dtype_fn: None,
            cost_fn: cost_output_elems,
            workspace_fn: None,
            grad_builder: Some(grad_mul),
            grad_deps: Some(GradDeps::new(&[0, 1], &[])),
            compute_heavy: false,
            binarizable: false,
        },
        OpDef {
            name: "tanh",
            arity: Arity::Fixed(1),
            num_outputs: 1,
            shape_fn: same_as_first,
            dtype_fn: None,
            cost_fn: cost_output_elems,
            workspace_fn: None,
            grad_builder: Some(grad_tanh),
            grad_deps: Some(GradDeps::new(&[], &[0])),
            compute_heavy: false,
            binarizable: false,
        },
        OpDef {
            name: "sigmoid",
            arity: Arity::Fixed(1),
            num_outputs: 1,
            shape_fn: same_as_first,
            dtype_fn: None,
            cost_fn: cost_output_elems,
            workspace_fn: None,
            grad_builder: Some(grad_sigmoid),
            grad_deps: Some(GradDeps::new(&[], &[0])),
            compute_heavy: false,
            binarizable: false,
        },
        OpDef {
            name: "relu",
            arity: Arity::Fixed(1),
            num_outputs: 1,
            shape_fn: same_as_first,
            dtype_fn: None,
            cost_fn: cost_output_elems,
            workspace_fn: None,
            grad_builder: Some(grad_relu),
            grad_deps: Some(GradDeps::new(&[], &[0])),
            compute_heavy: false,
            binarizable: true,
        },
        OpDef {
            // outputs: (scaled activations, kept-mask); the mask is the
            // feature map that survives into the backward pass
            name: "dropout",
            arity: Arity::Fixed(1),
            num_outputs: 2,
            shape_fn: dropout_shape,
            dtype_fn: None,
            cost_fn: cost_dropout,
            workspace_fn: None,
            grad_builder: Some(grad_dropout),
            grad_deps: Some(GradDeps::new(&[], &[1])),
            compute_heavy: false,
            binarizable: true,
        },
        OpDef {
            name: "broadcast_add",
            arity: Arity::Fixed(2),
            num_outputs: 1,
            shape_fn: broadcast_add_shape,
            dtype_fn: None,
            cost_fn: cost_output_elems,
            workspace_fn: None,
            grad_builder: Some(grad_broadcast_add),
            grad_deps: Some(GradDeps::new(&[], &[])),
            compute_heavy: false,
            binarizable: false,
        },
        OpDef {
            name: "concat",
            arity: Arity::AtLeast(1),
            num_outputs: 1,
            shape_fn: concat_shape,
            dtype_fn: None,
            cost_fn: cost_output_elems,
            workspace_fn: None,
            grad_builder: Some(grad_concat),
            grad_deps: Some(GradDeps::new(&[], &[])),
            compute_heavy: false,
            binarizable: false,
        },
        OpDef {
            name: "slice",
            arity: Arity::Fixed(1),
            num_outputs: 1,
            shape_fn: slice_shape,
            dtype_fn: None,
            cost_fn: cost_output_elems,
            workspace_fn: None,
            grad_builder: Some(grad_slice),
            grad_deps: Some(GradDeps::new(&[], &[])),
            compute_heavy: false,
            binarizable: false,
        },
        OpDef {
            name: "softmax_ce_loss",
            arity: Arity::Fixed(2),
            num_outputs: 1,
            shape_fn: softmax_ce_shape,
            dtype_fn: None,
            cost_fn: cost_softmax_ce,
            workspace_fn: None,
            grad_builder: Some(grad_softmax_ce),
            grad_deps: Some(GradDeps::new(&[0, 1], &[])),
            compute_heavy: false,
            binarizable: false,
        },
        OpDef {
            name: "sum_reduce",
            arity: Arity::Fixed(1),
            num_outputs: 1,
            shape_fn: sum_reduce_shape,
            dtype_fn: None,
            cost_fn: cost_output_elems,
            workspace_fn: None,
            grad_builder: Some(grad_sum_reduce),
            grad_deps: Some(GradDeps::new(&[], &[])),
            compute_heavy: false,
            binarizable: false,
        },
        // -- internal support ops (gradient construction, binarization) -----
        OpDef {
            name: "add_n",
            arity: Arity::AtLeast(1),
            num_outputs: 1,
            shape_fn: add_n_shape,
            dtype_fn: None,
            cost_fn: cost_output_elems,
            workspace_fn: None,
            grad_builder: None,
            grad_deps: None,
            compute_heavy: false,
            binarizable: false,
        },
        OpDef {
            name: "ones",
            arity: Arity::Fixed(0),
            num_outputs: 1,
            shape_fn: ones_shape,
            dtype_fn: Some(ones_dtype),
            cost_fn: cost_output_elems,
            workspace_fn: None,
            grad_builder: None,
            grad_deps: None,
            compute_heavy: false,
            binarizable: false,
        },
        OpDef {
            name: "broadcast_to",
            arity: Arity::Fixed(1),
            num_outputs: 1,
            shape_fn: broadcast_to_shape,
            dtype_fn: None,
            cost_fn: cost_output_elems,
            workspace_fn: None,
            grad_builder: None,
            grad_deps: None,
            compute_heavy: false,
            binarizable: false,
        },
        OpDef {
            name: "pad",
            arity: Arity::Fixed(1),
            num_outputs: 1,
            shape_fn: pad_shape,
            dtype_fn: None,
            cost_fn: cost_output_elems,
            workspace_fn: None,
            grad_builder: None,
            grad_deps: None,
            compute_heavy: false,
            binarizable: false,
        },
        OpDef {
            name: "tanh_grad",
            arity: Arity::Fixed(2),
            num_outputs: 1,
            shape_fn: unary_grad_shape,
            dtype_fn: None,
            cost_fn: cost_output_elems,
            workspace_fn: None,
            grad_builder: None,
            grad_deps: None,
            compute_heavy: false,
            binarizable: false,
        },
        OpDef {
            name: "sigmoid_grad",
            arity: Arity::Fixed(2),
            num_outputs: 1,
            shape_fn: unary_grad_shape,
            dtype_fn: None,
            cost_fn: cost_output_elems,
            workspace_fn: None,
            grad_builder: None,
            grad_deps: None,
            compute_heavy: false,
            binarizable: false,
        },
        OpDef {
            name: "relu_grad",
            arity: Arity::Fixed(2),
            num_outputs: 1,
            shape_fn: unary_grad_shape,
            dtype_fn: None,
            cost_fn: cost_output_elems,
            workspace_fn: None,
            grad_builder: None,
            grad_deps: None,
            compute_heavy: false,
            binarizable: false,
        },
        OpDef {
            name: "dropout_grad",
            arity: Arity::Fixed(2),
            num_outputs: 1,
            shape_fn: unary_grad_shape,
            dtype_fn: None,
            cost_fn: cost_output_elems,
            workspace_fn: None,
            grad_builder: None,
            grad_deps: None,
            compute_heavy: false,
            binarizable: false,
        },
        OpDef {
            name: "conv2d_grad_input",
            arity: Arity::Fixed(2),
            num_outputs: 1,
            shape_fn: conv2d_grad_input_shape,
            dtype_fn: None,
            cost_fn: cost_conv2d_grad_input,
            workspace_fn: None,
            grad_builder: None,
            grad_deps: None,
            compute_heavy: true,
            binarizable: false,
        },
        OpDef {
            name: "conv2d_grad_weight",
            arity: Arity::Fixed(2),
            num_outputs: 1,
            shape_fn: conv2d_grad_weight_shape,
            dtype_fn: None,
            cost_fn: cost_conv2d_grad_weight,
            workspace_fn: None,
            grad_builder: None,
            grad_deps: None,
            compute_heavy: true,
            binarizable: false,
        },
        OpDef {
            name: "softmax_ce_loss_grad",
            arity: Arity::Fixed(3),
            num_outputs: 1,
            shape_fn: softmax_ce_grad_shape,
            dtype_fn: None,
            cost_fn: cost_softmax_ce_grad,
            workspace_fn: None,
            grad_builder: None,
            grad_deps: None,
            compute_heavy: false,
            binarizable: false,
        },
        OpDef {
            name: "encode",
            arity: Arity::Fixed(1),
            num_outputs: 1,
            shape_fn: same_as_first,
            dtype_fn: Some(encode_dtype),
            cost_fn: cost_output_elems,
            workspace_fn: None,
            grad_builder: None,
            grad_deps: None,
            compute_heavy: false,
            binarizable: false,
        },
        OpDef {
            name: "decode",
            arity: Arity::Fixed(1),
            num_outputs: 1,
            shape_fn: same_as_first,
            dtype_fn: Some(decode_dtype),
            cost_fn: cost_output_elems,
            workspace_fn: None,
            grad_builder: None,
            grad_deps: None,
            compute_heavy: false,
            binarizable: false,
        },
    ];
    for d in defs {
        r.register(d).expect("default registry has unique names");
    }
    r
}

/// The user-facing op set shipped with the default registry.
pub const SHIPPED_OPS: [&str; 16] = [
    "placeholder",
    "fully_connected",
    "matmul",
    "batched_dot",
    "conv2d",
    "add",
    "mul",
    "tanh",
    "sigmoid",
    "relu",
    "dropout",
    "broadcast_add",
    "concat",
    "slice",
    "softmax_ce_loss",
    "sum_reduce",
];

// ---------------------------------------------------------------------------
// Registry self-test: probe each gradient builder on a dummy node and check
// the edges it references against the declared dependency descriptor.
// ---------------------------------------------------------------------------

/// Shapes suitable for constructing a probe node for `op`.
pub fn probe_input_shapes(op: &str) -> Vec<Shape> {
    match op {
        "fully_connected" => vec![Shape(vec![2, 3]), Shape(vec![4, 3]), Shape(vec![4])],
        "matmul" => vec![Shape(vec![2, 3]), Shape(vec![3, 4])],
        "batched_dot" => vec![Shape(vec![2, 3, 4]), Shape(vec![2, 4, 5])],
        "conv2d" => vec![Shape(vec![1, 2, 5, 5]), Shape(vec![3, 2, 3, 3])],
        "add" | "mul" => vec![Shape(vec![4]), Shape(vec![4])],
        "tanh" | "sigmoid" | "relu" | "dropout" | "sum_reduce" => vec![Shape(vec![4])],
        "broadcast_add" => vec![Shape(vec![4]), Shape(vec![3, 4])],
        "concat" => vec![Shape(vec![2, 3]), Shape(vec![2, 3])],
        "slice" => vec![Shape(vec![2, 6])],
        "softmax_ce_loss" => vec![Shape(vec![2, 5]), Shape(vec![2, 5])],
        _ => vec![Shape(vec![4])],
    }
}

pub fn probe_attrs(op: &str) -> Attrs {
    match op {
        "slice" => attrs([
            ("axis", AttrValue::Int(1)),
            ("begin", AttrValue::Int(1)),
            ("end", AttrValue::Int(4)),
        ]),
        "concat" => attrs([("axis", AttrValue::Int(1))]),
        "dropout" => attrs([("rate", AttrValue::Float(0.5))]),
        _ => Attrs::new(),
    }
}

#[derive(Debug, PartialEq, Eq)]
pub struct ProbeResult {
    pub referenced_inputs: BTreeSet<usize>,
    pub referenced_outputs: BTreeSet<usize>,
    pub referenced_output_grad: bool,
}

/// Build `op`'s gradient on a dummy node and report which forward edges the
/// created gradient nodes actually reference.
pub fn probe_grad_deps(registry: &Registry, op: &str) -> Result<ProbeResult, GradError> {
    let def = registry
        .lookup(op)
        .ok_or_else(|| GradError::NotDifferentiable(op.to_string()))?;
    let builder = def
        .grad_builder
        .ok_or_else(|| GradError::NotDifferentiable(op.to_string()))?;

    let mut g = Graph::new();
    let in_shapes = probe_input_shapes(op);
    let mut inputs = Vec::new();
    let mut shapes: BTreeMap<EdgeRef, (Shape, Dtype)> = BTreeMap::new();
    for (i, s) in in_shapes.iter().enumerate() {
        let id = g
            .add_placeholder(&format!("in{}", i), s.clone(), Dtype::F32, false, "")
            .map_err(GradError::Graph)?;
        let e = EdgeRef::new(id, 0);
        shapes.insert(e, (s.clone(), Dtype::F32));
        inputs.push(e);
    }
    let a = probe_attrs(op);
    let node_id = g
        .add_node(registry, op, inputs.clone(), a.clone(), "")
        .map_err(GradError::Graph)?;
    let out_shapes = registry
        .infer_shape(op, &in_shapes, &a)
        .map_err(|e| GradError::Build { op: op.to_string(), msg: e.to_string() })?;
    for (k, s) in out_shapes.iter().enumerate() {
        shapes.insert(EdgeRef::new(node_id, k), (s.clone(), Dtype::F32));
    }

    // one dummy output-grad edge per forward output
    let mut out_grads = Vec::new();
    for s in &out_shapes {
        let dims: Vec<i64> = s.0.iter().map(|&d| d as i64).collect();
        let id = g
            .add_node_kind(
                registry,
                "ones",
                vec![],
                attrs([("dims", AttrValue::Ints(dims)), ("dtype", AttrValue::Str("f32".into()))]),
                "",
                NodeKind::Gradient,
                None,
            )
            .map_err(GradError::Graph)?;
        let e = EdgeRef::new(id, 0);
        shapes.insert(e, (s.clone(), Dtype::F32));
        out_grads.push(Some(e));
    }

    let first_grad_id = g.id_bound();
    let node = g.node(node_id).clone();
    let grads = {
        let mut b = GradBuild { graph: &mut g, registry, fwd_shapes: &shapes };
        builder(&mut b, &node, &out_grads)?
    };

    let mut res = ProbeResult {
        referenced_inputs: BTreeSet::new(),
        referenced_outputs: BTreeSet::new(),
        referenced_output_grad: false,
    };
    let grad_edges: BTreeSet<EdgeRef> = out_grads.iter().flatten().copied().collect();
    for id in g.node_ids().filter(|&id| id >= first_grad_id) {
        for &e in &g.node(id).inputs {
            if grad_edges.contains(&e) {
                res.referenced_output_grad = true;
            } else if e.node == node_id {
                res.referenced_outputs.insert(e.output);
            } else if let Some(pos) = inputs.iter().position(|&i| i == e) {
                res.referenced_inputs.insert(pos);
            }
        }
    }
    // pass-through gradients (identity) reference the output grad implicitly
    for ge in grads.iter().flatten() {
        if grad_edges.contains(ge) {
            res.referenced_output_grad = true;
        }
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_contains_all_shipped_ops() {
        let r = default_registry();
        for op in SHIPPED_OPS {
            assert!(r.contains(op), "missing shipped op {}", op);
        }
        assert_eq!(SHIPPED_OPS.len(), 16);
    }

    #[test]
    fn heavy_and_binarizable_sets() {
        let r = default_registry();
        let heavy: BTreeSet<String> = r.compute_heavy_ops();
        // the user-facing heavy set; the two conv gradient helpers share the flag
        for op in ["fully_connected", "matmul", "batched_dot", "conv2d"] {
            assert!(heavy.contains(op));
        }
        assert_eq!(
            r.binarizable_ops(),
            ["relu", "dropout"].iter().map(|s| s.to_string()).collect()
        );
        for def in SHIPPED_OPS.iter().filter_map(|n| r.lookup(n)) {
            assert!(!(def.compute_heavy && def.binarizable));
        }
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut r = default_registry();
        let err = r.register(OpDef {
            name: "tanh",
            arity: Arity::Fixed(1),
            num_outputs: 1,
            shape_fn: same_as_first,
            dtype_fn: None,
            cost_fn: cost_output_elems,
            workspace_fn: None,
            grad_builder: None,
            grad_deps: None,
            compute_heavy: false,
            binarizable: false,
        });
        assert!(err.is_err());
    }

    #[test]
    fn grad_deps_examples() {
        let r = default_registry();
        let fc = r.grad_deps("fully_connected").unwrap();
        assert_eq!(fc.needs_inputs, [0usize, 1].into_iter().collect());
        assert!(fc.needs_outputs.is_empty());

        let tanh = r.grad_deps("tanh").unwrap();
        assert!(tanh.needs_inputs.is_empty());
        assert_eq!(tanh.needs_outputs, [0usize].into_iter().collect());

        let add = r.grad_deps("add").unwrap();
        assert!(add.needs_inputs.is_empty());
        assert!(add.needs_outputs.is_empty());

        assert!(r.grad_deps("placeholder").is_err());
        assert!(r.grad_deps("gelu").is_err());
    }

    #[test]
    fn declared_deps_match_probed_builders() {
        let r = default_registry();
        for op in SHIPPED_OPS {
            let def = r.lookup(op).unwrap();
            let Some(declared) = def.grad_deps.as_ref() else { continue };
            let probed = probe_grad_deps(&r, op).unwrap();
            assert_eq!(
                probed.referenced_inputs, declared.needs_inputs,
                "input deps drifted for {}",
                op
            );
            assert_eq!(
                probed.referenced_outputs, declared.needs_outputs,
                "output deps drifted for {}",
                op
            );
            assert_eq!(
                probed.referenced_output_grad, declared.needs_output_grad,
                "output-grad dep drifted for {}",
                op
            );
        }
    }

    #[test]
    fn shape_examples() {
        let r = default_registry();
        // Y = X W^T + b with a 4x wider hidden dimension
        let out = r
            .infer_shape(
                "fully_connected",
                &[Shape(vec![2, 5]), Shape(vec![20, 5]), Shape(vec![20])],
                &Attrs::new(),
            )
            .unwrap();
        assert_eq!(out, vec![Shape(vec![2, 20])]);

        let out = r
            .infer_shape("broadcast_add", &[Shape(vec![4]), Shape(vec![3, 4])], &Attrs::new())
            .unwrap();
        assert_eq!(out, vec![Shape(vec![3, 4])]);

        let out = r
            .infer_shape(
                "concat",
                &[Shape(vec![2, 3]), Shape(vec![2, 3])],
                &attrs([("axis", AttrValue::Int(1))]),
            )
            .unwrap();
        assert_eq!(out, vec![Shape(vec![2, 6])]);

        assert!(r
            .infer_shape("matmul", &[Shape(vec![2, 3]), Shape(vec![4, 5])], &Attrs::new())
            .is_err());
    }

    #[test]
    fn cost_examples() {
        let r = default_registry();
        let fc = r.node_cost(
            "fully_connected",
            &[Shape(vec![8, 16]), Shape(vec![32, 16]), Shape(vec![32])],
            &[Shape(vec![8, 32])],
            &Attrs::new(),
        );
        assert_eq!(fc, 2 * 8 * 16 * 32);
        let tanh = r.node_cost("tanh", &[Shape(vec![1024])], &[Shape(vec![1024])], &Attrs::new());
        assert_eq!(tanh, 1024);
        let dp = r.node_cost("dropout", &[Shape(vec![64])], &[Shape(vec![64]), Shape(vec![64])], &Attrs::new());
        assert_eq!(dp, 128);
    }
}
