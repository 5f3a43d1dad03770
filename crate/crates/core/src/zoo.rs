//! Parameterized model builders used by tests, the acceptance suite and the
//! CLI. Every builder emits a forward graph whose first output is a scalar
//! loss; placeholders that model weights are trainable, data and recurrent
//! initial states are not.

use std::collections::BTreeMap;

use crate::graph::{attrs, AttrValue, Attrs, Dtype, EdgeRef, Graph, GraphError, Shape};
use crate::ops::Registry;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ZooModel {
    AddTanh { n: u64 },
    BroadcastAttn { t: u64, n: u64 },
    LstmCell { b: u64, h: u64 },
    LstmRnn { b: u64, t: u64, h: u64, layers: u64 },
    NmtLike { b: u64, t: u64, h: u64, enc_layers: u64, dec_layers: u64 },
    MlpChain { b: u64, h: u64, depth: u64 },
    ConvChain { b: u64, c: u64, hw: u64, depth: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZooSpec {
    pub model: ZooModel,
    pub dtype: Dtype,
}

impl ZooSpec {
    pub fn new(model: ZooModel, dtype: Dtype) -> Self {
        ZooSpec { model, dtype }
    }

    /// Parse from a model name and `key=value` parameters (CLI surface).
    pub fn from_name(
        name: &str,
        params: &BTreeMap<String, u64>,
        dtype: Dtype,
    ) -> Result<ZooSpec, GraphError> {
        let get = |k: &str, default: u64| params.get(k).copied().unwrap_or(default);
        let model = match name {
            "add_tanh" => ZooModel::AddTanh { n: get("N", 1024) },
            "broadcast_attn" => ZooModel::BroadcastAttn { t: get("T", 64), n: get("N", 256) },
            "lstm_cell" => ZooModel::LstmCell { b: get("B", 2), h: get("H", 3) },
            "lstm_rnn" => ZooModel::LstmRnn {
                b: get("B", 2),
                t: get("T", 3),
                h: get("H", 4),
                layers: get("layers", 1),
            },
            "nmt_like" => ZooModel::NmtLike {
                b: get("B", 2),
                t: get("T", 4),
                h: get("H", 8),
                enc_layers: get("enc_layers", 1),
                dec_layers: get("dec_layers", 1),
            },
            "mlp_chain" => {
                ZooModel::MlpChain { b: get("B", 4), h: get("H", 8), depth: get("depth", 3) }
            }
            "conv_chain" => ZooModel::ConvChain {
                b: get("B", 1),
                c: get("C", 2),
                hw: get("HW", 8),
                depth: get("depth", 2),
            },
            other => return Err(GraphError::Parse(format!("unknown zoo model `{}`", other))),
        };
        Ok(ZooSpec { model, dtype })
    }

    pub fn all_names() -> &'static [&'static str] {
        &[
            "add_tanh",
            "broadcast_attn",
            "lstm_cell",
            "lstm_rnn",
            "nmt_like",
            "mlp_chain",
            "conv_chain",
        ]
    }
}

/// Small default parameterizations of every model, sized for interpretation.
pub fn test_suite(dtype: Dtype) -> Vec<(String, ZooSpec)> {
    vec![
        ("add_tanh".into(), ZooSpec::new(ZooModel::AddTanh { n: 8 }, dtype)),
        ("broadcast_attn".into(), ZooSpec::new(ZooModel::BroadcastAttn { t: 4, n: 6 }, dtype)),
        ("lstm_cell".into(), ZooSpec::new(ZooModel::LstmCell { b: 2, h: 3 }, dtype)),
        (
            "lstm_rnn".into(),
            ZooSpec::new(ZooModel::LstmRnn { b: 2, t: 3, h: 3, layers: 1 }, dtype),
        ),
        (
            "nmt_like".into(),
            ZooSpec::new(
                ZooModel::NmtLike { b: 2, t: 3, h: 4, enc_layers: 1, dec_layers: 1 },
                dtype,
            ),
        ),
        ("mlp_chain".into(), ZooSpec::new(ZooModel::MlpChain { b: 2, h: 4, depth: 3 }, dtype)),
        (
            "conv_chain".into(),
            ZooSpec::new(ZooModel::ConvChain { b: 1, c: 2, hw: 7, depth: 2 }, dtype),
        ),
    ]
}

pub fn build(spec: &ZooSpec, registry: &Registry) -> Result<Graph, GraphError> {
    let dt = spec.dtype;
    match spec.model {
        ZooModel::AddTanh { n } => build_add_tanh(registry, n, dt),
        ZooModel::BroadcastAttn { t, n } => build_broadcast_attn(registry, t, n, dt),
        ZooModel::LstmCell { b, h } => build_lstm_cell(registry, b, h, dt),
        ZooModel::LstmRnn { b, t, h, layers } => build_lstm_rnn(registry, b, t, h, layers, dt),
        ZooModel::NmtLike { b, t, h, enc_layers, dec_layers } => {
            build_nmt_like(registry, b, t, h, enc_layers, dec_layers, dt)
        }
        ZooModel::MlpChain { b, h, depth } => build_mlp_chain(registry, b, h, depth, dt),
        ZooModel::ConvChain { b, c, hw, depth } => build_conv_chain(registry, b, c, hw, depth, dt),
    }
}

fn require(cond: bool, msg: &str) -> Result<(), GraphError> {
    if cond {
        Ok(())
    } else {
        Err(GraphError::Parse(format!("invalid zoo parameters: {}", msg)))
    }
}

struct B<'a> {
    g: Graph,
    reg: &'a Registry,
}

impl<'a> B<'a> {
    fn new(reg: &'a Registry) -> Self {
        B { g: Graph::new(), reg }
    }

    fn ph(&mut self, name: &str, dims: Vec<u64>, dt: Dtype, trainable: bool, tag: &str) -> EdgeRef {
        let id = self
            .g
            .add_placeholder(name, Shape(dims), dt, trainable, tag)
            .expect("zoo placeholder names are unique");
        EdgeRef::new(id, 0)
    }

    fn op(&mut self, op: &str, inputs: Vec<EdgeRef>, a: Attrs, tag: &str) -> EdgeRef {
        let id = self
            .g
            .add_node(self.reg, op, inputs, a, tag)
            .expect("zoo graphs are well formed");
        EdgeRef::new(id, 0)
    }

    fn fc(&mut self, x: EdgeRef, w: EdgeRef, b: EdgeRef, tag: &str) -> EdgeRef {
        self.op("fully_connected", vec![x, w, b], Attrs::new(), tag)
    }

    fn sum(&mut self, x: EdgeRef, tag: &str) -> EdgeRef {
        self.op("sum_reduce", vec![x], Attrs::new(), tag)
    }

    /// Left-to-right chain of binary adds.
    fn add_chain(&mut self, terms: &[EdgeRef], tag: &str) -> EdgeRef {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.op("add", vec![acc, t], Attrs::new(), tag);
        }
        acc
    }

    fn finish(mut self, loss: EdgeRef) -> Graph {
        self.g.outputs = vec![loss];
        self.g
    }
}

fn build_add_tanh(reg: &Registry, n: u64, dt: Dtype) -> Result<Graph, GraphError> {
    require(n >= 1, "N >= 1")?;
    let mut b = B::new(reg);
    let x = b.ph("x", vec![n], dt, false, "cell");
    let y = b.ph("y", vec![n], dt, false, "cell");
    let s = b.op("add", vec![x, y], Attrs::new(), "cell");
    let z = b.op("tanh", vec![s], Attrs::new(), "cell");
    let loss = b.sum(z, "output");
    Ok(b.finish(loss))
}

fn build_broadcast_attn(reg: &Registry, t: u64, n: u64, dt: Dtype) -> Result<Graph, GraphError> {
    require(t >= 1 && n >= 1, "T, N >= 1")?;
    let mut b = B::new(reg);
    let shared = b.ph("state", vec![t, n], dt, false, "attention");
    let mut parts = Vec::new();
    for i in 0..t {
        let q = b.ph(&format!("q{}", i), vec![n], dt, false, "attention");
        let scored = b.op("broadcast_add", vec![q, shared], Attrs::new(), "attention");
        let activated = b.op("tanh", vec![scored], Attrs::new(), "attention");
        parts.push(b.sum(activated, "attention"));
    }
    let loss = b.add_chain(&parts, "output");
    Ok(b.finish(loss))
}

struct LstmWeights {
    wi: EdgeRef,
    bi: EdgeRef,
    wh: EdgeRef,
    bh: EdgeRef,
}

fn lstm_weights(b: &mut B, prefix: &str, h: u64, dt: Dtype) -> LstmWeights {
    LstmWeights {
        wi: b.ph(&format!("{}_wi", prefix), vec![4 * h, h], dt, true, "rnn"),
        bi: b.ph(&format!("{}_bi", prefix), vec![4 * h], dt, true, "rnn"),
        wh: b.ph(&format!("{}_wh", prefix), vec![4 * h, h], dt, true, "rnn"),
        bh: b.ph(&format!("{}_bh", prefix), vec![4 * h], dt, true, "rnn"),
    }
}

/// One LSTM cell: the gate pre-activation comes from two fully-connected
/// transforms, the non-linear block is slicing plus element-wise ops.
fn lstm_cell_body(
    b: &mut B,
    w: &LstmWeights,
    x: EdgeRef,
    h_prev: EdgeRef,
    c_prev: EdgeRef,
    hdim: u64,
) -> (EdgeRef, EdgeRef) {
    let i2h = b.fc(x, w.wi, w.bi, "rnn");
    let h2h = b.fc(h_prev, w.wh, w.bh, "rnn");
    let pre = b.op("add", vec![i2h, h2h], Attrs::new(), "rnn");
    let gate = |b: &mut B, k: u64| -> EdgeRef {
        b.op(
            "slice",
            vec![pre],
            attrs([
                ("axis", AttrValue::Int(1)),
                ("begin", AttrValue::Int((k * hdim) as i64)),
                ("end", AttrValue::Int(((k + 1) * hdim) as i64)),
            ]),
            "rnn",
        )
    };
    let i_raw = gate(b, 0);
    let f_raw = gate(b, 1);
    let g_raw = gate(b, 2);
    let o_raw = gate(b, 3);
    let i = b.op("sigmoid", vec![i_raw], Attrs::new(), "rnn");
    let f = b.op("sigmoid", vec![f_raw], Attrs::new(), "rnn");
    let g = b.op("tanh", vec![g_raw], Attrs::new(), "rnn");
    let o = b.op("sigmoid", vec![o_raw], Attrs::new(), "rnn");
    let fc_prev = b.op("mul", vec![f, c_prev], Attrs::new(), "rnn");
    let ig = b.op("mul", vec![i, g], Attrs::new(), "rnn");
    let c = b.op("add", vec![fc_prev, ig], Attrs::new(), "rnn");
    let c_act = b.op("tanh", vec![c], Attrs::new(), "rnn");
    let h = b.op("mul", vec![o, c_act], Attrs::new(), "rnn");
    (h, c)
}

fn build_lstm_cell(reg: &Registry, batch: u64, h: u64, dt: Dtype) -> Result<Graph, GraphError> {
    require(batch >= 1 && h >= 1, "B, H >= 1")?;
    let mut b = B::new(reg);
    let x = b.ph("x", vec![batch, h], dt, false, "rnn");
    let h_prev = b.ph("h_prev", vec![batch, h], dt, false, "rnn");
    let c_prev = b.ph("c_prev", vec![batch, h], dt, false, "rnn");
    let w = lstm_weights(&mut b, "cell", h, dt);
    let (hy, cy) = lstm_cell_body(&mut b, &w, x, h_prev, c_prev, h);
    let sh = b.sum(hy, "output");
    let sc = b.sum(cy, "output");
    let loss = b.op("add", vec![sh, sc], Attrs::new(), "output");
    Ok(b.finish(loss))
}

fn build_lstm_rnn(
    reg: &Registry,
    batch: u64,
    t: u64,
    h: u64,
    layers: u64,
    dt: Dtype,
) -> Result<Graph, GraphError> {
    require(batch >= 1 && t >= 1 && h >= 1 && layers >= 1, "B, T, H, layers >= 1")?;
    let mut b = B::new(reg);
    let xs: Vec<EdgeRef> =
        (0..t).map(|s| b.ph(&format!("x{}", s), vec![batch, h], dt, false, "rnn")).collect();
    let mut layer_inputs = xs;
    let mut top_hs = Vec::new();
    for l in 0..layers {
        let w = lstm_weights(&mut b, &format!("l{}", l), h, dt);
        let mut hv = b.ph(&format!("h0_{}", l), vec![batch, h], dt, false, "rnn");
        let mut cv = b.ph(&format!("c0_{}", l), vec![batch, h], dt, false, "rnn");
        let mut outs = Vec::new();
        for s in 0..t as usize {
            let (hy, cy) = lstm_cell_body(&mut b, &w, layer_inputs[s], hv, cv, h);
            hv = hy;
            cv = cy;
            outs.push(hy);
        }
        layer_inputs = outs.clone();
        top_hs = outs;
    }
    let sums: Vec<EdgeRef> = top_hs.iter().map(|&e| b.sum(e, "output")).collect();
    let loss = b.add_chain(&sums, "output");
    Ok(b.finish(loss))
}

/// Recurrent encoder-decoder with per-step attention. Recurrence is the
/// tanh-cell form `h_t = tanh(i2h(x_t) + h2h(h_{t-1}))`; attention scores a
/// query against the stacked projected encoder states with a broadcast add,
/// so the whole source timeline is reused by every decoder step.
fn build_nmt_like(
    reg: &Registry,
    batch: u64,
    t: u64,
    h: u64,
    enc_layers: u64,
    dec_layers: u64,
    dt: Dtype,
) -> Result<Graph, GraphError> {
    require(batch >= 1 && t >= 1 && h >= 1 && enc_layers >= 1 && dec_layers >= 1, "all params >= 1")?;
    let mut b = B::new(reg);
    let tb = t as usize;

    let src: Vec<EdgeRef> =
        (0..tb).map(|s| b.ph(&format!("src{}", s), vec![batch, h], dt, false, "encoder")).collect();
    let tgt: Vec<EdgeRef> =
        (0..tb).map(|s| b.ph(&format!("tgt{}", s), vec![batch, h], dt, false, "decoder")).collect();
    let labels = b.ph("labels", vec![t * batch, h], dt, false, "output");

    let w_emb_s = b.ph("w_emb_src", vec![h, h], dt, true, "encoder");
    let b_emb_s = b.ph("b_emb_src", vec![h], dt, true, "encoder");
    let w_emb_t = b.ph("w_emb_tgt", vec![h, h], dt, true, "decoder");
    let b_emb_t = b.ph("b_emb_tgt", vec![h], dt, true, "decoder");

    struct CellW {
        wi: EdgeRef,
        bi: EdgeRef,
        wh: EdgeRef,
        bh: EdgeRef,
    }
    let mut cell_w = |b: &mut B, prefix: &str| CellW {
        wi: b.ph(&format!("{}_wi", prefix), vec![h, h], dt, true, "rnn"),
        bi: b.ph(&format!("{}_bi", prefix), vec![h], dt, true, "rnn"),
        wh: b.ph(&format!("{}_wh", prefix), vec![h, h], dt, true, "rnn"),
        bh: b.ph(&format!("{}_bh", prefix), vec![h], dt, true, "rnn"),
    };
    let enc_w: Vec<CellW> = (0..enc_layers).map(|l| cell_w(&mut b, &format!("enc{}", l))).collect();
    let dec_w: Vec<CellW> = (0..dec_layers).map(|l| cell_w(&mut b, &format!("dec{}", l))).collect();

    let w_e = b.ph("w_att_enc", vec![h, h], dt, true, "attention");
    let b_e = b.ph("b_att_enc", vec![h], dt, true, "attention");
    let w_q = b.ph("w_att_query", vec![h, h], dt, true, "attention");
    let b_q = b.ph("b_att_query", vec![h], dt, true, "attention");
    let w_c = b.ph("w_att_ctx", vec![h, h], dt, true, "attention");
    let b_c = b.ph("b_att_ctx", vec![h], dt, true, "attention");
    let w_o = b.ph("w_out", vec![h, h], dt, true, "output");
    let b_o = b.ph("b_out", vec![h], dt, true, "output");

    let tanh_cell = |b: &mut B, w: &CellW, x: EdgeRef, hp: EdgeRef| -> EdgeRef {
        let i2h = b.fc(x, w.wi, w.bi, "rnn");
        let h2h = b.fc(hp, w.wh, w.bh, "rnn");
        let pre = b.op("add", vec![i2h, h2h], Attrs::new(), "rnn");
        b.op("tanh", vec![pre], Attrs::new(), "rnn")
    };

    // Encoder: unrolled stacked tanh cells over the source.
    let mut enc_inputs: Vec<EdgeRef> = src.iter().map(|&s| b.fc(s, w_emb_s, b_emb_s, "encoder")).collect();
    let mut enc_top: Vec<EdgeRef> = Vec::new();
    for l in 0..enc_layers as usize {
        let mut hv = b.ph(&format!("enc_h0_{}", l), vec![batch, h], dt, false, "rnn");
        let mut outs = Vec::new();
        for s in 0..tb {
            hv = tanh_cell(&mut b, &enc_w[l], enc_inputs[s], hv);
            outs.push(hv);
        }
        enc_inputs = outs.clone();
        enc_top = outs;
    }

    // Source hidden state: projected encoder outputs stacked to [T, B, H];
    // one tensor shared by every decoder step.
    let projected: Vec<EdgeRef> = enc_top.iter().map(|&e| b.fc(e, w_e, b_e, "attention")).collect();
    let enc_stack = b.op(
        "concat",
        projected,
        attrs([("axis", AttrValue::Int(0)), ("stack", AttrValue::Bool(true))]),
        "attention",
    );

    // Decoder with input feeding: the attention hidden state of step t-1 is
    // added to the next step's embedded input.
    let mut dec_h: Vec<EdgeRef> = (0..dec_layers as usize)
        .map(|l| b.ph(&format!("dec_h0_{}", l), vec![batch, h], dt, false, "rnn"))
        .collect();
    let mut feed: Option<EdgeRef> = None;
    let mut logits: Vec<EdgeRef> = Vec::new();
    for s in 0..tb {
        let emb = b.fc(tgt[s], w_emb_t, b_emb_t, "decoder");
        let mut x = match feed {
            Some(a) => b.op("add", vec![emb, a], Attrs::new(), "decoder"),
            None => emb,
        };
        for l in 0..dec_layers as usize {
            let hy = tanh_cell(&mut b, &dec_w[l], x, dec_h[l]);
            dec_h[l] = hy;
            x = hy;
        }
        let query = x;
        // Fig-style scoring: project the query, broadcast-add it over the
        // stacked source states, squash, and reduce over source positions.
        let qp = b.fc(query, w_q, b_q, "attention");
        let scored = b.op("broadcast_add", vec![qp, enc_stack], Attrs::new(), "attention");
        let squashed = b.op("tanh", vec![scored], Attrs::new(), "attention");
        let ctx = b.op(
            "sum_reduce",
            vec![squashed],
            attrs([("axes", AttrValue::Ints(vec![0]))]),
            "attention",
        );
        let cp = b.fc(ctx, w_c, b_c, "attention");
        let mix = b.op("add", vec![qp, cp], Attrs::new(), "attention");
        let attn_hidden = b.op("tanh", vec![mix], Attrs::new(), "attention");
        feed = Some(attn_hidden);
        logits.push(b.fc(attn_hidden, w_o, b_o, "output"));
    }

    let logits_flat = b.op("concat", logits, attrs([("axis", AttrValue::Int(0))]), "output");
    let loss = b.op("softmax_ce_loss", vec![logits_flat, labels], Attrs::new(), "output");
    Ok(b.finish(loss))
}

fn build_mlp_chain(
    reg: &Registry,
    batch: u64,
    h: u64,
    depth: u64,
    dt: Dtype,
) -> Result<Graph, GraphError> {
    require(batch >= 1 && h >= 1 && depth >= 1, "B, H, depth >= 1")?;
    let mut b = B::new(reg);
    let mut x = b.ph("x", vec![batch, h], dt, false, "mlp");
    for l in 0..depth {
        let w = b.ph(&format!("w{}", l), vec![h, h], dt, true, "mlp");
        let bias = b.ph(&format!("b{}", l), vec![h], dt, true, "mlp");
        let fc = b.fc(x, w, bias, "mlp");
        x = b.op("tanh", vec![fc], Attrs::new(), "mlp");
    }
    let loss = b.sum(x, "output");
    Ok(b.finish(loss))
}

fn build_conv_chain(
    reg: &Registry,
    batch: u64,
    c: u64,
    hw: u64,
    depth: u64,
    dt: Dtype,
) -> Result<Graph, GraphError> {
    require(batch >= 1 && c >= 1 && depth >= 1, "B, C, depth >= 1")?;
    require(hw > 2 * depth, "HW must exceed 2*depth (3x3 kernels, no padding)")?;
    let mut b = B::new(reg);
    let mut x = b.ph("x", vec![batch, c, hw, hw], dt, false, "conv");
    for l in 0..depth {
        let w = b.ph(&format!("k{}", l), vec![c, c, 3, 3], dt, true, "conv");
        let conv = b.op("conv2d", vec![x, w], Attrs::new(), "conv");
        x = b.op("relu", vec![conv], Attrs::new(), "conv");
    }
    let loss = b.sum(x, "output");
    Ok(b.finish(loss))
}

/// Ad-hoc graphs used by the worked-example tests.
pub mod examples {
    use super::*;

    /// x -> tanh -> fully_connected -> sum loss: the dead-node scenario.
    pub fn tanh_fc_chain(reg: &Registry, batch: u64, h: u64, dt: Dtype) -> Graph {
        let mut b = B::new(reg);
        let x = b.ph("x", vec![batch, h], dt, false, "mlp");
        let w = b.ph("w", vec![h, h], dt, true, "mlp");
        let bias = b.ph("b", vec![h], dt, true, "mlp");
        let t = b.op("tanh", vec![x], Attrs::new(), "mlp");
        let fc = b.fc(t, w, bias, "mlp");
        let loss = b.sum(fc, "output");
        b.finish(loss)
    }

    /// x -> dropout -> sum loss: the mask is the only feature map.
    pub fn dropout_loss(reg: &Registry, n: u64, rate: f64, dt: Dtype) -> Graph {
        let mut b = B::new(reg);
        let x = b.ph("x", vec![n], dt, false, "drop");
        let d = b.op("dropout", vec![x], attrs([("rate", AttrValue::Float(rate))]), "drop");
        let loss = b.sum(d, "output");
        b.finish(loss)
    }

    /// x -> conv2d -> relu -> sum loss: the relu output is binarizable.
    pub fn conv_relu_loss(reg: &Registry, batch: u64, c: u64, hw: u64, dt: Dtype) -> Graph {
        let mut b = B::new(reg);
        let x = b.ph("x", vec![batch, c, hw, hw], dt, false, "conv");
        let w = b.ph("k", vec![c, c, 3, 3], dt, true, "conv");
        let conv = b.op("conv2d", vec![x, w], Attrs::new(), "conv");
        let r = b.op("relu", vec![conv], Attrs::new(), "conv");
        let loss = b.sum(r, "output");
        b.finish(loss)
    }

    /// A 10,000-node cheap chain for the pass-latency budget.
    pub fn long_cheap_chain(reg: &Registry, len: usize, width: u64, dt: Dtype) -> Graph {
        let mut b = B::new(reg);
        let mut x = b.ph("x", vec![width], dt, false, "chain");
        for _ in 0..len {
            x = b.op("tanh", vec![x], Attrs::new(), "chain");
        }
        let loss = b.sum(x, "output");
        b.finish(loss)
    }

    /// fully_connected -> fully_connected: nothing for dead-node handling to
    /// recompute, the inner feature map stays stashed.
    pub fn fc_fc_chain(reg: &Registry, batch: u64, h: u64, dt: Dtype) -> Graph {
        let mut b = B::new(reg);
        let x = b.ph("x", vec![batch, h], dt, false, "mlp");
        let w1 = b.ph("w1", vec![h, h], dt, true, "mlp");
        let b1 = b.ph("b1", vec![h], dt, true, "mlp");
        let w2 = b.ph("w2", vec![h, h], dt, true, "mlp");
        let b2 = b.ph("b2", vec![h], dt, true, "mlp");
        let fc1 = b.fc(x, w1, b1, "mlp");
        let fc2 = b.fc(fc1, w2, b2, "mlp");
        let loss = b.sum(fc2, "output");
        b.finish(loss)
    }
}

pub use examples::*;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::default_registry;
    use crate::passes::infer_shapes;

    #[test]
    fn add_tanh_structure() {
        let reg = default_registry();
        let g = build(&ZooSpec::new(ZooModel::AddTanh { n: 8 }, Dtype::F32), &reg).unwrap();
        assert_eq!(g.placeholder_ids().count(), 2);
        // add, tanh, sum loss
        assert_eq!(g.num_nodes() - 2, 3);
        g.validate(&reg).unwrap();
    }

    #[test]
    fn broadcast_attn_shares_the_state_tensor() {
        let reg = default_registry();
        let g =
            build(&ZooSpec::new(ZooModel::BroadcastAttn { t: 4, n: 6 }, Dtype::F32), &reg).unwrap();
        let refs = crate::passes::edge_use_refs(&g);
        let state = g
            .placeholder_ids()
            .find(|&id| g.placeholder_info(id).unwrap().name == "state")
            .unwrap();
        assert_eq!(refs.count(EdgeRef::new(state, 0)), 4);
    }

    #[test]
    fn lstm_cell_block_sizes() {
        let reg = default_registry();
        let (batch, h) = (2u64, 3u64);
        let g = build(&ZooSpec::new(ZooModel::LstmCell { b: batch, h }, Dtype::F32), &reg).unwrap();
        let shapes = infer_shapes(&g, &reg).unwrap();
        // the non-linear block reads both gate transforms plus the previous
        // cell state: 4BH + 4BH + BH elements
        let c_prev = g
            .placeholder_ids()
            .find(|&id| g.placeholder_info(id).unwrap().name == "c_prev")
            .unwrap();
        let fc_outs: Vec<u64> = g
            .nodes()
            .filter(|n| n.op == "fully_connected")
            .map(|n| shapes.elems(EdgeRef::new(n.id, 0)))
            .collect();
        let block_in: u64 =
            fc_outs.iter().sum::<u64>() + shapes.elems(EdgeRef::new(c_prev, 0));
        assert_eq!(block_in, 9 * batch * h);
        // outputs: h and c
        let hc: u64 = 2 * batch * h;
        let mul_out = g.nodes().filter(|n| n.op == "mul").last().unwrap().id;
        let add_c = g
            .nodes()
            .filter(|n| n.op == "add" && n.tag == "rnn")
            .last()
            .unwrap()
            .id;
        assert_eq!(
            shapes.elems(EdgeRef::new(mul_out, 0)) + shapes.elems(EdgeRef::new(add_c, 0)),
            hc
        );
    }

    #[test]
    fn nmt_like_encoder_state_reused_by_every_decoder_step() {
        let reg = default_registry();
        let g = build(
            &ZooSpec::new(
                ZooModel::NmtLike { b: 2, t: 4, h: 4, enc_layers: 1, dec_layers: 1 },
                Dtype::F32,
            ),
            &reg,
        )
        .unwrap();
        let refs = crate::passes::edge_use_refs(&g);
        let stack = g
            .nodes()
            .find(|n| n.op == "concat" && n.attrs.get("stack").is_some())
            .unwrap();
        assert!(refs.count(EdgeRef::new(stack.id, 0)) >= 4);
    }

    #[test]
    fn every_builder_validates_and_infers() {
        let reg = default_registry();
        for (name, spec) in test_suite(Dtype::F32) {
            let g = build(&spec, &reg).unwrap_or_else(|e| panic!("{} failed: {}", name, e));
            g.validate(&reg).unwrap();
            infer_shapes(&g, &reg).unwrap();
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        let reg = default_registry();
        assert!(build(
            &ZooSpec::new(ZooModel::ConvChain { b: 1, c: 2, hw: 4, depth: 2 }, Dtype::F32),
            &reg
        )
        .is_err());
    }
}
