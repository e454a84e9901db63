//! Neural building blocks on top of [`Graph`]: affine maps, layer norm,
//! dropout, multi-head attention with key masking, the residual
//! cross-attention block and two-layer MLPs.
//!
//! Parameters live in a [`ParamStore`] under dotted prefixes, e.g. a linear
//! map `p` owns `p.w` (`in x out`) and `p.b` (`1 x out`).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{softmax_into, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Parameter, Tensor};

pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// Forward-pass mode. Dropout is only active in `Train`.
pub enum Mode<'a> {
    Eval,
    Train { dropout: f64, rng: &'a mut ChaCha8Rng },
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Shape hyperparameters shared by attention blocks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttnShape {
    pub d: usize,
    pub heads: usize,
    pub ln_eps: f64,
}

impl AttnShape {
    pub fn new(d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            d,
            heads,
            ln_eps: DEFAULT_LN_EPS,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

// ---------------------------------------------------------------------------
// initialization

pub fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(Parameter::new(
        format!("{prefix}.w"),
        Tensor::uniform(&[fan_in, fan_out], bound, rng),
        true,
    ));
    store.insert(Parameter::new(
        format!("{prefix}.b"),
        Tensor::uniform(&[1, fan_out], bound, rng),
        true,
    ));
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(Parameter::new(format!("{prefix}.gain"), Tensor::full(&[1, d], 1.0), true));
    store.insert(Parameter::new(format!("{prefix}.bias"), Tensor::zeros(&[1, d]), true));
}

pub fn init_mlp(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    hidden: usize,
    output: usize,
    rng: &mut ChaCha8Rng,
) {
    init_linear(store, &format!("{prefix}.fc1"), input, hidden, rng);
    init_linear(store, &format!("{prefix}.fc2"), hidden, output, rng);
}

/// Query/key/value/output projections for multi-head attention. Head `h` uses
/// columns `h*dh .. (h+1)*dh` of each projection.
pub fn init_attention(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    for part in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.{part}"), d, d, rng);
    }
}

pub fn init_ca_block(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    init_attention(store, &format!("{prefix}.attn"), d, rng);
    init_layer_norm(store, &format!("{prefix}.ln"), d);
}

/// Copies every parameter under `from` to the same suffix under `to`.
pub fn copy_prefix(store: &mut ParamStore, from: &str, to: &str) -> Result<()> {
    let src: Vec<Parameter> = store
        .iter()
        .filter(|p| p.name.starts_with(&format!("{from}.")))
        .cloned()
        .collect();
    if src.is_empty() {
        return Err(Error::MissingEntity(format!("parameters under '{from}'")));
    }
    for p in src {
        let name = format!("{to}{}", &p.name[from.len()..]);
        store.insert(Parameter::new(name, p.tensor, p.trainable));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// graph builders

fn bind(g: &mut Graph, store: &ParamStore, name: &str) -> Result<Var> {
    Ok(g.param(store.get(name)?))
}

/// `x W + b`, applied per row.
pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = bind(g, store, &format!("{prefix}.w"))?;
    let b = bind(g, store, &format!("{prefix}.b"))?;
    let (_, k) = g.shape(x);
    let (wk, _) = g.shape(w);
    if k != wk {
        return Err(Error::Config(format!(
            "'{prefix}' expects width {wk}, got {k}"
        )));
    }
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

pub fn layer_norm_graph(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    eps: f64,
) -> Result<Var> {
    let gain = bind(g, store, &format!("{prefix}.gain"))?;
    let bias = bind(g, store, &format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, eps)
}

/// Two affine layers with ReLU between them, applied per row.
pub fn mlp(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, store, &format!("{prefix}.fc1"), x)?;
    let h = g.relu(h);
    linear(g, store, &format!("{prefix}.fc2"), h)
}

/// Inverted dropout; identity outside training.
pub fn dropout(g: &mut Graph, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
    match mode {
        Mode::Eval => Ok(x),
        Mode::Train { dropout, rng } => {
            let rate = *dropout;
            if rate <= 0.0 {
                return Ok(x);
            }
            let keep = 1.0 - rate;
            let n = g.value(x).len();
            let factors = (0..n)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            g.mul_const(x, factors)
        }
    }
}

/// Scaled dot-product attention over `heads` heads with a key validity mask.
///
/// Masked keys get exactly zero weight. With no valid key at all the result
/// is the zero matrix.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    shape: AttnShape,
    q: Var,
    k: Var,
    v: Var,
    key_mask: &[bool],
) -> Result<Var> {
    let (tq, dq) = g.shape(q);
    let (tk, dk) = g.shape(k);
    let (tv, dv) = g.shape(v);
    if dq != shape.d || dk != shape.d || dv != shape.d {
        return Err(Error::Config(format!(
            "attention width {} but inputs have {dq}/{dk}/{dv}",
            shape.d
        )));
    }
    if tk != tv || key_mask.len() != tk {
        return Err(Error::InvalidArgument(format!(
            "{tk} keys, {tv} values, {} mask bits",
            key_mask.len()
        )));
    }
    if !key_mask.iter().any(|&m| m) {
        return Ok(g.constant(Tensor::zeros(&[tq, shape.d])));
    }
    let qp = linear(g, store, &format!("{prefix}.q"), q)?;
    let kp = linear(g, store, &format!("{prefix}.k"), k)?;
    let vp = linear(g, store, &format!("{prefix}.v"), v)?;
    let dh = shape.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(shape.heads);
    for h in 0..shape.heads {
        let qh = g.slice_cols(qp, h * dh, dh)?;
        let kh = g.slice_cols(kp, h * dh, dh)?;
        let vh = g.slice_cols(vp, h * dh, dh)?;
        let scores = g.matmul_bt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let weights = g.masked_softmax(scores, key_mask)?;
        outs.push(g.matmul(weights, vh)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    linear(g, store, &format!("{prefix}.o"), cat)
}

/// Residual cross-attention block `LayerNorm(Q + Dropout(MHA(Q, K, V; mask)))`.
#[allow(clippy::too_many_arguments)]
pub fn ca_block(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    shape: AttnShape,
    q: Var,
    k: Var,
    v: Var,
    key_mask: &[bool],
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let attn = multi_head_attention(g, store, &format!("{prefix}.attn"), shape, q, k, v, key_mask)?;
    let attn = dropout(g, attn, mode)?;
    let res = g.add(q, attn)?;
    layer_norm_graph(g, store, &format!("{prefix}.ln"), res, shape.ln_eps)
}

/// Masked mean over token rows.
pub fn pool(g: &mut Graph, h: Var, mask: &[bool]) -> Result<Var> {
    g.masked_mean(h, mask)
}

// ---------------------------------------------------------------------------
// value-level operations

/// Softmax restricted to positions with a set mask bit. Masked positions get
/// exactly 0; an all-zero mask yields the all-zero vector.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::InvalidArgument(format!(
            "{} logits vs {} mask bits",
            logits.len(),
            mask.len()
        )));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, mask, &mut out);
    Ok(out)
}

/// `gain * (x - mean) / sqrt(var + eps) + bias` with population variance.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.is_empty() || gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::InvalidArgument(format!(
            "layer_norm widths x={} gain={} bias={}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    let mut g = Graph::new();
    let xv = g.constant(Tensor::row(x.to_vec()));
    let gv = g.constant(Tensor::row(gain.to_vec()));
    let bv = g.constant(Tensor::row(bias.to_vec()));
    let out = g.layer_norm(xv, gv, bv, eps)?;
    Ok(g.value(out).data().to_vec())
}

/// Applies the MLP stored under `prefix` to a single vector.
pub fn mlp_apply(store: &ParamStore, prefix: &str, x: &[f64]) -> Result<Vec<f64>> {
    let k = store.get(&format!("{prefix}.fc1.w"))?.tensor.rows();
    if x.len() != k {
        return Err(Error::InvalidArgument(format!(
            "mlp '{prefix}' expects input width {k}, got {}",
            x.len()
        )));
    }
    let mut g = Graph::new();
    let xv = g.constant(Tensor::row(x.to_vec()));
    let out = mlp(&mut g, store, prefix, xv)?;
    Ok(g.value(out).data().to_vec())
}
