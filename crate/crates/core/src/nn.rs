//! Attention, feed-forward and normalization building blocks on the graph.

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tensor, LAYER_NORM_EPS};

pub fn gaussian_tensor(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| std * rng.gaussian()).collect())
        .expect("shape product matches")
}

/// Projection matrices of one attention layer, all `d x d`, applied as `x W`.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

impl AttentionWeights {
    pub fn identity(d: usize) -> Self {
        let i = Tensor::identity(d);
        Self {
            w_q: i.clone(),
            w_k: i.clone(),
            w_v: i.clone(),
            w_o: i,
        }
    }

    pub fn random(d: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            w_q: gaussian_tensor(&[d, d], std, rng),
            w_k: gaussian_tensor(&[d, d], std, rng),
            w_v: gaussian_tensor(&[d, d], std, rng),
            w_o: gaussian_tensor(&[d, d], std, rng),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl AttentionParams {
    pub fn register(store: &mut ParamStore, prefix: &str, w: AttentionWeights) -> Self {
        Self {
            w_q: store.add(format!("{prefix}.w_q"), w.w_q),
            w_k: store.add(format!("{prefix}.w_k"), w.w_k),
            w_v: store.add(format!("{prefix}.w_v"), w.w_v),
            w_o: store.add(format!("{prefix}.w_o"), w.w_o),
        }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> AttentionVars {
        AttentionVars {
            w_q: g.param(store, self.w_q),
            w_k: g.param(store, self.w_k),
            w_v: g.param(store, self.w_v),
            w_o: g.param(store, self.w_o),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

impl AttentionVars {
    pub fn constants(g: &mut Graph, w: &AttentionWeights) -> Self {
        Self {
            w_q: g.constant(w.w_q.clone()),
            w_k: g.constant(w.w_k.clone()),
            w_v: g.constant(w.w_v.clone()),
            w_o: g.constant(w.w_o.clone()),
        }
    }
}

pub struct AttentionOutput {
    pub out: Var,
    /// Attention weights per head, each `nq x nk` with rows summing to one.
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention: per head
/// `softmax(Q_h K_h^T / sqrt(d / heads)) V_h`, heads concatenated and
/// projected by `W_O`.
pub fn attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    w: &AttentionVars,
    heads: usize,
) -> Result<AttentionOutput> {
    let d = g.value(q).dims2()?.1;
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(format!("model width {d} not divisible by {heads} heads")));
    }
    let (nk, dk) = g.value(k).dims2()?;
    let (nv, dv) = g.value(v).dims2()?;
    if dk != d || dv != d || nk != nv {
        return Err(Error::shape("attention", g.value(k).shape(), g.value(v).shape()));
    }
    let qp = g.matmul(q, w.w_q)?;
    let kp = g.matmul(k, w.w_k)?;
    let vp = g.matmul(v, w.w_v)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (qp, kp, vp)
        } else {
            (
                g.slice_cols(qp, h * dh, dh)?,
                g.slice_cols(kp, h * dh, dh)?,
                g.slice_cols(vp, h * dh, dh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let a = g.softmax_rows(scores)?;
        outs.push(g.matmul(a, vh)?);
        weights.push(a);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let out = g.matmul(cat, w.w_o)?;
    Ok(AttentionOutput { out, weights })
}

/// Head-averaged attention weights.
pub fn mean_head_weights(g: &mut Graph, weights: &[Var]) -> Result<Var> {
    let mut acc = weights[0];
    for &w in &weights[1..] {
        acc = g.add(acc, w)?;
    }
    Ok(if weights.len() == 1 {
        acc
    } else {
        g.scale(acc, 1.0 / weights.len() as f64)
    })
}

/// Pure multi-head attention over plain tensors.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    weights: &AttentionWeights,
    heads: usize,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let w = AttentionVars::constants(&mut g, weights);
    let out = attention(&mut g, qv, kv, vv, &w, heads)?;
    Ok(g.value(out.out).clone())
}

/// `W2 gelu(x W1 + b1) + b2`.
#[derive(Debug, Clone)]
pub struct FfnWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FfnWeights {
    pub fn random(d: usize, mult: usize, rng: &mut Rng) -> Self {
        let hidden = d * mult;
        Self {
            w1: gaussian_tensor(&[d, hidden], 1.0 / (d as f64).sqrt(), rng),
            b1: Tensor::zeros([hidden]),
            w2: gaussian_tensor(&[hidden, d], 1.0 / (hidden as f64).sqrt(), rng),
            b2: Tensor::zeros([d]),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FfnParams {
    pub fn register(store: &mut ParamStore, prefix: &str, w: FfnWeights) -> Self {
        Self {
            w1: store.add(format!("{prefix}.w1"), w.w1),
            b1: store.add(format!("{prefix}.b1"), w.b1),
            w2: store.add(format!("{prefix}.w2"), w.w2),
            b2: store.add(format!("{prefix}.b2"), w.b2),
        }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> FfnVars {
        FfnVars {
            w1: g.param(store, self.w1),
            b1: g.param(store, self.b1),
            w2: g.param(store, self.w2),
            b2: g.param(store, self.b2),
        }
    }
}

impl FfnVars {
    pub fn constants(g: &mut Graph, w: &FfnWeights) -> Self {
        Self {
            w1: g.constant(w.w1.clone()),
            b1: g.constant(w.b1.clone()),
            w2: g.constant(w.w2.clone()),
            b2: g.constant(w.b2.clone()),
        }
    }
}

pub fn ffn(g: &mut Graph, x: Var, w: &FfnVars) -> Result<Var> {
    let h = g.matmul(x, w.w1)?;
    let h = g.add_row_bias(h, w.b1)?;
    let h = g.gelu(h)?;
    let o = g.matmul(h, w.w2)?;
    g.add_row_bias(o, w.b2)
}

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
}

impl NormParams {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full([d], 1.0)),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros([d])),
        }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> NormVars {
        NormVars {
            gamma: g.param(store, self.gamma),
            beta: g.param(store, self.beta),
        }
    }
}

impl NormVars {
    pub fn unit(g: &mut Graph, d: usize) -> Self {
        Self {
            gamma: g.constant(Tensor::full([d], 1.0)),
            beta: g.constant(Tensor::zeros([d])),
        }
    }
}

pub fn norm(g: &mut Graph, x: Var, w: &NormVars) -> Result<Var> {
    g.layer_norm(x, w.gamma, w.beta, LAYER_NORM_EPS)
}
