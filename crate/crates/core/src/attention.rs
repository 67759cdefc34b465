//! Semantic attention: multi-head self-attention across the `M` semantic
//! vectors followed by a row-wise MLP. There is no positional encoding and no
//! class token, so the block is equivariant to row permutations.

use crate::error::TensorError;
use crate::graph::{Graph, NodeId};
use crate::params::SaParams;
use crate::tensor::{Scalar, Tensor};

type Result<T> = std::result::Result<T, TensorError>;

/// Denominator used inside the attention softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionScale {
    /// `√d_w`, the full vector width.
    #[default]
    Model,
    /// `√d_h`, the per-head width.
    Head,
}

/// Residual wiring of the block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Wiring {
    /// `u = A + MHA(LN₁(A))`, `S = u + MLP(LN₂(u))`.
    #[default]
    PreNorm,
    /// `S = MLP(MHA(LN₁(A)) + A)`.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaConfig {
    pub heads: usize,
    pub scale: AttentionScale,
    pub wiring: Wiring,
    pub eps: f64,
}

impl Default for SaConfig {
    fn default() -> Self {
        SaConfig {
            heads: 4,
            scale: AttentionScale::Model,
            wiring: Wiring::PreNorm,
            eps: 1e-5,
        }
    }
}

/// `(A·W_Q, A·W_K, A·W_V)`.
pub fn qkv_node<T: Scalar>(g: &mut Graph<T>, a_norm: NodeId, p: &SaParams<NodeId>) -> Result<(NodeId, NodeId, NodeId)> {
    Ok((
        g.matmul(a_norm, p.wq)?,
        g.matmul(a_norm, p.wk)?,
        g.matmul(a_norm, p.wv)?,
    ))
}

/// `softmax_rows(Q·Kᵀ / √scale_dim)`.
pub fn scores_node<T: Scalar>(g: &mut Graph<T>, q: NodeId, k: NodeId, scale_dim: usize) -> Result<NodeId> {
    let (_, dq) = g.value(q).dims2("attention_scores")?;
    let (_, dk) = g.value(k).dims2("attention_scores")?;
    if dq != dk {
        return Err(TensorError::mismatch(
            "attention_scores",
            g.value(q).shape(),
            g.value(k).shape(),
        ));
    }
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, T::one() / T::from_usize(scale_dim).unwrap().sqrt())?;
    g.softmax_rows(logits)
}

/// Multi-head attention over an already normalised input: per-head
/// `softmax(Q_h·K_hᵀ/√s)·V_h`, heads concatenated, then `·W_O`.
pub fn mha_node<T: Scalar>(g: &mut Graph<T>, a_norm: NodeId, p: &SaParams<NodeId>, cfg: &SaConfig) -> Result<NodeId> {
    let (_, d) = g.value(a_norm).dims2("multi_head_attention")?;
    if cfg.heads == 0 || d % cfg.heads != 0 {
        return Err(TensorError::invalid(
            "multi_head_attention",
            format!("d_w = {d} is not divisible by {} heads", cfg.heads),
        ));
    }
    let dh = d / cfg.heads;
    let scale_dim = match cfg.scale {
        AttentionScale::Model => d,
        AttentionScale::Head => dh,
    };
    let (q, k, v) = qkv_node(g, a_norm, p)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if cfg.heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, lo, hi)?,
                g.slice_cols(k, lo, hi)?,
                g.slice_cols(v, lo, hi)?,
            )
        };
        let r = scores_node(g, qh, kh, scale_dim)?;
        heads.push(g.matmul(r, vh)?);
    }
    let theta = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    g.matmul(theta, p.wo)
}

fn mlp_node<T: Scalar>(g: &mut Graph<T>, x: NodeId, p: &SaParams<NodeId>) -> Result<NodeId> {
    let h = g.matmul(x, p.mlp_w1)?;
    let h = g.add_row_vec(h, p.mlp_b1)?;
    let h = g.relu(h)?;
    let o = g.matmul(h, p.mlp_w2)?;
    g.add_row_vec(o, p.mlp_b2)
}

/// The full block `A → S`, same shape in and out.
pub fn sa_block_node<T: Scalar>(g: &mut Graph<T>, a: NodeId, p: &SaParams<NodeId>, cfg: &SaConfig) -> Result<NodeId> {
    let eps = T::lit(cfg.eps);
    let n1 = g.layer_norm(a, p.ln1_gain, p.ln1_bias, eps)?;
    let theta = mha_node(g, n1, p, cfg)?;
    match cfg.wiring {
        Wiring::PreNorm => {
            let u = g.add(a, theta)?;
            let n2 = g.layer_norm(u, p.ln2_gain, p.ln2_bias, eps)?;
            let m = mlp_node(g, n2, p)?;
            g.add(u, m)
        }
        Wiring::Literal => {
            let u = g.add(theta, a)?;
            mlp_node(g, u, p)
        }
    }
}

fn constants<T: Scalar>(g: &mut Graph<T>, p: &SaParams<Tensor<T>>) -> SaParams<NodeId> {
    p.map(&mut |t| g.constant(t.clone()))
}

pub fn qkv<T: Scalar>(a_norm: &Tensor<T>, p: &SaParams<Tensor<T>>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let ids = constants(&mut g, p);
    let x = g.constant(a_norm.clone());
    let (q, k, v) = qkv_node(&mut g, x, &ids)?;
    Ok((g.value(q).clone(), g.value(k).clone(), g.value(v).clone()))
}

/// Attention weights for one head.
pub fn attention_scores<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, scale_dim: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (qi, ki) = (g.constant(q.clone()), g.constant(k.clone()));
    let r = scores_node(&mut g, qi, ki, scale_dim)?;
    Ok(g.value(r).clone())
}

/// `r·V` for one head.
pub fn attend<T: Scalar>(r: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    crate::tensor::matmul(r, v)
}

pub fn sa_block<T: Scalar>(a: &Tensor<T>, p: &SaParams<Tensor<T>>, cfg: &SaConfig) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let ids = constants(&mut g, p);
    let x = g.constant(a.clone());
    let s = sa_block_node(&mut g, x, &ids, cfg)?;
    Ok(g.value(s).clone())
}
