//! Pyramid feature attention: per-pixel channel mapping, squeeze/excite
//! gating, channel reweighting and projection to the semantic matrix.
//!
//! The `*_node` builders record onto a [`Graph`]; the plain functions run the
//! same builders on constant inputs.

use crate::error::TensorError;
use crate::graph::{Graph, NodeId};
use crate::params::{PfaParams, ProjectionParams};
use crate::tensor::{Scalar, Tensor};

type Result<T> = std::result::Result<T, TensorError>;

/// Activation applied to the excite output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Gate {
    #[default]
    Relu,
    Sigmoid,
}

/// `M×d_w` matrix of semantic vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMatrix<T: Scalar = f32> {
    values: Tensor<T>,
}

impl<T: Scalar> SemanticMatrix<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        values.dims2("semantic matrix")?;
        Ok(SemanticMatrix { values })
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.values
    }
}

/// 1×1 convolution with bias: `C_in×H×W → C'×H×W`.
pub fn map_node<T: Scalar>(g: &mut Graph<T>, x: NodeId, p: &PfaParams<NodeId>) -> Result<NodeId> {
    let (c, h, w) = g.value(x).dims3("map_features")?;
    let (_, cin) = g.value(p.map_w).dims2("map_features")?;
    if cin != c {
        return Err(TensorError::mismatch(
            "map_features",
            g.value(p.map_w).shape(),
            g.value(x).shape(),
        ));
    }
    let flat = g.reshape(x, &[c, h * w])?;
    let mixed = g.matmul(p.map_w, flat)?;
    let biased = g.add_col_vec(mixed, p.map_b)?;
    let cm = g.value(biased).shape()[0];
    g.reshape(biased, &[cm, h, w])
}

/// Channel means of a `C×H×W` node, as a `[C]` node.
pub fn gap_node<T: Scalar>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
    let (c, h, w) = g.value(x).dims3("global_avg_pool")?;
    let flat = g.reshape(x, &[c, h * w])?;
    g.row_mean(flat)
}

/// `α = gate(relu(z·W1 + b1)·W2 + b2)`.
pub fn excite_node<T: Scalar>(g: &mut Graph<T>, z: NodeId, p: &PfaParams<NodeId>, gate: Gate) -> Result<NodeId> {
    let c = g.value(z).len();
    let row = g.reshape(z, &[1, c])?;
    let h = g.matmul(row, p.w1)?;
    let h = g.add_row_vec(h, p.b1)?;
    let h = g.relu(h)?;
    let a = g.matmul(h, p.w2)?;
    let a = g.add_row_vec(a, p.b2)?;
    let a = match gate {
        Gate::Relu => g.relu(a)?,
        Gate::Sigmoid => g.sigmoid(a)?,
    };
    let out = g.value(a).len();
    g.reshape(a, &[out])
}

/// `F[c,i,j] = α[c]·C'[c,i,j]`.
pub fn reweight_node<T: Scalar>(g: &mut Graph<T>, x: NodeId, alpha: NodeId) -> Result<NodeId> {
    let (c, h, w) = g.value(x).dims3("reweight")?;
    if g.value(alpha).shape() != [c] {
        return Err(TensorError::mismatch(
            "reweight",
            g.value(x).shape(),
            g.value(alpha).shape(),
        ));
    }
    let flat = g.reshape(x, &[c, h * w])?;
    let scaled = g.scale_rows(flat, alpha)?;
    g.reshape(scaled, &[c, h, w])
}

/// `A = reshape(GAP(F)·W + b, M×d_w)`, filled row-major.
pub fn project_node<T: Scalar>(
    g: &mut Graph<T>,
    features: NodeId,
    p: &ProjectionParams<NodeId>,
    vectors: usize,
    dim: usize,
) -> Result<NodeId> {
    let (_, out) = g.value(p.w).dims2("project_semantic")?;
    if out != vectors * dim {
        return Err(TensorError::invalid(
            "project_semantic",
            format!("projection yields {out} values, M·d_w = {}", vectors * dim),
        ));
    }
    let z = gap_node(g, features)?;
    let c = g.value(z).len();
    let row = g.reshape(z, &[1, c])?;
    let a = g.matmul(row, p.w)?;
    let a = g.add_row_vec(a, p.b)?;
    g.reshape(a, &[vectors, dim])
}

/// Full attention chain from fused features to the semantic matrix.
pub fn pfa_node<T: Scalar>(
    g: &mut Graph<T>,
    fused: NodeId,
    pfa: &PfaParams<NodeId>,
    projection: &ProjectionParams<NodeId>,
    gate: Gate,
    vectors: usize,
    dim: usize,
) -> Result<NodeId> {
    let mapped = map_node(g, fused, pfa)?;
    let z = gap_node(g, mapped)?;
    let alpha = excite_node(g, z, pfa, gate)?;
    let weighted = reweight_node(g, mapped, alpha)?;
    project_node(g, weighted, projection, vectors, dim)
}

fn constants<T: Scalar>(g: &mut Graph<T>, p: &PfaParams<Tensor<T>>) -> PfaParams<NodeId> {
    p.map(&mut |t| g.constant(t.clone()))
}

pub fn map_features<T: Scalar>(x: &Tensor<T>, p: &PfaParams<Tensor<T>>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let ids = constants(&mut g, p);
    let xi = g.constant(x.clone());
    let y = map_node(&mut g, xi, &ids)?;
    Ok(g.value(y).clone())
}

pub fn excite<T: Scalar>(z: &Tensor<T>, p: &PfaParams<Tensor<T>>, gate: Gate) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let ids = constants(&mut g, p);
    let zi = g.constant(z.clone());
    let y = excite_node(&mut g, zi, &ids, gate)?;
    Ok(g.value(y).clone())
}

pub fn reweight<T: Scalar>(x: &Tensor<T>, alpha: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let ai = g.constant(alpha.clone());
    let y = reweight_node(&mut g, xi, ai)?;
    Ok(g.value(y).clone())
}

pub fn project_semantic<T: Scalar>(
    features: &Tensor<T>,
    p: &ProjectionParams<Tensor<T>>,
    vectors: usize,
    dim: usize,
) -> Result<SemanticMatrix<T>> {
    let mut g = Graph::new();
    let ids = p.map(&mut |t| g.constant(t.clone()));
    let fi = g.constant(features.clone());
    let y = project_node(&mut g, fi, &ids, vectors, dim)?;
    SemanticMatrix::new(g.value(y).clone())
}
