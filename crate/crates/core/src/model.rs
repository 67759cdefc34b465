//! The full head: fused pyramid features → (PFA) → projection → (SA) → `S`,
//! with each stage switchable for ablations.

use crate::attention::{sa_block_node, SaConfig};
use crate::config::RunConfig;
use crate::error::{bail, Result};
use crate::gradcheck::{check_gradient, GradCheck};
use crate::graph::{Graph, NodeId};
use crate::loss::{sample_loss_node, total_loss_node, LossConfig, SampleTarget};
use crate::params::{HeadShape, ModelParams, Params};
use crate::pfa::{pfa_node, project_node, Gate, SemanticMatrix};
use crate::pyramid::{fuse, FeaturePyramid};
use crate::tensor::{Scalar, Tensor};

/// Everything besides the parameters that determines the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub shape: HeadShape,
    pub gate: Gate,
    pub sa: SaConfig,
    pub loss: LossConfig,
}

impl Head {
    pub fn from_config(cfg: &RunConfig, in_channels: usize) -> Result<Self> {
        let shape = cfg.head_shape(in_channels);
        shape.validate()?;
        Ok(Head {
            shape,
            gate: cfg.gate,
            sa: cfg.sa_config(),
            loss: cfg.loss(),
        })
    }
}

/// Network input for one sample: the chosen scales fused to `C_in×H'×W'`,
/// or only the deepest of them when the pyramid is off.
pub fn fused_input<T: Scalar>(p: &FeaturePyramid<T>, use_pyramid: bool, scales: &[String]) -> Result<Tensor<T>> {
    let p = if scales.is_empty() {
        p.clone()
    } else {
        p.select(scales)?
    };
    let p = if use_pyramid { p } else { p.deepest() };
    Ok(fuse(&p)?)
}

pub fn semantic_node<T: Scalar>(
    g: &mut Graph<T>,
    input: NodeId,
    p: &ModelParams<NodeId>,
    head: &Head,
) -> Result<NodeId> {
    let (m, d) = (head.shape.vectors, head.shape.dim);
    let a = match &p.pfa {
        Some(pfa) => pfa_node(g, input, pfa, &p.projection, head.gate, m, d)?,
        None => project_node(g, input, &p.projection, m, d)?,
    };
    Ok(match &p.sa {
        Some(sa) => sa_block_node(g, a, sa, &head.sa)?,
        None => a,
    })
}

fn check_layout<T: Scalar>(params: &Params<T>, head: &Head) -> Result<()> {
    let want = Params::<T>::expected_shapes(&head.shape);
    let want = want.entries();
    let have = params.entries();
    if want.len() != have.len() {
        bail!(Config, "parameter set does not match the head configuration");
    }
    for ((name, w), (_, t)) in want.iter().zip(&have) {
        if t.shape() != w.as_slice() {
            bail!(Config, "`{name}` has shape {:?}, expected {:?}", t.shape(), w);
        }
    }
    Ok(())
}

pub fn semantic_matrix<T: Scalar>(params: &Params<T>, input: &Tensor<T>, head: &Head) -> Result<SemanticMatrix<T>> {
    check_layout(params, head)?;
    let mut g = Graph::new();
    let ids = params.map(|t| g.constant(t.clone()));
    let x = g.constant(input.clone());
    let s = semantic_node(&mut g, x, &ids, head)?;
    Ok(SemanticMatrix::new(g.value(s).clone())?)
}

/// Loss of one sample and its gradient with respect to every parameter.
/// `vt` holds the scored (seen) word vectors as columns.
pub fn sample_loss_grad<T: Scalar>(
    params: &Params<T>,
    input: &Tensor<T>,
    target: &SampleTarget,
    vt: &Tensor<T>,
    head: &Head,
) -> Result<(f64, Params<T>)> {
    let mut g = Graph::new();
    let ids = params.map(|t| g.param(t.clone()));
    let x = g.constant(input.clone());
    let v = g.constant(vt.clone());
    let s = semantic_node(&mut g, x, &ids, head)?;
    let loss = sample_loss_node(&mut g, s, v, target, &head.loss)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item().as_f64(), ids.map(|&id| grads.get_or_zeros(id))))
}

/// Batch-mean loss built as a single graph, and its gradient.
pub fn batch_loss_grad<T: Scalar>(
    params: &Params<T>,
    batch: &[(Tensor<T>, SampleTarget)],
    vt: &Tensor<T>,
    head: &Head,
) -> Result<(f64, Params<T>)> {
    let mut g = Graph::new();
    let ids = params.map(|t| g.param(t.clone()));
    let v = g.constant(vt.clone());
    let mut outs = Vec::with_capacity(batch.len());
    for (x, _) in batch {
        let xi = g.constant(x.clone());
        outs.push(semantic_node(&mut g, xi, &ids, head)?);
    }
    let pairs: Vec<(NodeId, &SampleTarget)> = outs.into_iter().zip(batch.iter().map(|(_, t)| t)).collect();
    let loss = total_loss_node(&mut g, &pairs, v, &head.loss)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item().as_f64(), ids.map(|&id| grads.get_or_zeros(id))))
}

/// Batch-mean loss without the backward pass.
pub fn batch_loss<T: Scalar>(
    params: &Params<T>,
    batch: &[(Tensor<T>, SampleTarget)],
    vt: &Tensor<T>,
    head: &Head,
) -> Result<f64> {
    let mut g = Graph::new();
    let ids = params.map(|t| g.constant(t.clone()));
    let v = g.constant(vt.clone());
    let mut outs = Vec::with_capacity(batch.len());
    for (x, _) in batch {
        let xi = g.constant(x.clone());
        outs.push(semantic_node(&mut g, xi, &ids, head)?);
    }
    let pairs: Vec<(NodeId, &SampleTarget)> = outs.into_iter().zip(batch.iter().map(|(_, t)| t)).collect();
    let loss = total_loss_node(&mut g, &pairs, v, &head.loss)?;
    Ok(g.value(loss).item().as_f64())
}

/// Finite-difference result for one parameter group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub entries: Vec<(String, GradCheck)>,
    pub total: GradCheck,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CheckOptions {
    /// Check at most this many coordinates per tensor.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Added to the first analytic coordinate of every tensor; for testing
    /// that the checker notices a wrong gradient.
    pub perturb: f64,
}

/// Verifies the analytic gradient of the batch loss with respect to every
/// parameter tensor, grouped by module.
pub fn gradient_check(
    params: &Params<f64>,
    batch: &[(Tensor<f64>, SampleTarget)],
    vt: &Tensor<f64>,
    head: &Head,
    opts: &CheckOptions,
) -> Result<Vec<GroupCheck>> {
    let (_, grads) = batch_loss_grad(params, batch, vt, head)?;
    let names: Vec<&'static str> = params.entries().iter().map(|(n, _)| *n).collect();
    let mut groups: Vec<GroupCheck> = params
        .groups()
        .into_iter()
        .map(|g| GroupCheck {
            group: g.to_string(),
            ..Default::default()
        })
        .collect();
    for (i, name) in names.iter().enumerate() {
        let x0 = params.entries()[i].1.clone();
        let mut analytic = grads.entries()[i].1.clone();
        analytic.data_mut()[0] += opts.perturb;
        let f = |x: &Tensor<f64>| {
            let mut p = params.clone();
            *p.entries_mut()[i].1 = x.clone();
            batch_loss(&p, batch, vt, head).unwrap_or(f64::NAN)
        };
        let sample = opts.max_coords.map(|k| (k, opts.seed.wrapping_add(i as u64)));
        let r = check_gradient(&x0, &analytic, f, sample);
        let group = name.split('.').next().unwrap_or(name);
        let slot = groups.iter_mut().find(|g| g.group == group).expect("known group");
        slot.total.merge(&r);
        slot.entries.push((name.to_string(), r));
    }
    Ok(groups)
}
