//! Multi-scale feature fusion: every scale is max-pooled down to the spatial
//! size of the smallest scale, then the results are stacked along channels.

use std::collections::HashSet;

use crate::error::TensorError;
use crate::tensor::{self, Scalar, Tensor};

type Result<T> = std::result::Result<T, TensorError>;

/// Named `C×H×W` feature maps ordered shallow to deep.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T: Scalar = f32> {
    scales: Vec<(String, Tensor<T>)>,
    target_hw: (usize, usize),
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn new(scales: Vec<(String, Tensor<T>)>) -> Result<Self> {
        if scales.is_empty() {
            return Err(TensorError::invalid("pyramid", "at least one scale is required"));
        }
        let mut seen = HashSet::new();
        let mut target = (usize::MAX, usize::MAX);
        for (name, t) in &scales {
            if !seen.insert(name.as_str()) {
                return Err(TensorError::invalid("pyramid", format!("duplicate scale `{name}`")));
            }
            let (_, h, w) = t.dims3("pyramid")?;
            target = (target.0.min(h), target.1.min(w));
        }
        for (name, t) in &scales {
            let (_, h, w) = t.dims3("pyramid")?;
            if h % target.0 != 0 || w % target.1 != 0 {
                return Err(TensorError::invalid(
                    "pyramid",
                    format!(
                        "scale `{name}` ({h}×{w}) is not divisible by target {}×{}",
                        target.0, target.1
                    ),
                ));
            }
        }
        Ok(FeaturePyramid {
            scales,
            target_hw: target,
        })
    }

    pub fn scales(&self) -> &[(String, Tensor<T>)] {
        &self.scales
    }

    pub fn target_hw(&self) -> (usize, usize) {
        self.target_hw
    }

    /// Total channels after concatenation.
    pub fn channels(&self) -> usize {
        self.scales.iter().map(|(_, t)| t.shape()[0]).sum()
    }

    /// Keeps only the named scales, in the order given.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        let picked = names
            .iter()
            .map(|n| {
                self.scales
                    .iter()
                    .find(|(s, _)| s == n)
                    .cloned()
                    .ok_or_else(|| TensorError::invalid("pyramid", format!("unknown scale `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(picked)
    }

    /// The deepest scale alone (smallest spatial extent; last on ties).
    pub fn deepest(&self) -> Self {
        let (name, t) = self
            .scales
            .iter()
            .rev()
            .min_by_key(|(_, t)| t.shape()[1] * t.shape()[2])
            .expect("nonempty");
        Self::new(vec![(name.clone(), t.clone())]).expect("single valid scale")
    }
}

/// Max-pools every scale to the pyramid's target size.
pub fn unify_scales<T: Scalar>(p: &FeaturePyramid<T>) -> Result<Vec<Tensor<T>>> {
    let (th, tw) = p.target_hw;
    p.scales
        .iter()
        .map(|(_, t)| {
            let (_, h, w) = t.dims3("unify_scales")?;
            if (h, w) == (th, tw) {
                Ok(t.clone())
            } else {
                tensor::max_pool2d(t, th, tw)
            }
        })
        .collect()
}

/// Stacks same-size maps along channels in input order.
pub fn concat_channels<T: Scalar>(maps: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = maps
        .first()
        .ok_or_else(|| TensorError::invalid("concat_channels", "no inputs"))?;
    let (_, h, w) = first.dims3("concat_channels")?;
    for m in maps {
        let (_, mh, mw) = m.dims3("concat_channels")?;
        if (mh, mw) != (h, w) {
            return Err(TensorError::mismatch("concat_channels", first.shape(), m.shape()));
        }
    }
    let refs: Vec<&Tensor<T>> = maps.iter().collect();
    tensor::concat_axis0(&refs)
}

/// `concat_channels(unify_scales(p))`.
pub fn fuse<T: Scalar>(p: &FeaturePyramid<T>) -> Result<Tensor<T>> {
    concat_channels(&unify_scales(p)?)
}
