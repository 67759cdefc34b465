//! Learnable parameters of the head, generic over the slot type so the same
//! layout holds tensors, graph handles, gradients or optimizer moments.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

macro_rules! param_group {
    ($(#[$meta:meta])* $name:ident, $prefix:literal { $($field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<P> {
            $(pub $field: P,)+
        }

        impl<P> $name<P> {
            pub const GROUP: &'static str = $prefix;

            pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> $name<Q> {
                $name { $($field: f(&self.$field),)+ }
            }

            pub fn try_map<Q, E>(&self, f: &mut impl FnMut(&P) -> Result<Q, E>) -> Result<$name<Q>, E> {
                Ok($name { $($field: f(&self.$field)?,)+ })
            }

            pub fn entries(&self) -> Vec<(&'static str, &P)> {
                vec![$((concat!($prefix, ".", stringify!($field)), &self.$field),)+]
            }

            pub fn entries_mut(&mut self) -> Vec<(&'static str, &mut P)> {
                vec![$((concat!($prefix, ".", stringify!($field)), &mut self.$field),)+]
            }
        }
    };
}

param_group!(
    /// Channel attention: 1×1 mapping `C_in → C'` and the excite bottleneck.
    /// `map_w` is `C'×C_in`, `w1` is `C'×C_ex`, `w2` is `C_ex×C'`.
    PfaParams, "pfa" { map_w, map_b, w1, b1, w2, b2 }
);

param_group!(
    /// Linear map from the pooled channel descriptor to `M·d_w` values.
    ProjectionParams, "projection" { w, b }
);

param_group!(
    /// Semantic attention block. All attention matrices are `d_w×d_w`;
    /// the MLP is `d_w → d_ff → d_w`.
    SaParams, "sa" {
        ln1_gain, ln1_bias, wq, wk, wv, wo,
        ln2_gain, ln2_bias, mlp_w1, mlp_b1, mlp_w2, mlp_b2,
    }
);

/// Dimensions that determine every parameter shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadShape {
    /// Channels of the fused feature map.
    pub in_channels: usize,
    /// `C'` after the 1×1 mapping.
    pub mapped_channels: usize,
    /// Bottleneck width `C_ex`.
    pub excite_channels: usize,
    /// Number of semantic vectors `M`.
    pub vectors: usize,
    /// Word-vector dimension `d_w`.
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub use_pfa: bool,
    pub use_sa: bool,
}

impl HeadShape {
    /// Channels entering the projection.
    pub fn projection_in(&self) -> usize {
        if self.use_pfa {
            self.mapped_channels
        } else {
            self.in_channels
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |m: &str| Err(TensorError::invalid("head shape", m));
        if self.in_channels == 0 || self.vectors == 0 || self.dim == 0 {
            return bad("channels, M and d_w must be positive");
        }
        if self.use_pfa && (self.mapped_channels == 0 || self.excite_channels == 0) {
            return bad("mapped and excite channels must be positive");
        }
        if self.use_sa && (self.heads == 0 || self.dim % self.heads != 0 || self.ff_dim == 0) {
            return bad("d_w must be divisible by the head count");
        }
        Ok(())
    }
}

/// Bottleneck width `max(1, round(C'/r))`.
pub fn excite_channels(mapped: usize, reduction: usize) -> usize {
    ((mapped as f64 / reduction.max(1) as f64).round() as usize).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub pfa: Option<PfaParams<P>>,
    pub projection: ProjectionParams<P>,
    pub sa: Option<SaParams<P>>,
}

impl<P> ModelParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> ModelParams<Q> {
        ModelParams {
            pfa: self.pfa.as_ref().map(|p| p.map(&mut f)),
            projection: self.projection.map(&mut f),
            sa: self.sa.as_ref().map(|p| p.map(&mut f)),
        }
    }

    pub fn try_map<Q, E>(&self, mut f: impl FnMut(&P) -> Result<Q, E>) -> Result<ModelParams<Q>, E> {
        Ok(ModelParams {
            pfa: self.pfa.as_ref().map(|p| p.try_map(&mut f)).transpose()?,
            projection: self.projection.try_map(&mut f)?,
            sa: self.sa.as_ref().map(|p| p.try_map(&mut f)).transpose()?,
        })
    }

    /// All slots in a fixed order: pfa, projection, sa.
    pub fn entries(&self) -> Vec<(&'static str, &P)> {
        let mut out = Vec::new();
        if let Some(p) = &self.pfa {
            out.extend(p.entries());
        }
        out.extend(self.projection.entries());
        if let Some(p) = &self.sa {
            out.extend(p.entries());
        }
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(&'static str, &mut P)> {
        let mut out = Vec::new();
        if let Some(p) = &mut self.pfa {
            out.extend(p.entries_mut());
        }
        out.extend(self.projection.entries_mut());
        if let Some(p) = &mut self.sa {
            out.extend(p.entries_mut());
        }
        out
    }

    /// Names of the parameter groups present.
    pub fn groups(&self) -> Vec<&'static str> {
        let mut g = Vec::new();
        if self.pfa.is_some() {
            g.push(PfaParams::<P>::GROUP);
        }
        g.push(ProjectionParams::<P>::GROUP);
        if self.sa.is_some() {
            g.push(SaParams::<P>::GROUP);
        }
        g
    }
}

/// Learnable tensors of the head.
pub type Params<T = f32> = ModelParams<Tensor<T>>;

/// How the projection is initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Init {
    /// Glorot-uniform matrices, zero biases.
    #[default]
    Glorot,
    /// As `Glorot`, but the projection weights are zero so every class score
    /// starts equal.
    ZeroProjection,
}

fn glorot<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    Tensor::from_fn(vec![fan_in, fan_out], |_| T::lit(dist.sample(rng))).expect("finite")
}

fn zeros<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape.to_vec()).expect("positive shape")
}

fn ones<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::full(vec![n], T::one()).expect("positive shape")
}

impl<T: Scalar> Params<T> {
    pub fn init<R: Rng>(shape: &HeadShape, init: Init, rng: &mut R) -> Result<Self, TensorError> {
        shape.validate()?;
        let pfa = shape.use_pfa.then(|| {
            let (ci, cm, ce) = (shape.in_channels, shape.mapped_channels, shape.excite_channels);
            // glorot() draws fan_in×fan_out; map_w is stored out×in.
            let map_w = glorot::<T, R>(rng, ci, cm);
            let map_w = crate::tensor::transpose(&map_w).expect("matrix");
            PfaParams {
                map_w,
                map_b: zeros(&[cm]),
                w1: glorot(rng, cm, ce),
                b1: zeros(&[ce]),
                w2: glorot(rng, ce, cm),
                b2: zeros(&[cm]),
            }
        });
        let pin = shape.projection_in();
        let out = shape.vectors * shape.dim;
        let proj_w = match init {
            Init::Glorot => glorot(rng, pin, out),
            Init::ZeroProjection => zeros(&[pin, out]),
        };
        let projection = ProjectionParams {
            w: proj_w,
            b: zeros(&[out]),
        };
        let sa = shape.use_sa.then(|| {
            let d = shape.dim;
            SaParams {
                ln1_gain: ones(d),
                ln1_bias: zeros(&[d]),
                wq: glorot(rng, d, d),
                wk: glorot(rng, d, d),
                wv: glorot(rng, d, d),
                wo: glorot(rng, d, d),
                ln2_gain: ones(d),
                ln2_bias: zeros(&[d]),
                mlp_w1: glorot(rng, d, shape.ff_dim),
                mlp_b1: zeros(&[shape.ff_dim]),
                mlp_w2: glorot(rng, shape.ff_dim, d),
                mlp_b2: zeros(&[d]),
            }
        });
        Ok(ModelParams { pfa, projection, sa })
    }

    /// Expected shape of every slot, in [`ModelParams::entries`] order.
    pub fn expected_shapes(shape: &HeadShape) -> ModelParams<Vec<usize>> {
        let (ci, cm, ce, d, ff) = (
            shape.in_channels,
            shape.mapped_channels,
            shape.excite_channels,
            shape.dim,
            shape.ff_dim,
        );
        ModelParams {
            pfa: shape.use_pfa.then(|| PfaParams {
                map_w: vec![cm, ci],
                map_b: vec![cm],
                w1: vec![cm, ce],
                b1: vec![ce],
                w2: vec![ce, cm],
                b2: vec![cm],
            }),
            projection: ProjectionParams {
                w: vec![shape.projection_in(), shape.vectors * d],
                b: vec![shape.vectors * d],
            },
            sa: shape.use_sa.then(|| SaParams {
                ln1_gain: vec![d],
                ln1_bias: vec![d],
                wq: vec![d, d],
                wk: vec![d, d],
                wv: vec![d, d],
                wo: vec![d, d],
                ln2_gain: vec![d],
                ln2_bias: vec![d],
                mlp_w1: vec![d, ff],
                mlp_b1: vec![ff],
                mlp_w2: vec![ff, d],
                mlp_b2: vec![d],
            }),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        self.map(|t| t.cast())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.len()).sum()
    }
}
