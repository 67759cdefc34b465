//! Run configuration: paths, head hyperparameters, module toggles and the
//! training schedule, read from flat `key = value` text.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::attention::{AttentionScale, SaConfig, Wiring};
use crate::error::{bail, Error, Result};
use crate::kv::{self, KeyValue};
use crate::loss::{LossConfig, VarianceAxis};
use crate::metrics::{Scoring, Task};
use crate::optim::{AdamConfig, StepSchedule};
use crate::par::Parallelism;
use crate::params::{excite_channels, HeadShape, Init};
use crate::pfa::Gate;

macro_rules! named_enum {
    ($ty:ty { $($variant:path => $name:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok($variant),)+
                    _ => bail!(Config, "unknown {} `{s}` (expected one of: {})", stringify!($ty), [$($name),+].join(", ")),
                }
            }
        }
    };
}

named_enum!(Gate { Gate::Relu => "relu", Gate::Sigmoid => "sigmoid" });
named_enum!(Wiring { Wiring::PreNorm => "prenorm", Wiring::Literal => "literal" });
named_enum!(AttentionScale { AttentionScale::Model => "model", AttentionScale::Head => "head" });
named_enum!(VarianceAxis { VarianceAxis::AcrossVectors => "vectors", VarianceAxis::WithinVector => "dims" });
named_enum!(Scoring { Scoring::Dot => "dot", Scoring::Cosine => "cosine" });
named_enum!(Init { Init::Glorot => "glorot", Init::ZeroProjection => "zero" });

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub features: Option<PathBuf>,
    pub vectors: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,

    /// Number of semantic vectors `M`.
    pub m: usize,
    pub lambda: f64,
    pub d_w: usize,
    pub reduction: usize,
    pub heads: usize,
    /// Hidden width of the attention MLP; `0` means `2·d_w`.
    pub ff_dim: usize,
    /// `C'`; `0` means the fused input width.
    pub mapped_channels: usize,
    pub gate: Gate,
    pub wiring: Wiring,
    pub attn_scale: AttentionScale,
    pub omega_axis: VarianceAxis,
    pub reg_axis: VarianceAxis,
    pub ln_eps: f64,
    pub init: Init,

    pub pyramid: bool,
    pub pfa: bool,
    pub sa: bool,
    /// Scales to fuse; empty means all.
    pub scales: Vec<String>,

    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_step: usize,
    pub lr_factor: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// `1` runs single-threaded; anything else uses the thread pool.
    pub threads: usize,

    pub task: Task,
    pub ks: Vec<usize>,
    /// Inference only; training always uses the dot product.
    pub scoring: Scoring,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let sched = StepSchedule::default();
        let sa = SaConfig::default();
        let loss = LossConfig::default();
        RunConfig {
            features: None,
            vectors: None,
            split: None,
            checkpoint: None,
            m: 8,
            lambda: loss.lambda,
            d_w: 300,
            reduction: 16,
            heads: sa.heads,
            ff_dim: 0,
            mapped_channels: 0,
            gate: Gate::default(),
            wiring: sa.wiring,
            attn_scale: sa.scale,
            omega_axis: loss.omega_axis,
            reg_axis: loss.reg_axis,
            ln_eps: sa.eps,
            init: Init::default(),
            pyramid: true,
            pfa: true,
            sa: true,
            scales: Vec::new(),
            epochs: 10,
            batch: 64,
            lr: sched.base,
            lr_step: sched.every,
            lr_factor: sched.factor,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            seed: 0,
            threads: 1,
            task: Task::Zsl,
            ks: vec![3, 5],
            scoring: Scoring::Dot,
        }
    }
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl KeyValue for RunConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "features" => self.features = path(v),
            "vectors" => self.vectors = path(v),
            "split" => self.split = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "m" | "M" => self.m = kv::value(key, v)?,
            "lambda" => self.lambda = kv::value(key, v)?,
            "d_w" => self.d_w = kv::value(key, v)?,
            "reduction" => self.reduction = kv::value(key, v)?,
            "heads" => self.heads = kv::value(key, v)?,
            "ff_dim" => self.ff_dim = kv::value(key, v)?,
            "mapped_channels" => self.mapped_channels = kv::value(key, v)?,
            "gate" => self.gate = v.parse()?,
            "wiring" => self.wiring = v.parse()?,
            "attn_scale" => self.attn_scale = v.parse()?,
            "omega_axis" => self.omega_axis = v.parse()?,
            "reg_axis" => self.reg_axis = v.parse()?,
            "ln_eps" => self.ln_eps = kv::value(key, v)?,
            "init" => self.init = v.parse()?,
            "pyramid" => self.pyramid = kv::flag(key, v)?,
            "pfa" => self.pfa = kv::flag(key, v)?,
            "sa" => self.sa = kv::flag(key, v)?,
            "scales" => self.scales = kv::list(key, v)?,
            "epochs" => self.epochs = kv::value(key, v)?,
            "batch" => self.batch = kv::value(key, v)?,
            "lr" => self.lr = kv::value(key, v)?,
            "lr_step" => self.lr_step = kv::value(key, v)?,
            "lr_factor" => self.lr_factor = kv::value(key, v)?,
            "weight_decay" => self.weight_decay = kv::value(key, v)?,
            "beta1" => self.beta1 = kv::value(key, v)?,
            "beta2" => self.beta2 = kv::value(key, v)?,
            "adam_eps" => self.adam_eps = kv::value(key, v)?,
            "seed" => self.seed = kv::value(key, v)?,
            "threads" => self.threads = kv::value(key, v)?,
            "task" => self.task = v.parse()?,
            "ks" => self.ks = kv::list(key, v)?,
            "scoring" => self.scoring = v.parse()?,
            _ => bail!(Config, "unknown config key `{key}`"),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        let ks: Vec<String> = self.ks.iter().map(ToString::to_string).collect();
        vec![
            ("features", show(&self.features)),
            ("vectors", show(&self.vectors)),
            ("split", show(&self.split)),
            ("checkpoint", show(&self.checkpoint)),
            ("m", self.m.to_string()),
            ("lambda", self.lambda.to_string()),
            ("d_w", self.d_w.to_string()),
            ("reduction", self.reduction.to_string()),
            ("heads", self.heads.to_string()),
            ("ff_dim", self.ff_dim.to_string()),
            ("mapped_channels", self.mapped_channels.to_string()),
            ("gate", self.gate.to_string()),
            ("wiring", self.wiring.to_string()),
            ("attn_scale", self.attn_scale.to_string()),
            ("omega_axis", self.omega_axis.to_string()),
            ("reg_axis", self.reg_axis.to_string()),
            ("ln_eps", self.ln_eps.to_string()),
            ("init", self.init.to_string()),
            ("pyramid", self.pyramid.to_string()),
            ("pfa", self.pfa.to_string()),
            ("sa", self.sa.to_string()),
            ("scales", self.scales.join(",")),
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_step", self.lr_step.to_string()),
            ("lr_factor", self.lr_factor.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("task", self.task.to_string()),
            ("ks", ks.join(",")),
            ("scoring", self.scoring.to_string()),
        ]
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            bail!(Config, "M must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            bail!(Config, "lambda must lie in [0, 1]");
        }
        if self.batch == 0 {
            bail!(Config, "batch must be at least 1");
        }
        if self.d_w == 0 || self.reduction == 0 {
            bail!(Config, "d_w and reduction must be positive");
        }
        if self.sa && (self.heads == 0 || self.d_w % self.heads != 0) {
            bail!(Config, "d_w = {} is not divisible by heads = {}", self.d_w, self.heads);
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_factor > 0.0) {
            bail!(Config, "lr and lr_factor must be positive");
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bail!(Config, "invalid optimizer settings");
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            bail!(Config, "ks must list positive cut-offs");
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            omega_axis: self.omega_axis,
            reg_axis: self.reg_axis,
        }
    }

    pub fn sa_config(&self) -> SaConfig {
        SaConfig {
            heads: self.heads,
            scale: self.attn_scale,
            wiring: self.wiring,
            eps: self.ln_eps,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self) -> StepSchedule {
        StepSchedule {
            base: self.lr,
            every: self.lr_step,
            factor: self.lr_factor,
        }
    }

    pub fn parallelism(&self) -> Parallelism {
        Parallelism::from_threads(self.threads)
    }

    /// Parameter shapes for a fused input of `in_channels` channels.
    pub fn head_shape(&self, in_channels: usize) -> HeadShape {
        let mapped = if self.mapped_channels == 0 {
            in_channels
        } else {
            self.mapped_channels
        };
        HeadShape {
            in_channels,
            mapped_channels: mapped,
            excite_channels: excite_channels(mapped, self.reduction),
            vectors: self.m,
            dim: self.d_w,
            heads: self.heads,
            ff_dim: if self.ff_dim == 0 { 2 * self.d_w } else { self.ff_dim },
            use_pfa: self.pfa,
            use_sa: self.sa,
        }
    }
}
