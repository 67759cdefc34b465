//! Random toy problems for finite-difference verification of the whole head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::RunConfig;
use crate::error::Result;
use crate::loss::SampleTarget;
use crate::model::{fused_input, gradient_check, CheckOptions, GroupCheck, Head};
use crate::params::Params;
use crate::pyramid::FeaturePyramid;
use crate::tensor::Tensor;
use crate::vocab::LabelVocabulary;

/// Number of labels in a toy vocabulary.
pub const TOY_LABELS: usize = 6;

/// A 64-bit head with random parameters, a random batch and random label
/// vectors, shaped by a run configuration.
#[derive(Clone, Debug)]
pub struct ToyProblem {
    pub head: Head,
    pub params: Params<f64>,
    pub batch: Vec<(Tensor<f64>, SampleTarget)>,
    /// Seen word vectors as columns.
    pub vt: Tensor<f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

impl ToyProblem {
    /// Two-scale pyramid of `3×4×4` and `3×2×2` maps; every other dimension
    /// comes from `cfg`.
    pub fn new(cfg: &RunConfig, samples: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_w;
        let vecs = Tensor::from_fn(vec![TOY_LABELS, d], |_| normal(&mut rng) as f32 / (d as f32).sqrt())?;
        let names = (0..TOY_LABELS).map(|i| format!("toy{i}")).collect();
        let vocab = LabelVocabulary::new(names, vecs)?;

        let mut batch = Vec::with_capacity(samples);
        for _ in 0..samples.max(1) {
            let mut scale = |c: usize, hw: usize| Tensor::from_fn(vec![c, hw, hw], |_| normal(&mut rng));
            let pyramid = FeaturePyramid::new(vec![("a".into(), scale(3, 4)?), ("b".into(), scale(3, 2)?)])?;
            let x = fused_input(&pyramid, cfg.pyramid, &[])?;
            let k = rng.random_range(1..TOY_LABELS);
            let positives = rand::seq::index::sample(&mut rng, TOY_LABELS, k).into_vec();
            batch.push((x, SampleTarget::from_vocab(&vocab, &positives, cfg.omega_axis)));
        }
        let in_channels = batch[0].0.shape()[0];
        let head = Head::from_config(cfg, in_channels)?;
        let mut params = Params::<f64>::init(&head.shape, cfg.init, &mut rng)?;
        // Non-trivial norm parameters and biases, so their gradients are
        // exercised away from the initial values.
        for (_, t) in params.entries_mut() {
            if t.rank() == 1 {
                for v in t.data_mut() {
                    *v += 0.1 * normal(&mut rng);
                }
            }
        }
        Ok(ToyProblem {
            head,
            params,
            batch,
            vt: vocab.columns(&vocab.seen_indices()),
        })
    }

    pub fn check(&self, opts: &CheckOptions) -> Result<Vec<GroupCheck>> {
        gradient_check(&self.params, &self.batch, &self.vt, &self.head, opts)
    }
}
