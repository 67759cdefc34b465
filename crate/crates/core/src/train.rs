//! Dataset preparation, the mini-batch training loop and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::FeatureRecord;
use crate::error::{bail, Result};
use crate::loss::SampleTarget;
use crate::metrics::{self, MetricsReport, PredictionMatrix, Task};
use crate::model::{fused_input, sample_loss_grad, semantic_matrix, Head};
use crate::optim::{adam_step, OptimState};
use crate::par::{self, Parallelism};
use crate::params::Params;
use crate::tensor::Tensor;
use crate::vocab::LabelVocabulary;

/// Network inputs and label indices for a list of records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Prepared {
    pub ids: Vec<String>,
    pub inputs: Vec<Tensor<f32>>,
    /// Positive vocabulary indices per sample, ascending.
    pub positives: Vec<Vec<usize>>,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn in_channels(&self) -> Option<usize> {
        self.inputs.first().map(|t| t.shape()[0])
    }

    pub fn subset(&self, idx: &[usize]) -> Prepared {
        Prepared {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            positives: idx.iter().map(|&i| self.positives[i].clone()).collect(),
        }
    }
}

pub fn prepare(records: &[FeatureRecord], vocab: &LabelVocabulary, cfg: &RunConfig) -> Result<Prepared> {
    let inputs = par::map_ordered(records, cfg.parallelism(), |r| {
        fused_input(&r.pyramid()?, cfg.pyramid, &cfg.scales)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut positives = Vec::with_capacity(records.len());
    for r in records {
        let mut pos = Vec::with_capacity(r.positives.len());
        for name in &r.positives {
            match vocab.index_of(name) {
                Some(i) => pos.push(i),
                None => bail!(Data, "record `{}` has unknown label `{name}`", r.sample_id),
            }
        }
        pos.sort_unstable();
        positives.push(pos);
    }
    Ok(Prepared {
        ids: records.iter().map(|r| r.sample_id.clone()).collect(),
        inputs,
        positives,
    })
}

/// Splits sample indices into training samples (seen labels only) and
/// evaluation samples (at least one unseen label).
pub fn partition(data: &Prepared, vocab: &LabelVocabulary) -> (Vec<usize>, Vec<usize>) {
    (0..data.len()).partition(|&i| data.positives[i].iter().all(|&c| vocab.is_seen(c)))
}

/// Parameters, optimiser state and the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: RunConfig,
    pub head: Head,
    pub params: Params<f32>,
    pub state: OptimState<f32>,
}

impl Model {
    pub fn init(config: &RunConfig, in_channels: usize) -> Result<Model> {
        config.validate()?;
        let head = Head::from_config(config, in_channels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = Params::init(&head.shape, config.init, &mut rng)?;
        let state = OptimState::new(&params, config.lr);
        Ok(Model {
            config: config.clone(),
            head,
            params,
            state,
        })
    }

    fn check_inputs(&self, data: &Prepared, vocab: &LabelVocabulary) -> Result<()> {
        if vocab.dim() != self.head.shape.dim {
            bail!(
                Data,
                "word vectors have d_w = {}, model expects {}",
                vocab.dim(),
                self.head.shape.dim
            );
        }
        if let Some(c) = data.in_channels() {
            if c != self.head.shape.in_channels {
                bail!(
                    Data,
                    "features have {c} fused channels, model expects {}",
                    self.head.shape.in_channels
                );
            }
        }
        Ok(())
    }

    /// Mean loss over `data` and its gradient. Per-sample gradients are
    /// summed in sample order, so the result does not depend on threading.
    pub fn loss_grad(
        &self,
        data: &Prepared,
        targets: &[SampleTarget],
        vt: &Tensor<f32>,
        mode: Parallelism,
    ) -> Result<(f64, Params<f32>)> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let parts = par::map_ordered(&idx, mode, |&i| {
            sample_loss_grad(&self.params, &data.inputs[i], &targets[i], vt, &self.head)
        });
        let n = data.len() as f32;
        let mut loss = 0.0;
        let mut acc: Option<Params<f32>> = None;
        for part in parts {
            let (l, g) = part?;
            loss += l;
            match &mut acc {
                None => acc = Some(g),
                Some(a) => {
                    for ((_, t), (_, u)) in a.entries_mut().into_iter().zip(g.entries()) {
                        for (x, y) in t.data_mut().iter_mut().zip(u.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let mut grads = match acc {
            Some(a) => a,
            None => bail!(Data, "empty batch"),
        };
        for (_, t) in grads.entries_mut() {
            t.data_mut().iter_mut().for_each(|x| *x /= n);
        }
        Ok((loss / data.len() as f64, grads))
    }

    /// Runs the configured number of epochs over `data`, calling `log` with
    /// the mean sample loss after each epoch. Returns the epoch losses.
    pub fn train(
        &mut self,
        data: &Prepared,
        vocab: &LabelVocabulary,
        mut log: impl FnMut(usize, f64),
    ) -> Result<Vec<f64>> {
        self.check_inputs(data, vocab)?;
        if data.is_empty() {
            bail!(Data, "no training samples");
        }
        let cfg = self.config.clone();
        let mode = cfg.parallelism();
        let vt = vocab.columns::<f32>(&vocab.seen_indices());
        let targets: Vec<SampleTarget> = data
            .positives
            .iter()
            .map(|p| SampleTarget::from_vocab(vocab, p, cfg.omega_axis))
            .collect();
        let adam = cfg.adam();
        let schedule = cfg.schedule();
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
        let mut history = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            self.state.lr = schedule.lr(epoch);
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch) {
                let batch = data.subset(chunk);
                let batch_targets: Vec<SampleTarget> = chunk.iter().map(|&i| targets[i].clone()).collect();
                let (loss, grads) = self.loss_grad(&batch, &batch_targets, &vt, mode)?;
                total += loss * chunk.len() as f64;
                adam_step(&mut self.params, &grads, &mut self.state, &adam)?;
            }
            let mean = total / data.len() as f64;
            log(epoch, mean);
            history.push(mean);
        }
        Ok(history)
    }

    /// Score matrix of `data` for `task`.
    pub fn predict(
        &self,
        data: &Prepared,
        vocab: &LabelVocabulary,
        task: Task,
        mode: Parallelism,
    ) -> Result<PredictionMatrix> {
        self.check_inputs(data, vocab)?;
        let rows = par::map_ordered(&data.inputs, mode, |x| {
            let s = semantic_matrix(&self.params, x, &self.head)?;
            metrics::predict(&s, vocab, task, self.config.scoring)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        PredictionMatrix::new(task, task.columns(vocab), rows)
    }

    pub fn evaluate(
        &self,
        data: &Prepared,
        vocab: &LabelVocabulary,
        task: Task,
        mode: Parallelism,
    ) -> Result<MetricsReport> {
        let pred = self.predict(data, vocab, task, mode)?;
        metrics::evaluate(&pred, &truth_columns(&pred, data), &self.config.ks, mode)
    }
}

/// Ground-truth column indices of each sample within `pred`'s label set.
pub fn truth_columns(pred: &PredictionMatrix, data: &Prepared) -> Vec<Vec<usize>> {
    data.positives
        .iter()
        .map(|pos| {
            pred.labels
                .iter()
                .enumerate()
                .filter(|(_, l)| pos.contains(l))
                .map(|(c, _)| c)
                .collect()
        })
        .collect()
}
