//! Label ranking for the zero-shot (unseen only) and generalised (all labels)
//! tasks, and the top-K precision/recall/F1 and mAP evaluation protocol.
//!
//! P/R at K are micro-averaged over samples. mAP is the mean over labels of
//! the average precision of ranking all samples by that label's score. Ties
//! are broken by ascending index everywhere.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::loss;
use crate::par::{self, Parallelism};
use crate::pfa::SemanticMatrix;
use crate::tensor::Tensor;
use crate::vocab::LabelVocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Rank unseen labels only.
    Zsl,
    /// Rank seen and unseen labels together.
    Gzsl,
}

impl Task {
    /// Vocabulary indices that form the task's columns.
    pub fn columns(self, vocab: &LabelVocabulary) -> Vec<usize> {
        match self {
            Task::Zsl => vocab.unseen_indices(),
            Task::Gzsl => (0..vocab.len()).collect(),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Zsl => "zsl",
            Task::Gzsl => "gzsl",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zsl" => Ok(Task::Zsl),
            "gzsl" => Ok(Task::Gzsl),
            other => Err(Error::Config(format!("unknown task `{other}` (expected zsl or gzsl)"))),
        }
    }
}

/// How a semantic matrix scores a label at inference time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Scoring {
    /// `max_m ⟨S_m, v_c⟩`, as in training.
    #[default]
    Dot,
    /// `max_m cos(S_m, v_c)`.
    Cosine,
}

fn unit_rows(t: &Tensor<f32>) -> Tensor<f32> {
    let d = t.shape()[1];
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// `N×|C_task|` score matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMatrix {
    pub task: Task,
    /// Vocabulary index of each column.
    pub labels: Vec<usize>,
    rows: usize,
    scores: Vec<f64>,
}

impl PredictionMatrix {
    pub fn new(task: Task, labels: Vec<usize>, scores: Vec<Vec<f64>>) -> Result<Self> {
        let cols = labels.len();
        if cols == 0 {
            bail!(Data, "task {task} has no labels");
        }
        if let Some(bad) = scores.iter().find(|r| r.len() != cols) {
            bail!(Data, "score row has {} columns, expected {cols}", bad.len());
        }
        if scores.iter().flatten().any(|v| !v.is_finite()) {
            bail!(Data, "non-finite score");
        }
        Ok(PredictionMatrix {
            task,
            labels,
            rows: scores.len(),
            scores: scores.into_iter().flatten().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.scores[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, c: usize) -> f64 {
        self.scores[i * self.cols() + c]
    }

    /// Applies `f` to every score.
    pub fn map_scores(&self, f: impl Fn(f64) -> f64) -> Self {
        PredictionMatrix {
            scores: self.scores.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }
}

/// Scores of the task's labels for one semantic matrix, in column order.
pub fn predict(s: &SemanticMatrix<f32>, vocab: &LabelVocabulary, task: Task, scoring: Scoring) -> Result<Vec<f64>> {
    let cols = task.columns(vocab);
    if cols.is_empty() {
        bail!(Data, "task {task} has no labels (no unseen labels in the split?)");
    }
    if s.dim() != vocab.dim() {
        bail!(
            Data,
            "semantic dimension {} does not match word vectors ({})",
            s.dim(),
            vocab.dim()
        );
    }
    let rows = vocab.rows::<f32>(&cols);
    let scores = match scoring {
        Scoring::Dot => loss::class_scores(s, &rows)?,
        Scoring::Cosine => loss::class_scores(&SemanticMatrix::new(unit_rows(s.values()))?, &unit_rows(&rows))?,
    };
    Ok(scores.data().iter().map(|&v| v as f64).collect())
}

fn desc_then_index(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Column indices of the `k` highest scores.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(desc_then_index(row));
    idx.truncate(k);
    idx
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf { precision, recall, f1 }
    }
}

fn check_truth(pred: &PredictionMatrix, truth: &[Vec<usize>]) -> Result<()> {
    if truth.len() != pred.rows() {
        bail!(Data, "{} truth rows for {} predictions", truth.len(), pred.rows());
    }
    if truth.iter().flatten().any(|&c| c >= pred.cols()) {
        bail!(Data, "truth label outside the task's columns");
    }
    Ok(())
}

/// Micro-averaged precision, recall and F1 of each sample's top `k` labels.
/// `truth[i]` lists positive columns of sample `i`.
pub fn topk_prf(pred: &PredictionMatrix, truth: &[Vec<usize>], k: usize) -> Result<Prf> {
    check_truth(pred, truth)?;
    if k == 0 || k > pred.cols() {
        bail!(Data, "K = {k} outside 1..={}", pred.cols());
    }
    if pred.rows() == 0 {
        bail!(Data, "no samples");
    }
    let mut hits = 0usize;
    for (i, t) in truth.iter().enumerate() {
        hits += top_k(pred.row(i), k).iter().filter(|c| t.contains(c)).count();
    }
    let relevant: usize = truth.iter().map(Vec::len).sum();
    let p = hits as f64 / (pred.rows() * k) as f64;
    let r = if relevant > 0 {
        hits as f64 / relevant as f64
    } else {
        0.0
    };
    Ok(Prf::new(p, r))
}

/// Average precision of ranking samples by `column`; `None` if no sample is relevant.
pub fn average_precision(pred: &PredictionMatrix, truth: &[Vec<usize>], column: usize) -> Option<f64> {
    let col: Vec<f64> = (0..pred.rows()).map(|i| pred.get(i, column)).collect();
    let relevant = truth.iter().filter(|t| t.contains(&column)).count();
    if relevant == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..pred.rows()).collect();
    order.sort_by(desc_then_index(&col));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if truth[i].contains(&column) {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / relevant as f64)
}

pub fn mean_average_precision(pred: &PredictionMatrix, truth: &[Vec<usize>]) -> Result<f64> {
    map_with(pred, truth, Parallelism::Sequential)
}

fn map_with(pred: &PredictionMatrix, truth: &[Vec<usize>], mode: Parallelism) -> Result<f64> {
    check_truth(pred, truth)?;
    let aps: Vec<f64> = par::map_range(pred.cols(), mode, |c| average_precision(pred, truth, c))
        .into_iter()
        .flatten()
        .collect();
    if aps.is_empty() {
        bail!(Data, "no label has a relevant sample");
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub samples: usize,
    pub at_k: Vec<AtK>,
    pub map: f64,
}

impl MetricsReport {
    /// Every reported number: P, R, F1 per K, then mAP.
    pub fn values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.at_k.iter().flat_map(|m| [m.precision, m.recall, m.f1]).collect();
        v.push(self.map);
        v
    }

    pub fn f1_at(&self, k: usize) -> Option<f64> {
        self.at_k.iter().find(|m| m.k == k).map(|m| m.f1)
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "task {} ({} samples)", self.task, self.samples)?;
        writeln!(f, "{:>4} {:>9} {:>9} {:>9}", "K", "P", "R", "F1")?;
        for m in &self.at_k {
            writeln!(f, "{:>4} {:>9.4} {:>9.4} {:>9.4}", m.k, m.precision, m.recall, m.f1)?;
        }
        write!(f, "mAP {:.4}", self.map)
    }
}

pub fn evaluate(
    pred: &PredictionMatrix,
    truth: &[Vec<usize>],
    ks: &[usize],
    mode: Parallelism,
) -> Result<MetricsReport> {
    let at_k = ks
        .iter()
        .map(|&k| {
            topk_prf(pred, truth, k).map(|p| AtK {
                k,
                precision: p.precision,
                recall: p.recall,
                f1: p.f1,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        task: pred.task,
        samples: pred.rows(),
        at_k,
        map: map_with(pred, truth, mode)?,
    })
}
