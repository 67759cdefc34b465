use std::collections::HashMap;

use crate::error::{bail, Result};
use crate::tensor::{Scalar, Tensor};

/// Label names, their word vectors and the seen/unseen partition.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVocabulary {
    labels: Vec<String>,
    vectors: Tensor<f32>,
    seen: Vec<bool>,
    index: HashMap<String, usize>,
}

impl LabelVocabulary {
    /// All labels start out seen.
    pub fn new(labels: Vec<String>, vectors: Tensor<f32>) -> Result<Self> {
        let (n, _) = vectors.dims2("vocabulary")?;
        if n != labels.len() {
            bail!(Data, "{} labels but {n} vectors", labels.len());
        }
        let mut index = HashMap::with_capacity(n);
        for (i, l) in labels.iter().enumerate() {
            if l.is_empty() || l.chars().any(char::is_whitespace) {
                bail!(Data, "label name {l:?} is empty or contains whitespace");
            }
            if index.insert(l.clone(), i).is_some() {
                bail!(Data, "duplicate label `{l}`");
            }
        }
        Ok(LabelVocabulary {
            labels,
            vectors,
            seen: vec![true; n],
            index,
        })
    }

    /// Marks exactly `unseen` as unseen; every other label is seen.
    pub fn with_unseen(mut self, unseen: &[String]) -> Result<Self> {
        self.seen = vec![true; self.labels.len()];
        for name in unseen {
            match self.index.get(name) {
                Some(&i) => self.seen[i] = false,
                None => bail!(Data, "unknown label `{name}` in split"),
            }
        }
        if !self.seen.iter().any(|&s| s) {
            bail!(Data, "split leaves no seen labels");
        }
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn is_seen(&self, i: usize) -> bool {
        self.seen[i]
    }

    pub fn vectors(&self) -> &Tensor<f32> {
        &self.vectors
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.vectors.data()[i * d..(i + 1) * d]
    }

    pub fn seen_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.seen[i]).collect()
    }

    pub fn unseen_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.seen[i]).collect()
    }

    pub fn unseen_names(&self) -> Vec<String> {
        self.unseen_indices()
            .into_iter()
            .map(|i| self.labels[i].clone())
            .collect()
    }

    /// Word vectors of `indices` stacked as rows, in the requested precision.
    pub fn rows<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let d = self.dim();
        let data = indices
            .iter()
            .flat_map(|&i| self.vector(i).iter().map(|&v| T::lit(v as f64)))
            .collect();
        Tensor::from_parts_unchecked(vec![indices.len().max(1), d], data)
    }

    /// `d_w × |indices|` matrix of word vectors, for scoring with `S·Vᵀ`.
    pub fn columns<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        crate::tensor::transpose(&self.rows::<T>(indices)).expect("matrix")
    }
}
