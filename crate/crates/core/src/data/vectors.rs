use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{bail, Result};
use crate::tensor::Tensor;
use crate::vocab::LabelVocabulary;

/// Parses `<count> <dim>` followed by one `name v1 … v_dim` line per label.
pub fn parse_word_vectors(text: &str) -> Result<LabelVocabulary> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = match lines.next() {
        Some(h) => h,
        None => bail!(Data, "empty word-vector file"),
    };
    let head: Vec<&str> = header.split_whitespace().collect();
    let (count, dim) = match head.as_slice() {
        [c, d] => match (c.parse::<usize>(), d.parse::<usize>()) {
            (Ok(c), Ok(d)) if c > 0 && d > 0 => (c, d),
            _ => bail!(Data, "bad header `{header}`"),
        },
        _ => bail!(Data, "bad header `{header}` (expected `<count> <dim>`)"),
    };
    let mut labels = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * dim);
    for (no, line) in lines {
        let mut parts = line.split_whitespace();
        let name = parts.next().expect("non-blank line");
        let vals: Vec<&str> = parts.collect();
        if vals.len() != dim {
            bail!(
                Data,
                "line {}: `{name}` has {} values, header says {dim}",
                no + 1,
                vals.len()
            );
        }
        for v in vals {
            match v.parse::<f32>() {
                Ok(x) if x.is_finite() => data.push(x),
                _ => bail!(Data, "line {}: bad value `{v}`", no + 1),
            }
        }
        labels.push(name.to_string());
    }
    if labels.len() != count {
        bail!(Data, "header announces {count} labels, file has {}", labels.len());
    }
    LabelVocabulary::new(labels, Tensor::new(vec![count, dim], data)?)
}

pub fn load_word_vectors(path: impl AsRef<Path>) -> Result<LabelVocabulary> {
    parse_word_vectors(&fs::read_to_string(path)?)
}

/// Shortest decimal form that parses back to the same `f32`.
pub fn write_word_vectors(vocab: &LabelVocabulary) -> String {
    let mut out = format!("{} {}\n", vocab.len(), vocab.dim());
    for (i, name) in vocab.labels().iter().enumerate() {
        out.push_str(name);
        for v in vocab.vector(i) {
            write!(out, " {v}").expect("string write");
        }
        out.push('\n');
    }
    out
}

pub fn save_word_vectors(path: impl AsRef<Path>, vocab: &LabelVocabulary) -> Result<()> {
    fs::write(path, write_word_vectors(vocab))?;
    Ok(())
}
