//! Class scoring, the weighted pairwise ranking loss and the variance
//! regulariser.
//!
//! Per sample the objective is `ω·(1−λ)·L_rank + λ·L_reg`, averaged over the
//! batch. A class is scored by its best-matching semantic vector,
//! `max_m ⟨S_m, v_c⟩`.

use crate::error::TensorError;
use crate::graph::{Graph, NodeId};
use crate::pfa::SemanticMatrix;
use crate::tensor::{self, Scalar, Tensor};
use crate::vocab::LabelVocabulary;

type Result<T> = std::result::Result<T, TensorError>;

/// Axis along which a variance is taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum VarianceAxis {
    /// Per dimension, across the vectors.
    #[default]
    AcrossVectors,
    /// Per vector, across its dimensions.
    WithinVector,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub omega_axis: VarianceAxis,
    pub reg_axis: VarianceAxis,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.4,
            omega_axis: VarianceAxis::AcrossVectors,
            reg_axis: VarianceAxis::AcrossVectors,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(TensorError::invalid(
                "total_loss",
                format!("lambda must lie in [0, 1], got {}", self.lambda),
            ));
        }
        Ok(())
    }
}

/// Training target of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTarget {
    /// Positive columns of the scored label set.
    pub positives: Vec<usize>,
    /// Negative columns (complement of `positives` in the scored set).
    pub negatives: Vec<usize>,
    /// Diversity weight `ω`.
    pub omega: f64,
}

impl SampleTarget {
    /// Target over the seen labels of `vocab`; `positives` are vocabulary
    /// indices. Unseen positives are ignored.
    pub fn from_vocab(vocab: &LabelVocabulary, positives: &[usize], axis: VarianceAxis) -> Self {
        let seen = vocab.seen_indices();
        let mut cols: Vec<usize> = seen
            .iter()
            .enumerate()
            .filter(|(_, v)| positives.contains(v))
            .map(|(c, _)| c)
            .collect();
        cols.sort_unstable();
        let negatives = (0..seen.len()).filter(|c| !cols.contains(c)).collect();
        let pos_vocab: Vec<usize> = cols.iter().map(|&c| seen[c]).collect();
        let omega = if pos_vocab.is_empty() {
            1.0
        } else {
            diversity_weight(&vocab.rows::<f64>(&pos_vocab), axis)
        };
        SampleTarget {
            positives: cols,
            negatives,
            omega,
        }
    }
}

/// `score[c] = max_m ⟨S_m, v_c⟩` with `vt = [v_1 … v_n]` as a `d_w×n` node.
pub fn class_scores_node<T: Scalar>(g: &mut Graph<T>, s: NodeId, vt: NodeId) -> Result<NodeId> {
    let (_, d) = g.value(s).dims2("class_scores")?;
    let (dv, _) = g.value(vt).dims2("class_scores")?;
    if d != dv {
        return Err(TensorError::mismatch(
            "class_scores",
            g.value(s).shape(),
            g.value(vt).shape(),
        ));
    }
    let dots = g.matmul(s, vt)?;
    g.col_max(dots)
}

/// `μ[j,k] = score(n_j) − score(p_k)`.
pub fn rank_margins_node<T: Scalar>(
    g: &mut Graph<T>,
    scores: NodeId,
    positives: &[usize],
    negatives: &[usize],
) -> Result<NodeId> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(TensorError::invalid(
            "rank_margins",
            "positive and negative sets must be nonempty",
        ));
    }
    if positives.iter().any(|p| negatives.contains(p)) {
        return Err(TensorError::invalid(
            "rank_margins",
            "positive and negative sets overlap",
        ));
    }
    let n = g.gather(scores, negatives)?;
    let p = g.gather(scores, positives)?;
    g.pairwise_diff(n, p)
}

/// `β·Σ softplus(μ)` with `β = 1/(|pos|·|neg|)`.
pub fn rank_loss_node<T: Scalar>(g: &mut Graph<T>, mu: NodeId) -> Result<NodeId> {
    let beta = T::one() / T::from_usize(g.value(mu).len()).unwrap();
    let sp = g.softplus(mu)?;
    let total = g.sum(sp)?;
    g.scale(total, beta)
}

/// L1 norm of the variance vector of `S`.
pub fn reg_loss_node<T: Scalar>(g: &mut Graph<T>, s: NodeId, axis: VarianceAxis) -> Result<NodeId> {
    let var = match axis {
        VarianceAxis::AcrossVectors => g.col_var(s)?,
        VarianceAxis::WithinVector => {
            let st = g.transpose(s)?;
            g.col_var(st)?
        }
    };
    let a = g.abs(var)?;
    g.sum(a)
}

/// `ω = 1 + mean of the population variances` of the positive word vectors
/// (`k×d_w`). With [`VarianceAxis::AcrossVectors`] the variance is taken per
/// dimension and averaged over dimensions; with `WithinVector` it is taken per
/// vector and averaged over vectors.
pub fn diversity_weight<T: Scalar>(positives: &Tensor<T>, axis: VarianceAxis) -> f64 {
    let (k, d) = positives.dims2("diversity_weight").expect("matrix");
    let data: Vec<f64> = positives.data().iter().map(|v| v.as_f64()).collect();
    let var = match axis {
        VarianceAxis::AcrossVectors => crate::graph::col_var_values(&data, k, d),
        VarianceAxis::WithinVector => {
            let t: Vec<f64> = (0..d * k).map(|i| data[(i % k) * d + i / k]).collect();
            crate::graph::col_var_values(&t, d, k)
        }
    };
    1.0 + var.iter().sum::<f64>() / var.len() as f64
}

/// `ω·(1−λ)·L_rank + λ·L_reg` for one sample. Samples without positives or
/// without negatives contribute only the regulariser.
pub fn sample_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    s: NodeId,
    vt: NodeId,
    target: &SampleTarget,
    cfg: &LossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let reg = reg_loss_node(g, s, cfg.reg_axis)?;
    let reg = g.scale(reg, T::lit(cfg.lambda))?;
    if target.positives.is_empty() || target.negatives.is_empty() {
        return Ok(reg);
    }
    let scores = class_scores_node(g, s, vt)?;
    let mu = rank_margins_node(g, scores, &target.positives, &target.negatives)?;
    let rank = rank_loss_node(g, mu)?;
    let rank = g.scale(rank, T::lit(target.omega * (1.0 - cfg.lambda)))?;
    g.add(rank, reg)
}

/// Batch mean of [`sample_loss_node`].
pub fn total_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    batch: &[(NodeId, &SampleTarget)],
    vt: NodeId,
    cfg: &LossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(TensorError::invalid("total_loss", "empty batch"));
    }
    let mut acc: Option<NodeId> = None;
    for (s, target) in batch {
        let l = sample_loss_node(g, *s, vt, target, cfg)?;
        acc = Some(match acc {
            Some(a) => g.add(a, l)?,
            None => l,
        });
    }
    g.scale(acc.expect("nonempty"), T::one() / T::from_usize(batch.len()).unwrap())
}

/// Scores of every row of `vectors` (`n×d_w`) against `s`.
pub fn class_scores<T: Scalar>(s: &SemanticMatrix<T>, vectors: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let si = g.constant(s.values().clone());
    let vt = g.constant(tensor::transpose(vectors)?);
    let out = class_scores_node(&mut g, si, vt)?;
    Ok(g.value(out).clone())
}

pub fn rank_margins<T: Scalar>(scores: &Tensor<T>, positives: &[usize], negatives: &[usize]) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let si = g.constant(scores.clone());
    let out = rank_margins_node(&mut g, si, positives, negatives)?;
    Ok(g.value(out).clone())
}

pub fn rank_loss<T: Scalar>(mu: &Tensor<T>) -> Result<T> {
    let mut g = Graph::new();
    let m = g.constant(mu.clone());
    let out = rank_loss_node(&mut g, m)?;
    Ok(g.value(out).item())
}

pub fn reg_loss<T: Scalar>(s: &SemanticMatrix<T>, axis: VarianceAxis) -> Result<T> {
    let mut g = Graph::new();
    let si = g.constant(s.values().clone());
    let out = reg_loss_node(&mut g, si, axis)?;
    Ok(g.value(out).item())
}

/// Batch objective over `(S_i, positives_i)` pairs, positives given as
/// vocabulary indices; only seen labels are scored.
pub fn total_loss<T: Scalar>(
    batch: &[(SemanticMatrix<T>, Vec<usize>)],
    vocab: &LabelVocabulary,
    cfg: &LossConfig,
) -> Result<T> {
    cfg.validate()?;
    let mut g = Graph::new();
    let vt = g.constant(vocab.columns::<T>(&vocab.seen_indices()));
    let targets: Vec<SampleTarget> = batch
        .iter()
        .map(|(_, p)| SampleTarget::from_vocab(vocab, p, cfg.omega_axis))
        .collect();
    let ids: Vec<NodeId> = batch.iter().map(|(s, _)| g.constant(s.values().clone())).collect();
    let pairs: Vec<(NodeId, &SampleTarget)> = ids.into_iter().zip(&targets).collect();
    let out = total_loss_node(&mut g, &pairs, vt, cfg)?;
    Ok(g.value(out).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rt(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn sm(t: Tensor<f64>) -> SemanticMatrix<f64> {
        SemanticMatrix::new(t).unwrap()
    }

    #[test]
    fn scores_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = rt(&mut rng, &[4, 3]);
        let zero = sm(Tensor::zeros(vec![2, 3]).unwrap());
        assert!(class_scores(&zero, &v).unwrap().data().iter().all(|&x| x == 0.0));

        let one = rt(&mut rng, &[1, 3]);
        let s1 = class_scores(&sm(one.clone()), &v).unwrap();
        for c in 0..4 {
            let dot: f64 = (0..3).map(|d| one.at(&[0, d]) * v.at(&[c, d])).sum();
            assert_eq!(s1.data()[c], dot);
        }

        let s = rt(&mut rng, &[3, 3]);
        let got = class_scores(&sm(s.clone()), &v).unwrap();
        for c in 0..4 {
            let best = (0..3)
                .map(|m| (0..3).map(|d| s.at(&[m, d]) * v.at(&[c, d])).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((got.data()[c] - best).abs() < 1e-6);
        }
        assert!(class_scores(&sm(rt(&mut rng, &[2, 2])), &v).is_err());
    }

    #[test]
    fn margins_cases() {
        let eq = Tensor::full(vec![4], 0.3).unwrap();
        assert!(rank_margins(&eq, &[0], &[1, 2])
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let s = Tensor::new(vec![2], vec![2.0, 1.0]).unwrap();
        assert_eq!(rank_margins(&s, &[0], &[1]).unwrap().data(), &[-1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sc = rt(&mut rng, &[5]);
        let (pos, neg) = ([0, 2, 4], [1, 3]);
        let mu = rank_margins(&sc, &pos, &neg).unwrap();
        assert_eq!(mu.shape(), &[2, 3]);
        for (j, &n) in neg.iter().enumerate() {
            for (k, &p) in pos.iter().enumerate() {
                assert_eq!(mu.at(&[j, k]), sc.data()[n] - sc.data()[p]);
            }
        }
        assert!(rank_margins(&sc, &[], &[1]).is_err());
        assert!(rank_margins(&sc, &[1], &[]).is_err());
    }

    #[test]
    fn rank_loss_cases() {
        let z = Tensor::<f64>::zeros(vec![1, 1]).unwrap();
        assert!((rank_loss(&z).unwrap() - 2f64.ln()).abs() < 1e-12);
        let neg = Tensor::<f64>::full(vec![1, 1], -40.0).unwrap();
        assert!(rank_loss(&neg).unwrap() < 1e-12);
        let pos = Tensor::<f64>::full(vec![1, 1], 40.0).unwrap();
        assert!((rank_loss(&pos).unwrap() - 40.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mu = rt(&mut rng, &[2, 3]).map(|v| v * 4.0).unwrap();
        let direct: f64 = mu.data().iter().map(|m| (1.0 + m.exp()).ln()).sum::<f64>() / 6.0;
        assert!((rank_loss(&mu).unwrap() - direct).abs() < 1e-9);
    }

    #[test]
    fn diversity_weight_cases() {
        let one = Tensor::new(vec![1, 3], vec![0.2, 0.5, -1.0]).unwrap();
        assert_eq!(diversity_weight(&one, VarianceAxis::AcrossVectors), 1.0);
        let same = Tensor::new(vec![2, 2], vec![0.3, 0.4, 0.3, 0.4]).unwrap();
        assert_eq!(diversity_weight(&same, VarianceAxis::AcrossVectors), 1.0);
        let ortho = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((diversity_weight(&ortho, VarianceAxis::AcrossVectors) - 1.25).abs() < 1e-15);
        // each vector has within-vector variance 0.25
        assert!((diversity_weight(&ortho, VarianceAxis::WithinVector) - 1.25).abs() < 1e-15);
    }

    #[test]
    fn reg_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let single = sm(rt(&mut rng, &[1, 4]));
        assert_eq!(reg_loss(&single, VarianceAxis::AcrossVectors).unwrap(), 0.0);
        let row = rt(&mut rng, &[1, 4]);
        let same = sm(Tensor::from_fn(vec![3, 4], |i| row.data()[i % 4]).unwrap());
        assert!(reg_loss(&same, VarianceAxis::AcrossVectors).unwrap().abs() < 1e-15);
        let two = sm(Tensor::new(vec![2, 2], vec![0.0, 0.0, 2.0, 0.0]).unwrap());
        assert_eq!(reg_loss(&two, VarianceAxis::AcrossVectors).unwrap(), 1.0);
        // rows (0,0) and (2,0): within-row variances 0 and 1
        assert_eq!(reg_loss(&two, VarianceAxis::WithinVector).unwrap(), 1.0);
    }

    fn vocab() -> LabelVocabulary {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = Tensor::from_fn(vec![5, 3], |_| rng.random_range(-1.0f32..1.0)).unwrap();
        let names = (0..5).map(|i| format!("l{i}")).collect();
        LabelVocabulary::new(names, v)
            .unwrap()
            .with_unseen(&["l4".into()])
            .unwrap()
    }

    /// Independent f64 evaluation of the batch objective.
    fn oracle(batch: &[(Tensor<f64>, Vec<usize>)], vocab: &LabelVocabulary, lambda: f64) -> f64 {
        let seen = vocab.seen_indices();
        let d = vocab.dim();
        let mut total = 0.0;
        for (s, pos) in batch {
            let m = s.shape()[0];
            let score = |c: usize| {
                (0..m)
                    .map(|r| (0..d).map(|k| s.at(&[r, k]) * vocab.vector(c)[k] as f64).sum::<f64>())
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            let mut reg = 0.0;
            for k in 0..d {
                let mean = (0..m).map(|r| s.at(&[r, k])).sum::<f64>() / m as f64;
                reg += (0..m).map(|r| (s.at(&[r, k]) - mean).powi(2)).sum::<f64>() / m as f64;
            }
            let p: Vec<usize> = seen.iter().copied().filter(|c| pos.contains(c)).collect();
            let n: Vec<usize> = seen.iter().copied().filter(|c| !pos.contains(c)).collect();
            let mut term = lambda * reg;
            if !p.is_empty() && !n.is_empty() {
                let mut rank = 0.0;
                for &nj in &n {
                    for &pk in &p {
                        rank += (1.0 + (score(nj) - score(pk)).exp()).ln();
                    }
                }
                rank /= (p.len() * n.len()) as f64;
                let mut omega = 0.0;
                for k in 0..d {
                    let vals: Vec<f64> = p.iter().map(|&c| vocab.vector(c)[k] as f64).collect();
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    omega += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                }
                omega = 1.0 + omega / d as f64;
                term += omega * (1.0 - lambda) * rank;
            }
            total += term;
        }
        total / batch.len() as f64
    }

    #[test]
    fn total_loss_matches_oracle() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = vec![(rt(&mut rng, &[2, 3]), vec![0, 2]), (rt(&mut rng, &[2, 3]), vec![1, 4])];
        let cfg = LossConfig::default();
        let sb: Vec<_> = batch.iter().map(|(s, p)| (sm(s.clone()), p.clone())).collect();
        let got = total_loss(&sb, &v, &cfg).unwrap();
        assert!((got - oracle(&batch, &v, 0.4)).abs() < 1e-8);

        // a sample with every seen label positive has no negatives
        let full = vec![(rt(&mut rng, &[2, 3]), vec![0, 1, 2, 3])];
        let sf: Vec<_> = full.iter().map(|(s, p)| (sm(s.clone()), p.clone())).collect();
        assert!((total_loss(&sf, &v, &cfg).unwrap() - oracle(&full, &v, 0.4)).abs() < 1e-10);

        let bad = LossConfig { lambda: 1.5, ..cfg };
        assert!(total_loss(&sb, &v, &bad).is_err());
    }

    #[test]
    fn lambda_one_is_regulariser_only() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s0 = rt(&mut rng, &[3, 3]);
        let cfg = LossConfig {
            lambda: 1.0,
            ..Default::default()
        };
        let target = SampleTarget::from_vocab(&v, &[1], cfg.omega_axis);

        let mut g = Graph::<f64>::new();
        let s = g.param(s0.clone());
        let vt = g.constant(v.columns(&v.seen_indices()));
        let l = sample_loss_node(&mut g, s, vt, &target, &cfg).unwrap();
        let full = g.backward(l).unwrap().get_or_zeros(s);

        let mut h = Graph::<f64>::new();
        let s2 = h.param(s0);
        let r = reg_loss_node(&mut h, s2, cfg.reg_axis).unwrap();
        let reg_only = h.backward(r).unwrap().get_or_zeros(s2);
        assert_eq!(full.data(), reg_only.data());
    }

    proptest! {
        #[test]
        fn ranking_properties(seed in 0u64..1000, bump in 0.01f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sc = rt(&mut rng, &[6]);
            let (pos, neg) = (vec![0, 3], vec![1, 2, 4, 5]);
            let base = rank_loss(&rank_margins(&sc, &pos, &neg).unwrap()).unwrap();
            prop_assert!(base >= 0.0);

            let mut up = sc.clone();
            up.data_mut()[3] += bump;
            let l_up = rank_loss(&rank_margins(&up, &pos, &neg).unwrap()).unwrap();
            prop_assert!(l_up <= base);

            let mut upn = sc.clone();
            upn.data_mut()[2] += bump;
            let l_neg = rank_loss(&rank_margins(&upn, &pos, &neg).unwrap()).unwrap();
            prop_assert!(l_neg >= base);

            // duplicating every pair leaves the normalised loss unchanged
            let mu = rank_margins(&sc, &pos, &neg).unwrap();
            let doubled = Tensor::new(vec![2 * mu.shape()[0], mu.shape()[1]], [mu.data(), mu.data()].concat()).unwrap();
            prop_assert!((rank_loss(&doubled).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn reg_invariances(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = rt(&mut rng, &[4, 3]);
            let shift = rt(&mut rng, &[3]);
            let base = reg_loss(&sm(s.clone()), VarianceAxis::AcrossVectors).unwrap();
            let perm = [2, 0, 3, 1];
            let ps = Tensor::from_fn(vec![4, 3], |i| s.at(&[perm[i / 3], i % 3])).unwrap();
            let shifted = Tensor::from_fn(vec![4, 3], |i| s.data()[i] + shift.data()[i % 3]).unwrap();
            prop_assert!((reg_loss(&sm(ps), VarianceAxis::AcrossVectors).unwrap() - base).abs() < 1e-12);
            prop_assert!((reg_loss(&sm(shifted), VarianceAxis::AcrossVectors).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn omega_at_least_one(seed in 0u64..1000, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = rt(&mut rng, &[k, 4]);
            prop_assert!(diversity_weight(&v, VarianceAxis::AcrossVectors) >= 1.0);
            prop_assert!(diversity_weight(&v, VarianceAxis::WithinVector) >= 1.0);
        }
    }
}
