use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::records::FeatureRecord;
use crate::error::{bail, Error, Result};
use crate::kv::{self, KeyValue};
use crate::tensor::Tensor;
use crate::vocab::LabelVocabulary;

/// One pyramid level: `channels × size × size`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleSpec {
    pub name: String,
    pub channels: usize,
    pub size: usize,
}

impl fmt::Display for ScaleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.name, self.channels, self.size)
    }
}

impl FromStr for ScaleSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            [name, c, hw] => Ok(ScaleSpec {
                name: name.to_string(),
                channels: kv::value("scales", c)?,
                size: kv::value("scales", hw)?,
            }),
            _ => bail!(Config, "scale `{s}` is not `name:channels:size`"),
        }
    }
}

/// Parameters of the synthetic multi-label dataset.
///
/// Every class gets an object size in `[0, 1)`; classes below
/// `size_threshold` are minor and only show up on the largest map, the rest
/// are major and only show up on the smallest map. An object covers
/// `extent × extent` cells of the smallest map's grid and carries the same
/// total signal whatever its size, so small objects are locally intense.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seen: usize,
    pub unseen: usize,
    pub dim: usize,
    pub scales: Vec<ScaleSpec>,
    pub train: usize,
    pub test: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub size_threshold: f64,
    pub amplitude: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let scale = |name: &str, size| ScaleSpec {
            name: name.into(),
            channels: 32,
            size,
        };
        SynthSpec {
            seen: 20,
            unseen: 5,
            dim: 8,
            scales: vec![scale("s3", 16), scale("s4", 8), scale("s5", 4)],
            train: 2000,
            test: 500,
            min_objects: 1,
            max_objects: 2,
            size_threshold: 0.5,
            amplitude: 1.0,
            noise: 0.1,
            seed: 7,
        }
    }
}

impl KeyValue for SynthSpec {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seen" => self.seen = kv::value(key, v)?,
            "unseen" => self.unseen = kv::value(key, v)?,
            "dim" | "d_w" => self.dim = kv::value(key, v)?,
            "scales" => self.scales = kv::list(key, v)?,
            "train" => self.train = kv::value(key, v)?,
            "test" => self.test = kv::value(key, v)?,
            "min_objects" => self.min_objects = kv::value(key, v)?,
            "max_objects" => self.max_objects = kv::value(key, v)?,
            "size_threshold" => self.size_threshold = kv::value(key, v)?,
            "amplitude" => self.amplitude = kv::value(key, v)?,
            "noise" => self.noise = kv::value(key, v)?,
            "seed" => self.seed = kv::value(key, v)?,
            _ => bail!(Config, "unknown synthesis key `{key}`"),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        let scales: Vec<String> = self.scales.iter().map(ToString::to_string).collect();
        vec![
            ("seen", self.seen.to_string()),
            ("unseen", self.unseen.to_string()),
            ("dim", self.dim.to_string()),
            ("scales", scales.join(",")),
            ("train", self.train.to_string()),
            ("test", self.test.to_string()),
            ("min_objects", self.min_objects.to_string()),
            ("max_objects", self.max_objects.to_string()),
            ("size_threshold", self.size_threshold.to_string()),
            ("amplitude", self.amplitude.to_string()),
            ("noise", self.noise.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

impl SynthSpec {
    pub fn num_classes(&self) -> usize {
        self.seen + self.unseen
    }

    pub fn validate(&self) -> Result<()> {
        if self.seen == 0 || self.unseen == 0 {
            bail!(Config, "need at least one seen and one unseen class");
        }
        if self.dim == 0 {
            bail!(Config, "dim must be positive");
        }
        if self.scales.is_empty() {
            bail!(Config, "at least one scale is required");
        }
        let min = self.scales.iter().map(|s| s.size).min().unwrap_or(0);
        for (i, s) in self.scales.iter().enumerate() {
            if s.name.is_empty() || s.channels == 0 || s.size == 0 {
                bail!(Config, "scale `{s}` needs a name and positive channels and size");
            }
            if s.size % min != 0 {
                bail!(Config, "scale `{s}` size is not a multiple of the smallest size {min}");
            }
            if self.scales[..i].iter().any(|o| o.name == s.name) {
                bail!(Config, "duplicate scale name `{}`", s.name);
            }
        }
        if self.min_objects == 0 || self.max_objects < self.min_objects {
            bail!(Config, "objects per image must satisfy 1 ≤ min ≤ max");
        }
        if self.max_objects > self.seen {
            bail!(Config, "max_objects exceeds the number of seen classes");
        }
        if !(self.size_threshold > 0.0 && self.size_threshold < 1.0) {
            bail!(Config, "size_threshold must lie in (0, 1)");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.amplitude.is_finite()) {
            bail!(Config, "noise must be finite and non-negative, amplitude finite");
        }
        Ok(())
    }
}

/// Generated records (training images first, then test images) plus the
/// ground truth behind them.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub records: Vec<FeatureRecord>,
    /// Vocabulary with the unseen classes marked.
    pub vocab: LabelVocabulary,
    /// Number of leading training records.
    pub train_len: usize,
    /// Object size of each class.
    pub sizes: Vec<f64>,
    /// Side, in grid cells, of each class's objects.
    pub extents: Vec<usize>,
    /// Side of the smallest map.
    pub grid: usize,
    /// `signatures[class][scale]`: channel pattern the class leaves on that
    /// scale.
    pub signatures: Vec<Vec<Vec<f32>>>,
}

impl SynthDataset {
    pub fn is_minor(&self, class: usize, threshold: f64) -> bool {
        self.sizes[class] < threshold
    }

    /// Factor applied to the signature inside an object's footprint.
    pub fn intensity(&self, class: usize) -> f32 {
        let e = self.extents[class];
        (self.grid * self.grid) as f32 / (e * e) as f32
    }

    pub fn train(&self) -> &[FeatureRecord] {
        &self.records[..self.train_len]
    }

    pub fn test(&self) -> &[FeatureRecord] {
        &self.records[self.train_len..]
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Stratified draws: one size per class, spread evenly over `[0, 1)`.
fn stratified_sizes<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(rng);
    slots
        .into_iter()
        .map(|k| (k as f64 + rng.random::<f64>()) / n as f64)
        .collect()
}

/// Builds a dataset. The output is a pure function of `spec`.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.num_classes();
    let d = spec.dim;

    let mut vectors = Vec::with_capacity(n * d);
    for _ in 0..n {
        let mut v: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        vectors.extend(v.into_iter().map(|x| x as f32));
    }
    let labels: Vec<String> = (0..n).map(|c| format!("class{c:02}")).collect();
    let unseen: Vec<String> = labels[spec.seen..].to_vec();
    let vocab = LabelVocabulary::new(labels, Tensor::new(vec![n, d], vectors)?)?.with_unseen(&unseen)?;

    let mut sizes = stratified_sizes(&mut rng, spec.seen);
    sizes.extend(stratified_sizes(&mut rng, spec.unseen));

    // Signatures are a fixed random linear image of the word vector, so
    // unseen classes are predictable from what the seen ones teach.
    let mut signatures = vec![Vec::with_capacity(spec.scales.len()); n];
    for s in &spec.scales {
        let proj: Vec<f64> = (0..s.channels * d).map(|_| normal(&mut rng)).collect();
        for (c, sig) in signatures.iter_mut().enumerate() {
            let v = vocab.vector(c);
            sig.push(
                (0..s.channels)
                    .map(|ch| {
                        let row = &proj[ch * d..(ch + 1) * d];
                        (row.iter().zip(v).map(|(p, &x)| p * x as f64).sum::<f64>() * spec.amplitude) as f32
                    })
                    .collect::<Vec<f32>>(),
            );
        }
    }

    let smallest = (0..spec.scales.len())
        .min_by_key(|&i| (spec.scales[i].size, i))
        .expect("scales");
    let largest = (0..spec.scales.len())
        .max_by_key(|&i| (spec.scales[i].size, usize::MAX - i))
        .expect("scales");
    let grid = spec.scales[smallest].size;
    let extents: Vec<usize> = sizes
        .iter()
        .map(|&s| ((s * grid as f64).round() as usize).clamp(1, grid))
        .collect();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;

    let mut records = Vec::with_capacity(spec.train + spec.test);
    for i in 0..spec.train + spec.test {
        let is_train = i < spec.train;
        let k = rng.random_range(spec.min_objects..=spec.max_objects);
        let classes: Vec<usize> = if is_train {
            index::sample(&mut rng, spec.seen, k).into_vec()
        } else {
            let first = spec.seen + rng.random_range(0..spec.unseen);
            let rest = (0..n).filter(|&c| c != first).collect::<Vec<_>>();
            let mut cs = vec![first];
            cs.extend(index::sample(&mut rng, rest.len(), k - 1).into_iter().map(|j| rest[j]));
            cs
        };

        let mut maps: Vec<Vec<f32>> = spec
            .scales
            .iter()
            .map(|s| {
                let len = s.channels * s.size * s.size;
                if spec.noise > 0.0 {
                    (0..len).map(|_| noise.sample(&mut rng) as f32).collect()
                } else {
                    vec![0.0; len]
                }
            })
            .collect();

        for &c in &classes {
            let extent = extents[c];
            let gain = (grid * grid) as f32 / (extent * extent) as f32;
            let at = |rng: &mut ChaCha8Rng| rng.random_range(0..=grid - extent);
            let (y0, x0) = (at(&mut rng), at(&mut rng));
            let scale = if sizes[c] < spec.size_threshold {
                largest
            } else {
                smallest
            };
            let s = &spec.scales[scale];
            let f = s.size / grid;
            let sig = &signatures[c][scale];
            let map = &mut maps[scale];
            for (ch, &value) in sig.iter().enumerate() {
                for y in y0 * f..(y0 + extent) * f {
                    for x in x0 * f..(x0 + extent) * f {
                        map[(ch * s.size + y) * s.size + x] += gain * value;
                    }
                }
            }
        }

        let mut positives: Vec<usize> = classes;
        positives.sort_unstable();
        let scales = spec
            .scales
            .iter()
            .zip(maps)
            .map(|(s, m)| Ok((s.name.clone(), Tensor::new(vec![s.channels, s.size, s.size], m)?)))
            .collect::<Result<Vec<_>>>()?;
        let sample_id = if is_train {
            format!("train-{i:05}")
        } else {
            format!("test-{:05}", i - spec.train)
        };
        records.push(FeatureRecord {
            sample_id,
            scales,
            positives: positives.iter().map(|&c| vocab.label(c).to_string()).collect(),
        });
    }

    Ok(SynthDataset {
        records,
        vocab,
        train_len: spec.train,
        sizes,
        extents,
        grid,
        signatures,
    })
}
