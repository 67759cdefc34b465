use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mlzsl::check::ToyProblem;
use mlzsl::checkpoint;
use mlzsl::config::RunConfig;
use mlzsl::data::{
    load_feature_records, load_split, load_word_vectors, save_feature_records, save_split, save_word_vectors,
    synth_generate, FeatureRecord, SynthSpec,
};
use mlzsl::kv::{self, KeyValue};
use mlzsl::metrics::{top_k, Task};
use mlzsl::model::CheckOptions;
use mlzsl::train::{partition, prepare, Model};
use mlzsl::vocab::LabelVocabulary;
use mlzsl::Error;

use crate::ConfigArgs;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_CHECK: u8 = 3;

pub const FEATURES_FILE: &str = "features.mzft";
pub const VECTORS_FILE: &str = "vectors.txt";
pub const SPLIT_FILE: &str = "split.txt";

/// Keys that change the network; they must agree with a checkpoint.
const MODEL_KEYS: &[&str] = &[
    "m",
    "d_w",
    "reduction",
    "heads",
    "ff_dim",
    "mapped_channels",
    "gate",
    "wiring",
    "attn_scale",
    "ln_eps",
    "pyramid",
    "pfa",
    "sa",
    "scales",
];

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn split_set(item: &str) -> Result<(String, String)> {
    match item.split_once('=') {
        Some((k, v)) => Ok((k.trim().to_string(), v.trim().to_string())),
        None => Err(CliError::usage(format!("--set expects KEY=VALUE, got `{item}`"))),
    }
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

/// Every override in precedence order.
fn overrides(args: &ConfigArgs) -> Result<Vec<(String, String)>> {
    let mut out = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            kv::parse_pairs(&text)?
        }
        None => Vec::new(),
    };
    for s in &args.set {
        out.push(split_set(s)?);
    }
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    };
    push("features", args.features.as_deref().map(show));
    push("vectors", args.vectors.as_deref().map(show));
    push("split", args.split.as_deref().map(show));
    push("seed", args.seed.map(|s| s.to_string()));
    push("threads", args.threads.map(|t| t.to_string()));
    Ok(out)
}

fn apply(cfg: &mut RunConfig, pairs: &[(String, String)]) -> Result<()> {
    for (k, v) in pairs {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(())
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::usage(format!("no `{key}` path given (set it in the config or pass --{key})")))
}

fn load_data(cfg: &RunConfig) -> Result<(Vec<FeatureRecord>, LabelVocabulary)> {
    let records = load_feature_records(required(&cfg.features, "features")?)?;
    let vocab = load_word_vectors(required(&cfg.vectors, "vectors")?)?;
    let vocab = match &cfg.split {
        Some(p) => load_split(p, vocab)?,
        None => vocab,
    };
    Ok((records, vocab))
}

pub fn synth(spec_path: Option<&Path>, out: &Path, set: &[String]) -> Result<()> {
    let mut spec = SynthSpec::default();
    if let Some(p) = spec_path {
        let text = fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
        spec.apply_text(&text)?;
    }
    for s in set {
        let (k, v) = split_set(s)?;
        spec.set(&k, &v)?;
    }
    let ds = synth_generate(&spec)?;
    fs::create_dir_all(out)?;
    save_feature_records(out.join(FEATURES_FILE), &ds.records)?;
    save_word_vectors(out.join(VECTORS_FILE), &ds.vocab)?;
    save_split(out.join(SPLIT_FILE), &ds.vocab)?;
    println!(
        "wrote {} records ({} train, {} test), {} labels ({} unseen) to {}",
        ds.records.len(),
        ds.train_len,
        ds.records.len() - ds.train_len,
        ds.vocab.len(),
        ds.vocab.unseen_indices().len(),
        out.display()
    );
    Ok(())
}

pub fn train(
    args: &ConfigArgs,
    checkpoint_path: Option<PathBuf>,
    epochs: Option<usize>,
    [no_pyramid, no_pfa, no_sa]: [bool; 3],
    log: Option<&Path>,
) -> Result<()> {
    let mut pairs = overrides(args)?;
    if let Some(p) = &checkpoint_path {
        pairs.push(("checkpoint".into(), show(p)));
    }
    if let Some(e) = epochs {
        pairs.push(("epochs".into(), e.to_string()));
    }
    for (off, key) in [(no_pyramid, "pyramid"), (no_pfa, "pfa"), (no_sa, "sa")] {
        if off {
            pairs.push((key.into(), "false".into()));
        }
    }
    let mut cfg = RunConfig::default();
    apply(&mut cfg, &pairs)?;
    let out = required(&cfg.checkpoint, "checkpoint")?.to_path_buf();

    let (records, vocab) = load_data(&cfg)?;
    let data = prepare(&records, &vocab, &cfg)?;
    let (train_idx, _) = partition(&data, &vocab);
    let train_set = data.subset(&train_idx);
    let in_channels = train_set
        .in_channels()
        .ok_or_else(|| CliError::data("no training records (every record has an unseen label)"))?;
    let mut model = Model::init(&cfg, in_channels)?;
    let mut lines = String::new();
    model.train(&train_set, &vocab, |epoch, loss| {
        let line = format!("epoch {epoch} loss {loss}");
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
    })?;
    if let Some(p) = log {
        fs::write(p, &lines)?;
    }
    checkpoint::save(&out, &model)?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

/// Loads a checkpoint and applies overrides that do not change the network.
fn load_model(args: &ConfigArgs, path: &Path, task: Option<&str>) -> Result<Model> {
    let mut model = checkpoint::load(path)?;
    let mut pairs = overrides(args)?;
    if let Some(t) = task {
        pairs.push(("task".into(), t.to_string()));
    }
    let before = model.config.pairs();
    apply(&mut model.config, &pairs)?;
    let after = model.config.pairs();
    for ((k, old), (_, new)) in before.iter().zip(&after) {
        if MODEL_KEYS.contains(k) && old != new {
            return Err(CliError::data(format!(
                "checkpoint was trained with {k} = {old}, but the configuration asks for {new}"
            )));
        }
    }
    Ok(model)
}

/// Records to score: those with an unseen label, or all of them when the
/// split is empty and the task allows it.
fn eval_records(model: &Model, records: &[FeatureRecord], vocab: &LabelVocabulary) -> Result<mlzsl::train::Prepared> {
    let task = model.config.task;
    if task == Task::Zsl && vocab.unseen_indices().is_empty() {
        return Err(CliError::data("task zsl needs unseen labels, but the split is empty"));
    }
    let data = prepare(records, vocab, &model.config)?;
    let (_, eval_idx) = partition(&data, vocab);
    if eval_idx.is_empty() {
        if task == Task::Zsl {
            return Err(CliError::data("no records carry unseen labels"));
        }
        return Ok(data);
    }
    Ok(data.subset(&eval_idx))
}

pub fn eval(args: &ConfigArgs, ckpt: &Path, task: Option<&str>, report: Option<&Path>) -> Result<()> {
    let model = load_model(args, ckpt, task)?;
    let (records, vocab) = load_data(&model.config)?;
    let data = eval_records(&model, &records, &vocab)?;
    let metrics = model.evaluate(&data, &vocab, model.config.task, model.config.parallelism())?;
    println!("{metrics}");
    if let Some(p) = report {
        let config: serde_json::Map<String, serde_json::Value> = model
            .config
            .pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), serde_json::Value::String(v)))
            .collect();
        let doc = serde_json::json!({ "config": config, "metrics": metrics });
        let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::data(e.to_string()))?;
        fs::write(p, text + "\n")?;
    }
    Ok(())
}

pub fn predict(args: &ConfigArgs, ckpt: &Path, task: Option<&str>, top: usize, out: Option<&Path>) -> Result<()> {
    if top == 0 {
        return Err(CliError::usage("--top must be at least 1"));
    }
    let model = load_model(args, ckpt, task)?;
    let (records, vocab) = load_data(&model.config)?;
    let task = model.config.task;
    if task == Task::Zsl && vocab.unseen_indices().is_empty() {
        return Err(CliError::data("task zsl needs unseen labels, but the split is empty"));
    }
    let data = prepare(&records, &vocab, &model.config)?;
    let pred = model.predict(&data, &vocab, task, model.config.parallelism())?;
    let mut text = String::new();
    for (i, id) in data.ids.iter().enumerate() {
        let labels: Vec<&str> = top_k(pred.row(i), top)
            .into_iter()
            .map(|c| vocab.label(pred.labels[c]))
            .collect();
        writeln!(text, "{id}\t{}", labels.join(" ")).expect("string write");
    }
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn gradcheck(args: &ConfigArgs, samples: usize, coords: usize, perturb: f64) -> Result<()> {
    let mut cfg = RunConfig::default();
    apply(&mut cfg, &overrides(args)?)?;
    let toy = ToyProblem::new(&cfg, samples, cfg.seed)?;
    let opts = CheckOptions {
        max_coords: (coords > 0).then_some(coords),
        seed: cfg.seed,
        perturb,
    };
    let groups = toy.check(&opts)?;
    let mut ok = true;
    for g in &groups {
        let status = if g.total.passed() { "ok" } else { "FAIL" };
        ok &= g.total.passed();
        println!(
            "{:<11} checked {:>6}  max rel err {:.3e}  {status}",
            g.group, g.total.checked, g.total.max_rel_err
        );
    }
    if ok {
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_CHECK,
            message: "gradient check failed".into(),
        })
    }
}
