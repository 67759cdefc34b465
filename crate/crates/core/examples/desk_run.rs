//! Trains and evaluates on a synthetic dataset.
//!
//! `cargo run --release --example desk_run -- [key=value ...]` where keys are
//! run-config keys, or `synth.<key>` for the dataset spec.

use std::time::Instant;

use mlzsl::config::RunConfig;
use mlzsl::data::{synth_generate, SynthSpec};
use mlzsl::kv::KeyValue;
use mlzsl::metrics::Task;
use mlzsl::train::{partition, prepare, Model};

fn main() -> mlzsl::Result<()> {
    let mut spec = SynthSpec::default();
    let mut cfg = RunConfig {
        d_w: spec.dim,
        batch: 32,
        lr: 3e-3,
        weight_decay: 0.0,
        threads: 0,
        ..Default::default()
    };
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        match k.strip_prefix("synth.") {
            Some(k) => spec.set(k, v)?,
            None => cfg.set(k, v)?,
        }
    }
    let t0 = Instant::now();
    let ds = synth_generate(&spec)?;
    let data = prepare(&ds.records, &ds.vocab, &cfg)?;
    let (train_idx, eval_idx) = partition(&data, &ds.vocab);
    let (train, test) = (data.subset(&train_idx), data.subset(&eval_idx));
    let mut model = Model::init(&cfg, data.in_channels().unwrap_or(1))?;
    model.train(&train, &ds.vocab, |e, l| {
        println!("epoch {e} loss {l:.5} ({:.1}s)", t0.elapsed().as_secs_f64())
    })?;
    for task in [Task::Zsl, Task::Gzsl] {
        println!("{}", model.evaluate(&test, &ds.vocab, task, cfg.parallelism())?);
    }
    let seen_vocab = ds.vocab.clone().with_unseen(&[])?;
    let fit = model.evaluate(&train, &seen_vocab, Task::Gzsl, cfg.parallelism())?;
    println!("train mAP {:.4}", fit.map);
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
