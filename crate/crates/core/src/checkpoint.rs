//! Checkpoints reuse the feature-record container: one record for the
//! configuration, one per tensor set (parameters and both Adam moments) and
//! one for the optimiser counters.

use std::path::Path;

use crate::config::RunConfig;
use crate::data::{decode_records_raw, encode_records, FeatureRecord};
use crate::error::{bail, Error, Result};
use crate::kv::{self, KeyValue};
use crate::model::Head;
use crate::optim::OptimState;
use crate::params::Params;
use crate::tensor::Tensor;
use crate::train::Model;

const CONFIG: &str = "config";
const PARAMS: &str = "params";
const MOMENT1: &str = "adam_m";
const MOMENT2: &str = "adam_v";
const OPTIM: &str = "optim";

fn as_chw(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = t.shape();
    let shape = match s.len() {
        1 => vec![1, 1, s[0]],
        2 => vec![1, s[0], s[1]],
        3 => s.to_vec(),
        _ => bail!(Format, "cannot store rank-{} tensor", s.len()),
    };
    Ok(t.clone().reshape(shape)?)
}

fn tensor_record(id: &str, p: &Params<f32>) -> Result<FeatureRecord> {
    Ok(FeatureRecord {
        sample_id: id.into(),
        scales: p
            .entries()
            .into_iter()
            .map(|(n, t)| Ok((n.to_string(), as_chw(t)?)))
            .collect::<Result<_>>()?,
        positives: Vec::new(),
    })
}

fn kv_record(id: &str, pairs: Vec<(&str, String)>) -> FeatureRecord {
    FeatureRecord {
        sample_id: id.into(),
        scales: Vec::new(),
        positives: pairs.into_iter().map(|(k, v)| format!("{k}={v}")).collect(),
    }
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let mut cfg = model.config.pairs();
    cfg.push(("in_channels", model.head.shape.in_channels.to_string()));
    let records = vec![
        kv_record(CONFIG, cfg),
        tensor_record(PARAMS, &model.params)?,
        tensor_record(MOMENT1, &model.state.m)?,
        tensor_record(MOMENT2, &model.state.v)?,
        kv_record(
            OPTIM,
            vec![
                ("step", model.state.step.to_string()),
                ("lr", model.state.lr.to_string()),
            ],
        ),
    ];
    encode_records(&records)
}

fn read_kv(r: &FeatureRecord) -> Result<Vec<(String, String)>> {
    r.positives
        .iter()
        .map(|line| match line.split_once('=') {
            Some((k, v)) => Ok((k.to_string(), v.to_string())),
            None => Err(Error::Format(format!("bad checkpoint entry `{line}`"))),
        })
        .collect()
}

fn read_tensors(r: &FeatureRecord, head: &Head) -> Result<Params<f32>> {
    let want = Params::<f32>::expected_shapes(&head.shape);
    let names: Vec<&str> = want.entries().into_iter().map(|(n, _)| n).collect();
    if r.scales.len() != names.len() || r.scales.iter().zip(&names).any(|((a, _), b)| a != b) {
        bail!(
            Format,
            "checkpoint tensors in `{}` do not match the configured head",
            r.sample_id
        );
    }
    let mut it = r.scales.iter();
    want.try_map(|shape| {
        let (_, t) = it.next().expect("count checked");
        if t.len() != shape.iter().product::<usize>() {
            bail!(
                Format,
                "checkpoint tensor has {} values, expected shape {shape:?}",
                t.len()
            );
        }
        Ok(t.clone().reshape(shape.clone())?)
    })
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let records = decode_records_raw(bytes)?;
    let find = |id: &str| {
        records
            .iter()
            .find(|r| r.sample_id == id)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks `{id}`")))
    };
    let mut config = RunConfig::default();
    let mut in_channels = None;
    for (k, v) in read_kv(find(CONFIG)?)? {
        if k == "in_channels" {
            in_channels = Some(kv::value::<usize>(&k, &v)?);
        } else {
            config.set(&k, &v)?;
        }
    }
    let in_channels = in_channels.ok_or_else(|| Error::Format("checkpoint lacks in_channels".into()))?;
    let head = Head::from_config(&config, in_channels)?;
    let params = read_tensors(find(PARAMS)?, &head)?;
    let m = read_tensors(find(MOMENT1)?, &head)?;
    let v = read_tensors(find(MOMENT2)?, &head)?;
    let mut state = OptimState {
        step: 0,
        lr: config.lr,
        m,
        v,
    };
    for (k, val) in read_kv(find(OPTIM)?)? {
        match k.as_str() {
            "step" => state.step = kv::value(&k, &val)?,
            "lr" => state.lr = kv::value(&k, &val)?,
            _ => bail!(Format, "unknown optimiser entry `{k}`"),
        }
    }
    Ok(Model {
        config,
        head,
        params,
        state,
    })
}

pub fn save(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    std::fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let mut cfg = RunConfig {
            d_w: 8,
            m: 2,
            heads: 2,
            seed: 9,
            ..Default::default()
        };
        for (pfa, sa) in [(true, true), (false, true), (true, false)] {
            cfg.pfa = pfa;
            cfg.sa = sa;
            let mut model = Model::init(&cfg, 6).unwrap();
            model.state.step = 17;
            model.state.lr = 3.3e-7;
            model.state.m.projection.b.data_mut()[1] = 0.25;
            let bytes = encode(&model).unwrap();
            let back = decode(&bytes).unwrap();
            assert_eq!(back, model);
            assert_eq!(encode(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"MZFT0001\0\0\0\0").is_err());
        assert!(decode(b"nonsense").is_err());
    }
}
