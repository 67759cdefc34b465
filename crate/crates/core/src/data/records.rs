use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{bail, Error, Result};
use crate::pyramid::FeaturePyramid;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MZFT0001";

/// One sample: named `C×H×W` maps and its positive label names.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub sample_id: String,
    pub scales: Vec<(String, Tensor<f32>)>,
    pub positives: Vec<String>,
}

impl FeatureRecord {
    pub fn pyramid(&self) -> Result<FeaturePyramid<f32>> {
        Ok(FeaturePyramid::new(self.scales.clone())?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Format(format!("string of {} bytes is too long", s.len())))?;
    out.write_u16::<LE>(len)?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode_records(records: &[FeatureRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let n = u32::try_from(records.len()).map_err(|_| Error::Format("too many records".into()))?;
    out.write_u32::<LE>(n)?;
    for r in records {
        put_str(&mut out, &r.sample_id)?;
        let ns = u8::try_from(r.scales.len()).map_err(|_| Error::Format("more than 255 scales".into()))?;
        out.write_u8(ns)?;
        for (name, t) in &r.scales {
            let (c, h, w) = t.dims3("encode_records")?;
            put_str(&mut out, name)?;
            for d in [c, h, w] {
                out.write_u32::<LE>(d as u32)?;
            }
            for &v in t.data() {
                out.write_f32::<LE>(v)?;
            }
        }
        let np = u16::try_from(r.positives.len()).map_err(|_| Error::Format("too many positives".into()))?;
        out.write_u16::<LE>(np)?;
        for p in &r.positives {
            put_str(&mut out, p)?;
        }
    }
    Ok(out)
}

fn truncated<E>(_: E) -> Error {
    Error::Format("truncated stream".into())
}

fn get_str(cur: &mut Cursor<&[u8]>) -> Result<String> {
    let len = cur.read_u16::<LE>().map_err(truncated)? as usize;
    let mut buf = vec![0u8; len];
    cur.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| Error::Format("invalid UTF-8 string".into()))
}

/// Parses a container without cross-record checks. Values may be any `f32`
/// bit pattern.
pub fn decode_records_raw(bytes: &[u8]) -> Result<Vec<FeatureRecord>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        bail!(Format, "bad magic (not an MZFT0001 file)");
    }
    let mut cur = Cursor::new(&bytes[MAGIC.len()..]);
    let n = cur.read_u32::<LE>().map_err(truncated)? as usize;
    let mut records = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let sample_id = get_str(&mut cur)?;
        let ns = cur.read_u8().map_err(truncated)? as usize;
        let mut scales = Vec::with_capacity(ns);
        for _ in 0..ns {
            let name = get_str(&mut cur)?;
            let mut dims = [0usize; 3];
            for d in &mut dims {
                *d = cur.read_u32::<LE>().map_err(truncated)? as usize;
            }
            if dims.contains(&0) {
                bail!(Format, "scale `{name}` of `{sample_id}` has a zero extent {dims:?}");
            }
            let len = dims.iter().product::<usize>();
            let remaining = bytes.len() - MAGIC.len() - cur.position() as usize;
            if len.checked_mul(4).is_none_or(|b| b > remaining) {
                bail!(Format, "truncated stream");
            }
            let mut data = vec![0f32; len];
            cur.read_f32_into::<LE>(&mut data).map_err(truncated)?;
            scales.push((name, Tensor::from_parts_unchecked(dims.to_vec(), data)));
        }
        let np = cur.read_u16::<LE>().map_err(truncated)? as usize;
        let positives = (0..np).map(|_| get_str(&mut cur)).collect::<Result<_>>()?;
        records.push(FeatureRecord {
            sample_id,
            scales,
            positives,
        });
    }
    if (cur.position() as usize) != bytes.len() - MAGIC.len() {
        bail!(Format, "trailing bytes after {n} records");
    }
    Ok(records)
}

fn check_dataset(records: &[FeatureRecord]) -> Result<()> {
    let mut ids = HashSet::new();
    let layout = |r: &FeatureRecord| -> Vec<(String, Vec<usize>)> {
        r.scales.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect()
    };
    let first = records.first().map(layout);
    for r in records {
        if !ids.insert(r.sample_id.as_str()) {
            bail!(Data, "duplicate sample id `{}`", r.sample_id);
        }
        if Some(layout(r)) != first {
            bail!(
                Data,
                "record `{}` has a different scale layout than the first record",
                r.sample_id
            );
        }
        if r.scales.iter().any(|(_, t)| !t.is_finite()) {
            bail!(Data, "record `{}` contains non-finite values", r.sample_id);
        }
        let mut seen = HashMap::new();
        for p in &r.positives {
            if seen.insert(p.as_str(), ()).is_some() {
                bail!(Data, "record `{}` lists `{p}` twice", r.sample_id);
            }
        }
    }
    if let Some(r) = records.first() {
        r.pyramid()?;
    }
    Ok(())
}

/// Parses a dataset container: unique ids, identical scale layout, finite
/// values.
pub fn decode_records(bytes: &[u8]) -> Result<Vec<FeatureRecord>> {
    let records = decode_records_raw(bytes)?;
    check_dataset(&records)?;
    Ok(records)
}

pub fn load_feature_records(path: impl AsRef<Path>) -> Result<Vec<FeatureRecord>> {
    decode_records(&fs::read(path)?)
}

pub fn load_records_raw(path: impl AsRef<Path>) -> Result<Vec<FeatureRecord>> {
    decode_records_raw(&fs::read(path)?)
}

pub fn save_feature_records(path: impl AsRef<Path>, records: &[FeatureRecord]) -> Result<()> {
    fs::write(path, encode_records(records)?)?;
    Ok(())
}
