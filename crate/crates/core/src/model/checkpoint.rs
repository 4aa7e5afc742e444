//! Checkpoint files.
//!
//! Layout: the 8 magic bytes `CBAMNET1`, a newline, a UTF-8 manifest of
//! `key value` lines closed by a line `end`, then every array as raw
//! little-endian floats in manifest order. Each `stats` entry stores the
//! running mean followed by the running variance.

use std::collections::BTreeSet;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{CheckpointError, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 8] = b"CBAMNET1";
pub const FORMAT_VERSION: u32 = 1;

/// Storage width of the arrays. Only `F64` round-trips bit-exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    fn tag(self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        }
    }

    fn width(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

/// Training metadata stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub phase: u8,
    pub epoch: usize,
    pub val_accuracy: f64,
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: &Path, precision: Precision) -> Result<()> {
    fsutil::write_atomic(path, &encode(model, meta, precision))
}

fn encode(model: &Model, meta: &CheckpointMeta, precision: Precision) -> Vec<u8> {
    let mut manifest = format!("version {FORMAT_VERSION}\ndtype {}\n", precision.tag());
    for (k, v) in model.config.to_fields() {
        manifest += &format!("config {k} {v}\n");
    }
    manifest += &format!(
        "meta seed {}\nmeta phase {}\nmeta epoch {}\nmeta val_accuracy {:?}\n",
        meta.seed, meta.phase, meta.epoch, meta.val_accuracy
    );
    let mut arrays: Vec<&[f64]> = Vec::new();
    for p in model.params.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        manifest += &format!("param {} {}\n", p.name, dims.join(","));
        arrays.push(p.value.data());
    }
    for layer in &model.layers {
        if let Some(s) = &layer.stats {
            manifest += &format!("stats {} {}\n", layer.name, s.mean.len());
            arrays.push(&s.mean);
            arrays.push(&s.var);
        }
    }
    manifest += "end\n";

    let mut out = Vec::with_capacity(manifest.len() + 16);
    out.extend_from_slice(MAGIC);
    out.push(b'\n');
    out.extend_from_slice(manifest.as_bytes());
    for a in arrays {
        for &v in a {
            match precision {
                Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    out
}

struct Manifest {
    precision: Precision,
    config: Vec<(String, String)>,
    meta: CheckpointMeta,
    params: Vec<(String, Vec<usize>)>,
    stats: Vec<(String, usize)>,
    body_offset: usize,
}

fn malformed(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(msg.into())
}

fn parse_manifest(bytes: &[u8]) -> Result<Manifest, CheckpointError> {
    if bytes.len() < MAGIC.len() + 1 {
        return if MAGIC.starts_with(bytes) {
            Err(CheckpointError::Truncated("file ends inside the magic bytes".into()))
        } else {
            Err(CheckpointError::BadMagic)
        };
    }
    if &bytes[..8] != MAGIC || bytes[8] != b'\n' {
        return Err(CheckpointError::BadMagic);
    }
    let mut pos = 9;
    let mut m = Manifest {
        precision: Precision::F64,
        config: Vec::new(),
        meta: CheckpointMeta::default(),
        params: Vec::new(),
        stats: Vec::new(),
        body_offset: 0,
    };
    let mut first = true;
    loop {
        let Some(len) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(CheckpointError::Truncated("manifest has no `end` line".into()));
        };
        let line = std::str::from_utf8(&bytes[pos..pos + len]).map_err(|_| malformed("manifest is not UTF-8"))?;
        pos += len + 1;
        if line == "end" {
            break;
        }
        let mut parts = line.splitn(3, ' ');
        let (key, a, b) = (parts.next().unwrap_or(""), parts.next(), parts.next());
        if first {
            if key != "version" {
                return Err(malformed("first manifest line must be `version`"));
            }
            let found: u32 = a.and_then(|v| v.parse().ok()).ok_or_else(|| malformed("bad version line"))?;
            if found != FORMAT_VERSION {
                return Err(CheckpointError::VersionMismatch { found, expected: FORMAT_VERSION });
            }
            first = false;
            continue;
        }
        let bad = || malformed(format!("bad manifest line `{line}`"));
        match (key, a, b) {
            ("dtype", Some("f64"), None) => m.precision = Precision::F64,
            ("dtype", Some("f32"), None) => m.precision = Precision::F32,
            ("config", Some(k), v) => m.config.push((k.to_owned(), v.unwrap_or("").to_owned())),
            ("meta", Some(k), Some(v)) => match k {
                "seed" => m.meta.seed = v.parse().map_err(|_| bad())?,
                "phase" => m.meta.phase = v.parse().map_err(|_| bad())?,
                "epoch" => m.meta.epoch = v.parse().map_err(|_| bad())?,
                "val_accuracy" => m.meta.val_accuracy = v.parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            },
            ("param", Some(name), Some(dims)) => {
                let dims = dims
                    .split(',')
                    .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(bad)?;
                m.params.push((name.to_owned(), dims));
            }
            ("stats", Some(name), Some(c)) => m.stats.push((name.to_owned(), c.parse().map_err(|_| bad())?)),
            _ => return Err(bad()),
        }
    }
    if first {
        return Err(malformed("manifest has no version line"));
    }
    m.body_offset = pos;
    Ok(m)
}

fn name_diff<'a>(file: impl Iterator<Item = &'a str>, model: impl Iterator<Item = &'a str>) -> Option<String> {
    let file: BTreeSet<&str> = file.collect();
    let model: BTreeSet<&str> = model.collect();
    if file == model {
        return None;
    }
    let missing: Vec<_> = model.difference(&file).copied().collect();
    let extra: Vec<_> = file.difference(&model).copied().collect();
    Some(format!("missing {missing:?}, unexpected {extra:?}"))
}

/// Reads a checkpoint, rebuilding the model from its stored config. Every
/// parameter of the returned model is trainable.
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    decode(&fsutil::read(path)?, None)
}

/// Like [`load_checkpoint`], but first requires the stored config to equal
/// `expected`, reporting the first differing field otherwise.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<(Model, CheckpointMeta)> {
    decode(&fsutil::read(path)?, Some(expected))
}

fn decode(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<(Model, CheckpointMeta)> {
    let m = parse_manifest(bytes)?;
    if let Some(exp) = expected {
        for (field, want) in exp.to_fields() {
            let found = m.config.iter().find(|(k, _)| *k == field).map(|(_, v)| v.clone());
            if found.as_ref() != Some(&want) {
                return Err(CheckpointError::ConfigMismatch {
                    field,
                    expected: want,
                    found: found.unwrap_or_else(|| "<absent>".into()),
                }
                .into());
            }
        }
    }
    let config = ModelConfig::from_fields(&m.config).map_err(|e| malformed(e.to_string()))?;
    let mut model = Model::build(&config, 0).map_err(|e| malformed(e.to_string()))?;

    if let Some(d) = name_diff(m.params.iter().map(|(n, _)| n.as_str()), model.params.names()) {
        return Err(CheckpointError::NameSetMismatch(d).into());
    }
    let bn_names = model.layers.iter().filter(|l| l.stats.is_some()).map(|l| l.name.as_str());
    if let Some(d) = name_diff(m.stats.iter().map(|(n, _)| n.as_str()), bn_names) {
        return Err(CheckpointError::NameSetMismatch(format!("batch-norm statistics: {d}")).into());
    }

    let width = m.precision.width();
    let total: usize = m.params.iter().map(|(_, d)| d.iter().product::<usize>()).sum::<usize>()
        + m.stats.iter().map(|(_, c)| 2 * c).sum::<usize>();
    let body = &bytes[m.body_offset..];
    if body.len() < total * width {
        return Err(CheckpointError::Truncated(format!(
            "manifest declares {} array bytes, file holds {}",
            total * width,
            body.len()
        ))
        .into());
    }
    if body.len() > total * width {
        return Err(malformed(format!("{} trailing bytes after the arrays", body.len() - total * width)).into());
    }
    let mut values = body.chunks_exact(width).map(|c| match m.precision {
        Precision::F64 => f64::from_le_bytes(c.try_into().unwrap()),
        Precision::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
    });
    for (name, dims) in &m.params {
        let p = model.params.get_mut(name).unwrap();
        if p.value.shape() != dims.as_slice() {
            return Err(malformed(format!("`{name}` stored as {dims:?}, model expects {:?}", p.value.shape())).into());
        }
        p.value.data_mut().iter_mut().for_each(|v| *v = values.next().unwrap());
    }
    for (name, c) in &m.stats {
        let layer = model.layers.iter_mut().find(|l| &l.name == name).unwrap();
        let stats = layer.stats.as_mut().unwrap();
        if stats.mean.len() != *c {
            return Err(malformed(format!("`{name}` stores {c} channels, model expects {}", stats.mean.len())).into());
        }
        stats.mean.iter_mut().for_each(|v| *v = values.next().unwrap());
        stats.var.iter_mut().for_each(|v| *v = values.next().unwrap());
    }
    Ok((model, m.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn small() -> ModelConfig {
        let mut c = ModelConfig::dense_tiny();
        c.backbone.input_side = 8;
        c.backbone.blocks.truncate(2);
        c.backbone.blocks[0].layers = 1;
        c.backbone.blocks[1].layers = 1;
        c.head.widths = vec![4, 3];
        c
    }

    fn saved() -> (Vec<u8>, Model) {
        let mut model = Model::build(&small(), 3).unwrap();
        model.layers[1].stats.as_mut().unwrap().mean[0] = 0.125;
        let meta = CheckpointMeta { seed: 3, phase: 2, epoch: 4, val_accuracy: 0.75 };
        (encode(&model, &meta, Precision::F64), model)
    }

    fn checkpoint_err(bytes: &[u8]) -> CheckpointError {
        match decode(bytes, None) {
            Err(Error::Checkpoint(e)) => e,
            other => panic!("expected a checkpoint error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (bytes, model) = saved();
        let (back, meta) = decode(&bytes, None).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.layers, model.layers);
        assert_eq!(meta.epoch, 4);
        assert_eq!(encode(&back, &meta, Precision::F64), bytes);
    }

    #[test]
    fn f32_storage_is_close() {
        let (_, model) = saved();
        let bytes = encode(&model, &CheckpointMeta::default(), Precision::F32);
        let (back, _) = decode(&bytes, None).unwrap();
        for (a, b) in back.params.iter().zip(model.params.iter()) {
            assert!(a.value.max_abs_diff(&b.value) < 1e-6);
        }
    }

    #[test]
    fn distinct_errors() {
        let (bytes, _) = saved();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(checkpoint_err(&bad), CheckpointError::BadMagic));

        let text = String::from_utf8_lossy(&bytes[..200]).replace("version 1", "version 7");
        let mut v7 = text.into_bytes();
        v7.extend_from_slice(&bytes[200..]);
        assert!(matches!(checkpoint_err(&v7), CheckpointError::VersionMismatch { found: 7, expected: 1 }));

        assert!(matches!(checkpoint_err(&bytes[..bytes.len() - 3]), CheckpointError::Truncated(_)));
        assert!(matches!(checkpoint_err(&bytes[..40]), CheckpointError::Truncated(_)));

        let renamed = replace_once(&bytes, b"param head.out.bias", b"param head.out.bjas");
        assert!(matches!(checkpoint_err(&renamed), CheckpointError::NameSetMismatch(_)));
    }

    #[test]
    fn config_mismatch_names_first_field() {
        let (bytes, _) = saved();
        let edited = replace_once(&bytes, b"config backbone.compression 0.5", b"config backbone.compression 0.7");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, &edited).unwrap();
        match load_checkpoint_expecting(&path, &small()) {
            Err(Error::Checkpoint(CheckpointError::ConfigMismatch { field, expected, found })) => {
                assert_eq!((field.as_str(), expected.as_str(), found.as_str()), ("backbone.compression", "0.5", "0.7"));
            }
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    fn replace_once(hay: &[u8], from: &[u8], to: &[u8]) -> Vec<u8> {
        let at = hay.windows(from.len()).position(|w| w == from).expect("pattern present");
        let mut out = hay[..at].to_vec();
        out.extend_from_slice(to);
        out.extend_from_slice(&hay[at + from.len()..]);
        out
    }
}
