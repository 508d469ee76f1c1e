//! On-disk containers: a JSON header (length-prefixed) followed by one
//! contiguous little-endian binary blob.
//!
//! Two formats share this envelope:
//! * `tpkd-ckpt-v1` — model checkpoints: named f32 parameter/buffer entries
//!   with shapes and byte offsets, plus the architecture spec.
//! * `tpkd-data-v1` — datasets: window/image values as f32 followed by u32
//!   labels.
//!
//! Header and blob lengths are cross-checked before any payload is
//! materialized.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::model::{Model, ModelSpec};

pub const CKPT_FORMAT: &str = "tpkd-ckpt-v1";
pub const DATA_FORMAT: &str = "tpkd-data-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CkptEntryHeader {
    name: String,
    shape: Vec<usize>,
    /// byte offset into the blob
    offset: usize,
    /// element count
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CkptHeader {
    format: String,
    dtype: String,
    model_spec: ModelSpec,
    params: Vec<CkptEntryHeader>,
    blob_len: usize,
}

/// A named f32 tensor snapshot (parameters and batch-norm buffers).
#[derive(Debug, Clone, PartialEq)]
pub struct CkptEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// A serializable model snapshot. Equality of checkpoints is bitwise
/// equality of their f32 entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub entries: Vec<CkptEntry>,
}

fn write_envelope(path: &Path, header_json: &[u8], blob: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(header_json)?;
    w.write_all(blob)?;
    w.flush()?;
    Ok(())
}

fn read_envelope(path: &Path) -> Result<(serde_json::Value, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)
        .map_err(|_| Error::UnexpectedEof("file shorter than header length prefix".into()))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    if header_len == 0 || header_len > 64 << 20 {
        return Err(Error::MalformedHeader(format!(
            "implausible header length {header_len}"
        )));
    }
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)
        .map_err(|_| Error::UnexpectedEof("file truncated inside header".into()))?;
    let value: serde_json::Value = serde_json::from_slice(&header)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    Ok((value, blob))
}

fn check_format(value: &serde_json::Value, expected: &str) -> Result<()> {
    let found = value
        .get("format")
        .and_then(|f| f.as_str())
        .ok_or_else(|| Error::MalformedHeader("missing format tag".into()))?;
    if found != expected {
        return Err(Error::UnknownVersion {
            found: found.to_string(),
            expected: expected.to_string(),
        });
    }
    Ok(())
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.entries.len());
        let mut blob = Vec::new();
        for e in &self.entries {
            entries.push(CkptEntryHeader {
                name: e.name.clone(),
                shape: e.shape.clone(),
                offset: blob.len(),
                len: e.data.len(),
            });
            for v in &e.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = CkptHeader {
            format: CKPT_FORMAT.into(),
            dtype: "f32le".into(),
            model_spec: self.spec.clone(),
            params: entries,
            blob_len: blob.len(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        write_envelope(path, &header_json, &blob)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let (value, blob) = read_envelope(path)?;
        check_format(&value, CKPT_FORMAT)?;
        let header: CkptHeader = serde_json::from_value(value)
            .map_err(|e| Error::MalformedHeader(e.to_string()))?;
        if header.dtype != "f32le" {
            return Err(Error::MalformedHeader(format!(
                "unsupported dtype {}",
                header.dtype
            )));
        }
        if blob.len() != header.blob_len {
            return Err(Error::LengthMismatch(format!(
                "header declares {} blob bytes, file holds {}",
                header.blob_len,
                blob.len()
            )));
        }
        for e in &header.params {
            let numel: usize = e.shape.iter().product();
            if numel != e.len {
                return Err(Error::LengthMismatch(format!(
                    "entry {}: shape {:?} vs len {}",
                    e.name, e.shape, e.len
                )));
            }
            if e.offset + 4 * e.len > blob.len() {
                return Err(Error::LengthMismatch(format!(
                    "entry {} extends past blob end",
                    e.name
                )));
            }
        }
        let mut entries = Vec::with_capacity(header.params.len());
        for e in header.params {
            let mut data = Vec::with_capacity(e.len);
            for i in 0..e.len {
                let off = e.offset + 4 * i;
                data.push(f32::from_le_bytes(blob[off..off + 4].try_into().unwrap()));
            }
            entries.push(CkptEntry {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Checkpoint {
            spec: header.model_spec,
            entries,
        })
    }
}

impl Model {
    /// Snapshot parameters and buffers as f32.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut entries = Vec::new();
        for p in &self.params {
            entries.push(CkptEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: p.data.iter().map(|&v| v as f32).collect(),
            });
        }
        for b in &self.buffers {
            entries.push(CkptEntry {
                name: b.name.clone(),
                shape: vec![b.data.len()],
                data: b.data.iter().map(|&v| v as f32).collect(),
            });
        }
        Checkpoint {
            spec: self.spec.clone(),
            entries,
        }
    }

    /// Rebuild a model from a checkpoint. The architecture is derived from
    /// the stored spec; every entry must match by name and shape.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
        let mut model = Model::init(&ckpt.spec, 0)?;
        let mut mismatches = Vec::new();
        let expected = model.params.len() + model.buffers.len();
        if ckpt.entries.len() != expected {
            mismatches.push(format!(
                "{} entries in checkpoint, model has {expected}",
                ckpt.entries.len()
            ));
        }
        let mut iter = ckpt.entries.iter();
        for p in &mut model.params {
            match iter.next() {
                Some(e) if e.name == p.name && e.shape == p.shape => {
                    p.data = e.data.iter().map(|&v| v as f64).collect();
                }
                Some(e) => mismatches.push(format!(
                    "param {} {:?} vs checkpoint {} {:?}",
                    p.name, p.shape, e.name, e.shape
                )),
                None => mismatches.push(format!("missing entry for {}", p.name)),
            }
        }
        for b in &mut model.buffers {
            match iter.next() {
                Some(e) if e.name == b.name && e.data.len() == b.data.len() => {
                    b.data = e.data.iter().map(|&v| v as f64).collect();
                }
                Some(e) => mismatches.push(format!(
                    "buffer {} vs checkpoint {}",
                    b.name, e.name
                )),
                None => mismatches.push(format!("missing entry for {}", b.name)),
            }
        }
        if !mismatches.is_empty() {
            return Err(Error::ArchMismatch(mismatches.join("; ")));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Model> {
        Model::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Re-exported for dataset serialization below.
pub(crate) fn f32_blob(values: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct DataHeader {
    pub format: String,
    pub kind: String,
    pub classes: usize,
    pub split: String,
    pub count: usize,
    pub channels: usize,
    /// window length for series, resolution for images
    pub dim: usize,
    pub sample_rate_hz: f64,
    pub generator_seed: u64,
    pub values_len: usize,
    pub labels_len: usize,
}

pub(crate) fn write_data_container(path: &Path, header: &DataHeader, values: &[u8], labels: &[u32]) -> Result<()> {
    let mut blob = Vec::with_capacity(values.len() + labels.len() * 4);
    blob.extend_from_slice(values);
    for l in labels {
        blob.extend_from_slice(&l.to_le_bytes());
    }
    let header_json = serde_json::to_vec(header).expect("header serializes");
    write_envelope(path, &header_json, &blob)
}

pub(crate) fn read_data_container(path: &Path) -> Result<(DataHeader, Vec<f32>, Vec<u32>)> {
    let (value, blob) = read_envelope(path)?;
    check_format(&value, DATA_FORMAT)?;
    let header: DataHeader =
        serde_json::from_value(value).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let expected_values = header
        .count
        .checked_mul(header.channels)
        .and_then(|v| v.checked_mul(header.dim_elems()))
        .ok_or_else(|| Error::MalformedHeader("value count overflows".into()))?;
    if header.values_len != expected_values || header.labels_len != header.count {
        return Err(Error::LengthMismatch(format!(
            "header inconsistent: {} values and {} labels declared for {} windows",
            header.values_len, header.labels_len, header.count
        )));
    }
    let expected_bytes = 4 * (header.values_len + header.labels_len);
    if blob.len() != expected_bytes {
        return Err(Error::LengthMismatch(format!(
            "blob holds {} bytes, header implies {expected_bytes}",
            blob.len()
        )));
    }
    let mut values = Vec::with_capacity(header.values_len);
    for i in 0..header.values_len {
        values.push(f32::from_le_bytes(blob[4 * i..4 * i + 4].try_into().unwrap()));
    }
    let base = 4 * header.values_len;
    let mut labels = Vec::with_capacity(header.labels_len);
    for i in 0..header.labels_len {
        let off = base + 4 * i;
        labels.push(u32::from_le_bytes(blob[off..off + 4].try_into().unwrap()));
    }
    Ok((header, values, labels))
}

impl DataHeader {
    pub(crate) fn dim_elems(&self) -> usize {
        match self.kind.as_str() {
            "image" => self.dim * self.dim,
            _ => self.dim,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{InputKind, ModelSpec};

    fn spec() -> ModelSpec {
        ModelSpec {
            input_kind: InputKind::Series1d,
            channels_in: 2,
            stages: 2,
            blocks_per_stage: 1,
            width: vec![3, 4],
            classes: 3,
            batch_norm: true,
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let model = Model::init(&spec(), 5).unwrap();
        let ckpt = model.to_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, loaded);
    }

    #[test]
    fn truncated_checkpoint_reports_eof_or_length() {
        let model = Model::init(&spec(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = path.with_extension("cut");
        std::fs::write(&cut, &bytes[..bytes.len() - 17]).unwrap();
        match Checkpoint::load(&cut) {
            Err(Error::LengthMismatch(_)) | Err(Error::UnexpectedEof(_)) => {}
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_version_is_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        let header = br#"{"format":"tpkd-ckpt-v9"}"#;
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(&(header.len() as u32).to_le_bytes()).unwrap();
        f.write_all(header).unwrap();
        match Checkpoint::load(&path) {
            Err(Error::UnknownVersion { found, .. }) => assert_eq!(found, "tpkd-ckpt-v9"),
            other => panic!("expected UnknownVersion, got {other:?}"),
        }
    }

    #[test]
    fn from_checkpoint_rejects_architecture_mismatch() {
        let model = Model::init(&spec(), 5).unwrap();
        let mut ckpt = model.to_checkpoint();
        ckpt.spec.width = vec![3, 5];
        match Model::from_checkpoint(&ckpt) {
            Err(Error::ArchMismatch(msg)) => assert!(msg.contains("s1"), "{msg}"),
            other => panic!("expected ArchMismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn checkpoint_load_preserves_forward_outputs() {
        use crate::nn::graph::Graph;
        let model = Model::init(&spec(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let a = Model::load(&path).unwrap();
        let b = Model::load(&path).unwrap();
        let g = Graph::inference();
        let batch = g.tensor(vec![2, 2, 8], (0..32).map(|i| (i as f64 * 0.1).sin()).collect());
        let (la, _) = a.forward_eval(&g, &batch, &[]).unwrap();
        let (lb, _) = b.forward_eval(&g, &batch, &[]).unwrap();
        assert_eq!(la.to_vec(), lb.to_vec());
    }
}
