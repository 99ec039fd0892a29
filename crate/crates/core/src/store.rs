//! Embedding packs: validated, ordered collections of labelled feature vectors.
//!
//! Two on-disk formats are supported:
//!
//! * JSONL: one `{"id", "label", "embedding"}` object per line, optionally
//!   preceded by a `{"dim", "labels"}` header line. Without a header the
//!   dimension is taken from the first record and labels are indexed in order
//!   of first appearance.
//! * Binary: `<stem>.manifest.json` (sorted keys) plus `<stem>.vec`, a
//!   record-major blob of `count * dim` little-endian `f32` values.
//!
//! Vectors are stored as `f32`; all arithmetic elsewhere widens to `f64`.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{KecoError, Result};
use crate::fsio;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub label: String,
    pub vector: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn new(id: impl Into<String>, label: impl Into<String>, vector: Vec<f32>) -> Self {
        Self {
            id: id.into(),
            label: label.into(),
            vector,
        }
    }

    pub fn norm(&self) -> f64 {
        self.vector
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.vector.iter().map(|&x| f64::from(x)).collect()
    }
}

/// Immutable after construction; every constructor validates.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPack {
    dim: usize,
    labels: Vec<String>,
    records: Vec<EmbeddingRecord>,
    label_index: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PackFormat {
    Jsonl,
    Binary,
}

impl std::str::FromStr for PackFormat {
    type Err = KecoError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(PackFormat::Jsonl),
            "binary" | "bin" => Ok(PackFormat::Binary),
            other => Err(KecoError::InvalidConfig(format!(
                "unknown pack format {other:?} (expected jsonl or binary)"
            ))),
        }
    }
}

impl EmbeddingPack {
    pub fn new(dim: usize, labels: Vec<String>, records: Vec<EmbeddingRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(KecoError::Format("pack dimension must be positive".into()));
        }
        let mut label_pos = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if label_pos.insert(l.as_str(), i).is_some() {
                return Err(KecoError::Format(format!("label {l:?} listed twice")));
            }
        }
        let mut seen = HashSet::with_capacity(records.len());
        let mut label_index = Vec::with_capacity(records.len());
        for r in &records {
            validate_record(r, dim)?;
            if !seen.insert(r.id.as_str()) {
                return Err(KecoError::DuplicateId(r.id.clone()));
            }
            let li = *label_pos
                .get(r.label.as_str())
                .ok_or_else(|| KecoError::UnknownRecordLabel {
                    id: r.id.clone(),
                    label: r.label.clone(),
                })?;
            label_index.push(li);
        }
        Ok(Self {
            dim,
            labels,
            records,
            label_index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &EmbeddingRecord {
        &self.records[i]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Dense class index of record `i`.
    pub fn class_of(&self, i: usize) -> usize {
        self.label_index[i]
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Record indices grouped by class index, each group in pack order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.labels.len()];
        for (i, &c) in self.label_index.iter().enumerate() {
            groups[c].push(i);
        }
        groups
    }

    /// New pack over the same label space holding `indices` in the given order.
    pub fn select(&self, indices: &[usize]) -> EmbeddingPack {
        EmbeddingPack {
            dim: self.dim,
            labels: self.labels.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            label_index: indices.iter().map(|&i| self.label_index[i]).collect(),
        }
    }

    /// Partitions the pack into (records with listed ids, remainder), both in pack order.
    pub fn split<'a, I>(&self, ids: I) -> Result<(EmbeddingPack, EmbeddingPack)>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let pos: HashMap<&str, usize> = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect();
        let mut chosen = vec![false; self.records.len()];
        for id in ids {
            let &i = pos
                .get(id)
                .ok_or_else(|| KecoError::UnknownId(id.to_string()))?;
            chosen[i] = true;
        }
        let (a, b): (Vec<usize>, Vec<usize>) = (0..self.records.len()).partition(|&i| chosen[i]);
        Ok((self.select(&a), self.select(&b)))
    }

    /// XXH64 over the binary encoding; identifies the pack in reports.
    pub fn fingerprint(&self) -> u64 {
        let (manifest, blob) = self.encode_binary();
        let mut bytes = manifest.into_bytes();
        bytes.extend_from_slice(&blob);
        fsio::checksum(&bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if is_manifest_path(path) {
            load_binary(path)
        } else {
            load_jsonl(path)
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, format: PackFormat) -> Result<()> {
        let path = path.as_ref();
        match format {
            PackFormat::Jsonl => fsio::atomic_write(path, self.encode_jsonl().as_bytes()),
            PackFormat::Binary => {
                let (manifest_path, blob_path) = binary_paths(path);
                let (manifest, blob) = self.encode_binary();
                fsio::atomic_write(&blob_path, &blob)?;
                fsio::atomic_write(&manifest_path, manifest.as_bytes())
            }
        }
    }

    fn encode_jsonl(&self) -> String {
        let mut out = String::new();
        let header = JsonlHeader {
            dim: self.dim,
            labels: self.labels.clone(),
        };
        out.push_str(&serde_json::to_string(&header).expect("header serializes"));
        out.push('\n');
        for r in &self.records {
            let line = JsonlRecordRef {
                id: &r.id,
                label: &r.label,
                embedding: &r.vector,
            };
            let _ = writeln!(
                out,
                "{}",
                serde_json::to_string(&line).expect("record serializes")
            );
        }
        out
    }

    fn encode_binary(&self) -> (String, Vec<u8>) {
        let manifest = BinaryManifest {
            count: self.records.len(),
            dim: self.dim,
            dtype: "f32le".into(),
            ids: self.records.iter().map(|r| r.id.clone()).collect(),
            label_index: self.label_index.clone(),
            labels: self.labels.clone(),
            version: 1,
        };
        let mut text = serde_json::to_string(&manifest).expect("manifest serializes");
        text.push('\n');
        let mut blob = Vec::with_capacity(self.records.len() * self.dim * 4);
        for r in &self.records {
            for x in &r.vector {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        (text, blob)
    }
}

fn validate_record(r: &EmbeddingRecord, dim: usize) -> Result<()> {
    if r.vector.len() != dim {
        return Err(KecoError::DimensionMismatch {
            id: r.id.clone(),
            expected: dim,
            found: r.vector.len(),
        });
    }
    if r.vector.iter().any(|x| !x.is_finite()) {
        return Err(KecoError::NonFiniteValue(r.id.clone()));
    }
    if r.norm() == 0.0 {
        return Err(KecoError::ZeroNormVector(r.id.clone()));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct JsonlHeader {
    dim: usize,
    labels: Vec<String>,
}

#[derive(Serialize)]
struct JsonlRecordRef<'a> {
    id: &'a str,
    label: &'a str,
    embedding: &'a [f32],
}

#[derive(Deserialize)]
struct JsonlRecord {
    id: String,
    label: String,
    embedding: Vec<f64>,
}

// Field order is alphabetical so the serialized manifest has sorted keys.
#[derive(Serialize, Deserialize)]
struct BinaryManifest {
    count: usize,
    dim: usize,
    dtype: String,
    ids: Vec<String>,
    label_index: Vec<usize>,
    labels: Vec<String>,
    version: u32,
}

const MANIFEST_SUFFIX: &str = ".manifest.json";

fn is_manifest_path(path: &Path) -> bool {
    path.to_string_lossy().ends_with(MANIFEST_SUFFIX)
}

/// `(manifest, blob)` paths for a binary pack given either the stem or the manifest path.
pub fn binary_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s.strip_suffix(MANIFEST_SUFFIX).unwrap_or(&s);
    (
        PathBuf::from(format!("{stem}{MANIFEST_SUFFIX}")),
        PathBuf::from(format!("{stem}.vec")),
    )
}

fn load_jsonl(path: &Path) -> Result<EmbeddingPack> {
    let bytes = fsio::read(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| KecoError::Format(format!("{}: not UTF-8: {e}", path.display())))?;
    parse_jsonl(text)
}

pub(crate) fn parse_jsonl(text: &str) -> Result<EmbeddingPack> {
    let mut header: Option<JsonlHeader> = None;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| KecoError::Format(format!("line {}: {e}", lineno + 1)))?;
        let is_header = value.get("dim").is_some() && value.get("id").is_none();
        if is_header {
            if header.is_some() || !records.is_empty() {
                return Err(KecoError::Format(format!(
                    "line {}: header must be the first line",
                    lineno + 1
                )));
            }
            header = Some(
                serde_json::from_value(value)
                    .map_err(|e| KecoError::Format(format!("header: {e}")))?,
            );
            continue;
        }
        let rec: JsonlRecord = serde_json::from_value(value)
            .map_err(|e| KecoError::Format(format!("line {}: {e}", lineno + 1)))?;
        let vector = rec.embedding.iter().map(|&x| x as f32).collect();
        records.push(EmbeddingRecord::new(rec.id, rec.label, vector));
    }
    let (dim, labels) = match header {
        Some(h) => (h.dim, h.labels),
        None => {
            let dim = records
                .first()
                .map(|r| r.vector.len())
                .ok_or_else(|| KecoError::Format("empty JSONL pack without header".into()))?;
            let mut labels: Vec<String> = Vec::new();
            for r in &records {
                if !labels.contains(&r.label) {
                    labels.push(r.label.clone());
                }
            }
            (dim, labels)
        }
    };
    EmbeddingPack::new(dim, labels, records)
}

fn load_binary(path: &Path) -> Result<EmbeddingPack> {
    let (manifest_path, blob_path) = binary_paths(path);
    let manifest_bytes = fsio::read(&manifest_path)?;
    let manifest: BinaryManifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| KecoError::Format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.version != 1 {
        return Err(KecoError::UnsupportedVersion(manifest.version));
    }
    if manifest.dtype != "f32le" {
        return Err(KecoError::Format(format!(
            "unsupported dtype {:?}",
            manifest.dtype
        )));
    }
    if manifest.ids.len() != manifest.count || manifest.label_index.len() != manifest.count {
        return Err(KecoError::Format(
            "manifest ids/label_index length differs from count".into(),
        ));
    }
    let blob = fsio::read(&blob_path)?;
    let expected = manifest.count * manifest.dim * 4;
    if blob.len() != expected {
        return Err(KecoError::BlobSizeMismatch {
            expected,
            found: blob.len(),
        });
    }
    let mut records = Vec::with_capacity(manifest.count);
    let row_bytes = manifest.dim * 4;
    for (i, id) in manifest.ids.into_iter().enumerate() {
        let li = manifest.label_index[i];
        let label = manifest.labels.get(li).cloned().ok_or_else(|| {
            KecoError::Format(format!("record {id}: label_index {li} out of range"))
        })?;
        let row = &blob[i * row_bytes..(i + 1) * row_bytes];
        let vector = row
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push(EmbeddingRecord::new(id, label, vector));
    }
    EmbeddingPack::new(manifest.dim, manifest.labels, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, label: &str, v: &[f32]) -> EmbeddingRecord {
        EmbeddingRecord::new(id, label, v.to_vec())
    }

    fn labels(ls: &[&str]) -> Vec<String> {
        ls.iter().map(|s| s.to_string()).collect()
    }

    fn five() -> EmbeddingPack {
        let recs = (0..5)
            .map(|i| rec(&format!("r{i}"), if i % 2 == 0 { "a" } else { "b" }, &[1.0, i as f32]))
            .collect();
        EmbeddingPack::new(2, labels(&["a", "b"]), recs).unwrap()
    }

    #[test]
    fn jsonl_two_records_preserves_order() {
        let text = r#"{"id":"x","label":"a","embedding":[1,2,3]}
{"id":"w","label":"b","embedding":[0,0.5,0]}"#;
        let p = parse_jsonl(text).unwrap();
        assert_eq!(p.dim(), 3);
        assert_eq!(p.len(), 2);
        assert_eq!(p.record(0).id, "x");
        assert_eq!(p.record(1).id, "w");
        assert_eq!(p.labels(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn header_label_space_is_enforced() {
        let text = r#"{"dim":2,"labels":["a"]}
{"id":"x","label":"q","embedding":[1,2]}"#;
        match parse_jsonl(text) {
            Err(KecoError::UnknownRecordLabel { id, label }) => {
                assert_eq!(id, "x");
                assert_eq!(label, "q");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ingest_errors_name_the_record() {
        let zero = r#"{"id":"z","label":"a","embedding":[0,0,0]}"#;
        assert!(matches!(parse_jsonl(zero), Err(KecoError::ZeroNormVector(id)) if id == "z"));

        let dims = r#"{"dim":3,"labels":["a"]}
{"id":"d","label":"a","embedding":[1,2]}"#;
        assert!(matches!(
            parse_jsonl(dims),
            Err(KecoError::DimensionMismatch { id, expected: 3, found: 2 }) if id == "d"
        ));

        let inf = r#"{"id":"i","label":"a","embedding":[1e300,1]}"#;
        assert!(matches!(parse_jsonl(inf), Err(KecoError::NonFiniteValue(id)) if id == "i"));

        let dup = r#"{"id":"u","label":"a","embedding":[1]}
{"id":"u","label":"a","embedding":[2]}"#;
        assert!(matches!(parse_jsonl(dup), Err(KecoError::DuplicateId(id)) if id == "u"));

        let nan = EmbeddingPack::new(1, labels(&["a"]), vec![rec("n", "a", &[f32::NAN])]);
        assert!(matches!(nan, Err(KecoError::NonFiniteValue(id)) if id == "n"));
    }

    #[test]
    fn binary_blob_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("p");
        let recs = vec![rec("a0", "a", &[1.0; 500])];
        let p = EmbeddingPack::new(500, labels(&["a"]), recs).unwrap();
        p.save(&stem, PackFormat::Binary).unwrap();
        let (manifest, _) = binary_paths(&stem);
        let text = std::fs::read_to_string(&manifest).unwrap();
        std::fs::write(&manifest, text.replace("\"dim\":500", "\"dim\":512")).unwrap();
        assert!(matches!(
            EmbeddingPack::load(&manifest),
            Err(KecoError::BlobSizeMismatch { expected: 2048, found: 2000 })
        ));
    }

    #[test]
    fn manifest_keys_are_sorted() {
        let (m, _) = five().encode_binary();
        let v: serde_json::Value = serde_json::from_str(&m).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert!(m.starts_with("{\"count\":5,\"dim\":2,\"dtype\":\"f32le\""));
    }

    #[test]
    fn empty_pack_round_trips_in_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let p = EmbeddingPack::new(4, labels(&["a", "b"]), vec![]).unwrap();
        let j = dir.path().join("e.jsonl");
        p.save(&j, PackFormat::Jsonl).unwrap();
        assert_eq!(EmbeddingPack::load(&j).unwrap(), p);
        let b = dir.path().join("e");
        p.save(&b, PackFormat::Binary).unwrap();
        assert_eq!(EmbeddingPack::load(dir.path().join("e.manifest.json")).unwrap(), p);
    }

    #[test]
    fn jsonl_decimal_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = EmbeddingPack::new(2, labels(&["a"]), vec![rec("x", "a", &[0.1, 0.2])]).unwrap();
        let path = dir.path().join("x.jsonl");
        p.save(&path, PackFormat::Jsonl).unwrap();
        let back = EmbeddingPack::load(&path).unwrap();
        assert_eq!(back.record(0).vector, vec![0.1f32, 0.2f32]);
    }

    #[test]
    fn split_partitions_in_pack_order() {
        let p = five();
        let (a, b) = p.split(["r3", "r0"]).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(b.len(), 3);
        assert_eq!(a.record(0).id, "r0");
        assert_eq!(a.record(1).id, "r3");
        let ids: Vec<_> = b.records().iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["r1", "r2", "r4"]);

        let all: Vec<String> = p.records().iter().map(|r| r.id.clone()).collect();
        let (full, empty) = p.split(all.iter().map(String::as_str)).unwrap();
        assert_eq!(full, p);
        assert!(empty.is_empty());

        assert!(matches!(p.split(["nope"]), Err(KecoError::UnknownId(id)) if id == "nope"));
    }
}
