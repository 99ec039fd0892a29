//! The coreset: a fixed, ordered set of labelled entries, each carrying a
//! mutable key vector, plus its versioned snapshot format.
//!
//! Snapshot layout (all integers little-endian):
//!
//! ```text
//! "KECO" | u32 version (=1) | u32 header_len | header (UTF-8 JSON, sorted keys)
//!        | count*dim f64 keys, entry-major | u64 XXH64(seed 0) of all preceding bytes
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KecoError, Result};
use crate::fsio;
use crate::metric;
use crate::store::EmbeddingPack;

pub const SNAPSHOT_MAGIC: [u8; 4] = *b"KECO";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct CoresetEntry {
    pub source_id: String,
    pub label: String,
    /// Dense index of `label` in the coreset label space.
    pub class: usize,
    pub key: Vec<f64>,
    pub updates_applied: u64,
}

// Keys compare bitwise so determinism checks distinguish 0.0 from -0.0.
impl PartialEq for CoresetEntry {
    fn eq(&self, other: &Self) -> bool {
        self.source_id == other.source_id
            && self.label == other.label
            && self.class == other.class
            && self.updates_applied == other.updates_applied
            && self.key.len() == other.key.len()
            && self
                .key
                .iter()
                .zip(&other.key)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coreset {
    dim: usize,
    labels: Vec<String>,
    entries: Vec<CoresetEntry>,
    per_class_quota: usize,
    class_targets: Vec<usize>,
    config_fingerprint: String,
}

impl Coreset {
    /// Builds a coreset from already-ordered entries. `class_targets[c]` is the
    /// number of entries class `c` was meant to receive; any difference from
    /// the actual count is a recorded shortfall.
    pub fn from_entries(
        dim: usize,
        labels: Vec<String>,
        entries: Vec<CoresetEntry>,
        per_class_quota: usize,
        class_targets: Vec<usize>,
        config_fingerprint: String,
    ) -> Result<Self> {
        if class_targets.len() != labels.len() {
            return Err(KecoError::Internal(
                "class_targets length differs from label count".into(),
            ));
        }
        for e in &entries {
            if e.key.len() != dim {
                return Err(KecoError::DimensionMismatch {
                    id: e.source_id.clone(),
                    expected: dim,
                    found: e.key.len(),
                });
            }
            if e.key.iter().any(|x| !x.is_finite()) {
                return Err(KecoError::NonFiniteValue(e.source_id.clone()));
            }
            if labels.get(e.class) != Some(&e.label) {
                return Err(KecoError::UnknownLabel(e.label.clone()));
            }
        }
        Ok(Self {
            dim,
            labels,
            entries,
            per_class_quota,
            class_targets,
            config_fingerprint,
        })
    }

    /// Every record of `pack` becomes an entry with key = embedding.
    pub fn from_pack(pack: &EmbeddingPack, config_fingerprint: impl Into<String>) -> Self {
        let entries = pack
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| CoresetEntry {
                source_id: r.id.clone(),
                label: r.label.clone(),
                class: pack.class_of(i),
                key: r.to_f64(),
                updates_applied: 0,
            })
            .collect();
        let counts: Vec<usize> = pack.indices_by_class().iter().map(Vec::len).collect();
        Self {
            dim: pack.dim(),
            labels: pack.labels().to_vec(),
            entries,
            per_class_quota: counts.iter().copied().min().unwrap_or(0),
            class_targets: counts,
            config_fingerprint: config_fingerprint.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn entries(&self) -> &[CoresetEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn per_class_quota(&self) -> usize {
        self.per_class_quota
    }

    pub fn class_targets(&self) -> &[usize] {
        &self.class_targets
    }

    pub fn config_fingerprint(&self) -> &str {
        &self.config_fingerprint
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.labels.len()];
        for e in &self.entries {
            counts[e.class] += 1;
        }
        counts
    }

    /// Per-class `target - actual`, nonzero only for classes that ran short.
    pub fn shortfall(&self) -> Vec<(String, usize)> {
        self.class_counts()
            .into_iter()
            .zip(&self.class_targets)
            .zip(&self.labels)
            .filter(|((have, &want), _)| *have < want)
            .map(|((have, want), l)| (l.clone(), want - have))
            .collect()
    }

    pub fn source_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.source_id.as_str())
    }

    /// `C_c`: entries of one class with their global indices, in coreset order.
    pub fn entries_of_class(&self, label: &str) -> Result<Vec<(usize, &CoresetEntry)>> {
        let c = self
            .class_index(label)
            .ok_or_else(|| KecoError::UnknownLabel(label.to_string()))?;
        Ok(self.indices_of_class(c).map(|i| (i, &self.entries[i])).collect())
    }

    pub(crate) fn indices_of_class(&self, class: usize) -> impl Iterator<Item = usize> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.class == class)
            .map(|(i, _)| i)
    }

    /// Write access for the update engine. Only keys and counters may change.
    pub(crate) fn entry_mut(&mut self, i: usize) -> &mut CoresetEntry {
        &mut self.entries[i]
    }

    /// Inserts at the end of the entry's class block so entries stay grouped by
    /// ascending class index and by arrival within a class.
    pub(crate) fn insert_grouped(&mut self, entry: CoresetEntry) -> usize {
        let pos = self
            .entries
            .iter()
            .position(|e| e.class > entry.class)
            .unwrap_or(self.entries.len());
        self.entries.insert(pos, entry);
        pos
    }

    pub(crate) fn set_fingerprint(&mut self, fp: String) {
        self.config_fingerprint = fp;
    }

    pub fn to_snapshot_bytes(&self) -> Vec<u8> {
        let header = SnapshotHeader {
            checksum_algo: fsio::CHECKSUM_ALGO.into(),
            class_targets: self.class_targets.clone(),
            config_fingerprint: self.config_fingerprint.clone(),
            count: self.entries.len(),
            dim: self.dim,
            ids: self.entries.iter().map(|e| e.source_id.clone()).collect(),
            label_index: self.entries.iter().map(|e| e.class).collect(),
            labels: self.labels.clone(),
            per_class_quota: self.per_class_quota,
            updates_applied: self.entries.iter().map(|e| e.updates_applied).collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + self.entries.len() * self.dim * 8);
        out.extend_from_slice(&SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for e in &self.entries {
            for k in &e.key {
                out.extend_from_slice(&k.to_le_bytes());
            }
        }
        let sum = fsio::checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_snapshot_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(KecoError::Truncated("shorter than fixed preamble".into()));
        }
        if bytes[..4] != SNAPSHOT_MAGIC {
            return Err(KecoError::Format("not a keco snapshot (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != SNAPSHOT_VERSION {
            return Err(KecoError::UnsupportedVersion(version));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let verify = || -> Result<()> {
            if bytes.len() < 20 {
                return Err(KecoError::Truncated("missing checksum".into()));
            }
            let (body, tail) = bytes.split_at(bytes.len() - 8);
            let stored = u64::from_le_bytes(tail.try_into().unwrap());
            let computed = fsio::checksum(body);
            if stored != computed {
                return Err(KecoError::ChecksumFailure { stored, computed });
            }
            Ok(())
        };
        let Some(header_bytes) = bytes.get(12..12 + header_len) else {
            verify()?;
            return Err(KecoError::Truncated("header extends past end of file".into()));
        };
        let header: SnapshotHeader = match serde_json::from_slice(header_bytes) {
            Ok(h) => h,
            Err(e) => {
                verify()?;
                return Err(KecoError::Format(format!("snapshot header: {e}")));
            }
        };
        let blob_len = header.count * header.dim * 8;
        let expected = 12 + header_len + blob_len + 8;
        if bytes.len() < expected {
            return Err(KecoError::Truncated(format!(
                "expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        if bytes.len() > expected {
            verify()?;
            return Err(KecoError::Format("trailing bytes after checksum".into()));
        }
        verify()?;
        if header.checksum_algo != fsio::CHECKSUM_ALGO {
            return Err(KecoError::Format(format!(
                "unsupported checksum algorithm {:?}",
                header.checksum_algo
            )));
        }
        if header.ids.len() != header.count
            || header.label_index.len() != header.count
            || header.updates_applied.len() != header.count
        {
            return Err(KecoError::Format(
                "per-entry header arrays disagree with count".into(),
            ));
        }
        let blob = &bytes[12 + header_len..12 + header_len + blob_len];
        let mut entries = Vec::with_capacity(header.count);
        for (i, id) in header.ids.into_iter().enumerate() {
            let class = header.label_index[i];
            let label = header
                .labels
                .get(class)
                .cloned()
                .ok_or_else(|| KecoError::Format(format!("entry {id}: label index {class}")))?;
            let row = &blob[i * header.dim * 8..(i + 1) * header.dim * 8];
            let key = row
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(CoresetEntry {
                source_id: id,
                label,
                class,
                key,
                updates_applied: header.updates_applied[i],
            });
        }
        Coreset::from_entries(
            header.dim,
            header.labels,
            entries,
            header.per_class_quota,
            header.class_targets,
            header.config_fingerprint,
        )
    }

    pub fn save_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        fsio::atomic_write(path.as_ref(), &self.to_snapshot_bytes())
    }

    pub fn load_snapshot(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_snapshot_bytes(&fsio::read(path.as_ref())?)
    }

    pub fn dispersion_stats(&self) -> Result<DispersionStats> {
        if self.entries.is_empty() {
            return Err(KecoError::InvalidConfig(
                "dispersion of an empty coreset".into(),
            ));
        }
        let mut per_class = Vec::new();
        for (c, label) in self.labels.iter().enumerate() {
            let keys: Vec<&[f64]> = self
                .indices_of_class(c)
                .map(|i| self.entries[i].key.as_slice())
                .collect();
            if keys.is_empty() {
                continue;
            }
            per_class.push(ClassDispersion {
                label: label.clone(),
                count: keys.len(),
                mean_pairwise_cosine_distance: mean_pairwise_cosine_distance(&keys),
                mean_distance_to_centroid: mean_distance_to_centroid(&keys),
            });
        }
        let n = per_class.len() as f64;
        Ok(DispersionStats {
            mean_cosine_dispersion: per_class
                .iter()
                .map(|c| c.mean_pairwise_cosine_distance)
                .sum::<f64>()
                / n,
            mean_centroid_distance: per_class
                .iter()
                .map(|c| c.mean_distance_to_centroid)
                .sum::<f64>()
                / n,
            per_class,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    checksum_algo: String,
    class_targets: Vec<usize>,
    config_fingerprint: String,
    count: usize,
    dim: usize,
    ids: Vec<String>,
    label_index: Vec<usize>,
    labels: Vec<String>,
    per_class_quota: usize,
    updates_applied: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDispersion {
    pub label: String,
    pub count: usize,
    pub mean_pairwise_cosine_distance: f64,
    pub mean_distance_to_centroid: f64,
}

/// Intra-class key spread. Overall figures are unweighted means over classes
/// that hold at least one entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionStats {
    pub per_class: Vec<ClassDispersion>,
    pub mean_cosine_dispersion: f64,
    pub mean_centroid_distance: f64,
}

/// Mean of `1 - cos` over unordered pairs; 0 for fewer than two keys. A
/// zero-norm key counts as orthogonal to everything.
fn mean_pairwise_cosine_distance(keys: &[&[f64]]) -> f64 {
    if keys.len() < 2 {
        return 0.0;
    }
    let norms: Vec<f64> = keys.iter().map(|k| metric::norm(k)).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..keys.len() {
        for j in i + 1..keys.len() {
            let sim = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                metric::dot(keys[i], keys[j]) / (norms[i] * norms[j])
            };
            total += 1.0 - sim;
            pairs += 1;
        }
    }
    total / pairs as f64
}

fn mean_distance_to_centroid(keys: &[&[f64]]) -> f64 {
    let dim = keys[0].len();
    let mut centroid = vec![0.0; dim];
    for k in keys {
        for (c, x) in centroid.iter_mut().zip(k.iter()) {
            *c += x;
        }
    }
    let n = keys.len() as f64;
    centroid.iter_mut().for_each(|c| *c /= n);
    keys.iter().map(|k| metric::euclidean(k, &centroid)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, label: &str, class: usize, key: &[f64]) -> CoresetEntry {
        CoresetEntry {
            source_id: id.into(),
            label: label.into(),
            class,
            key: key.to_vec(),
            updates_applied: 0,
        }
    }

    fn aab() -> Coreset {
        Coreset::from_entries(
            2,
            vec!["a".into(), "b".into()],
            vec![
                entry("x", "a", 0, &[1.0, 0.0]),
                entry("y", "a", 0, &[0.0, 1.0]),
                entry("z", "b", 1, &[3.0, 3.0]),
            ],
            1,
            vec![2, 1],
            "test".into(),
        )
        .unwrap()
    }

    #[test]
    fn entries_of_class_filters_with_global_indices() {
        let c = aab();
        let b = c.entries_of_class("b").unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].0, 2);
        assert_eq!(b[0].1.source_id, "z");
        assert_eq!(
            c.entries_of_class("a").unwrap().iter().map(|p| p.0).collect::<Vec<_>>(),
            [0, 1]
        );
        assert!(matches!(c.entries_of_class("zzz"), Err(KecoError::UnknownLabel(l)) if l == "zzz"));
    }

    #[test]
    fn dispersion_examples() {
        let s = aab().dispersion_stats().unwrap();
        // class a: orthogonal keys; class b: single entry
        assert_eq!(s.per_class[0].mean_pairwise_cosine_distance, 1.0);
        assert_eq!(s.per_class[1].mean_pairwise_cosine_distance, 0.0);
        assert_eq!(s.per_class[1].mean_distance_to_centroid, 0.0);
        assert_eq!(s.mean_cosine_dispersion, 0.5);
        let half_diag = (0.5f64 * 0.5 + 0.5 * 0.5).sqrt();
        assert!((s.per_class[0].mean_distance_to_centroid - half_diag).abs() < 1e-15);

        let same = Coreset::from_entries(
            2,
            vec!["a".into()],
            vec![entry("p", "a", 0, &[0.3, 0.4]), entry("q", "a", 0, &[0.3, 0.4])],
            2,
            vec![2],
            String::new(),
        )
        .unwrap();
        let s = same.dispersion_stats().unwrap();
        assert!(s.per_class[0].mean_pairwise_cosine_distance.abs() < 1e-15);
    }

    #[test]
    fn snapshot_round_trip_and_stable_bytes() {
        let mut c = aab();
        c.entry_mut(1).key[0] = 0.1 + 0.2;
        c.entry_mut(1).updates_applied = 7;
        let bytes = c.to_snapshot_bytes();
        let back = Coreset::from_snapshot_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_snapshot_bytes(), bytes);
    }

    #[test]
    fn snapshot_detects_corruption_version_and_truncation() {
        let bytes = aab().to_snapshot_bytes();
        let key_start = bytes.len() - 8 - 3 * 2 * 8;
        let mut tampered = bytes.clone();
        tampered[key_start + 5] ^= 0x01;
        assert!(matches!(
            Coreset::from_snapshot_bytes(&tampered),
            Err(KecoError::ChecksumFailure { .. })
        ));

        let mut v2 = bytes.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Coreset::from_snapshot_bytes(&v2),
            Err(KecoError::UnsupportedVersion(2))
        ));

        let cut = &bytes[..bytes.len() - 20];
        assert!(matches!(
            Coreset::from_snapshot_bytes(cut),
            Err(KecoError::Truncated(_))
        ));

        let mut hdr = bytes.clone();
        hdr[14] ^= 0x20;
        assert!(matches!(
            Coreset::from_snapshot_bytes(&hdr),
            Err(KecoError::ChecksumFailure { .. })
        ));
    }

    #[test]
    fn insert_grouped_keeps_class_blocks() {
        let mut c = Coreset::from_entries(
            1,
            vec!["a".into(), "b".into()],
            vec![],
            2,
            vec![2, 2],
            String::new(),
        )
        .unwrap();
        c.insert_grouped(entry("b0", "b", 1, &[1.0]));
        c.insert_grouped(entry("a0", "a", 0, &[1.0]));
        c.insert_grouped(entry("b1", "b", 1, &[1.0]));
        c.insert_grouped(entry("a1", "a", 0, &[1.0]));
        let ids: Vec<_> = c.source_ids().collect();
        assert_eq!(ids, ["a0", "a1", "b0", "b1"]);
    }
}
