//! Initial coreset construction from a support pack.
//!
//! All strategies are class balanced: class `c` receives `m / j` entries, with
//! the remainder going to the lexicographically first labels when
//! `allow_uneven` is set. Keys start as the sample embeddings. Entries are
//! ordered by class index, then by selection order within a class.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coreset::{Coreset, CoresetEntry};
use crate::error::{KecoError, Result};
use crate::fsio;
use crate::metric;
use crate::rng;
use crate::store::{EmbeddingPack, EmbeddingRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitStrategy {
    Random,
    Kcenter,
    Infoscore,
}

impl std::str::FromStr for InitStrategy {
    type Err = KecoError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "kcenter" | "k-center" => Ok(Self::Kcenter),
            "infoscore" => Ok(Self::Infoscore),
            other => Err(KecoError::InvalidConfig(format!(
                "unknown init strategy {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::Kcenter => "kcenter",
            Self::Infoscore => "infoscore",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KcenterMetric {
    #[default]
    Euclidean,
    CosineDistance,
}

impl std::str::FromStr for KcenterMetric {
    type Err = KecoError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Self::Euclidean),
            "cosine" | "cosine_distance" | "cosine-distance" => Ok(Self::CosineDistance),
            other => Err(KecoError::InvalidConfig(format!(
                "unknown k-center metric {other:?}"
            ))),
        }
    }
}

impl KcenterMetric {
    fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Self::Euclidean => metric::euclidean(a, b),
            Self::CosineDistance => {
                1.0 - metric::dot(a, b) / (metric::norm(a) * metric::norm(b))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub strategy: InitStrategy,
    pub coreset_size: usize,
    pub seed: u64,
    pub allow_uneven: bool,
    pub kcenter_metric: KcenterMetric,
}

impl InitSpec {
    pub fn new(strategy: InitStrategy, coreset_size: usize, seed: u64) -> Self {
        Self {
            strategy,
            coreset_size,
            seed,
            allow_uneven: false,
            kcenter_metric: KcenterMetric::default(),
        }
    }

    pub fn fingerprint(&self) -> String {
        let mut s = format!(
            "init={};m={};seed={};allow_uneven={}",
            self.strategy, self.coreset_size, self.seed, self.allow_uneven
        );
        if self.strategy == InitStrategy::Kcenter {
            s.push_str(&format!(";metric={:?}", self.kcenter_metric));
        }
        s
    }
}

/// Per-class entry targets for a coreset of size `m` over `labels`.
/// Returns `(m / j, targets)`.
pub fn class_targets(labels: &[String], m: usize, allow_uneven: bool) -> Result<(usize, Vec<usize>)> {
    let j = labels.len();
    if j == 0 {
        return Err(KecoError::InvalidConfig("empty label space".into()));
    }
    if m == 0 {
        return Err(KecoError::InvalidConfig("coreset size must be positive".into()));
    }
    if !m.is_multiple_of(j) && !allow_uneven {
        return Err(KecoError::UnevenQuota { size: m, classes: j });
    }
    let base = m / j;
    let mut targets = vec![base; j];
    let mut by_name: Vec<usize> = (0..j).collect();
    by_name.sort_by(|&a, &b| labels[a].cmp(&labels[b]));
    for &c in by_name.iter().take(m % j) {
        targets[c] += 1;
    }
    Ok((base, targets))
}

/// Validates sizes and returns `(quota, targets, per-class pack indices)`.
fn plan(pack: &EmbeddingPack, spec: &InitSpec) -> Result<(usize, Vec<usize>, Vec<Vec<usize>>)> {
    if spec.coreset_size > pack.len() {
        return Err(KecoError::InvalidConfig(format!(
            "coreset size {} exceeds support size {}",
            spec.coreset_size,
            pack.len()
        )));
    }
    let (quota, targets) = class_targets(pack.labels(), spec.coreset_size, spec.allow_uneven)?;
    let groups = pack.indices_by_class();
    if !spec.allow_uneven {
        for (c, g) in groups.iter().enumerate() {
            if g.len() < targets[c] {
                return Err(KecoError::InsufficientClassSamples {
                    label: pack.labels()[c].clone(),
                    available: g.len(),
                    quota: targets[c],
                });
            }
        }
    }
    Ok((quota, targets, groups))
}

fn assemble(
    pack: &EmbeddingPack,
    spec: &InitSpec,
    quota: usize,
    targets: Vec<usize>,
    selected: Vec<Vec<usize>>,
) -> Result<Coreset> {
    let entries = selected
        .into_iter()
        .flatten()
        .map(|i| entry_from_record(pack.record(i), pack.class_of(i)))
        .collect();
    Coreset::from_entries(
        pack.dim(),
        pack.labels().to_vec(),
        entries,
        quota,
        targets,
        spec.fingerprint(),
    )
}

pub(crate) fn entry_from_record(r: &EmbeddingRecord, class: usize) -> CoresetEntry {
    CoresetEntry {
        source_id: r.id.clone(),
        label: r.label.clone(),
        class,
        key: r.to_f64(),
        updates_applied: 0,
    }
}

/// Uniform draw without replacement per class.
pub fn init_random(pack: &EmbeddingPack, spec: &InitSpec) -> Result<Coreset> {
    let (quota, targets, groups) = plan(pack, spec)?;
    let selected = groups
        .iter()
        .enumerate()
        .map(|(c, g)| {
            let take = targets[c].min(g.len());
            let mut r = rng::stream(spec.seed, rng::TAG_INIT_RANDOM, &[c as u64]);
            index::sample(&mut r, g.len(), take)
                .into_iter()
                .map(|k| g[k])
                .collect()
        })
        .collect();
    assemble(pack, spec, quota, targets, selected)
}

/// Per-class farthest-point greedy. The first center of each class is a
/// seeded uniform draw; every later center is the class point whose minimum
/// distance to the chosen centers is strictly largest, earliest pack index on
/// ties. Points already chosen are never candidates.
pub fn init_kcenter(pack: &EmbeddingPack, spec: &InitSpec) -> Result<Coreset> {
    let (quota, targets, groups) = plan(pack, spec)?;
    let vectors: Vec<Vec<f64>> = pack.records().iter().map(EmbeddingRecord::to_f64).collect();
    let selected = groups
        .par_iter()
        .enumerate()
        .map(|(c, g)| {
            let take = targets[c].min(g.len());
            let points: Vec<&[f64]> = g.iter().map(|&i| vectors[i].as_slice()).collect();
            let mut r = rng::stream(spec.seed, rng::TAG_INIT_KCENTER, &[c as u64]);
            let first = if g.is_empty() { 0 } else { r.random_range(0..g.len()) };
            kcenter_greedy(&points, first, take, spec.kcenter_metric)
                .into_iter()
                .map(|k| g[k])
                .collect::<Vec<_>>()
        })
        .collect();
    assemble(pack, spec, quota, targets, selected)
}

/// Farthest-point greedy over `points` starting from `first`; returns local
/// indices in selection order.
pub fn kcenter_greedy(points: &[&[f64]], first: usize, take: usize, metric: KcenterMetric) -> Vec<usize> {
    if take == 0 || points.is_empty() {
        return Vec::new();
    }
    let mut chosen = vec![false; points.len()];
    let mut order = vec![first];
    chosen[first] = true;
    let mut min_dist: Vec<f64> = points.iter().map(|p| metric.distance(p, points[first])).collect();
    while order.len() < take {
        let mut best: Option<usize> = None;
        let mut best_dist = 0.0;
        for (i, &d) in min_dist.iter().enumerate() {
            if !chosen[i] && d > best_dist {
                best_dist = d;
                best = Some(i);
            }
        }
        // Every remaining point coincides with a center: take the earliest.
        let next = best.unwrap_or_else(|| chosen.iter().position(|&c| !c).expect("take <= len"));
        chosen[next] = true;
        order.push(next);
        for (i, d) in min_dist.iter_mut().enumerate() {
            let dn = metric.distance(points[i], points[next]);
            if dn < *d {
                *d = dn;
            }
        }
    }
    order
}

/// Pairwise in-context contribution scores `values[p][q] = c(e_p, e_q)`, or
/// precomputed per-sample totals.
#[derive(Debug, Clone, PartialEq)]
pub enum InfoScores {
    Matrix { ids: Vec<String>, values: Vec<f64> },
    Totals { ids: Vec<String>, scores: Vec<f64> },
}

impl InfoScores {
    pub fn matrix(ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let n = ids.len();
        if values.len() != n * n {
            return Err(KecoError::Format(format!(
                "contribution matrix has {} values, expected {n}x{n}",
                values.len()
            )));
        }
        Ok(Self::Matrix { ids, values })
    }

    pub fn ids(&self) -> &[String] {
        match self {
            Self::Matrix { ids, .. } | Self::Totals { ids, .. } => ids,
        }
    }

    /// `I(e) = Σ_{e' ≠ e} c(e, e')`, summed in column order.
    pub fn totals(&self) -> Result<Vec<f64>> {
        match self {
            Self::Totals { ids, scores } => {
                for (id, s) in ids.iter().zip(scores) {
                    if !s.is_finite() {
                        return Err(KecoError::NonFiniteScore(id.clone()));
                    }
                }
                Ok(scores.clone())
            }
            Self::Matrix { ids, values } => {
                let n = ids.len();
                let mut out = Vec::with_capacity(n);
                for (p, id) in ids.iter().enumerate() {
                    let row = &values[p * n..(p + 1) * n];
                    if row.iter().any(|v| !v.is_finite()) {
                        return Err(KecoError::NonFiniteScore(id.clone()));
                    }
                    out.push(
                        row.iter()
                            .enumerate()
                            .filter(|&(q, _)| q != p)
                            .map(|(_, v)| v)
                            .sum(),
                    );
                }
                Ok(out)
            }
        }
    }

    /// Loads `<stem>.scores.manifest.json` + `<stem>.scores.f64`, or a JSONL
    /// file of `{"id", "infoscore"}` totals.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = path.to_string_lossy();
        if s.ends_with(".jsonl") {
            return load_totals_jsonl(path);
        }
        let stem = s
            .strip_suffix(SCORES_MANIFEST_SUFFIX)
            .unwrap_or(&s)
            .to_string();
        let manifest_path = format!("{stem}{SCORES_MANIFEST_SUFFIX}");
        let blob_path = format!("{stem}.scores.f64");
        let manifest: ScoresManifest = serde_json::from_slice(&fsio::read(Path::new(&manifest_path))?)
            .map_err(|e| KecoError::Format(format!("{manifest_path}: {e}")))?;
        if manifest.version != 1 {
            return Err(KecoError::UnsupportedVersion(manifest.version));
        }
        if manifest.ids.len() != manifest.count {
            return Err(KecoError::Format("scores manifest ids length differs from count".into()));
        }
        let blob = fsio::read(Path::new(&blob_path))?;
        let expected = manifest.count * manifest.count * 8;
        if blob.len() != expected {
            return Err(KecoError::BlobSizeMismatch {
                expected,
                found: blob.len(),
            });
        }
        let values = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::matrix(manifest.ids, values)
    }

    /// Writes the binary matrix form; `stem` may include the manifest suffix.
    pub fn save_matrix(&self, stem: impl AsRef<Path>) -> Result<()> {
        let Self::Matrix { ids, values } = self else {
            return Err(KecoError::InvalidConfig("only matrices have a binary form".into()));
        };
        let s = stem.as_ref().to_string_lossy();
        let stem = s.strip_suffix(SCORES_MANIFEST_SUFFIX).unwrap_or(&s);
        let manifest = ScoresManifest {
            count: ids.len(),
            ids: ids.clone(),
            version: 1,
        };
        let blob: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fsio::atomic_write(Path::new(&format!("{stem}.scores.f64")), &blob)?;
        let mut text = serde_json::to_string(&manifest).expect("manifest serializes");
        text.push('\n');
        fsio::atomic_write(Path::new(&format!("{stem}{SCORES_MANIFEST_SUFFIX}")), text.as_bytes())
    }
}

const SCORES_MANIFEST_SUFFIX: &str = ".scores.manifest.json";

#[derive(Serialize, Deserialize)]
struct ScoresManifest {
    count: usize,
    ids: Vec<String>,
    version: u32,
}

#[derive(Deserialize)]
struct TotalLine {
    id: String,
    infoscore: f64,
}

fn load_totals_jsonl(path: &Path) -> Result<InfoScores> {
    let bytes = fsio::read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| KecoError::Format(e.to_string()))?;
    let mut ids = Vec::new();
    let mut scores = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let l: TotalLine = serde_json::from_str(line)
            .map_err(|e| KecoError::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        ids.push(l.id);
        scores.push(l.infoscore);
    }
    Ok(InfoScores::Totals { ids, scores })
}

/// Selects, per class, the quota of samples with the largest informativeness
/// total; lower pack index wins ties.
pub fn init_infoscore(pack: &EmbeddingPack, scores: &InfoScores, spec: &InitSpec) -> Result<Coreset> {
    let (quota, targets, groups) = plan(pack, spec)?;
    let totals = scores.totals()?;
    let ids = scores.ids();
    if ids.len() != pack.len() {
        return Err(KecoError::ScoreIdMismatch(format!(
            "{} scored ids for {} records",
            ids.len(),
            pack.len()
        )));
    }
    let by_id: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    if by_id.len() != ids.len() {
        return Err(KecoError::ScoreIdMismatch("duplicate ids in scores".into()));
    }
    let mut pack_scores = Vec::with_capacity(pack.len());
    for r in pack.records() {
        let &i = by_id
            .get(r.id.as_str())
            .ok_or_else(|| KecoError::ScoreIdMismatch(format!("no score for {}", r.id)))?;
        pack_scores.push(totals[i]);
    }
    let selected = groups
        .iter()
        .enumerate()
        .map(|(c, g)| {
            let mut ranked = g.clone();
            ranked.sort_by(|&a, &b| pack_scores[b].total_cmp(&pack_scores[a]).then(a.cmp(&b)));
            ranked.truncate(targets[c]);
            ranked
        })
        .collect();
    assemble(pack, spec, quota, targets, selected)
}

pub fn initialize(pack: &EmbeddingPack, spec: &InitSpec, scores: Option<&InfoScores>) -> Result<Coreset> {
    match spec.strategy {
        InitStrategy::Random => init_random(pack, spec),
        InitStrategy::Kcenter => init_kcenter(pack, spec),
        InitStrategy::Infoscore => {
            let scores = scores.ok_or_else(|| {
                KecoError::InvalidConfig("infoscore initialization requires --scores".into())
            })?;
            init_infoscore(pack, scores, spec)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FillOutcome {
    /// Appended at this coreset index.
    Added(usize),
    /// The class is at quota; route the sample to the online update.
    Full,
}

/// Coreset under construction from a stream.
#[derive(Debug, Clone)]
pub struct FillingBuilder {
    coreset: Coreset,
    counts: Vec<usize>,
}

impl FillingBuilder {
    pub fn new(dim: usize, labels: Vec<String>, coreset_size: usize, allow_uneven: bool) -> Result<Self> {
        let (quota, targets) = class_targets(&labels, coreset_size, allow_uneven)?;
        let fp = format!("init=filling;m={coreset_size};allow_uneven={allow_uneven}");
        let counts = vec![0; labels.len()];
        let coreset = Coreset::from_entries(dim, labels, Vec::new(), quota, targets, fp)?;
        Ok(Self { coreset, counts })
    }

    pub fn filling_init_step(&mut self, sample: &EmbeddingRecord) -> Result<FillOutcome> {
        let c = self
            .coreset
            .class_index(&sample.label)
            .ok_or_else(|| KecoError::UnknownLabel(sample.label.clone()))?;
        if self.counts[c] >= self.coreset.class_targets()[c] {
            return Ok(FillOutcome::Full);
        }
        self.counts[c] += 1;
        Ok(FillOutcome::Added(
            self.coreset.insert_grouped(entry_from_record(sample, c)),
        ))
    }

    pub fn class_count(&self, label: &str) -> Option<usize> {
        self.coreset.class_index(label).map(|c| self.counts[c])
    }

    pub fn is_full(&self) -> bool {
        self.counts
            .iter()
            .zip(self.coreset.class_targets())
            .all(|(have, want)| have >= want)
    }

    pub fn coreset(&self) -> &Coreset {
        &self.coreset
    }

    pub fn coreset_mut(&mut self) -> &mut Coreset {
        &mut self.coreset
    }

    /// Fails with `InsufficientStream` for an unfilled class unless `allow_partial`.
    pub fn finish(self, allow_partial: bool) -> Result<Coreset> {
        if !allow_partial {
            for (c, (&have, &want)) in self
                .counts
                .iter()
                .zip(self.coreset.class_targets())
                .enumerate()
            {
                if have < want {
                    return Err(KecoError::InsufficientStream {
                        label: self.coreset.labels()[c].clone(),
                        filled: have,
                        quota: want,
                    });
                }
            }
        }
        Ok(self.coreset)
    }
}

/// Runs only the filling phase over `pack` in order: returns the filled
/// coreset and the pack of samples that found their class full.
pub fn fill_split(pack: &EmbeddingPack, coreset_size: usize, allow_uneven: bool) -> Result<(Coreset, EmbeddingPack)> {
    let mut b = FillingBuilder::new(pack.dim(), pack.labels().to_vec(), coreset_size, allow_uneven)?;
    let mut rest = Vec::new();
    for (i, r) in pack.records().iter().enumerate() {
        if b.filling_init_step(r)? == FillOutcome::Full {
            rest.push(i);
        }
    }
    Ok((b.finish(allow_uneven)?, pack.select(&rest)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(ls: &[&str]) -> Vec<String> {
        ls.iter().map(|s| s.to_string()).collect()
    }

    fn pack_from(points: &[(&str, &[f32])]) -> EmbeddingPack {
        let mut ls: Vec<String> = Vec::new();
        let recs = points
            .iter()
            .enumerate()
            .map(|(i, (l, v))| {
                if !ls.iter().any(|x| x == l) {
                    ls.push(l.to_string());
                }
                EmbeddingRecord::new(format!("s{i}"), *l, v.to_vec())
            })
            .collect();
        EmbeddingPack::new(points[0].1.len(), ls, recs).unwrap()
    }

    #[test]
    fn random_takes_whole_support_when_quota_forces_it() {
        let p = pack_from(&[("a", &[1.0]), ("b", &[2.0]), ("a", &[3.0]), ("b", &[4.0])]);
        let c = init_random(&p, &InitSpec::new(InitStrategy::Random, 4, 9)).unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(c.class_counts(), [2, 2]);
        let mut ids: Vec<_> = c.source_ids().collect();
        ids.sort();
        assert_eq!(ids, ["s0", "s1", "s2", "s3"]);
        // class-ascending order
        assert_eq!(c.entries()[0].label, "a");
        assert_eq!(c.entries()[1].label, "a");
    }

    #[test]
    fn random_quota_errors() {
        let p = pack_from(&[("a", &[1.0]), ("b", &[2.0]), ("a", &[3.0]), ("b", &[4.0]), ("a", &[5.0])]);
        assert!(matches!(
            init_random(&p, &InitSpec::new(InitStrategy::Random, 5, 0)),
            Err(KecoError::UnevenQuota { size: 5, classes: 2 })
        ));
        let p = pack_from(&[("a", &[1.0]), ("a", &[2.0]), ("a", &[3.0]), ("b", &[4.0])]);
        assert!(matches!(
            init_random(&p, &InitSpec::new(InitStrategy::Random, 4, 0)),
            Err(KecoError::InsufficientClassSamples { label, available: 1, quota: 2 }) if label == "b"
        ));
        let mut spec = InitSpec::new(InitStrategy::Random, 4, 0);
        spec.allow_uneven = true;
        let c = init_random(&p, &spec).unwrap();
        assert_eq!(c.class_counts(), [2, 1]);
        assert_eq!(c.shortfall(), [("b".to_string(), 1)]);
    }

    #[test]
    fn uneven_remainder_goes_to_lexicographically_first_labels() {
        let (base, t) = class_targets(&labels(&["zeta", "alpha", "mid"]), 5, true).unwrap();
        assert_eq!(base, 1);
        assert_eq!(t, [1, 2, 2]);
    }

    #[test]
    fn kcenter_one_dimensional_trace() {
        let pts: [&[f64]; 3] = [&[0.0], &[1.0], &[10.0]];
        assert_eq!(kcenter_greedy(&pts, 0, 2, KcenterMetric::Euclidean), [0, 2]);
    }

    #[test]
    fn kcenter_unit_square() {
        let pts: [&[f64]; 4] = [&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]];
        assert_eq!(kcenter_greedy(&pts, 0, 2, KcenterMetric::Euclidean), [0, 3]);
    }

    #[test]
    fn kcenter_exhausts_class() {
        let p = pack_from(&[("a", &[1.0, 0.0]), ("a", &[0.0, 1.0]), ("b", &[1.0, 1.0]), ("b", &[2.0, 1.0])]);
        for seed in 0..10 {
            let c = init_kcenter(&p, &InitSpec::new(InitStrategy::Kcenter, 4, seed)).unwrap();
            let mut ids: Vec<_> = c.source_ids().collect();
            ids.sort();
            assert_eq!(ids, ["s0", "s1", "s2", "s3"]);
        }
    }

    #[test]
    fn kcenter_duplicates_fall_back_to_earliest() {
        let pts: [&[f64]; 3] = [&[1.0], &[1.0], &[1.0]];
        assert_eq!(kcenter_greedy(&pts, 1, 3, KcenterMetric::Euclidean), [1, 0, 2]);
    }

    fn four_two_class() -> EmbeddingPack {
        pack_from(&[("a", &[1.0]), ("a", &[2.0]), ("b", &[3.0]), ("b", &[4.0]), ("a", &[5.0]), ("b", &[6.0])])
    }

    fn ids_of(p: &EmbeddingPack) -> Vec<String> {
        p.records().iter().map(|r| r.id.clone()).collect()
    }

    #[test]
    fn infoscore_zero_matrix_uses_pack_order() {
        let p = four_two_class();
        let s = InfoScores::matrix(ids_of(&p), vec![0.0; 36]).unwrap();
        let c = init_infoscore(&p, &s, &InitSpec::new(InitStrategy::Infoscore, 4, 0)).unwrap();
        let ids: Vec<_> = c.source_ids().collect();
        assert_eq!(ids, ["s0", "s1", "s2", "s3"]);
    }

    #[test]
    fn infoscore_row_sum_excludes_diagonal() {
        let ids = vec!["p".to_string(), "q".into(), "r".into(), "s".into()];
        let mut v = vec![0.0; 16];
        v[0] = 100.0; // self term ignored
        v[1] = 0.2;
        v[2] = -0.1;
        v[3] = 0.3;
        let t = InfoScores::matrix(ids, v).unwrap().totals().unwrap();
        assert!((t[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn infoscore_picks_argmax() {
        let p = four_two_class();
        let mut s = vec![0.0; 36];
        // s4 (class a) row sums to 0.4, every other row at most 0.1
        s[4 * 6] = 0.4;
        s[6 + 2] = 0.1;
        let scores = InfoScores::matrix(ids_of(&p), s).unwrap();
        let c = init_infoscore(&p, &scores, &InitSpec::new(InitStrategy::Infoscore, 2, 0)).unwrap();
        assert_eq!(c.entries_of_class("a").unwrap()[0].1.source_id, "s4");
    }

    #[test]
    fn infoscore_errors() {
        let p = four_two_class();
        let short = InfoScores::matrix(vec!["s0".into()], vec![0.0]).unwrap();
        let spec = InitSpec::new(InitStrategy::Infoscore, 2, 0);
        assert!(matches!(init_infoscore(&p, &short, &spec), Err(KecoError::ScoreIdMismatch(_))));
        let mut v = vec![0.0; 36];
        v[7] = f64::NAN;
        let nan = InfoScores::matrix(ids_of(&p), v).unwrap();
        assert!(matches!(init_infoscore(&p, &nan, &spec), Err(KecoError::NonFiniteScore(id)) if id == "s1"));
        assert!(matches!(initialize(&p, &spec, None), Err(KecoError::InvalidConfig(_))));
    }

    #[test]
    fn filling_counts_and_routes() {
        let mut b = FillingBuilder::new(1, labels(&["a", "b"]), 4, false).unwrap();
        let rec = |i: usize| EmbeddingRecord::new(format!("x{i}"), "a", vec![1.0]);
        assert_eq!(b.filling_init_step(&rec(0)).unwrap(), FillOutcome::Added(0));
        assert_eq!(b.class_count("a"), Some(1));
        assert_eq!(b.filling_init_step(&rec(1)).unwrap(), FillOutcome::Added(1));
        assert_eq!(b.filling_init_step(&rec(2)).unwrap(), FillOutcome::Full);
        let unknown = EmbeddingRecord::new("u", "zz", vec![1.0]);
        assert!(matches!(b.filling_init_step(&unknown), Err(KecoError::UnknownLabel(_))));
        assert!(matches!(b.finish(false), Err(KecoError::InsufficientStream { label, filled: 0, quota: 2 }) if label == "b"));
    }

    #[test]
    fn filling_stream_of_ten_quota_three() {
        let mut b = FillingBuilder::new(1, labels(&["a"]), 3, false).unwrap();
        let outcomes: Vec<_> = (0..10)
            .map(|i| b.filling_init_step(&EmbeddingRecord::new(format!("x{i}"), "a", vec![1.0])).unwrap())
            .collect();
        assert_eq!(outcomes.iter().filter(|o| matches!(o, FillOutcome::Added(_))).count(), 3);
        assert!(outcomes[3..].iter().all(|o| *o == FillOutcome::Full));
    }

    #[test]
    fn infoscores_binary_and_jsonl_loaders() {
        let dir = tempfile::tempdir().unwrap();
        let m = InfoScores::matrix(vec!["a".into(), "b".into()], vec![0.0, 1.5, -2.0, 0.0]).unwrap();
        let stem = dir.path().join("sc");
        m.save_matrix(&stem).unwrap();
        let back = InfoScores::load(dir.path().join("sc.scores.manifest.json")).unwrap();
        assert_eq!(back, m);
        let j = dir.path().join("t.jsonl");
        std::fs::write(&j, "{\"id\":\"a\",\"infoscore\":0.5}\n{\"id\":\"b\",\"infoscore\":-1}\n").unwrap();
        let t = InfoScores::load(&j).unwrap();
        assert_eq!(t.totals().unwrap(), [0.5, -1.0]);
    }
}
