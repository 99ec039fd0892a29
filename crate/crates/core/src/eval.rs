//! Desk-scale evaluation: a k-NN proxy classifier over retrieved
//! demonstrations, the baseline/KeCO condition grid, ablation sweeps, seeded
//! synthetic embedding packs, and key exports for plotting.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coreset::{Coreset, DispersionStats};
use crate::engine::{self, TargetStrategy, UpdateConfig};
use crate::error::{KecoError, Result};
use crate::init::{self, InfoScores, InitSpec};
use crate::retrieval::{retrieve_topk, Similarity};
use crate::rng;
use crate::store::{EmbeddingPack, EmbeddingRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub support_per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    /// Norm of every class center.
    pub center_scale: f64,
    /// Per-component standard deviation of the additive Gaussian noise.
    pub noise_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Ten classes in 32 dimensions, noise at half the center scale.
    pub fn reference() -> Self {
        Self {
            classes: 10,
            support_per_class: 100,
            test_per_class: 20,
            dim: 32,
            center_scale: 1.0,
            noise_scale: 0.5,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.dim == 0 || self.support_per_class == 0 {
            return Err(KecoError::InvalidConfig(
                "classes, dim and support count must be positive".into(),
            ));
        }
        if !(self.center_scale > 0.0 && self.center_scale.is_finite()) {
            return Err(KecoError::InvalidConfig("center scale must be positive".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(KecoError::InvalidConfig("noise scale must be non-negative".into()));
        }
        Ok(())
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.noise_scale >= self.center_scale {
            w.push(format!(
                "noise scale {} is not below center scale {}",
                self.noise_scale, self.center_scale
            ));
        }
        w
    }

    fn label(&self, c: usize) -> String {
        let width = self.classes.saturating_sub(1).to_string().len().max(2);
        format!("class_{c:0width$}")
    }
}

/// Returns `(support, test)`. Class centers are uniform on the sphere of
/// radius `center_scale`; samples add isotropic Gaussian noise. Records are
/// interleaved across classes. Zero-norm draws are redrawn.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(EmbeddingPack, EmbeddingPack)> {
    spec.validate()?;
    let labels: Vec<String> = (0..spec.classes).map(|c| spec.label(c)).collect();
    let mut r = rng::stream(spec.seed, rng::TAG_SYNTHETIC, &[0]);
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..spec.dim).map(|_| r.sample(StandardNormal)).collect();
            let n = crate::metric::norm(&v);
            if n > 0.0 {
                break v.into_iter().map(|x| x / n * spec.center_scale).collect();
            }
        })
        .collect();
    let make = |tag: u64, per_class: usize, prefix: &str| -> Result<EmbeddingPack> {
        let mut r = rng::stream(spec.seed, rng::TAG_SYNTHETIC, &[tag]);
        let mut records = Vec::with_capacity(per_class * spec.classes);
        for i in 0..per_class {
            for (c, center) in centers.iter().enumerate() {
                let vector = loop {
                    let v: Vec<f32> = center
                        .iter()
                        .map(|&m| {
                            let z: f64 = r.sample(StandardNormal);
                            (m + spec.noise_scale * z) as f32
                        })
                        .collect();
                    if v.iter().any(|&x| x != 0.0) {
                        break v;
                    }
                };
                records.push(EmbeddingRecord::new(
                    format!("{prefix}{c:03}_{i:05}"),
                    labels[c].clone(),
                    vector,
                ));
            }
        }
        EmbeddingPack::new(spec.dim, labels.clone(), records)
    };
    Ok((make(1, spec.support_per_class, "s")?, make(2, spec.test_per_class, "t")?))
}

/// Majority label among the top-`k` retrieved entries. Among labels tied for
/// the most votes, the one retrieved at the best rank wins.
pub fn knn_predict(coreset: &Coreset, query: &EmbeddingRecord, k: usize, similarity: Similarity) -> Result<String> {
    let result = retrieve_topk(coreset, query, k, similarity)?;
    let mut votes: Vec<(&str, usize)> = Vec::new();
    for e in &result.ranked {
        match votes.iter_mut().find(|(l, _)| *l == e.label) {
            Some(v) => v.1 += 1,
            None => votes.push((&e.label, 1)),
        }
    }
    // `votes` is ordered by first (best) rank, so max_by keeping the earliest wins ties.
    let (label, _) = votes
        .iter()
        .fold(None::<(&str, usize)>, |best, &(l, n)| match best {
            Some((_, bn)) if bn >= n => best,
            _ => Some((l, n)),
        })
        .expect("k >= 1");
    Ok(label.to_string())
}

/// Top-1 accuracy of [`knn_predict`] over `test`, as a fraction.
pub fn knn_accuracy(coreset: &Coreset, test: &EmbeddingPack, k: usize, similarity: Similarity) -> Result<f64> {
    if test.is_empty() {
        return Err(KecoError::InvalidConfig("empty test pack".into()));
    }
    let hits = test
        .records()
        .par_iter()
        .map(|q| knn_predict(coreset, q, k, similarity).map(|p| usize::from(p == q.label)))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    /// Retrieval from the initialized coreset, never updated.
    #[serde(rename = "fs-ic")]
    FsIc,
    /// Retrieval from the whole support pool (coreset plus untapped samples).
    #[serde(rename = "fs-is")]
    FsIs,
    #[serde(rename = "keco-rs")]
    KecoRs,
    #[serde(rename = "keco-ss")]
    KecoSs,
    #[serde(rename = "keco-ds")]
    KecoDs,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::FsIc,
        Condition::FsIs,
        Condition::KecoRs,
        Condition::KecoSs,
        Condition::KecoDs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::FsIc => "FS-IC",
            Self::FsIs => "FS-IS",
            Self::KecoRs => "KeCO-RS",
            Self::KecoSs => "KeCO-SS",
            Self::KecoDs => "KeCO-DS",
        }
    }

    pub fn strategy(self) -> Option<TargetStrategy> {
        match self {
            Self::KecoRs => Some(TargetStrategy::Rs),
            Self::KecoSs => Some(TargetStrategy::Ss),
            Self::KecoDs => Some(TargetStrategy::Ds),
            _ => None,
        }
    }
}

impl std::str::FromStr for Condition {
    type Err = KecoError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fs-ic" | "fsic" => Ok(Self::FsIc),
            "fs-is" | "fsis" => Ok(Self::FsIs),
            "keco-rs" | "rs" => Ok(Self::KecoRs),
            "keco-ss" | "ss" => Ok(Self::KecoSs),
            "keco-ds" | "ds" => Ok(Self::KecoDs),
            other => Err(KecoError::InvalidConfig(format!("unknown condition {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub init: InitSpec,
    /// The strategy field is overridden per KeCO condition.
    pub update: UpdateConfig,
    pub shots: Vec<usize>,
    pub conditions: Vec<Condition>,
    /// When set, keep only `ratio` untapped samples per coreset entry of each
    /// class (first in pack order).
    pub untapped_ratio: Option<usize>,
    pub similarity: Similarity,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(KecoError::InvalidConfig("shot counts must be at least 1".into()));
        }
        if self.conditions.is_empty() {
            return Err(KecoError::InvalidConfig("no conditions requested".into()));
        }
        self.update.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub condition: Condition,
    /// One entry per requested shot count, same order as `shots`.
    pub accuracy: Vec<f64>,
    pub retrieval_pool_size: usize,
    pub mean_cosine_dispersion: f64,
    pub mean_centroid_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub name: String,
    pub spec: ExperimentSpec,
    pub support_size: usize,
    pub coreset_size: usize,
    pub untapped_size: usize,
    pub test_size: usize,
    pub shots: Vec<usize>,
    pub rows: Vec<ConditionRow>,
    pub dispersion_before: DispersionStats,
}

impl ExperimentResult {
    pub fn row(&self, c: Condition) -> Option<&ConditionRow> {
        self.rows.iter().find(|r| r.condition == c)
    }

    pub fn accuracy(&self, c: Condition, shots: usize) -> Option<f64> {
        let s = self.shots.iter().position(|&k| k == shots)?;
        self.row(c).map(|r| r.accuracy[s])
    }

    /// Aligned text table, accuracies in percent.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{}  (support {}, coreset {}, untapped {}, test {})",
            self.name, self.support_size, self.coreset_size, self.untapped_size, self.test_size
        );
        let _ = write!(out, "{:<10}", "Method");
        for k in &self.shots {
            let _ = write!(out, "{:>10}", format!("{k}-shot"));
        }
        let _ = writeln!(out, "{:>14}", "dispersion");
        for r in &self.rows {
            let _ = write!(out, "{:<10}", r.condition.name());
            for a in &r.accuracy {
                let _ = write!(out, "{:>10.2}", a * 100.0);
            }
            let _ = writeln!(out, "{:>14.6}", r.mean_cosine_dispersion);
        }
        let _ = writeln!(
            out,
            "dispersion before update: {:.6}",
            self.dispersion_before.mean_cosine_dispersion
        );
        out
    }
}

/// Result plus the retrieval pool used for every condition.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub result: ExperimentResult,
    pub pools: Vec<(Condition, Coreset)>,
}

/// Keeps, per class, the first `ratio * |C_c|` untapped records in pack order.
pub fn trim_untapped(untapped: &EmbeddingPack, coreset: &Coreset, ratio: usize) -> EmbeddingPack {
    let counts = coreset.class_counts();
    let mut budget: HashMap<&str, usize> = coreset
        .labels()
        .iter()
        .zip(&counts)
        .map(|(l, &n)| (l.as_str(), n * ratio))
        .collect();
    let keep: Vec<usize> = (0..untapped.len())
        .filter(|&i| match budget.get_mut(untapped.record(i).label.as_str()) {
            Some(b) if *b > 0 => {
                *b -= 1;
                true
            }
            _ => false,
        })
        .collect();
    untapped.select(&keep)
}

pub fn evaluate(
    spec: &ExperimentSpec,
    support: &EmbeddingPack,
    test: &EmbeddingPack,
    scores: Option<&InfoScores>,
) -> Result<ExperimentResult> {
    evaluate_detailed(spec, support, test, scores).map(|o| o.result)
}

pub fn evaluate_detailed(
    spec: &ExperimentSpec,
    support: &EmbeddingPack,
    test: &EmbeddingPack,
    scores: Option<&InfoScores>,
) -> Result<ExperimentOutcome> {
    spec.validate()?;
    for l in test.labels() {
        if support.class_index(l).is_none() {
            return Err(KecoError::UnknownLabel(l.clone()));
        }
    }
    let initial = init::initialize(support, &spec.init, scores)?;
    let (_, mut untapped) = support.split(initial.source_ids())?;
    if let Some(ratio) = spec.untapped_ratio {
        untapped = trim_untapped(&untapped, &initial, ratio);
    }
    let dispersion_before = initial.dispersion_stats()?;

    let mut rows = Vec::with_capacity(spec.conditions.len());
    let mut pools = Vec::with_capacity(spec.conditions.len());
    for &condition in &spec.conditions {
        let pool = match condition {
            Condition::FsIc => initial.clone(),
            Condition::FsIs => {
                let mut keep: Vec<&str> = initial.source_ids().collect();
                keep.extend(untapped.records().iter().map(|r| r.id.as_str()));
                let (pool, _) = support.split(keep)?;
                Coreset::from_pack(&pool, "fs-is")
            }
            Condition::KecoRs | Condition::KecoSs | Condition::KecoDs => {
                let mut c = initial.clone();
                let cfg = UpdateConfig {
                    strategy: condition.strategy().expect("keco condition"),
                    ..spec.update.clone()
                };
                engine::run_update(&mut c, &untapped, &cfg)?;
                c
            }
        };
        let accuracy = spec
            .shots
            .iter()
            .map(|&k| knn_accuracy(&pool, test, k, spec.similarity))
            .collect::<Result<Vec<_>>>()?;
        let d = pool.dispersion_stats()?;
        rows.push(ConditionRow {
            condition,
            accuracy,
            retrieval_pool_size: pool.len(),
            mean_cosine_dispersion: d.mean_cosine_dispersion,
            mean_centroid_distance: d.mean_centroid_distance,
        });
        pools.push((condition, pool));
    }
    Ok(ExperimentOutcome {
        result: ExperimentResult {
            name: spec.name.clone(),
            spec: spec.clone(),
            support_size: support.len(),
            coreset_size: initial.len(),
            untapped_size: untapped.len(),
            test_size: test.len(),
            shots: spec.shots.clone(),
            rows,
            dispersion_before,
        },
        pools,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "value", rename_all = "snake_case")]
pub enum SweepPoint {
    Alpha(f64),
    Epochs(usize),
    Batch(usize),
    Ratio(usize),
    CoresetSize(usize),
    EpochsBatch(usize, usize),
}

impl SweepPoint {
    pub fn apply(&self, spec: &ExperimentSpec) -> ExperimentSpec {
        let mut s = spec.clone();
        match *self {
            Self::Alpha(a) => s.update.alpha = a,
            Self::Epochs(e) => s.update.epochs = e,
            Self::Batch(b) => s.update.batch_size = b,
            Self::Ratio(r) => s.untapped_ratio = Some(r),
            Self::CoresetSize(m) => s.init.coreset_size = m,
            Self::EpochsBatch(e, b) => {
                s.update.epochs = e;
                s.update.batch_size = b;
            }
        }
        s
    }

    pub fn label(&self) -> String {
        match *self {
            Self::Alpha(a) => format!("alpha={a}"),
            Self::Epochs(e) => format!("epochs={e}"),
            Self::Batch(b) => format!("batch={b}"),
            Self::Ratio(r) => format!("ratio=1:{r}"),
            Self::CoresetSize(m) => format!("coreset={m}"),
            Self::EpochsBatch(e, b) => format!("epochs={e},batch={b}"),
        }
    }

    /// Parses an axis name plus comma-separated values; `epochs-batch` takes
    /// `EPOCHSxBATCH` pairs.
    pub fn parse_axis(axis: &str, values: &str) -> Result<Vec<SweepPoint>> {
        let bad = |v: &str| KecoError::InvalidConfig(format!("bad {axis} sweep value {v:?}"));
        let items: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if items.is_empty() {
            return Err(KecoError::InvalidConfig("empty sweep".into()));
        }
        items
            .into_iter()
            .map(|v| {
                let n = || v.parse::<usize>().map_err(|_| bad(v));
                Ok(match axis {
                    "alpha" => Self::Alpha(v.parse().map_err(|_| bad(v))?),
                    "epochs" => Self::Epochs(n()?),
                    "batch" => Self::Batch(n()?),
                    "ratio" => Self::Ratio(n()?),
                    "coreset_size" | "coreset-size" => Self::CoresetSize(n()?),
                    "epochs-batch" | "epochs_batch" => {
                        let (e, b) = v.split_once('x').ok_or_else(|| bad(v))?;
                        Self::EpochsBatch(
                            e.parse().map_err(|_| bad(v))?,
                            b.parse().map_err(|_| bad(v))?,
                        )
                    }
                    other => {
                        return Err(KecoError::InvalidConfig(format!("unknown sweep axis {other:?}")))
                    }
                })
            })
            .collect()
    }

    /// Full epochs x batch-size grid, epochs-major.
    pub fn grid(epochs: &[usize], batches: &[usize]) -> Vec<SweepPoint> {
        epochs
            .iter()
            .flat_map(|&e| batches.iter().map(move |&b| Self::EpochsBatch(e, b)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub result: ExperimentResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let Some(first) = self.rows.first() else {
            return out;
        };
        let _ = write!(out, "{:<22}", "setting");
        for c in &first.result.spec.conditions {
            for k in &first.result.shots {
                let _ = write!(out, "{:>14}", format!("{} {k}", c.name()));
            }
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:<22}", row.point.label());
            for r in &row.result.rows {
                for a in &r.accuracy {
                    let _ = write!(out, "{:>14.2}", a * 100.0);
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Runs [`evaluate`] once per point with everything else held fixed.
pub fn sweep(
    spec: &ExperimentSpec,
    support: &EmbeddingPack,
    test: &EmbeddingPack,
    scores: Option<&InfoScores>,
    points: &[SweepPoint],
) -> Result<SweepTable> {
    if points.is_empty() {
        return Err(KecoError::InvalidConfig("empty sweep".into()));
    }
    let rows = points
        .iter()
        .map(|p| {
            let mut s = p.apply(spec);
            s.name = format!("{} [{}]", spec.name, p.label());
            Ok(SweepRow {
                point: *p,
                result: evaluate(&s, support, test, scores)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable { rows })
}

/// Projects keys onto the two leading principal components of the centered
/// key matrix. Each component's sign is fixed so its largest-magnitude
/// coordinate is positive.
pub fn pca_2d(coreset: &Coreset) -> Vec<[f64; 2]> {
    let n = coreset.len();
    let d = coreset.dim();
    if n == 0 {
        return Vec::new();
    }
    let mut x = DMatrix::<f64>::zeros(n, d);
    for (i, e) in coreset.entries().iter().enumerate() {
        for (j, &v) in e.key.iter().enumerate() {
            x[(i, j)] = v;
        }
    }
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let cov = x.transpose() * &x / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let components: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&c| {
            let v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let pivot = v
                .iter()
                .copied()
                .fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            v.into_iter().map(|a| a * sign).collect()
        })
        .collect();
    (0..n)
        .map(|i| {
            let mut p = [0.0; 2];
            for (k, comp) in components.iter().enumerate() {
                p[k] = x.row(i).iter().zip(comp).map(|(a, b)| a * b).sum();
            }
            p
        })
        .collect()
}

/// Writes `index,source_id,label,pc1,pc2` per key.
pub fn write_key_projection_csv(coreset: &Coreset, path: &Path) -> Result<()> {
    let proj = pca_2d(coreset);
    let mut w = csv::Writer::from_writer(Vec::new());
    let row_err = |e: csv::Error| KecoError::Internal(format!("csv encoding: {e}"));
    w.write_record(["index", "source_id", "label", "pc1", "pc2"]).map_err(row_err)?;
    for (i, (e, p)) in coreset.entries().iter().zip(&proj).enumerate() {
        w.write_record([
            i.to_string(),
            e.source_id.clone(),
            e.label.clone(),
            p[0].to_string(),
            p[1].to_string(),
        ])
        .map_err(row_err)?;
    }
    let bytes = w.into_inner().map_err(|e| KecoError::Internal(e.to_string()))?;
    crate::fsio::atomic_write(path, &bytes)
}

/// Writes `label,count,mean_pairwise_cosine_distance,mean_distance_to_centroid`.
pub fn write_dispersion_csv(stats: &DispersionStats, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let row_err = |e: csv::Error| KecoError::Internal(format!("csv encoding: {e}"));
    w.write_record(["label", "count", "mean_pairwise_cosine_distance", "mean_distance_to_centroid"])
        .map_err(row_err)?;
    for c in &stats.per_class {
        w.write_record([
            c.label.clone(),
            c.count.to_string(),
            c.mean_pairwise_cosine_distance.to_string(),
            c.mean_distance_to_centroid.to_string(),
        ])
        .map_err(row_err)?;
    }
    let bytes = w.into_inner().map_err(|e| KecoError::Internal(e.to_string()))?;
    crate::fsio::atomic_write(path, &bytes)
}
