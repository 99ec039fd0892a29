//! Key optimization: target selection and the damped key update.
//!
//! Every untapped sample picks a target entry of its own class (random, most
//! similar or least similar key) and pulls that key toward itself:
//! `k' = (1 - α) k + α μ`, where `μ` is the mean embedding of the samples that
//! picked the same target within one mini-batch. Targets are assigned against
//! the keys as they stood at the start of the batch; updates are applied
//! together at the end.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coreset::{Coreset, DispersionStats};
use crate::error::{KecoError, Result};
use crate::fsio;
use crate::init::{FillOutcome, FillingBuilder};
use crate::metric;
use crate::rng;
use crate::store::{EmbeddingPack, EmbeddingRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetStrategy {
    /// Uniform draw from the class's entries.
    Rs,
    /// Most similar key.
    Ss,
    /// Least similar key.
    Ds,
}

impl std::str::FromStr for TargetStrategy {
    type Err = KecoError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rs" => Ok(Self::Rs),
            "ss" => Ok(Self::Ss),
            "ds" => Ok(Self::Ds),
            other => Err(KecoError::InvalidConfig(format!(
                "unknown selection strategy {other:?} (expected rs, ss or ds)"
            ))),
        }
    }
}

impl std::fmt::Display for TargetStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Rs => "rs",
            Self::Ss => "ss",
            Self::Ds => "ds",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateConfig {
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub strategy: TargetStrategy,
    pub seed: u64,
    pub reshuffle_each_epoch: bool,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            epochs: 10,
            batch_size: 1000,
            strategy: TargetStrategy::Ds,
            seed: 0,
            reshuffle_each_epoch: true,
        }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        validate_alpha(self.alpha)?;
        if self.epochs == 0 {
            return Err(KecoError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(KecoError::InvalidConfig("batch size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        format!(
            "update={};alpha={};epochs={};batch={};seed={};reshuffle={}",
            self.strategy,
            self.alpha,
            self.epochs,
            self.batch_size,
            self.seed,
            self.reshuffle_each_epoch
        )
    }
}

fn validate_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(KecoError::InvalidConfig(format!(
            "update rate {alpha} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Coordinates of one random-target draw. Batch runs use
/// `(epoch, batch, position in batch)`; the online path uses `(0, step, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DrawKey {
    pub seed: u64,
    pub epoch: u64,
    pub batch: u64,
    pub position: u64,
}

/// Picks the coreset entry that `query` will update. Ties go to the lowest
/// coreset index.
pub fn select_target(
    coreset: &Coreset,
    query: &EmbeddingRecord,
    strategy: TargetStrategy,
    draw: DrawKey,
) -> Result<usize> {
    let class = coreset
        .class_index(&query.label)
        .ok_or_else(|| KecoError::UnknownLabel(query.label.clone()))?;
    let candidates: Vec<usize> = coreset.indices_of_class(class).collect();
    if candidates.is_empty() {
        return Err(KecoError::NoTargetForClass(query.label.clone()));
    }
    match strategy {
        TargetStrategy::Rs => {
            let mut r = rng::stream(
                draw.seed,
                rng::TAG_RANDOM_TARGET,
                &[draw.epoch, draw.batch, draw.position],
            );
            Ok(candidates[r.random_range(0..candidates.len())])
        }
        TargetStrategy::Ss | TargetStrategy::Ds => {
            let q = query.to_f64();
            let qn = metric::norm(&q);
            if qn == 0.0 {
                return Err(KecoError::ZeroNormVector(query.id.clone()));
            }
            let entries = coreset.entries();
            let mut best = candidates[0];
            let mut best_sim = metric::cosine_with_query(&entries[best].key, &q, qn);
            for &i in &candidates[1..] {
                let sim = metric::cosine_with_query(&entries[i].key, &q, qn);
                let better = match strategy {
                    TargetStrategy::Ss => sim > best_sim,
                    _ => sim < best_sim,
                };
                if better {
                    best = i;
                    best_sim = sim;
                }
            }
            Ok(best)
        }
    }
}

/// Splits `order` into consecutive batches of `batch_size`; the last batch
/// holds any remainder.
pub fn partition_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Coreset index -> pack indices of the samples that selected it, ascending.
pub type BatchAssignment = BTreeMap<usize, Vec<usize>>;

/// Assigns every sample in `batch` (pack indices into `untapped`) to a target
/// using the current keys.
pub fn assign_targets(
    coreset: &Coreset,
    untapped: &EmbeddingPack,
    batch: &[usize],
    strategy: TargetStrategy,
    seed: u64,
    epoch: u64,
    batch_index: u64,
) -> Result<BatchAssignment> {
    let targets: Vec<usize> = batch
        .par_iter()
        .enumerate()
        .map(|(pos, &i)| {
            let draw = DrawKey {
                seed,
                epoch,
                batch: batch_index,
                position: pos as u64,
            };
            select_target(coreset, untapped.record(i), strategy, draw)
        })
        .collect::<Result<_>>()?;
    let mut groups: BatchAssignment = BTreeMap::new();
    for (&i, t) in batch.iter().zip(targets) {
        groups.entry(t).or_default().push(i);
    }
    for members in groups.values_mut() {
        members.sort_unstable();
    }
    Ok(groups)
}

/// Moves each assigned key toward the mean of its group. Returns the updated
/// coreset indices in ascending order.
pub fn apply_assignment(
    coreset: &mut Coreset,
    untapped: &EmbeddingPack,
    groups: &BatchAssignment,
    alpha: f64,
) -> Result<Vec<usize>> {
    validate_alpha(alpha)?;
    let dim = coreset.dim();
    for (&t, members) in groups {
        let target_class = coreset.entries()[t].label.clone();
        let mut mean = vec![0.0f64; dim];
        for &i in members {
            let r = untapped.record(i);
            if r.label != target_class {
                return Err(KecoError::Internal(format!(
                    "sample {} of class {:?} assigned to entry of class {target_class:?}",
                    r.id, r.label
                )));
            }
            for (m, &x) in mean.iter_mut().zip(&r.vector) {
                *m += f64::from(x);
            }
        }
        let n = members.len() as f64;
        let entry = coreset.entry_mut(t);
        for (k, m) in entry.key.iter_mut().zip(&mean) {
            *k = (1.0 - alpha) * *k + alpha * (m / n);
        }
        entry.updates_applied += 1;
    }
    Ok(groups.keys().copied().collect())
}

/// One synchronous mini-batch step: assign against batch-start keys, then update.
#[allow(clippy::too_many_arguments)]
pub fn apply_batch_update(
    coreset: &mut Coreset,
    untapped: &EmbeddingPack,
    batch: &[usize],
    strategy: TargetStrategy,
    alpha: f64,
    seed: u64,
    epoch: u64,
    batch_index: u64,
) -> Result<Vec<usize>> {
    validate_alpha(alpha)?;
    let groups = assign_targets(coreset, untapped, batch, strategy, seed, epoch, batch_index)?;
    apply_assignment(coreset, untapped, &groups, alpha)
}

/// Single-sample update applied on arrival; `step` counts prior online updates
/// and keys the random-target stream.
pub fn online_update(
    coreset: &mut Coreset,
    sample: &EmbeddingRecord,
    strategy: TargetStrategy,
    alpha: f64,
    seed: u64,
    step: u64,
) -> Result<usize> {
    validate_alpha(alpha)?;
    let draw = DrawKey {
        seed,
        epoch: 0,
        batch: step,
        position: 0,
    };
    let t = select_target(coreset, sample, strategy, draw)?;
    let entry = coreset.entry_mut(t);
    for (k, &x) in entry.key.iter_mut().zip(&sample.vector) {
        *k = (1.0 - alpha) * *k + alpha * f64::from(x);
    }
    entry.updates_applied += 1;
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub batches: usize,
    pub mean_intra_class_cosine_dispersion: f64,
    pub mean_centroid_distance: f64,
    pub updated_entry_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFingerprints {
    pub coreset_xxh64: String,
    pub untapped_xxh64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: UpdateConfig,
    pub inputs: InputFingerprints,
    pub untapped_size: usize,
    pub initial_dispersion: DispersionStats,
    pub per_epoch: Vec<EpochReport>,
    pub updates_per_entry: Vec<u64>,
}

/// Permutation of `0..n` used for `epoch`.
pub fn epoch_order(n: usize, config: &UpdateConfig, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if config.reshuffle_each_epoch {
        let mut r = rng::stream(config.seed, rng::TAG_EPOCH_PERMUTATION, &[epoch as u64]);
        order.shuffle(&mut r);
    }
    order
}

/// Runs `config.epochs` passes of mini-batch updates over `untapped`.
pub fn run_update(
    coreset: &mut Coreset,
    untapped: &EmbeddingPack,
    config: &UpdateConfig,
) -> Result<RunReport> {
    config.validate()?;
    for l in untapped.labels() {
        if coreset.class_index(l).is_none() {
            return Err(KecoError::UnknownLabel(l.clone()));
        }
    }
    let inputs = InputFingerprints {
        coreset_xxh64: format!("{:016x}", fsio::checksum(&coreset.to_snapshot_bytes())),
        untapped_xxh64: format!("{:016x}", untapped.fingerprint()),
    };
    let initial_dispersion = coreset.dispersion_stats()?;
    let before: Vec<u64> = coreset.entries().iter().map(|e| e.updates_applied).collect();
    let mut per_epoch = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = epoch_order(untapped.len(), config, epoch);
        let batches = partition_batches(&order, config.batch_size);
        let mut touched = BTreeSet::new();
        for (b, batch) in batches.iter().enumerate() {
            let updated = apply_batch_update(
                coreset,
                untapped,
                batch,
                config.strategy,
                config.alpha,
                config.seed,
                epoch as u64,
                b as u64,
            )?;
            touched.extend(updated);
        }
        let d = coreset.dispersion_stats()?;
        per_epoch.push(EpochReport {
            epoch: epoch + 1,
            batches: batches.len(),
            mean_intra_class_cosine_dispersion: d.mean_cosine_dispersion,
            mean_centroid_distance: d.mean_centroid_distance,
            updated_entry_count: touched.len(),
        });
    }
    let fp = format!("{}|{}", coreset.config_fingerprint(), config.fingerprint());
    coreset.set_fingerprint(fp);
    Ok(RunReport {
        config: config.clone(),
        inputs,
        untapped_size: untapped.len(),
        initial_dispersion,
        per_epoch,
        updates_per_entry: coreset
            .entries()
            .iter()
            .zip(before)
            .map(|(e, b)| e.updates_applied - b)
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub coreset_size: usize,
    pub strategy: TargetStrategy,
    pub alpha: f64,
    pub seed: u64,
    pub allow_uneven: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub config: StreamConfig,
    pub stream_xxh64: String,
    pub filled: usize,
    pub online_updates: usize,
    pub final_dispersion: DispersionStats,
}

/// Consumes `stream` once in order: fills each class to quota, then routes
/// every further sample of that class to [`online_update`].
pub fn run_stream(stream: &EmbeddingPack, config: &StreamConfig) -> Result<(Coreset, StreamReport)> {
    validate_alpha(config.alpha)?;
    let mut builder = FillingBuilder::new(
        stream.dim(),
        stream.labels().to_vec(),
        config.coreset_size,
        config.allow_uneven,
    )?;
    let mut filled = 0usize;
    let mut step = 0u64;
    for r in stream.records() {
        match builder.filling_init_step(r)? {
            FillOutcome::Added(_) => filled += 1,
            FillOutcome::Full => {
                online_update(
                    builder.coreset_mut(),
                    r,
                    config.strategy,
                    config.alpha,
                    config.seed,
                    step,
                )?;
                step += 1;
            }
        }
    }
    let mut coreset = builder.finish(config.allow_uneven)?;
    let fp = format!(
        "{}|stream={};alpha={};seed={}",
        coreset.config_fingerprint(),
        config.strategy,
        config.alpha,
        config.seed
    );
    coreset.set_fingerprint(fp);
    let report = StreamReport {
        config: config.clone(),
        stream_xxh64: format!("{:016x}", stream.fingerprint()),
        filled,
        online_updates: step as usize,
        final_dispersion: coreset.dispersion_stats()?,
    };
    Ok((coreset, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coreset::CoresetEntry;

    fn entry(id: &str, class: usize, key: &[f64]) -> CoresetEntry {
        CoresetEntry {
            source_id: id.into(),
            label: ["a", "b"][class].into(),
            class,
            key: key.to_vec(),
            updates_applied: 0,
        }
    }

    fn coreset(entries: Vec<CoresetEntry>) -> Coreset {
        Coreset::from_entries(2, vec!["a".into(), "b".into()], entries, 1, vec![1, 1], String::new())
            .unwrap()
    }

    fn pack(recs: &[(&str, &str, [f32; 2])]) -> EmbeddingPack {
        EmbeddingPack::new(
            2,
            vec!["a".into(), "b".into()],
            recs.iter()
                .map(|(id, l, v)| EmbeddingRecord::new(*id, *l, v.to_vec()))
                .collect(),
        )
        .unwrap()
    }

    const KEY: DrawKey = DrawKey { seed: 1, epoch: 0, batch: 0, position: 0 };

    #[test]
    fn ss_and_ds_pick_extremes() {
        let c = coreset(vec![entry("x", 0, &[1.0, 0.0]), entry("y", 0, &[0.0, 1.0])]);
        let q = EmbeddingRecord::new("q", "a", vec![1.0, 0.0]);
        assert_eq!(select_target(&c, &q, TargetStrategy::Ss, KEY).unwrap(), 0);
        assert_eq!(select_target(&c, &q, TargetStrategy::Ds, KEY).unwrap(), 1);
    }

    #[test]
    fn identical_keys_tie_to_lowest_index() {
        let c = coreset(vec![
            entry("z", 1, &[5.0, 5.0]),
            entry("x", 0, &[1.0, 1.0]),
            entry("y", 0, &[1.0, 1.0]),
        ]);
        let q = EmbeddingRecord::new("q", "a", vec![0.3, 0.9]);
        assert_eq!(select_target(&c, &q, TargetStrategy::Ss, KEY).unwrap(), 1);
        assert_eq!(select_target(&c, &q, TargetStrategy::Ds, KEY).unwrap(), 1);
    }

    #[test]
    fn rs_stays_in_class_and_is_keyed() {
        let c = coreset(vec![
            entry("x", 0, &[1.0, 0.0]),
            entry("z", 1, &[1.0, 0.0]),
            entry("y", 0, &[0.0, 1.0]),
        ]);
        let q = EmbeddingRecord::new("q", "a", vec![1.0, 0.0]);
        let mut seen = BTreeSet::new();
        for pos in 0..64 {
            let k = DrawKey { position: pos, ..KEY };
            let t = select_target(&c, &q, TargetStrategy::Rs, k).unwrap();
            assert_eq!(t, select_target(&c, &q, TargetStrategy::Rs, k).unwrap());
            seen.insert(t);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), [0, 2]);
    }

    #[test]
    fn empty_class_has_no_target() {
        let c = coreset(vec![entry("x", 0, &[1.0, 0.0])]);
        let q = EmbeddingRecord::new("q", "b", vec![1.0, 0.0]);
        assert!(matches!(
            select_target(&c, &q, TargetStrategy::Ss, KEY),
            Err(KecoError::NoTargetForClass(l)) if l == "b"
        ));
    }

    #[test]
    fn batch_partition_sizes() {
        let sizes = |n: usize, b: usize| -> Vec<usize> {
            let order: Vec<usize> = (0..n).collect();
            partition_batches(&order, b).iter().map(Vec::len).collect()
        };
        assert_eq!(sizes(4800, 1000), [1000, 1000, 1000, 1000, 800]);
        assert_eq!(sizes(4000, 1000), [1000; 4]);
        assert_eq!(sizes(7, 10), [7]);
        assert!(sizes(0, 3).is_empty());
    }

    #[test]
    fn single_sample_update_is_exact() {
        let mut c = coreset(vec![entry("x", 0, &[1.0, 0.0])]);
        let p = pack(&[("s", "a", [0.0, 1.0])]);
        let updated = apply_batch_update(&mut c, &p, &[0], TargetStrategy::Ss, 0.2, 0, 0, 0).unwrap();
        assert_eq!(updated, [0]);
        assert_eq!(c.entries()[0].key, [0.8, 0.2]);
        assert_eq!(c.entries()[0].updates_applied, 1);
    }

    #[test]
    fn group_mean_update_is_exact() {
        let mut c = coreset(vec![entry("x", 0, &[0.0, 0.0]), entry("z", 1, &[1.0, 1.0])]);
        let p = pack(&[("s", "a", [1.0, 0.0]), ("t", "a", [0.0, 1.0])]);
        let groups: BatchAssignment = [(0, vec![0, 1])].into_iter().collect();
        apply_assignment(&mut c, &p, &groups, 0.5).unwrap();
        assert_eq!(c.entries()[0].key, [0.25, 0.25]);
        assert_eq!(c.entries()[1].key, [1.0, 1.0]);
        assert_eq!(c.entries()[1].updates_applied, 0);
    }

    #[test]
    fn alpha_endpoints() {
        let p = pack(&[("s", "a", [0.0, 1.0])]);
        let mut c = coreset(vec![entry("x", 0, &[1.0, 0.0])]);
        online_update(&mut c, p.record(0), TargetStrategy::Ds, 1.0, 0, 0).unwrap();
        assert_eq!(c.entries()[0].key, [0.0, 1.0]);
        let mut c = coreset(vec![entry("x", 0, &[1.0, 0.0])]);
        apply_batch_update(&mut c, &p, &[0], TargetStrategy::Rs, 0.0, 0, 0, 0).unwrap();
        assert_eq!(c.entries()[0].key, [1.0, 0.0]);
        assert!(matches!(
            online_update(&mut c, p.record(0), TargetStrategy::Ds, 1.5, 0, 0),
            Err(KecoError::InvalidConfig(_))
        ));
    }

    #[test]
    fn config_validation() {
        let ok = UpdateConfig::default();
        assert_eq!((ok.alpha, ok.epochs, ok.batch_size), (0.2, 10, 1000));
        ok.validate().unwrap();
        assert!(UpdateConfig { epochs: 0, ..ok.clone() }.validate().is_err());
        assert!(UpdateConfig { batch_size: 0, ..ok.clone() }.validate().is_err());
        assert!(UpdateConfig { alpha: -0.1, ..ok.clone() }.validate().is_err());
        assert!(UpdateConfig { alpha: f64::NAN, ..ok }.validate().is_err());
    }

    #[test]
    fn run_update_counts_batches_per_epoch() {
        let mut c = coreset(vec![entry("x", 0, &[1.0, 0.0]), entry("z", 1, &[0.0, 1.0])]);
        let recs: Vec<(String, &str, [f32; 2])> = (0..25)
            .map(|i| (format!("s{i}"), if i % 2 == 0 { "a" } else { "b" }, [1.0, i as f32]))
            .collect();
        let p = EmbeddingPack::new(
            2,
            vec!["a".into(), "b".into()],
            recs.iter().map(|(id, l, v)| EmbeddingRecord::new(id.clone(), *l, v.to_vec())).collect(),
        )
        .unwrap();
        let cfg = UpdateConfig { epochs: 3, batch_size: 10, ..Default::default() };
        let report = run_update(&mut c, &p, &cfg).unwrap();
        assert_eq!(report.per_epoch.len(), 3);
        assert!(report.per_epoch.iter().all(|e| e.batches == 3));
        assert_eq!(report.updates_per_entry, [9, 9]);
        assert!(c.config_fingerprint().contains("update=ds"));
    }
}
