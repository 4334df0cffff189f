//! Double-blind labeling: pseudonymized items routed to independent raters,
//! mean/majority aggregation with dispersion flags, senior adjudication, an
//! append-only audit trail and railcar-level train/val/test splits.

mod audit;
mod store;

pub use audit::{payload_digest, AuditAction, AuditEvent, AuditLog};
pub use store::{
    Adjudication, AnnotationRecord, AnnotationStore, Consensus, FinalLabel, LabelProvenance, RaterEntry, RaterView,
    SeniorLabel,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use hmac::{Hmac, KeyInit, Mac};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("rater pool of {pool} is smaller than k = {k}")]
    PoolTooSmall { pool: usize, k: usize },
    #[error("need at least {min} labels, got {got}")]
    TooFewLabels { min: usize, got: usize },
    #[error("label {0} outside [0, 100]")]
    LabelOutOfRange(f64),
    #[error("unknown grade `{0}`")]
    UnknownGrade(String),
    #[error("record `{0}` does not need adjudication")]
    NotAdjudicable(String),
    #[error("unknown record `{0}`")]
    UnknownRecord(String),
    #[error("rater `{rater}` is not assigned to `{record}`")]
    NotAssigned { rater: String, record: String },
    #[error("rater `{rater}` already labeled `{record}`")]
    DuplicateSubmission { rater: String, record: String },
    #[error("peer labels of `{0}` are hidden until aggregation")]
    Blind(String),
    #[error("record `{0}` already exists")]
    DuplicateRecord(String),
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("{railcars} railcars cannot fill {partitions} partitions")]
    TooFewRailcars { railcars: usize, partitions: usize },
    #[error("{what} is corrupt: {message}")]
    Corrupt { what: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = AnnotationError> = std::result::Result<T, E>;

/// Dispersion above which a continuous label goes to adjudication.
pub const FLAG_THRESHOLD: f64 = 0.4;
pub const MIN_RATERS: usize = 3;

/// Scrap grade taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Grade {
    #[serde(rename = "3A")]
    G3A,
    #[serde(rename = "3A1")]
    G3A1,
    #[serde(rename = "3AH")]
    G3AH,
    #[serde(rename = "cast iron")]
    CastIron,
}

impl Grade {
    pub const ALL: [Grade; 4] = [Grade::G3A, Grade::G3A1, Grade::G3AH, Grade::CastIron];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Grade::G3A => "3A",
            Grade::G3A1 => "3A1",
            Grade::G3AH => "3AH",
            Grade::CastIron => "cast iron",
        }
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Grade {
    type Err = AnnotationError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| AnnotationError::UnknownGrade(s.to_string()))
    }
}

/// Keyed HMAC-SHA256 of the railcar id, hex encoded (128 bits kept).
pub fn pseudonymize(railcar_id: &str, salt: &[u8]) -> Result<String> {
    if railcar_id.is_empty() {
        return Err(AnnotationError::Empty("railcar id"));
    }
    if salt.is_empty() {
        return Err(AnnotationError::Empty("salt"));
    }
    let mut mac = <Hmac<Sha256> as KeyInit>::new_from_slice(salt).expect("HMAC accepts any key length");
    mac.update(railcar_id.as_bytes());
    let digest = mac.finalize().into_bytes();
    Ok(format!("bl-{}", hex::encode(&digest[..16])))
}

/// `k` distinct raters drawn uniformly from the pool, in draw order.
pub fn route<R: Rng + ?Sized>(pool: &[String], k: usize, rng: &mut R) -> Result<Vec<String>> {
    if k == 0 {
        return Err(AnnotationError::TooFewLabels { min: 1, got: 0 });
    }
    if pool.len() < k {
        return Err(AnnotationError::PoolTooSmall { pool: pool.len(), k });
    }
    Ok(sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousAggregate {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub flagged: bool,
}

pub fn aggregate_continuous(labels: &[f64]) -> Result<ContinuousAggregate> {
    if labels.len() < MIN_RATERS {
        return Err(AnnotationError::TooFewLabels {
            min: MIN_RATERS,
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|v| !(0.0..=100.0).contains(*v)) {
        return Err(AnnotationError::LabelOutOfRange(bad));
    }
    let n = labels.len() as f64;
    let mean = labels.iter().sum::<f64>() / n;
    let std = (labels.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(ContinuousAggregate {
        mean,
        std,
        flagged: std > FLAG_THRESHOLD,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome", content = "grade")]
pub enum CategoricalAggregate {
    Majority(Grade),
    /// No grade has more than half of the votes.
    NeedsTiebreak,
}

pub fn aggregate_categorical(labels: &[Grade]) -> Result<CategoricalAggregate> {
    if labels.len() < MIN_RATERS {
        return Err(AnnotationError::TooFewLabels {
            min: MIN_RATERS,
            got: labels.len(),
        });
    }
    let mut counts = [0usize; 4];
    for g in labels {
        counts[g.index()] += 1;
    }
    Ok(counts
        .iter()
        .position(|&c| 2 * c > labels.len())
        .map_or(CategoricalAggregate::NeedsTiebreak, |i| {
            CategoricalAggregate::Majority(Grade::ALL[i])
        }))
}

/// String-label convenience over [`aggregate_categorical`].
pub fn aggregate_grade_names(labels: &[&str]) -> Result<CategoricalAggregate> {
    let grades = labels.iter().map(|s| s.parse()).collect::<Result<Vec<Grade>>>()?;
    aggregate_categorical(&grades)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Railcar-to-partition map. Layers inherit their railcar's partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignments: BTreeMap<String, Partition>,
    pub warnings: Vec<String>,
}

impl SplitAssignment {
    pub fn partition_of(&self, railcar: &str) -> Option<Partition> {
        self.assignments.get(railcar).copied()
    }

    pub fn members(&self, p: Partition) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &q)| q == p)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    /// `(train, val, test)` sizes.
    pub fn counts(&self) -> (usize, usize, usize) {
        let c = |p| self.assignments.values().filter(|&&q| q == p).count();
        (c(Partition::Train), c(Partition::Val), c(Partition::Test))
    }
}

/// Reference proportions: 1504 / 305 / 223 of 2032 railcars.
pub const REFERENCE_RATIOS: [f64; 3] = [1504.0 / 2032.0, 305.0 / 2032.0, 223.0 / 2032.0];

/// Partition sizes by largest remainder: floors first, leftover railcars to
/// the largest fractional parts (earlier partition on ties).
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(AnnotationError::InvalidRatios(format!(
            "{ratios:?} has a negative entry"
        )));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(AnnotationError::InvalidRatios(format!("{ratios:?} sums to {sum}")));
    }
    let positive = ratios.iter().filter(|&&r| r > 0.0).count();
    if n < positive {
        return Err(AnnotationError::TooFewRailcars {
            railcars: n,
            partitions: positive,
        });
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for i in 0..3 {
        sizes[i] = exact[i].floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            sizes[i] += 1;
            left -= 1;
        }
    }
    Ok(sizes)
}

/// Seeded shuffle of the (sorted, deduplicated) railcar ids, then a
/// proportional cut into train/val/test.
pub fn split_by_railcar(railcars: &[String], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    let mut ids: Vec<&String> = railcars.iter().collect();
    ids.sort();
    ids.dedup();
    let sizes = split_sizes(ids.len(), ratios)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut assignments = BTreeMap::new();
    let mut it = ids.into_iter();
    for (p, &size) in Partition::ALL.iter().zip(&sizes) {
        for id in it.by_ref().take(size) {
            assignments.insert(id.clone(), *p);
        }
    }
    let warnings = Partition::ALL
        .iter()
        .zip(&sizes)
        .filter(|(_, &s)| s == 0)
        .map(|(p, _)| format!("partition `{p}` is empty"))
        .collect::<Vec<_>>();
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(SplitAssignment { assignments, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn continuous_examples() {
        let a = aggregate_continuous(&[3.0, 3.0, 3.0]).unwrap();
        assert_eq!((a.mean, a.std, a.flagged), (3.0, 0.0, false));
        let a = aggregate_continuous(&[2.0, 3.0, 4.0]).unwrap();
        assert_eq!(a.mean, 3.0);
        assert!(close(a.std, (2.0f64 / 3.0).sqrt(), 1e-15) && close(a.std, 0.81650, 5e-6));
        assert!(a.flagged);
        let a = aggregate_continuous(&[3.0, 3.2, 3.4]).unwrap();
        assert!(close(a.mean, 3.2, 1e-12) && close(a.std, 0.16330, 5e-6) && !a.flagged);
        // Population std keeps this clear of the boundary.
        let a = aggregate_continuous(&[2.6, 3.0, 3.4]).unwrap();
        assert!(close(a.std, 0.32660, 5e-6) && !a.flagged);
        assert!(matches!(
            aggregate_continuous(&[1.0, 2.0]),
            Err(AnnotationError::TooFewLabels { min: 3, got: 2 })
        ));
        assert!(aggregate_continuous(&[1.0, 2.0, 101.0]).is_err());
    }

    #[test]
    fn categorical_examples() {
        use Grade::*;
        assert_eq!(
            aggregate_categorical(&[G3A, G3A, G3A1]).unwrap(),
            CategoricalAggregate::Majority(G3A)
        );
        assert_eq!(
            aggregate_categorical(&[G3A, G3A1, G3AH]).unwrap(),
            CategoricalAggregate::NeedsTiebreak
        );
        assert_eq!(
            aggregate_categorical(&[G3A, G3A, G3A1, G3A1]).unwrap(),
            CategoricalAggregate::NeedsTiebreak
        );
        assert!(matches!(
            aggregate_grade_names(&["3A", "3B", "3A"]),
            Err(AnnotationError::UnknownGrade(g)) if g == "3B"
        ));
        assert_eq!(
            aggregate_grade_names(&["cast iron", "Cast Iron", "3A"]).unwrap(),
            CategoricalAggregate::Majority(CastIron)
        );
    }

    #[test]
    fn pseudonyms_are_keyed_and_stable() {
        let a = pseudonymize("RC-1", b"salt").unwrap();
        assert_eq!(a, pseudonymize("RC-1", b"salt").unwrap());
        assert_ne!(a, pseudonymize("RC-1", b"pepper").unwrap());
        assert!(!a.contains("RC-1"));
        assert!(matches!(pseudonymize("RC-1", b""), Err(AnnotationError::Empty("salt"))));
    }

    #[test]
    fn pseudonyms_do_not_collide() {
        let ids: HashSet<String> = (0..100_000)
            .map(|i| pseudonymize(&format!("RC-{i:06}"), b"campaign-salt").unwrap())
            .collect();
        assert_eq!(ids.len(), 100_000);
    }

    #[test]
    fn route_examples() {
        let pool: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let mut got = route(&pool, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        got.sort();
        assert_eq!(got, pool);
        let pool10: Vec<String> = (0..10).map(|i| format!("r{i}")).collect();
        let a = route(&pool10, 3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, route(&pool10, 3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap());
        assert_eq!(a.iter().collect::<HashSet<_>>().len(), 3);
        assert!(matches!(
            route(&pool, 4, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(AnnotationError::PoolTooSmall { pool: 3, k: 4 })
        ));
    }

    #[test]
    fn route_frequencies_are_uniform() {
        // Each of 10 raters is picked with p = 3/10 per routing.
        let pool: Vec<String> = (0..10).map(|i| format!("r{i}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let trials = 10_000;
        let mut counts = BTreeMap::new();
        for _ in 0..trials {
            for r in route(&pool, 3, &mut rng).unwrap() {
                *counts.entry(r).or_insert(0usize) += 1;
            }
        }
        let p = 0.3;
        let mean = trials as f64 * p;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        for (r, c) in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "{r}: {c}");
        }
    }

    #[test]
    fn reference_split_sizes() {
        assert_eq!(split_sizes(2032, REFERENCE_RATIOS).unwrap(), [1504, 305, 223]);
        assert_eq!(split_sizes(405, REFERENCE_RATIOS).unwrap().iter().sum::<usize>(), 405);
        assert_eq!(split_sizes(7, [1.0, 0.0, 0.0]).unwrap(), [7, 0, 0]);
        assert!(split_sizes(2, [0.5, 0.25, 0.25]).is_err());
        assert!(split_sizes(10, [0.5, 0.6, -0.1]).is_err());
        assert!(split_sizes(10, [0.5, 0.2, 0.2]).is_err());
    }

    #[test]
    fn degenerate_split_flags_empty_partitions() {
        let ids: Vec<String> = (0..5).map(|i| format!("rc{i}")).collect();
        let s = split_by_railcar(&ids, [1.0, 0.0, 0.0], 0).unwrap();
        assert_eq!(s.counts(), (5, 0, 0));
        assert_eq!(s.warnings.len(), 2);
    }
}
