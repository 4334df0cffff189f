use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    aggregate_categorical, aggregate_continuous, pseudonymize, route, AnnotationError, AuditAction, AuditLog,
    CategoricalAggregate, ContinuousAggregate, Grade, Result, MIN_RATERS,
};
use crate::segmentation::FailureCode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterEntry {
    pub rater: String,
    pub contamination: f64,
    pub grade: Option<Grade>,
    pub timestamp_ms: i64,
    #[serde(default)]
    pub excluded_frames: Vec<FailureCode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Consensus {
    pub contamination: ContinuousAggregate,
    /// Present when every rater gave a grade.
    pub grade: Option<CategoricalAggregate>,
}

impl Consensus {
    pub fn needs_adjudication(&self) -> bool {
        self.contamination.flagged || self.grade == Some(CategoricalAggregate::NeedsTiebreak)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeniorLabel {
    pub senior: String,
    pub contamination: Option<f64>,
    pub grade: Option<Grade>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum Adjudication {
    None,
    Pending,
    Resolved { label: SeniorLabel },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub blind_id: String,
    pub assigned: Vec<String>,
    pub entries: Vec<RaterEntry>,
    pub consensus: Option<Consensus>,
    pub adjudication: Adjudication,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelProvenance {
    Consensus,
    Adjudicated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalLabel {
    pub contamination: f64,
    pub grade: Option<Grade>,
    pub provenance: LabelProvenance,
}

/// What a rater may see: their own entry, plus the consensus once it exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterView {
    pub blind_id: String,
    pub own: Option<RaterEntry>,
    pub submitted: usize,
    pub assigned: usize,
    pub consensus: Option<Consensus>,
}

impl AnnotationRecord {
    fn redacted(&self) -> Self {
        if self.consensus.is_some() {
            return self.clone();
        }
        Self {
            entries: Vec::new(),
            ..self.clone()
        }
    }

    pub fn final_label(&self) -> Option<FinalLabel> {
        let c = self.consensus?;
        let majority = match c.grade {
            Some(CategoricalAggregate::Majority(g)) => Some(g),
            _ => None,
        };
        match &self.adjudication {
            Adjudication::Pending => None,
            Adjudication::None => Some(FinalLabel {
                contamination: c.contamination.mean,
                grade: majority,
                provenance: LabelProvenance::Consensus,
            }),
            Adjudication::Resolved { label } => Some(FinalLabel {
                contamination: label.contamination.unwrap_or(c.contamination.mean),
                grade: label.grade.or(majority),
                provenance: LabelProvenance::Adjudicated,
            }),
        }
    }
}

/// Double-blind annotation store. Records are keyed by pseudonym and each
/// one is locked on its own, so submissions for different railcars proceed
/// in parallel.
pub struct AnnotationStore {
    salt: Vec<u8>,
    k: usize,
    records: RwLock<BTreeMap<String, Arc<Mutex<AnnotationRecord>>>>,
    audit: AuditLog,
}

impl AnnotationStore {
    pub fn new(salt: impl Into<Vec<u8>>, k: usize, audit: AuditLog) -> Result<Self> {
        let salt = salt.into();
        if salt.is_empty() {
            return Err(AnnotationError::Empty("salt"));
        }
        if k < MIN_RATERS {
            return Err(AnnotationError::TooFewLabels {
                min: MIN_RATERS,
                got: k,
            });
        }
        Ok(Self {
            salt,
            k,
            records: RwLock::new(BTreeMap::new()),
            audit,
        })
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn blind_id(&self, railcar_id: &str) -> Result<String> {
        pseudonymize(railcar_id, &self.salt)
    }

    fn get(&self, blind_id: &str) -> Result<Arc<Mutex<AnnotationRecord>>> {
        self.records
            .read()
            .expect("store lock poisoned")
            .get(blind_id)
            .cloned()
            .ok_or_else(|| AnnotationError::UnknownRecord(blind_id.to_string()))
    }

    /// Routes a railcar to `k` raters from the pool. Returns the pseudonym.
    pub fn open_item<R: Rng + ?Sized>(&self, railcar_id: &str, pool: &[String], rng: &mut R) -> Result<String> {
        let raters = route(pool, self.k, rng)?;
        self.assign(railcar_id, raters)
    }

    /// Opens a record with an explicit rater set.
    pub fn assign(&self, railcar_id: &str, raters: Vec<String>) -> Result<String> {
        let mut distinct = raters.clone();
        distinct.sort();
        distinct.dedup();
        if distinct.len() != raters.len() || raters.len() < MIN_RATERS {
            return Err(AnnotationError::TooFewLabels {
                min: MIN_RATERS,
                got: distinct.len(),
            });
        }
        let blind_id = self.blind_id(railcar_id)?;
        let mut map = self.records.write().expect("store lock poisoned");
        if map.contains_key(&blind_id) {
            return Err(AnnotationError::DuplicateRecord(blind_id));
        }
        self.audit.append("router", AuditAction::Route, &blind_id, &raters)?;
        map.insert(
            blind_id.clone(),
            Arc::new(Mutex::new(AnnotationRecord {
                blind_id: blind_id.clone(),
                assigned: raters,
                entries: Vec::new(),
                consensus: None,
                adjudication: Adjudication::None,
            })),
        );
        Ok(blind_id)
    }

    /// Stores one rater's label. The last expected label triggers
    /// aggregation and, when dispersed or tied, queues adjudication.
    pub fn submit(&self, blind_id: &str, entry: RaterEntry) -> Result<RaterView> {
        if !(0.0..=100.0).contains(&entry.contamination) {
            return Err(AnnotationError::LabelOutOfRange(entry.contamination));
        }
        let rec = self.get(blind_id)?;
        let mut rec = rec.lock().expect("record lock poisoned");
        if !rec.assigned.contains(&entry.rater) {
            return Err(AnnotationError::NotAssigned {
                rater: entry.rater,
                record: blind_id.to_string(),
            });
        }
        if rec.entries.iter().any(|e| e.rater == entry.rater) {
            return Err(AnnotationError::DuplicateSubmission {
                rater: entry.rater,
                record: blind_id.to_string(),
            });
        }
        self.audit.append(&entry.rater, AuditAction::Submit, blind_id, &entry)?;
        let rater = entry.rater.clone();
        rec.entries.push(entry);
        if rec.entries.len() == rec.assigned.len() {
            let consensus = aggregate(&rec.entries)?;
            self.audit
                .append("aggregator", AuditAction::Aggregate, blind_id, &consensus)?;
            rec.consensus = Some(consensus);
            if consensus.needs_adjudication() {
                rec.adjudication = Adjudication::Pending;
            }
        }
        Ok(view(&rec, &rater))
    }

    pub fn view(&self, blind_id: &str, rater: &str) -> Result<RaterView> {
        let rec = self.get(blind_id)?;
        let rec = rec.lock().expect("record lock poisoned");
        if !rec.assigned.iter().any(|r| r == rater) {
            return Err(AnnotationError::NotAssigned {
                rater: rater.to_string(),
                record: blind_id.to_string(),
            });
        }
        Ok(view(&rec, rater))
    }

    /// Peer labels become readable only after aggregation.
    pub fn peer_labels(&self, blind_id: &str, rater: &str) -> Result<Vec<RaterEntry>> {
        let rec = self.get(blind_id)?;
        let rec = rec.lock().expect("record lock poisoned");
        if rec.consensus.is_none() {
            return Err(AnnotationError::Blind(blind_id.to_string()));
        }
        Ok(rec.entries.iter().filter(|e| e.rater != rater).cloned().collect())
    }

    /// Record with rater entries withheld until aggregation.
    pub fn record(&self, blind_id: &str) -> Result<AnnotationRecord> {
        let rec = self.get(blind_id)?;
        let rec = rec.lock().expect("record lock poisoned");
        Ok(rec.redacted())
    }

    pub fn pending_adjudication(&self) -> Vec<AnnotationRecord> {
        self.snapshot()
            .into_iter()
            .filter(|r| r.adjudication == Adjudication::Pending)
            .collect()
    }

    pub fn adjudicate(&self, blind_id: &str, label: SeniorLabel) -> Result<AnnotationRecord> {
        let rec = self.get(blind_id)?;
        let mut rec = rec.lock().expect("record lock poisoned");
        let consensus = match (&rec.adjudication, rec.consensus) {
            (Adjudication::Pending, Some(c)) => c,
            _ => return Err(AnnotationError::NotAdjudicable(blind_id.to_string())),
        };
        if consensus.contamination.flagged && label.contamination.is_none() {
            return Err(AnnotationError::Empty("senior contamination label"));
        }
        if consensus.grade == Some(CategoricalAggregate::NeedsTiebreak) && label.grade.is_none() {
            return Err(AnnotationError::Empty("senior grade label"));
        }
        if let Some(c) = label.contamination {
            if !(0.0..=100.0).contains(&c) {
                return Err(AnnotationError::LabelOutOfRange(c));
            }
        }
        self.audit
            .append(&label.senior, AuditAction::Adjudicate, blind_id, &label)?;
        rec.adjudication = Adjudication::Resolved { label };
        Ok(rec.clone())
    }

    /// Final label of a railcar, looked up through its pseudonym.
    pub fn final_label(&self, railcar_id: &str) -> Result<Option<FinalLabel>> {
        let blind = self.blind_id(railcar_id)?;
        let rec = self.get(&blind)?;
        let rec = rec.lock().expect("record lock poisoned");
        Ok(rec.final_label())
    }

    /// All records ordered by pseudonym, unaggregated ones redacted.
    pub fn snapshot(&self) -> Vec<AnnotationRecord> {
        let map = self.records.read().expect("store lock poisoned");
        map.values()
            .map(|r| r.lock().expect("record lock poisoned").redacted())
            .collect()
    }

    /// Writes the snapshot as one JSON record per line.
    pub fn export_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for r in self.snapshot() {
            out.push_str(&serde_json::to_string(&r).expect("record serializes"));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

fn aggregate(entries: &[RaterEntry]) -> Result<Consensus> {
    let values: Vec<f64> = entries.iter().map(|e| e.contamination).collect();
    let grades: Option<Vec<Grade>> = entries.iter().map(|e| e.grade).collect();
    Ok(Consensus {
        contamination: aggregate_continuous(&values)?,
        grade: grades.map(|g| aggregate_categorical(&g)).transpose()?,
    })
}

fn view(rec: &AnnotationRecord, rater: &str) -> RaterView {
    RaterView {
        blind_id: rec.blind_id.clone(),
        own: rec.entries.iter().find(|e| e.rater == rater).cloned(),
        submitted: rec.entries.len(),
        assigned: rec.assigned.len(),
        consensus: rec.consensus,
    }
}
