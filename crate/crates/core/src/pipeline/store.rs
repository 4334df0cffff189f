use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::report::ConfidenceSummary;
use super::{
    active_learning_rank, EscalationPolicy, EventKind, EventLog, FieldChange, FinalizeRequest, IngestMessage,
    IngestOutcome, ModelRegistry, OverrideEvent, OverrideRequest, OverrideValue, PipelineError, QueueItem,
    RailcarReport, RejectReason, ReportStatus, Result, Role, Wal, WalRecord,
};
use crate::annotation::{AuditAction, AuditLog, Grade};
use crate::clock::Clock;
use crate::model::net::regression_confidence;
use crate::model::{Bag, Instance};
use crate::segmentation::FailureCode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Lines are numbered `0..lines`.
    pub lines: u16,
    pub wal_path: Option<PathBuf>,
    /// fsync after every WAL record.
    pub wal_sync: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            lines: 6,
            wal_path: None,
            wal_sync: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPrediction {
    pub model_version: u32,
    pub contamination: f64,
    pub class_probs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer_index: u32,
    pub dedupe_id: String,
    pub timestamp_ms: i64,
    pub features: Vec<f64>,
    pub quality_flags: Vec<FailureCode>,
    /// Computed at ingest for eligible layers.
    pub prediction: Option<LayerPrediction>,
}

impl LayerRecord {
    pub fn is_eligible(&self) -> bool {
        self.quality_flags.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RailcarState {
    pub line: u16,
    pub layers: BTreeMap<u32, LayerRecord>,
    pub report: Option<RailcarReport>,
}

/// Derived tables in key order; the exactly-once oracle compares these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreSnapshot {
    pub policy: EscalationPolicy,
    pub railcars: BTreeMap<String, RailcarState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl LatencySummary {
    fn of(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self {
                count: 0,
                mean_ms: 0.0,
                p50_ms: 0.0,
                p95_ms: 0.0,
                max_ms: 0.0,
            };
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let q = |p: f64| s[((s.len() - 1) as f64 * p).round() as usize];
        Self {
            count: s.len(),
            mean_ms: s.iter().sum::<f64>() / s.len() as f64,
            p50_ms: q(0.5),
            p95_ms: q(0.95),
            max_ms: s[s.len() - 1],
        }
    }
}

#[derive(Default)]
struct Latency {
    layer_ms: Vec<f64>,
    finalize_ms: Vec<f64>,
}

/// Ingestion and report store. Each railcar has its own lock, so lines run
/// in parallel while writes for one railcar are serialized.
pub struct Pipeline {
    cfg: PipelineConfig,
    registry: Arc<ModelRegistry>,
    clock: Arc<dyn Clock>,
    audit: AuditLog,
    events: EventLog,
    dedupe: Mutex<HashSet<String>>,
    railcars: RwLock<BTreeMap<String, Arc<Mutex<RailcarState>>>>,
    policy: RwLock<Vec<EscalationPolicy>>,
    wal: Mutex<Option<Wal>>,
    latency: Mutex<Latency>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("cfg", &self.cfg)
            .finish_non_exhaustive()
    }
}

impl Pipeline {
    /// Builds the pipeline, replaying the WAL when one is configured.
    pub fn open(
        cfg: PipelineConfig,
        registry: Arc<ModelRegistry>,
        clock: Arc<dyn Clock>,
        audit: AuditLog,
    ) -> Result<Self> {
        let p = Self::empty(cfg, registry, clock, audit);
        if let Some(path) = &p.cfg.wal_path {
            let (wal, records) = Wal::open(path, p.cfg.wal_sync)?;
            let n = records.len();
            for r in records {
                p.apply(r);
            }
            if n > 0 {
                log::info!("replayed {n} records from {}", path.display());
            }
            *p.wal.lock().expect("wal lock") = Some(wal);
        }
        Ok(p)
    }

    /// Read-only view rebuilt from WAL records. Nothing it does is
    /// persisted.
    pub fn from_records(
        cfg: PipelineConfig,
        registry: Arc<ModelRegistry>,
        clock: Arc<dyn Clock>,
        audit: AuditLog,
        records: Vec<WalRecord>,
    ) -> Self {
        let p = Self::empty(PipelineConfig { wal_path: None, ..cfg }, registry, clock, audit);
        for r in records {
            p.apply(r);
        }
        p
    }

    fn empty(cfg: PipelineConfig, registry: Arc<ModelRegistry>, clock: Arc<dyn Clock>, audit: AuditLog) -> Self {
        Self {
            registry,
            clock,
            audit,
            events: EventLog::default(),
            dedupe: Mutex::new(HashSet::new()),
            railcars: RwLock::new(BTreeMap::new()),
            policy: RwLock::new(vec![EscalationPolicy::default()]),
            wal: Mutex::new(None),
            latency: Mutex::new(Latency::default()),
            cfg,
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn registry(&self) -> &Arc<ModelRegistry> {
        &self.registry
    }

    pub fn events(&self) -> &EventLog {
        &self.events
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn now_ms(&self) -> i64 {
        self.clock.now_ms()
    }

    fn apply(&self, record: WalRecord) {
        match record {
            WalRecord::Layer {
                line,
                railcar_id,
                record,
            } => {
                self.dedupe
                    .lock()
                    .expect("dedupe lock")
                    .insert(record.dedupe_id.clone());
                let entry = self.entry_or_insert(&railcar_id, line);
                let mut st = entry.lock().expect("railcar lock");
                st.layers.insert(record.layer_index, record);
            }
            WalRecord::Report { report } => {
                let entry = self.entry_or_insert(&report.railcar_id, report.line);
                entry.lock().expect("railcar lock").report = Some(report);
            }
            WalRecord::Policy { policy } => self.policy.write().expect("policy lock").push(policy),
        }
    }

    fn persist(&self, record: &WalRecord) -> Result<()> {
        if let Some(wal) = self.wal.lock().expect("wal lock").as_mut() {
            wal.append(record)?;
        }
        Ok(())
    }

    fn entry(&self, railcar_id: &str) -> Option<Arc<Mutex<RailcarState>>> {
        self.railcars.read().expect("railcar map lock").get(railcar_id).cloned()
    }

    fn entry_or_insert(&self, railcar_id: &str, line: u16) -> Arc<Mutex<RailcarState>> {
        if let Some(e) = self.entry(railcar_id) {
            return e;
        }
        let mut map = self.railcars.write().expect("railcar map lock");
        map.entry(railcar_id.to_string())
            .or_insert_with(|| {
                Arc::new(Mutex::new(RailcarState {
                    line,
                    layers: BTreeMap::new(),
                    report: None,
                }))
            })
            .clone()
    }

    fn drop_if_empty(&self, railcar_id: &str) {
        let mut map = self.railcars.write().expect("railcar map lock");
        if let Some(e) = map.get(railcar_id) {
            let st = e.lock().expect("railcar lock");
            if st.layers.is_empty() && st.report.is_none() {
                drop(st);
                map.remove(railcar_id);
            }
        }
    }

    /// Idempotent layer write. Version errors are returned as `Err`; message
    /// problems come back as `Rejected`.
    pub fn ingest(&self, version: u32, msg: &IngestMessage) -> Result<IngestOutcome> {
        let started = Instant::now();
        let model = self.registry.get(version)?;
        let reject = |reason| Ok(IngestOutcome::Rejected { reason });
        if let Err(reason) = msg.validate(model.model.dims().feature_dim) {
            return reject(reason);
        }
        if msg.line >= self.cfg.lines {
            return reject(RejectReason::UnknownLine(msg.line));
        }
        if self.dedupe.lock().expect("dedupe lock").contains(&msg.dedupe_id) {
            return Ok(IngestOutcome::Duplicate);
        }
        let entry = self.entry_or_insert(&msg.railcar_id, msg.line);
        let mut st = entry.lock().expect("railcar lock");
        if st.line != msg.line {
            return reject(RejectReason::LineMismatch { expected: st.line });
        }
        if let Some(existing) = st.layers.get(&msg.layer_index) {
            if existing.dedupe_id == msg.dedupe_id {
                return Ok(IngestOutcome::Duplicate);
            }
            return reject(RejectReason::LayerConflict(msg.layer_index));
        }
        if st.report.is_some() {
            return reject(RejectReason::Finalized);
        }
        if !self.dedupe.lock().expect("dedupe lock").insert(msg.dedupe_id.clone()) {
            let empty = st.layers.is_empty();
            drop(st);
            if empty {
                self.drop_if_empty(&msg.railcar_id);
            }
            return Ok(IngestOutcome::Duplicate);
        }
        let prediction = if msg.quality_flags.is_empty() {
            let (c, probs) = model.model.layer_prediction(&msg.features)?;
            Some(LayerPrediction {
                model_version: version,
                contamination: c,
                class_probs: probs,
            })
        } else {
            None
        };
        let record = LayerRecord {
            layer_index: msg.layer_index,
            dedupe_id: msg.dedupe_id.clone(),
            timestamp_ms: msg.timestamp_ms,
            features: msg.features.clone(),
            quality_flags: msg.quality_flags.clone(),
            prediction,
        };
        let wal = WalRecord::Layer {
            line: msg.line,
            railcar_id: msg.railcar_id.clone(),
            record,
        };
        if let Err(e) = self.persist(&wal) {
            self.dedupe.lock().expect("dedupe lock").remove(&msg.dedupe_id);
            return Err(e);
        }
        let WalRecord::Layer { record, .. } = wal else {
            unreachable!()
        };
        st.layers.insert(record.layer_index, record);
        drop(st);
        let ms = started.elapsed().as_secs_f64() * 1e3;
        self.latency.lock().expect("latency lock").layer_ms.push(ms);
        Ok(IngestOutcome::Accepted)
    }

    pub fn policy(&self) -> EscalationPolicy {
        self.policy
            .read()
            .expect("policy lock")
            .last()
            .cloned()
            .unwrap_or_default()
    }

    pub fn policy_history(&self) -> Vec<EscalationPolicy> {
        self.policy.read().expect("policy lock").clone()
    }

    /// Installs new thresholds as the next policy version. Existing reports
    /// keep the version they were evaluated under.
    pub fn update_policy(
        &self,
        contamination_threshold: f64,
        confidence_threshold: f64,
        actor: &str,
    ) -> Result<EscalationPolicy> {
        let mut history = self.policy.write().expect("policy lock");
        let next = EscalationPolicy {
            version: history.last().map_or(1, |p| p.version + 1),
            contamination_threshold,
            confidence_threshold,
            updated_by: actor.to_string(),
            updated_ms: self.clock.now_ms(),
        };
        next.validate()?;
        self.persist(&WalRecord::Policy { policy: next.clone() })?;
        history.push(next.clone());
        drop(history);
        self.audit.append(
            actor,
            AuditAction::PolicyUpdate,
            &format!("policy/v{}", next.version),
            &next,
        )?;
        self.events
            .publish(EventKind::PolicyUpdated, next.updated_ms, None, Some(next.clone()));
        Ok(next)
    }

    /// Builds, persists and publishes the railcar's report. A second call
    /// returns the stored report unchanged.
    pub fn finalize(&self, version: u32, railcar_id: &str, req: &FinalizeRequest) -> Result<RailcarReport> {
        let started = Instant::now();
        let entry = self
            .entry(railcar_id)
            .ok_or_else(|| PipelineError::UnknownRailcar(railcar_id.to_string()))?;
        let mut st = entry.lock().expect("railcar lock");
        if let Some(r) = &st.report {
            return Ok(r.clone());
        }
        let model = self.registry.get(version)?;
        let policy = self.policy();
        let layers: Vec<&LayerRecord> = st.layers.values().collect();
        let mut quality: BTreeMap<String, usize> = BTreeMap::new();
        for l in &layers {
            for f in &l.quality_flags {
                *quality.entry(f.to_string()).or_insert(0) += 1;
            }
        }
        let eligible: Vec<&LayerRecord> = layers.iter().copied().filter(|l| l.is_eligible()).collect();
        let now = self.clock.now_ms();
        let mut report = RailcarReport {
            railcar_id: railcar_id.to_string(),
            line: st.line,
            contamination: None,
            grade: None,
            class_probs: None,
            layer_count: layers.len(),
            eligible_layers: eligible.len(),
            reg_confidence: None,
            cls_confidence: None,
            layer_reg_confidence: None,
            layer_cls_confidence: None,
            flags: Vec::new(),
            quality,
            model: model.reference.clone(),
            policy_version: policy.version,
            iou_trace_digest: req.iou_trace_digest(),
            first_layer_ms: layers.iter().map(|l| l.timestamp_ms).min().unwrap_or(now),
            last_layer_ms: layers.iter().map(|l| l.timestamp_ms).max().unwrap_or(now),
            finalized_ms: now,
            updated_ms: now,
            status: ReportStatus::Auto,
            report_version: 1,
            history: Vec::new(),
        };
        if !eligible.is_empty() {
            let m = &model.model;
            let bag = Bag::new(
                railcar_id,
                eligible
                    .iter()
                    .map(|l| Instance::new(l.layer_index, l.features.clone()))
                    .collect(),
            )?;
            let pred = m.predict(&bag)?;
            let per_layer: Vec<(f64, Option<Vec<f64>>)> = eligible
                .iter()
                .map(|l| m.layer_prediction(&l.features))
                .collect::<std::result::Result<_, _>>()?;
            let regs: Vec<f64> = per_layer.iter().map(|p| p.0).collect();
            let layer_reg: Vec<f64> = regs
                .iter()
                .map(|r| 1.0 - ((r - pred.contamination).abs() / m.sigma_ref()).min(1.0))
                .collect();
            let layer_cls: Vec<f64> = per_layer
                .iter()
                .filter_map(|p| p.1.as_ref().map(|v| v.iter().copied().fold(0.0, f64::max)))
                .collect();
            report.contamination = Some(pred.contamination);
            report.grade = pred.grade.and_then(Grade::from_index);
            report.cls_confidence = pred.class_probs.as_ref().map(|p| p.iter().copied().fold(0.0, f64::max));
            report.class_probs = pred.class_probs;
            report.reg_confidence = Some(regression_confidence(&regs, m.sigma_ref()));
            report.layer_reg_confidence = ConfidenceSummary::of(&layer_reg);
            report.layer_cls_confidence = ConfidenceSummary::of(&layer_cls);
        }
        report.flags = policy.evaluate(report.contamination, report.confidence());
        if !report.flags.is_empty() {
            report.status = ReportStatus::Escalated;
        }
        self.persist(&WalRecord::Report { report: report.clone() })?;
        st.report = Some(report.clone());
        drop(st);
        self.audit
            .append("pipeline", AuditAction::Aggregate, railcar_id, &report)?;
        self.events
            .publish(EventKind::ReportCreated, now, Some(report.clone()), None);
        if report.status == ReportStatus::Escalated {
            self.audit
                .append("policy", AuditAction::Escalate, railcar_id, &report.flags)?;
            self.events
                .publish(EventKind::Escalation, now, Some(report.clone()), None);
        }
        let ms = started.elapsed().as_secs_f64() * 1e3;
        self.latency.lock().expect("latency lock").finalize_ms.push(ms);
        Ok(report)
    }

    /// Replaces one report field under the caller's role. Inspectors move the
    /// report to `overridden`, seniors to `adjudicated`.
    pub fn apply_override(&self, railcar_id: &str, req: &OverrideRequest) -> Result<RailcarReport> {
        let rationale = req.rationale.ok_or(PipelineError::MissingRationale)?;
        let target = match req.role {
            Role::Viewer => {
                return Err(PipelineError::Forbidden {
                    role: req.role,
                    action: "override reports",
                })
            }
            Role::Inspector => ReportStatus::Overridden,
            Role::Senior => ReportStatus::Adjudicated,
        };
        if req.operator_id.trim().is_empty() {
            return Err(PipelineError::InvalidOverride("empty operator id".into()));
        }
        if let OverrideValue::Contamination(c) = req.change {
            if !(0.0..=100.0).contains(&c) {
                return Err(PipelineError::InvalidOverride(format!(
                    "contamination {c} outside [0, 100]"
                )));
            }
        }
        let entry = self
            .entry(railcar_id)
            .ok_or_else(|| PipelineError::UnknownRailcar(railcar_id.to_string()))?;
        let mut st = entry.lock().expect("railcar lock");
        let report = st
            .report
            .as_ref()
            .ok_or_else(|| PipelineError::NoReport(railcar_id.to_string()))?;
        if let Some(expected) = req.expected_version {
            if expected != report.report_version {
                return Err(PipelineError::Conflict {
                    expected,
                    current: report.report_version,
                });
            }
        }
        if !report.status.can_move_to(target) {
            return Err(PipelineError::InvalidTransition {
                from: report.status,
                to: target,
            });
        }
        let now = self.clock.now_ms();
        let mut next = report.clone();
        let event = OverrideEvent {
            railcar_id: railcar_id.to_string(),
            operator_id: req.operator_id.clone(),
            role: req.role,
            change: FieldChange {
                old: report.current(req.change),
                new: req.change,
            },
            rationale,
            note: req.note.clone(),
            timestamp_ms: now,
            status: target,
        };
        match req.change {
            OverrideValue::Contamination(c) => next.contamination = Some(c),
            OverrideValue::Grade(g) => next.grade = Some(g),
        }
        next.status = target;
        next.report_version += 1;
        next.updated_ms = now;
        next.history.push(event.clone());
        self.persist(&WalRecord::Report { report: next.clone() })?;
        st.report = Some(next.clone());
        drop(st);
        self.audit
            .append(&req.operator_id, AuditAction::Override, railcar_id, &event)?;
        self.events
            .publish(EventKind::ReportUpdated, now, Some(next.clone()), None);
        Ok(next)
    }

    pub fn report(&self, railcar_id: &str) -> Result<RailcarReport> {
        let entry = self
            .entry(railcar_id)
            .ok_or_else(|| PipelineError::UnknownRailcar(railcar_id.to_string()))?;
        let st = entry.lock().expect("railcar lock");
        st.report
            .clone()
            .ok_or_else(|| PipelineError::NoReport(railcar_id.to_string()))
    }

    /// All reports in railcar id order.
    pub fn reports(&self) -> Vec<RailcarReport> {
        let entries: Vec<_> = self
            .railcars
            .read()
            .expect("railcar map lock")
            .values()
            .cloned()
            .collect();
        entries
            .iter()
            .filter_map(|e| e.lock().expect("railcar lock").report.clone())
            .collect()
    }

    pub fn railcar_ids(&self) -> Vec<String> {
        self.railcars
            .read()
            .expect("railcar map lock")
            .keys()
            .cloned()
            .collect()
    }

    pub fn railcar(&self, railcar_id: &str) -> Option<RailcarState> {
        self.entry(railcar_id).map(|e| e.lock().expect("railcar lock").clone())
    }

    /// Re-labeling queue over finalized railcars.
    pub fn queue(&self) -> Vec<QueueItem> {
        active_learning_rank(self.reports(), RailcarReport::rank_key)
            .into_iter()
            .enumerate()
            .map(|(i, r)| QueueItem {
                rank: i + 1,
                corrected: r.is_corrected(),
                confidence: r.confidence(),
                railcar_id: r.railcar_id,
                line: r.line,
                status: r.status,
                contamination: r.contamination,
                report_version: r.report_version,
            })
            .collect()
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        let entries: Vec<(String, Arc<Mutex<RailcarState>>)> = self
            .railcars
            .read()
            .expect("railcar map lock")
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        StoreSnapshot {
            policy: self.policy(),
            railcars: entries
                .into_iter()
                .map(|(k, v)| {
                    let st = v.lock().expect("railcar lock").clone();
                    (k, st)
                })
                .collect(),
        }
    }

    pub fn snapshot_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(&self.snapshot())?)
    }

    pub fn layer_count(&self) -> usize {
        self.dedupe.lock().expect("dedupe lock").len()
    }

    /// Ingest-to-prediction latency of accepted layers.
    pub fn layer_latency(&self) -> LatencySummary {
        LatencySummary::of(&self.latency.lock().expect("latency lock").layer_ms)
    }

    pub fn finalize_latency(&self) -> LatencySummary {
        LatencySummary::of(&self.latency.lock().expect("latency lock").finalize_ms)
    }
}
