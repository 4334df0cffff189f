use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ModelRef, PipelineError, Result};
use crate::annotation::Grade;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStatus {
    Auto,
    Escalated,
    Overridden,
    Adjudicated,
}

impl ReportStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ReportStatus::Auto => "auto",
            ReportStatus::Escalated => "escalated",
            ReportStatus::Overridden => "overridden",
            ReportStatus::Adjudicated => "adjudicated",
        }
    }

    /// Forward-only: nothing returns to `Auto`, an escalation never reverts
    /// without review, and an adjudicated report stays adjudicated.
    pub fn can_move_to(self, to: ReportStatus) -> bool {
        use ReportStatus::*;
        matches!(
            (self, to),
            (Auto, Escalated)
                | (Auto | Escalated | Overridden, Overridden)
                | (Auto | Escalated | Overridden | Adjudicated, Adjudicated)
        )
    }
}

impl fmt::Display for ReportStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReportFlag {
    HighContamination,
    LowConfidence,
    NoEligibleLayers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Viewer,
    Inspector,
    Senior,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Viewer => "viewer",
            Role::Inspector => "inspector",
            Role::Senior => "senior",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "viewer" => Ok(Role::Viewer),
            "inspector" => Ok(Role::Inspector),
            "senior" => Ok(Role::Senior),
            other => Err(PipelineError::InvalidOverride(format!("unknown role `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RationaleCode {
    Misgraded,
    ContaminationMisestimated,
    ForeignObject,
    SegmentationError,
    SensorFault,
    LabelPolicy,
}

impl RationaleCode {
    pub const ALL: [RationaleCode; 6] = [
        RationaleCode::Misgraded,
        RationaleCode::ContaminationMisestimated,
        RationaleCode::ForeignObject,
        RationaleCode::SegmentationError,
        RationaleCode::SensorFault,
        RationaleCode::LabelPolicy,
    ];
}

/// Runtime thresholds for mandatory review. A report escalates when the
/// prediction is strictly above `contamination_threshold` or the bag
/// confidence is strictly below `confidence_threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscalationPolicy {
    pub version: u32,
    pub contamination_threshold: f64,
    pub confidence_threshold: f64,
    pub updated_by: String,
    pub updated_ms: i64,
}

impl Default for EscalationPolicy {
    fn default() -> Self {
        Self {
            version: 1,
            contamination_threshold: 2.0,
            confidence_threshold: 0.5,
            updated_by: "default".into(),
            updated_ms: 0,
        }
    }
}

impl EscalationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !self.contamination_threshold.is_finite() || self.contamination_threshold < 0.0 {
            return Err(PipelineError::InvalidPolicy(format!(
                "contamination threshold {}",
                self.contamination_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(PipelineError::InvalidPolicy(format!(
                "confidence threshold {} outside [0, 1]",
                self.confidence_threshold
            )));
        }
        Ok(())
    }

    /// Flags raised for a bag-level prediction; `None` contamination means
    /// no eligible layer reached the model.
    pub fn evaluate(&self, contamination: Option<f64>, confidence: Option<f64>) -> Vec<ReportFlag> {
        let Some(c) = contamination else {
            return vec![ReportFlag::NoEligibleLayers];
        };
        let mut flags = Vec::new();
        if c > self.contamination_threshold {
            flags.push(ReportFlag::HighContamination);
        }
        if confidence.is_some_and(|v| v < self.confidence_threshold) {
            flags.push(ReportFlag::LowConfidence);
        }
        flags
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSummary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl ConfidenceSummary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        Some(Self {
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            mean: values.iter().sum::<f64>() / values.len() as f64,
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "field", content = "value", rename_all = "snake_case")]
pub enum OverrideValue {
    Contamination(f64),
    Grade(Grade),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldChange {
    pub old: Option<OverrideValue>,
    pub new: OverrideValue,
}

/// Body of an override submission. `rationale` is optional on the wire so
/// a missing code is reported as such rather than as a parse error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverrideRequest {
    pub operator_id: String,
    pub role: Role,
    pub change: OverrideValue,
    #[serde(default)]
    pub rationale: Option<RationaleCode>,
    #[serde(default)]
    pub note: Option<String>,
    /// Optimistic concurrency: reject if the report moved on.
    #[serde(default)]
    pub expected_version: Option<u64>,
}

/// Written once, never edited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverrideEvent {
    pub railcar_id: String,
    pub operator_id: String,
    pub role: Role,
    pub change: FieldChange,
    pub rationale: RationaleCode,
    pub note: Option<String>,
    pub timestamp_ms: i64,
    pub status: ReportStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RailcarReport {
    pub railcar_id: String,
    pub line: u16,
    /// Percent; `None` without eligible layers.
    pub contamination: Option<f64>,
    pub grade: Option<Grade>,
    /// In [`Grade::ALL`] order, from the model.
    pub class_probs: Option<Vec<f64>>,
    pub layer_count: usize,
    pub eligible_layers: usize,
    pub reg_confidence: Option<f64>,
    pub cls_confidence: Option<f64>,
    pub layer_reg_confidence: Option<ConfidenceSummary>,
    pub layer_cls_confidence: Option<ConfidenceSummary>,
    pub flags: Vec<ReportFlag>,
    /// Rejected layers per failure code.
    pub quality: BTreeMap<String, usize>,
    pub model: ModelRef,
    pub policy_version: u32,
    pub iou_trace_digest: Option<String>,
    pub first_layer_ms: i64,
    pub last_layer_ms: i64,
    pub finalized_ms: i64,
    pub updated_ms: i64,
    pub status: ReportStatus,
    /// Bumped on every change; clients dedupe stream events by it.
    pub report_version: u64,
    pub history: Vec<OverrideEvent>,
}

impl RailcarReport {
    /// Lowest available bag confidence.
    pub fn confidence(&self) -> Option<f64> {
        match (self.reg_confidence, self.cls_confidence) {
            (Some(r), Some(c)) => Some(r.min(c)),
            (r, c) => r.or(c),
        }
    }

    pub fn is_corrected(&self) -> bool {
        matches!(self.status, ReportStatus::Overridden | ReportStatus::Adjudicated)
    }

    pub fn rank_key(&self) -> RankKey {
        RankKey {
            corrected: self.is_corrected(),
            confidence: self.confidence().unwrap_or(0.0),
            contamination: self.contamination.unwrap_or(f64::NEG_INFINITY),
        }
    }

    pub(crate) fn current(&self, which: OverrideValue) -> Option<OverrideValue> {
        match which {
            OverrideValue::Contamination(_) => self.contamination.map(OverrideValue::Contamination),
            OverrideValue::Grade(_) => self.grade.map(OverrideValue::Grade),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankKey {
    pub corrected: bool,
    pub confidence: f64,
    pub contamination: f64,
}

/// Re-labeling order: corrected records first, then ascending confidence,
/// then descending contamination. Ties keep their input order.
pub fn active_learning_rank<T>(mut items: Vec<T>, key: impl Fn(&T) -> RankKey) -> Vec<T> {
    items.sort_by(|a, b| {
        let (a, b) = (key(a), key(b));
        b.corrected
            .cmp(&a.corrected)
            .then(a.confidence.total_cmp(&b.confidence))
            .then(b.contamination.total_cmp(&a.contamination))
    });
    items
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub rank: usize,
    pub railcar_id: String,
    pub line: u16,
    pub status: ReportStatus,
    pub corrected: bool,
    pub confidence: Option<f64>,
    pub contamination: Option<f64>,
    pub report_version: u64,
}
