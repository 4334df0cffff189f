//! Production loop: partitioned idempotent ingestion, railcar finalization,
//! escalation, operator overrides, the re-labeling queue and dataset export.
//!
//! ```text
//! IngestMessage -> Broker (one ordered consumer per line)
//!               -> Pipeline::ingest  (dedupe, per-layer inference, WAL)
//!               -> Pipeline::finalize (bag inference, policy, report, event)
//! ```
//!
//! Every state change is a [`WalRecord`] appended before it is applied, and
//! [`Pipeline::snapshot_bytes`] renders the derived state in key order, so
//! two runs fed the same logical events produce the same bytes no matter how
//! often each message was delivered.

mod broker;
mod dataset;
mod events;
mod registry;
mod replay;
mod report;
mod store;
mod wal;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::AnnotationError;
use crate::model::{CheckpointError, ModelError};
use crate::segmentation::FailureCode;

pub use broker::{Broker, IngestTally};
pub use dataset::{
    eligible_railcars, export_dataset, DatasetLabel, DatasetLayer, DatasetManifest, DatasetRow, DATASET_SCHEMA,
};
pub use events::{EventKind, EventLog, PipelineEvent};
pub use registry::{ModelEntry, ModelRef, ModelRegistry};
pub use replay::{chaos_deliveries, messages_from_campaign, CampaignReplay, FinalizeRequest};
pub use report::{
    active_learning_rank, ConfidenceSummary, EscalationPolicy, FieldChange, OverrideEvent, OverrideRequest,
    OverrideValue, QueueItem, RailcarReport, RankKey, RationaleCode, ReportFlag, ReportStatus, Role,
};
pub use store::{LatencySummary, LayerPrediction, LayerRecord, Pipeline, PipelineConfig, RailcarState, StoreSnapshot};
pub use wal::{Wal, WalRecord};

pub const INGEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("unknown model version v{0}")]
    UnknownVersion(u32),
    #[error("model version v{0} is retired")]
    RetiredVersion(u32),
    #[error("unknown railcar `{0}`")]
    UnknownRailcar(String),
    #[error("railcar `{0}` has no report yet")]
    NoReport(String),
    #[error("override needs a rationale code")]
    MissingRationale,
    #[error("role `{role}` may not {action}")]
    Forbidden { role: Role, action: &'static str },
    #[error("report is {from}, cannot move to {to}")]
    InvalidTransition { from: ReportStatus, to: ReportStatus },
    #[error("report version {current} does not match expected {expected}")]
    Conflict { expected: u64, current: u64 },
    #[error("invalid override: {0}")]
    InvalidOverride(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("dataset tag `{0}` already exported with different content")]
    TagCollision(String),
    #[error("invalid dataset tag `{0}`")]
    InvalidTag(String),
    #[error("write-ahead log corrupt at line {line}: {message}")]
    CorruptWal { line: usize, message: String },
    #[error("broker is shut down")]
    BrokerClosed,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error("pipeline i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("pipeline json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// One layer as published by a line's segmentation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestMessage {
    pub schema_version: u32,
    /// Unique per logical event; redeliveries reuse it.
    pub dedupe_id: String,
    pub line: u16,
    pub railcar_id: String,
    pub layer_index: u32,
    pub features: Vec<f64>,
    #[serde(default)]
    pub quality_flags: Vec<FailureCode>,
    pub timestamp_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason", content = "detail")]
pub enum RejectReason {
    Schema(String),
    UnknownLine(u16),
    /// The railcar already arrived on another line.
    LineMismatch {
        expected: u16,
    },
    Finalized,
    /// Same railcar and layer index under a different dedupe id.
    LayerConflict(u32),
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RejectReason::Schema(m) => write!(f, "schema violation: {m}"),
            RejectReason::UnknownLine(l) => write!(f, "unknown line {l}"),
            RejectReason::LineMismatch { expected } => write!(f, "railcar belongs to line {expected}"),
            RejectReason::Finalized => f.write_str("railcar already finalized"),
            RejectReason::LayerConflict(i) => write!(f, "layer {i} already recorded under another dedupe id"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum IngestOutcome {
    Accepted,
    Duplicate,
    Rejected { reason: RejectReason },
}

impl IngestMessage {
    /// Structural checks that need no pipeline state.
    pub fn validate(&self, feature_dim: usize) -> Result<(), RejectReason> {
        let bad = |m: String| Err(RejectReason::Schema(m));
        if self.schema_version != INGEST_SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} (expected {INGEST_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.dedupe_id.trim().is_empty() {
            return bad("empty dedupe_id".into());
        }
        if self.railcar_id.trim().is_empty() {
            return bad("empty railcar_id".into());
        }
        if self.features.len() != feature_dim {
            return bad(format!("{} features, model expects {feature_dim}", self.features.len()));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return bad("non-finite feature".into());
        }
        Ok(())
    }
}
