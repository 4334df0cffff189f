//! Scrap contamination assessment for railcar unloading.
//!
//! Each railcar is a bag of layers, one per magnet grab. The crate covers the
//! offline and online halves of judging such a bag:
//!
//! * [`tensor`]: a small f64 reverse-mode autodiff with a finite-difference
//!   gradient checker.
//! * [`model`]: attention-pooled multi-instance regression, optionally with a
//!   grade head trained jointly.
//! * [`segmentation`]: IoU-trace hysteresis that turns an unloading into grabs
//!   and picks keyframes past a quality gate.
//! * [`annotation`]: double-blind rating, consensus, adjudication and
//!   railcar-level splits, all audited.
//! * [`metrics`]: railcar-level evaluation reports.
//! * [`simulator`]: seeded synthetic campaigns with known ground truth.
//! * [`pipeline`]: exactly-once ingestion with a write-ahead log, versioned
//!   models, escalation policy, operator overrides and dataset export.
//!
//! Runnable walkthroughs live in `examples/`.

pub mod annotation;
pub mod clock;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod segmentation;
pub mod simulator;
pub mod tensor;
