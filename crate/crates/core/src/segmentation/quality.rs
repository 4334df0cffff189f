use std::fmt;

use serde::{Deserialize, Serialize};

/// Standardized frame rejection codes. Ordering is the reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FailureCode {
    #[serde(rename = "BLUR")]
    Blur,
    #[serde(rename = "UNDEREXP")]
    UnderExposed,
    #[serde(rename = "OVEREXP")]
    OverExposed,
    #[serde(rename = "OCCLUDED")]
    Occluded,
    #[serde(rename = "EXTRANEOUS_OBJECT")]
    ExtraneousObject,
    #[serde(rename = "NO_RAILCAR")]
    NoRailcar,
    #[serde(rename = "BAD_ASPECT")]
    BadAspect,
    #[serde(rename = "CHECKSUM")]
    Checksum,
}

impl FailureCode {
    pub const ALL: [FailureCode; 8] = [
        FailureCode::Blur,
        FailureCode::UnderExposed,
        FailureCode::OverExposed,
        FailureCode::Occluded,
        FailureCode::ExtraneousObject,
        FailureCode::NoRailcar,
        FailureCode::BadAspect,
        FailureCode::Checksum,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FailureCode::Blur => "BLUR",
            FailureCode::UnderExposed => "UNDEREXP",
            FailureCode::OverExposed => "OVEREXP",
            FailureCode::Occluded => "OCCLUDED",
            FailureCode::ExtraneousObject => "EXTRANEOUS_OBJECT",
            FailureCode::NoRailcar => "NO_RAILCAR",
            FailureCode::BadAspect => "BAD_ASPECT",
            FailureCode::Checksum => "CHECKSUM",
        }
    }
}

impl fmt::Display for FailureCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-frame quality signals. `blur` and `exposure` are normalized to
/// `[0, 1]` (higher blur is worse; exposure is mean brightness). Upstream
/// detectors report NO_RAILCAR, BAD_ASPECT and CHECKSUM via `failure_codes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameQuality {
    pub blur: f64,
    pub exposure: f64,
    #[serde(default)]
    pub occluded: bool,
    #[serde(default)]
    pub extraneous_object: bool,
    #[serde(default)]
    pub failure_codes: Vec<FailureCode>,
}

impl FrameQuality {
    pub fn nominal() -> Self {
        Self {
            blur: 0.1,
            exposure: 0.5,
            occluded: false,
            extraneous_object: false,
            failure_codes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityThresholds {
    pub max_blur: f64,
    pub min_exposure: f64,
    pub max_exposure: f64,
}

impl Default for QualityThresholds {
    fn default() -> Self {
        Self {
            max_blur: 0.6,
            min_exposure: 0.15,
            max_exposure: 0.85,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum QualityVerdict {
    Eligible,
    Rejected(Vec<FailureCode>),
}

impl QualityVerdict {
    pub fn is_eligible(&self) -> bool {
        matches!(self, QualityVerdict::Eligible)
    }
}

/// Applies every eligibility rule and returns all triggered codes, sorted
/// and deduplicated. Non-finite scores count as a corrupted frame.
pub fn quality_filter(fq: &FrameQuality, th: &QualityThresholds) -> QualityVerdict {
    let mut codes = fq.failure_codes.clone();
    if !fq.blur.is_finite() || !fq.exposure.is_finite() {
        codes.push(FailureCode::Checksum);
    } else {
        if fq.blur > th.max_blur {
            codes.push(FailureCode::Blur);
        }
        if fq.exposure < th.min_exposure {
            codes.push(FailureCode::UnderExposed);
        }
        if fq.exposure > th.max_exposure {
            codes.push(FailureCode::OverExposed);
        }
    }
    if fq.occluded {
        codes.push(FailureCode::Occluded);
    }
    if fq.extraneous_object {
        codes.push(FailureCode::ExtraneousObject);
    }
    codes.sort();
    codes.dedup();
    if codes.is_empty() {
        QualityVerdict::Eligible
    } else {
        QualityVerdict::Rejected(codes)
    }
}
