//! Magnet-grab segmentation from detection tracks.
//!
//! A detector/tracker supplies per-frame magnet and railcar boxes. The IoU
//! between them rises while the magnet is inside the car; hysteresis over
//! that trace yields one [`GrabInterval`] (a scrap layer) per lift, and the
//! frames nearest each IoU peak that pass the quality gate become keyframes.

mod quality;
mod track;

pub use quality::{quality_filter, FailureCode, FrameQuality, QualityThresholds, QualityVerdict};
pub use track::{read_track, write_track, BBox, DetectionTrack, TrackRecord};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SegmentationError {
    #[error("box has negative extent: w={w}, h={h}")]
    NegativeExtent { w: f64, h: f64 },
    #[error("invalid thresholds: need 0 <= tau_lo ({lo}) < tau_hi ({hi}) <= 1")]
    InvalidThresholds { lo: f64, hi: f64 },
    #[error("empty IoU trace")]
    EmptyTrace,
    #[error("empty track")]
    EmptyTrack,
    #[error("frame indices must strictly increase (frame {prev} followed by {next})")]
    NonMonotonicFrames { prev: u64, next: u64 },
    #[error("track line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T, E = SegmentationError> = std::result::Result<T, E>;

/// Intersection over union of two axis-aligned boxes.
///
/// Two degenerate (zero-area) boxes have IoU 0.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    // Areas come from the same rounded corner coordinates as the
    // intersection, so iou(a, a) is exactly 1.
    let (ax1, ay1, bx1, by1) = (a.x + a.w, a.y + a.h, b.x + b.w, b.y + b.h);
    let ix = ax1.min(bx1) - a.x.max(b.x);
    let iy = ay1.min(by1) - a.y.max(b.y);
    let inter = ix.max(0.0) * iy.max(0.0);
    let union = (ax1 - a.x) * (ay1 - a.y) + (bx1 - b.x) * (by1 - b.y) - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RoiConformance {
    Conformant {
        inside_fraction: f64,
    },
    /// Frame indices where the railcar centroid fell outside the ROI.
    Nonconformant {
        inside_fraction: f64,
        frames: Vec<u64>,
    },
}

impl RoiConformance {
    pub fn is_conformant(&self) -> bool {
        matches!(self, RoiConformance::Conformant { .. })
    }
}

/// Default share of frames whose railcar centroid must lie inside the ROI.
pub const DEFAULT_ROI_FRACTION: f64 = 0.95;

/// Checks the railcar stays parked inside `roi` for at least `min_fraction`
/// of the track. Unloading must not be processed otherwise.
pub fn roi_conformance(track: &DetectionTrack, roi: &BBox, min_fraction: f64) -> Result<RoiConformance> {
    if track.records.is_empty() {
        return Err(SegmentationError::EmptyTrack);
    }
    let outside: Vec<u64> = track
        .records
        .iter()
        .filter(|r| !roi.contains(r.railcar_centroid))
        .map(|r| r.frame)
        .collect();
    let n = track.records.len();
    let inside_fraction = (n - outside.len()) as f64 / n as f64;
    Ok(if inside_fraction >= min_fraction {
        RoiConformance::Conformant { inside_fraction }
    } else {
        RoiConformance::Nonconformant {
            inside_fraction,
            frames: outside,
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrabThresholds {
    pub tau_hi: f64,
    pub tau_lo: f64,
    pub min_len: usize,
}

impl Default for GrabThresholds {
    fn default() -> Self {
        Self {
            tau_hi: 0.15,
            tau_lo: 0.05,
            min_len: 3,
        }
    }
}

impl GrabThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.tau_lo && self.tau_lo < self.tau_hi && self.tau_hi <= 1.0) {
            return Err(SegmentationError::InvalidThresholds {
                lo: self.tau_lo,
                hi: self.tau_hi,
            });
        }
        Ok(())
    }
}

/// One magnet grab, in trace (frame-position) coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrabInterval {
    pub start: usize,
    pub end: usize,
    pub peak: usize,
    pub peak_iou: f64,
    pub keyframes: Vec<usize>,
    pub eligible: bool,
    pub failure_codes: Vec<FailureCode>,
}

impl GrabInterval {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Hysteresis segmentation: an interval opens at the first frame with
/// `iou >= tau_hi` and closes before the first frame with `iou < tau_lo`.
/// Intervals shorter than `min_len` are dropped. Peak ties go to the
/// earliest frame.
pub fn segment_grabs(trace: &[f64], thresholds: &GrabThresholds) -> Result<Vec<GrabInterval>> {
    thresholds.validate()?;
    if trace.is_empty() {
        return Err(SegmentationError::EmptyTrace);
    }
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    let close = |start: usize, end: usize, out: &mut Vec<GrabInterval>| {
        if end + 1 - start < thresholds.min_len {
            return;
        }
        let mut peak = start;
        for i in start..=end {
            if trace[i] > trace[peak] {
                peak = i;
            }
        }
        out.push(GrabInterval {
            start,
            end,
            peak,
            peak_iou: trace[peak],
            keyframes: Vec::new(),
            eligible: true,
            failure_codes: Vec::new(),
        });
    };
    for (i, &v) in trace.iter().enumerate() {
        match open {
            None if v >= thresholds.tau_hi => open = Some(i),
            Some(start) if v < thresholds.tau_lo => {
                close(start, i - 1, &mut out);
                open = None;
            }
            _ => {}
        }
    }
    if let Some(start) = open {
        close(start, trace.len() - 1, &mut out);
    }
    Ok(out)
}

/// Picks up to `k` frames nearest the peak (peak first, then alternating
/// earlier/later at growing distance) that pass the quality gate. With no
/// passing frame the interval becomes ineligible and carries the union of
/// failure codes seen.
pub fn select_keyframes(
    interval: &GrabInterval,
    frames: &[FrameQuality],
    k: usize,
    thresholds: &QualityThresholds,
) -> GrabInterval {
    let mut out = interval.clone();
    out.keyframes.clear();
    out.failure_codes.clear();
    let mut seen_codes: Vec<FailureCode> = Vec::new();
    let mut consider = |idx: usize, out: &mut GrabInterval| {
        if out.keyframes.len() >= k {
            return;
        }
        let Some(fq) = frames.get(idx) else {
            seen_codes.push(FailureCode::Checksum);
            return;
        };
        match quality_filter(fq, thresholds) {
            QualityVerdict::Eligible => out.keyframes.push(idx),
            QualityVerdict::Rejected(codes) => seen_codes.extend(codes),
        }
    };
    consider(interval.peak, &mut out);
    let max_dist = (interval.peak - interval.start).max(interval.end - interval.peak);
    for d in 1..=max_dist {
        if out.keyframes.len() >= k {
            break;
        }
        if interval.peak >= interval.start + d {
            consider(interval.peak - d, &mut out);
        }
        if interval.peak + d <= interval.end {
            consider(interval.peak + d, &mut out);
        }
    }
    if out.keyframes.is_empty() {
        seen_codes.sort();
        seen_codes.dedup();
        out.eligible = false;
        out.failure_codes = seen_codes;
    } else {
        out.eligible = true;
    }
    out
}

/// IoU trace of a track, one value per frame.
pub fn iou_trace(track: &DetectionTrack) -> Result<Vec<f64>> {
    track.records.iter().map(|r| iou(&r.magnet, &r.railcar)).collect()
}

/// Settings for turning a track into layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    pub grab: GrabThresholds,
    pub quality: QualityThresholds,
    pub keyframes_per_grab: usize,
    pub roi: BBox,
    pub roi_fraction: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            grab: GrabThresholds::default(),
            quality: QualityThresholds::default(),
            keyframes_per_grab: 1,
            roi: BBox::new(80.0, 60.0, 480.0, 280.0),
            roi_fraction: DEFAULT_ROI_FRACTION,
        }
    }
}

/// Outcome of segmenting one unloading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub conformance: RoiConformance,
    pub grabs: Vec<GrabInterval>,
    pub trace: Vec<f64>,
}

/// ROI check, IoU trace, hysteresis and keyframe selection for one track.
/// A nonconformant track yields no grabs.
pub fn segment_track(track: &DetectionTrack, cfg: &SegmenterConfig) -> Result<Segmentation> {
    track.validate()?;
    let conformance = roi_conformance(track, &cfg.roi, cfg.roi_fraction)?;
    let trace = iou_trace(track)?;
    if !conformance.is_conformant() {
        return Ok(Segmentation {
            conformance,
            grabs: Vec::new(),
            trace,
        });
    }
    let frames: Vec<FrameQuality> = track.records.iter().map(|r| r.quality.clone()).collect();
    let grabs = segment_grabs(&trace, &cfg.grab)?
        .iter()
        .map(|g| select_keyframes(g, &frames, cfg.keyframes_per_grab, &cfg.quality))
        .collect();
    Ok(Segmentation {
        conformance,
        grabs,
        trace,
    })
}
