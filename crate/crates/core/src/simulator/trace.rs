use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::segmentation::{BBox, DetectionTrack, FrameQuality, GrabThresholds, TrackRecord};

/// Synthetic IoU trace with known grab positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouTrace {
    pub values: Vec<f64>,
    /// Frame index of each hump's maximum.
    pub peaks: Vec<usize>,
    /// `(start, end)` frames of each hump, inclusive.
    pub humps: Vec<(usize, usize)>,
}

pub const MIN_FRAMES_PER_GRAB: usize = 7;
const GAP_FRAMES: usize = 4;

/// `n_grabs` raised-cosine humps (amplitude 0.5 to 0.9) separated by flat
/// valleys of noise strictly below the default low threshold. Humps shorter
/// than [`MIN_FRAMES_PER_GRAB`] frames are lengthened to that size.
pub fn gen_iou_trace<R: Rng + ?Sized>(
    n_grabs: usize,
    frames_per_grab: usize,
    baseline_noise: f64,
    rng: &mut R,
) -> IouTrace {
    let len = frames_per_grab.max(MIN_FRAMES_PER_GRAB);
    let ceiling = 0.9 * GrabThresholds::default().tau_lo;
    let noise = baseline_noise.clamp(0.0, ceiling);
    let valley = |values: &mut Vec<f64>, rng: &mut R| {
        for _ in 0..GAP_FRAMES {
            values.push(if noise > 0.0 { rng.random_range(0.0..noise) } else { 0.0 });
        }
    };
    let mut values = Vec::with_capacity(GAP_FRAMES + n_grabs * (len + GAP_FRAMES));
    let mut peaks = Vec::with_capacity(n_grabs);
    let mut humps = Vec::with_capacity(n_grabs);
    valley(&mut values, rng);
    for _ in 0..n_grabs {
        let amplitude: f64 = rng.random_range(0.5..0.9);
        let start = values.len();
        for j in 0..len {
            let s = (std::f64::consts::PI * (j + 1) as f64 / (len + 1) as f64).sin();
            values.push(amplitude * s * s);
        }
        // Odd lengths peak at the middle frame; even lengths tie on the two
        // middle frames and the earlier one wins.
        peaks.push(start + (len - 1) / 2);
        humps.push((start, start + len - 1));
        valley(&mut values, rng);
    }
    IouTrace { values, peaks, humps }
}

/// Railcar box used by every synthetic track; its centre sits inside the
/// default segmentation ROI.
pub const RAILCAR_BOX: BBox = BBox::new(120.0, 100.0, 400.0, 200.0);
pub const FRAME_MS: i64 = 40;

/// Track whose magnet/railcar IoU reproduces `trace` exactly: the magnet is
/// centred in the railcar with area `iou * railcar area`.
pub fn track_from_trace(
    railcar_id: &str,
    line: u16,
    trace: &[f64],
    quality: impl Fn(usize) -> FrameQuality,
) -> DetectionTrack {
    let (cx, cy) = RAILCAR_BOX.center();
    let records = trace
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let k = t.max(0.0).sqrt();
            let (w, h) = (RAILCAR_BOX.w * k, RAILCAR_BOX.h * k);
            TrackRecord {
                frame: i as u64,
                timestamp_ms: i as i64 * FRAME_MS,
                magnet: BBox::new(cx - w / 2.0, cy - h / 2.0, w, h),
                railcar: RAILCAR_BOX,
                railcar_centroid: (cx, cy),
                quality: quality(i),
            }
        })
        .collect();
    DetectionTrack {
        railcar_id: railcar_id.to_string(),
        line,
        records,
    }
}

pub(crate) fn blurred() -> FrameQuality {
    FrameQuality {
        blur: 0.9,
        ..FrameQuality::nominal()
    }
}

pub(crate) fn frame_quality(bad_frames: &[usize], bad_humps: &[(usize, usize)], i: usize) -> FrameQuality {
    if bad_frames.contains(&i) || bad_humps.iter().any(|&(s, e)| (s..=e).contains(&i)) {
        blurred()
    } else {
        FrameQuality::nominal()
    }
}
