//! Split an unloading into grabs from the magnet/railcar IoU trace, then
//! pick keyframes from the frames that pass the quality gate.
//!
//! `cargo run -p scrapline --example grab_segmentation`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scrapline::segmentation::{segment_grabs, segment_track, FrameQuality, GrabThresholds, SegmenterConfig};
use scrapline::simulator::{gen_iou_trace, track_from_trace};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trace = gen_iou_trace(4, 12, 0.03, &mut rng);

    let grabs = segment_grabs(&trace.values, &GrabThresholds::default())?;
    println!(
        "{} frames, {} humps generated, {} grabs found",
        trace.values.len(),
        trace.humps.len(),
        grabs.len()
    );
    for (g, (s, e)) in grabs.iter().zip(&trace.humps) {
        println!(
            "  grab [{:>3}, {:>3}] peak {:>3} iou {:.3}   generated [{s:>3}, {e:>3}]",
            g.start, g.end, g.peak, g.peak_iou
        );
    }

    // Blur the middle of the second grab; its keyframe moves off the peak.
    let (s, e) = trace.humps[1];
    let track = track_from_trace("RC-DEMO", 0, &trace.values, |f| {
        let mut q = FrameQuality::nominal();
        if f + 2 >= (s + e) / 2 && f <= (s + e) / 2 + 2 {
            q.blur = 0.95;
        }
        q
    });
    let seg = segment_track(&track, &SegmenterConfig::default())?;
    println!("roi: {:?}", seg.conformance);
    for g in &seg.grabs {
        println!(
            "  grab peak {:>3} keyframes {:?} eligible {} {:?}",
            g.peak, g.keyframes, g.eligible, g.failure_codes
        );
    }
    Ok(())
}
