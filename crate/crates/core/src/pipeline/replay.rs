use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{IngestMessage, INGEST_SCHEMA_VERSION};
use crate::annotation::Partition;
use crate::segmentation::iou_trace;
use crate::simulator::{Campaign, FRAME_MS};

/// Unloading end signal. The trace is only digested, not stored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinalizeRequest {
    #[serde(default)]
    pub iou_trace: Option<Vec<f64>>,
}

impl FinalizeRequest {
    pub fn iou_trace_digest(&self) -> Option<String> {
        let t = self.iou_trace.as_ref()?;
        let mut h = Sha256::new();
        for v in t {
            h.update(v.to_le_bytes());
        }
        Some(hex::encode(h.finalize()))
    }
}

/// A campaign as the lines would publish it.
#[derive(Debug, Clone, PartialEq)]
pub struct CampaignReplay {
    pub messages: Vec<IngestMessage>,
    pub finalize: Vec<(String, FinalizeRequest)>,
}

const RAILCAR_SPACING_MS: i64 = 600_000;

/// One message per layer, railcar by railcar, optionally limited to one
/// partition. Dedupe ids are `<railcar>/<layer>`.
pub fn messages_from_campaign(campaign: &Campaign, partition: Option<Partition>) -> CampaignReplay {
    let mut messages = Vec::new();
    let mut finalize = Vec::new();
    for (i, rc) in campaign.railcars.iter().enumerate() {
        if partition.is_some_and(|p| p != rc.partition) {
            continue;
        }
        let base = i as i64 * RAILCAR_SPACING_MS;
        for l in &rc.layers {
            let frame = l.keyframe.map_or(l.layer_index as i64 * 10, |k| k as i64);
            messages.push(IngestMessage {
                schema_version: INGEST_SCHEMA_VERSION,
                dedupe_id: format!("{}/{:03}", rc.railcar_id, l.layer_index),
                line: rc.line,
                railcar_id: rc.railcar_id.clone(),
                layer_index: l.layer_index,
                features: l.features.clone(),
                quality_flags: l.quality_flags.clone(),
                timestamp_ms: base + frame * FRAME_MS,
            });
        }
        let trace = rc.track.as_ref().and_then(|t| iou_trace(t).ok());
        finalize.push((rc.railcar_id.clone(), FinalizeRequest { iou_trace: trace }));
    }
    CampaignReplay { messages, finalize }
}

/// Seeded redelivery: every message appears 1 to `max_copies` times. First
/// copies keep their relative order; extra copies land up to 32 positions
/// later.
pub fn chaos_deliveries(messages: &[IngestMessage], max_copies: usize, seed: u64) -> Vec<IngestMessage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(messages.len() * 2);
    for i in 0..messages.len() {
        keyed.push((i as f64, i));
        let copies = rng.random_range(1..=max_copies.max(1));
        for _ in 1..copies {
            keyed.push((i as f64 + rng.random_range(0.0..32.0), i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    keyed.into_iter().map(|(_, i)| messages[i].clone()).collect()
}
