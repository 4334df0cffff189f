//! Publish a campaign through the per-line broker twice: once with every
//! message delivered exactly once, once with shuffled redeliveries. The two
//! stores end up byte-identical. The second run also survives a restart
//! from its write-ahead log.
//!
//! `cargo run --release -p scrapline --example exactly_once_replay`

use std::sync::Arc;

use scrapline::annotation::AuditLog;
use scrapline::clock::ManualClock;
use scrapline::model::{MilModel, ModelDims, PoolingKind};
use scrapline::pipeline::{chaos_deliveries, messages_from_campaign, Broker, ModelRegistry, Pipeline, PipelineConfig};
use scrapline::simulator::{gen_campaign, CampaignConfig};

fn open(cfg: PipelineConfig) -> Result<Arc<Pipeline>, Box<dyn std::error::Error>> {
    let registry = Arc::new(ModelRegistry::new());
    registry.register(1, MilModel::init(ModelDims::default(), PoolingKind::Attention, 3)?)?;
    let clock = Arc::new(ManualClock::new(0));
    Ok(Arc::new(Pipeline::open(
        cfg,
        registry,
        clock.clone(),
        AuditLog::in_memory(clock),
    )?))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let campaign = gen_campaign(&CampaignConfig {
        n_train: 30,
        n_val: 5,
        n_test: 5,
        ..CampaignConfig::default()
    })?;
    let plan = messages_from_campaign(&campaign, None);

    let clean = open(PipelineConfig::default())?;
    let tally = Broker::replay(clean.clone(), 1, plan.messages.clone())?;
    println!("single delivery: {tally:?}");

    let dir = tempfile::tempdir()?;
    let wal = dir.path().join("pipeline.wal");
    let cfg = PipelineConfig {
        wal_path: Some(wal.clone()),
        ..PipelineConfig::default()
    };
    let noisy = open(cfg.clone())?;
    let deliveries = chaos_deliveries(&plan.messages, 4, 99);
    let tally = Broker::replay(noisy.clone(), 1, deliveries.clone())?;
    println!("{} deliveries with redelivery: {tally:?}", deliveries.len());
    println!(
        "stores identical: {}",
        clean.snapshot_bytes()? == noisy.snapshot_bytes()?
    );

    for (id, req) in &plan.finalize {
        clean.finalize(1, id, req)?;
        noisy.finalize(1, id, req)?;
        noisy.finalize(1, id, req)?;
    }
    println!(
        "after finalize (twice on one side): identical {}",
        clean.snapshot_bytes()? == noisy.snapshot_bytes()?
    );

    let bytes = noisy.snapshot_bytes()?;
    drop(noisy);
    let restarted = open(cfg)?;
    println!(
        "restart from {}: {} railcars, identical {}",
        wal.file_name().unwrap_or_default().to_string_lossy(),
        restarted.railcar_ids().len(),
        restarted.snapshot_bytes()? == bytes
    );
    Ok(())
}
