//! Turn accepted pipeline state into a tagged, railcar-split training set
//! labeled from the annotation store.
//!
//! `cargo run -p scrapline --example dataset_export [out-dir]`

use std::sync::Arc;

use scrapline::annotation::{split_by_railcar, AnnotationStore, AuditLog, REFERENCE_RATIOS};
use scrapline::clock::ManualClock;
use scrapline::model::{MilModel, ModelDims, PoolingKind};
use scrapline::pipeline::{
    eligible_railcars, export_dataset, messages_from_campaign, ModelRegistry, Pipeline, PipelineConfig,
};
use scrapline::simulator::{gen_campaign, CampaignConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let campaign = gen_campaign(&CampaignConfig {
        n_train: 24,
        n_val: 6,
        n_test: 6,
        ..CampaignConfig::default()
    })?;
    let registry = Arc::new(ModelRegistry::new());
    registry.register(1, MilModel::init(ModelDims::default(), PoolingKind::Attention, 0)?)?;
    let clock = Arc::new(ManualClock::new(0));
    let audit = AuditLog::in_memory(clock.clone());
    let pipeline = Pipeline::open(PipelineConfig::default(), registry, clock, audit.clone())?;

    let plan = messages_from_campaign(&campaign, None);
    for m in &plan.messages {
        pipeline.ingest(1, m)?;
    }
    for (id, req) in &plan.finalize {
        pipeline.finalize(1, id, req)?;
    }

    let store = AnnotationStore::new("site-salt", 3, audit)?;
    for rc in &campaign.railcars {
        let raters = rc.ratings.iter().map(|r| r.rater.clone()).collect();
        let blind = store.assign(&rc.railcar_id, raters)?;
        for entry in &rc.ratings {
            store.submit(&blind, entry.clone())?;
        }
    }

    let ids = eligible_railcars(&pipeline);
    let split = split_by_railcar(&ids, REFERENCE_RATIOS, 0)?;
    let root = match std::env::args().nth(1) {
        Some(d) => std::path::PathBuf::from(d),
        None => std::env::temp_dir().join("scrapline-datasets"),
    };
    let _ = std::fs::remove_dir_all(root.join("demo"));
    let manifest = export_dataset(&pipeline, Some(&store), &split, &root, "demo")?;
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    println!(
        "{} railcars still wait for a senior and ship unlabeled",
        manifest.rows - manifest.labeled
    );
    Ok(())
}
