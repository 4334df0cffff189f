//! Escalation policy, operator overrides and the active-learning queue.
//!
//! `cargo run -p scrapline --example escalation_and_overrides`

use std::sync::Arc;

use scrapline::annotation::{AuditLog, Grade};
use scrapline::clock::ManualClock;
use scrapline::model::{MilModel, ModelDims, PoolingKind};
use scrapline::pipeline::{
    FinalizeRequest, IngestMessage, ModelRegistry, OverrideRequest, OverrideValue, Pipeline, PipelineConfig,
    RationaleCode, Role, INGEST_SCHEMA_VERSION,
};

/// Constant contamination `c` and a confident vote for the first grade.
fn constant_model(c: f64) -> Result<MilModel, Box<dyn std::error::Error>> {
    let mut m = MilModel::init(ModelDims::default(), PoolingKind::Attention, 1)?;
    let p = m.params_mut();
    for name in ["regressor.w2", "classifier.w2"] {
        let id = p.id(name)?;
        p.value_mut(id).data_mut().fill(0.0);
    }
    let b = p.id("regressor.b2")?;
    p.value_mut(b).data_mut()[0] = c;
    let b = p.id("classifier.b2")?;
    p.value_mut(b).data_mut().copy_from_slice(&[6.0, 0.0, 0.0, 0.0]);
    Ok(m)
}

fn layer(railcar: &str, i: u32) -> IngestMessage {
    IngestMessage {
        schema_version: INGEST_SCHEMA_VERSION,
        dedupe_id: format!("{railcar}/{i}"),
        line: 2,
        railcar_id: railcar.into(),
        layer_index: i,
        features: (0..32).map(|k| ((k + i as usize) % 5) as f64 / 5.0).collect(),
        quality_flags: Vec::new(),
        timestamp_ms: i as i64 * 40,
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let registry = Arc::new(ModelRegistry::new());
    registry.register(1, constant_model(1.2)?)?;
    registry.register(2, constant_model(3.1)?)?;
    let clock = Arc::new(ManualClock::new(1_000));
    let p = Pipeline::open(
        PipelineConfig::default(),
        registry,
        clock.clone(),
        AuditLog::in_memory(clock.clone()),
    )?;
    println!("policy v{}: {:?}", p.policy().version, p.policy());

    for (rc, version) in [("RC-1", 1), ("RC-2", 2), ("RC-3", 1)] {
        for i in 0..4 {
            p.ingest(version, &layer(rc, i))?;
        }
        clock.advance(500);
        let r = p.finalize(version, rc, &FinalizeRequest::default())?;
        println!(
            "{rc} via v{version}: {:.2}% -> {} {:?}",
            r.contamination.unwrap_or(f64::NAN),
            r.status.as_str(),
            r.flags
        );
    }

    // A senior lowers the bar; reports already issued keep their policy version.
    let v2 = p.update_policy(1.0, 0.5, "senior-1")?;
    println!("policy now v{} (threshold {}%)", v2.version, v2.contamination_threshold);

    let before = p.report("RC-1")?;
    let inspector = OverrideRequest {
        operator_id: "insp-4".into(),
        role: Role::Inspector,
        change: OverrideValue::Grade(Grade::G3AH),
        rationale: Some(RationaleCode::Misgraded),
        note: Some("visible turnings in layer 2".into()),
        expected_version: Some(before.report_version),
    };
    let r = p.apply_override("RC-1", &inspector)?;
    println!(
        "RC-1 override: {} -> {}, history {}",
        before.status.as_str(),
        r.status.as_str(),
        r.history.len()
    );
    match p.apply_override("RC-1", &inspector) {
        Ok(_) => println!("stale override accepted?"),
        Err(e) => println!("stale override rejected: {e}"),
    }
    let missing = OverrideRequest {
        rationale: None,
        expected_version: None,
        ..inspector.clone()
    };
    println!("no rationale: {}", p.apply_override("RC-3", &missing).unwrap_err());

    println!("re-labeling queue:");
    for item in p.queue() {
        println!(
            "  #{} {} corrected={} confidence={:?}",
            item.rank, item.railcar_id, item.corrected, item.confidence
        );
    }
    println!("events published: {}", p.events().head());
    Ok(())
}
