use std::sync::Arc;

use proptest::prelude::*;
use scrapline::annotation::{split_by_railcar, AuditAction, AuditLog, Grade, REFERENCE_RATIOS};
use scrapline::clock::ManualClock;
use scrapline::model::{MilModel, ModelDims, PoolingKind};
use scrapline::pipeline::{
    chaos_deliveries, eligible_railcars, export_dataset, messages_from_campaign, Broker, EventKind, FinalizeRequest,
    IngestMessage, IngestOutcome, ModelRegistry, OverrideRequest, OverrideValue, Pipeline, PipelineConfig,
    PipelineError, RationaleCode, RejectReason, ReportFlag, ReportStatus, Role, INGEST_SCHEMA_VERSION,
};
use scrapline::segmentation::FailureCode;
use scrapline::simulator::{gen_campaign, CampaignConfig};

fn model() -> MilModel {
    MilModel::init(ModelDims::default(), PoolingKind::Attention, 1).unwrap()
}

/// Constant outputs: contamination `c` and class logits `logits`.
fn fixed_model(c: f64, logits: [f64; 4]) -> MilModel {
    let mut m = model();
    let p = m.params_mut();
    for name in ["regressor.w2", "classifier.w2"] {
        let id = p.id(name).unwrap();
        p.value_mut(id).data_mut().fill(0.0);
    }
    let id = p.id("regressor.b2").unwrap();
    p.value_mut(id).data_mut()[0] = c;
    let id = p.id("classifier.b2").unwrap();
    p.value_mut(id).data_mut().copy_from_slice(&logits);
    m
}

const CONFIDENT: [f64; 4] = [5.0, 0.0, 0.0, 0.0];

fn pipeline_with(m: MilModel, cfg: PipelineConfig) -> Pipeline {
    let reg = Arc::new(ModelRegistry::new());
    reg.register(1, m).unwrap();
    let clock = Arc::new(ManualClock::new(1_000));
    Pipeline::open(cfg, reg, clock.clone(), AuditLog::in_memory(clock)).unwrap()
}

fn pipeline(m: MilModel) -> Pipeline {
    pipeline_with(m, PipelineConfig::default())
}

fn msg(railcar: &str, line: u16, layer: u32) -> IngestMessage {
    IngestMessage {
        schema_version: INGEST_SCHEMA_VERSION,
        dedupe_id: format!("{railcar}/{layer}"),
        line,
        railcar_id: railcar.into(),
        layer_index: layer,
        features: (0..32).map(|i| ((i + layer as usize) % 7) as f64 / 7.0).collect(),
        quality_flags: Vec::new(),
        timestamp_ms: layer as i64 * 40,
    }
}

fn fill(p: &Pipeline, railcar: &str, line: u16, layers: u32) {
    for l in 0..layers {
        assert_eq!(p.ingest(1, &msg(railcar, line, l)).unwrap(), IngestOutcome::Accepted);
    }
}

fn ov(role: Role, change: OverrideValue, rationale: Option<RationaleCode>) -> OverrideRequest {
    OverrideRequest {
        operator_id: "op-7".into(),
        role,
        change,
        rationale,
        note: None,
        expected_version: None,
    }
}

#[test]
fn redelivery_is_a_noop() {
    let p = pipeline(model());
    let m = msg("RC-1", 0, 0);
    assert_eq!(p.ingest(1, &m).unwrap(), IngestOutcome::Accepted);
    assert_eq!(p.layer_count(), 1);
    let before = p.snapshot_bytes().unwrap();
    assert_eq!(p.ingest(1, &m).unwrap(), IngestOutcome::Duplicate);
    assert_eq!(p.snapshot_bytes().unwrap(), before);
}

#[test]
fn malformed_messages_are_rejected() {
    let p = pipeline(model());
    let mut m = msg("RC-1", 0, 0);
    m.features.pop();
    assert!(matches!(
        p.ingest(1, &m).unwrap(),
        IngestOutcome::Rejected {
            reason: RejectReason::Schema(_)
        }
    ));
    let mut m = msg("RC-1", 0, 0);
    m.features[3] = f64::NAN;
    assert!(matches!(p.ingest(1, &m).unwrap(), IngestOutcome::Rejected { .. }));
    let mut m = msg("RC-1", 0, 0);
    m.schema_version = 9;
    assert!(matches!(p.ingest(1, &m).unwrap(), IngestOutcome::Rejected { .. }));
    let m = msg("RC-1", 6, 0);
    assert_eq!(
        p.ingest(1, &m).unwrap(),
        IngestOutcome::Rejected {
            reason: RejectReason::UnknownLine(6)
        }
    );
    fill(&p, "RC-2", 1, 1);
    assert_eq!(
        p.ingest(1, &msg("RC-2", 2, 1)).unwrap(),
        IngestOutcome::Rejected {
            reason: RejectReason::LineMismatch { expected: 1 }
        }
    );
    let mut m = msg("RC-2", 1, 0);
    m.dedupe_id = "other".into();
    assert_eq!(
        p.ingest(1, &m).unwrap(),
        IngestOutcome::Rejected {
            reason: RejectReason::LayerConflict(0)
        }
    );
    assert_eq!(p.railcar_ids(), vec!["RC-2".to_string()]);
}

#[test]
fn version_gating() {
    let p = pipeline(model());
    assert!(matches!(
        p.ingest(2, &msg("A", 0, 0)),
        Err(PipelineError::UnknownVersion(2))
    ));
    p.registry().retire(1).unwrap();
    assert!(matches!(
        p.ingest(1, &msg("A", 0, 0)),
        Err(PipelineError::RetiredVersion(1))
    ));
}

#[test]
fn nominal_railcar_is_auto() {
    let p = pipeline(fixed_model(1.0, CONFIDENT));
    fill(&p, "RC-1", 3, 10);
    let r = p.finalize(1, "RC-1", &FinalizeRequest::default()).unwrap();
    assert_eq!(r.status, ReportStatus::Auto);
    assert_eq!(r.layer_count, 10);
    assert_eq!(r.eligible_layers, 10);
    assert!((r.contamination.unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(r.grade, Some(Grade::G3A));
    assert!(r.flags.is_empty());
    assert_eq!(r.model.version, 1);
    assert_eq!(
        r.model.checkpoint_sha256,
        p.registry().get(1).unwrap().model.checkpoint_hash().unwrap()
    );
    let s = r.layer_reg_confidence.unwrap();
    assert_eq!((s.min, s.max), (1.0, 1.0));
}

#[test]
fn high_contamination_escalates() {
    let p = pipeline(fixed_model(3.1, CONFIDENT));
    fill(&p, "RC-1", 0, 4);
    let r = p.finalize(1, "RC-1", &FinalizeRequest::default()).unwrap();
    assert_eq!(r.status, ReportStatus::Escalated);
    assert_eq!(r.flags, vec![ReportFlag::HighContamination]);
    let kinds: Vec<EventKind> = p.events().since(0, 10).iter().map(|e| e.kind).collect();
    assert_eq!(kinds, vec![EventKind::ReportCreated, EventKind::Escalation]);
}

#[test]
fn low_confidence_escalates() {
    // Class probabilities 0.3/0.3/0.2/0.2, so the top class has 0.3.
    let logits = [0.3f64.ln(), 0.3f64.ln(), 0.2f64.ln(), 0.2f64.ln()];
    let p = pipeline(fixed_model(1.0, logits));
    fill(&p, "RC-1", 0, 4);
    let r = p.finalize(1, "RC-1", &FinalizeRequest::default()).unwrap();
    assert!((r.cls_confidence.unwrap() - 0.3).abs() < 1e-12);
    assert_eq!(r.status, ReportStatus::Escalated);
    assert_eq!(r.flags, vec![ReportFlag::LowConfidence]);
}

#[test]
fn no_eligible_layers_escalates() {
    let p = pipeline(model());
    for l in 0..3 {
        let mut m = msg("RC-1", 0, l);
        m.quality_flags = vec![FailureCode::Blur];
        p.ingest(1, &m).unwrap();
    }
    let r = p.finalize(1, "RC-1", &FinalizeRequest::default()).unwrap();
    assert_eq!(r.status, ReportStatus::Escalated);
    assert_eq!(r.flags, vec![ReportFlag::NoEligibleLayers]);
    assert_eq!(r.contamination, None);
    assert_eq!(r.quality.get("BLUR"), Some(&3));
    assert!(matches!(
        p.finalize(1, "nope", &FinalizeRequest::default()),
        Err(PipelineError::UnknownRailcar(_))
    ));
}

#[test]
fn finalize_is_idempotent_and_closes_the_railcar() {
    let p = pipeline(fixed_model(1.0, CONFIDENT));
    fill(&p, "RC-1", 0, 3);
    let req = FinalizeRequest {
        iou_trace: Some(vec![0.0, 0.5, 0.0]),
    };
    let a = p.finalize(1, "RC-1", &req).unwrap();
    let b = p.finalize(1, "RC-1", &req).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.iou_trace_digest.as_ref().map(String::len), Some(64));
    assert_eq!(p.events().head(), 1);
    assert_eq!(
        p.ingest(1, &msg("RC-1", 0, 9)).unwrap(),
        IngestOutcome::Rejected {
            reason: RejectReason::Finalized
        }
    );
}

#[test]
fn override_examples() {
    let p = pipeline(fixed_model(1.0, CONFIDENT));
    fill(&p, "RC-1", 0, 5);
    p.finalize(1, "RC-1", &FinalizeRequest::default()).unwrap();

    let missing = ov(Role::Inspector, OverrideValue::Grade(Grade::G3A1), None);
    assert!(matches!(
        p.apply_override("RC-1", &missing),
        Err(PipelineError::MissingRationale)
    ));
    let viewer = ov(
        Role::Viewer,
        OverrideValue::Grade(Grade::G3A1),
        Some(RationaleCode::Misgraded),
    );
    assert!(matches!(
        p.apply_override("RC-1", &viewer),
        Err(PipelineError::Forbidden { .. })
    ));
    let ghost = ov(
        Role::Inspector,
        OverrideValue::Grade(Grade::G3A1),
        Some(RationaleCode::Misgraded),
    );
    assert!(matches!(
        p.apply_override("RC-9", &ghost),
        Err(PipelineError::UnknownRailcar(_))
    ));

    let r = p
        .apply_override(
            "RC-1",
            &ov(
                Role::Inspector,
                OverrideValue::Grade(Grade::G3A1),
                Some(RationaleCode::Misgraded),
            ),
        )
        .unwrap();
    assert_eq!(r.grade, Some(Grade::G3A1));
    assert_eq!(r.status, ReportStatus::Overridden);
    assert_eq!(r.history.len(), 1);
    assert_eq!(r.history[0].change.old, Some(OverrideValue::Grade(Grade::G3A)));
    assert_eq!(
        p.audit()
            .events()
            .iter()
            .filter(|e| e.action == AuditAction::Override)
            .count(),
        1
    );

    let r = p
        .apply_override(
            "RC-1",
            &ov(
                Role::Inspector,
                OverrideValue::Grade(Grade::G3AH),
                Some(RationaleCode::Misgraded),
            ),
        )
        .unwrap();
    assert_eq!(r.history.len(), 2);
    assert_eq!(r.grade, Some(Grade::G3AH));
    assert_eq!(r.report_version, 3);
    assert_eq!(p.report("RC-1").unwrap(), r);

    let mut stale = ov(
        Role::Inspector,
        OverrideValue::Contamination(4.0),
        Some(RationaleCode::ContaminationMisestimated),
    );
    stale.expected_version = Some(2);
    assert!(matches!(
        p.apply_override("RC-1", &stale),
        Err(PipelineError::Conflict {
            expected: 2,
            current: 3
        })
    ));

    let senior = ov(
        Role::Senior,
        OverrideValue::Contamination(2.5),
        Some(RationaleCode::LabelPolicy),
    );
    let r = p.apply_override("RC-1", &senior).unwrap();
    assert_eq!(r.status, ReportStatus::Adjudicated);
    let late = ov(
        Role::Inspector,
        OverrideValue::Contamination(1.0),
        Some(RationaleCode::ContaminationMisestimated),
    );
    assert!(matches!(
        p.apply_override("RC-1", &late),
        Err(PipelineError::InvalidTransition { .. })
    ));
}

#[test]
fn queue_puts_corrections_first() {
    let p = pipeline(model());
    for (i, id) in ["A", "B", "C"].iter().enumerate() {
        fill(&p, id, i as u16, 3);
        p.finalize(1, id, &FinalizeRequest::default()).unwrap();
    }
    p.apply_override(
        "C",
        &ov(
            Role::Inspector,
            OverrideValue::Contamination(0.5),
            Some(RationaleCode::SensorFault),
        ),
    )
    .unwrap();
    let q = p.queue();
    assert_eq!(q.len(), 3);
    assert_eq!(q[0].railcar_id, "C");
    assert!(q[0].corrected);
    assert_eq!(q.iter().map(|i| i.rank).collect::<Vec<_>>(), vec![1, 2, 3]);
    let conf: Vec<f64> = q[1..].iter().map(|i| i.confidence.unwrap()).collect();
    assert!(conf[0] <= conf[1]);
}

#[test]
fn policy_updates_are_versioned() {
    let p = pipeline(fixed_model(1.5, CONFIDENT));
    fill(&p, "A", 0, 2);
    assert_eq!(
        p.finalize(1, "A", &FinalizeRequest::default()).unwrap().status,
        ReportStatus::Auto
    );
    let pol = p.update_policy(1.0, 0.5, "senior-1").unwrap();
    assert_eq!(pol.version, 2);
    assert!(p.update_policy(-1.0, 0.5, "x").is_err());
    fill(&p, "B", 0, 2);
    let r = p.finalize(1, "B", &FinalizeRequest::default()).unwrap();
    assert_eq!((r.status, r.policy_version), (ReportStatus::Escalated, 2));
    assert_eq!(p.report("A").unwrap().status, ReportStatus::Auto);
    assert_eq!(p.policy_history().len(), 2);
}

#[test]
fn wal_replay_rebuilds_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        wal_path: Some(dir.path().join("pipeline.wal")),
        ..PipelineConfig::default()
    };
    let bytes = {
        let p = pipeline_with(fixed_model(3.0, CONFIDENT), cfg.clone());
        fill(&p, "A", 0, 4);
        fill(&p, "B", 1, 2);
        p.finalize(1, "A", &FinalizeRequest::default()).unwrap();
        p.apply_override(
            "A",
            &ov(
                Role::Inspector,
                OverrideValue::Contamination(1.0),
                Some(RationaleCode::SensorFault),
            ),
        )
        .unwrap();
        p.update_policy(2.5, 0.4, "s").unwrap();
        p.snapshot_bytes().unwrap()
    };
    // A crash mid-append leaves a torn line behind.
    let wal = dir.path().join("pipeline.wal");
    let mut text = std::fs::read(&wal).unwrap();
    text.extend_from_slice(br#"{"kind":"layer","li"#);
    std::fs::write(&wal, text).unwrap();

    let p = pipeline_with(fixed_model(3.0, CONFIDENT), cfg);
    assert_eq!(p.snapshot_bytes().unwrap(), bytes);
    assert_eq!(p.ingest(1, &msg("A", 0, 0)).unwrap(), IngestOutcome::Duplicate);
    assert_eq!(p.ingest(1, &msg("B", 1, 2)).unwrap(), IngestOutcome::Accepted);
}

fn campaign_messages(n: usize) -> (Vec<IngestMessage>, Vec<String>) {
    let camp = gen_campaign(&CampaignConfig {
        n_train: 120,
        n_val: 0,
        n_test: 0,
        ..CampaignConfig::default()
    })
    .unwrap();
    let replay = messages_from_campaign(&camp, None);
    let msgs: Vec<IngestMessage> = replay.messages.into_iter().take(n).collect();
    let mut ids: Vec<String> = msgs.iter().map(|m| m.railcar_id.clone()).collect();
    ids.dedup();
    (msgs, ids)
}

fn run(deliveries: Vec<IngestMessage>, railcars: &[String]) -> (Pipeline, scrapline::pipeline::IngestTally) {
    let p = Arc::new(pipeline(model()));
    let tally = Broker::replay(p.clone(), 1, deliveries).unwrap();
    for id in railcars {
        p.finalize(1, id, &FinalizeRequest::default()).unwrap();
    }
    (Arc::into_inner(p).unwrap(), tally)
}

#[test]
fn chaos_replay_matches_single_delivery() {
    let (msgs, ids) = campaign_messages(1000);
    assert_eq!(msgs.len(), 1000);
    let (clean, t0) = run(msgs.clone(), &ids);
    assert_eq!(t0.accepted, 1000);
    let clean_bytes = clean.snapshot_bytes().unwrap();
    for seed in 0..3 {
        let chaos = chaos_deliveries(&msgs, 5, seed);
        assert!(chaos.len() > 2000);
        let (p, t) = run(chaos.clone(), &ids);
        assert_eq!(t.accepted, 1000);
        assert_eq!(t.duplicate, chaos.len() - 1000);
        assert_eq!(p.layer_count(), 1000);
        assert_eq!(p.reports().len(), ids.len());
        assert_eq!(p.snapshot_bytes().unwrap(), clean_bytes, "seed {seed}");
    }
}

#[test]
fn corrupting_one_line_leaves_others_alone() {
    let (msgs, ids) = campaign_messages(400);
    let (clean, _) = run(msgs.clone(), &ids);
    let mut dirty = Vec::new();
    for m in &msgs {
        if m.line == 0 {
            let mut bad = m.clone();
            bad.features.truncate(5);
            dirty.push(bad);
            let mut nan = m.clone();
            nan.dedupe_id.push('x');
            nan.features[0] = f64::INFINITY;
            dirty.push(nan);
        } else {
            dirty.push(m.clone());
        }
    }
    let others: Vec<String> = ids
        .iter()
        .filter(|id| clean.railcar(id).unwrap().line != 0)
        .cloned()
        .collect();
    let (p, t) = run(dirty, &others);
    assert!(t.rejected > 0);
    for id in &others {
        assert_eq!(p.report(id).unwrap(), clean.report(id).unwrap());
    }
}

#[test]
fn export_is_reproducible() {
    let (msgs, ids) = campaign_messages(300);
    let (p, _) = run(msgs, &ids);
    let eligible = eligible_railcars(&p);
    let split = split_by_railcar(&eligible, REFERENCE_RATIOS, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = export_dataset(&p, None, &split, dir.path(), "ds-1").unwrap();
    assert_eq!(a.rows, eligible.len());
    let b = export_dataset(&p, None, &split, dir.path(), "ds-1").unwrap();
    assert_eq!(a.digest, b.digest);
    let rows = std::fs::read_to_string(dir.path().join("ds-1/rows.jsonl")).unwrap();
    for line in rows.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let id = v["railcar_id"].as_str().unwrap();
        assert_eq!(
            v["partition"].as_str().unwrap(),
            split.partition_of(id).unwrap().as_str()
        );
    }
    p.apply_override(
        &ids[0],
        &ov(
            Role::Inspector,
            OverrideValue::Contamination(0.1),
            Some(RationaleCode::SensorFault),
        ),
    )
    .unwrap();
    assert!(matches!(
        export_dataset(&p, None, &split, dir.path(), "ds-1"),
        Err(PipelineError::TagCollision(_))
    ));
    let c = export_dataset(&p, None, &split, dir.path(), "ds-2").unwrap();
    assert_eq!(c.labeled, 1);
    assert!(export_dataset(&p, None, &split, dir.path(), "../x").is_err());
}

#[test]
fn event_cursor_is_gapless() {
    let p = pipeline(fixed_model(3.0, CONFIDENT));
    for i in 0..5 {
        let id = format!("R{i}");
        fill(&p, &id, 0, 2);
        p.finalize(1, &id, &FinalizeRequest::default()).unwrap();
    }
    let all = p.events().since(0, usize::MAX);
    assert_eq!(all.len(), 10);
    assert!(all.iter().enumerate().all(|(i, e)| e.seq == i as u64 + 1));
    let tail = p.events().since(7, 100);
    assert_eq!(tail.iter().map(|e| e.seq).collect::<Vec<_>>(), vec![8, 9, 10]);
    assert!(p.events().since(10, 100).is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn any_duplicate_multiset_converges(seed in any::<u64>(), copies in 1usize..6) {
        let (msgs, ids) = campaign_messages(120);
        let (clean, _) = run(msgs.clone(), &ids);
        let (p, _) = run(chaos_deliveries(&msgs, copies, seed), &ids);
        prop_assert_eq!(p.snapshot_bytes().unwrap(), clean.snapshot_bytes().unwrap());
    }
}
