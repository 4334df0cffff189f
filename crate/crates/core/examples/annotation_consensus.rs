//! Double-blind labeling: route a railcar to three raters, aggregate their
//! labels, send disagreements to a senior and split by railcar.
//!
//! `cargo run -p scrapline --example annotation_consensus`

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scrapline::annotation::{
    split_by_railcar, AnnotationStore, AuditLog, Grade, RaterEntry, SeniorLabel, REFERENCE_RATIOS,
};
use scrapline::clock::SystemClock;

fn entry(rater: &str, contamination: f64, grade: Grade) -> RaterEntry {
    RaterEntry {
        rater: rater.into(),
        contamination,
        grade: Some(grade),
        timestamp_ms: 0,
        excluded_frames: Vec::new(),
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let audit = AuditLog::in_memory(Arc::new(SystemClock));
    let store = AnnotationStore::new("site-salt", 3, audit)?;
    let pool: Vec<String> = (1..=6).map(|i| format!("rater-{i}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    // Close agreement: consensus is final straight away.
    let calm = store.open_item("RC-100", &pool, &mut rng)?;
    let raters = store.record(&calm)?.assigned;
    for (r, c) in raters.iter().zip([2.1, 2.4, 2.2]) {
        store.submit(&calm, entry(r, c, Grade::G3A))?;
    }
    println!("RC-100 -> {calm}: {:?}", store.final_label("RC-100")?);

    // Wide spread and a three-way grade split: needs adjudication.
    let hard = store.open_item("RC-200", &pool, &mut rng)?;
    let raters = store.record(&hard)?.assigned;
    let view = store.view(&hard, &raters[0])?;
    println!(
        "before submitting, {} sees {}/{} submitted and consensus {:?}",
        raters[0], view.submitted, view.assigned, view.consensus
    );
    for (r, (c, g)) in raters
        .iter()
        .zip([(1.0, Grade::G3A), (4.0, Grade::G3A1), (7.5, Grade::CastIron)])
    {
        store.submit(&hard, entry(r, c, g))?;
    }
    println!("pending adjudication: {}", store.pending_adjudication().len());
    store.adjudicate(
        &hard,
        SeniorLabel {
            senior: "senior-1".into(),
            contamination: Some(4.2),
            grade: Some(Grade::G3A1),
        },
    )?;
    println!("RC-200 -> {hard}: {:?}", store.final_label("RC-200")?);
    println!("audit trail: {} events", store.audit().events().len());

    let ids: Vec<String> = (0..40).map(|i| format!("RC-{i:03}")).collect();
    let split = split_by_railcar(&ids, REFERENCE_RATIOS, 7)?;
    println!("40 railcars split {:?} (train, val, test)", split.counts());
    Ok(())
}
