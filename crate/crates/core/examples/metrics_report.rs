//! Railcar-level evaluation report as JSON and CSV, plus the per-rater
//! spread used to sanity-check a labeling campaign.
//!
//! `cargo run -p scrapline --example metrics_report`

use scrapline::metrics::{inspector_spread, EvalReport, RaterLabel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let truth = [0.8, 1.5, 2.2, 3.9, 0.4, 5.1];
    let pred = [1.0, 1.4, 2.6, 3.5, 0.5, 4.6];
    let grades_truth = [0, 1, 1, 2, 0, 3];
    let grades_pred = [0, 1, 2, 2, 0, 3];

    let report = EvalReport::build("test", "v3", &pred, &truth, Some((&grades_pred, &grades_truth, 4)))?;
    println!("{}", report.to_json());
    print!("{}", report.to_csv()?);

    // A constant truth column has no R2; the report says so instead of failing.
    let flat = EvalReport::build("val", "v3", &[1.0, 2.0], &[1.5, 1.5], None)?;
    println!("r2 {:?}, warnings {:?}", flat.r2, flat.warnings);

    let labels: Vec<RaterLabel> = [
        ("ann-1", 1.1),
        ("ann-2", 1.4),
        ("ann-3", 0.9),
        ("ann-1", 3.0),
        ("ann-2", 3.6),
        ("ann-3", 3.1),
    ]
    .iter()
    .enumerate()
    .map(|(i, (r, c))| RaterLabel {
        railcar: format!("RC-{}", i / 3),
        rater: r.to_string(),
        value: *c,
    })
    .collect();
    println!("{:#?}", inspector_spread(&labels)?);
    Ok(())
}
