//! Serve the HTTP API on a loopback port and drive it the way the operator
//! console does: ingest layers, finalize, read the report, override it and
//! replay the event stream.
//!
//! `cargo run -p scrapline-service --example http_api`

use std::collections::HashMap;
use std::future::IntoFuture;
use std::sync::Arc;

use reqwest::blocking::Client;
use serde_json::{json, Value};

use scrapline::annotation::{AnnotationStore, AuditLog};
use scrapline::clock::SystemClock;
use scrapline::model::{MilModel, ModelDims, PoolingKind};
use scrapline::pipeline::{ModelRegistry, Pipeline, PipelineConfig, Role, INGEST_SCHEMA_VERSION};
use scrapline_service::api::{router, AppState, Operator, TOKEN_HEADER};

fn console(base: &str) -> Result<(), reqwest::Error> {
    let http = Client::new();
    let health: Value = http.get(format!("{base}/healthz")).send()?.json()?;
    println!("healthz: status {} serving {}", health["status"], health["version"]);

    for layer in 0..5u32 {
        let body = json!({
            "schema_version": INGEST_SCHEMA_VERSION,
            "dedupe_id": format!("RC-9/{layer}"),
            "line": 1,
            "railcar_id": "RC-9",
            "layer_index": layer,
            "features": (0..32).map(|i| ((i + layer) % 4) as f64 / 4.0).collect::<Vec<_>>(),
            "quality_flags": [],
            "timestamp_ms": layer * 40,
        });
        let r = http.post(format!("{base}/v1/lines/1/layers")).json(&body).send()?;
        if layer == 0 {
            let again = http.post(format!("{base}/v1/lines/1/layers")).json(&body).send()?;
            println!("layer 0: {} then redelivery {}", r.status(), again.status());
        }
    }

    let report: Value = http.post(format!("{base}/v1/railcars/RC-9/finalize")).send()?.json()?;
    println!(
        "report: {:.2}% grade {} status {} flags {}",
        report["contamination"].as_f64().unwrap_or(f64::NAN),
        report["grade"],
        report["status"],
        report["flags"]
    );

    let change = json!({
        "change": {"field": "contamination", "value": 2.5},
        "rationale": "CONTAMINATION_MISESTIMATED",
        "expected_version": report["report_version"],
    });
    let r = http
        .post(format!("{base}/railcars/RC-9/override"))
        .json(&change)
        .send()?;
    println!("override without a token: {}", r.status());
    let r: Value = http
        .post(format!("{base}/railcars/RC-9/override"))
        .header(TOKEN_HEADER, "insp-token")
        .json(&change)
        .send()?
        .json()?;
    println!(
        "override as inspector: status {} version {}",
        r["status"], r["report_version"]
    );

    let queue: Value = http.get(format!("{base}/queue/active-learning")).send()?.json()?;
    println!("queue: {queue}");

    let events = http
        .get(format!("{base}/events/stream?cursor=0&follow=false"))
        .send()?
        .text()?;
    for line in events.lines().filter(|l| l.starts_with("event:")) {
        println!("  {line}");
    }
    Ok(())
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let registry = Arc::new(ModelRegistry::new());
    registry.register(1, MilModel::init(ModelDims::default(), PoolingKind::Attention, 5)?)?;
    let clock = Arc::new(SystemClock);
    let pipeline = Arc::new(Pipeline::open(
        PipelineConfig::default(),
        registry,
        clock.clone(),
        AuditLog::in_memory(clock.clone()),
    )?);
    let annotations = Arc::new(AnnotationStore::new("salt", 3, AuditLog::in_memory(clock))?);
    let tokens = HashMap::from([(
        "insp-token".to_string(),
        Operator {
            id: "insp-1".into(),
            role: Role::Inspector,
        },
    )]);
    let state = AppState::new(pipeline, annotations, tokens);

    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let base = format!("http://{}", listener.local_addr()?);
    let server = tokio::spawn(axum::serve(listener, router(state.clone())).into_future());

    tokio::task::spawn_blocking(move || console(&base)).await??;
    server.abort();
    tokio::task::spawn_blocking(move || state.drain()).await?;
    Ok(())
}
