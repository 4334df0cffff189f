//! One function per CLI verb. Each returns a serializable summary that the
//! binary prints as JSON.

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use scrapline::annotation::{split_by_railcar, AnnotationError, AnnotationStore, AuditLog, Partition};
use scrapline::clock::{Clock, SystemClock};
use scrapline::metrics::EvalReport;
use scrapline::model::{train_mil, train_mtl, Bag, CheckpointError, MilModel, ModelError};
use scrapline::pipeline::{
    chaos_deliveries, eligible_railcars, export_dataset, messages_from_campaign, DatasetManifest, IngestMessage,
    IngestOutcome, ModelRegistry, Pipeline, PipelineConfig, PipelineError, RailcarReport, Wal,
};
use scrapline::simulator::{gen_campaign, load_campaign, write_campaign, Campaign, CampaignManifest, SimError};

use crate::api::{self, AppState, Operator};
use crate::config::{
    AnnotateConfig, EvalConfig, ExportConfig, ReplayConfig, ReportConfig, ServeConfig, SimulateConfig, Task,
    TrainConfig,
};
use crate::CliError;

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => CliError::Data(io.to_string()),
            other => CliError::Integrity(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Checkpoint(c) => c.into(),
            ModelError::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<AnnotationError> for CliError {
    fn from(e: AnnotationError) -> Self {
        match e {
            AnnotationError::Corrupt { .. } => CliError::Integrity(e.to_string()),
            AnnotationError::InvalidRatios(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Checkpoint(c) => c.into(),
            PipelineError::Model(m) => m.into(),
            PipelineError::Annotation(a) => a.into(),
            PipelineError::CorruptWal { .. } => CliError::Integrity(e.to_string()),
            PipelineError::InvalidPolicy(m) => CliError::Config(m),
            PipelineError::InvalidTag(_) | PipelineError::TagCollision(_) => CliError::Data(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn clock() -> Arc<dyn Clock> {
    Arc::new(SystemClock)
}

pub fn simulate(cfg: &SimulateConfig) -> Result<CampaignManifest, CliError> {
    let campaign = gen_campaign(&cfg.campaign)?;
    Ok(write_campaign(&cfg.out, &campaign)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub model_version: String,
    pub train_bags: usize,
    pub val_bags: usize,
    pub epochs: usize,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub seconds: f64,
}

pub fn train(cfg: &TrainConfig) -> Result<TrainSummary, CliError> {
    let t0 = Instant::now();
    let campaign = load_campaign(&cfg.campaign)?;
    let train = campaign.labeled_bags(Partition::Train, cfg.labels)?;
    let val = campaign.labeled_bags(Partition::Val, cfg.labels)?;
    let out = match cfg.task {
        Task::Mil => train_mil(&train, &val, &cfg.training)?,
        Task::Mtl => train_mtl(&train, &val, &cfg.training)?,
    };
    out.model.save(&cfg.out)?;
    let last = out.log.epochs.last();
    Ok(TrainSummary {
        checkpoint: cfg.out.display().to_string(),
        checkpoint_sha256: out.model.checkpoint_hash()?,
        model_version: out.model.version().to_string(),
        train_bags: train.len(),
        val_bags: val.len(),
        epochs: out.log.epochs.len(),
        final_train_loss: last.map(|e| e.train_loss),
        final_val_loss: last.and_then(|e| e.val_loss),
        seconds: t0.elapsed().as_secs_f64(),
    })
}

pub fn eval(cfg: &EvalConfig) -> Result<EvalReport, CliError> {
    let model = MilModel::load(&cfg.checkpoint)?;
    let campaign = load_campaign(&cfg.campaign)?;
    let data = campaign.labeled_bags(cfg.split, cfg.labels)?;
    let bags: Vec<&Bag> = data.iter().map(|d| &d.bag).collect();
    let preds = model.predict_batch(&bags)?;
    let pred: Vec<f64> = preds.iter().map(|p| p.contamination).collect();
    let truth: Vec<f64> = data.iter().map(|d| d.label.contamination).collect();
    let classes = model.class_names().len();
    let pc: Option<Vec<usize>> = preds.iter().map(|p| p.grade).collect();
    let tc: Option<Vec<usize>> = data.iter().map(|d| d.label.grade).collect();
    let cls = match (&pc, &tc) {
        (Some(p), Some(t)) if classes > 0 => Some((p.as_slice(), t.as_slice(), classes)),
        _ => None,
    };
    let report = EvalReport::build(cfg.split.as_str(), model.version(), &pred, &truth, cls)
        .map_err(|e| CliError::Data(e.to_string()))?;
    if let Some(path) = &cfg.out {
        std::fs::write(path, report.to_json()).map_err(|e| io_err(path, e))?;
    }
    if let Some(path) = &cfg.csv {
        let csv = report.to_csv().map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(path, csv).map_err(|e| io_err(path, e))?;
    }
    Ok(report)
}

/// Opens one record per railcar with the campaign's raters and submits
/// their ratings, so consensus and adjudication flags are computed exactly
/// as for live labels.
pub fn annotation_store_from_campaign(
    campaign: &Campaign,
    salt: &str,
    audit: AuditLog,
) -> Result<AnnotationStore, CliError> {
    let k = campaign.config.annotators.len();
    let store = AnnotationStore::new(salt.as_bytes().to_vec(), k, audit)?;
    for rc in &campaign.railcars {
        let raters = rc.ratings.iter().map(|r| r.rater.clone()).collect();
        let blind = store.assign(&rc.railcar_id, raters)?;
        for entry in &rc.ratings {
            store.submit(&blind, entry.clone())?;
        }
    }
    Ok(store)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotateSummary {
    pub records: usize,
    pub pending_adjudication: usize,
    pub audit_events: usize,
    pub snapshot: String,
    pub audit_log: String,
}

/// Rebuilds the annotation store from the campaign ratings. Any earlier
/// output in the directory is replaced.
pub fn annotate(cfg: &AnnotateConfig) -> Result<AnnotateSummary, CliError> {
    let campaign = load_campaign(&cfg.campaign)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| io_err(&cfg.out, e))?;
    let audit_path = cfg.out.join("audit.jsonl");
    if audit_path.exists() {
        std::fs::remove_file(&audit_path).map_err(|e| io_err(&audit_path, e))?;
    }
    let audit = AuditLog::open(&audit_path, clock())?;
    let store = annotation_store_from_campaign(&campaign, &cfg.salt, audit)?;
    let snapshot = cfg.out.join("annotations.jsonl");
    store.export_snapshot(&snapshot)?;
    Ok(AnnotateSummary {
        records: store.snapshot().len(),
        pending_adjudication: store.pending_adjudication().len(),
        audit_events: store.audit().len(),
        snapshot: snapshot.display().to_string(),
        audit_log: audit_path.display().to_string(),
    })
}

fn read_only_pipeline(wal: &Path) -> Result<Pipeline, CliError> {
    if !wal.exists() {
        return Err(CliError::Data(format!("{}: no such write-ahead log", wal.display())));
    }
    let records = Wal::read(wal)?;
    Ok(Pipeline::from_records(
        PipelineConfig::default(),
        Arc::new(ModelRegistry::new()),
        clock(),
        AuditLog::in_memory(clock()),
        records,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSummary {
    pub railcars: usize,
    pub reports: usize,
    pub by_status: BTreeMap<String, usize>,
    pub escalated_flags: BTreeMap<String, usize>,
    pub out: String,
}

/// Writes every finalized report as one JSON line, in railcar order.
pub fn report(cfg: &ReportConfig) -> Result<ReportSummary, CliError> {
    let p = read_only_pipeline(&cfg.wal)?;
    let reports = p.reports();
    let mut body = Vec::new();
    let mut by_status = BTreeMap::new();
    let mut flags = BTreeMap::new();
    for r in &reports {
        serde_json::to_writer(&mut body, r).map_err(|e| CliError::Runtime(e.to_string()))?;
        body.push(b'\n');
        *by_status.entry(r.status.to_string()).or_insert(0) += 1;
        for f in &r.flags {
            let name = serde_json::to_value(f).ok().and_then(|v| v.as_str().map(String::from));
            *flags.entry(name.unwrap_or_default()).or_insert(0) += 1;
        }
    }
    if let Some(dir) = cfg.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(&cfg.out, body).map_err(|e| io_err(&cfg.out, e))?;
    Ok(ReportSummary {
        railcars: p.railcar_ids().len(),
        reports: reports.len(),
        by_status,
        escalated_flags: flags,
        out: cfg.out.display().to_string(),
    })
}

/// Exports a tagged dataset from the persisted pipeline state. The split is
/// recomputed from the eligible railcars and the configured seed, so the same
/// state and settings always give the same files.
pub fn export(cfg: &ExportConfig) -> Result<DatasetManifest, CliError> {
    let p = read_only_pipeline(&cfg.wal)?;
    let ids = eligible_railcars(&p);
    if ids.is_empty() {
        return Err(CliError::Data("no railcar has an eligible layer".into()));
    }
    let split = split_by_railcar(&ids, cfg.ratios, cfg.split_seed)?;
    let store = match &cfg.campaign {
        Some(dir) => {
            let campaign = load_campaign(dir)?;
            Some(annotation_store_from_campaign(
                &campaign,
                &cfg.salt,
                AuditLog::in_memory(clock()),
            )?)
        }
        None => None,
    };
    Ok(export_dataset(&p, store.as_ref(), &split, &cfg.out, &cfg.tag)?)
}

/// Builds the app state for `serve`: models, WAL replay, policy, tokens and
/// the annotation store.
pub fn build_state(cfg: &ServeConfig) -> Result<AppState, CliError> {
    if cfg.models.is_empty() {
        return Err(CliError::Config("serve needs at least one model".into()));
    }
    let registry = Arc::new(ModelRegistry::new());
    for m in &cfg.models {
        let r = registry.load(m.version, &m.checkpoint)?;
        log::info!("loaded v{} ({}) sha256 {}", r.version, r.tag, r.checkpoint_sha256);
        if m.retired {
            registry.retire(m.version)?;
        }
    }
    let pipeline = Arc::new(Pipeline::open(
        cfg.pipeline.clone(),
        registry,
        clock(),
        AuditLog::in_memory(clock()),
    )?);
    if let Some(pol) = &cfg.policy {
        let cur = pipeline.policy();
        if cur.contamination_threshold != pol.contamination_threshold
            || cur.confidence_threshold != pol.confidence_threshold
        {
            pipeline.update_policy(pol.contamination_threshold, pol.confidence_threshold, "config")?;
        }
    }
    let audit = match &cfg.annotations.audit_log {
        Some(path) => AuditLog::open(path, clock())?,
        None => AuditLog::in_memory(clock()),
    };
    let annotations = match &cfg.annotations.campaign {
        Some(dir) => annotation_store_from_campaign(&load_campaign(dir)?, &cfg.annotations.salt, audit)?,
        None => AnnotationStore::new(cfg.annotations.salt.as_bytes().to_vec(), cfg.annotations.raters, audit)?,
    };
    let mut tokens = HashMap::new();
    for t in &cfg.tokens {
        tokens.insert(
            t.token.clone(),
            Operator {
                id: t.operator.clone(),
                role: t.role,
            },
        );
    }
    Ok(AppState::new(pipeline, Arc::new(annotations), tokens))
}

/// Serves until `shutdown` resolves, then drains the line queues.
pub async fn serve(cfg: &ServeConfig, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), CliError> {
    let state = build_state(cfg)?;
    let listener = tokio::net::TcpListener::bind(&cfg.bind)
        .await
        .map_err(|e| CliError::Config(format!("bind {}: {e}", cfg.bind)))?;
    log::info!("listening on {}", cfg.bind);
    axum::serve(listener, api::router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    tokio::task::spawn_blocking(move || state.drain())
        .await
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

/// Resolves on Ctrl-C or, on unix, SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub deliveries: usize,
    pub accepted: usize,
    pub duplicate: usize,
    pub rejected: usize,
    pub finalized: usize,
    pub escalated: usize,
    pub max_layer_ms: f64,
    pub seconds: f64,
}

impl ReplaySummary {
    fn merge(&mut self, o: ReplaySummary) {
        self.deliveries += o.deliveries;
        self.accepted += o.accepted;
        self.duplicate += o.duplicate;
        self.rejected += o.rejected;
        self.finalized += o.finalized;
        self.escalated += o.escalated;
        self.max_layer_ms = self.max_layer_ms.max(o.max_layer_ms);
    }
}

fn http_client() -> Result<reqwest::blocking::Client, CliError> {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(30))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

/// Polls `/healthz` until the service answers or `wait` runs out.
pub fn wait_ready(url: &str, wait: Duration) -> Result<(), CliError> {
    let client = http_client()?;
    let deadline = Instant::now() + wait;
    loop {
        match client.get(format!("{url}/healthz")).send() {
            Ok(r) if r.status().is_success() => return Ok(()),
            _ if Instant::now() >= deadline => {
                return Err(CliError::Runtime(format!("{url} not ready after {wait:?}")));
            }
            _ => thread::sleep(Duration::from_millis(100)),
        }
    }
}

/// Publishes a campaign to a running service, one thread per line, then
/// finalizes every railcar of that line.
pub fn replay(cfg: &ReplayConfig) -> Result<ReplaySummary, CliError> {
    let t0 = Instant::now();
    let campaign = load_campaign(&cfg.campaign)?;
    let plan = messages_from_campaign(&campaign, cfg.partition);
    let deliveries = chaos_deliveries(&plan.messages, cfg.max_deliveries.max(1), cfg.seed);
    let url = cfg.url.trim_end_matches('/').to_string();
    wait_ready(&url, Duration::from_secs(10))?;
    let client = http_client()?;

    let mut by_line: BTreeMap<u16, (Vec<IngestMessage>, Vec<String>)> = BTreeMap::new();
    for m in deliveries {
        by_line.entry(m.line).or_default().0.push(m);
    }
    let line_of: HashMap<&str, u16> = campaign
        .railcars
        .iter()
        .map(|r| (r.railcar_id.as_str(), r.line))
        .collect();
    let mut requests: HashMap<String, _> = HashMap::new();
    for (id, req) in plan.finalize {
        let line = line_of[id.as_str()];
        by_line.entry(line).or_default().1.push(id.clone());
        requests.insert(id, req);
    }
    let requests = Arc::new(requests);

    let handles: Vec<_> = by_line
        .into_iter()
        .map(|(line, (msgs, railcars))| {
            let client = client.clone();
            let url = url.clone();
            let requests = requests.clone();
            let version = cfg.version;
            thread::spawn(move || -> Result<ReplaySummary, CliError> {
                let mut s = ReplaySummary::default();
                for m in &msgs {
                    let t = Instant::now();
                    let resp = client
                        .post(format!("{url}/v{version}/lines/{line}/layers"))
                        .json(m)
                        .send()
                        .map_err(|e| CliError::Runtime(e.to_string()))?;
                    let status = resp.status();
                    let outcome: IngestOutcome = resp
                        .json()
                        .map_err(|e| CliError::Runtime(format!("layer response ({status}): {e}")))?;
                    s.max_layer_ms = s.max_layer_ms.max(t.elapsed().as_secs_f64() * 1e3);
                    s.deliveries += 1;
                    match outcome {
                        IngestOutcome::Accepted => s.accepted += 1,
                        IngestOutcome::Duplicate => s.duplicate += 1,
                        IngestOutcome::Rejected { reason } => {
                            log::warn!("{} rejected: {reason}", m.dedupe_id);
                            s.rejected += 1;
                        }
                    }
                }
                for id in railcars {
                    let resp = client
                        .post(format!("{url}/v{version}/railcars/{id}/finalize"))
                        .json(&requests[&id])
                        .send()
                        .map_err(|e| CliError::Runtime(e.to_string()))?;
                    if !resp.status().is_success() {
                        let status = resp.status();
                        let body = resp.text().unwrap_or_default();
                        return Err(CliError::Runtime(format!("finalize {id}: {status} {body}")));
                    }
                    let report: RailcarReport = resp.json().map_err(|e| CliError::Runtime(e.to_string()))?;
                    s.finalized += 1;
                    if !report.flags.is_empty() {
                        s.escalated += 1;
                    }
                }
                Ok(s)
            })
        })
        .collect();
    let mut total = ReplaySummary::default();
    for h in handles {
        let s = h
            .join()
            .map_err(|_| CliError::Runtime("replay worker panicked".into()))??;
        total.merge(s);
    }
    total.seconds = t0.elapsed().as_secs_f64();
    Ok(total)
}
