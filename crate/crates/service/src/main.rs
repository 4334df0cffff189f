use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use scrapline::annotation::Partition;
use scrapline::pipeline::Role;
use scrapline::simulator::LabelSource;
use scrapline_service::commands;
use scrapline_service::config::{Config, ModelSpec, Task, TokenSpec};
use scrapline_service::CliError;

/// Railcar scrap acceptance: simulate, train, evaluate and serve.
#[derive(Parser)]
#[command(name = "scrapline", version)]
struct Cli {
    /// TOML config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate a synthetic campaign.
    Simulate(SimulateArgs),
    /// Train a MIL or MTL model on a campaign.
    Train(TrainArgs),
    /// Score a checkpoint on one partition.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Build the annotation store from campaign ratings.
    Annotate(AnnotateArgs),
    /// Dump finalized reports from the write-ahead log.
    Report(ReportArgs),
    /// Write a tagged training dataset from pipeline state.
    Export(ExportArgs),
    /// Publish a campaign to a running service.
    Replay(ReplayArgs),
}

fn serde_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn partition(s: &str) -> Result<Partition, String> {
    serde_enum(s)
}

fn label_source(s: &str) -> Result<LabelSource, String> {
    serde_enum(s)
}

/// `<version>=<path>`, e.g. `1=model.ckpt`.
fn model_spec(s: &str) -> Result<ModelSpec, String> {
    let (v, path) = s.split_once('=').ok_or("expected <version>=<checkpoint>")?;
    let version = v
        .trim_start_matches('v')
        .parse()
        .map_err(|_| format!("bad version `{v}`"))?;
    Ok(ModelSpec {
        version,
        checkpoint: path.into(),
        retired: false,
    })
}

/// `<token>:<operator>:<role>`.
fn token_spec(s: &str) -> Result<TokenSpec, String> {
    let mut it = s.splitn(3, ':');
    match (it.next(), it.next(), it.next()) {
        (Some(token), Some(operator), Some(role)) => Ok(TokenSpec {
            token: token.into(),
            operator: operator.into(),
            role: role.parse::<Role>().map_err(|e| e.to_string())?,
        }),
        _ => Err("expected <token>:<operator>:<role>".into()),
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Share of hot layers.
    #[arg(long)]
    p_hot: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    campaign: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<Task>,
    #[arg(long, value_parser = label_source)]
    labels: Option<LabelSource>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_cls: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    campaign: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = partition)]
    split: Option<Partition>,
    #[arg(long, value_parser = label_source)]
    labels: Option<LabelSource>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    bind: Option<String>,
    /// Repeatable `<version>=<checkpoint>`; replaces configured models.
    #[arg(long = "model", value_parser = model_spec)]
    models: Vec<ModelSpec>,
    /// Repeatable `<token>:<operator>:<role>`; added to configured tokens.
    #[arg(long = "token", value_parser = token_spec)]
    tokens: Vec<TokenSpec>,
    #[arg(long)]
    wal: Option<PathBuf>,
    #[arg(long)]
    lines: Option<u16>,
    /// Seed the annotation store from this campaign.
    #[arg(long)]
    annotations: Option<PathBuf>,
}

#[derive(Args)]
struct AnnotateArgs {
    #[arg(long)]
    campaign: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    salt: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    wal: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    wal: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    tag: Option<String>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Label rows from this campaign's ratings.
    #[arg(long)]
    campaign: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    campaign: Option<PathBuf>,
    #[arg(long)]
    url: Option<String>,
    #[arg(long)]
    version: Option<u32>,
    /// Deliver each message up to this many times.
    #[arg(long)]
    max_deliveries: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = partition)]
    partition: Option<Partition>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn print<T: Serialize>(v: &T) -> Result<(), CliError> {
    let s = serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    match cli.verb {
        Verb::Simulate(a) => {
            let c = &mut cfg.simulate;
            set(&mut c.out, a.out);
            set(&mut c.campaign.seed, a.seed);
            set(&mut c.campaign.n_train, a.n_train);
            set(&mut c.campaign.n_val, a.n_val);
            set(&mut c.campaign.n_test, a.n_test);
            set(&mut c.campaign.p_hot, a.p_hot);
            print(&commands::simulate(c)?)
        }
        Verb::Train(a) => {
            let c = &mut cfg.train;
            set(&mut c.campaign, a.campaign);
            set(&mut c.out, a.out);
            set(&mut c.task, a.task);
            set(&mut c.labels, a.labels);
            set(&mut c.training.epochs, a.epochs);
            set(&mut c.training.seed, a.seed);
            set(&mut c.training.lambda_cls, a.lambda_cls);
            print(&commands::train(c)?)
        }
        Verb::Eval(a) => {
            let c = &mut cfg.eval;
            set(&mut c.campaign, a.campaign);
            set(&mut c.checkpoint, a.checkpoint);
            set(&mut c.split, a.split);
            set(&mut c.labels, a.labels);
            c.out = a.out.or(c.out.take());
            c.csv = a.csv.or(c.csv.take());
            print(&commands::eval(c)?)
        }
        Verb::Serve(a) => {
            let c = &mut cfg.serve;
            set(&mut c.bind, a.bind);
            if !a.models.is_empty() {
                c.models = a.models;
            }
            c.tokens.extend(a.tokens);
            if a.wal.is_some() {
                c.pipeline.wal_path = a.wal;
            }
            set(&mut c.pipeline.lines, a.lines);
            c.annotations.campaign = a.annotations.or(c.annotations.campaign.take());
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
            rt.block_on(commands::serve(c, commands::shutdown_signal()))
        }
        Verb::Annotate(a) => {
            let c = &mut cfg.annotate;
            set(&mut c.campaign, a.campaign);
            set(&mut c.out, a.out);
            set(&mut c.salt, a.salt);
            print(&commands::annotate(c)?)
        }
        Verb::Report(a) => {
            let c = &mut cfg.report;
            set(&mut c.wal, a.wal);
            set(&mut c.out, a.out);
            print(&commands::report(c)?)
        }
        Verb::Export(a) => {
            let c = &mut cfg.export;
            set(&mut c.wal, a.wal);
            set(&mut c.out, a.out);
            set(&mut c.tag, a.tag);
            set(&mut c.split_seed, a.split_seed);
            c.campaign = a.campaign.or(c.campaign.take());
            print(&commands::export(c)?)
        }
        Verb::Replay(a) => {
            let c = &mut cfg.replay;
            set(&mut c.campaign, a.campaign);
            set(&mut c.url, a.url);
            set(&mut c.version, a.version);
            set(&mut c.max_deliveries, a.max_deliveries);
            set(&mut c.seed, a.seed);
            c.partition = a.partition.or(c.partition);
            print(&commands::replay(c)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
