//! One TOML file with a table per verb. Every field has a default, so an
//! empty file is valid and flags fill in the rest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use scrapline::annotation::{Partition, REFERENCE_RATIOS};
use scrapline::model::TrainingConfig;
use scrapline::pipeline::{PipelineConfig, Role};
use scrapline::simulator::{CampaignConfig, LabelSource};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub simulate: SimulateConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub serve: ServeConfig,
    pub annotate: AnnotateConfig,
    pub report: ReportConfig,
    pub export: ExportConfig,
    pub replay: ReplayConfig,
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub out: PathBuf,
    pub campaign: CampaignConfig,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            out: "campaign".into(),
            campaign: CampaignConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Mil,
    Mtl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub campaign: PathBuf,
    pub out: PathBuf,
    pub task: Task,
    pub labels: LabelSource,
    pub training: TrainingConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            campaign: "campaign".into(),
            out: "model.ckpt".into(),
            task: Task::Mtl,
            labels: LabelSource::Consensus,
            training: TrainingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub campaign: PathBuf,
    pub checkpoint: PathBuf,
    pub split: Partition,
    pub labels: LabelSource,
    /// EvalReport JSON; stdout when unset.
    pub out: Option<PathBuf>,
    pub csv: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            campaign: "campaign".into(),
            checkpoint: "model.ckpt".into(),
            split: Partition::Test,
            labels: LabelSource::Consensus,
            out: None,
            csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub version: u32,
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub retired: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenSpec {
    pub token: String,
    pub operator: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub contamination_threshold: f64,
    pub confidence_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationSpec {
    pub salt: String,
    pub raters: usize,
    /// Seed the store with this campaign's ratings.
    pub campaign: Option<PathBuf>,
    pub audit_log: Option<PathBuf>,
}

impl Default for AnnotationSpec {
    fn default() -> Self {
        Self {
            salt: "scrapline".into(),
            raters: 3,
            campaign: None,
            audit_log: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub bind: String,
    pub pipeline: PipelineConfig,
    pub models: Vec<ModelSpec>,
    pub tokens: Vec<TokenSpec>,
    pub policy: Option<PolicySpec>,
    pub annotations: AnnotationSpec,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            pipeline: PipelineConfig::default(),
            models: Vec::new(),
            tokens: Vec::new(),
            policy: None,
            annotations: AnnotationSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotateConfig {
    pub campaign: PathBuf,
    pub out: PathBuf,
    pub salt: String,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        Self {
            campaign: "campaign".into(),
            out: "annotations".into(),
            salt: "scrapline".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub wal: PathBuf,
    pub out: PathBuf,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            wal: "state/pipeline.wal".into(),
            out: "reports.jsonl".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportConfig {
    pub wal: PathBuf,
    pub out: PathBuf,
    pub tag: String,
    pub split_seed: u64,
    pub ratios: [f64; 3],
    /// Labels come from this campaign's ratings when set.
    pub campaign: Option<PathBuf>,
    pub salt: String,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            wal: "state/pipeline.wal".into(),
            out: "datasets".into(),
            tag: "v1".into(),
            split_seed: 0,
            ratios: REFERENCE_RATIOS,
            campaign: None,
            salt: "scrapline".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    pub campaign: PathBuf,
    pub url: String,
    pub version: u32,
    /// Maximum deliveries per message; 1 means no duplicates.
    pub max_deliveries: usize,
    pub seed: u64,
    pub partition: Option<Partition>,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            campaign: "campaign".into(),
            url: "http://127.0.0.1:8080".into(),
            version: 1,
            max_deliveries: 1,
            seed: 0,
            partition: None,
        }
    }
}
