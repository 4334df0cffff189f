//! Attention-pooled multi-instance model with regression and grade heads.
//!
//! Each railcar is a bag of layer instances. Instances go through a shared
//! MLP encoder, a Linear-Tanh-Linear attention scorer produces one score
//! per instance, a softmax across the bag turns scores into weights, and the
//! weighted sum of encodings feeds two heads:
//!
//! * regression: `Linear(enc, 256) -> ReLU -> Dropout -> Linear(256, 1)`
//! * classification: `Linear(enc, 256) -> ReLU -> Dropout -> Linear(256, classes)`

mod checkpoint;
pub(crate) mod net;
mod train;

pub use checkpoint::{CheckpointError, CHECKPOINT_FORMAT};
pub use net::{BagEmbedding, BagPrediction, Confidence, MilModel};
pub use train::{
    sample_instance_indices, sample_instances, select_lambda, train_mil, train_mtl, EpochLog, LambdaScore,
    LambdaSelection, StepLoss, TrainOutcome, TrainingConfig, TrainingLog,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmentation::FailureCode;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("bag `{0}` has no eligible instances")]
    EmptyBag(String),
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid label for `{railcar}`: {reason}")]
    InvalidLabel { railcar: String, reason: String },
    #[error("bag `{0}` has no classification label")]
    MissingClassLabel(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss {value} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, value: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// One layer (magnet grab) of a railcar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub layer_index: u32,
    pub features: Vec<f64>,
    #[serde(default)]
    pub quality_flags: Vec<FailureCode>,
}

impl Instance {
    pub fn new(layer_index: u32, features: Vec<f64>) -> Self {
        Self {
            layer_index,
            features,
            quality_flags: Vec::new(),
        }
    }

    pub fn is_eligible(&self) -> bool {
        self.quality_flags.is_empty()
    }
}

/// All layers of one railcar, ordered by layer index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    railcar_id: String,
    instances: Vec<Instance>,
}

impl Bag {
    /// Sorts instances by layer index and checks the bag is usable: at least
    /// one eligible instance and a single shared feature dimension.
    pub fn new(railcar_id: impl Into<String>, mut instances: Vec<Instance>) -> Result<Self> {
        let railcar_id = railcar_id.into();
        instances.sort_by_key(|i| i.layer_index);
        let Some(first) = instances.first() else {
            return Err(ModelError::EmptyBag(railcar_id));
        };
        let dim = first.features.len();
        for inst in &instances {
            if inst.features.len() != dim {
                return Err(ModelError::DimensionMismatch {
                    expected: dim,
                    got: inst.features.len(),
                });
            }
        }
        if !instances.iter().any(Instance::is_eligible) {
            return Err(ModelError::EmptyBag(railcar_id));
        }
        Ok(Self { railcar_id, instances })
    }

    pub fn railcar_id(&self) -> &str {
        &self.railcar_id
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn eligible(&self) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(|i| i.is_eligible())
    }

    pub fn eligible_features(&self) -> Vec<&[f64]> {
        self.eligible().map(|i| i.features.as_slice()).collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.instances[0].features.len()
    }
}

/// Railcar-level targets: contamination percent and optional grade index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BagLabel {
    pub contamination: f64,
    pub grade: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBag {
    pub bag: Bag,
    pub label: BagLabel,
}

impl LabeledBag {
    pub fn new(bag: Bag, label: BagLabel) -> Result<Self> {
        let c = label.contamination;
        if !(0.0..=100.0).contains(&c) {
            return Err(ModelError::InvalidLabel {
                railcar: bag.railcar_id().to_string(),
                reason: format!("contamination {c} outside [0, 100]"),
            });
        }
        Ok(Self { bag, label })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub enc_dim: usize,
    pub attn_dim: usize,
    pub head_hidden: usize,
    pub class_num: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            enc_dim: 128,
            attn_dim: 64,
            head_hidden: 256,
            class_num: 4,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if [
            self.feature_dim,
            self.enc_dim,
            self.attn_dim,
            self.head_hidden,
            self.class_num,
        ]
        .contains(&0)
        {
            return Err(ModelError::InvalidConfig(
                "all model dimensions must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// How instance encodings are combined into the bag embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    Attention,
    /// Uniform weights; the baseline the attention scorer is compared against.
    Mean,
}

/// Which instances are pooled at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "samples")]
pub enum InferencePooling {
    AllLayers,
    Sampled(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTask {
    /// Regression head only.
    Mil,
    /// Joint regression + classification.
    Mtl,
}

/// Scrap grade names, in class-index order.
pub const GRADE_NAMES: [&str; 4] = ["3A", "3A1", "3AH", "cast iron"];
