//! JSON checkpoints. The envelope carries a SHA-256 of the serialized body,
//! checked on load so a truncated or edited file never yields a model.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::net::{resolve_ids, MilModel};
use super::{InferencePooling, ModelDims, ModelTask, PoolingKind, TrainingConfig};
use crate::tensor::{ParamTape, Tensor2D};

pub const CHECKPOINT_FORMAT: &str = "scrapline.checkpoint";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint format `{format}` v{version}")]
    Format { format: String, version: u32 },
    #[error("checkpoint hash mismatch: stored {stored}, computed {computed}")]
    HashMismatch { stored: String, computed: String },
    #[error("checkpoint parameters inconsistent: {0}")]
    Inconsistent(String),
}

#[derive(Serialize, Deserialize)]
struct StoredParam {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Body {
    version: String,
    task: ModelTask,
    pooling: PoolingKind,
    inference: InferencePooling,
    dims: ModelDims,
    dropout: f64,
    sigma_ref: f64,
    class_names: Vec<String>,
    training: Option<TrainingConfig>,
    params: Vec<StoredParam>,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    format_version: u32,
    content_sha256: String,
    body: Body,
}

fn body_hash(body: &Body) -> Result<String, CheckpointError> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(body)?)))
}

impl MilModel {
    /// The `content_sha256` this model's checkpoint carries.
    pub fn checkpoint_hash(&self) -> Result<String, CheckpointError> {
        body_hash(&self.body())
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let body = self.body();
        let env = Envelope {
            format: CHECKPOINT_FORMAT.into(),
            format_version: FORMAT_VERSION,
            content_sha256: body_hash(&body)?,
            body,
        };
        Ok(serde_json::to_vec_pretty(&env)?)
    }

    fn body(&self) -> Body {
        Body {
            version: self.version.clone(),
            task: self.task,
            pooling: self.pooling,
            inference: self.inference,
            dims: self.dims.clone(),
            dropout: self.dropout,
            sigma_ref: self.sigma_ref,
            class_names: self.class_names.clone(),
            training: self.training.clone(),
            params: self
                .params
                .iter()
                .map(|(name, t)| StoredParam {
                    name: name.to_string(),
                    rows: t.rows(),
                    cols: t.cols(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let env: Envelope = serde_json::from_slice(bytes)?;
        if env.format != CHECKPOINT_FORMAT || env.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Format {
                format: env.format,
                version: env.format_version,
            });
        }
        let computed = body_hash(&env.body)?;
        if computed != env.content_sha256 {
            return Err(CheckpointError::HashMismatch {
                stored: env.content_sha256,
                computed,
            });
        }
        let b = env.body;
        let bad = |m: String| CheckpointError::Inconsistent(m);
        b.dims.validate().map_err(|e| bad(e.to_string()))?;
        let mut params = ParamTape::new();
        for p in b.params {
            let t = Tensor2D::new(p.rows, p.cols, p.data).map_err(|e| bad(e.to_string()))?;
            params.register(&p.name, t).map_err(|e| bad(e.to_string()))?;
        }
        let expected = super::net::param_layout(&b.dims);
        if expected.len() != params.len() {
            return Err(bad(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, r, c) in expected {
            let id = params.id(name).map_err(|e| bad(e.to_string()))?;
            if params.value(id).shape() != (r, c) {
                return Err(bad(format!(
                    "`{name}` has shape {:?}, expected ({r}, {c})",
                    params.value(id).shape()
                )));
            }
        }
        let ids = resolve_ids(&params).map_err(|e| bad(e.to_string()))?;
        if b.class_names.len() != b.dims.class_num {
            return Err(bad("class_names length differs from class_num".into()));
        }
        Ok(MilModel {
            dims: b.dims,
            params,
            ids,
            task: b.task,
            pooling: b.pooling,
            inference: b.inference,
            dropout: b.dropout,
            sigma_ref: b.sigma_ref,
            class_names: b.class_names,
            version: b.version,
            training: b.training,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_checkpoint_bytes()?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }
}
