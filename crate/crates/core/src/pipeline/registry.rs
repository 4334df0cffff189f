use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::model::MilModel;

/// What a report records about the model that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRef {
    /// Path version: `/v{version}/...`.
    pub version: u32,
    pub tag: String,
    pub checkpoint_sha256: String,
}

#[derive(Debug, Clone)]
pub struct ModelEntry {
    pub reference: ModelRef,
    pub model: Arc<MilModel>,
    pub retired: bool,
}

/// Frozen models by path version. Retired versions stay listed so requests
/// against them can be told apart from typos.
#[derive(Debug, Default)]
pub struct ModelRegistry {
    entries: RwLock<BTreeMap<u32, ModelEntry>>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, version: u32, model: MilModel) -> Result<ModelRef> {
        let reference = ModelRef {
            version,
            tag: model.version().to_string(),
            checkpoint_sha256: model.checkpoint_hash()?,
        };
        let entry = ModelEntry {
            reference: reference.clone(),
            model: Arc::new(model),
            retired: false,
        };
        self.entries.write().expect("registry lock").insert(version, entry);
        Ok(reference)
    }

    /// Loads a checkpoint; a hash mismatch is an error and nothing is
    /// registered.
    pub fn load(&self, version: u32, path: impl AsRef<Path>) -> Result<ModelRef> {
        let model = MilModel::load(path)?;
        self.register(version, model)
    }

    pub fn retire(&self, version: u32) -> Result<()> {
        let mut entries = self.entries.write().expect("registry lock");
        let e = entries
            .get_mut(&version)
            .ok_or(PipelineError::UnknownVersion(version))?;
        e.retired = true;
        Ok(())
    }

    /// Active model for a path version.
    pub fn get(&self, version: u32) -> Result<ModelEntry> {
        let entries = self.entries.read().expect("registry lock");
        match entries.get(&version) {
            None => Err(PipelineError::UnknownVersion(version)),
            Some(e) if e.retired => Err(PipelineError::RetiredVersion(version)),
            Some(e) => Ok(e.clone()),
        }
    }

    pub fn list(&self) -> Vec<(ModelRef, bool)> {
        let entries = self.entries.read().expect("registry lock");
        entries.values().map(|e| (e.reference.clone(), e.retired)).collect()
    }

    /// Highest non-retired version.
    pub fn latest(&self) -> Option<ModelEntry> {
        let entries = self.entries.read().expect("registry lock");
        entries.values().rev().find(|e| !e.retired).cloned()
    }
}
