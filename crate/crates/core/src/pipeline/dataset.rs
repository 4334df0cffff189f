//! Versioned training snapshots: `<root>/<tag>/rows.jsonl` plus a manifest.
//! A tag is written once; exporting it again must reproduce the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{OverrideValue, Pipeline, PipelineError, Result};
use crate::annotation::{AnnotationStore, AuditAction, Grade, LabelProvenance, Partition, SplitAssignment};

pub const DATASET_SCHEMA: &str = "scrapline.dataset.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetLabel {
    pub contamination: Option<f64>,
    pub grade: Option<Grade>,
    /// `consensus`, `adjudicated` or `override`.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetLayer {
    pub layer_index: u32,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub railcar_id: String,
    pub line: u16,
    pub partition: Partition,
    pub layers: Vec<DatasetLayer>,
    pub label: Option<DatasetLabel>,
    pub model_version: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: String,
    pub tag: String,
    pub rows: usize,
    pub labeled: usize,
    pub partitions: BTreeMap<String, usize>,
    pub rows_sha256: String,
    /// SHA-256 of this manifest with `digest` empty.
    pub digest: String,
}

fn valid_tag(tag: &str) -> bool {
    !tag.is_empty()
        && tag != "."
        && tag != ".."
        && tag
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

fn label_for(pipeline: &Pipeline, annotations: Option<&AnnotationStore>, railcar_id: &str) -> Option<DatasetLabel> {
    let mut label = annotations
        .and_then(|a| a.final_label(railcar_id).ok().flatten())
        .map(|f| DatasetLabel {
            contamination: Some(f.contamination),
            grade: f.grade,
            source: match f.provenance {
                LabelProvenance::Consensus => "consensus".into(),
                LabelProvenance::Adjudicated => "adjudicated".into(),
            },
        });
    if let Ok(report) = pipeline.report(railcar_id) {
        for ov in &report.history {
            let l = label.get_or_insert(DatasetLabel {
                contamination: None,
                grade: None,
                source: String::new(),
            });
            match ov.change.new {
                OverrideValue::Contamination(c) => l.contamination = Some(c),
                OverrideValue::Grade(g) => l.grade = Some(g),
            }
            l.source = "override".into();
        }
    }
    label
}

/// Railcars with at least one eligible layer, in id order.
pub fn eligible_railcars(pipeline: &Pipeline) -> Vec<String> {
    pipeline
        .railcar_ids()
        .into_iter()
        .filter(|id| {
            pipeline
                .railcar(id)
                .is_some_and(|s| s.layers.values().any(|l| l.is_eligible()))
        })
        .collect()
}

/// One row per eligible railcar. Every such railcar must have a partition in
/// `split`.
pub fn export_dataset(
    pipeline: &Pipeline,
    annotations: Option<&AnnotationStore>,
    split: &SplitAssignment,
    root: impl AsRef<Path>,
    tag: &str,
) -> Result<DatasetManifest> {
    if !valid_tag(tag) {
        return Err(PipelineError::InvalidTag(tag.to_string()));
    }
    let mut rows = Vec::new();
    for id in eligible_railcars(pipeline) {
        let st = pipeline
            .railcar(&id)
            .ok_or_else(|| PipelineError::UnknownRailcar(id.clone()))?;
        let partition = split
            .partition_of(&id)
            .ok_or_else(|| PipelineError::InvalidTag(format!("{tag}: railcar `{id}` has no partition")))?;
        rows.push(DatasetRow {
            label: label_for(pipeline, annotations, &id),
            model_version: st.report.as_ref().map(|r| r.model.version),
            layers: st
                .layers
                .values()
                .filter(|l| l.is_eligible())
                .map(|l| DatasetLayer {
                    layer_index: l.layer_index,
                    features: l.features.clone(),
                })
                .collect(),
            railcar_id: id,
            line: st.line,
            partition,
        });
    }
    let mut body = Vec::new();
    for r in &rows {
        serde_json::to_writer(&mut body, r)?;
        body.push(b'\n');
    }
    let mut partitions = BTreeMap::new();
    for p in Partition::ALL {
        partitions.insert(p.to_string(), rows.iter().filter(|r| r.partition == p).count());
    }
    let mut manifest = DatasetManifest {
        schema: DATASET_SCHEMA.into(),
        tag: tag.to_string(),
        rows: rows.len(),
        labeled: rows.iter().filter(|r| r.label.is_some()).count(),
        partitions,
        rows_sha256: hex::encode(Sha256::digest(&body)),
        digest: String::new(),
    };
    manifest.digest = hex::encode(Sha256::digest(serde_json::to_vec(&manifest)?));

    let dir = root.as_ref().join(tag);
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        let existing: DatasetManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
        let same_rows = fs::read(dir.join("rows.jsonl")).map(|b| b == body).unwrap_or(false);
        if existing == manifest && same_rows {
            return Ok(existing);
        }
        return Err(PipelineError::TagCollision(tag.to_string()));
    }
    let tmp = root.as_ref().join(format!(".{tag}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    fs::write(tmp.join("rows.jsonl"), &body)?;
    fs::write(tmp.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    fs::rename(&tmp, &dir)?;
    pipeline
        .audit()
        .append("pipeline", AuditAction::Export, &format!("dataset/{tag}"), &manifest)?;
    Ok(manifest)
}
