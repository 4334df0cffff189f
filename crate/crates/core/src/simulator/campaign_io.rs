//! Campaign directory layout:
//!
//! ```text
//! manifest.json          seed, config, config digest, noise floor, counts
//! ground_truth.jsonl     one GroundTruth per railcar
//! annotators.jsonl       one AnnotatorProfile per rater
//! railcars.jsonl         id, line, partition, layer count, rater labels
//! features/<id>.jsonl    one layer (features, quality flags) per line
//! tracks/<id>.jsonl      detection track
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{AnnotatorProfile, Campaign, CampaignConfig, GroundTruth, Result, SimError, SimLayer, SimRailcar};
use crate::annotation::{Partition, RaterEntry, SplitAssignment};
use crate::segmentation::{read_track, write_track};

pub const CAMPAIGN_SCHEMA: &str = "scrapline.campaign.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignManifest {
    pub schema: String,
    pub seed: u64,
    pub config_digest: String,
    pub config: CampaignConfig,
    pub noise_floor: f64,
    pub railcars: usize,
    pub layers: usize,
    pub partitions: BTreeMap<String, usize>,
    pub assumptions: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RailcarRow {
    railcar_id: String,
    line: u16,
    partition: Partition,
    layers: usize,
    ratings: Vec<RaterEntry>,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, &r).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| SimError::Malformed {
            file: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

impl Campaign {
    pub fn manifest(&self) -> CampaignManifest {
        let mut partitions = BTreeMap::new();
        for r in &self.railcars {
            *partitions.entry(r.partition.to_string()).or_insert(0) += 1;
        }
        CampaignManifest {
            schema: CAMPAIGN_SCHEMA.into(),
            seed: self.config.seed,
            config_digest: self.config.digest(),
            config: self.config.clone(),
            noise_floor: self.noise_floor,
            railcars: self.railcars.len(),
            layers: self.railcars.iter().map(|r| r.layers.len()).sum(),
            partitions,
            assumptions: vec![format!(
                "contamination prior uniform on [{}, {}] percent",
                self.config.contamination_min, self.config.contamination_max
            )],
        }
    }
}

pub fn write_campaign(dir: impl AsRef<Path>, campaign: &Campaign) -> Result<CampaignManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("features"))?;
    fs::create_dir_all(dir.join("tracks"))?;
    let manifest = campaign.manifest();
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest).map_err(std::io::Error::other)?,
    )?;
    write_jsonl(&dir.join("ground_truth.jsonl"), &campaign.truth)?;
    write_jsonl(&dir.join("annotators.jsonl"), &campaign.config.annotators)?;
    write_jsonl(
        &dir.join("railcars.jsonl"),
        campaign.railcars.iter().map(|r| RailcarRow {
            railcar_id: r.railcar_id.clone(),
            line: r.line,
            partition: r.partition,
            layers: r.layers.len(),
            ratings: r.ratings.clone(),
        }),
    )?;
    for r in &campaign.railcars {
        write_jsonl(&dir.join("features").join(format!("{}.jsonl", r.railcar_id)), &r.layers)?;
        if let Some(track) = &r.track {
            let mut w = BufWriter::new(File::create(
                dir.join("tracks").join(format!("{}.jsonl", r.railcar_id)),
            )?);
            write_track(&mut w, track)?;
            w.flush()?;
        }
    }
    Ok(manifest)
}

pub fn load_campaign(dir: impl AsRef<Path>) -> Result<Campaign> {
    let dir = dir.as_ref();
    let manifest: CampaignManifest =
        serde_json::from_slice(&fs::read(dir.join("manifest.json"))?).map_err(|e| SimError::Malformed {
            file: "manifest.json".into(),
            message: e.to_string(),
        })?;
    if manifest.schema != CAMPAIGN_SCHEMA {
        return Err(SimError::Malformed {
            file: "manifest.json".into(),
            message: format!("unsupported schema `{}`", manifest.schema),
        });
    }
    if manifest.config.digest() != manifest.config_digest {
        return Err(SimError::Malformed {
            file: "manifest.json".into(),
            message: "config digest mismatch".into(),
        });
    }
    let truth: Vec<GroundTruth> = read_jsonl(&dir.join("ground_truth.jsonl"))?;
    let rows: Vec<RailcarRow> = read_jsonl(&dir.join("railcars.jsonl"))?;
    let mut config = manifest.config.clone();
    let annotators: Vec<AnnotatorProfile> = read_jsonl(&dir.join("annotators.jsonl"))?;
    config.annotators = annotators;
    let mut railcars = Vec::with_capacity(rows.len());
    let mut assignments = BTreeMap::new();
    for row in rows {
        let layers: Vec<SimLayer> = read_jsonl(&dir.join("features").join(format!("{}.jsonl", row.railcar_id)))?;
        if layers.len() != row.layers {
            return Err(SimError::Malformed {
                file: format!("features/{}.jsonl", row.railcar_id),
                message: format!("{} layers, railcars.jsonl says {}", layers.len(), row.layers),
            });
        }
        let track_path = dir.join("tracks").join(format!("{}.jsonl", row.railcar_id));
        let track = if track_path.exists() {
            Some(read_track(BufReader::new(File::open(track_path)?))?)
        } else {
            None
        };
        assignments.insert(row.railcar_id.clone(), row.partition);
        railcars.push(SimRailcar {
            railcar_id: row.railcar_id,
            line: row.line,
            partition: row.partition,
            layers,
            ratings: row.ratings,
            track,
        });
    }
    if truth.len() != railcars.len() {
        return Err(SimError::Malformed {
            file: "ground_truth.jsonl".into(),
            message: "row count differs from railcars.jsonl".into(),
        });
    }
    Ok(Campaign {
        config,
        truth,
        railcars,
        split: SplitAssignment {
            assignments,
            warnings: Vec::new(),
        },
        noise_floor: manifest.noise_floor,
    })
}
