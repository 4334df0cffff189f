//! Synthetic unloading campaigns with known ground truth.
//!
//! Every railcar gets a contamination level and grade, 8 to 14 layers whose
//! contamination averages to the railcar value, a detection track whose IoU
//! trace has one hump per layer, per-layer feature vectors
//! `M [c_layer / c_max, grade one-hot] + noise`, and labels from simulated
//! raters with their own offset, scale and noise.

mod campaign_io;
mod trace;

pub use campaign_io::{load_campaign, write_campaign, CampaignManifest, CAMPAIGN_SCHEMA};
pub use trace::{gen_iou_trace, track_from_trace, IouTrace, FRAME_MS, MIN_FRAMES_PER_GRAB, RAILCAR_BOX};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};
use thiserror::Error;

use crate::annotation::{
    aggregate_categorical, aggregate_continuous, split_by_railcar, AnnotationError, CategoricalAggregate, Grade,
    Partition, RaterEntry, SplitAssignment,
};
use crate::model::{Bag, BagLabel, Instance, LabeledBag, ModelError};
use crate::segmentation::{segment_track, DetectionTrack, FailureCode, SegmentationError, SegmenterConfig};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid campaign config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("campaign i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("campaign file {file} is malformed: {message}")]
    Malformed { file: String, message: String },
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorProfile {
    pub rater_id: String,
    /// Additive offset in percent.
    pub bias: f64,
    /// Multiplicative width of the rater's scale.
    pub scale: f64,
    pub sigma: f64,
}

impl AnnotatorProfile {
    pub fn unbiased(rater_id: impl Into<String>, sigma: f64) -> Self {
        Self {
            rater_id: rater_id.into(),
            bias: 0.0,
            scale: 1.0,
            sigma,
        }
    }
}

/// `clamp(bias + scale * truth + N(0, sigma), 0, 100)`.
pub fn annotate_sim<R: Rng + ?Sized>(profile: &AnnotatorProfile, truth: f64, rng: &mut R) -> f64 {
    let noise: f64 = if profile.sigma > 0.0 {
        profile.sigma * rng.sample::<f64, _>(StandardNormal)
    } else {
        0.0
    };
    (profile.bias + profile.scale * truth + noise).clamp(0.0, 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub layers_min: usize,
    pub layers_max: usize,
    pub lines: u16,
    /// Uniform contamination prior `[min, max]`, percent.
    pub contamination_min: f64,
    pub contamination_max: f64,
    pub grade_prior: [f64; 4],
    pub feature_dim: usize,
    pub sigma_feat: f64,
    /// Relative per-layer spread around the railcar level.
    pub layer_jitter: f64,
    /// Probability that a layer is a hot layer.
    pub p_hot: f64,
    /// Contamination multiplier of hot layers before renormalization.
    pub hot_factor: f64,
    /// Scale of the grade columns of the mixing map.
    pub grade_effect: f64,
    pub frames_per_grab: usize,
    pub baseline_noise: f64,
    /// Probability that a single frame is blurred.
    pub p_bad_frame: f64,
    /// Probability that every frame of a grab is blurred, leaving the layer
    /// without a keyframe.
    pub p_bad_grab: f64,
    /// Probability that a rater picks a wrong grade.
    pub grade_error: f64,
    pub annotators: Vec<AnnotatorProfile>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_train: 300,
            n_val: 60,
            n_test: 45,
            layers_min: 8,
            layers_max: 14,
            lines: 6,
            contamination_min: 0.0,
            contamination_max: 5.0,
            grade_prior: [0.25; 4],
            feature_dim: 32,
            sigma_feat: 0.05,
            layer_jitter: 0.1,
            p_hot: 0.0,
            hot_factor: 5.0,
            grade_effect: 1.0,
            frames_per_grab: 9,
            baseline_noise: 0.03,
            p_bad_frame: 0.05,
            p_bad_grab: 0.02,
            grade_error: 0.1,
            annotators: (1..=3)
                .map(|i| AnnotatorProfile::unbiased(format!("rater-{i}"), 0.3))
                .collect(),
        }
    }
}

impl CampaignConfig {
    /// Reference-scale partition sizes (1504 / 305 / 223).
    pub fn full_scale() -> Self {
        Self {
            n_train: 1504,
            n_val: 305,
            n_test: 223,
            ..Self::default()
        }
    }

    /// Default campaign with one layer in five carrying five times the base
    /// contamination.
    pub fn dilution() -> Self {
        Self {
            p_hot: 0.2,
            ..Self::default()
        }
    }

    pub fn n_railcars(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        let probs = [self.p_hot, self.p_bad_frame, self.p_bad_grab, self.grade_error];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.grade_prior.iter().any(|p| *p < 0.0) || (self.grade_prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("grade_prior must be a distribution");
        }
        if self.sigma_feat < 0.0 || self.layer_jitter < 0.0 || self.baseline_noise < 0.0 {
            return bad("noise levels must be >= 0");
        }
        if self.lines == 0 {
            return bad("lines must be >= 1");
        }
        if self.layers_min == 0 || self.layers_min > self.layers_max {
            return bad("need 1 <= layers_min <= layers_max");
        }
        if !(self.contamination_min >= 0.0
            && self.contamination_max > self.contamination_min
            && self.contamination_max <= 100.0)
        {
            return bad("contamination prior must satisfy 0 <= min < max <= 100");
        }
        if self.hot_factor < 1.0 {
            return bad("hot_factor must be >= 1");
        }
        if self.feature_dim == 0 || self.n_railcars() == 0 {
            return bad("feature_dim and railcar count must be positive");
        }
        if self.annotators.len() < crate::annotation::MIN_RATERS {
            return bad("need at least three annotators");
        }
        if self
            .annotators
            .iter()
            .any(|a| a.scale.is_nan() || a.scale <= 0.0 || a.sigma < 0.0)
        {
            return bad("annotator scale must be > 0 and sigma >= 0");
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub railcar_id: String,
    pub contamination: f64,
    pub grade: Grade,
    pub layer_contamination: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimLayer {
    pub layer_index: u32,
    pub features: Vec<f64>,
    /// Empty when the grab has a usable keyframe.
    pub quality_flags: Vec<FailureCode>,
    pub keyframe: Option<usize>,
    pub peak_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRailcar {
    pub railcar_id: String,
    pub line: u16,
    pub partition: Partition,
    pub layers: Vec<SimLayer>,
    pub ratings: Vec<RaterEntry>,
    #[serde(skip)]
    pub track: Option<DetectionTrack>,
}

/// Consensus of a railcar's simulated ratings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConsensus {
    pub contamination: f64,
    pub std: f64,
    pub flagged: bool,
    pub grade: CategoricalAggregate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// Rater mean; tied grades resolved by a senior who knows the truth.
    Consensus,
    Truth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Campaign {
    pub config: CampaignConfig,
    pub truth: Vec<GroundTruth>,
    pub railcars: Vec<SimRailcar>,
    pub split: SplitAssignment,
    pub noise_floor: f64,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn sample_grade<R: Rng + ?Sized>(prior: &[f64; 4], rng: &mut R) -> Grade {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return Grade::ALL[i];
        }
    }
    Grade::CastIron
}

/// Seeded random mixing map, `feature_dim x 5`, columns scaled so each
/// input contributes unit expected squared norm per coordinate.
fn mixing_map(cfg: &CampaignConfig) -> Vec<[f64; 5]> {
    let mut rng = stream(cfg.seed, 10);
    (0..cfg.feature_dim)
        .map(|_| {
            let mut row = [0.0; 5];
            for (j, v) in row.iter_mut().enumerate() {
                let x: f64 = rng.sample(StandardNormal);
                *v = if j == 0 { x } else { x * cfg.grade_effect };
            }
            row
        })
        .collect()
}

/// Per-layer contamination averaging exactly to `c`.
fn layer_levels<R: Rng + ?Sized>(c: f64, n: usize, cfg: &CampaignConfig, rng: &mut R) -> Vec<f64> {
    let weights: Vec<f64> = (0..n)
        .map(|_| {
            let hot = rng.random::<f64>() < cfg.p_hot;
            let base = if hot { cfg.hot_factor } else { 1.0 };
            let jitter: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.layer_jitter;
            base * (1.0 + jitter).max(0.05)
        })
        .collect();
    let mean = weights.iter().sum::<f64>() / n as f64;
    weights.iter().map(|w| c * w / mean).collect()
}

pub fn gen_campaign(cfg: &CampaignConfig) -> Result<Campaign> {
    cfg.validate()?;
    let n = cfg.n_railcars();
    let ids: Vec<String> = (1..=n).map(|i| format!("RC-{i:05}")).collect();
    let total = n as f64;
    let ratios = [
        cfg.n_train as f64 / total,
        cfg.n_val as f64 / total,
        cfg.n_test as f64 / total,
    ];
    let split = split_by_railcar(&ids, ratios, cfg.seed)?;

    let m = mixing_map(cfg);
    let mut truth_rng = stream(cfg.seed, 1);
    let mut feat_rng = stream(cfg.seed, 2);
    let mut track_rng = stream(cfg.seed, 3);
    let mut rater_rng = stream(cfg.seed, 4);
    let feat_noise = Normal::new(0.0, cfg.sigma_feat.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let seg_cfg = SegmenterConfig::default();

    let mut truth = Vec::with_capacity(n);
    let mut railcars = Vec::with_capacity(n);
    for (i, id) in ids.iter().enumerate() {
        let c = truth_rng.random_range(cfg.contamination_min..cfg.contamination_max);
        let grade = sample_grade(&cfg.grade_prior, &mut truth_rng);
        let n_layers = truth_rng.random_range(cfg.layers_min..=cfg.layers_max);
        let levels = layer_levels(c, n_layers, cfg, &mut truth_rng);
        let line = (i % cfg.lines as usize) as u16;

        // Track: one hump per layer, some frames or whole grabs blurred.
        let t = gen_iou_trace(n_layers, cfg.frames_per_grab, cfg.baseline_noise, &mut track_rng);
        let bad_frames: Vec<usize> = (0..t.values.len())
            .filter(|_| track_rng.random::<f64>() < cfg.p_bad_frame)
            .collect();
        let bad_humps: Vec<(usize, usize)> = t
            .humps
            .iter()
            .copied()
            .filter(|_| track_rng.random::<f64>() < cfg.p_bad_grab)
            .collect();
        let track = track_from_trace(id, line, &t.values, |f| {
            trace::frame_quality(&bad_frames, &bad_humps, f)
        });
        let seg = segment_track(&track, &seg_cfg)?;
        if seg.grabs.len() != n_layers {
            return Err(SimError::InvalidConfig(format!(
                "{id}: segmentation found {} grabs, expected {n_layers}",
                seg.grabs.len()
            )));
        }

        let layers = levels
            .iter()
            .zip(&seg.grabs)
            .enumerate()
            .map(|(j, (&cl, grab))| {
                let mut u = [0.0; 5];
                u[0] = cl / cfg.contamination_max;
                u[1 + grade.index()] = 1.0;
                let features = m
                    .iter()
                    .map(|row| {
                        let clean: f64 = row.iter().zip(&u).map(|(a, b)| a * b).sum();
                        if cfg.sigma_feat > 0.0 {
                            clean + feat_noise.sample(&mut feat_rng)
                        } else {
                            clean
                        }
                    })
                    .collect();
                SimLayer {
                    layer_index: j as u32,
                    features,
                    quality_flags: if grab.eligible {
                        Vec::new()
                    } else {
                        grab.failure_codes.clone()
                    },
                    keyframe: grab.keyframes.first().copied(),
                    peak_iou: grab.peak_iou,
                }
            })
            .collect();

        let ratings = cfg
            .annotators
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let rated = if rater_rng.random::<f64>() < cfg.grade_error {
                    let others: Vec<Grade> = Grade::ALL.into_iter().filter(|&g| g != grade).collect();
                    others[rater_rng.random_range(0..others.len())]
                } else {
                    grade
                };
                RaterEntry {
                    rater: p.rater_id.clone(),
                    contamination: annotate_sim(p, c, &mut rater_rng),
                    grade: Some(rated),
                    timestamp_ms: (i * cfg.annotators.len() + k) as i64 * 1000,
                    excluded_frames: Vec::new(),
                }
            })
            .collect();

        truth.push(GroundTruth {
            railcar_id: id.clone(),
            contamination: c,
            grade,
            layer_contamination: levels,
        });
        railcars.push(SimRailcar {
            railcar_id: id.clone(),
            line,
            partition: split.partition_of(id).expect("every id is assigned"),
            layers,
            ratings,
            track: Some(track),
        });
    }
    let noise_floor = noise_floor(cfg, &cfg.annotators);
    Ok(Campaign {
        config: cfg.clone(),
        truth,
        railcars,
        split,
        noise_floor,
    })
}

impl SimRailcar {
    pub fn consensus(&self) -> Result<SimConsensus> {
        let values: Vec<f64> = self.ratings.iter().map(|r| r.contamination).collect();
        let grades: Vec<Grade> = self.ratings.iter().filter_map(|r| r.grade).collect();
        let c = aggregate_continuous(&values)?;
        Ok(SimConsensus {
            contamination: c.mean,
            std: c.std,
            flagged: c.flagged,
            grade: aggregate_categorical(&grades)?,
        })
    }

    pub fn eligible_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.quality_flags.is_empty()).count()
    }

    /// `None` when no layer passed the quality gate.
    pub fn bag(&self) -> Option<Bag> {
        let inst = self
            .layers
            .iter()
            .map(|l| Instance {
                layer_index: l.layer_index,
                features: l.features.clone(),
                quality_flags: l.quality_flags.clone(),
            })
            .collect();
        Bag::new(self.railcar_id.clone(), inst).ok()
    }
}

impl Campaign {
    pub fn truth_of(&self, railcar_id: &str) -> Option<&GroundTruth> {
        self.truth.iter().find(|t| t.railcar_id == railcar_id)
    }

    pub fn railcars_in(&self, p: Partition) -> impl Iterator<Item = &SimRailcar> {
        self.railcars.iter().filter(move |r| r.partition == p)
    }

    /// Labeled bags of one partition. Railcars without an eligible layer
    /// are skipped.
    pub fn labeled_bags(&self, p: Partition, source: LabelSource) -> Result<Vec<LabeledBag>> {
        let mut out = Vec::new();
        for (rc, gt) in self.railcars.iter().zip(&self.truth) {
            if rc.partition != p {
                continue;
            }
            let Some(bag) = rc.bag() else { continue };
            let label = match source {
                LabelSource::Truth => BagLabel {
                    contamination: gt.contamination,
                    grade: Some(gt.grade.index()),
                },
                LabelSource::Consensus => {
                    let c = rc.consensus()?;
                    let grade = match c.grade {
                        CategoricalAggregate::Majority(g) => g,
                        CategoricalAggregate::NeedsTiebreak => gt.grade,
                    };
                    BagLabel {
                        contamination: c.contamination,
                        grade: Some(grade.index()),
                    }
                }
            };
            out.push(LabeledBag::new(bag, label)?);
        }
        Ok(out)
    }
}

/// Closed-form MAE between consensus and truth when every rater has unit
/// scale: the consensus error is `N(mean bias, sqrt(sum sigma^2) / k)` and
/// its absolute value is folded normal. Clamping at 0 and 100 is ignored.
pub fn noise_floor_analytic(profiles: &[AnnotatorProfile]) -> Option<f64> {
    if profiles.is_empty() || profiles.iter().any(|p| p.scale != 1.0) {
        return None;
    }
    let k = profiles.len() as f64;
    let mu = profiles.iter().map(|p| p.bias).sum::<f64>() / k;
    let s = profiles.iter().map(|p| p.sigma * p.sigma).sum::<f64>().sqrt() / k;
    if s == 0.0 {
        return Some(mu.abs());
    }
    let phi = StatNormal::new(0.0, 1.0).expect("standard normal");
    Some(
        s * (2.0 / std::f64::consts::PI).sqrt() * (-mu * mu / (2.0 * s * s)).exp()
            + mu * (1.0 - 2.0 * phi.cdf(-mu / s)),
    )
}

/// Monte Carlo MAE between consensus and truth under the campaign prior,
/// with clamping, for arbitrary rater profiles.
pub fn noise_floor_monte_carlo(cfg: &CampaignConfig, profiles: &[AnnotatorProfile], draws: usize) -> f64 {
    let mut rng = stream(cfg.seed, 20);
    let k = profiles.len() as f64;
    let mut total = 0.0;
    for _ in 0..draws {
        let t = rng.random_range(cfg.contamination_min..cfg.contamination_max);
        let consensus = profiles.iter().map(|p| annotate_sim(p, t, &mut rng)).sum::<f64>() / k;
        total += (consensus - t).abs();
    }
    total / draws as f64
}

/// Best-case MAE of any predictor scored against consensus labels.
pub fn noise_floor(cfg: &CampaignConfig, profiles: &[AnnotatorProfile]) -> f64 {
    noise_floor_analytic(profiles).unwrap_or_else(|| noise_floor_monte_carlo(cfg, profiles, 200_000))
}
