use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::MilModel;
use super::{Bag, InferencePooling, LabeledBag, ModelDims, ModelError, ModelTask, PoolingKind, Result};
use crate::metrics;
use crate::tensor::{Graph, Optimizer, OptimizerConfig, Segments, TensorError, Var};

/// Hyper-parameters for both training procedures. The epoch count, batch
/// size and learning rate have no published values; these defaults are ours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    /// Instances sampled per bag for every training step.
    pub samples_per_bag: usize,
    pub batch_size: usize,
    /// Weight of the classification loss in the joint objective.
    pub lambda_cls: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub dropout: f64,
    pub dims: ModelDims,
    pub pooling: PoolingKind,
    pub inference: InferencePooling,
    /// Reference spread for the regression confidence score, in percent.
    pub sigma_ref: f64,
    /// Overrides the digest-derived model version.
    pub version_tag: Option<String>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            samples_per_bag: 5,
            batch_size: 16,
            lambda_cls: 1.0,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            dropout: 0.25,
            dims: ModelDims::default(),
            pooling: PoolingKind::Attention,
            inference: InferencePooling::AllLayers,
            sigma_ref: 2.0,
            version_tag: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.samples_per_bag == 0 {
            return bad("samples_per_bag must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lambda_cls >= 0.0 && self.lambda_cls.is_finite()) {
            return bad(format!("lambda_cls must be >= 0, got {}", self.lambda_cls));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.sigma_ref.is_nan() || self.sigma_ref <= 0.0 {
            return bad("sigma_ref must be positive".into());
        }
        self.optimizer.validate()?;
        self.dims.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub regression: f64,
    pub classification: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLoss>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MilModel,
    pub log: TrainingLog,
}

/// Indices of `s` instances out of `n`: uniform without replacement when
/// `n >= s`, otherwise uniform with replacement.
pub fn sample_instance_indices<R: Rng + ?Sized>(n: usize, s: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(ModelError::EmptyBag(String::new()));
    }
    if s == 0 {
        return Err(ModelError::InvalidConfig("samples per bag must be >= 1".into()));
    }
    if n >= s {
        Ok(sample(rng, n, s).into_vec())
    } else {
        Ok((0..s).map(|_| rng.random_range(0..n)).collect())
    }
}

/// Feature vectors of `s` sampled eligible instances.
pub fn sample_instances<'a, R: Rng + ?Sized>(bag: &'a Bag, s: usize, rng: &mut R) -> Result<Vec<&'a [f64]>> {
    let feats = bag.eligible_features();
    let idx = sample_instance_indices(feats.len(), s, rng).map_err(|e| match e {
        ModelError::EmptyBag(_) => ModelError::EmptyBag(bag.railcar_id().to_string()),
        other => other,
    })?;
    Ok(idx.into_iter().map(|i| feats[i]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Objective {
    Regression,
    Joint { lambda: f64 },
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn check_dataset(data: &[LabeledBag], cfg: &TrainingConfig, need_grade: bool) -> Result<()> {
    for lb in data {
        if lb.bag.feature_dim() != cfg.dims.feature_dim {
            return Err(ModelError::DimensionMismatch {
                expected: cfg.dims.feature_dim,
                got: lb.bag.feature_dim(),
            });
        }
        if need_grade {
            match lb.label.grade {
                None => return Err(ModelError::MissingClassLabel(lb.bag.railcar_id().to_string())),
                Some(g) if g >= cfg.dims.class_num => {
                    return Err(ModelError::InvalidLabel {
                        railcar: lb.bag.railcar_id().to_string(),
                        reason: format!("grade {g} >= class_num {}", cfg.dims.class_num),
                    })
                }
                Some(_) => {}
            }
        }
    }
    Ok(())
}

/// Attention-MIL regression training: sample, encode, score, pool, regress,
/// MSE, one optimizer step per minibatch.
pub fn train_mil(train: &[LabeledBag], val: &[LabeledBag], cfg: &TrainingConfig) -> Result<TrainOutcome> {
    run(train, val, cfg, Objective::Regression)
}

/// Joint training of both heads on `L_reg + lambda_cls * L_cls` over a
/// shared encoder and attention pooling.
pub fn train_mtl(train: &[LabeledBag], val: &[LabeledBag], cfg: &TrainingConfig) -> Result<TrainOutcome> {
    run(train, val, cfg, Objective::Joint { lambda: cfg.lambda_cls })
}

fn run(train: &[LabeledBag], val: &[LabeledBag], cfg: &TrainingConfig, objective: Objective) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let joint = matches!(objective, Objective::Joint { .. });
    check_dataset(train, cfg, joint)?;
    check_dataset(val, cfg, joint)?;

    let mut model = MilModel::init(cfg.dims.clone(), cfg.pooling, cfg.seed)?;
    model.dropout = cfg.dropout;
    model.sigma_ref = cfg.sigma_ref;
    model.inference = cfg.inference;
    model.task = if joint { ModelTask::Mtl } else { ModelTask::Mil };

    let mut sampler = stream(cfg.seed, 1);
    let mut reg_dropout = stream(cfg.seed, 2);
    let mut cls_dropout = stream(cfg.seed, 3);
    let mut opt = Optimizer::new(cfg.optimizer.clone())?;
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut sampler);
        let mut epoch_total = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut rows: Vec<&[f64]> = Vec::with_capacity(chunk.len() * cfg.samples_per_bag);
            let mut targets = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let lb = &train[i];
                rows.extend(sample_instances(&lb.bag, cfg.samples_per_bag, &mut sampler)?);
                targets.push(lb.label.contamination);
                labels.push(lb.label.grade.unwrap_or(0));
            }
            let segs = Segments::from_lengths(&vec![cfg.samples_per_bag; chunk.len()])?;
            let x = model.stack(&rows)?;

            let non_finite = |e: ModelError| match e {
                ModelError::Tensor(TensorError::NonFinite { .. }) => ModelError::NonFiniteLoss {
                    epoch,
                    step,
                    value: f64::NAN,
                },
                other => other,
            };
            let mut g = Graph::training();
            let (total, reg_loss, cls_loss) = (|| -> Result<(Var, Var, Option<Var>)> {
                let xv = g.input(x)?;
                let h = model.encode(&mut g, xv)?;
                let (z, _) = model.pool(&mut g, h, &segs)?;
                let reg = model.regression_head(&mut g, z, &mut reg_dropout as &mut dyn RngCore)?;
                let reg_loss = g.mse(reg, &targets)?;
                match objective {
                    Objective::Regression => Ok((reg_loss, reg_loss, None)),
                    Objective::Joint { lambda } => {
                        let logits = model.classification_head(&mut g, z, &mut cls_dropout as &mut dyn RngCore)?;
                        let cls_loss = g.cross_entropy(logits, &labels)?;
                        let weighted = g.scale(cls_loss, lambda)?;
                        Ok((g.add(reg_loss, weighted)?, reg_loss, Some(cls_loss)))
                    }
                }
            })()
            .map_err(non_finite)?;

            let value = g.scalar(total);
            if !value.is_finite() {
                return Err(ModelError::NonFiniteLoss { epoch, step, value });
            }
            model.params.zero_grad();
            g.backward(total, &mut model.params).map_err(|e| non_finite(e.into()))?;
            opt.step(&mut model.params)?;

            log.steps.push(StepLoss {
                total: value,
                regression: g.scalar(reg_loss),
                classification: cls_loss.map(|c| g.scalar(c)),
            });
            epoch_total += value;
            batches += 1;
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(validation_loss(&model, val, objective)?)
        };
        let train_loss = epoch_total / batches as f64;
        log::info!(
            "epoch {}/{}: train loss {:.5}{}",
            epoch + 1,
            cfg.epochs,
            train_loss,
            val_loss.map(|v| format!(", val loss {v:.5}")).unwrap_or_default()
        );
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
    }

    model.training = Some(cfg.clone());
    match &cfg.version_tag {
        Some(tag) => model.version = tag.clone(),
        None => model.seal_version(if joint { "mtl" } else { "mil" }),
    }
    Ok(TrainOutcome { model, log })
}

fn validation_loss(model: &MilModel, val: &[LabeledBag], objective: Objective) -> Result<f64> {
    let bags: Vec<&Bag> = val.iter().map(|lb| &lb.bag).collect();
    let preds = model.predict_batch(&bags)?;
    let pred_reg: Vec<f64> = preds.iter().map(|p| p.contamination).collect();
    let truth: Vec<f64> = val.iter().map(|lb| lb.label.contamination).collect();
    let mut loss = crate::tensor::loss_mse(&pred_reg, &truth)?;
    if let Objective::Joint { lambda } = objective {
        let mut ce = 0.0;
        for (p, lb) in preds.iter().zip(val) {
            let probs = p.class_probs.as_ref().expect("joint model has class head");
            let label = lb.label.grade.expect("checked by check_dataset");
            ce -= probs[label].max(f64::MIN_POSITIVE).ln();
        }
        loss += lambda * ce / val.len() as f64;
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaScore {
    pub lambda: f64,
    pub val_mae: f64,
    pub val_macro_f1: f64,
    /// `val_mae + (1 - val_macro_f1)`; lower is better.
    pub composite: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub best: f64,
    pub scores: Vec<LambdaScore>,
}

/// Composite validation score used to pick `lambda_cls`.
pub(crate) fn composite_score(model: &MilModel, val: &[LabeledBag]) -> Result<LambdaScore> {
    let bags: Vec<&Bag> = val.iter().map(|lb| &lb.bag).collect();
    let preds = model.predict_batch(&bags)?;
    let pred_reg: Vec<f64> = preds.iter().map(|p| p.contamination).collect();
    let truth_reg: Vec<f64> = val.iter().map(|lb| lb.label.contamination).collect();
    let pred_cls: Vec<usize> = preds.iter().map(|p| p.grade.unwrap_or(0)).collect();
    let truth_cls: Vec<usize> = val.iter().map(|lb| lb.label.grade.unwrap_or(0)).collect();
    let val_mae = metrics::mae(&pred_reg, &truth_reg).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
    let cls = metrics::classification_metrics(&pred_cls, &truth_cls, model.dims.class_num)
        .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
    Ok(LambdaScore {
        lambda: 0.0,
        val_mae,
        val_macro_f1: cls.macro_f1,
        composite: val_mae + (1.0 - cls.macro_f1),
    })
}

/// Trains one joint model per grid value and keeps the value with the lowest
/// `val MAE + (1 - val macro F1)`. Ties go to the smaller lambda.
pub fn select_lambda(
    grid: &[f64],
    train: &[LabeledBag],
    val: &[LabeledBag],
    cfg: &TrainingConfig,
) -> Result<LambdaSelection> {
    if grid.is_empty() {
        return Err(ModelError::InvalidConfig("empty lambda grid".into()));
    }
    if val.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let mut c = cfg.clone();
        c.lambda_cls = lambda;
        let outcome = train_mtl(train, &[], &c)?;
        let mut score = composite_score(&outcome.model, val)?;
        score.lambda = lambda;
        scores.push(score);
    }
    Ok(LambdaSelection {
        best: pick_lambda(&scores),
        scores,
    })
}

pub(crate) fn pick_lambda(scores: &[LambdaScore]) -> f64 {
    let mut best = &scores[0];
    for s in &scores[1..] {
        if s.composite < best.composite || (s.composite == best.composite && s.lambda < best.lambda) {
            best = s;
        }
    }
    best.lambda
}
