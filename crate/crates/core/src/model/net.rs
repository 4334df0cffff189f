use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::train::{sample_instance_indices, TrainingConfig};
use super::{Bag, InferencePooling, ModelDims, ModelError, ModelTask, PoolingKind, Result, GRADE_NAMES};
use crate::tensor::{
    grad_check, softmax, GradCheckOptions, GradCheckReport, Graph, ParamId, ParamTape, Result as TResult, Segments,
    Tensor2D, Var,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ParamIds {
    pub enc_w: ParamId,
    pub enc_b: ParamId,
    pub att_w1: ParamId,
    pub att_b1: ParamId,
    pub att_w2: ParamId,
    pub att_b2: ParamId,
    pub reg_w1: ParamId,
    pub reg_b1: ParamId,
    pub reg_w2: ParamId,
    pub reg_b2: ParamId,
    pub cls_w1: ParamId,
    pub cls_b1: ParamId,
    pub cls_w2: ParamId,
    pub cls_b2: ParamId,
}

/// Parameter names and shapes, in registration order.
pub(crate) fn param_layout(d: &ModelDims) -> Vec<(&'static str, usize, usize)> {
    vec![
        ("encoder.w", d.feature_dim, d.enc_dim),
        ("encoder.b", 1, d.enc_dim),
        ("attention.w1", d.enc_dim, d.attn_dim),
        ("attention.b1", 1, d.attn_dim),
        ("attention.w2", d.attn_dim, 1),
        ("attention.b2", 1, 1),
        ("regressor.w1", d.enc_dim, d.head_hidden),
        ("regressor.b1", 1, d.head_hidden),
        ("regressor.w2", d.head_hidden, 1),
        ("regressor.b2", 1, 1),
        ("classifier.w1", d.enc_dim, d.head_hidden),
        ("classifier.b1", 1, d.head_hidden),
        ("classifier.w2", d.head_hidden, d.class_num),
        ("classifier.b2", 1, d.class_num),
    ]
}

pub(crate) fn resolve_ids(tape: &ParamTape) -> Result<ParamIds> {
    Ok(ParamIds {
        enc_w: tape.id("encoder.w")?,
        enc_b: tape.id("encoder.b")?,
        att_w1: tape.id("attention.w1")?,
        att_b1: tape.id("attention.b1")?,
        att_w2: tape.id("attention.w2")?,
        att_b2: tape.id("attention.b2")?,
        reg_w1: tape.id("regressor.w1")?,
        reg_b1: tape.id("regressor.b1")?,
        reg_w2: tape.id("regressor.w2")?,
        reg_b2: tape.id("regressor.b2")?,
        cls_w1: tape.id("classifier.w1")?,
        cls_b1: tape.id("classifier.b1")?,
        cls_w2: tape.id("classifier.w2")?,
        cls_b2: tape.id("classifier.b2")?,
    })
}

/// Bag embedding `z` and the attention weights that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagEmbedding {
    pub z: Vec<f64>,
    pub attention: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagPrediction {
    pub contamination: f64,
    /// Present for models trained with the classification head.
    pub class_probs: Option<Vec<f64>>,
    pub grade: Option<usize>,
    pub attention: Vec<f64>,
    /// Layer indices of the pooled instances, aligned with `attention`.
    pub layers: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confidence {
    /// `1 - min(1, sigma_inst / sigma_ref)` over per-instance regressions.
    pub regression: f64,
    /// Max class probability; `None` for regression-only models.
    pub classification: Option<f64>,
}

impl Confidence {
    pub fn min(&self) -> f64 {
        self.classification.map_or(self.regression, |c| c.min(self.regression))
    }
}

/// Forward pass over borrowed parameters, so the same code serves training,
/// inference and finite-difference checks.
#[derive(Clone, Copy)]
pub(crate) struct Net<'a> {
    pub params: &'a ParamTape,
    pub ids: &'a ParamIds,
    pub pooling: PoolingKind,
    pub dropout: f64,
}

impl Net<'_> {
    pub(crate) fn encode(&self, g: &mut Graph, x: Var) -> TResult<Var> {
        let w = g.param(self.params, self.ids.enc_w)?;
        let b = g.param(self.params, self.ids.enc_b)?;
        let h = g.linear(x, w, b)?;
        g.relu(h)
    }

    pub(crate) fn attention_scores(&self, g: &mut Graph, h: Var) -> TResult<Var> {
        let w1 = g.param(self.params, self.ids.att_w1)?;
        let b1 = g.param(self.params, self.ids.att_b1)?;
        let w2 = g.param(self.params, self.ids.att_w2)?;
        let b2 = g.param(self.params, self.ids.att_b2)?;
        let a = g.linear(h, w1, b1)?;
        let a = g.tanh(a)?;
        g.linear(a, w2, b2)
    }

    /// Returns `(z, alpha)`: pooled `segments x enc_dim` embeddings and the
    /// per-instance weights.
    pub(crate) fn pool(&self, g: &mut Graph, h: Var, segs: &Segments) -> TResult<(Var, Var)> {
        let alpha = match self.pooling {
            PoolingKind::Attention => {
                let scores = self.attention_scores(g, h)?;
                g.segment_softmax(scores, segs)?
            }
            PoolingKind::Mean => {
                let mut w = Vec::with_capacity(segs.total_rows());
                for k in 0..segs.count() {
                    let r = segs.range(k);
                    let n = r.len() as f64;
                    w.extend(r.map(|_| 1.0 / n));
                }
                g.input(Tensor2D::column(&w))?
            }
        };
        let z = g.segment_pool(alpha, h, segs)?;
        Ok((z, alpha))
    }

    fn head(&self, g: &mut Graph, z: Var, ids: [ParamId; 4], rng: &mut dyn RngCore) -> TResult<Var> {
        let w1 = g.param(self.params, ids[0])?;
        let b1 = g.param(self.params, ids[1])?;
        let w2 = g.param(self.params, ids[2])?;
        let b2 = g.param(self.params, ids[3])?;
        let h = g.linear(z, w1, b1)?;
        let h = g.relu(h)?;
        let h = g.dropout(h, self.dropout, rng)?;
        g.linear(h, w2, b2)
    }

    pub(crate) fn regression_head(&self, g: &mut Graph, z: Var, rng: &mut dyn RngCore) -> TResult<Var> {
        let i = &self.ids;
        self.head(g, z, [i.reg_w1, i.reg_b1, i.reg_w2, i.reg_b2], rng)
    }

    pub(crate) fn classification_head(&self, g: &mut Graph, z: Var, rng: &mut dyn RngCore) -> TResult<Var> {
        let i = &self.ids;
        self.head(g, z, [i.cls_w1, i.cls_b1, i.cls_w2, i.cls_b2], rng)
    }
}

/// Trained (or freshly initialized) MIL/MTL model.
#[derive(Debug, Clone)]
pub struct MilModel {
    pub(crate) dims: ModelDims,
    pub(crate) params: ParamTape,
    pub(crate) ids: ParamIds,
    pub(crate) task: ModelTask,
    pub(crate) pooling: PoolingKind,
    pub(crate) inference: InferencePooling,
    pub(crate) dropout: f64,
    pub(crate) sigma_ref: f64,
    pub(crate) class_names: Vec<String>,
    pub(crate) version: String,
    pub(crate) training: Option<TrainingConfig>,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2D {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor2D::new(rows, cols, data).expect("shape matches data")
}

impl MilModel {
    /// Xavier-uniform weights and zero biases from a seeded stream.
    pub fn init(dims: ModelDims, pooling: PoolingKind, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamTape::new();
        for (name, r, c) in param_layout(&dims) {
            let value = if name.contains(".b") {
                Tensor2D::zeros(r, c)
            } else {
                xavier(&mut rng, r, c)
            };
            params.register(name, value)?;
        }
        let ids = resolve_ids(&params)?;
        let class_names = if dims.class_num == GRADE_NAMES.len() {
            GRADE_NAMES.iter().map(|s| s.to_string()).collect()
        } else {
            (0..dims.class_num).map(|i| format!("class_{i}")).collect()
        };
        Ok(Self {
            dims,
            params,
            ids,
            task: ModelTask::Mtl,
            pooling,
            inference: InferencePooling::AllLayers,
            dropout: 0.25,
            sigma_ref: 2.0,
            class_names,
            version: "untrained".into(),
            training: None,
        })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn params(&self) -> &ParamTape {
        &self.params
    }

    /// Mutable parameter access for hand-set weights in tests and tools.
    /// Resets the version, since the weights no longer match it.
    pub fn params_mut(&mut self) -> &mut ParamTape {
        self.version = "untrained".into();
        &mut self.params
    }

    pub fn task(&self) -> ModelTask {
        self.task
    }

    pub fn pooling(&self) -> PoolingKind {
        self.pooling
    }

    pub fn inference_pooling(&self) -> InferencePooling {
        self.inference
    }

    pub fn set_inference_pooling(&mut self, mode: InferencePooling) {
        self.inference = mode;
    }

    pub fn sigma_ref(&self) -> f64 {
        self.sigma_ref
    }

    pub fn set_sigma_ref(&mut self, sigma_ref: f64) -> Result<()> {
        if !(sigma_ref > 0.0 && sigma_ref.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "sigma_ref must be positive, got {sigma_ref}"
            )));
        }
        self.sigma_ref = sigma_ref;
        Ok(())
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn training_config(&self) -> Option<&TrainingConfig> {
        self.training.as_ref()
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    pub fn param_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter() {
            h.update(name.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub(crate) fn seal_version(&mut self, prefix: &str) {
        let digest = self.param_digest();
        self.version = format!("{prefix}-{}", &digest[..12]);
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dims.feature_dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.dims.feature_dim,
                got: len,
            });
        }
        Ok(())
    }

    pub(crate) fn stack(&self, rows: &[&[f64]]) -> Result<Tensor2D> {
        for r in rows {
            self.check_dim(r.len())?;
        }
        Ok(Tensor2D::from_rows(rows)?)
    }

    pub(crate) fn net(&self) -> Net<'_> {
        Net {
            params: &self.params,
            ids: &self.ids,
            pooling: self.pooling,
            dropout: self.dropout,
        }
    }

    pub(crate) fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(self.net().encode(g, x)?)
    }

    pub(crate) fn pool(&self, g: &mut Graph, h: Var, segs: &Segments) -> Result<(Var, Var)> {
        Ok(self.net().pool(g, h, segs)?)
    }

    pub(crate) fn regression_head(&self, g: &mut Graph, z: Var, rng: &mut dyn RngCore) -> Result<Var> {
        Ok(self.net().regression_head(g, z, rng)?)
    }

    pub(crate) fn classification_head(&self, g: &mut Graph, z: Var, rng: &mut dyn RngCore) -> Result<Var> {
        Ok(self.net().classification_head(g, z, rng)?)
    }

    /// Encodes and pools one bag of instances in evaluation mode.
    pub fn forward_bag(&self, instances: &[&[f64]]) -> Result<BagEmbedding> {
        if instances.is_empty() {
            return Err(ModelError::EmptyBag(String::new()));
        }
        let x = self.stack(instances)?;
        let mut g = Graph::new();
        let xv = g.input(x)?;
        let h = self.encode(&mut g, xv)?;
        let segs = Segments::single(instances.len())?;
        let (z, alpha) = self.pool(&mut g, h, &segs)?;
        Ok(BagEmbedding {
            z: g.value(z).data().to_vec(),
            attention: g.value(alpha).data().to_vec(),
        })
    }

    fn check_z(&self, z: &[f64]) -> Result<Tensor2D> {
        if z.len() != self.dims.enc_dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.dims.enc_dim,
                got: z.len(),
            });
        }
        Ok(Tensor2D::row_vector(z))
    }

    /// Contamination percent from a bag embedding.
    pub fn predict_reg(&self, z: &[f64]) -> Result<f64> {
        let zt = self.check_z(z)?;
        let mut g = Graph::new();
        let zv = g.input(zt)?;
        let out = self.regression_head(&mut g, zv, &mut eval_rng())?;
        Ok(g.scalar(out))
    }

    /// Class probabilities from a bag embedding.
    pub fn predict_cls(&self, z: &[f64]) -> Result<Vec<f64>> {
        let zt = self.check_z(z)?;
        let mut g = Graph::new();
        let zv = g.input(zt)?;
        let logits = self.classification_head(&mut g, zv, &mut eval_rng())?;
        Ok(softmax(g.value(logits).data())?)
    }

    /// Indices (into the bag's eligible instances) pooled at inference.
    fn inference_indices(&self, bag: &Bag) -> Result<Vec<usize>> {
        let n = bag.eligible().count();
        match self.inference {
            InferencePooling::AllLayers => Ok((0..n).collect()),
            InferencePooling::Sampled(s) => {
                let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(bag.railcar_id().as_bytes()));
                sample_instance_indices(n, s, &mut rng)
            }
        }
    }

    /// Bag-level prediction with the configured inference pooling.
    pub fn predict(&self, bag: &Bag) -> Result<BagPrediction> {
        Ok(self.predict_batch(&[bag])?.remove(0))
    }

    /// Evaluation-mode predictions for many bags in one graph.
    pub fn predict_batch(&self, bags: &[&Bag]) -> Result<Vec<BagPrediction>> {
        if bags.is_empty() {
            return Ok(Vec::new());
        }
        let mut rows: Vec<&[f64]> = Vec::new();
        let mut lengths = Vec::with_capacity(bags.len());
        let mut layers: Vec<Vec<u32>> = Vec::with_capacity(bags.len());
        for bag in bags {
            let eligible: Vec<_> = bag.eligible().collect();
            let idx = self.inference_indices(bag)?;
            lengths.push(idx.len());
            layers.push(idx.iter().map(|&i| eligible[i].layer_index).collect());
            rows.extend(idx.iter().map(|&i| eligible[i].features.as_slice()));
        }
        let x = self.stack(&rows)?;
        let segs = Segments::from_lengths(&lengths)?;
        let mut g = Graph::new();
        let xv = g.input(x)?;
        let h = self.encode(&mut g, xv)?;
        let (z, alpha) = self.pool(&mut g, h, &segs)?;
        let reg = self.regression_head(&mut g, z, &mut eval_rng())?;
        let logits = match self.task {
            ModelTask::Mtl => Some(self.classification_head(&mut g, z, &mut eval_rng())?),
            ModelTask::Mil => None,
        };
        let alpha_v = g.value(alpha).data();
        let mut out = Vec::with_capacity(bags.len());
        for (k, layers) in layers.into_iter().enumerate() {
            let class_probs = match logits {
                Some(l) => Some(softmax(g.value(l).row(k))?),
                None => None,
            };
            let grade = class_probs.as_ref().map(|p| argmax(p));
            out.push(BagPrediction {
                contamination: g.value(reg).data()[k],
                class_probs,
                grade,
                attention: alpha_v[segs.range(k)].to_vec(),
                layers,
            });
        }
        Ok(out)
    }

    /// Regression output of each instance pooled on its own.
    pub fn instance_predictions(&self, instances: &[&[f64]]) -> Result<Vec<f64>> {
        if instances.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.stack(instances)?;
        let mut g = Graph::new();
        let xv = g.input(x)?;
        // A single-instance bag pools to its own encoding.
        let h = self.encode(&mut g, xv)?;
        let reg = self.regression_head(&mut g, h, &mut eval_rng())?;
        Ok(g.value(reg).data().to_vec())
    }

    /// Per-layer contamination and (for MTL models) class probabilities.
    pub fn layer_prediction(&self, features: &[f64]) -> Result<(f64, Option<Vec<f64>>)> {
        let x = self.stack(&[features])?;
        let mut g = Graph::new();
        let xv = g.input(x)?;
        let h = self.encode(&mut g, xv)?;
        let reg = self.regression_head(&mut g, h, &mut eval_rng())?;
        let probs = match self.task {
            ModelTask::Mtl => {
                let l = self.classification_head(&mut g, h, &mut eval_rng())?;
                Some(softmax(g.value(l).data())?)
            }
            ModelTask::Mil => None,
        };
        Ok((g.scalar(reg), probs))
    }

    /// Regression confidence from the spread of per-instance predictions and
    /// classification confidence as the top class probability.
    pub fn confidence(&self, bag: &Bag) -> Result<Confidence> {
        let pred = self.predict(bag)?;
        self.confidence_with(bag, &pred)
    }

    pub fn confidence_with(&self, bag: &Bag, pred: &BagPrediction) -> Result<Confidence> {
        let per_instance = self.instance_predictions(&bag.eligible_features())?;
        Ok(Confidence {
            regression: regression_confidence(&per_instance, self.sigma_ref),
            classification: pred.class_probs.as_ref().map(|p| p.iter().copied().fold(0.0, f64::max)),
        })
    }

    /// Central finite-difference check of the training loss gradient on one
    /// batch, every eligible instance pooled, dropout off. With `grades` the
    /// joint loss `mse + lambda * ce` is checked.
    pub fn check_gradients(
        &mut self,
        bags: &[&Bag],
        targets: &[f64],
        grades: Option<(&[usize], f64)>,
        opts: &GradCheckOptions,
    ) -> Result<GradCheckReport> {
        let mut rows: Vec<&[f64]> = Vec::new();
        let mut lengths = Vec::with_capacity(bags.len());
        for bag in bags {
            let f = bag.eligible_features();
            lengths.push(f.len());
            rows.extend(f);
        }
        let x = self.stack(&rows)?;
        let segs = Segments::from_lengths(&lengths)?;
        let ids = self.ids;
        let (pooling, dropout) = (self.pooling, self.dropout);
        let mut tape = std::mem::take(&mut self.params);
        let report = grad_check(
            |g, params| {
                let net = Net {
                    params,
                    ids: &ids,
                    pooling,
                    dropout,
                };
                let xv = g.input(x.clone())?;
                let h = net.encode(g, xv)?;
                let (z, _) = net.pool(g, h, &segs)?;
                let reg = net.regression_head(g, z, &mut eval_rng())?;
                let loss = g.mse(reg, targets)?;
                match grades {
                    None => Ok(loss),
                    Some((labels, lambda)) => {
                        let logits = net.classification_head(g, z, &mut eval_rng())?;
                        let ce = g.cross_entropy(logits, labels)?;
                        let ce = g.scale(ce, lambda)?;
                        g.add(loss, ce)
                    }
                }
            },
            &mut tape,
            opts,
        );
        self.params = tape;
        Ok(report?)
    }
}

/// `1 - min(1, sigma / sigma_ref)` with population standard deviation.
pub(crate) fn regression_confidence(per_instance: &[f64], sigma_ref: f64) -> f64 {
    if per_instance.len() < 2 {
        return 1.0;
    }
    let n = per_instance.len() as f64;
    let mean = per_instance.iter().sum::<f64>() / n;
    let var = per_instance.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    1.0 - (var.sqrt() / sigma_ref).min(1.0)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn eval_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
