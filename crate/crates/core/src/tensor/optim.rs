use serde::{Deserialize, Serialize};

use super::{ParamTape, Result, Tensor2D, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TensorError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TensorError::InvalidConfig(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(TensorError::InvalidConfig("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// SGD or Adam with per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: Vec<Tensor2D>,
    second: Vec<Tensor2D>,
    t: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            first: Vec::new(),
            second: Vec::new(),
            t: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Applies one update from the tape's gradient buffers and bumps its step
    /// counter. Fails unless a backward pass populated the gradients.
    pub fn step(&mut self, tape: &mut ParamTape) -> Result<()> {
        if !tape.grads_ready() {
            return Err(TensorError::NoGradients);
        }
        let lr = self.cfg.learning_rate;
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                for id in tape.ids().collect::<Vec<_>>() {
                    let g = tape.grad(id).clone();
                    for (p, gi) in tape.value_mut(id).data_mut().iter_mut().zip(g.data()) {
                        *p -= lr * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first.len() != tape.len() {
                    self.first = tape
                        .ids()
                        .map(|id| {
                            let (r, c) = tape.value(id).shape();
                            Tensor2D::zeros(r, c)
                        })
                        .collect();
                    self.second = self.first.clone();
                }
                self.t += 1;
                let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.epsilon);
                let bc1 = 1.0 - b1.powi(self.t as i32);
                let bc2 = 1.0 - b2.powi(self.t as i32);
                for id in tape.ids().collect::<Vec<_>>() {
                    let g = tape.grad(id).clone();
                    let m = self.first[id.index()].data_mut();
                    let v = self.second[id.index()].data_mut();
                    let p = tape.value_mut(id).data_mut();
                    for i in 0..g.len() {
                        let gi = g.data()[i];
                        m[i] = b1 * m[i] + (1.0 - b1) * gi;
                        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        tape.finish_step();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_tape(theta: f64, grad: f64) -> (ParamTape, super::super::ParamId) {
        let mut tape = ParamTape::new();
        let id = tape.register("theta", Tensor2D::filled(1, 1, theta)).unwrap();
        tape.set_grad(id, Tensor2D::filled(1, 1, grad)).unwrap();
        (tape, id)
    }

    #[test]
    fn sgd_step() {
        let (mut tape, id) = scalar_tape(1.0, 2.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1)).unwrap();
        opt.step(&mut tape).unwrap();
        assert!((tape.value(id).data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(tape.step(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        for cfg in [OptimizerConfig::sgd(0.5), OptimizerConfig::adam(0.5)] {
            let (mut tape, id) = scalar_tape(1.25, 0.0);
            let mut opt = Optimizer::new(cfg).unwrap();
            opt.step(&mut tape).unwrap();
            assert_eq!(tape.value(id).data()[0], 1.25);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2 on step one, so the update is lr * g / (|g| + eps).
        for g in [1e-3, 0.5, 7.0, -250.0] {
            let (mut tape, id) = scalar_tape(0.0, g);
            let mut opt = Optimizer::new(OptimizerConfig::adam(0.01)).unwrap();
            opt.step(&mut tape).unwrap();
            let moved = tape.value(id).data()[0];
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((moved - expected).abs() < 1e-15);
            assert!((moved.abs() - 0.01).abs() < 1e-7, "{g}: {moved}");
        }
    }

    #[test]
    fn step_before_backward_errors() {
        let mut tape = ParamTape::new();
        tape.register("w", Tensor2D::zeros(1, 1)).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
        assert_eq!(opt.step(&mut tape), Err(TensorError::NoGradients));
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::sgd(0.0).validate().is_err());
        let bad_beta = OptimizerConfig {
            beta1: 1.0,
            ..OptimizerConfig::default()
        };
        assert!(bad_beta.validate().is_err());
        assert!(OptimizerConfig::default().validate().is_ok());
    }
}
