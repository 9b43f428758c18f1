//! Parameter-update rules: classical SGD with momentum and Adam.

use crate::tensor::ParamBlock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

/// One optimizer configuration from the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// SGD only; ignored by Adam.
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl OptimizerSpec {
    pub fn sgd_momentum(learning_rate: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            learning_rate,
            momentum,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            momentum: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }

    /// Short label used in run directories and report rows.
    pub fn describe(&self) -> String {
        match self.kind {
            OptimizerKind::SgdMomentum => {
                format!("SGD -LR: {} -Mom: {}", self.learning_rate, self.momentum)
            }
            OptimizerKind::Adam => format!("Adam -LR: {}", self.learning_rate),
        }
    }

    pub fn slug(&self) -> String {
        match self.kind {
            OptimizerKind::SgdMomentum => {
                format!("sgd_lr{}_mom{}", self.learning_rate, self.momentum)
            }
            OptimizerKind::Adam => format!("adam_lr{}", self.learning_rate),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OptimError {
    #[error("shape mismatch: param len {param}, grad len {grad}, state len {state}")]
    ShapeMismatch { param: usize, grad: usize, state: usize },
}

/// Classical momentum update:
/// `velocity <- momentum * velocity + grad; param <- param - lr * velocity`.
pub fn sgd_momentum_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<(), OptimError> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(OptimError::ShapeMismatch {
            param: param.len(),
            grad: grad.len(),
            state: velocity.len(),
        });
    }
    for i in 0..param.len() {
        velocity[i] = momentum * velocity[i] + grad[i];
        param[i] -= lr * velocity[i];
    }
    Ok(())
}

/// Bias-corrected Adam update; `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) -> Result<(), OptimError> {
    if param.len() != grad.len() || param.len() != m.len() || param.len() != v.len() {
        return Err(OptimError::ShapeMismatch {
            param: param.len(),
            grad: grad.len(),
            state: m.len(),
        });
    }
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

/// Optimizer state over a list of parameter blocks.
pub struct Optimizer {
    pub spec: OptimizerSpec,
    t: u64,
    slot_a: Vec<Vec<f64>>,
    slot_b: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, blocks: &[ParamBlock]) -> Self {
        Self::with_sizes(spec, &blocks.iter().map(|b| b.len()).collect::<Vec<_>>())
    }

    pub fn with_sizes(spec: OptimizerSpec, sizes: &[usize]) -> Self {
        let slot_a = sizes.iter().map(|&n| vec![0.0; n]).collect();
        let slot_b = match spec.kind {
            OptimizerKind::Adam => sizes.iter().map(|&n| vec![0.0; n]).collect(),
            OptimizerKind::SgdMomentum => Vec::new(),
        };
        Self { spec, t: 0, slot_a, slot_b }
    }

    /// Starts a new optimizer step (advances the Adam step counter). Use
    /// with [`Optimizer::update_block`] when parameters live in more than
    /// one owner.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies the update rule to one block by index.
    pub fn update_block(
        &mut self,
        idx: usize,
        param: &mut [f64],
        grad: &[f64],
    ) -> Result<(), OptimError> {
        let lr = self.spec.learning_rate;
        match self.spec.kind {
            OptimizerKind::SgdMomentum => {
                sgd_momentum_step(param, grad, &mut self.slot_a[idx], lr, self.spec.momentum)
            }
            OptimizerKind::Adam => adam_step(
                param,
                grad,
                &mut self.slot_a[idx],
                &mut self.slot_b[idx],
                self.t,
                lr,
                self.spec.beta1,
                self.spec.beta2,
                self.spec.epsilon,
            ),
        }
    }

    /// Applies one update with an overridden learning rate (for schedules).
    pub fn step_with_lr(
        &mut self,
        params: &mut [ParamBlock],
        grads: &[Vec<f64>],
        lr: f64,
    ) -> Result<(), OptimError> {
        assert_eq!(params.len(), grads.len());
        self.begin_step();
        for (i, p) in params.iter_mut().enumerate() {
            match self.spec.kind {
                OptimizerKind::SgdMomentum => {
                    sgd_momentum_step(
                        &mut p.data,
                        &grads[i],
                        &mut self.slot_a[i],
                        lr,
                        self.spec.momentum,
                    )?;
                }
                OptimizerKind::Adam => {
                    adam_step(
                        &mut p.data,
                        &grads[i],
                        &mut self.slot_a[i],
                        &mut self.slot_b[i],
                        self.t,
                        lr,
                        self.spec.beta1,
                        self.spec.beta2,
                        self.spec.epsilon,
                    )?;
                }
            }
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut [ParamBlock], grads: &[Vec<f64>]) -> Result<(), OptimError> {
        self.step_with_lr(params, grads, self.spec.learning_rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classical_momentum_two_step_recurrence() {
        // Hand computation: v=2.0, p=0.8 after step one; v=3.8, p=0.42 after
        // a second identical gradient.
        let mut param = [1.0];
        let mut velocity = [0.0];
        sgd_momentum_step(&mut param, &[2.0], &mut velocity, 0.1, 0.9).unwrap();
        assert!((velocity[0] - 2.0).abs() < 1e-15);
        assert!((param[0] - 0.8).abs() < 1e-15);
        sgd_momentum_step(&mut param, &[2.0], &mut velocity, 0.1, 0.9).unwrap();
        assert!((velocity[0] - 3.8).abs() < 1e-15);
        assert!((param[0] - 0.42).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_reduces_to_plain_sgd() {
        let mut param = [1.0, 2.0];
        let mut velocity = [0.0, 0.0];
        sgd_momentum_step(&mut param, &[0.5, -0.5], &mut velocity, 0.1, 0.0).unwrap();
        assert!((param[0] - 0.95).abs() < 1e-15);
        assert!((param[1] - 2.05).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_a_noop() {
        let mut param = [1.0, -3.0];
        let before = param;
        let mut velocity = [0.0, 0.0];
        sgd_momentum_step(&mut param, &[5.0, 5.0], &mut velocity, 0.0, 0.9).unwrap();
        assert_eq!(param, before);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut param = [1.0];
        let mut velocity = [0.0, 0.0];
        let err = sgd_momentum_step(&mut param, &[1.0], &mut velocity, 0.1, 0.9).unwrap_err();
        assert!(matches!(err, OptimError::ShapeMismatch { .. }));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction the first Adam step is lr * g/|g| (up to eps).
        let mut param = [0.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adam_step(&mut param, &[3.0], &mut m, &mut v, 1, 0.01, 0.9, 0.999, 1e-8).unwrap();
        assert!((param[0] + 0.01).abs() < 1e-6);
    }

    #[test]
    fn optimizer_wrapper_updates_all_blocks() {
        let mut blocks = vec![
            ParamBlock { name: "a".into(), shape: vec![2], data: vec![1.0, 1.0] },
            ParamBlock { name: "b".into(), shape: vec![1], data: vec![5.0] },
        ];
        let grads = vec![vec![1.0, 2.0], vec![-1.0]];
        let mut opt = Optimizer::new(OptimizerSpec::sgd_momentum(0.1, 0.0), &blocks);
        opt.step(&mut blocks, &grads).unwrap();
        assert!((blocks[0].data[0] - 0.9).abs() < 1e-15);
        assert!((blocks[0].data[1] - 0.8).abs() < 1e-15);
        assert!((blocks[1].data[0] - 5.1).abs() < 1e-15);
    }
}
