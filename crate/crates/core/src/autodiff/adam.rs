use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{KoalaError, Result};
use crate::scalar::Scalar;

/// Adam hyperparameters. Weight decay is decoupled and scaled by the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter moment estimates. Moments are allocated lazily on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    first_moment: Vec<Tensor<S>>,
    second_moment: Vec<Tensor<S>>,
    step_count: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Tensor<S>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Tensor<S>] {
        &self.second_moment
    }

    /// Applies one update to `params` in place.
    ///
    /// Fails without touching anything if a gradient is non-finite or the
    /// parameter list does not match the tracked shapes.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[&Tensor<S>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(KoalaError::InvalidArgument(format!(
                "adam: {} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            p.expect_same_shape(g, "adam_step")?;
            if !g.is_finite() {
                return Err(KoalaError::NonFiniteGradient {
                    param: i,
                    step: self.step_count + 1,
                });
            }
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.second_moment = self.first_moment.clone();
        } else if self.first_moment.len() != params.len()
            || self
                .first_moment
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.shape() != p.shape())
        {
            return Err(KoalaError::InvalidArgument(
                "adam: parameter set changed between steps".into(),
            ));
        }

        self.step_count += 1;
        let c = &self.config;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let lr = S::of(c.learning_rate);
        let eps = S::of(c.epsilon);
        let wd = S::of(c.weight_decay);
        let bias1 = S::one() - b1.powi(self.step_count as i32);
        let bias2 = S::one() - b2.powi(self.step_count as i32);

        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(
            self.first_moment
                .iter_mut()
                .zip(self.second_moment.iter_mut()),
        ) {
            let pd = p.data_mut();
            for (k, &gk) in g.data().iter().enumerate() {
                let mk = &mut m.data_mut()[k];
                *mk = b1 * *mk + (S::one() - b1) * gk;
                let vk = &mut v.data_mut()[k];
                *vk = b2 * *vk + (S::one() - b2) * gk * gk;
                let m_hat = *mk / bias1;
                let v_hat = *vk / bias2;
                pd[k] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * pd[k]);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[&Tensor<S>],
    state: &mut AdamState<S>,
) -> Result<()> {
    state.step(params, grads)
}
