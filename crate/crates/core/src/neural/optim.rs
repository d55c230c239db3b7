use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named contiguous blocks of a flat parameter vector.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    blocks: Vec<(String, Range<usize>)>,
}

impl ParamLayout {
    pub fn push(&mut self, name: impl Into<String>, len: usize) -> Range<usize> {
        let start = self.len();
        let range = start..start + len;
        self.blocks.push((name.into(), range.clone()));
        range
    }

    pub fn len(&self) -> usize {
        self.blocks.last().map_or(0, |(_, r)| r.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn blocks(&self) -> &[(String, Range<usize>)] {
        &self.blocks
    }

    pub fn block_of(&self, index: usize) -> Option<&str> {
        self.blocks
            .iter()
            .find(|(_, r)| r.contains(&index))
            .map(|(n, _)| n.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamConfig {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, parameter_count: usize) -> Self {
        OptimizerState {
            config,
            step: 0,
            first_moment: vec![0.0; parameter_count],
            second_moment: vec![0.0; parameter_count],
        }
    }

    /// One update: `p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)`.
    ///
    /// A non-finite gradient aborts the step before anything is modified.
    pub fn step(&mut self, layout: &ParamLayout, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer over {} parameters got {} params and {} gradients",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical {
                block: layout.block_of(bad).unwrap_or("<unnamed>").to_string(),
                detail: format!("non-finite gradient at parameter {bad}"),
            });
        }
        let c = self.config;
        self.step += 1;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = 1.0 - c.learning_rate * c.weight_decay;
        for i in 0..params.len() {
            let g = grads[i];
            let m = c.beta1 * self.first_moment[i] + (1.0 - c.beta1) * g;
            let v = c.beta2 * self.second_moment[i] + (1.0 - c.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            let update = (m / bias1) / ((v / bias2).sqrt() + c.epsilon);
            params[i] = params[i] * decay - c.learning_rate * update;
        }
        Ok(())
    }
}
