use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers and step counter for bias-corrected Adam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: impl IntoIterator<Item = Vec<usize>>) -> Self {
        let first_moment: Vec<Tensor> = shapes.into_iter().map(|s| Tensor::zeros(&s)).collect();
        let second_moment = first_moment.clone();
        AdamState {
            config,
            step: 0,
            first_moment,
            second_moment,
        }
    }

    pub fn for_store(config: AdamConfig, store: &ParamStore) -> Self {
        AdamState::new(
            config,
            store.iter().map(|(_, p)| p.value.shape().to_vec()),
        )
    }

    /// Applies one update to every parameter of `store` from its `grad` buffer.
    pub fn step_store(&mut self, store: &mut ParamStore) -> Result<()> {
        let params = store.params_mut();
        if params.len() != self.first_moment.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} parameters, {} moment buffers", params.len(), self.first_moment.len()),
            ));
        }
        for (p, m) in params.iter().zip(&self.first_moment) {
            check_congruent(&p.value, &p.grad, m)?;
        }
        self.step += 1;
        let (b1t, b2t) = self.bias_corrections();
        for (i, p) in params.iter_mut().enumerate() {
            update_one(
                &self.config,
                b1t,
                b2t,
                &mut p.value,
                &p.grad,
                &mut self.first_moment[i],
                &mut self.second_moment[i],
            );
        }
        Ok(())
    }

    fn bias_corrections(&self) -> (f64, f64) {
        let t = self.step as i32;
        (
            1.0 - self.config.beta1.powi(t),
            1.0 - self.config.beta2.powi(t),
        )
    }
}

fn check_congruent(value: &Tensor, grad: &Tensor, moment: &Tensor) -> Result<()> {
    if !value.same_shape(grad) || !value.same_shape(moment) {
        return Err(Error::shape(
            "adam_step",
            format!(
                "param {:?}, grad {:?}, moment {:?}",
                value.shape(),
                grad.shape(),
                moment.shape()
            ),
        ));
    }
    Ok(())
}

fn update_one(
    config: &AdamConfig,
    b1t: f64,
    b2t: f64,
    value: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
) {
    let (b1, b2) = (config.beta1, config.beta2);
    for (((p, &g), mi), vi) in value
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        *mi = b1 * *mi + (1.0 - b1) * g;
        *vi = b2 * *vi + (1.0 - b2) * g * g;
        let m_hat = *mi / b1t;
        let v_hat = *vi / b2t;
        *p -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
    }
}

/// One Adam update over explicit parameter and gradient slices.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                state.first_moment.len()
            ),
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first_moment) {
        check_congruent(p, g, m)?;
    }
    state.step += 1;
    let (b1t, b2t) = state.bias_corrections();
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        update_one(
            &state.config,
            b1t,
            b2t,
            p,
            g,
            &mut state.first_moment[i],
            &mut state.second_moment[i],
        );
    }
    Ok(())
}
