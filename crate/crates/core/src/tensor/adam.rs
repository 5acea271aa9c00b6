use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for an ordered list of parameters,
/// plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (m, v) = shapes.into_iter().map(|s| (Tensor::zeros(s), Tensor::zeros(s))).unzip();
        Self { t: 0, m, v }
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        Self {
            config,
            state: AdamState::new(shapes),
        }
    }

    /// Applies one update. Nothing is modified if any gradient is
    /// non-finite or mis-shaped.
    pub fn step<S: AsRef<str>>(&mut self, names: &[S], params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        let st = &mut self.state;
        if params.len() != grads.len() || params.len() != st.m.len() || names.len() != params.len() {
            return Err(Error::invalid(
                "adam_step",
                format!(
                    "{} names, {} params, {} grads, {} moment slots",
                    names.len(),
                    params.len(),
                    grads.len(),
                    st.m.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != st.m[i].shape() {
                return Err(Error::shape(
                    "adam_step",
                    p.shape(),
                    g.shape(),
                    format!("parameter `{}`", names[i].as_ref()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(names[i].as_ref().to_string()));
            }
        }
        st.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = (1.0 - (beta1 as f64).powf(st.t as f64)) as f32;
        let bc2 = (1.0 - (beta2 as f64).powf(st.t as f64)) as f32;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = st.m[i].data_mut();
            let v = st.v[i].data_mut();
            for (j, (w, &g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
