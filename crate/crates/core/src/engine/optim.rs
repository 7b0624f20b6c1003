use super::tensor::Tensor;
use crate::error::{HexaError, Result};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_DECAY: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// RMSProp running averages for one parameter set.
///
/// `acc ← decay·acc + (1−decay)·g²`, then `p ← p − lr·g / (sqrt(acc) + ε)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsPropState {
    accumulators: Vec<Tensor>,
    pub decay: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl RmsPropState {
    /// Zero accumulators shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, learning_rate: f64, decay: f64, epsilon: f64) -> Self {
        Self {
            accumulators: params.into_iter().map(Tensor::zeros_like).collect(),
            decay,
            epsilon,
            learning_rate,
        }
    }

    pub fn accumulators(&self) -> &[Tensor] {
        &self.accumulators
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != self.accumulators.len() || grads.len() != params.len() {
            return Err(HexaError::contract(format!(
                "rmsprop: {} parameters, {} gradients, {} accumulators",
                params.len(),
                grads.len(),
                self.accumulators.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.dims() != g.dims() || p.dims() != self.accumulators[i].dims() {
                return Err(HexaError::contract(format!(
                    "rmsprop: parameter {i} has shape {:?} but gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        let (decay, eps, lr) = (self.decay, self.epsilon, self.learning_rate);
        for ((p, g), acc) in params.into_iter().zip(grads).zip(&mut self.accumulators) {
            for ((pv, &gv), av) in p.data_mut().iter_mut().zip(g.data()).zip(acc.data_mut()) {
                *av = decay * *av + (1.0 - decay) * gv * gv;
                if gv != 0.0 {
                    *pv -= lr * gv / (av.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Clamps every entry to `[-c, c]`.
pub fn clip_weights(params: Vec<&mut Tensor>, c: f64) -> Result<()> {
    if !(c > 0.0) {
        return Err(HexaError::config(format!("clip constant must be positive, got {c}")));
    }
    for p in params {
        for v in p.data_mut() {
            *v = v.clamp(-c, c);
        }
    }
    Ok(())
}
