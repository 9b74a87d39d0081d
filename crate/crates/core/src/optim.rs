//! The two optimizers used by the training loops.
//!
//! `sgd_step` is plain gradient descent. [`AdamState`] is a moment-based
//! optimizer whose default mode applies a *fixed* bias correction of
//! `1/(1-b1)` and `1/(1-b2)` on every step — not the step-powered textbook
//! correction — and whose moments are reset by constructing a fresh state.
//! The server loop deliberately recreates the state each outer iteration, so
//! moments never persist across iterations. A step-powered correction is
//! available behind [`BiasCorrection::Stepwise`] for sensitivity testing.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const ADAM_EPS: f64 = 1e-8;

/// Looks up the gradient for `name`, erroring out when it is absent.
fn grad_for<'g>(grads: &'g BTreeMap<String, Tensor>, name: &str, tensor: &Tensor) -> Result<&'g Tensor> {
    let g = grads.get(name).ok_or_else(|| Error::MissingGradient(name.to_string()))?;
    if g.shape() != tensor.shape() {
        return Err(Error::ShapeMismatch(format!(
            "gradient for `{name}` has shape {:?}, parameter has {:?}",
            g.shape(),
            tensor.shape()
        )));
    }
    Ok(g)
}

/// `p <- p - eta * g` for every named tensor.
pub fn sgd_step_named(
    tensors: Vec<(String, &mut Tensor)>,
    grads: &BTreeMap<String, Tensor>,
    eta: f64,
) -> Result<()> {
    for (name, tensor) in tensors {
        let g = grad_for(grads, &name, tensor)?;
        for (p, &gi) in tensor.data_mut().iter_mut().zip(g.data()) {
            *p -= eta * gi;
        }
    }
    Ok(())
}

/// How Adam's moment estimates are de-biased.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasCorrection {
    /// Divide by `(1-b1)` and `(1-b2)` on every step.
    Fixed,
    /// Textbook `(1-b1^k)`, `(1-b2^k)` with the running step count `k`.
    Stepwise,
}

/// First/second moment state for one group of named tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    moments: Vec<(String, Tensor, Tensor)>,
    pub eta: f64,
    pub b1: f64,
    pub b2: f64,
    pub correction: BiasCorrection,
    steps: u64,
}

impl AdamState {
    /// Fresh state with `m = v = 0` for every tensor.
    pub fn new(
        shapes: &[(String, Vec<usize>)],
        eta: f64,
        b1: f64,
        b2: f64,
        correction: BiasCorrection,
    ) -> Self {
        let moments = shapes
            .iter()
            .map(|(name, shape)| {
                (name.clone(), Tensor::zeros(shape.clone()), Tensor::zeros(shape.clone()))
            })
            .collect();
        AdamState { moments, eta, b1, b2, correction, steps: 0 }
    }

    pub fn for_tensors(named: &[(String, &Tensor)], eta: f64, b1: f64, b2: f64, correction: BiasCorrection) -> Self {
        let shapes: Vec<(String, Vec<usize>)> =
            named.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        AdamState::new(&shapes, eta, b1, b2, correction)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update:
    /// `m <- b1*m + (1-b1)*g`, `v <- b2*v + (1-b2)*g^2`,
    /// `p <- p - eta * m_hat / (sqrt(v_hat) + 1e-8)`.
    pub fn step(
        &mut self,
        tensors: Vec<(String, &mut Tensor)>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        self.steps += 1;
        let (cm, cv) = match self.correction {
            BiasCorrection::Fixed => (1.0 - self.b1, 1.0 - self.b2),
            BiasCorrection::Stepwise => {
                (1.0 - self.b1.powi(self.steps as i32), 1.0 - self.b2.powi(self.steps as i32))
            }
        };
        for (name, tensor) in tensors {
            let g = grad_for(grads, &name, tensor)?;
            let slot = self
                .moments
                .iter_mut()
                .find(|(n, _, _)| n == &name)
                .ok_or_else(|| Error::MissingGradient(format!("no moment slot for `{name}`")))?;
            let (_, m, v) = slot;
            if m.shape() != tensor.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "moment for `{name}` has shape {:?}, parameter has {:?}",
                    m.shape(),
                    tensor.shape()
                )));
            }
            for i in 0..tensor.numel() {
                let gi = g.data()[i];
                let mi = self.b1 * m.data()[i] + (1.0 - self.b1) * gi;
                let vi = self.b2 * v.data()[i] + (1.0 - self.b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / cm;
                let v_hat = vi / cv;
                tensor.data_mut()[i] -= self.eta * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}
