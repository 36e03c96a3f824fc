//! Poly learning-rate decay and Nesterov momentum SGD.

use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// `lr0 * (1 - iter / max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, lr0: f64, power: f64) -> Result<f64> {
    if iter > max_iter || max_iter == 0 {
        return Err(Error::Schedule { iter, max_iter });
    }
    Ok(lr0 * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// Nesterov momentum with L2 weight decay folded into the gradient:
/// `g = grad + wd * w; v = mu * v + g; w -= lr * (g + mu * v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Nesterov {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Nesterov {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Applies one step. Parameters whose gradient is `None` did not take
    /// part in the forward pass and are left untouched, decay included.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Invalid(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        let (mu, wd) = (self.momentum, self.weight_decay);
        for ((p, v), g) in store.iter_mut().zip(&mut self.velocity).zip(grads) {
            let Some(g) = g else { continue };
            if g.len() != p.value.len() {
                return Err(Error::Invalid(format!("gradient for {} has {} entries", p.name, g.len())));
            }
            for ((w, vi), &gi) in p.value.iter_mut().zip(v.iter_mut()).zip(g) {
                let d = gi + wd * *w;
                *vi = mu * *vi + d;
                *w -= lr * (d + mu * *vi);
            }
        }
        Ok(())
    }
}
