use super::{Real, Tensor};
use crate::error::{Error, Result};

/// SGD with momentum and L2 weight decay:
/// `v <- momentum * v - lr * (g + decay * p)`, `p <- p + v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescales the gradient when its global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            clip_norm: None,
            velocity: Vec::new(),
        }
    }

    /// Applies one update. If any gradient is non-finite nothing is modified.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::Shape(format!("parameter {i}: gradient length mismatch")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        let scale = match self.clip_norm {
            Some(c) => {
                let norm = grads.iter().flatten().map(|v| v.to_f64().unwrap_or(0.0).powi(2)).sum::<f64>().sqrt();
                if norm > c { c / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let (lr, mom, wd, scale) = (T::lit(self.lr), T::lit(self.momentum), T::lit(self.weight_decay), T::lit(scale));
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vv = mom * *vv - lr * (scale * gv + wd * *pv);
                *pv += *vv;
            }
        }
        Ok(())
    }
}
