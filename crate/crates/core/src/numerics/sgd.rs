use crate::error::{Error, Result};

use super::ModelParams;

/// SGD with heavy-ball momentum: `v <- momentum * v + g; p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<ModelParams>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: None,
        })
    }

    /// Applies one update in place. A non-finite gradient leaves `params`
    /// and the momentum buffer untouched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradient contains NaN or Inf".into()));
        }
        let velocity = self.velocity.get_or_insert_with(|| grads.zeros_like());
        velocity.scale(self.momentum);
        velocity.add_scaled(grads, 1.0);
        params.add_scaled(velocity, -self.lr);
        Ok(())
    }
}

/// Functional form of one step from a zero momentum buffer.
pub fn sgd_step(params: &ModelParams, grads: &ModelParams, lr: f64, momentum: f64) -> Result<ModelParams> {
    let mut out = params.clone();
    Sgd::new(lr, momentum)?.step(&mut out, grads)?;
    Ok(out)
}
