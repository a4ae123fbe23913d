//! AdamW with decoupled weight decay and per-tensor decay exclusion.
//!
//! ```text
//! m ← β₁ m + (1 − β₁) g
//! v ← β₂ v + (1 − β₂) g²
//! θ ← θ − lr · ( m̂ / (√v̂ + ε) + wd · θ )
//! ```
//! where `m̂`, `v̂` are the bias-corrected moments and `wd` is forced to zero
//! for tensors flagged as excluded.

use crate::error::{Error, Result};

/// A named parameter tensor handed to the optimizer.
pub struct ParamTensor<'a> {
    pub name: &'static str,
    /// Whether weight decay applies to this tensor.
    pub decay: bool,
    pub values: &'a mut [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// Moment buffers, lazily shaped on the first step.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    pub fn step(&mut self, params: Vec<ParamTensor<'_>>, grads: &[&[f64]], lr: f64, weight_decay: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Data(format!(
                "optimizer got {} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.values.len() != g.len() {
                return Err(Error::Data(format!("gradient shape mismatch for {}", p.name)));
            }
            if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient ({bad}) in parameter group {}",
                    p.name
                )));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.values.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::Data("optimizer state does not match parameter layout".into()));
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (i, p) in params.into_iter().enumerate() {
            let wd = if p.decay { weight_decay } else { 0.0 };
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (((theta, &g), mi), vi) in p.values.iter_mut().zip(grads[i]).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + eps) + wd * *theta;
                *theta -= lr * update;
            }
        }
        Ok(())
    }
}
