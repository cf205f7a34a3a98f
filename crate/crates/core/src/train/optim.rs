use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::config::TrainerConfig;
use crate::error::{Error, Result};

/// Linear warmup to the peak rate, then cosine decay to zero at `total`.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
}

impl Schedule {
    pub fn new(peak: f64, warmup_frac: f64, total: u64) -> Self {
        Self {
            peak,
            warmup: (warmup_frac * total as f64).ceil() as u64,
            total,
        }
    }

    /// Rate for the update that produces step `step + 1`.
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam moments for one parameter.
#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// AdamW with decoupled weight decay, applied to matrices only.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub moments: Vec<Moments>,
}

impl AdamW {
    pub fn new(cfg: &TrainerConfig, vars: &[&Var]) -> Result<Self> {
        let moments = vars
            .iter()
            .map(|v| {
                Ok(Moments {
                    m: v.zeros_like()?,
                    v: v.zeros_like()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            moments,
        })
    }

    /// One update with learning rate `lr`; `step` is the 1-based update index
    /// used for bias correction.
    pub fn step(&mut self, vars: &[&Var], grads: &[Tensor], lr: f64, step: u64) -> Result<()> {
        if vars.len() != self.moments.len() || grads.len() != vars.len() {
            return Err(Error::Shape("optimizer/parameter count mismatch".into()));
        }
        if lr == 0.0 {
            return Ok(());
        }
        let c1 = 1.0 - self.beta1.powi(step as i32);
        let c2 = 1.0 - self.beta2.powi(step as i32);
        for ((var, g), mom) in vars.iter().zip(grads).zip(self.moments.iter_mut()) {
            mom.m = ((&mom.m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            mom.v = ((&mom.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&mom.m / c1)?;
            let v_hat = (&mom.v / c2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let mut next = (var.as_tensor() - (update * lr)?)?;
            if self.weight_decay > 0.0 && var.rank() >= 2 {
                next = (next - (var.as_tensor() * (lr * self.weight_decay))?)?;
            }
            var.set(&next)?;
        }
        Ok(())
    }
}

/// Gradients for `vars` (zeros where a variable received none), scaled so
/// their global L2 norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clipped_grads(store: &GradStore, vars: &[&Var], max_norm: f64) -> Result<(Vec<Tensor>, f64)> {
    let grads = vars
        .iter()
        .map(|v| match store.get(v.as_tensor()) {
            Some(g) => Ok(g.clone()),
            None => Ok(v.zeros_like()?),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sq = 0.0;
    for g in &grads {
        sq += g.sqr()?.sum_all()?.to_scalar::<f64>()?;
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        let scaled = grads
            .iter()
            .map(|g| Ok((g * scale)?))
            .collect::<Result<Vec<_>>>()?;
        return Ok((scaled, norm));
    }
    Ok((grads, norm))
}
