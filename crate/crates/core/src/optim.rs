//! Adam in its constant-rate theory form, AdamW with bias correction and
//! decoupled weight decay, the warmup-plus-cosine learning-rate schedule,
//! gradient clipping, and the hyperparameter admissibility check with its
//! constant.

use crate::error::CoreError;
use crate::vector::ParamVector;

/// Which update rule the optimizer runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdamForm {
    /// No bias correction, no epsilon, no weight decay; divides by v^{1/2}
    /// and therefore requires v0 > 0 coordinate-wise.
    Theory,
    /// Bias-corrected moments, epsilon-guarded division, decoupled decay.
    AdamW,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// L2 clipping threshold for the global gradient; `None` disables.
    pub clip_norm: Option<f64>,
    pub form: AdamForm,
    /// Initial second-moment value for the theory form (sigma^2).
    pub v0: f64,
}

impl AdamConfig {
    pub fn adamw(alpha: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            alpha,
            beta1,
            beta2,
            eps,
            weight_decay,
            clip_norm: Some(1.0),
            form: AdamForm::AdamW,
            v0: 0.0,
        }
    }

    pub fn theory(alpha: f64, beta1: f64, beta2: f64, v0: f64) -> Self {
        Self {
            alpha,
            beta1,
            beta2,
            eps: 0.0,
            weight_decay: 0.0,
            clip_norm: None,
            form: AdamForm::Theory,
            v0,
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.alpha <= 0.0 {
            return Err(CoreError::invalid("learning rate must be positive"));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) || !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(CoreError::invalid(format!(
                "betas must lie in (0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if self.eps < 0.0 || self.weight_decay < 0.0 {
            return Err(CoreError::invalid("eps and weight decay must be nonnegative"));
        }
        match self.form {
            AdamForm::Theory => {
                if self.eps != 0.0 || self.weight_decay != 0.0 {
                    return Err(CoreError::invalid(
                        "theory form requires eps = 0 and weight_decay = 0",
                    ));
                }
                if self.v0 <= 0.0 {
                    return Err(CoreError::invalid("theory form requires v0 > 0"));
                }
            }
            AdamForm::AdamW => {
                if self.eps <= 0.0 {
                    return Err(CoreError::invalid("adamw requires eps > 0"));
                }
            }
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return Err(CoreError::invalid("clip norm must be positive"));
            }
        }
        Ok(())
    }
}

/// First/second moment state plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub m: ParamVector,
    pub v: ParamVector,
    /// Next step index; starts at 1.
    pub k: u64,
}

impl OptimState {
    pub fn new(dim: usize, cfg: &AdamConfig) -> Self {
        let v0 = match cfg.form {
            AdamForm::Theory => cfg.v0,
            AdamForm::AdamW => 0.0,
        };
        Self {
            m: ParamVector::zeros(dim),
            v: ParamVector::filled(dim, v0),
            k: 1,
        }
    }
}

/// Theory-form update: m, v recursions and `w - alpha * m / sqrt(v)`.
pub fn adam_step_theory(
    state: &OptimState,
    w: &ParamVector,
    g: &ParamVector,
    cfg: &AdamConfig,
) -> Result<(OptimState, ParamVector), CoreError> {
    let mut m = state.m.scale(cfg.beta1);
    m.axpy(1.0 - cfg.beta1, g)?;
    let mut v = state.v.scale(cfg.beta2);
    v.axpy(1.0 - cfg.beta2, &g.mul(g)?)?;

    let mut new_w = Vec::with_capacity(w.dim());
    for i in 0..w.dim() {
        let vi = v[i];
        if vi == 0.0 {
            return Err(CoreError::ZeroSecondMoment { coordinate: i });
        }
        new_w.push(w[i] - cfg.alpha * m[i] / vi.sqrt());
    }
    Ok((
        OptimState { m, v, k: state.k + 1 },
        ParamVector::new(new_w),
    ))
}

/// AdamW update with bias correction and decoupled weight decay; `lr`
/// substitutes the constant rate per step.
pub fn adamw_step(
    state: &OptimState,
    w: &ParamVector,
    g: &ParamVector,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<(OptimState, ParamVector), CoreError> {
    let k = state.k;
    let mut m = state.m.scale(cfg.beta1);
    m.axpy(1.0 - cfg.beta1, g)?;
    let mut v = state.v.scale(cfg.beta2);
    v.axpy(1.0 - cfg.beta2, &g.mul(g)?)?;

    let m_corr = 1.0 / (1.0 - cfg.beta1.powi(k as i32));
    let v_corr = 1.0 / (1.0 - cfg.beta2.powi(k as i32));
    let decay = 1.0 - lr * cfg.weight_decay;

    let mut new_w = Vec::with_capacity(w.dim());
    for i in 0..w.dim() {
        let m_hat = m[i] * m_corr;
        let v_hat = v[i] * v_corr;
        new_w.push(decay * w[i] - lr * m_hat / (v_hat.sqrt() + cfg.eps));
    }
    Ok((
        OptimState { m, v, k: k + 1 },
        ParamVector::new(new_w),
    ))
}

/// Rescales `g` onto the L2 ball of radius `max_norm`; direction preserved.
pub fn clip_gradient(g: &ParamVector, max_norm: f64) -> ParamVector {
    let norm = g.l2_norm();
    if norm <= max_norm {
        g.clone()
    } else {
        g.scale(max_norm / norm)
    }
}

/// Linear warmup followed by cosine decay, indexed by processed samples.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub peak: f64,
    pub min: f64,
    pub warmup_samples: u64,
    pub total_samples: u64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.min > 0.0 && self.min <= self.peak) {
            return Err(CoreError::invalid("schedule needs 0 < min <= peak"));
        }
        if self.warmup_samples > self.total_samples {
            return Err(CoreError::invalid("warmup_samples must not exceed total_samples"));
        }
        Ok(())
    }

    /// Learning rate after `samples_processed` samples.
    pub fn lr_at(&self, samples_processed: u64) -> f64 {
        let s = samples_processed;
        if s < self.warmup_samples {
            return self.peak * s as f64 / self.warmup_samples as f64;
        }
        if s >= self.total_samples || self.total_samples == self.warmup_samples {
            return self.min;
        }
        let t = (s - self.warmup_samples) as f64 / (self.total_samples - self.warmup_samples) as f64;
        self.min + (self.peak - self.min) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Admissibility threshold for beta1:
/// `sqrt(beta2) - 8 (1 + eta^2) (1 - beta2) / beta2^2`.
pub fn theorem_condition(beta1: f64, beta2: f64, eta: f64) -> (bool, f64) {
    let threshold = beta2.sqrt() - 8.0 * (1.0 + eta * eta) * (1.0 - beta2) / (beta2 * beta2);
    (beta1 > 0.0 && beta1 <= threshold, threshold)
}

/// The three-term constant c1 from the convergence bound.
#[allow(clippy::too_many_arguments)]
pub fn theorem_constant_c1(
    alpha: f64,
    beta1: f64,
    beta2: f64,
    lipschitz: f64,
    sigma: f64,
    dim: usize,
) -> Result<f64, CoreError> {
    if beta1 >= beta2.sqrt() {
        return Err(CoreError::invalid(format!(
            "c1 requires beta1 < sqrt(beta2), got beta1 = {beta1}, sqrt(beta2) = {}",
            beta2.sqrt()
        )));
    }
    if lipschitz <= 0.0 || sigma <= 0.0 {
        return Err(CoreError::invalid("c1 requires L > 0 and sigma > 0"));
    }
    let ratio = beta1 / beta2.sqrt();
    let d = dim as f64;
    let term1 = 32.0 * lipschitz * alpha * (1.0 + ratio).powi(3)
        / ((1.0 - beta2) * (1.0 - ratio).powi(3));
    let term2 = 16.0 * beta1 * beta1 * sigma * (1.0 - beta1)
        / (beta2 * (1.0 - beta2).sqrt() * (1.0 - ratio).powi(3));
    let term3 = 64.0 * (1.0 + sigma * sigma) * sigma * sigma * lipschitz * lipschitz * alpha * alpha * d
        / (beta2 * beta2 * (1.0 - ratio).powi(4) * sigma * (1.0 - beta2).powf(1.5));
    Ok(term1 + term2 + term3)
}
