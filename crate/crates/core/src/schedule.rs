//! Per-timestep scalar sequences: β_t, α_t, ᾱ_t, backward σ_t and the
//! exponential regularization weights w_t.
//!
//! All sequences are indexed by `t = 1..=T`; index 0 is reserved for the
//! data end of the chain (ᾱ_0 = 1).

use crate::error::{Error, Result};

/// How the backward standard deviation σ_t is derived from the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaMode {
    /// σ_t² = β_t.
    #[default]
    Beta,
    /// σ_t² = β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t), the forward posterior variance.
    Posterior,
}

impl SigmaMode {
    pub fn as_u8(self) -> u8 {
        match self {
            SigmaMode::Beta => 0,
            SigmaMode::Posterior => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(SigmaMode::Beta),
            1 => Some(SigmaMode::Posterior),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SigmaMode::Beta => "beta",
            SigmaMode::Posterior => "posterior",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    sigma_mode: SigmaMode,
    // Stored 0-based: element `t - 1` belongs to step t.
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

/// Linear β schedule from `beta_start` (t = 1) to `beta_end` (t = T).
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Schedule("T must be at least 1".into()));
    }
    let in_unit = |b: f64| b > 0.0 && b < 1.0;
    if !in_unit(beta_start) || !in_unit(beta_end) {
        return Err(Error::Schedule(format!(
            "endpoints must lie in (0, 1), got ({beta_start}, {beta_end})"
        )));
    }
    if beta_start > beta_end {
        return Err(Error::Schedule(format!(
            "beta_start ({beta_start}) must not exceed beta_end ({beta_end})"
        )));
    }
    let beta = (1..=steps)
        .map(|t| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * (t - 1) as f64 / (steps - 1) as f64
            }
        })
        .collect();
    Ok(NoiseSchedule::build(beta, beta_start, beta_end, SigmaMode::Beta))
}

impl NoiseSchedule {
    /// Schedule from an explicit β sequence. Accepts β_t = 0 (degenerate,
    /// noiseless steps) for testing; β_t must be finite and below 1.
    pub fn from_betas(betas: Vec<f64>) -> Result<NoiseSchedule> {
        if betas.is_empty() {
            return Err(Error::Schedule("T must be at least 1".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(b.is_finite() && **b >= 0.0 && **b < 1.0)) {
            return Err(Error::Schedule(format!("beta {b} outside [0, 1)")));
        }
        let first = betas[0];
        let last = betas[betas.len() - 1];
        Ok(NoiseSchedule::build(betas, first, last, SigmaMode::Beta))
    }

    fn build(beta: Vec<f64>, beta_start: f64, beta_end: f64, sigma_mode: SigmaMode) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let mut s = NoiseSchedule {
            beta_start,
            beta_end,
            sigma_mode,
            beta,
            alpha,
            alpha_bar,
            sigma: Vec::new(),
        };
        s.sigma = s.compute_sigma(sigma_mode);
        s
    }

    fn compute_sigma(&self, mode: SigmaMode) -> Vec<f64> {
        (1..=self.steps())
            .map(|t| match mode {
                SigmaMode::Beta => self.beta(t).sqrt(),
                SigmaMode::Posterior => {
                    let ab = self.alpha_bar_at(t);
                    if 1.0 - ab <= 0.0 {
                        0.0
                    } else {
                        (self.beta(t) * (1.0 - self.alpha_bar_at(t - 1)) / (1.0 - ab)).sqrt()
                    }
                }
            })
            .collect()
    }

    pub fn with_sigma_mode(mut self, mode: SigmaMode) -> Self {
        self.sigma_mode = mode;
        self.sigma = self.compute_sigma(mode);
        self
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    pub fn sigma_mode(&self) -> SigmaMode {
        self.sigma_mode
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::TimeRange {
                t,
                lo: 1,
                hi: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    /// β_t, `1 ≤ t ≤ T`. Panics outside the range.
    #[inline]
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    #[inline]
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Backward standard deviation σ_t.
    #[inline]
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    /// ᾱ_t for `0 ≤ t ≤ T` with ᾱ_0 = 1. Panics outside the range.
    #[inline]
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Checked ᾱ_t for `1 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }
}

/// Exponential weights w_t ∝ exp(ρ (T − t)) over t = 1..=T, summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSchedule {
    rho: f64,
    w: Vec<f64>,
}

pub fn make_weight_schedule(rho: f64, steps: usize) -> Result<WeightSchedule> {
    if !(rho.is_finite() && rho >= 0.0) {
        return Err(Error::Invalid(format!("rho must be finite and >= 0, got {rho}")));
    }
    if steps == 0 {
        return Err(Error::Schedule("T must be at least 1".into()));
    }
    // Exponents shifted by their maximum, ρ (T − 1) at t = 1.
    let top = rho * (steps - 1) as f64;
    let raw: Vec<f64> = (1..=steps).map(|t| (rho * (steps - t) as f64 - top).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(WeightSchedule {
        rho,
        w: raw.into_iter().map(|v| v / total).collect(),
    })
}

impl WeightSchedule {
    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// w_t for `1 ≤ t ≤ T`.
    pub fn weight(&self, t: usize) -> f64 {
        self.w[t - 1]
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }
}
