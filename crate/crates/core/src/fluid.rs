//! Deterministic fluid equilibrium of the batching system.
//!
//! With iteration time `d0 + d1 * M` and every type advancing one stage per
//! iteration, the balance `n_j = dT * lambda_j * (l'_j + 1)` closes to
//! `dT = d0 / (1 - d1 * A)` where `A = sum_j lambda_j (l'_j + 1)(l_j + l'_j / 2)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::workload::{validate_types, PromptType};

/// Iteration cost `d0 + d1 * tokens` and KV capacity in tokens.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub d0: f64,
    pub d1: f64,
    pub capacity: u64,
}

impl SystemConfig {
    pub fn new(d0: f64, d1: f64, capacity: u64) -> Result<Self> {
        let c = Self { d0, d1, capacity };
        c.validate()?;
        Ok(c)
    }

    /// No memory limit.
    pub fn unbounded(d0: f64, d1: f64) -> Result<Self> {
        Self::new(d0, d1, u64::MAX)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d0.is_finite() && self.d0 > 0.0 && self.d1.is_finite() && self.d1 > 0.0) {
            return Err(invalid(format!("d0 and d1 must be positive, got {} and {}", self.d0, self.d1)));
        }
        if self.capacity == 0 {
            return Err(invalid("capacity must be positive"));
        }
        Ok(())
    }

    /// Speeds divided by `zeta`; capacity unchanged.
    pub fn scaled(&self, zeta: f64) -> Self {
        Self {
            d0: self.d0 / zeta,
            d1: self.d1 / zeta,
            capacity: self.capacity,
        }
    }

    pub fn iteration_time(&self, tokens: f64) -> f64 {
        self.d0 + self.d1 * tokens
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluidEquilibrium {
    pub delta_t: f64,
    /// Prompts of each type in the system, summed over stages.
    pub n_star: Vec<f64>,
    pub memory: f64,
    pub throughput: f64,
    pub margin: f64,
}

impl FluidEquilibrium {
    /// Equilibrium prompts of type `j` at each single stage.
    pub fn per_stage(&self, types: &[PromptType]) -> Vec<f64> {
        self.n_star
            .iter()
            .zip(types)
            .map(|(n, t)| n / (t.decode_len as f64 + 1.0))
            .collect()
    }
}

/// `A = sum_j lambda_j (l'_j + 1)(l_j + l'_j / 2)`.
pub fn load(types: &[PromptType]) -> f64 {
    types.iter().map(|t| t.rate * t.lifetime_memory()).sum()
}

/// `1 - d1 * A`; the system is stable only when this is positive.
pub fn stability_margin(types: &[PromptType], cfg: &SystemConfig) -> f64 {
    1.0 - cfg.d1 * load(types)
}

/// `sum_j lambda_j l'_j` decode tokens per unit time.
pub fn fluid_throughput(types: &[PromptType]) -> f64 {
    types.iter().map(|t| t.rate * t.decode_len as f64).sum()
}

pub fn solve_equilibrium(types: &[PromptType], cfg: &SystemConfig) -> Result<FluidEquilibrium> {
    validate_types(types)?;
    cfg.validate()?;
    let margin = stability_margin(types, cfg);
    if margin <= 0.0 {
        return Err(Error::Unstable { margin });
    }
    let delta_t = cfg.d0 / margin;
    let n_star: Vec<f64> = types
        .iter()
        .map(|t| delta_t * t.rate * (t.decode_len as f64 + 1.0))
        .collect();
    let memory = n_star
        .iter()
        .zip(types)
        .map(|(n, t)| n * (t.prefill_len as f64 + t.decode_len as f64 / 2.0))
        .sum();
    Ok(FluidEquilibrium {
        delta_t,
        n_star,
        memory,
        throughput: fluid_throughput(types),
        margin,
    })
}

/// Types with every rate multiplied by `zeta`.
pub fn scale_types(types: &[PromptType], zeta: f64) -> Vec<PromptType> {
    types
        .iter()
        .map(|t| PromptType {
            rate: t.rate * zeta,
            ..t.clone()
        })
        .collect()
}
