//! Per-layer shared/routed expert budgets from neuron activation statistics.
//!
//! A neuron's coefficient of variation across tasks separates universal
//! neurons (low CV) from specialized ones. The fraction of specialized
//! neurons in a layer shrinks the layer's shared expert linearly between
//! `alpha_max` and `alpha_min`.

use serde::{Deserialize, Serialize};

use crate::calibration::{per_task_profiles, ActivationMatrix};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Training-free dynamic structural pruning: unweighted sum of selected experts.
    Pruning,
    /// Softmax-gated MoE intended for continued pretraining.
    Downcycling,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pruning" => Ok(Mode::Pruning),
            "downcycling" => Ok(Mode::Downcycling),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected pruning or downcycling)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeaverConfig {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub tau: f64,
    pub n_experts: usize,
    /// Experts active per token, shared ones included.
    pub k_active: usize,
    pub mode: Mode,
    /// Downcycling only: fraction of `d_ffn` given to shared experts in every layer.
    pub uniform_shared_ratio: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Downcycling only: renormalize gate weights over the selected experts.
    pub renormalize_gates: bool,
}

impl Default for WeaverConfig {
    fn default() -> Self {
        WeaverConfig {
            alpha_min: 0.2,
            alpha_max: 0.7,
            tau: 0.6,
            n_experts: 64,
            k_active: 48,
            mode: Mode::Pruning,
            uniform_shared_ratio: 2.0 / 64.0,
            epsilon: 1e-8,
            seed: 0,
            renormalize_gates: true,
        }
    }
}

impl WeaverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0 <= self.alpha_min && self.alpha_min <= self.alpha_max && self.alpha_max <= 1.0) {
            return bad(format!(
                "need 0 <= alpha_min <= alpha_max <= 1, got {} and {}",
                self.alpha_min, self.alpha_max
            ));
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.n_experts == 0 || self.k_active == 0 || self.k_active > self.n_experts {
            return bad(format!(
                "need 1 <= k <= n_experts, got k={} n_experts={}",
                self.k_active, self.n_experts
            ));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(0.0..=1.0).contains(&self.uniform_shared_ratio) {
            return bad(format!(
                "uniform shared ratio {} outside [0, 1]",
                self.uniform_shared_ratio
            ));
        }
        Ok(())
    }

    pub fn d_expert(&self, d_ffn: usize) -> Result<usize> {
        if self.n_experts == 0 || !d_ffn.is_multiple_of(self.n_experts) {
            return Err(Error::Config(format!(
                "d_ffn {d_ffn} is not divisible by n_experts {}",
                self.n_experts
            )));
        }
        Ok(d_ffn / self.n_experts)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAllocation {
    pub layer: usize,
    pub cv: Vec<f64>,
    pub r: f64,
    pub alpha: f64,
    pub d_s: usize,
    pub n_se: usize,
    pub n_re: usize,
    pub d_expert: usize,
}

impl LayerAllocation {
    pub fn n_experts(&self) -> usize {
        self.n_se + self.n_re
    }

    pub fn shared_neurons(&self) -> usize {
        self.n_se * self.d_expert
    }

    /// Routed slots per token when `k` experts are active in total.
    pub fn k_routed(&self, k: usize) -> usize {
        k.saturating_sub(self.n_se)
    }
}

/// `σ_j / (μ_j + ε)` over each row's task profile, population std.
pub fn coefficient_of_variation(profiles: &[Vec<f64>], epsilon: f64) -> Result<Vec<f64>> {
    let t = profiles.first().map_or(0, Vec::len);
    if t < 2 {
        return Err(Error::Input(format!(
            "coefficient of variation needs at least 2 tasks, got {t}"
        )));
    }
    if profiles.iter().any(|row| row.len() != t) {
        return Err(Error::shape("coefficient_of_variation", "ragged profile rows"));
    }
    Ok(profiles
        .iter()
        .map(|row| {
            let mean = row.iter().sum::<f64>() / t as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let d = v - mean;
                    d * d
                })
                .sum::<f64>()
                / t as f64;
            var.sqrt() / (mean + epsilon)
        })
        .collect())
}

/// Fraction of entries strictly above `tau`.
pub fn specialization_ratio(cv: &[f64], tau: f64) -> f64 {
    if cv.is_empty() {
        return 0.0;
    }
    cv.iter().filter(|&&c| c > tau).count() as f64 / cv.len() as f64
}

pub fn shared_ratio(r: f64, alpha_min: f64, alpha_max: f64) -> f64 {
    alpha_max - (alpha_max - alpha_min) * r
}

/// Half-away-from-zero rounding of a non-negative value.
fn round_count(x: f64) -> usize {
    x.round().max(0.0) as usize
}

fn budget(alpha: f64, d_ffn: usize, d_expert: usize) -> (usize, usize) {
    let d_s = round_count(alpha * d_ffn as f64);
    let n_se = round_count(d_s as f64 / d_expert as f64);
    (d_s, n_se)
}

/// Layer-adaptive allocation for pruning mode. The shared expert count is
/// clamped to `k - 1` so at least one routed slot remains.
pub fn allocate_layer(
    layer: usize,
    cv: &[f64],
    config: &WeaverConfig,
    d_ffn: usize,
) -> Result<LayerAllocation> {
    config.validate()?;
    let d_expert = config.d_expert(d_ffn)?;
    let r = specialization_ratio(cv, config.tau);
    let alpha = shared_ratio(r, config.alpha_min, config.alpha_max);
    let (d_s, raw_n_se) = budget(alpha, d_ffn, d_expert);
    let n_se = raw_n_se.min(config.k_active - 1).min(config.n_experts - 1);
    Ok(LayerAllocation {
        layer,
        cv: cv.to_vec(),
        r,
        alpha,
        d_s,
        n_se,
        n_re: config.n_experts - n_se,
        d_expert,
    })
}

/// Same shared expert count in every layer, for downcycling.
pub fn allocate_uniform(
    config: &WeaverConfig,
    d_ffn: usize,
    n_layers: usize,
) -> Result<Vec<LayerAllocation>> {
    config.validate()?;
    if config.mode != Mode::Downcycling {
        return Err(Error::Mode(
            "uniform allocation applies to downcycling mode only".into(),
        ));
    }
    let d_expert = config.d_expert(d_ffn)?;
    let alpha = config.uniform_shared_ratio;
    let (d_s, n_se) = budget(alpha, d_ffn, d_expert);
    if n_se >= config.k_active {
        return Err(Error::Config(format!(
            "{n_se} shared experts leave no routed slot with k={}",
            config.k_active
        )));
    }
    Ok((0..n_layers)
        .map(|layer| LayerAllocation {
            layer,
            cv: Vec::new(),
            r: 0.0,
            alpha,
            d_s,
            n_se,
            n_re: config.n_experts - n_se,
            d_expert,
        })
        .collect())
}

/// Allocations for every captured layer according to `config.mode`.
/// In downcycling mode the CV statistics are still filled in for reporting.
pub fn allocate(
    activations: &[ActivationMatrix],
    num_tasks: usize,
    config: &WeaverConfig,
) -> Result<Vec<LayerAllocation>> {
    let d_ffn = activations
        .first()
        .map(ActivationMatrix::d_ffn)
        .ok_or_else(|| Error::Input("no activation matrices".into()))?;
    let cvs = activations
        .iter()
        .map(|a| coefficient_of_variation(&per_task_profiles(a, num_tasks)?, config.epsilon))
        .collect::<Result<Vec<_>>>()?;
    match config.mode {
        Mode::Pruning => cvs
            .iter()
            .enumerate()
            .map(|(l, cv)| allocate_layer(l, cv, config, d_ffn))
            .collect(),
        Mode::Downcycling => {
            let mut out = allocate_uniform(config, d_ffn, activations.len())?;
            for (alloc, cv) in out.iter_mut().zip(cvs) {
                alloc.r = specialization_ratio(&cv, config.tau);
                alloc.cv = cv;
            }
            Ok(out)
        }
    }
}

/// One row of the allocation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationRow {
    pub layer: usize,
    pub r: f64,
    pub alpha: f64,
    pub n_se: usize,
    pub n_re: usize,
    pub d_s: usize,
    pub d_expert: usize,
}

pub fn allocation_report(allocs: &[LayerAllocation]) -> Vec<AllocationRow> {
    allocs
        .iter()
        .map(|a| AllocationRow {
            layer: a.layer,
            r: a.r,
            alpha: a.alpha,
            n_se: a.n_se,
            n_re: a.n_re,
            d_s: a.d_s,
            d_expert: a.d_expert,
        })
        .collect()
}
