//! Resolved per-command settings. Each struct is filled from its defaults,
//! then from an optional JSON file, then from command-line flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use weaver_core::training::TrainConfig;
use weaver_core::{HParams, Mode, WeaverConfig};

use crate::CliError;

/// Reads a partial settings object; keys it leaves out keep their defaults.
pub fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenData {
    pub tasks: usize,
    pub clusters: usize,
    pub per_task: usize,
    pub corpus_per_task: usize,
    pub seed: u64,
}

impl Default for GenData {
    fn default() -> Self {
        GenData { tasks: 42, clusters: 6, per_task: 5, corpus_per_task: 100, seed: 1 }
    }
}

impl GenData {
    pub fn validate(&self) -> Result<(), CliError> {
        for (name, v) in [("tasks", self.tasks), ("clusters", self.clusters), ("per-task", self.per_task)] {
            if v == 0 {
                return Err(CliError::Usage(format!("--{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape { d_model: 64, n_layers: 4, n_heads: 4, d_ffn: 256, max_seq_len: 128 }
    }
}

impl ModelShape {
    pub fn hparams(&self) -> HParams {
        HParams {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ffn: self.d_ffn,
            max_seq_len: self.max_seq_len,
            ..HParams::default()
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Train {
    pub model: ModelShape,
    pub train: TrainConfig,
}

pub fn pretrain_defaults() -> TrainConfig {
    TrainConfig { total_steps: 1000, warmup_steps: 50, seed: 1, ..TrainConfig::default() }
}

pub fn cpt_defaults() -> TrainConfig {
    TrainConfig {
        total_steps: 300,
        warmup_steps: 30,
        peak_lr: 1e-3,
        min_lr: 1e-4,
        lb_lambda: 0.01,
        seed: 1,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Weave {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub tau: f64,
    pub n_experts: usize,
    /// Experts active per token, shared ones included.
    pub k: usize,
    pub mode: Mode,
    /// Downcycling: shared experts per layer.
    pub uniform_shared: usize,
    pub renormalize_gates: bool,
    pub seed: u64,
}

impl Default for Weave {
    fn default() -> Self {
        let d = WeaverConfig::default();
        Weave {
            alpha_min: d.alpha_min,
            alpha_max: d.alpha_max,
            tau: d.tau,
            n_experts: d.n_experts,
            k: d.k_active,
            mode: d.mode,
            uniform_shared: 2,
            renormalize_gates: d.renormalize_gates,
            seed: 1,
        }
    }
}

impl Weave {
    pub fn weaver_config(&self) -> Result<WeaverConfig, CliError> {
        if self.n_experts == 0 || self.uniform_shared >= self.n_experts {
            return Err(CliError::Usage(format!(
                "--uniform-shared {} must be below --n-experts {}",
                self.uniform_shared, self.n_experts
            )));
        }
        let cfg = WeaverConfig {
            alpha_min: self.alpha_min,
            alpha_max: self.alpha_max,
            tau: self.tau,
            n_experts: self.n_experts,
            k_active: self.k,
            mode: self.mode,
            uniform_shared_ratio: self.uniform_shared as f64 / self.n_experts as f64,
            seed: self.seed,
            renormalize_gates: self.renormalize_gates,
            ..WeaverConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Eval {
    pub sparsity: Vec<f64>,
    pub whole_corpus: bool,
    pub weave: Weave,
}

impl Default for Eval {
    fn default() -> Self {
        Eval { sparsity: vec![0.25, 0.5], whole_corpus: false, weave: Weave::default() }
    }
}
