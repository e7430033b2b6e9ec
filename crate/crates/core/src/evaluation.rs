//! Side-by-side comparison of sparsification methods at matched FFN
//! sparsity, sparsity accounting and routing statistics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::calibration::{ActivationMatrix, CalibrationSet};
use crate::error::{Error, Result};
use crate::kernels::Matrix;
use crate::model::{Backbone, DenseGluLayer, DenseGluModel};
use crate::runtime::abs_topk_glu_forward;
use crate::specialization::{allocate, LayerAllocation, Mode, WeaverConfig};
use crate::training::{evaluate_loss, Corpus, EvalLoss, LanguageModel};
use crate::weaving::{weave_model, MoeModel};

/// L2 norm of each neuron slice: gate column, up column and down row together.
pub fn slice_norms(layer: &DenseGluLayer) -> Vec<f64> {
    let sq = |v: f32| (v as f64) * (v as f64);
    let mut norms = vec![0.0f64; layer.d_ffn()];
    for r in 0..layer.d_model() {
        for (j, n) in norms.iter_mut().enumerate() {
            *n += sq(layer.w_gate.get(r, j)) + sq(layer.w_up.get(r, j));
        }
    }
    for (j, n) in norms.iter_mut().enumerate() {
        *n += layer.w_down.row(j).iter().map(|&v| sq(v)).sum::<f64>();
    }
    norms.iter().map(|n| n.sqrt()).collect()
}

/// Neurons kept by [`magnitude_prune_structured`], ascending.
pub fn magnitude_keep_set(layer: &DenseGluLayer, keep_fraction: f64) -> Result<Vec<usize>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Param(format!("keep_fraction {keep_fraction} outside (0, 1]")));
    }
    let d = layer.d_ffn();
    let remove = ((1.0 - keep_fraction) * d as f64).round() as usize;
    let keep = d.saturating_sub(remove);
    if keep == 0 {
        return Err(Error::Param(format!("keep_fraction {keep_fraction} keeps no neurons of {d}")));
    }
    let norms = slice_norms(layer);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Drops the neuron slices with the smallest norms, keeping
/// `d_ffn - round((1 - keep_fraction) * d_ffn)` of them in original order.
pub fn magnitude_prune_structured(layer: &DenseGluLayer, keep_fraction: f64) -> Result<DenseGluLayer> {
    let kept = magnitude_keep_set(layer, keep_fraction)?;
    DenseGluLayer::new(
        layer.w_gate.select_columns(&kept)?,
        layer.w_up.select_columns(&kept)?,
        layer.w_down.select_rows(&kept)?,
    )
}

/// Dense backbone with statically narrowed FFN layers.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunedModel {
    pub backbone: Backbone,
    pub ffn: Vec<DenseGluLayer>,
}

impl PrunedModel {
    pub fn magnitude(model: &DenseGluModel, keep_fraction: f64) -> Result<Self> {
        Ok(PrunedModel {
            backbone: model.backbone.clone(),
            ffn: model
                .ffn
                .iter()
                .map(|l| magnitude_prune_structured(l, keep_fraction))
                .collect::<Result<_>>()?,
        })
    }
}

impl LanguageModel for PrunedModel {
    fn max_seq_len(&self) -> usize {
        self.backbone.hparams.max_seq_len
    }

    fn logits(&self, tokens: &[u32]) -> Result<Matrix> {
        self.backbone.forward_with(tokens, |l, x| self.ffn[l].forward(x))
    }
}

/// Dense model whose FFNs keep the `k` largest-magnitude gate activations per token.
#[derive(Clone, Copy, Debug)]
pub struct AbsTopKModel<'a> {
    pub model: &'a DenseGluModel,
    pub k: usize,
}

impl LanguageModel for AbsTopKModel<'_> {
    fn max_seq_len(&self) -> usize {
        self.model.hparams().max_seq_len
    }

    fn logits(&self, tokens: &[u32]) -> Result<Matrix> {
        self.model
            .backbone
            .forward_with(tokens, |l, x| abs_topk_glu_forward(&self.model.ffn[l], x, self.k))
    }
}

/// Active share of each layer's FFN neurons when `k` experts are active
/// per token: `(n_se + k_routed) / N_e`, i.e. `k / N_e` whenever `k` fits.
pub fn active_fractions(allocs: &[LayerAllocation], k: usize) -> Vec<f64> {
    allocs
        .iter()
        .map(|a| (a.n_se + a.k_routed(k)) as f64 / a.n_experts() as f64)
        .collect()
}

/// Mean over layers of the active FFN fraction.
pub fn sparsity_of_config(allocs: &[LayerAllocation], k: usize) -> f64 {
    if allocs.is_empty() {
        return 0.0;
    }
    active_fractions(allocs, k).iter().sum::<f64>() / allocs.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Dense,
    AbsTopK,
    Magnitude,
    ExpertWeaver,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Dense => "dense",
            Method::AbsTopK => "abs-top-k",
            Method::Magnitude => "magnitude",
            Method::ExpertWeaver => "expert-weaver",
        }
    }
}

/// Active units of one layer: neurons for the dense-shaped methods,
/// experts for the woven model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub active: usize,
    pub total: usize,
    pub n_se: Option<usize>,
    pub n_re: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub method: Method,
    /// Fraction of FFN neurons removed or skipped per token.
    pub target_sparsity: f64,
    /// Realized per-layer active fraction.
    pub active_fraction: Vec<f64>,
    pub loss: f64,
    pub perplexity: f64,
    pub tokens: usize,
    pub layers: Vec<LayerSummary>,
    pub corpus_hash: String,
}

impl SparsityReport {
    pub fn mean_active_fraction(&self) -> f64 {
        self.active_fraction.iter().sum::<f64>() / self.active_fraction.len().max(1) as f64
    }
}

fn report(
    method: Method,
    s: f64,
    layers: Vec<LayerSummary>,
    eval: EvalLoss,
    corpus_hash: &str,
) -> SparsityReport {
    SparsityReport {
        method,
        target_sparsity: s,
        active_fraction: layers.iter().map(|l| l.active as f64 / l.total as f64).collect(),
        loss: eval.loss,
        perplexity: eval.perplexity,
        tokens: eval.tokens,
        layers,
        corpus_hash: corpus_hash.to_string(),
    }
}

fn neuron_layers(n_layers: usize, active: usize, total: usize) -> Vec<LayerSummary> {
    (0..n_layers)
        .map(|layer| LayerSummary { layer, active, total, n_se: None, n_re: None })
        .collect()
}

/// Woven pruning-mode model with `round((1 - s) * N_e)` active experts.
pub fn weave_at_sparsity(
    dense: &DenseGluModel,
    activations: &[ActivationMatrix],
    num_tasks: usize,
    sparsity: f64,
    config: &WeaverConfig,
) -> Result<MoeModel> {
    let k = ((1.0 - sparsity) * config.n_experts as f64).round() as usize;
    let cfg = WeaverConfig { mode: Mode::Pruning, k_active: k.max(1), ..config.clone() };
    let allocs = allocate(activations, num_tasks, &cfg)?;
    weave_model(dense, activations, &allocs, &cfg)
}

/// Evaluates dense, AbsTopK-GLU, the structured magnitude baseline and the
/// woven model at each target sparsity on the same held-out corpus.
pub fn compare_methods(
    dense: &DenseGluModel,
    heldout: &Corpus,
    activations: &[ActivationMatrix],
    num_tasks: usize,
    sparsities: &[f64],
    config: &WeaverConfig,
) -> Result<Vec<SparsityReport>> {
    if let Some(s) = sparsities.iter().find(|s| !(0.0..1.0).contains(*s)) {
        return Err(Error::Param(format!("sparsity {s} outside [0, 1)")));
    }
    let hp = dense.hparams();
    let hash = heldout.hash();
    let dense_eval = evaluate_loss(dense, heldout)?;
    let mut out = Vec::with_capacity(4 * sparsities.len());
    for &s in sparsities {
        log::info!("evaluating methods at sparsity {s}");
        let keep = 1.0 - s;
        out.push(report(Method::Dense, s, neuron_layers(hp.n_layers, hp.d_ffn, hp.d_ffn), dense_eval, &hash));

        let k = ((keep * hp.d_ffn as f64).round() as usize).clamp(1, hp.d_ffn);
        let eval = evaluate_loss(&AbsTopKModel { model: dense, k }, heldout)?;
        out.push(report(Method::AbsTopK, s, neuron_layers(hp.n_layers, k, hp.d_ffn), eval, &hash));

        let pruned = PrunedModel::magnitude(dense, keep)?;
        let eval = evaluate_loss(&pruned, heldout)?;
        let kept = pruned.ffn[0].d_ffn();
        out.push(report(Method::Magnitude, s, neuron_layers(hp.n_layers, kept, hp.d_ffn), eval, &hash));

        let moe = weave_at_sparsity(dense, activations, num_tasks, s, config)?;
        let eval = evaluate_loss(&moe, heldout)?;
        out.push(report(Method::ExpertWeaver, s, expert_layers(&moe), eval, &hash));
    }
    Ok(out)
}

fn expert_layers(moe: &MoeModel) -> Vec<LayerSummary> {
    moe.layers
        .iter()
        .enumerate()
        .map(|(l, layer)| LayerSummary {
            layer: l,
            active: layer.allocation.n_se + moe.k_routed(l),
            total: layer.allocation.n_experts(),
            n_se: Some(layer.allocation.n_se),
            n_re: Some(layer.allocation.n_re),
        })
        .collect()
}

/// Report for an already woven model; the target is its realized sparsity.
pub fn evaluate_moe(moe: &MoeModel, heldout: &Corpus) -> Result<SparsityReport> {
    let layers = expert_layers(moe);
    let eval = evaluate_loss(moe, heldout)?;
    let mut r = report(Method::ExpertWeaver, 0.0, layers, eval, &heldout.hash());
    r.target_sparsity = 1.0 - r.mean_active_fraction();
    Ok(r)
}

pub fn reports_table(reports: &[SparsityReport]) -> String {
    let mut s = format!(
        "{:<14} {:>8} {:>8} {:>10} {:>12}\n",
        "method", "sparsity", "active", "loss", "perplexity"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<14} {:>8.3} {:>8.4} {:>10.5} {:>12.4}",
            r.method.name(),
            r.target_sparsity,
            r.mean_active_fraction(),
            r.loss,
            r.perplexity
        );
    }
    s
}

pub fn reports_csv(reports: &[SparsityReport]) -> String {
    let mut s = String::from("method,target_sparsity,active_fraction,loss,perplexity,tokens,corpus_hash\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.method.name(),
            r.target_sparsity,
            r.mean_active_fraction(),
            r.loss,
            r.perplexity,
            r.tokens,
            r.corpus_hash
        );
    }
    s
}

/// Routed-expert selection frequencies for one layer, one row per task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingTable {
    pub layer: usize,
    pub tasks: Vec<String>,
    /// `tasks × n_re`; each row sums to 1.
    pub freq: Vec<Vec<f64>>,
}

/// Counts how often each routed expert is selected for the tokens of each
/// task, normalized per task.
pub fn routing_specialization_report(model: &MoeModel, calib: &CalibrationSet) -> Result<Vec<RoutingTable>> {
    use rayon::prelude::*;
    let max_len = model.hparams().max_seq_len;
    let n_tasks = calib.num_tasks();
    let n_layers = model.layers.len();
    let per_sample = calib
        .samples
        .par_iter()
        .map(|s| {
            let tokens = &s.tokens[..s.tokens.len().min(max_len)];
            model.forward(tokens).map(|(_, records)| (s.task, records))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut counts: Vec<Vec<Vec<f64>>> = model
        .layers
        .iter()
        .map(|l| vec![vec![0.0; l.n_re()]; n_tasks])
        .collect();
    for (task, records) in per_sample {
        for (l, rec) in records.iter().enumerate() {
            for sel in &rec.selected {
                for &e in sel {
                    counts[l][task][e] += 1.0;
                }
            }
        }
    }
    Ok((0..n_layers)
        .map(|l| RoutingTable {
            layer: l,
            tasks: calib.task_names.clone(),
            freq: counts[l]
                .iter()
                .map(|row| {
                    let total: f64 = row.iter().sum();
                    if total > 0.0 {
                        row.iter().map(|c| c / total).collect()
                    } else {
                        row.clone()
                    }
                })
                .collect(),
        })
        .collect())
}

#[derive(Serialize)]
struct RoutingLine<'a> {
    layer: usize,
    task: &'a str,
    freq: &'a [f64],
}

/// One JSON object per (layer, task).
pub fn routing_jsonl(tables: &[RoutingTable]) -> Result<String> {
    let mut s = String::new();
    for t in tables {
        for (task, freq) in t.tasks.iter().zip(&t.freq) {
            s.push_str(&serde_json::to_string(&RoutingLine { layer: t.layer, task, freq })?);
            s.push('\n');
        }
    }
    Ok(s)
}

/// Jensen-Shannon divergence in bits, in `[0, 1]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &y)| x * (x / y).log2())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    (0.5 * kl(p, &m) + 0.5 * kl(q, &m)).max(0.0)
}
