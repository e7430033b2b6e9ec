//! Forward execution of woven layers and models.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{abs_topk_mask, matmul, softmax_in_place, topk_indices, Matrix};
use crate::model::DenseGluLayer;
use crate::specialization::Mode;
use crate::weaving::{MoeLayer, MoeModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub layer: usize,
    pub k_routed: usize,
    /// Per token, the selected routed experts in descending score order.
    pub selected: Vec<Vec<usize>>,
    /// Per token, the gate weight applied to each selected expert.
    /// Absent in pruning mode.
    pub gates: Option<Vec<Vec<f32>>>,
    /// Per expert, selections divided by tokens; sums to `k_routed`.
    pub f: Vec<f64>,
    /// Per expert, mean softmax probability over tokens. Absent in pruning mode.
    pub p: Option<Vec<f64>>,
}

impl RoutingRecord {
    pub fn tokens(&self) -> usize {
        self.selected.len()
    }

    pub fn n_re(&self) -> usize {
        self.f.len()
    }
}

fn selection_fractions(selected: &[Vec<usize>], n_re: usize) -> Vec<f64> {
    let mut f = vec![0.0f64; n_re];
    for s in selected {
        for &i in s {
            f[i] += 1.0;
        }
    }
    let t = selected.len().max(1) as f64;
    f.iter_mut().for_each(|v| *v /= t);
    f
}

fn check_k(layer: &MoeLayer, x: &Matrix, k_routed: usize) -> Result<()> {
    if k_routed == 0 || k_routed > layer.n_re() {
        return Err(Error::Param(format!(
            "k_routed {k_routed} outside 1..={}",
            layer.n_re()
        )));
    }
    if x.cols() != layer.d_model() {
        return Err(Error::shape(
            "moe_forward",
            format!("input width {} vs d_model {}", x.cols(), layer.d_model()),
        ));
    }
    Ok(())
}

/// Shared output plus `weight(t, i) * E_i(x_t)` for every selection.
/// Experts run over the tokens that picked them, in ascending expert order.
fn combine(
    layer: &MoeLayer,
    x: &Matrix,
    selected: &[Vec<usize>],
    weight: impl Fn(usize, usize) -> f32,
) -> Result<Matrix> {
    let mut out = layer.shared.forward(x)?;
    let mut users: Vec<Vec<(usize, usize)>> = vec![Vec::new(); layer.n_re()];
    for (t, s) in selected.iter().enumerate() {
        for (slot, &i) in s.iter().enumerate() {
            users[i].push((t, slot));
        }
    }
    for (i, tokens) in users.iter().enumerate() {
        if tokens.is_empty() {
            continue;
        }
        let rows: Vec<usize> = tokens.iter().map(|&(t, _)| t).collect();
        let y = layer.experts[i].forward(&x.select_rows(&rows)?)?;
        for (r, &(t, slot)) in tokens.iter().enumerate() {
            let w = weight(t, slot);
            for (o, &v) in out.row_mut(t).iter_mut().zip(y.row(r)) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

/// Dynamic structural pruning: the shared expert plus the unweighted sum of
/// the `k_routed` experts with the largest router logits.
pub fn moe_forward_pruning(
    layer: &MoeLayer,
    x: &Matrix,
    k_routed: usize,
) -> Result<(Matrix, RoutingRecord)> {
    check_k(layer, x, k_routed)?;
    let logits = matmul(x, &layer.router)?;
    let selected = (0..x.rows())
        .map(|t| topk_indices(logits.row(t), k_routed))
        .collect::<Result<Vec<_>>>()?;
    let out = combine(layer, x, &selected, |_, _| 1.0)?;
    let record = RoutingRecord {
        layer: layer.partition.layer,
        k_routed,
        f: selection_fractions(&selected, layer.n_re()),
        selected,
        gates: None,
        p: None,
    };
    Ok((out, record))
}

/// Softmax gating for one token: returns the selected experts, their
/// weights and the full probability vector.
pub fn downcycling_gates(
    logits: &[f32],
    k_routed: usize,
    renormalize: bool,
) -> Result<(Vec<usize>, Vec<f32>, Vec<f32>)> {
    let mut probs = logits.to_vec();
    softmax_in_place(&mut probs);
    let selected = topk_indices(&probs, k_routed)?;
    let mut weights: Vec<f32> = selected.iter().map(|&i| probs[i]).collect();
    if renormalize {
        let total: f32 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
    }
    Ok((selected, weights, probs))
}

/// Softmax-gated MoE: the shared expert plus gate-weighted selected experts.
pub fn moe_forward_downcycling(
    layer: &MoeLayer,
    x: &Matrix,
    k_routed: usize,
    renormalize: bool,
) -> Result<(Matrix, RoutingRecord)> {
    check_k(layer, x, k_routed)?;
    let logits = matmul(x, &layer.router)?;
    let n_re = layer.n_re();
    let mut selected = Vec::with_capacity(x.rows());
    let mut gates = Vec::with_capacity(x.rows());
    let mut p = vec![0.0f64; n_re];
    for t in 0..x.rows() {
        let (s, w, probs) = downcycling_gates(logits.row(t), k_routed, renormalize)?;
        for (acc, &v) in p.iter_mut().zip(&probs) {
            *acc += v as f64;
        }
        selected.push(s);
        gates.push(w);
    }
    let tokens = x.rows().max(1) as f64;
    p.iter_mut().for_each(|v| *v /= tokens);
    let out = combine(layer, x, &selected, |t, slot| gates[t][slot])?;
    let record = RoutingRecord {
        layer: layer.partition.layer,
        k_routed,
        f: selection_fractions(&selected, n_re),
        selected,
        gates: Some(gates),
        p: Some(p),
    };
    Ok((out, record))
}

/// Dense FFN keeping only the `k` largest-magnitude gate activations per token.
pub fn abs_topk_glu_forward(layer: &DenseGluLayer, x: &Matrix, k: usize) -> Result<Matrix> {
    if k == 0 || k > layer.d_ffn() {
        return Err(Error::Param(format!("k {k} outside 1..={}", layer.d_ffn())));
    }
    layer.forward_masked(x, |h| {
        for t in 0..h.rows() {
            let masked = abs_topk_mask(h.row(t), k)?;
            h.row_mut(t).copy_from_slice(&masked);
        }
        Ok(())
    })
}

/// `n_re * Σ f̂_i P_i`, where `f̂ = f / k_routed` is the share of routing slots.
pub fn load_balance_loss(record: &RoutingRecord) -> Result<f64> {
    let p = record.p.as_ref().ok_or_else(|| {
        Error::Mode("load balance loss needs router probabilities (downcycling record)".into())
    })?;
    let n = record.n_re() as f64;
    let k = record.k_routed.max(1) as f64;
    Ok(n * record.f.iter().zip(p).map(|(f, p)| f / k * p).sum::<f64>())
}

/// One layer's forward in the model's configured mode.
pub fn moe_layer_forward(
    model: &MoeModel,
    l: usize,
    x: &Matrix,
) -> Result<(Matrix, RoutingRecord)> {
    let layer = &model.layers[l];
    let k = model.k_routed(l);
    match model.config.mode {
        Mode::Pruning => moe_forward_pruning(layer, x, k),
        Mode::Downcycling => moe_forward_downcycling(layer, x, k, model.config.renormalize_gates),
    }
}

/// Causal logits plus one routing record per layer.
pub fn moe_model_forward(model: &MoeModel, tokens: &[u32]) -> Result<(Matrix, Vec<RoutingRecord>)> {
    let mut records = Vec::with_capacity(model.layers.len());
    let logits = model.backbone.forward_with(tokens, |l, x| {
        let (y, r) = moe_layer_forward(model, l, x)?;
        records.push(r);
        Ok(y)
    })?;
    Ok((logits, records))
}

impl MoeModel {
    pub fn forward(&self, tokens: &[u32]) -> Result<(Matrix, Vec<RoutingRecord>)> {
        moe_model_forward(self, tokens)
    }
}
