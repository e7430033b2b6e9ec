//! Splits each dense FFN into a shared expert and balanced routed experts.

mod kmeans;

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::ActivationMatrix;
use crate::error::{Error, Result};
use crate::kernels::{topk_indices, Matrix};
use crate::model::checkpoint::{Container, NamedTensor};
use crate::model::{random_matrix, Backbone, DenseGluLayer, DenseGluModel, HParams, INIT_STD};
use crate::seed;
use crate::specialization::{LayerAllocation, WeaverConfig};

pub use kmeans::{balanced_kmeans, partition_objective, KMeansResult};

pub const KMEANS_MAX_ITERS: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertPartition {
    pub layer: usize,
    /// Shared pool, ascending.
    pub shared: Vec<usize>,
    /// One ascending index list per routed expert.
    pub clusters: Vec<Vec<usize>>,
}

impl ExpertPartition {
    /// Checks completeness, disjointness and sizes.
    pub fn validate(&self, d_ffn: usize, alloc: &LayerAllocation) -> Result<()> {
        let fail = |m: String| Err(Error::Param(format!("layer {} partition: {m}", self.layer)));
        if self.shared.len() != alloc.shared_neurons() {
            return fail(format!(
                "shared pool has {} neurons, expected {}",
                self.shared.len(),
                alloc.shared_neurons()
            ));
        }
        if self.clusters.len() != alloc.n_re {
            return fail(format!("{} clusters, expected {}", self.clusters.len(), alloc.n_re));
        }
        if let Some(c) = self.clusters.iter().find(|c| c.len() != alloc.d_expert) {
            return fail(format!("cluster of size {}, expected {}", c.len(), alloc.d_expert));
        }
        let mut seen = vec![false; d_ffn];
        for &j in self.shared.iter().chain(self.clusters.iter().flatten()) {
            if j >= d_ffn {
                return fail(format!("index {j} out of range"));
            }
            if std::mem::replace(&mut seen[j], true) {
                return fail(format!("index {j} appears twice"));
            }
        }
        if let Some(j) = seen.iter().position(|s| !s) {
            return fail(format!("neuron {j} unassigned"));
        }
        Ok(())
    }
}

/// The `size` neurons with the largest mean |activation| over all samples,
/// ties to the lower index, returned ascending.
pub fn select_shared_pool(act: &ActivationMatrix, size: usize) -> Result<Vec<usize>> {
    let d_ffn = act.d_ffn();
    if size > d_ffn {
        return Err(Error::Param(format!(
            "shared pool of {size} exceeds d_ffn {d_ffn}"
        )));
    }
    if size == 0 {
        return Ok(Vec::new());
    }
    let m = act.samples().max(1) as f64;
    let scores: Vec<f32> = (0..d_ffn)
        .map(|j| (act.a.row(j).iter().map(|&v| v.abs() as f64).sum::<f64>() / m) as f32)
        .collect();
    let mut idx = topk_indices(&scores, size)?;
    idx.sort_unstable();
    Ok(idx)
}

/// Shared pool by activation magnitude, then balanced clustering of the
/// remaining neurons' signed activation rows.
pub fn build_partition(
    act: &ActivationMatrix,
    alloc: &LayerAllocation,
    seed: u64,
) -> Result<ExpertPartition> {
    let d_ffn = act.d_ffn();
    if alloc.n_experts() * alloc.d_expert != d_ffn {
        return Err(Error::Config(format!(
            "allocation covers {} neurons but the layer has {d_ffn}",
            alloc.n_experts() * alloc.d_expert
        )));
    }
    let shared = select_shared_pool(act, alloc.shared_neurons())?;
    let mut in_pool = vec![false; d_ffn];
    for &j in &shared {
        in_pool[j] = true;
    }
    let rest: Vec<usize> = (0..d_ffn).filter(|&j| !in_pool[j]).collect();
    let clusters = if alloc.n_re == 0 {
        Vec::new()
    } else {
        let points = act.a.select_rows(&rest)?;
        let layer_seed = seed::derive(seed, &format!("layer{}", alloc.layer));
        let km = balanced_kmeans(&points, alloc.n_re, alloc.d_expert, layer_seed, KMEANS_MAX_ITERS)?;
        log::debug!(
            "layer {}: k-means finished after {} rounds, objective {:?}",
            alloc.layer,
            km.iterations,
            km.objective.last()
        );
        km.clusters
            .into_iter()
            .map(|c| c.into_iter().map(|p| rest[p]).collect())
            .collect()
    };
    let part = ExpertPartition {
        layer: alloc.layer,
        shared,
        clusters,
    };
    part.validate(d_ffn, alloc)?;
    Ok(part)
}

/// The sub-FFN made of neuron slices `indices`, in the given order.
pub fn extract_expert(layer: &DenseGluLayer, indices: &[usize]) -> Result<DenseGluLayer> {
    let mut seen = vec![false; layer.d_ffn()];
    for &j in indices {
        if j >= layer.d_ffn() {
            return Err(Error::Param(format!(
                "neuron {j} out of range for d_ffn {}",
                layer.d_ffn()
            )));
        }
        if std::mem::replace(&mut seen[j], true) {
            return Err(Error::Param(format!("neuron {j} listed twice")));
        }
    }
    Ok(DenseGluLayer {
        w_gate: layer.w_gate.select_columns(indices)?,
        w_up: layer.w_up.select_columns(indices)?,
        w_down: layer.w_down.select_rows(indices)?,
    })
}

/// Router column `i` is the mean of the gate columns in cluster `i`.
pub fn build_router(layer: &DenseGluLayer, clusters: &[Vec<usize>]) -> Result<Matrix> {
    let d_model = layer.d_model();
    let mut router = Matrix::zeros(d_model, clusters.len());
    for (i, members) in clusters.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Param(format!("cluster {i} is empty")));
        }
        if let Some(&bad) = members.iter().find(|&&j| j >= layer.d_ffn()) {
            return Err(Error::Param(format!("neuron {bad} out of range")));
        }
        for r in 0..d_model {
            let row = layer.w_gate.row(r);
            let sum: f64 = members.iter().map(|&j| row[j] as f64).sum();
            router.set(r, i, (sum / members.len() as f64) as f32);
        }
    }
    Ok(router)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer {
    /// Concatenated shared slices; zero-width when there is no shared expert.
    pub shared: DenseGluLayer,
    pub experts: Vec<DenseGluLayer>,
    /// `d_model × n_re`.
    pub router: Matrix,
    pub allocation: LayerAllocation,
    pub partition: ExpertPartition,
}

impl MoeLayer {
    pub fn from_partition(
        layer: &DenseGluLayer,
        allocation: LayerAllocation,
        partition: ExpertPartition,
    ) -> Result<Self> {
        partition.validate(layer.d_ffn(), &allocation)?;
        let shared = extract_expert(layer, &partition.shared)?;
        let experts = partition
            .clusters
            .iter()
            .map(|c| extract_expert(layer, c))
            .collect::<Result<Vec<_>>>()?;
        let router = build_router(layer, &partition.clusters)?;
        Ok(MoeLayer {
            shared,
            experts,
            router,
            allocation,
            partition,
        })
    }

    pub fn n_re(&self) -> usize {
        self.experts.len()
    }

    pub fn d_model(&self) -> usize {
        self.router.rows()
    }

    /// FFN parameters in shared and routed experts, router excluded.
    pub fn ffn_param_count(&self) -> usize {
        self.shared.param_count() + self.experts.iter().map(DenseGluLayer::param_count).sum::<usize>()
    }

    pub fn router_param_count(&self) -> usize {
        self.router.rows() * self.router.cols()
    }

    /// Reassembles the dense layer this MoE layer was cut from.
    pub fn to_dense(&self) -> DenseGluLayer {
        let d_model = self.d_model();
        let d_ffn = self.allocation.n_experts() * self.allocation.d_expert;
        let mut dense = DenseGluLayer {
            w_gate: Matrix::zeros(d_model, d_ffn),
            w_up: Matrix::zeros(d_model, d_ffn),
            w_down: Matrix::zeros(d_ffn, d_model),
        };
        let pieces = std::iter::once((&self.shared, &self.partition.shared))
            .chain(self.experts.iter().zip(&self.partition.clusters));
        for (e, idx) in pieces {
            for (local, &j) in idx.iter().enumerate() {
                for r in 0..d_model {
                    dense.w_gate.set(r, j, e.w_gate.get(r, local));
                    dense.w_up.set(r, j, e.w_up.get(r, local));
                }
                dense.w_down.row_mut(j).copy_from_slice(e.w_down.row(local));
            }
        }
        dense
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeModel {
    pub backbone: Backbone,
    pub layers: Vec<MoeLayer>,
    pub config: WeaverConfig,
}

#[derive(Serialize, Deserialize)]
struct MoeMeta {
    config: WeaverConfig,
    allocations: Vec<LayerAllocation>,
    partitions: Vec<ExpertPartition>,
}

impl MoeModel {
    pub fn hparams(&self) -> &HParams {
        &self.backbone.hparams
    }

    /// Routed slots per token in `layer`.
    pub fn k_routed(&self, layer: usize) -> usize {
        let l = &self.layers[layer];
        l.allocation.k_routed(self.config.k_active).min(l.n_re())
    }

    pub fn ffn_param_count(&self) -> usize {
        self.layers.iter().map(MoeLayer::ffn_param_count).sum()
    }

    pub fn router_param_count(&self) -> usize {
        self.layers.iter().map(MoeLayer::router_param_count).sum()
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = MoeMeta {
            config: self.config.clone(),
            allocations: self.layers.iter().map(|l| l.allocation.clone()).collect(),
            partitions: self.layers.iter().map(|l| l.partition.clone()).collect(),
        };
        let mut c = Container::new("moe", self.hparams().clone());
        c.meta = serde_json::to_value(meta)?;
        self.backbone.push_tensors(&mut c);
        for (l, layer) in self.layers.iter().enumerate() {
            let mut push = |prefix: String, e: &DenseGluLayer| {
                c.push(NamedTensor::matrix(format!("{prefix}.gate"), &e.w_gate));
                c.push(NamedTensor::matrix(format!("{prefix}.up"), &e.w_up));
                c.push(NamedTensor::matrix(format!("{prefix}.down"), &e.w_down));
            };
            push(format!("layer{l}.shared"), &layer.shared);
            for (i, e) in layer.experts.iter().enumerate() {
                push(format!("layer{l}.expert{i}"), e);
            }
            c.push(NamedTensor::matrix(format!("layer{l}.router"), &layer.router));
        }
        Ok(c)
    }

    pub fn from_container(c: Container) -> Result<Self, String> {
        if c.kind != "moe" {
            return Err(format!("expected an moe checkpoint, found kind {:?}", c.kind));
        }
        let hp = c.hparams.clone();
        let meta: MoeMeta =
            serde_json::from_value(c.meta.clone()).map_err(|e| format!("bad moe metadata: {e}"))?;
        if meta.allocations.len() != hp.n_layers || meta.partitions.len() != hp.n_layers {
            return Err(format!(
                "metadata describes {} layers, model has {}",
                meta.allocations.len(),
                hp.n_layers
            ));
        }
        let mut s = c.into_store();
        let backbone = Backbone::from_store(&hp, &mut s)?;
        let d = hp.d_model;
        let mut layers = Vec::with_capacity(hp.n_layers);
        for (l, (allocation, partition)) in meta.allocations.into_iter().zip(meta.partitions).enumerate() {
            partition
                .validate(hp.d_ffn, &allocation)
                .map_err(|e| e.to_string())?;
            let mut take = |prefix: String, width: usize| -> Result<DenseGluLayer, String> {
                Ok(DenseGluLayer {
                    w_gate: s.take_matrix(&format!("{prefix}.gate"), d, width)?,
                    w_up: s.take_matrix(&format!("{prefix}.up"), d, width)?,
                    w_down: s.take_matrix(&format!("{prefix}.down"), width, d)?,
                })
            };
            let shared = take(format!("layer{l}.shared"), allocation.shared_neurons())?;
            let experts = (0..allocation.n_re)
                .map(|i| take(format!("layer{l}.expert{i}"), allocation.d_expert))
                .collect::<Result<Vec<_>, _>>()?;
            let router = s.take_matrix(&format!("layer{l}.router"), d, allocation.n_re)?;
            layers.push(MoeLayer {
                shared,
                experts,
                router,
                allocation,
                partition,
            });
        }
        s.finish()?;
        Ok(MoeModel {
            backbone,
            layers,
            config: meta.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        MoeModel::from_container(c).map_err(|reason| Error::Load {
            path: path.to_path_buf(),
            reason,
        })
    }
}

fn check_layer_inputs(
    model: &DenseGluModel,
    n_acts: usize,
    allocations: &[LayerAllocation],
) -> Result<()> {
    let n = model.hparams().n_layers;
    if n_acts != n || allocations.len() != n {
        return Err(Error::Input(format!(
            "model has {n} layers but got {n_acts} activation matrices and {} allocations",
            allocations.len()
        )));
    }
    Ok(())
}

/// Replaces every FFN with its woven MoE counterpart. Layers are processed
/// in parallel; each layer's clustering is seeded independently.
pub fn weave_model(
    model: &DenseGluModel,
    activations: &[ActivationMatrix],
    allocations: &[LayerAllocation],
    config: &WeaverConfig,
) -> Result<MoeModel> {
    config.validate()?;
    check_layer_inputs(model, activations.len(), allocations)?;
    let seed = seed::derive(config.seed, "weave");
    let layers = (0..model.ffn.len())
        .into_par_iter()
        .map(|l| {
            let part = build_partition(&activations[l], &allocations[l], seed)?;
            MoeLayer::from_partition(&model.ffn[l], allocations[l].clone(), part)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MoeModel {
        backbone: model.backbone.clone(),
        layers,
        config: config.clone(),
    })
}

/// Control model with the same expert shapes as a woven one but neurons
/// shuffled into experts at random and a freshly initialized router.
pub fn random_partition_model(
    model: &DenseGluModel,
    allocations: &[LayerAllocation],
    config: &WeaverConfig,
) -> Result<MoeModel> {
    config.validate()?;
    check_layer_inputs(model, allocations.len(), allocations)?;
    let mut rng = seed::rng(config.seed, "random-partition");
    let d_ffn = model.hparams().d_ffn;
    let mut layers = Vec::with_capacity(allocations.len());
    for (l, alloc) in allocations.iter().enumerate() {
        let mut perm: Vec<usize> = (0..d_ffn).collect();
        perm.shuffle(&mut rng);
        let (shared, rest) = perm.split_at(alloc.shared_neurons());
        let mut shared = shared.to_vec();
        shared.sort_unstable();
        let clusters = rest
            .chunks(alloc.d_expert.max(1))
            .map(|c| {
                let mut c = c.to_vec();
                c.sort_unstable();
                c
            })
            .collect();
        let partition = ExpertPartition {
            layer: l,
            shared,
            clusters,
        };
        let mut layer = MoeLayer::from_partition(&model.ffn[l], alloc.clone(), partition)?;
        layer.router = random_matrix(layer.d_model(), alloc.n_re, INIT_STD, &mut rng);
        layers.push(layer);
    }
    Ok(MoeModel {
        backbone: model.backbone.clone(),
        layers,
        config: config.clone(),
    })
}
