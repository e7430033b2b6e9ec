//! Pretraining of the dense source model and continued pretraining of
//! woven MoE models, plus held-out loss evaluation.

pub mod net;

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::read_jsonl;
use crate::error::{Error, Result};
use crate::kernels::Matrix;
use crate::model::checkpoint::{Container, NamedTensor};
use crate::model::{Backbone, DenseGluLayer, DenseGluModel};
use crate::seed;
use crate::specialization::Mode;
use crate::tokenizer;
use crate::weaving::MoeModel;

pub use net::{Block, Ffn, Glu, Losses, MoeFfn, Net, Scalar};

/// Tokenized documents, each wrapped in BOS/EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub docs: Vec<Vec<u32>>,
}

impl Corpus {
    pub fn from_texts<S: AsRef<str>>(texts: impl IntoIterator<Item = S>) -> Self {
        Corpus {
            docs: texts.into_iter().map(|t| tokenizer::encode(t.as_ref())).collect(),
        }
    }

    /// Calibration-style JSON lines when the extension is `.jsonl`,
    /// otherwise plain UTF-8 text with one document per non-empty line.
    pub fn load(path: &Path) -> Result<Self> {
        let corpus = if path.extension().is_some_and(|e| e == "jsonl") {
            Corpus::from_texts(read_jsonl(path)?.into_iter().map(|r| r.text))
        } else {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Corpus::from_texts(text.lines().filter(|l| !l.trim().is_empty()))
        };
        if corpus.docs.is_empty() {
            return Err(Error::Input(format!("corpus {} has no documents", path.display())));
        }
        Ok(corpus)
    }

    /// Deterministic 90/10 split: document `i` is held out when `i % 10 == 9`.
    pub fn split(&self) -> (Corpus, Corpus) {
        let (held, train): (Vec<_>, Vec<_>) =
            self.docs.iter().cloned().enumerate().partition(|(i, _)| i % 10 == 9);
        let strip = |v: Vec<(usize, Vec<u32>)>| Corpus {
            docs: v.into_iter().map(|(_, d)| d).collect(),
        };
        (strip(train), strip(held))
    }

    pub fn stream(&self) -> Vec<u32> {
        self.docs.concat()
    }

    pub fn token_count(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }

    /// SHA-256 over document lengths and tokens.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for d in &self.docs {
            h.update((d.len() as u64).to_le_bytes());
            for t in d {
                h.update(t.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Load-balance coefficient.
    pub lb_lambda: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 3e-3,
            min_lr: 3e-4,
            warmup_steps: 20,
            total_steps: 300,
            batch_size: 16,
            seq_len: 64,
            lb_lambda: 0.01,
            seed: 0,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.peak_lr >= self.min_lr && self.min_lr >= 0.0) {
            return bad(format!("need peak_lr >= min_lr >= 0, got {} and {}", self.peak_lr, self.min_lr));
        }
        if self.total_steps == 0 || self.warmup_steps > self.total_steps {
            return bad(format!(
                "need 0 < total_steps and warmup <= total, got {} and {}",
                self.total_steps, self.warmup_steps
            ));
        }
        if self.lb_lambda.is_nan() || self.lb_lambda < 0.0 {
            return bad(format!("lambda must be >= 0, got {}", self.lb_lambda));
        }
        if self.batch_size == 0 || self.seq_len < 2 {
            return bad("batch_size must be >= 1 and seq_len >= 2".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Linear warmup to `peak_lr`, then cosine decay to `min_lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.min_lr + 0.5 * (self.peak_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub l_ntp: f64,
    pub l_lb: f64,
    pub l_total: f64,
    pub lr: f64,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("step,l_ntp,l_lb,l_total,lr\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.step, r.l_ntp, r.l_lb, r.l_total, r.lr));
    }
    s
}

pub fn write_loss_csv(rows: &[LossRow], path: &Path) -> Result<()> {
    std::fs::write(path, loss_csv(rows)).map_err(|e| Error::io(path, e))
}

fn mat(m: &Matrix) -> Vec<f32> {
    m.data().to_vec()
}

fn glu_of(layer: &DenseGluLayer) -> Glu<f32> {
    Glu {
        d_ffn: layer.d_ffn(),
        gate: mat(&layer.w_gate),
        up: mat(&layer.w_up),
        down: mat(&layer.w_down),
    }
}

fn layer_of(g: &Glu<f32>, d_model: usize) -> Result<DenseGluLayer> {
    Ok(DenseGluLayer {
        w_gate: Matrix::from_vec(d_model, g.d_ffn, g.gate.clone())?,
        w_up: Matrix::from_vec(d_model, g.d_ffn, g.up.clone())?,
        w_down: Matrix::from_vec(g.d_ffn, d_model, g.down.clone())?,
    })
}

fn net_from(backbone: &Backbone, ffns: Vec<Ffn<f32>>) -> Net<f32> {
    let hp = &backbone.hparams;
    Net {
        d_model: hp.d_model,
        n_heads: hp.n_heads,
        vocab: hp.vocab_size,
        max_seq_len: hp.max_seq_len,
        tok_emb: mat(&backbone.tok_embedding),
        pos_emb: mat(&backbone.pos_embedding),
        blocks: backbone
            .blocks
            .iter()
            .zip(ffns)
            .map(|(b, ffn)| Block {
                attn_norm: b.attn_norm.clone(),
                wq: mat(&b.wq),
                wk: mat(&b.wk),
                wv: mat(&b.wv),
                wo: mat(&b.wo),
                ffn_norm: b.ffn_norm.clone(),
                ffn,
            })
            .collect(),
        final_norm: backbone.final_norm.clone(),
    }
}

fn write_backbone(net: &Net<f32>, backbone: &mut Backbone) -> Result<()> {
    let hp = backbone.hparams.clone();
    let d = hp.d_model;
    backbone.tok_embedding = Matrix::from_vec(hp.vocab_size, d, net.tok_emb.clone())?;
    backbone.pos_embedding = Matrix::from_vec(hp.max_seq_len, d, net.pos_emb.clone())?;
    for (b, nb) in backbone.blocks.iter_mut().zip(&net.blocks) {
        b.attn_norm = nb.attn_norm.clone();
        b.wq = Matrix::from_vec(d, d, nb.wq.clone())?;
        b.wk = Matrix::from_vec(d, d, nb.wk.clone())?;
        b.wv = Matrix::from_vec(d, d, nb.wv.clone())?;
        b.wo = Matrix::from_vec(d, d, nb.wo.clone())?;
        b.ffn_norm = nb.ffn_norm.clone();
    }
    backbone.final_norm = net.final_norm.clone();
    Ok(())
}

impl Net<f32> {
    pub fn from_dense(model: &DenseGluModel) -> Self {
        net_from(&model.backbone, model.ffn.iter().map(|l| Ffn::Dense(glu_of(l))).collect())
    }

    /// Downcycling-mode models only: the trainable path is the softmax-gated one.
    pub fn from_moe(model: &MoeModel) -> Result<Self> {
        if model.config.mode != Mode::Downcycling {
            return Err(Error::Mode("continued pretraining needs a downcycling-mode model".into()));
        }
        let ffns = (0..model.layers.len())
            .map(|l| {
                let layer = &model.layers[l];
                Ffn::Moe(MoeFfn {
                    shared: glu_of(&layer.shared),
                    experts: layer.experts.iter().map(glu_of).collect(),
                    router: mat(&layer.router),
                    k_routed: model.k_routed(l),
                    renormalize: model.config.renormalize_gates,
                })
            })
            .collect();
        Ok(net_from(&model.backbone, ffns))
    }

    pub fn to_dense(&self, template: &DenseGluModel) -> Result<DenseGluModel> {
        let mut backbone = template.backbone.clone();
        write_backbone(self, &mut backbone)?;
        let ffn = self
            .blocks
            .iter()
            .map(|b| match &b.ffn {
                Ffn::Dense(g) => layer_of(g, self.d_model),
                Ffn::Moe(_) => Err(Error::Mode("network has MoE layers".into())),
            })
            .collect::<Result<Vec<_>>>()?;
        DenseGluModel::new(backbone, ffn)
    }

    pub fn to_moe(&self, template: &MoeModel) -> Result<MoeModel> {
        let mut out = template.clone();
        write_backbone(self, &mut out.backbone)?;
        for (layer, b) in out.layers.iter_mut().zip(&self.blocks) {
            let Ffn::Moe(m) = &b.ffn else {
                return Err(Error::Mode("network has dense layers".into()));
            };
            layer.shared = layer_of(&m.shared, self.d_model)?;
            layer.experts = m.experts.iter().map(|e| layer_of(e, self.d_model)).collect::<Result<_>>()?;
            layer.router = Matrix::from_vec(self.d_model, m.n_re(), m.router.clone())?;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
enum Template {
    Dense(DenseGluModel),
    Moe(MoeModel),
}

/// AdamW training loop over a token stream.
#[derive(Clone, Debug)]
pub struct Trainer {
    net: Net<f32>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: usize,
    config: TrainConfig,
    template: Template,
}

impl Trainer {
    fn new(net: Net<f32>, config: TrainConfig, template: Template) -> Result<Self> {
        config.validate()?;
        if config.seq_len > net.max_seq_len {
            return Err(Error::Config(format!(
                "seq_len {} exceeds max_seq_len {}",
                config.seq_len, net.max_seq_len
            )));
        }
        let zeros: Vec<Vec<f32>> = net.tensors().iter().map(|(t, _)| vec![0.0; t.len()]).collect();
        Ok(Trainer {
            net,
            m: zeros.clone(),
            v: zeros,
            step: 0,
            config,
            template,
        })
    }

    pub fn dense(model: &DenseGluModel, config: TrainConfig) -> Result<Self> {
        Trainer::new(Net::from_dense(model), config, Template::Dense(model.clone()))
    }

    pub fn moe(model: &MoeModel, config: TrainConfig) -> Result<Self> {
        Trainer::new(Net::from_moe(model)?, config, Template::Moe(model.clone()))
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn net(&self) -> &Net<f32> {
        &self.net
    }

    pub fn dense_model(&self) -> Result<DenseGluModel> {
        match &self.template {
            Template::Dense(t) => self.net.to_dense(t),
            Template::Moe(_) => Err(Error::Mode("trainer holds an MoE model".into())),
        }
    }

    pub fn moe_model(&self) -> Result<MoeModel> {
        match &self.template {
            Template::Moe(t) => self.net.to_moe(t),
            Template::Dense(_) => Err(Error::Mode("trainer holds a dense model".into())),
        }
    }

    /// Windows of `seq_len` tokens at positions drawn from an RNG keyed on
    /// (seed, step), so a resumed run sees the same batches.
    pub fn batch(&self, stream: &[u32], step: usize) -> Result<Vec<Vec<u32>>> {
        let s = self.config.seq_len;
        if stream.len() < s {
            return Err(Error::Input(format!(
                "training stream has {} tokens, fewer than seq_len {s}",
                stream.len()
            )));
        }
        let mut rng = seed::rng(seed::derive(self.config.seed, "batch").wrapping_add(step as u64), "window");
        Ok((0..self.config.batch_size)
            .map(|_| {
                let start = rng.random_range(0..=stream.len() - s);
                stream[start..start + s].to_vec()
            })
            .collect())
    }

    /// Loss on the batch for the current step, without updating.
    pub fn peek(&self, stream: &[u32]) -> Result<Losses> {
        let seqs = self.batch(stream, self.step)?;
        Ok(self.net.pass(&seqs, self.config.lb_lambda, false)?.losses)
    }

    pub fn step(&mut self, stream: &[u32]) -> Result<LossRow> {
        let step = self.step;
        let seqs = self.batch(stream, step)?;
        let pass = self.net.pass(&seqs, self.config.lb_lambda, true)?;
        let l = pass.losses;
        if !l.l_total.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("loss is {} (ntp {}, lb {})", l.l_total, l.l_ntp, l.l_lb),
            });
        }
        let grads = pass.grads.expect("gradients requested");
        let lr = self.config.lr_at(step);
        self.apply(&grads, lr, step)?;
        self.step += 1;
        Ok(LossRow {
            step,
            l_ntp: l.l_ntp,
            l_lb: l.l_lb,
            l_total: l.l_total,
            lr,
        })
    }

    fn apply(&mut self, grads: &Net<f32>, lr: f64, step: usize) -> Result<()> {
        let g = grads.tensors();
        let norm = g
            .iter()
            .flat_map(|(t, _)| t.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("gradient norm is {norm}"),
            });
        }
        let clip = if norm > self.config.grad_clip {
            self.config.grad_clip / norm
        } else {
            1.0
        };
        let c = &self.config;
        let t = (step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay: Vec<bool> = g.iter().map(|&(_, is_matrix)| is_matrix).collect();
        for (i, p) in self.net.tensors_mut().into_iter().enumerate() {
            let wd = if decay[i] { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[i].0[j] as f64 * clip;
                let mj = c.beta1 * m[j] as f64 + (1.0 - c.beta1) * gj;
                let vj = c.beta2 * v[j] as f64 + (1.0 - c.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = (mj / bc1) / ((vj / bc2).sqrt() + 1e-8) + wd * p[j] as f64;
                p[j] = (p[j] as f64 - lr * update) as f32;
            }
        }
        Ok(())
    }

    /// Steps until `until` (exclusive) or the configured total, whichever is first.
    pub fn run(&mut self, stream: &[u32], until: usize) -> Result<Vec<LossRow>> {
        let end = until.min(self.config.total_steps);
        let mut rows = Vec::with_capacity(end.saturating_sub(self.step));
        while self.step < end {
            let row = self.step(stream)?;
            if row.step % 50 == 0 {
                log::info!(
                    "step {} loss {:.4} (ntp {:.4}, lb {:.4}) lr {:.2e}",
                    row.step, row.l_total, row.l_ntp, row.l_lb, row.lr
                );
            }
            rows.push(row);
        }
        Ok(rows)
    }

    /// Parameters, optimizer moments and step in one checkpoint container.
    pub fn save_state(&self, path: &Path) -> Result<()> {
        let (model_container, kind) = match &self.template {
            Template::Dense(_) => (self.dense_model()?.to_container(), "dense"),
            Template::Moe(_) => (self.moe_model()?.to_container()?, "moe"),
        };
        let mut c = Container::new("train-state", model_container.hparams.clone());
        c.meta = serde_json::json!({
            "model_kind": kind,
            "model_meta": model_container.meta,
            "step": self.step,
            "config": self.config,
        });
        for t in model_container.tensors {
            c.push(t);
        }
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            c.push(NamedTensor::new(format!("adam.m.{i}"), vec![m.len()], m.clone()));
            c.push(NamedTensor::new(format!("adam.v.{i}"), vec![v.len()], v.clone()));
        }
        c.save(path)
    }

    pub fn load_state(path: &Path) -> Result<Self> {
        let load_err = |reason: String| Error::Load {
            path: path.to_path_buf(),
            reason,
        };
        let c = Container::load(path)?;
        if c.kind != "train-state" {
            return Err(load_err(format!("expected a train-state file, found kind {:?}", c.kind)));
        }
        #[derive(Deserialize)]
        struct Meta {
            model_kind: String,
            model_meta: serde_json::Value,
            step: usize,
            config: TrainConfig,
        }
        let meta: Meta = serde_json::from_value(c.meta.clone()).map_err(|e| load_err(e.to_string()))?;
        let (adam, model_tensors): (Vec<_>, Vec<_>) =
            c.tensors.into_iter().partition(|t| t.name.starts_with("adam."));
        let mut mc = Container::new(&meta.model_kind, c.hparams);
        mc.meta = meta.model_meta;
        mc.tensors = model_tensors;
        let mut trainer = match meta.model_kind.as_str() {
            "dense" => Trainer::dense(&DenseGluModel::from_container(mc).map_err(load_err)?, meta.config)?,
            "moe" => Trainer::moe(&MoeModel::from_container(mc).map_err(load_err)?, meta.config)?,
            other => return Err(load_err(format!("unknown model kind {other:?}"))),
        };
        let n = trainer.m.len();
        let mut found = 0;
        for t in adam {
            let mut parts = t.name.splitn(3, '.').skip(1);
            let (which, idx) = (parts.next(), parts.next().and_then(|s| s.parse::<usize>().ok()));
            let slot = match (which, idx) {
                (Some("m"), Some(i)) if i < n => &mut trainer.m[i],
                (Some("v"), Some(i)) if i < n => &mut trainer.v[i],
                _ => return Err(load_err(format!("unexpected tensor {}", t.name))),
            };
            if slot.len() != t.data.len() {
                return Err(load_err(format!("tensor {} has the wrong length", t.name)));
            }
            *slot = t.data;
            found += 1;
        }
        if found != 2 * n {
            return Err(load_err(format!("expected {} optimizer tensors, found {found}", 2 * n)));
        }
        trainer.step = meta.step;
        Ok(trainer)
    }
}

/// Pretrains `model` on the whole corpus stream.
pub fn train_dense(
    model: &DenseGluModel,
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<(DenseGluModel, Vec<LossRow>)> {
    let stream = corpus.stream();
    let mut t = Trainer::dense(model, config.clone())?;
    let rows = t.run(&stream, config.total_steps)?;
    Ok((t.dense_model()?, rows))
}

/// Continued pretraining of a downcycling-mode MoE model with
/// `L_ntp + lambda * L_lb`.
pub fn cpt_moe(model: &MoeModel, corpus: &Corpus, config: &TrainConfig) -> Result<(MoeModel, Vec<LossRow>)> {
    let stream = corpus.stream();
    let mut t = Trainer::moe(model, config.clone())?;
    let rows = t.run(&stream, config.total_steps)?;
    Ok((t.moe_model()?, rows))
}

/// Anything that maps a token sequence to causal logits.
pub trait LanguageModel: Sync {
    fn max_seq_len(&self) -> usize;
    fn logits(&self, tokens: &[u32]) -> Result<Matrix>;
}

impl LanguageModel for DenseGluModel {
    fn max_seq_len(&self) -> usize {
        self.hparams().max_seq_len
    }

    fn logits(&self, tokens: &[u32]) -> Result<Matrix> {
        self.forward(tokens)
    }
}

impl LanguageModel for MoeModel {
    fn max_seq_len(&self) -> usize {
        self.hparams().max_seq_len
    }

    fn logits(&self, tokens: &[u32]) -> Result<Matrix> {
        Ok(self.forward(tokens)?.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLoss {
    pub loss: f64,
    pub perplexity: f64,
    pub tokens: usize,
}

/// Summed next-token negative log-likelihood and prediction count.
pub fn sequence_nll(model: &dyn LanguageModel, tokens: &[u32]) -> Result<(f64, usize)> {
    if tokens.len() < 2 {
        return Ok((0.0, 0));
    }
    let logits = model.logits(tokens)?;
    let mut nll = 0.0;
    for t in 0..tokens.len() - 1 {
        let row = logits.row(t);
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        nll += lse - row[tokens[t + 1] as usize] as f64;
    }
    Ok((nll, tokens.len() - 1))
}

/// Mean next-token cross-entropy over every document, split into
/// `max_seq_len` chunks, and its exponential.
pub fn evaluate_loss(model: &dyn LanguageModel, corpus: &Corpus) -> Result<EvalLoss> {
    let chunks: Vec<&[u32]> = corpus
        .docs
        .iter()
        .flat_map(|d| d.chunks(model.max_seq_len().max(2)))
        .collect();
    let parts = chunks
        .par_iter()
        .map(|c| sequence_nll(model, c))
        .collect::<Result<Vec<_>>>()?;
    let (nll, tokens) = parts.iter().fold((0.0, 0), |(a, n), &(b, m)| (a + b, n + m));
    if tokens == 0 {
        return Err(Error::Input("evaluation corpus has no predictable tokens".into()));
    }
    let loss = nll / tokens as f64;
    Ok(EvalLoss {
        loss,
        perplexity: loss.exp(),
        tokens,
    })
}
