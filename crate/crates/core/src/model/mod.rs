//! Pre-norm decoder-only transformer with SwiGLU feed-forward layers.
//!
//! The attention stack, embeddings and norms live in [`Backbone`] so dense
//! and mixture-of-experts models can share them; only the FFN differs.

pub mod checkpoint;

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{matmul, rms_norm, softmax_in_place, swish_scalar, Matrix};
use crate::seed;
use crate::tokenizer;
use checkpoint::{Container, NamedTensor, TensorStore};

pub const RMS_EPS: f32 = 1e-5;
pub(crate) const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HParams {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
}

impl Default for HParams {
    /// Desk-scale toy configuration.
    fn default() -> Self {
        HParams {
            vocab_size: tokenizer::VOCAB_SIZE,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ffn: 512,
            max_seq_len: 256,
        }
    }
}

impl HParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// One SwiGLU feed-forward block. Column `j` of `w_gate` and `w_up` together
/// with row `j` of `w_down` form neuron slice `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGluLayer {
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

impl DenseGluLayer {
    pub fn new(w_gate: Matrix, w_up: Matrix, w_down: Matrix) -> Result<Self> {
        let (d_model, d_ffn) = w_gate.shape();
        if w_up.shape() != (d_model, d_ffn) || w_down.shape() != (d_ffn, d_model) {
            return Err(Error::shape(
                "DenseGluLayer::new",
                format!(
                    "gate {:?}, up {:?}, down {:?}",
                    w_gate.shape(),
                    w_up.shape(),
                    w_down.shape()
                ),
            ));
        }
        Ok(DenseGluLayer {
            w_gate,
            w_up,
            w_down,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_gate.rows()
    }

    pub fn d_ffn(&self) -> usize {
        self.w_gate.cols()
    }

    pub fn param_count(&self) -> usize {
        3 * self.d_model() * self.d_ffn()
    }

    fn check_input(&self, x: &Matrix, op: &'static str) -> Result<()> {
        if x.cols() != self.d_model() {
            return Err(Error::shape(
                op,
                format!("input width {} vs d_model {}", x.cols(), self.d_model()),
            ));
        }
        Ok(())
    }

    /// `Swish(x W_gate)`, one row per token.
    pub fn gate_activations(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x, "gate_activations")?;
        Ok(matmul(x, &self.w_gate)?.map(swish_scalar))
    }

    /// `(Swish(x W_gate) ⊙ x W_up) W_down`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_masked(x, |_| Ok(()))
    }

    /// Runs the FFN but lets `mask` rewrite the gate activations of each token
    /// before they multiply the up projection.
    pub(crate) fn forward_masked(
        &self,
        x: &Matrix,
        mut mask: impl FnMut(&mut Matrix) -> Result<()>,
    ) -> Result<Matrix> {
        self.check_input(x, "ffn_forward")?;
        if self.d_ffn() == 0 {
            return Ok(Matrix::zeros(x.rows(), self.d_model()));
        }
        let mut hidden = matmul(x, &self.w_gate)?.map(swish_scalar);
        mask(&mut hidden)?;
        let up = matmul(x, &self.w_up)?;
        for (h, u) in hidden.data_mut().iter_mut().zip(up.data()) {
            *h *= u;
        }
        matmul(&hidden, &self.w_down)
    }

    pub fn random(d_model: usize, d_ffn: usize, down_std: f64, rng: &mut impl Rng) -> Self {
        DenseGluLayer {
            w_gate: random_matrix(d_model, d_ffn, INIT_STD, rng),
            w_up: random_matrix(d_model, d_ffn, INIT_STD, rng),
            w_down: random_matrix(d_ffn, d_model, down_std, rng),
        }
    }
}

/// Free-function form of [`DenseGluLayer::forward`].
pub fn ffn_forward_dense(layer: &DenseGluLayer, x: &Matrix) -> Result<Matrix> {
    layer.forward(x)
}

pub(crate) fn random_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| normal.sample(rng) as f32).collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

/// Attention sub-block plus the norm that precedes the FFN.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f32>,
}

/// Everything in the transformer except the feed-forward layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub hparams: HParams,
    pub tok_embedding: Matrix,
    pub pos_embedding: Matrix,
    pub blocks: Vec<AttentionBlock>,
    pub final_norm: Vec<f32>,
}

impl Backbone {
    pub fn random(hparams: &HParams, rng: &mut impl Rng) -> Self {
        let d = hparams.d_model;
        let out_std = INIT_STD / (2.0 * hparams.n_layers as f64).sqrt();
        let tok_embedding = random_matrix(hparams.vocab_size, d, INIT_STD, rng);
        let pos_embedding = random_matrix(hparams.max_seq_len, d, INIT_STD, rng);
        let blocks = (0..hparams.n_layers)
            .map(|_| AttentionBlock {
                attn_norm: vec![1.0; d],
                wq: random_matrix(d, d, INIT_STD, rng),
                wk: random_matrix(d, d, INIT_STD, rng),
                wv: random_matrix(d, d, INIT_STD, rng),
                wo: random_matrix(d, d, out_std, rng),
                ffn_norm: vec![1.0; d],
            })
            .collect();
        Backbone {
            hparams: hparams.clone(),
            tok_embedding,
            pos_embedding,
            blocks,
            final_norm: vec![1.0; d],
        }
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.hparams.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.hparams.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.hparams.vocab_size) {
            return Err(Error::Input(format!(
                "token {t} out of range for vocab {}",
                self.hparams.vocab_size
            )));
        }
        Ok(())
    }

    /// Full causal forward pass. `ffn(layer, x)` receives the normalized
    /// residual stream of each layer and returns that layer's FFN output.
    pub fn forward_with<F>(&self, tokens: &[u32], mut ffn: F) -> Result<Matrix>
    where
        F: FnMut(usize, &Matrix) -> Result<Matrix>,
    {
        self.check_tokens(tokens)?;
        let d = self.hparams.d_model;
        let mut h = Matrix::zeros(tokens.len(), d);
        for (p, &t) in tokens.iter().enumerate() {
            let tok = self.tok_embedding.row(t as usize);
            let pos = self.pos_embedding.row(p);
            for ((o, a), b) in h.row_mut(p).iter_mut().zip(tok).zip(pos) {
                *o = a + b;
            }
        }
        for (l, block) in self.blocks.iter().enumerate() {
            let a = rms_norm(&h, &block.attn_norm, RMS_EPS)?;
            let attn = self.attention(block, &a)?;
            h.add_assign(&attn)?;
            let f = rms_norm(&h, &block.ffn_norm, RMS_EPS)?;
            let y = ffn(l, &f)?;
            h.add_assign(&y)?;
        }
        let z = rms_norm(&h, &self.final_norm, RMS_EPS)?;
        crate::kernels::matmul_transb(&z, &self.tok_embedding)
    }

    fn attention(&self, block: &AttentionBlock, a: &Matrix) -> Result<Matrix> {
        let n = a.rows();
        let heads = self.hparams.n_heads;
        let hd = self.hparams.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let q = matmul(a, &block.wq)?;
        let k = matmul(a, &block.wk)?;
        let v = matmul(a, &block.wv)?;
        let mut o = Matrix::zeros(n, self.hparams.d_model);
        let mut scores = vec![0.0f32; n];
        for hh in 0..heads {
            let off = hh * hd;
            for t in 0..n {
                let qt = &q.row(t)[off..off + hd];
                let s = &mut scores[..=t];
                for (u, sv) in s.iter_mut().enumerate() {
                    let ku = &k.row(u)[off..off + hd];
                    *sv = qt.iter().zip(ku).map(|(x, y)| x * y).sum::<f32>() * scale;
                }
                softmax_in_place(s);
                let ot = &mut o.row_mut(t)[off..off + hd];
                for (u, &p) in s.iter().enumerate() {
                    let vu = &v.row(u)[off..off + hd];
                    for (dst, &vv) in ot.iter_mut().zip(vu) {
                        *dst += p * vv;
                    }
                }
            }
        }
        matmul(&o, &block.wo)
    }

    pub(crate) fn push_tensors(&self, c: &mut Container) {
        c.push(NamedTensor::matrix("tok_embedding", &self.tok_embedding));
        c.push(NamedTensor::matrix("pos_embedding", &self.pos_embedding));
        for (l, b) in self.blocks.iter().enumerate() {
            c.push(NamedTensor::vector(format!("layer{l}.attn_norm"), &b.attn_norm));
            c.push(NamedTensor::matrix(format!("layer{l}.attn.wq"), &b.wq));
            c.push(NamedTensor::matrix(format!("layer{l}.attn.wk"), &b.wk));
            c.push(NamedTensor::matrix(format!("layer{l}.attn.wv"), &b.wv));
            c.push(NamedTensor::matrix(format!("layer{l}.attn.wo"), &b.wo));
            c.push(NamedTensor::vector(format!("layer{l}.ffn_norm"), &b.ffn_norm));
        }
        c.push(NamedTensor::vector("final_norm", &self.final_norm));
    }

    pub(crate) fn from_store(hparams: &HParams, s: &mut TensorStore) -> Result<Self, String> {
        hparams.validate().map_err(|e| e.to_string())?;
        let d = hparams.d_model;
        let tok_embedding = s.take_matrix("tok_embedding", hparams.vocab_size, d)?;
        let pos_embedding = s.take_matrix("pos_embedding", hparams.max_seq_len, d)?;
        let mut blocks = Vec::with_capacity(hparams.n_layers);
        for l in 0..hparams.n_layers {
            blocks.push(AttentionBlock {
                attn_norm: s.take(&format!("layer{l}.attn_norm"), &[d])?,
                wq: s.take_matrix(&format!("layer{l}.attn.wq"), d, d)?,
                wk: s.take_matrix(&format!("layer{l}.attn.wk"), d, d)?,
                wv: s.take_matrix(&format!("layer{l}.attn.wv"), d, d)?,
                wo: s.take_matrix(&format!("layer{l}.attn.wo"), d, d)?,
                ffn_norm: s.take(&format!("layer{l}.ffn_norm"), &[d])?,
            });
        }
        let final_norm = s.take("final_norm", &[d])?;
        Ok(Backbone {
            hparams: hparams.clone(),
            tok_embedding,
            pos_embedding,
            blocks,
            final_norm,
        })
    }
}

/// Dense SwiGLU decoder: the model being converted.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGluModel {
    pub backbone: Backbone,
    pub ffn: Vec<DenseGluLayer>,
}

impl DenseGluModel {
    pub fn new(backbone: Backbone, ffn: Vec<DenseGluLayer>) -> Result<Self> {
        let hp = &backbone.hparams;
        hp.validate()?;
        if ffn.len() != hp.n_layers || backbone.blocks.len() != hp.n_layers {
            return Err(Error::shape(
                "DenseGluModel::new",
                format!("{} ffn layers, {} blocks, n_layers {}", ffn.len(), backbone.blocks.len(), hp.n_layers),
            ));
        }
        if let Some((l, f)) = ffn
            .iter()
            .enumerate()
            .find(|(_, f)| f.d_model() != hp.d_model || f.d_ffn() != hp.d_ffn)
        {
            return Err(Error::shape(
                "DenseGluModel::new",
                format!("layer {l} is {}x{}, expected {}x{}", f.d_model(), f.d_ffn(), hp.d_model, hp.d_ffn),
            ));
        }
        Ok(DenseGluModel { backbone, ffn })
    }

    pub fn random(hparams: &HParams, seed: u64) -> Result<Self> {
        hparams.validate()?;
        let mut rng = seed::rng(seed, "init");
        let backbone = Backbone::random(hparams, &mut rng);
        let down_std = INIT_STD / (2.0 * hparams.n_layers as f64).sqrt();
        let ffn = (0..hparams.n_layers)
            .map(|_| DenseGluLayer::random(hparams.d_model, hparams.d_ffn, down_std, &mut rng))
            .collect();
        DenseGluModel::new(backbone, ffn)
    }

    pub fn hparams(&self) -> &HParams {
        &self.backbone.hparams
    }

    /// Causal logits, `tokens.len() × vocab_size`.
    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix> {
        self.backbone.forward_with(tokens, |l, x| self.ffn[l].forward(x))
    }

    pub fn ffn_param_count(&self) -> usize {
        self.ffn.iter().map(DenseGluLayer::param_count).sum()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("dense", self.hparams().clone());
        self.backbone.push_tensors(&mut c);
        for (l, f) in self.ffn.iter().enumerate() {
            c.push(NamedTensor::matrix(format!("layer{l}.ffn.gate"), &f.w_gate));
            c.push(NamedTensor::matrix(format!("layer{l}.ffn.up"), &f.w_up));
            c.push(NamedTensor::matrix(format!("layer{l}.ffn.down"), &f.w_down));
        }
        c
    }

    pub fn from_container(c: Container) -> Result<Self, String> {
        if c.kind != "dense" {
            return Err(format!("expected a dense checkpoint, found kind {:?}", c.kind));
        }
        let hp = c.hparams.clone();
        let mut s = c.into_store();
        let backbone = Backbone::from_store(&hp, &mut s)?;
        let mut ffn = Vec::with_capacity(hp.n_layers);
        for l in 0..hp.n_layers {
            ffn.push(DenseGluLayer {
                w_gate: s.take_matrix(&format!("layer{l}.ffn.gate"), hp.d_model, hp.d_ffn)?,
                w_up: s.take_matrix(&format!("layer{l}.ffn.up"), hp.d_model, hp.d_ffn)?,
                w_down: s.take_matrix(&format!("layer{l}.ffn.down"), hp.d_ffn, hp.d_model)?,
            });
        }
        s.finish()?;
        DenseGluModel::new(backbone, ffn).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        DenseGluModel::from_container(c).map_err(|reason| Error::Load {
            path: path.to_path_buf(),
            reason,
        })
    }
}

/// Free-function form of [`DenseGluModel::forward`].
pub fn model_forward(model: &DenseGluModel, tokens: &[u32]) -> Result<Matrix> {
    model.forward(tokens)
}

pub fn save_checkpoint(model: &DenseGluModel, path: &Path) -> Result<()> {
    model.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<DenseGluModel> {
    DenseGluModel::load(path)
}
