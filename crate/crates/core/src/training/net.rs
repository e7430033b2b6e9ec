//! Differentiable copy of the decoder, generic over the float type so the
//! hand-written backward pass can be checked in f64.

use std::fmt::Debug;

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::RMS_EPS;

pub trait Scalar: Float + Send + Sync + Debug + std::iter::Sum + 'static {}
impl Scalar for f32 {}
impl Scalar for f64 {}

fn c<T: Scalar>(x: f64) -> T {
    T::from(x).expect("representable constant")
}

/// `a (n×k) · b (k×m)`.
pub(crate) fn mm<T: Scalar>(a: &[T], n: usize, k: usize, b: &[T], m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    if m == 0 || n == 0 {
        return out;
    }
    out.par_chunks_mut(m).with_min_len(8).enumerate().for_each(|(i, row)| {
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            for (o, &bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o = *o + av * bv;
            }
        }
    });
    out
}

/// `out (k×m) += aᵀ · b` with `a` n×k and `b` n×m.
pub(crate) fn mm_tn_acc<T: Scalar>(a: &[T], n: usize, k: usize, b: &[T], m: usize, out: &mut [T]) {
    if m == 0 || k == 0 {
        return;
    }
    out.par_chunks_mut(m).with_min_len(8).enumerate().for_each(|(i, row)| {
        for t in 0..n {
            let av = a[t * k + i];
            for (o, &bv) in row.iter_mut().zip(&b[t * m..(t + 1) * m]) {
                *o = *o + av * bv;
            }
        }
    });
}

/// `a (n×m) · bᵀ` with `b` k×m.
pub(crate) fn mm_nt<T: Scalar>(a: &[T], n: usize, m: usize, b: &[T], k: usize) -> Vec<T> {
    let mut bt = vec![T::zero(); m * k];
    for r in 0..k {
        for col in 0..m {
            bt[col * k + r] = b[r * m + col];
        }
    }
    mm(a, n, m, &bt, k)
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Indices of the `k` largest values, ties to the lower index, in
/// descending value order.
fn topk<T: Scalar>(v: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct Glu<T> {
    pub d_ffn: usize,
    pub gate: Vec<T>,
    pub up: Vec<T>,
    pub down: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeFfn<T> {
    pub shared: Glu<T>,
    pub experts: Vec<Glu<T>>,
    /// `d_model × n_re`.
    pub router: Vec<T>,
    pub k_routed: usize,
    pub renormalize: bool,
}

impl<T> MoeFfn<T> {
    pub fn n_re(&self) -> usize {
        self.experts.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Ffn<T> {
    Dense(Glu<T>),
    Moe(MoeFfn<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub attn_norm: Vec<T>,
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    pub wo: Vec<T>,
    pub ffn_norm: Vec<T>,
    pub ffn: Ffn<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Net<T> {
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
    pub tok_emb: Vec<T>,
    pub pos_emb: Vec<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Vec<T>,
}

impl<T: Scalar> Glu<T> {
    fn map<U>(&self, f: &impl Fn(T) -> U) -> Glu<U> {
        Glu {
            d_ffn: self.d_ffn,
            gate: self.gate.iter().map(|&v| f(v)).collect(),
            up: self.up.iter().map(|&v| f(v)).collect(),
            down: self.down.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl<T: Scalar> Net<T> {
    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Net<U> {
        let v = |x: &Vec<T>| x.iter().map(|&a| f(a)).collect::<Vec<U>>();
        Net {
            d_model: self.d_model,
            n_heads: self.n_heads,
            vocab: self.vocab,
            max_seq_len: self.max_seq_len,
            tok_emb: v(&self.tok_emb),
            pos_emb: v(&self.pos_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    attn_norm: v(&b.attn_norm),
                    wq: v(&b.wq),
                    wk: v(&b.wk),
                    wv: v(&b.wv),
                    wo: v(&b.wo),
                    ffn_norm: v(&b.ffn_norm),
                    ffn: match &b.ffn {
                        Ffn::Dense(g) => Ffn::Dense(g.map(&f)),
                        Ffn::Moe(m) => Ffn::Moe(MoeFfn {
                            shared: m.shared.map(&f),
                            experts: m.experts.iter().map(|e| e.map(&f)).collect(),
                            router: v(&m.router),
                            k_routed: m.k_routed,
                            renormalize: m.renormalize,
                        }),
                    },
                })
                .collect(),
            final_norm: v(&self.final_norm),
        }
    }

    pub fn zeros_like(&self) -> Net<T> {
        self.map(|_| T::zero())
    }

    /// All parameter tensors in a fixed order, flagged true for matrices.
    pub fn tensors(&self) -> Vec<(&Vec<T>, bool)> {
        let mut out = vec![(&self.tok_emb, true), (&self.pos_emb, true)];
        for b in &self.blocks {
            out.push((&b.attn_norm, false));
            for w in [&b.wq, &b.wk, &b.wv, &b.wo] {
                out.push((w, true));
            }
            out.push((&b.ffn_norm, false));
            let glus: Vec<&Glu<T>> = match &b.ffn {
                Ffn::Dense(g) => vec![g],
                Ffn::Moe(m) => std::iter::once(&m.shared).chain(&m.experts).collect(),
            };
            for g in glus {
                out.extend([(&g.gate, true), (&g.up, true), (&g.down, true)]);
            }
            if let Ffn::Moe(m) = &b.ffn {
                out.push((&m.router, true));
            }
        }
        out.push((&self.final_norm, false));
        out
    }

    /// Same order as [`Net::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.push(&mut b.attn_norm);
            out.push(&mut b.wq);
            out.push(&mut b.wk);
            out.push(&mut b.wv);
            out.push(&mut b.wo);
            out.push(&mut b.ffn_norm);
            match &mut b.ffn {
                Ffn::Dense(g) => {
                    out.push(&mut g.gate);
                    out.push(&mut g.up);
                    out.push(&mut g.down);
                }
                Ffn::Moe(m) => {
                    for g in std::iter::once(&mut m.shared).chain(m.experts.iter_mut()) {
                        out.push(&mut g.gate);
                        out.push(&mut g.up);
                        out.push(&mut g.down);
                    }
                    out.push(&mut m.router);
                }
            }
        }
        out.push(&mut self.final_norm);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(t, _)| t.len()).sum()
    }

    fn moe_layers(&self) -> usize {
        self.blocks.iter().filter(|b| matches!(b.ffn, Ffn::Moe(_))).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Losses {
    pub l_ntp: f64,
    /// Mean over MoE layers of the per-layer load-balance loss; 0 without MoE layers.
    pub l_lb: f64,
    pub l_total: f64,
}

struct NormCache<T> {
    x: Vec<T>,
    inv: Vec<T>,
}

fn rms_fwd<T: Scalar>(x: &[T], g: &[T], d: usize) -> (Vec<T>, NormCache<T>) {
    let n = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(n);
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let ms = row.iter().map(|&v| v * v).sum::<T>() / c(d as f64);
        let ir = T::one() / (ms + c(RMS_EPS as f64)).sqrt();
        inv.push(ir);
        for ((o, &v), &gg) in y[r * d..(r + 1) * d].iter_mut().zip(row).zip(g) {
            *o = v * ir * gg;
        }
    }
    (y, NormCache { x: x.to_vec(), inv })
}

fn rms_bwd<T: Scalar>(cache: &NormCache<T>, g: &[T], dy: &[T], d: usize, dg: &mut [T]) -> Vec<T> {
    let n = cache.inv.len();
    let mut dx = vec![T::zero(); n * d];
    for r in 0..n {
        let x = &cache.x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let ir = cache.inv[r];
        let mut dot = T::zero();
        for i in 0..d {
            dg[i] = dg[i] + dyr[i] * x[i] * ir;
            dot = dot + g[i] * dyr[i] * x[i];
        }
        let coef = ir * ir * ir * dot / c(d as f64);
        for i in 0..d {
            dx[r * d + i] = ir * g[i] * dyr[i] - x[i] * coef;
        }
    }
    dx
}

struct GluCache<T> {
    x: Vec<T>,
    pre: Vec<T>,
    up: Vec<T>,
    act: Vec<T>,
    hidden: Vec<T>,
}

fn glu_fwd<T: Scalar>(g: &Glu<T>, x: &[T], d: usize) -> (Vec<T>, GluCache<T>) {
    let n = x.len() / d;
    let f = g.d_ffn;
    let pre = mm(x, n, d, &g.gate, f);
    let up = mm(x, n, d, &g.up, f);
    let act: Vec<T> = pre.iter().map(|&z| z * sigmoid(z)).collect();
    let hidden: Vec<T> = act.iter().zip(&up).map(|(&a, &u)| a * u).collect();
    let y = mm(&hidden, n, f, &g.down, d);
    (y, GluCache { x: x.to_vec(), pre, up, act, hidden })
}

fn glu_bwd<T: Scalar>(g: &Glu<T>, cache: &GluCache<T>, dy: &[T], d: usize, grad: &mut Glu<T>) -> Vec<T> {
    let n = cache.x.len() / d;
    let f = g.d_ffn;
    if f == 0 {
        return vec![T::zero(); n * d];
    }
    mm_tn_acc(&cache.hidden, n, f, dy, d, &mut grad.down);
    let dh = mm_nt(dy, n, d, &g.down, f);
    let mut dpre = vec![T::zero(); n * f];
    let mut dup = vec![T::zero(); n * f];
    for i in 0..n * f {
        let z = cache.pre[i];
        let s = sigmoid(z);
        let dswish = s * (T::one() + z * (T::one() - s));
        dpre[i] = dh[i] * cache.up[i] * dswish;
        dup[i] = dh[i] * cache.act[i];
    }
    mm_tn_acc(&cache.x, n, d, &dpre, f, &mut grad.gate);
    mm_tn_acc(&cache.x, n, d, &dup, f, &mut grad.up);
    let mut dx = mm_nt(&dpre, n, f, &g.gate, d);
    add_into(&mut dx, &mm_nt(&dup, n, f, &g.up, d));
    dx
}

struct ExpertCache<T> {
    rows: Vec<usize>,
    slots: Vec<usize>,
    out: Vec<T>,
    glu: GluCache<T>,
}

struct MoeCache<T> {
    shared: GluCache<T>,
    experts: Vec<Option<ExpertCache<T>>>,
    probs: Vec<T>,
    selected: Vec<Vec<usize>>,
    weights: Vec<Vec<T>>,
    /// Selections per expert over (tokens · k_routed).
    f_hat: Vec<T>,
}

fn moe_fwd<T: Scalar>(m: &MoeFfn<T>, x: &[T], d: usize) -> (Vec<T>, MoeCache<T>, f64) {
    let n = x.len() / d;
    let n_re = m.n_re();
    let (mut y, shared) = glu_fwd(&m.shared, x, d);
    let mut probs = mm(x, n, d, &m.router, n_re);
    let mut selected = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for t in 0..n {
        let p = &mut probs[t * n_re..(t + 1) * n_re];
        softmax_row(p);
        let sel = topk(p, m.k_routed);
        let mut w: Vec<T> = sel.iter().map(|&i| p[i]).collect();
        if m.renormalize {
            let total: T = w.iter().copied().sum();
            w.iter_mut().for_each(|v| *v = *v / total);
        }
        selected.push(sel);
        weights.push(w);
    }
    let mut users: Vec<(Vec<usize>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); n_re];
    for (t, sel) in selected.iter().enumerate() {
        for (slot, &i) in sel.iter().enumerate() {
            users[i].0.push(t);
            users[i].1.push(slot);
        }
    }
    let mut experts = Vec::with_capacity(n_re);
    for (i, (rows, slots)) in users.into_iter().enumerate() {
        if rows.is_empty() {
            experts.push(None);
            continue;
        }
        let mut xi = Vec::with_capacity(rows.len() * d);
        for &t in &rows {
            xi.extend_from_slice(&x[t * d..(t + 1) * d]);
        }
        let (out, glu) = glu_fwd(&m.experts[i], &xi, d);
        for (r, (&t, &slot)) in rows.iter().zip(&slots).enumerate() {
            let w = weights[t][slot];
            for (o, &v) in y[t * d..(t + 1) * d].iter_mut().zip(&out[r * d..(r + 1) * d]) {
                *o = *o + w * v;
            }
        }
        experts.push(Some(ExpertCache { rows, slots, out, glu }));
    }
    let slots_total = c::<T>((n * m.k_routed) as f64);
    let f_hat: Vec<T> = experts
        .iter()
        .map(|e| c::<T>(e.as_ref().map_or(0, |e| e.rows.len()) as f64) / slots_total)
        .collect();
    let mut lb = 0.0;
    for i in 0..n_re {
        let p_mean: f64 = (0..n).map(|t| probs[t * n_re + i].to_f64().unwrap()).sum::<f64>() / n as f64;
        lb += f_hat[i].to_f64().unwrap() * p_mean;
    }
    lb *= n_re as f64;
    (y, MoeCache { shared, experts, probs, selected, weights, f_hat }, lb)
}

fn moe_bwd<T: Scalar>(
    m: &MoeFfn<T>,
    cache: &MoeCache<T>,
    dy: &[T],
    d: usize,
    lb_coef: T,
    grad: &mut MoeFfn<T>,
) -> Vec<T> {
    let n = dy.len() / d;
    let n_re = m.n_re();
    let mut dx = glu_bwd(&m.shared, &cache.shared, dy, d, &mut grad.shared);
    let mut dw: Vec<Vec<T>> = cache.weights.iter().map(|w| vec![T::zero(); w.len()]).collect();
    for (i, e) in cache.experts.iter().enumerate() {
        let Some(e) = e else { continue };
        let mut dyi = Vec::with_capacity(e.rows.len() * d);
        for (r, (&t, &slot)) in e.rows.iter().zip(&e.slots).enumerate() {
            let w = cache.weights[t][slot];
            let dyt = &dy[t * d..(t + 1) * d];
            let out = &e.out[r * d..(r + 1) * d];
            dw[t][slot] = dyt.iter().zip(out).map(|(&a, &b)| a * b).sum();
            dyi.extend(dyt.iter().map(|&v| v * w));
        }
        let dxi = glu_bwd(&m.experts[i], &e.glu, &dyi, d, &mut grad.experts[i]);
        for (r, &t) in e.rows.iter().enumerate() {
            add_into(&mut dx[t * d..(t + 1) * d], &dxi[r * d..(r + 1) * d]);
        }
    }
    let mut dlogits = vec![T::zero(); n * n_re];
    let lb_scale = lb_coef * c(n_re as f64) / c(n as f64);
    for t in 0..n {
        let p = &cache.probs[t * n_re..(t + 1) * n_re];
        let mut dp: Vec<T> = cache.f_hat.iter().map(|&f| lb_scale * f).collect();
        let sel = &cache.selected[t];
        if m.renormalize {
            let total: T = sel.iter().map(|&i| p[i]).sum();
            let mean_dw: T = cache.weights[t].iter().zip(&dw[t]).map(|(&w, &g)| w * g).sum();
            for (slot, &i) in sel.iter().enumerate() {
                dp[i] = dp[i] + (dw[t][slot] - mean_dw) / total;
            }
        } else {
            for (slot, &i) in sel.iter().enumerate() {
                dp[i] = dp[i] + dw[t][slot];
            }
        }
        let dot: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
        for i in 0..n_re {
            dlogits[t * n_re + i] = p[i] * (dp[i] - dot);
        }
    }
    let x = &cache.shared.x;
    mm_tn_acc(x, n, d, &dlogits, n_re, &mut grad.router);
    add_into(&mut dx, &mm_nt(&dlogits, n, n_re, &m.router, d));
    dx
}

enum FfnCache<T> {
    Dense(GluCache<T>),
    Moe(MoeCache<T>),
}

struct BlockCache<T> {
    attn_norm: NormCache<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Per (sequence, head): `seq × seq` attention probabilities.
    probs: Vec<Vec<T>>,
    o: Vec<T>,
    ffn_norm: NormCache<T>,
    ffn: FfnCache<T>,
}

/// Result of one forward (and optionally backward) pass over a batch.
pub struct Pass<T> {
    pub losses: Losses,
    pub grads: Option<Net<T>>,
    /// Selected experts, flattened over MoE layers and tokens.
    pub routing: Vec<usize>,
}

impl<T: Scalar> Net<T> {
    fn check_batch(&self, seqs: &[Vec<u32>]) -> Result<usize> {
        let s = seqs.first().map_or(0, Vec::len);
        if seqs.is_empty() || s < 2 {
            return Err(Error::Input("training batch needs sequences of at least 2 tokens".into()));
        }
        if s > self.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {s} exceeds max_seq_len {}",
                self.max_seq_len
            )));
        }
        for q in seqs {
            if q.len() != s {
                return Err(Error::Input("batch sequences differ in length".into()));
            }
            if let Some(&t) = q.iter().find(|&&t| t as usize >= self.vocab) {
                return Err(Error::Input(format!("token {t} outside vocabulary")));
            }
        }
        Ok(s)
    }

    /// Mean next-token cross-entropy plus `lb_lambda` times the mean
    /// load-balance loss over MoE layers, with gradients when `want_grad`.
    pub fn pass(&self, seqs: &[Vec<u32>], lb_lambda: f64, want_grad: bool) -> Result<Pass<T>> {
        let s = self.check_batch(seqs)?;
        let b = seqs.len();
        let n = b * s;
        let d = self.d_model;
        let heads = self.n_heads;
        let hd = d / heads;
        let scale: T = c(1.0 / (hd as f64).sqrt());

        let mut h = vec![T::zero(); n * d];
        for (bi, q) in seqs.iter().enumerate() {
            for (p, &t) in q.iter().enumerate() {
                let row = &mut h[(bi * s + p) * d..(bi * s + p + 1) * d];
                let tok = &self.tok_emb[t as usize * d..(t as usize + 1) * d];
                let pos = &self.pos_emb[p * d..(p + 1) * d];
                for ((o, &x), &y) in row.iter_mut().zip(tok).zip(pos) {
                    *o = x + y;
                }
            }
        }

        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut routing = Vec::new();
        let mut lb_sum = 0.0;
        for blk in &self.blocks {
            let (a, attn_norm) = rms_fwd(&h, &blk.attn_norm, d);
            let q = mm(&a, n, d, &blk.wq, d);
            let k = mm(&a, n, d, &blk.wk, d);
            let v = mm(&a, n, d, &blk.wv, d);
            let mut o = vec![T::zero(); n * d];
            let mut probs = Vec::with_capacity(b * heads);
            for bi in 0..b {
                for hh in 0..heads {
                    let off = hh * hd;
                    let mut pm = vec![T::zero(); s * s];
                    for t in 0..s {
                        let qt = &q[(bi * s + t) * d + off..(bi * s + t) * d + off + hd];
                        let row = &mut pm[t * s..t * s + t + 1];
                        for (u, sv) in row.iter_mut().enumerate() {
                            let ku = &k[(bi * s + u) * d + off..(bi * s + u) * d + off + hd];
                            *sv = qt.iter().zip(ku).map(|(&x, &y)| x * y).sum::<T>() * scale;
                        }
                        softmax_row(row);
                        let ot = (bi * s + t) * d + off;
                        for (u, &pv) in row.iter().enumerate() {
                            let vu = (bi * s + u) * d + off;
                            for dd in 0..hd {
                                o[ot + dd] = o[ot + dd] + pv * v[vu + dd];
                            }
                        }
                    }
                    probs.push(pm);
                }
            }
            add_into(&mut h, &mm(&o, n, d, &blk.wo, d));
            let (f, ffn_norm) = rms_fwd(&h, &blk.ffn_norm, d);
            let (y, ffn) = match &blk.ffn {
                Ffn::Dense(g) => {
                    let (y, gc) = glu_fwd(g, &f, d);
                    (y, FfnCache::Dense(gc))
                }
                Ffn::Moe(m) => {
                    let (y, mc, lb) = moe_fwd(m, &f, d);
                    lb_sum += lb;
                    routing.extend(mc.selected.iter().flatten().copied());
                    (y, FfnCache::Moe(mc))
                }
            };
            add_into(&mut h, &y);
            caches.push(BlockCache { attn_norm, a, q, k, v, probs, o, ffn_norm, ffn });
        }
        let (z, final_cache) = rms_fwd(&h, &self.final_norm, d);
        let vocab = self.vocab;
        let mut logits = mm_nt(&z, n, d, &self.tok_emb, vocab);

        let count = b * (s - 1);
        let mut nll = 0.0f64;
        for (bi, seq) in seqs.iter().enumerate() {
            for t in 0..s {
                let r = bi * s + t;
                let row = &mut logits[r * vocab..(r + 1) * vocab];
                if t + 1 == s {
                    row.iter_mut().for_each(|v| *v = T::zero());
                    continue;
                }
                softmax_row(row);
                let target = seq[t + 1] as usize;
                nll -= row[target].to_f64().unwrap().ln();
                row[target] = row[target] - T::one();
                let inv: T = c(1.0 / count as f64);
                row.iter_mut().for_each(|v| *v = *v * inv);
            }
        }
        let n_moe = self.moe_layers();
        let l_ntp = nll / count as f64;
        let l_lb = if n_moe == 0 { 0.0 } else { lb_sum / n_moe as f64 };
        let losses = Losses {
            l_ntp,
            l_lb,
            l_total: l_ntp + lb_lambda * l_lb,
        };
        if !want_grad {
            return Ok(Pass { losses, grads: None, routing });
        }

        // `logits` now holds dL/dlogits.
        let dlogits = logits;
        let mut grad = self.zeros_like();
        mm_tn_acc(&dlogits, n, vocab, &z, d, &mut grad.tok_emb);
        let dz = mm(&dlogits, n, vocab, &self.tok_emb, d);
        let mut dh = rms_bwd(&final_cache, &self.final_norm, &dz, d, &mut grad.final_norm);
        let lb_coef: T = c(if n_moe == 0 { 0.0 } else { lb_lambda / n_moe as f64 });

        for (l, (blk, cache)) in self.blocks.iter().zip(&caches).enumerate().rev() {
            let gb = &mut grad.blocks[l];
            let df = match (&blk.ffn, &cache.ffn, &mut gb.ffn) {
                (Ffn::Dense(g), FfnCache::Dense(gc), Ffn::Dense(gg)) => glu_bwd(g, gc, &dh, d, gg),
                (Ffn::Moe(m), FfnCache::Moe(mc), Ffn::Moe(gm)) => moe_bwd(m, mc, &dh, d, lb_coef, gm),
                _ => unreachable!("cache matches block kind"),
            };
            add_into(&mut dh, &rms_bwd(&cache.ffn_norm, &blk.ffn_norm, &df, d, &mut gb.ffn_norm));

            mm_tn_acc(&cache.o, n, d, &dh, d, &mut gb.wo);
            let d_o = mm_nt(&dh, n, d, &blk.wo, d);
            let mut dq = vec![T::zero(); n * d];
            let mut dk = vec![T::zero(); n * d];
            let mut dv = vec![T::zero(); n * d];
            let mut dp = vec![T::zero(); s];
            for bi in 0..b {
                for hh in 0..heads {
                    let off = hh * hd;
                    let pm = &cache.probs[bi * heads + hh];
                    for t in 0..s {
                        let rt = (bi * s + t) * d + off;
                        let prow = &pm[t * s..t * s + t + 1];
                        let mut dot = T::zero();
                        for (u, &pv) in prow.iter().enumerate() {
                            let ru = (bi * s + u) * d + off;
                            let mut acc = T::zero();
                            for dd in 0..hd {
                                acc = acc + d_o[rt + dd] * cache.v[ru + dd];
                                dv[ru + dd] = dv[ru + dd] + pv * d_o[rt + dd];
                            }
                            dp[u] = acc;
                            dot = dot + pv * acc;
                        }
                        for (u, &pv) in prow.iter().enumerate() {
                            let ds = pv * (dp[u] - dot) * scale;
                            let ru = (bi * s + u) * d + off;
                            for dd in 0..hd {
                                dq[rt + dd] = dq[rt + dd] + ds * cache.k[ru + dd];
                                dk[ru + dd] = dk[ru + dd] + ds * cache.q[rt + dd];
                            }
                        }
                    }
                }
            }
            mm_tn_acc(&cache.a, n, d, &dq, d, &mut gb.wq);
            mm_tn_acc(&cache.a, n, d, &dk, d, &mut gb.wk);
            mm_tn_acc(&cache.a, n, d, &dv, d, &mut gb.wv);
            let mut da = mm_nt(&dq, n, d, &blk.wq, d);
            add_into(&mut da, &mm_nt(&dk, n, d, &blk.wk, d));
            add_into(&mut da, &mm_nt(&dv, n, d, &blk.wv, d));
            add_into(&mut dh, &rms_bwd(&cache.attn_norm, &blk.attn_norm, &da, d, &mut gb.attn_norm));
        }

        for (bi, q) in seqs.iter().enumerate() {
            for (p, &t) in q.iter().enumerate() {
                let src = &dh[(bi * s + p) * d..(bi * s + p + 1) * d];
                add_into(&mut grad.tok_emb[t as usize * d..(t as usize + 1) * d], src);
                add_into(&mut grad.pos_emb[p * d..(p + 1) * d], src);
            }
        }
        Ok(Pass { losses, grads: Some(grad), routing })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rv(n: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0) * std).collect()
    }

    fn glu(d: usize, f: usize, rng: &mut ChaCha8Rng) -> Glu<f64> {
        Glu { d_ffn: f, gate: rv(d * f, 0.4, rng), up: rv(d * f, 0.4, rng), down: rv(f * d, 0.4, rng) }
    }

    /// Two-layer micro model: layer 0 dense, layer 1 MoE (1 shared + 4 routed).
    fn micro(renormalize: bool, seed: u64) -> Net<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, vocab, max_seq) = (8, 11, 8);
        let block = |ffn: Ffn<f64>, rng: &mut ChaCha8Rng| Block {
            attn_norm: (0..d).map(|_| 1.0 + rng.random_range(-0.3..0.3)).collect(),
            wq: rv(d * d, 0.4, rng),
            wk: rv(d * d, 0.4, rng),
            wv: rv(d * d, 0.4, rng),
            wo: rv(d * d, 0.4, rng),
            ffn_norm: (0..d).map(|_| 1.0 + rng.random_range(-0.3..0.3)).collect(),
            ffn,
        };
        let dense = Ffn::Dense(glu(d, 12, &mut rng));
        let b0 = block(dense, &mut rng);
        let moe = Ffn::Moe(MoeFfn {
            shared: glu(d, 2, &mut rng),
            experts: (0..4).map(|_| glu(d, 2, &mut rng)).collect(),
            router: rv(d * 4, 1.0, &mut rng),
            k_routed: 2,
            renormalize,
        });
        let b1 = block(moe, &mut rng);
        Net {
            d_model: d,
            n_heads: 2,
            vocab,
            max_seq_len: max_seq,
            tok_emb: rv(vocab * d, 0.5, &mut rng),
            pos_emb: rv(max_seq * d, 0.3, &mut rng),
            blocks: vec![b0, b1],
            final_norm: (0..d).map(|_| 1.0 + rng.random_range(-0.3..0.3)).collect(),
        }
    }

    fn batch() -> Vec<Vec<u32>> {
        vec![vec![1, 4, 2, 9, 3, 3], vec![0, 10, 5, 6, 7, 2]]
    }

    /// Worst relative error over every parameter, and the number of
    /// parameters skipped because a perturbation changed expert selection.
    fn check(net: &Net<f64>, lambda: f64) -> (f64, usize, usize) {
        let seqs = batch();
        let base = net.pass(&seqs, lambda, true).unwrap();
        let grads = base.grads.unwrap();
        let h = 1e-3;
        let (mut worst, mut skipped, mut checked) = (0.0f64, 0usize, 0usize);
        let n_tensors = net.tensors().len();
        for ti in 0..n_tensors {
            let len = net.tensors()[ti].0.len();
            for j in 0..len {
                let mut plus = net.clone();
                plus.tensors_mut()[ti][j] += h;
                let mut minus = net.clone();
                minus.tensors_mut()[ti][j] -= h;
                let lp = plus.pass(&seqs, lambda, false).unwrap();
                let lm = minus.pass(&seqs, lambda, false).unwrap();
                if lp.routing != base.routing || lm.routing != base.routing {
                    skipped += 1;
                    continue;
                }
                let fd = (lp.losses.l_total - lm.losses.l_total) / (2.0 * h);
                let g = grads.tensors()[ti].0[j];
                let err = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-4);
                worst = worst.max(err);
                checked += 1;
            }
        }
        (worst, skipped, checked)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for renormalize in [true, false] {
            let net = micro(renormalize, 3);
            let (worst, skipped, checked) = check(&net, 0.01);
            assert!(worst <= 1e-3, "renormalize={renormalize}: worst relative error {worst}");
            assert!(skipped * 50 <= checked, "{skipped} skipped of {checked}");
        }
    }

    #[test]
    fn load_balance_term_gradient() {
        // A large coefficient isolates the load-balance path.
        let net = micro(true, 4);
        let (worst, _, _) = check(&net, 5.0);
        assert!(worst <= 1e-3, "{worst}");
    }

    #[test]
    fn lambda_zero_total_equals_ntp() {
        let net = micro(true, 5);
        let p = net.pass(&batch(), 0.0, false).unwrap();
        assert_eq!(p.losses.l_total, p.losses.l_ntp);
        assert!(p.losses.l_lb > 0.0);
    }

    #[test]
    fn batch_validation() {
        let net = micro(true, 6);
        assert!(net.pass(&[], 0.0, false).is_err());
        assert!(net.pass(&[vec![1]], 0.0, false).is_err());
        assert!(net.pass(&[vec![1, 2], vec![1, 2, 3]], 0.0, false).is_err());
        assert!(net.pass(&[vec![1, 11]], 0.0, false).is_err());
        assert!(net.pass(&[vec![1; 9]], 0.0, false).is_err());
    }

    #[test]
    fn matmul_helpers_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rv(3 * 4, 1.0, &mut rng);
        let b = rv(4 * 5, 1.0, &mut rng);
        let ab = mm(&a, 3, 4, &b, 5);
        for i in 0..3 {
            for j in 0..5 {
                let e: f64 = (0..4).map(|p| a[i * 4 + p] * b[p * 5 + j]).sum();
                assert!((ab[i * 5 + j] - e).abs() < 1e-12);
            }
        }
        let mut bt = vec![0.0; 20];
        for p in 0..4 {
            for j in 0..5 {
                bt[j * 4 + p] = b[p * 5 + j];
            }
        }
        assert_eq!(mm_nt(&a, 3, 4, &bt, 5), ab);
        let mut acc = vec![0.0; 4 * 5];
        mm_tn_acc(&a, 3, 4, &ab, 5, &mut acc);
        for p in 0..4 {
            for j in 0..5 {
                let e: f64 = (0..3).map(|i| a[i * 4 + p] * ab[i * 5 + j]).sum();
                assert!((acc[p * 5 + j] - e).abs() < 1e-12);
            }
        }
    }
}
