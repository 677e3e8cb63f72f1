//! A small BERT-style self-attention stack driven by explicit attention masks.
//!
//! Sequences of a batch are packed row-wise into one matrix so the
//! position-wise layers run as single matrix products; attention runs per
//! sequence under that sequence's mask. The stack is pre-norm: each block
//! computes `h = x + Attn(LN(x))`, `x' = h + FFN(LN(h))`, and a final layer
//! norm closes the stack.

use ndarray::{s, Array1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::masks::{AttentionMask, LayoutToken, Role, TokenLayout};
use crate::nn::{
    gelu, gelu_grad, join, matmul_acc, normal_mat, LayerNorm, Linear, LnCache, Mat, Parameters,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    /// Dimension of the latent vector projected into the `[z]` slot, if any.
    pub latent_dim: Option<usize>,
    /// Share the token embedding matrix with the output projection.
    pub tie_embeddings: bool,
    pub init_std: f64,
}

impl TransformerConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            heads: 4,
            hidden_dim: 64,
            ffn_dim: 256,
            max_positions: 64,
            vocab_size,
            latent_dim: None,
            tie_embeddings: true,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("max_positions", self.max_positions),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.latent_dim == Some(0) {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl Parameters for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Mat)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.qkv.visit(&join(prefix, "attn.qkv"), f);
        self.out.visit(&join(prefix, "attn.out"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.ff1.visit(&join(prefix, "ffn.in"), f);
        self.ff2.visit(&join(prefix, "ffn.out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Mat)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.qkv.visit_mut(&join(prefix, "attn.qkv"), f);
        self.out.visit_mut(&join(prefix, "attn.out"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.ff1.visit_mut(&join(prefix, "ffn.in"), f);
        self.ff2.visit_mut(&join(prefix, "ffn.out"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub cfg: TransformerConfig,
    pub tok_emb: Mat,
    pub seg_emb: Mat,
    pub pos_emb: Mat,
    pub z_proj: Option<Linear>,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    /// Output projection (`hidden × vocab`) when embeddings are untied.
    pub head_w: Option<Mat>,
    pub head_b: Mat,
}

impl Parameters for Transformer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Mat)) {
        f(&join(prefix, "tok_emb"), &self.tok_emb);
        f(&join(prefix, "seg_emb"), &self.seg_emb);
        f(&join(prefix, "pos_emb"), &self.pos_emb);
        if let Some(z) = &self.z_proj {
            z.visit(&join(prefix, "z_proj"), f);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.visit(&join(prefix, "ln_f"), f);
        if let Some(w) = &self.head_w {
            f(&join(prefix, "head.w"), w);
        }
        f(&join(prefix, "head.b"), &self.head_b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Mat)) {
        f(&join(prefix, "tok_emb"), &mut self.tok_emb);
        f(&join(prefix, "seg_emb"), &mut self.seg_emb);
        f(&join(prefix, "pos_emb"), &mut self.pos_emb);
        if let Some(z) = &mut self.z_proj {
            z.visit_mut(&join(prefix, "z_proj"), f);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_f.visit_mut(&join(prefix, "ln_f"), f);
        if let Some(w) = &mut self.head_w {
            f(&join(prefix, "head.w"), w);
        }
        f(&join(prefix, "head.b"), &mut self.head_b);
    }
}

/// Sequences packed row-wise, each with its own attention mask.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    seqs: Vec<(&'a TokenLayout, &'a AttentionMask)>,
    offsets: Vec<usize>,
    rows: usize,
}

impl<'a> Batch<'a> {
    pub fn new(seqs: Vec<(&'a TokenLayout, &'a AttentionMask)>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(seqs.len());
        let mut rows = 0;
        for (layout, mask) in &seqs {
            if layout.len() != mask.size() {
                return Err(Error::DimMismatch {
                    expected: layout.len(),
                    got: mask.size(),
                });
            }
            offsets.push(rows);
            rows += layout.len();
        }
        Ok(Self {
            seqs,
            offsets,
            rows,
        })
    }

    pub fn single(layout: &'a TokenLayout, mask: &'a AttentionMask) -> Result<Self> {
        Self::new(vec![(layout, mask)])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    /// Row of token `idx` of sequence `seq` in the packed matrix.
    pub fn row(&self, seq: usize, idx: usize) -> usize {
        self.offsets[seq] + idx
    }

    pub fn layout(&self, seq: usize) -> &TokenLayout {
        self.seqs[seq].0
    }

    fn tokens(&self) -> impl Iterator<Item = &LayoutToken> + '_ {
        self.seqs.iter().flat_map(|(l, _)| l.tokens().iter())
    }

    /// Number of `[z]` slots across the batch.
    pub fn z_slots(&self) -> usize {
        self.tokens().filter(|t| t.role == Role::Z).count()
    }
}

struct BlockCache {
    ln1: LnCache,
    a: Mat,
    qkv: Mat,
    probs: Vec<Mat>,
    ctx: Mat,
    ln2: LnCache,
    c: Mat,
    pre: Mat,
    act: Mat,
}

/// Activations retained by [`Transformer::forward`] for the backward pass.
pub struct Cache {
    blocks: Vec<BlockCache>,
    ln_f: LnCache,
}

/// Per-layer keys and values of an incrementally decoded sequence.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Mat>,
    values: Vec<Mat>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn gather_rows(m: &Mat, rows: &[usize]) -> Mat {
    m.select(Axis(0), rows)
}

pub fn scatter_add_rows(dst: &mut Mat, rows: &[usize], src: &Mat) {
    for (k, &r) in rows.iter().enumerate() {
        let mut d = dst.row_mut(r);
        d += &src.row(k);
    }
}

impl Transformer {
    pub fn new<R: Rng>(cfg: TransformerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (h, v, std) = (cfg.hidden_dim, cfg.vocab_size, cfg.init_std);
        let tok_emb = normal_mat(v, h, std, rng);
        let seg_emb = normal_mat(2, h, std, rng);
        let pos_emb = normal_mat(cfg.max_positions, h, std, rng);
        let z_proj = cfg.latent_dim.map(|l| Linear::new(l, h, std, rng));
        let blocks = (0..cfg.layers)
            .map(|_| Block {
                ln1: LayerNorm::new(h),
                qkv: Linear::new(h, 3 * h, std, rng),
                out: Linear::new(h, h, std, rng),
                ln2: LayerNorm::new(h),
                ff1: Linear::new(h, cfg.ffn_dim, std, rng),
                ff2: Linear::new(cfg.ffn_dim, h, std, rng),
            })
            .collect();
        let head_w = (!cfg.tie_embeddings).then(|| normal_mat(h, v, std, rng));
        Ok(Self {
            ln_f: LayerNorm::new(h),
            head_b: Mat::zeros((1, v)),
            cfg,
            tok_emb,
            seg_emb,
            pos_emb,
            z_proj,
            blocks,
            head_w,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.cfg.hidden_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn check_token(&self, t: &LayoutToken) -> Result<()> {
        if t.position >= self.cfg.max_positions {
            return Err(Error::Layout(format!(
                "position {} exceeds max_positions {}",
                t.position, self.cfg.max_positions
            )));
        }
        if t.id as usize >= self.cfg.vocab_size {
            return Err(Error::Layout(format!(
                "token id {} outside vocabulary",
                t.id
            )));
        }
        Ok(())
    }

    fn embed_token(&self, t: &LayoutToken) -> Array1<f64> {
        &self.tok_emb.row(t.id as usize)
            + &self.seg_emb.row(t.segment as usize)
            + &self.pos_emb.row(t.position)
    }

    /// Sum of token, segment and position embeddings for every packed row.
    ///
    /// The token embedding of each `[z]` row is replaced by the projection of
    /// the matching row of `z` (rows of `z` are consumed in batch order).
    pub fn embed(&self, batch: &Batch, z: Option<&Mat>) -> Result<Mat> {
        let slots = batch.z_slots();
        let zp = if slots > 0 {
            let z = z.ok_or_else(|| {
                Error::Layout("layout has a [z] slot but no latent vector was given".into())
            })?;
            let proj = self
                .z_proj
                .as_ref()
                .ok_or_else(|| Error::Config("this stack has no latent projection".into()))?;
            if z.nrows() != slots {
                return Err(Error::DimMismatch {
                    expected: slots,
                    got: z.nrows(),
                });
            }
            if z.ncols() != proj.in_dim() {
                return Err(Error::DimMismatch {
                    expected: proj.in_dim(),
                    got: z.ncols(),
                });
            }
            Some(proj.forward(z))
        } else {
            None
        };
        let mut x = Mat::zeros((batch.rows(), self.cfg.hidden_dim));
        let mut zi = 0;
        for (r, t) in batch.tokens().enumerate() {
            self.check_token(t)?;
            let mut row = x.row_mut(r);
            if t.role == Role::Z {
                let zp = zp.as_ref().expect("checked above");
                row.assign(&zp.row(zi));
                zi += 1;
            } else {
                row.assign(&self.tok_emb.row(t.id as usize));
            }
            row += &self.seg_emb.row(t.segment as usize);
            row += &self.pos_emb.row(t.position);
        }
        Ok(x)
    }

    /// Accumulates embedding gradients; returns the gradient w.r.t. `z`.
    pub fn embed_backward(
        &self,
        batch: &Batch,
        dx: &Mat,
        z: Option<&Mat>,
        g: &mut Transformer,
    ) -> Option<Mat> {
        let mut z_rows = Vec::new();
        for (r, t) in batch.tokens().enumerate() {
            let d = dx.row(r);
            if t.role == Role::Z {
                z_rows.push(r);
            } else {
                let mut e = g.tok_emb.row_mut(t.id as usize);
                e += &d;
            }
            let mut s = g.seg_emb.row_mut(t.segment as usize);
            s += &d;
            let mut p = g.pos_emb.row_mut(t.position);
            p += &d;
        }
        if z_rows.is_empty() {
            return None;
        }
        let dz_h = gather_rows(dx, &z_rows);
        let proj = self.z_proj.as_ref()?;
        let gp = g.z_proj.as_mut()?;
        Some(proj.backward(z?, &dz_h, gp))
    }

    fn attention(&self, qkv: &Mat, batch: &Batch) -> (Mat, Vec<Mat>) {
        let h = self.cfg.hidden_dim;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Mat::zeros((batch.rows(), h));
        let mut probs = Vec::with_capacity(batch.len() * self.cfg.heads);
        for (k, (layout, mask)) in batch.seqs.iter().enumerate() {
            let (s0, n) = (batch.offsets[k], layout.len());
            for hd in 0..self.cfg.heads {
                let c0 = hd * dh;
                let q = qkv.slice(s![s0..s0 + n, c0..c0 + dh]);
                let kk = qkv.slice(s![s0..s0 + n, h + c0..h + c0 + dh]);
                let v = qkv.slice(s![s0..s0 + n, 2 * h + c0..2 * h + c0 + dh]);
                let mut p = q.dot(&kk.t());
                for i in 0..n {
                    masked_softmax_row(
                        p.row_mut(i).as_slice_mut().expect("contiguous"),
                        mask.row(i),
                        scale,
                    );
                }
                ctx.slice_mut(s![s0..s0 + n, c0..c0 + dh])
                    .assign(&p.dot(&v));
                probs.push(p);
            }
        }
        (ctx, probs)
    }

    fn attention_backward(&self, qkv: &Mat, probs: &[Mat], dctx: &Mat, batch: &Batch) -> Mat {
        let h = self.cfg.hidden_dim;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dqkv = Mat::zeros(qkv.raw_dim());
        for (k, (layout, _)) in batch.seqs.iter().enumerate() {
            let (s0, n) = (batch.offsets[k], layout.len());
            for hd in 0..self.cfg.heads {
                let p = &probs[k * self.cfg.heads + hd];
                let c0 = hd * dh;
                let q = qkv.slice(s![s0..s0 + n, c0..c0 + dh]);
                let kk = qkv.slice(s![s0..s0 + n, h + c0..h + c0 + dh]);
                let v = qkv.slice(s![s0..s0 + n, 2 * h + c0..2 * h + c0 + dh]);
                let dout = dctx.slice(s![s0..s0 + n, c0..c0 + dh]);
                let dp = dout.dot(&v.t());
                let dv = p.t().dot(&dout);
                let mut ds = p * &dp;
                for (i, mut row) in ds.rows_mut().into_iter().enumerate() {
                    let dot: f64 = row.sum();
                    for (j, x) in row.iter_mut().enumerate() {
                        *x = (*x - p[(i, j)] * dot) * scale;
                    }
                }
                let dq = ds.dot(&kk);
                let dk = ds.t().dot(&q);
                dqkv.slice_mut(s![s0..s0 + n, c0..c0 + dh]).assign(&dq);
                dqkv.slice_mut(s![s0..s0 + n, h + c0..h + c0 + dh])
                    .assign(&dk);
                dqkv.slice_mut(s![s0..s0 + n, 2 * h + c0..2 * h + c0 + dh])
                    .assign(&dv);
            }
        }
        dqkv
    }

    /// Runs the block stack over embedded rows.
    pub fn encode(&self, batch: &Batch, mut x: Mat) -> Result<(Mat, Cache)> {
        if x.nrows() != batch.rows() {
            return Err(Error::DimMismatch {
                expected: batch.rows(),
                got: x.nrows(),
            });
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (layer, b) in self.blocks.iter().enumerate() {
            let (a, ln1) = b.ln1.forward(&x);
            let qkv = b.qkv.forward(&a);
            let (ctx, probs) = self.attention(&qkv, batch);
            let h = &x + &b.out.forward(&ctx);
            let (c, ln2) = b.ln2.forward(&h);
            let pre = b.ff1.forward(&c);
            let act = pre.mapv(gelu);
            x = &h + &b.ff2.forward(&act);
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { layer });
            }
            caches.push(BlockCache {
                ln1,
                a,
                qkv,
                probs,
                ctx,
                ln2,
                c,
                pre,
                act,
            });
        }
        let (y, ln_f) = self.ln_f.forward(&x);
        Ok((
            y,
            Cache {
                blocks: caches,
                ln_f,
            },
        ))
    }

    pub fn encode_backward(
        &self,
        batch: &Batch,
        cache: &Cache,
        dy: &Mat,
        g: &mut Transformer,
    ) -> Mat {
        let mut dx = self.ln_f.backward(&cache.ln_f, dy, &mut g.ln_f);
        for (l, b) in self.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[l];
            let gb = &mut g.blocks[l];
            // x' = h + ff2(gelu(ff1(ln2(h))))
            let dact = b.ff2.backward(&bc.act, &dx, &mut gb.ff2);
            let dpre = &dact * &bc.pre.mapv(gelu_grad);
            let dc = b.ff1.backward(&bc.c, &dpre, &mut gb.ff1);
            let dh = &dx + &b.ln2.backward(&bc.ln2, &dc, &mut gb.ln2);
            // h = x + out(attn(qkv(ln1(x))))
            let dctx = b.out.backward(&bc.ctx, &dh, &mut gb.out);
            let dqkv = self.attention_backward(&bc.qkv, &bc.probs, &dctx, batch);
            let da = b.qkv.backward(&bc.a, &dqkv, &mut gb.qkv);
            dx = &dh + &b.ln1.backward(&bc.ln1, &da, &mut gb.ln1);
        }
        dx
    }

    /// Embedding followed by the block stack.
    pub fn forward(&self, batch: &Batch, z: Option<&Mat>) -> Result<(Mat, Cache)> {
        let x = self.embed(batch, z)?;
        self.encode(batch, x)
    }

    /// Full backward pass; returns the gradient w.r.t. `z` when `[z]` slots exist.
    pub fn backward(
        &self,
        batch: &Batch,
        cache: &Cache,
        dy: &Mat,
        z: Option<&Mat>,
        g: &mut Transformer,
    ) -> Option<Mat> {
        let dx = self.encode_backward(batch, cache, dy, g);
        self.embed_backward(batch, &dx, z, g)
    }

    /// Vocabulary logits for hidden rows.
    pub fn lm_logits(&self, hidden: &Mat) -> Mat {
        match &self.head_w {
            Some(w) => hidden.dot(w) + &self.head_b,
            None => hidden.dot(&self.tok_emb.t()) + &self.head_b,
        }
    }

    pub fn lm_backward(&self, hidden: &Mat, dlogits: &Mat, g: &mut Transformer) -> Mat {
        g.head_b += &dlogits.sum_axis(Axis(0)).insert_axis(Axis(0));
        match &self.head_w {
            Some(w) => {
                matmul_acc(
                    &hidden.t(),
                    &dlogits.view(),
                    g.head_w.as_mut().expect("same structure"),
                );
                dlogits.dot(&w.t())
            }
            None => {
                matmul_acc(&dlogits.t(), &hidden.view(), &mut g.tok_emb);
                dlogits.dot(&self.tok_emb)
            }
        }
    }

    /// Runs a prefix through the stack and keeps its keys and values.
    pub fn prefill(
        &self,
        layout: &TokenLayout,
        mask: &AttentionMask,
        z: Option<&Mat>,
    ) -> Result<(KvCache, Mat)> {
        let batch = Batch::single(layout, mask)?;
        let (y, cache) = self.forward(&batch, z)?;
        let h = self.cfg.hidden_dim;
        let keys = cache
            .blocks
            .iter()
            .map(|b| b.qkv.slice(s![.., h..2 * h]).to_owned())
            .collect();
        let values = cache
            .blocks
            .iter()
            .map(|b| b.qkv.slice(s![.., 2 * h..]).to_owned())
            .collect();
        Ok((KvCache { keys, values }, y))
    }

    /// Appends one token to a prefilled sequence and returns its top-layer row.
    ///
    /// `mask_row` is the new token's attention row over the cached tokens and
    /// itself. Valid whenever no earlier token attends to later ones.
    pub fn step(
        &self,
        kv: &mut KvCache,
        token: &LayoutToken,
        mask_row: &[bool],
    ) -> Result<Array1<f64>> {
        self.check_token(token)?;
        if token.role == Role::Z {
            return Err(Error::Layout("[z] cannot be appended incrementally".into()));
        }
        if mask_row.len() != kv.len() + 1 {
            return Err(Error::DimMismatch {
                expected: kv.len() + 1,
                got: mask_row.len(),
            });
        }
        let h = self.cfg.hidden_dim;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = self.embed_token(token).insert_axis(Axis(0));
        for (l, b) in self.blocks.iter().enumerate() {
            let (a, _) = b.ln1.forward(&x);
            let qkv = b.qkv.forward(&a);
            kv.keys[l]
                .push_row(qkv.slice(s![0, h..2 * h]))
                .expect("row width");
            kv.values[l]
                .push_row(qkv.slice(s![0, 2 * h..]))
                .expect("row width");
            let mut ctx = Mat::zeros((1, h));
            for hd in 0..self.cfg.heads {
                let c0 = hd * dh;
                let q = qkv.slice(s![0, c0..c0 + dh]);
                let keys = kv.keys[l].slice(s![.., c0..c0 + dh]);
                let scores: Array1<f64> = keys.dot(&q);
                let mut scores = scores.to_vec();
                masked_softmax_row(&mut scores, mask_row, scale);
                let vals = kv.values[l].slice(s![.., c0..c0 + dh]);
                let out = Array1::from(scores).dot(&vals);
                ctx.slice_mut(s![0, c0..c0 + dh]).assign(&out);
            }
            let hres = &x + &b.out.forward(&ctx);
            let (c, _) = b.ln2.forward(&hres);
            let act = b.ff1.forward(&c).mapv(gelu);
            x = &hres + &b.ff2.forward(&act);
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { layer: l });
            }
        }
        let (y, _) = self.ln_f.forward(&x);
        Ok(y.row(0).to_owned())
    }

    /// Token embedding row, used by callers that need raw embeddings.
    pub fn token_embedding(&self, id: TokenId) -> Array1<f64> {
        self.tok_emb.row(id as usize).to_owned()
    }
}

/// In-place softmax of `scale · row` restricted to allowed entries.
/// Disallowed entries become exactly zero; a row with nothing allowed is all zero.
fn masked_softmax_row(row: &mut [f64], allowed: &[bool], scale: f64) {
    let mut max = f64::NEG_INFINITY;
    for (v, &ok) in row.iter().zip(allowed) {
        if ok {
            max = max.max(v * scale);
        }
    }
    if max == f64::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for (v, &ok) in row.iter_mut().zip(allowed) {
        if ok {
            *v = (*v * scale - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
