//! The generator family assembled from the encoder, decoder, latent heads
//! and emotion predictor, with its training objective and gradients.

use ndarray::{Array1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Emotion, EncodedPair, TokenId};
use crate::error::{Error, Result};
use crate::latent::{
    kl_batch, sample_backward, sample_batch, standard_normal, EmotionPredNet, GaussianBatch,
    GaussianNet,
};
use crate::masks::{build_variant_layouts, AttentionMask, Mode, Role, TokenLayout, VariantLayouts};
use crate::nn::{cross_entropy_rows, join, Mat, Parameters};
use crate::transformer::{
    gather_rows, scatter_add_rows, Batch, KvCache, Transformer, TransformerConfig,
};
use crate::variant::VariantId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: VariantId,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub latent_dim: usize,
    pub max_positions: usize,
    pub init_std: f64,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    pub fn new(variant: VariantId) -> Self {
        Self {
            variant,
            hidden_dim: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 256,
            latent_dim: 64,
            max_positions: 64,
            init_std: 0.02,
            tie_embeddings: true,
        }
    }

    pub fn transformer(&self, vocab_size: usize, latent: bool) -> TransformerConfig {
        TransformerConfig {
            layers: self.layers,
            heads: self.heads,
            hidden_dim: self.hidden_dim,
            ffn_dim: self.ffn_dim,
            max_positions: self.max_positions,
            vocab_size,
            latent_dim: latent.then_some(self.latent_dim),
            tie_embeddings: self.tie_embeddings,
            init_std: self.init_std,
        }
    }
}

/// Which side of the objective a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Generative side: encoder, prior network and decoder.
    Theta,
    /// Inference side: posterior network and emotion predictor.
    Phi,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("posterior.") || name.starts_with("emotion_pred.") {
        ParamGroup::Phi
    } else {
        ParamGroup::Theta
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Option<Transformer>,
    pub decoder: Transformer,
    pub posterior: Option<GaussianNet>,
    pub prior: Option<GaussianNet>,
    pub emotion_pred: Option<EmotionPredNet>,
}

impl Parameters for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Mat)) {
        if let Some(e) = &self.encoder {
            e.visit(&join(prefix, "encoder"), f);
        }
        self.decoder.visit(&join(prefix, "decoder"), f);
        if let Some(p) = &self.posterior {
            p.visit(&join(prefix, "posterior"), f);
        }
        if let Some(p) = &self.prior {
            p.visit(&join(prefix, "prior"), f);
        }
        if let Some(e) = &self.emotion_pred {
            e.visit(&join(prefix, "emotion_pred"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Mat)) {
        if let Some(e) = &mut self.encoder {
            e.visit_mut(&join(prefix, "encoder"), f);
        }
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        if let Some(p) = &mut self.posterior {
            p.visit_mut(&join(prefix, "posterior"), f);
        }
        if let Some(p) = &mut self.prior {
            p.visit_mut(&join(prefix, "prior"), f);
        }
        if let Some(e) = &mut self.emotion_pred {
            e.visit_mut(&join(prefix, "emotion_pred"), f);
        }
    }
}

/// Objective components for one batch.
///
/// `nll` is normalized per target token (response tokens plus `[EOS]`); the
/// other terms are averaged per example.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub kl: f64,
    pub emo_post: f64,
    pub emo_prior: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.nll, self.kl, self.emo_post, self.emo_prior]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Coefficients applied to each term when forming gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub nll: f64,
    pub kl: f64,
    pub emo: f64,
    /// Keep the emotion term on prior samples from updating the prior side.
    pub stop_grad_prior: bool,
}

impl LossWeights {
    pub const FULL: LossWeights = LossWeights {
        nll: 1.0,
        kl: 1.0,
        emo: 1.0,
        stop_grad_prior: false,
    };
}

/// Standard-normal draws for one batch: posterior noise, then prior noise.
#[derive(Debug, Clone)]
pub struct LatentNoise {
    pub posterior: Mat,
    pub prior: Mat,
}

impl LatentNoise {
    pub fn draw<R: Rng>(batch: usize, latent_dim: usize, rng: &mut R) -> Self {
        let posterior = standard_normal(batch, latent_dim, rng);
        let prior = standard_normal(batch, latent_dim, rng);
        Self { posterior, prior }
    }
}

struct Prepared {
    layouts: Vec<VariantLayouts>,
    /// Per example: (index of predicting token in decoder layout, target id).
    targets: Vec<Vec<(usize, TokenId)>>,
}

fn prepare(variant: VariantId, batch: &[EncodedPair]) -> Result<Prepared> {
    let mut layouts = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for ex in batch {
        let l = build_variant_layouts(
            variant,
            &ex.post,
            Some(&ex.response),
            ex.emotion,
            Mode::Train,
        )?;
        let dec = &l.decoder.0;
        let sos = dec
            .find(Role::Sos)
            .ok_or_else(|| Error::Layout("decoder layout lacks [SOS]".into()))?;
        let t: Vec<(usize, TokenId)> = (sos..dec.len() - 1)
            .map(|i| (i, dec.tokens()[i + 1].id))
            .collect();
        layouts.push(l);
        targets.push(t);
    }
    Ok(Prepared { layouts, targets })
}

/// Decoder state after the fixed prefix (`[z]`/`[Emotion]`, post, `[SOS]`).
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub layout: TokenLayout,
    pub mask: AttentionMask,
    pub kv: KvCache,
    /// Top-layer hidden row of the last token.
    pub last: Array1<f64>,
}

impl Model {
    pub fn new<R: Rng>(cfg: ModelConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        let variant = cfg.variant;
        let variational = variant.is_variational();
        if cfg.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        let encoder = if variational {
            Some(Transformer::new(cfg.transformer(vocab_size, false), rng)?)
        } else {
            None
        };
        let decoder = Transformer::new(cfg.transformer(vocab_size, variational), rng)?;
        let (posterior, prior) = if variational {
            (
                Some(GaussianNet::new(
                    cfg.hidden_dim,
                    cfg.latent_dim,
                    cfg.init_std,
                    rng,
                )),
                Some(GaussianNet::new(
                    cfg.hidden_dim,
                    cfg.latent_dim,
                    cfg.init_std,
                    rng,
                )),
            )
        } else {
            (None, None)
        };
        let emotion_pred = variant.has_emotion_pred().then(|| {
            EmotionPredNet::new(cfg.latent_dim, (1.0 / cfg.latent_dim as f64).sqrt(), rng)
        });
        Ok(Self {
            cfg,
            encoder,
            decoder,
            posterior,
            prior,
            emotion_pred,
        })
    }

    pub fn variant(&self) -> VariantId {
        self.cfg.variant
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.vocab_size()
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    /// Named parameter shapes with their objective side.
    pub fn parameter_manifest(&self) -> Vec<(String, [usize; 2], ParamGroup)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, m| {
            out.push((name.to_string(), [m.nrows(), m.ncols()], param_group(name)))
        });
        out
    }

    fn parts(&self) -> Result<(&Transformer, &GaussianNet, &GaussianNet)> {
        match (&self.encoder, &self.posterior, &self.prior) {
            (Some(e), Some(q), Some(p)) => Ok((e, q, p)),
            _ => Err(Error::VariantMismatch {
                variant: self.variant().to_string(),
                feature: "latent variables".into(),
            }),
        }
    }

    /// Loss terms for a batch; when `grads` is given, accumulates the
    /// gradient of `weights.nll·nll + weights.kl·kl + weights.emo·(emo_post + emo_prior)`.
    pub fn forward_train(
        &self,
        batch: &[EncodedPair],
        noise: &LatentNoise,
        weights: LossWeights,
        mut grads: Option<&mut Model>,
    ) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let variant = self.variant();
        let b = batch.len();
        let prep = prepare(variant, batch)?;
        let labels: Vec<Emotion> = batch.iter().map(|e| e.emotion).collect();
        let mut out = LossBreakdown::default();

        // Encoder and latent heads.
        struct Latent<'a> {
            enc_batch: Batch<'a>,
            enc_cache: crate::transformer::Cache,
            post_idx: Vec<usize>,
            prior_idx: Vec<usize>,
            post_rows: Mat,
            prior_rows: Mat,
            q: GaussianBatch,
            p: GaussianBatch,
            z_q: Mat,
        }
        let latent = if variant.is_variational() {
            let (encoder, qnet, pnet) = self.parts()?;
            if noise.posterior.dim() != (b, self.latent_dim())
                || noise.prior.dim() != (b, self.latent_dim())
            {
                return Err(Error::DimMismatch {
                    expected: self.latent_dim(),
                    got: noise.posterior.ncols(),
                });
            }
            let seqs = prep
                .layouts
                .iter()
                .map(|l| {
                    let (layout, mask) = l.encoder.as_ref().expect("variational layout");
                    (layout, mask)
                })
                .collect();
            let enc_batch = Batch::new(seqs)?;
            let (h, enc_cache) = encoder.forward(&enc_batch, None)?;
            let find = |role: Role| -> Result<Vec<usize>> {
                (0..b)
                    .map(|k| {
                        enc_batch
                            .layout(k)
                            .find(role)
                            .map(|i| enc_batch.row(k, i))
                            .ok_or_else(|| {
                                Error::Layout(format!("encoder layout lacks {}", role.tag()))
                            })
                    })
                    .collect()
            };
            let post_idx = find(Role::EncPosterior)?;
            let prior_idx = find(Role::EncPrior)?;
            let post_rows = gather_rows(&h, &post_idx);
            let prior_rows = gather_rows(&h, &prior_idx);
            let q = qnet.forward(&post_rows)?;
            let p = pnet.forward(&prior_rows)?;
            let z_q = sample_batch(&q, &noise.posterior)?;
            Some(Latent {
                enc_batch,
                enc_cache,
                post_idx,
                prior_idx,
                post_rows,
                prior_rows,
                q,
                p,
                z_q,
            })
        } else {
            None
        };

        // Decoder reconstruction.
        let dec_batch = Batch::new(
            prep.layouts
                .iter()
                .map(|l| (&l.decoder.0, &l.decoder.1))
                .collect(),
        )?;
        let z = latent.as_ref().map(|l| &l.z_q);
        let (y, dec_cache) = self.decoder.forward(&dec_batch, z)?;
        let mut pred_rows = Vec::new();
        let mut target_ids = Vec::new();
        for (k, t) in prep.targets.iter().enumerate() {
            for &(i, id) in t {
                pred_rows.push(dec_batch.row(k, i));
                target_ids.push(id as usize);
            }
        }
        let tokens = pred_rows.len() as f64;
        let hidden = gather_rows(&y, &pred_rows);
        let logits = self.decoder.lm_logits(&hidden);
        let (nll_sum, mut dlogits) = cross_entropy_rows(&logits, &target_ids);
        out.nll = nll_sum / tokens;

        let Some(lat) = latent else {
            if let Some(g) = grads {
                dlogits *= weights.nll / tokens;
                let dh = self.decoder.lm_backward(&hidden, &dlogits, &mut g.decoder);
                let mut dy = Mat::zeros(y.raw_dim());
                scatter_add_rows(&mut dy, &pred_rows, &dh);
                self.decoder
                    .backward(&dec_batch, &dec_cache, &dy, None, &mut g.decoder);
            }
            return Ok(out);
        };

        let inv_b = 1.0 / b as f64;
        let kl_coeff = vec![weights.kl * inv_b; b];
        let (kl_values, kl_grad) = kl_batch(&lat.q, &lat.p, &kl_coeff)?;
        out.kl = kl_values.iter().sum::<f64>() * inv_b;

        let emo_coeff = vec![weights.emo * inv_b; b];
        let mut dz_q = Mat::zeros(lat.z_q.raw_dim());
        let mut dz_p = None;
        let z_p = if variant.has_emo_prior() {
            Some(sample_batch(&lat.p, &noise.prior)?)
        } else {
            None
        };
        if let Some(pred) = &self.emotion_pred {
            let mut scratch = pred.zeros_like();
            let gpred = match grads.as_deref_mut() {
                Some(g) => g.emotion_pred.as_mut().expect("same structure"),
                None => &mut scratch,
            };
            if variant.has_emo_post() {
                let (v, dz) = pred.nll_backward(&lat.z_q, &labels, &emo_coeff, gpred);
                out.emo_post = v.iter().sum::<f64>() * inv_b;
                dz_q += &dz;
            }
            if let Some(z_p) = &z_p {
                let (v, dz) = pred.nll_backward(z_p, &labels, &emo_coeff, gpred);
                out.emo_prior = v.iter().sum::<f64>() * inv_b;
                if !weights.stop_grad_prior {
                    dz_p = Some(dz);
                }
            }
        }

        let Some(g) = grads else {
            return Ok(out);
        };
        let (encoder, qnet, pnet) = self.parts()?;

        if weights.nll != 0.0 {
            dlogits *= weights.nll / tokens;
            let dh = self.decoder.lm_backward(&hidden, &dlogits, &mut g.decoder);
            let mut dy = Mat::zeros(y.raw_dim());
            scatter_add_rows(&mut dy, &pred_rows, &dh);
            let dz_dec = self
                .decoder
                .backward(&dec_batch, &dec_cache, &dy, Some(&lat.z_q), &mut g.decoder)
                .expect("decoder consumes z");
            dz_q += &dz_dec;
        }

        let (mut dqm, mut dqlv) = sample_backward(&lat.q, &noise.posterior, &dz_q);
        let (mut dpm, mut dplv) = match &dz_p {
            Some(dz) => sample_backward(&lat.p, &noise.prior, dz),
            None => (
                Mat::zeros(lat.p.mean.raw_dim()),
                Mat::zeros(lat.p.mean.raw_dim()),
            ),
        };
        if weights.kl != 0.0 {
            dqm += &kl_grad.q_mean;
            dqlv += &kl_grad.q_log_var;
            dpm += &kl_grad.p_mean;
            dplv += &kl_grad.p_log_var;
        }
        let d_post = qnet.backward(
            &lat.post_rows,
            &lat.q,
            &dqm,
            &dqlv,
            g.posterior.as_mut().expect("same structure"),
        );
        let d_prior = pnet.backward(
            &lat.prior_rows,
            &lat.p,
            &dpm,
            &dplv,
            g.prior.as_mut().expect("same structure"),
        );
        let mut dh_enc = Mat::zeros((lat.enc_batch.rows(), self.cfg.hidden_dim));
        scatter_add_rows(&mut dh_enc, &lat.post_idx, &d_post);
        scatter_add_rows(&mut dh_enc, &lat.prior_idx, &d_prior);
        encoder.backward(
            &lat.enc_batch,
            &lat.enc_cache,
            &dh_enc,
            None,
            g.encoder.as_mut().expect("same structure"),
        );
        Ok(out)
    }

    /// Prior distributions `p(z | post, emotion)` from test-mode encoder inputs.
    pub fn prior_distribution(&self, post: &[TokenId], emotion: Emotion) -> Result<GaussianBatch> {
        let (encoder, _, pnet) = self.parts()?;
        let l = build_variant_layouts(self.variant(), post, None, emotion, Mode::Test)?;
        let (layout, mask) = l.encoder.as_ref().expect("variational layout");
        let (h, _) = encoder.forward(&Batch::single(layout, mask)?, None)?;
        let idx = layout.find(Role::EncPrior).expect("prior row");
        pnet.forward(&gather_rows(&h, &[idx]))
    }

    /// Posterior distributions `q(z | post, response[, emotion])` for many pairs.
    pub fn posterior_distribution(&self, pairs: &[EncodedPair]) -> Result<GaussianBatch> {
        let (encoder, qnet, _) = self.parts()?;
        let layouts = pairs
            .iter()
            .map(|ex| {
                build_variant_layouts(
                    self.variant(),
                    &ex.post,
                    Some(&ex.response),
                    ex.emotion,
                    Mode::Train,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = Batch::new(
            layouts
                .iter()
                .map(|l| {
                    let (a, b) = l.encoder.as_ref().expect("variational layout");
                    (a, b)
                })
                .collect(),
        )?;
        let (h, _) = encoder.forward(&batch, None)?;
        let idx: Vec<usize> = (0..pairs.len())
            .map(|k| {
                batch.row(
                    k,
                    batch
                        .layout(k)
                        .find(Role::EncPosterior)
                        .expect("posterior row"),
                )
            })
            .collect();
        qnet.forward(&gather_rows(&h, &idx))
    }

    /// Runs the decoder prefix for generation. `z` is required exactly when the
    /// variant is variational.
    pub fn decoder_prefix(
        &self,
        post: &[TokenId],
        emotion: Emotion,
        z: Option<&[f64]>,
    ) -> Result<DecoderState> {
        let l = build_variant_layouts(self.variant(), post, None, emotion, Mode::Test)?;
        let (layout, mask) = l.decoder;
        let zmat = match (self.variant().is_variational(), z) {
            (true, Some(z)) => {
                Some(Mat::from_shape_vec((1, z.len()), z.to_vec()).map_err(|_| {
                    Error::DimMismatch {
                        expected: self.latent_dim(),
                        got: z.len(),
                    }
                })?)
            }
            (true, None) => {
                return Err(Error::Layout(
                    "a latent vector is required for this variant".into(),
                ));
            }
            (false, Some(_)) => {
                return Err(Error::VariantMismatch {
                    variant: self.variant().to_string(),
                    feature: "latent vectors".into(),
                });
            }
            (false, None) => None,
        };
        let (kv, y) = self.decoder.prefill(&layout, &mask, zmat.as_ref())?;
        let last = y.row(layout.len() - 1).to_owned();
        Ok(DecoderState {
            layout,
            mask,
            kv,
            last,
        })
    }

    /// Log-probabilities of the next token given a decoder state.
    pub fn next_log_probs(&self, state: &DecoderState) -> Vec<f64> {
        let logits = self
            .decoder
            .lm_logits(&state.last.view().insert_axis(Axis(0)).to_owned());
        crate::nn::log_softmax(&logits.row(0).to_vec())
    }

    /// Appends `id` to a decoder state.
    pub fn advance(&self, state: &DecoderState, id: TokenId) -> Result<DecoderState> {
        let (layout, mask) = crate::masks::extend_decoder(&state.layout, &state.mask, id)?;
        let mut kv = state.kv.clone();
        let tok = *layout.last().expect("non-empty");
        let last = self
            .decoder
            .step(&mut kv, &tok, mask.row(layout.len() - 1))?;
        Ok(DecoderState {
            layout,
            mask,
            kv,
            last,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EOS, NUM_SPECIALS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const VOCAB: usize = NUM_SPECIALS + 12;

    fn tiny(variant: VariantId) -> ModelConfig {
        ModelConfig {
            hidden_dim: 16,
            ffn_dim: 32,
            heads: 2,
            latent_dim: 6,
            init_std: 0.2,
            ..ModelConfig::new(variant)
        }
    }

    fn examples() -> Vec<EncodedPair> {
        let s = NUM_SPECIALS as TokenId;
        vec![
            EncodedPair {
                post: vec![s, s + 1],
                response: vec![s + 2, s + 3, s + 4],
                emotion: Emotion::Anger,
            },
            EncodedPair {
                post: vec![s + 5],
                response: vec![s + 6],
                emotion: Emotion::Liking,
            },
            EncodedPair {
                post: vec![s + 7, s + 8, s + 9],
                response: vec![s + 10, s + 11],
                emotion: Emotion::Fear,
            },
        ]
    }

    #[test]
    fn every_variant_produces_a_breakdown() {
        for v in VariantId::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let m = Model::new(tiny(v), VOCAB, &mut rng).unwrap();
            let noise = LatentNoise::draw(3, 6, &mut rng);
            let out = m
                .forward_train(&examples(), &noise, LossWeights::FULL, None)
                .unwrap();
            assert!(out.is_finite() && out.nll > 0.0 && out.kl >= -1e-9);
            assert_eq!(out.emo_post > 0.0, v.has_emo_post(), "{v}");
            assert_eq!(out.emo_prior > 0.0, v.has_emo_prior(), "{v}");
            if !v.is_variational() {
                assert_eq!(out.kl, 0.0);
            }
        }
    }

    #[test]
    fn ablation_without_emotion_terms_keeps_sgvb_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let full = Model::new(tiny(VariantId::EmoCvae), VOCAB, &mut rng).unwrap();
        let mut m2 = full.clone();
        m2.cfg.variant = VariantId::EmoCvaeM2;
        m2.emotion_pred = None;
        let noise = LatentNoise::draw(3, 6, &mut rng);
        let a = full
            .forward_train(&examples(), &noise, LossWeights::FULL, None)
            .unwrap();
        let b = m2
            .forward_train(&examples(), &noise, LossWeights::FULL, None)
            .unwrap();
        assert_eq!((b.emo_post, b.emo_prior), (0.0, 0.0));
        assert_eq!((a.nll, a.kl), (b.nll, b.kl));
    }

    #[test]
    fn uniform_decoder_gives_log_vocab_nll() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = Model::new(tiny(VariantId::Seq2Seq), VOCAB, &mut rng).unwrap();
        m.decoder.tok_emb.fill(0.0);
        let noise = LatentNoise::draw(1, 6, &mut rng);
        let out = m
            .forward_train(&examples()[..1], &noise, LossWeights::FULL, None)
            .unwrap();
        assert!((out.nll - (VOCAB as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_emotion_net_gives_log_eight() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = Model::new(tiny(VariantId::EmoCvae), VOCAB, &mut rng).unwrap();
        m.emotion_pred = Some(EmotionPredNet::zeros(6));
        let noise = LatentNoise::draw(3, 6, &mut rng);
        let out = m
            .forward_train(&examples(), &noise, LossWeights::FULL, None)
            .unwrap();
        assert!((out.emo_post - 8f64.ln()).abs() < 1e-12);
        assert!((out.emo_prior - 8f64.ln()).abs() < 1e-12);
    }

    fn total(m: &Model, noise: &LatentNoise, w: LossWeights) -> f64 {
        let o = m.forward_train(&examples(), noise, w, None).unwrap();
        w.nll * o.nll + w.kl * o.kl + w.emo * (o.emo_post + o.emo_prior)
    }

    #[test]
    fn gradients_match_finite_differences_for_every_variant() {
        let weights = LossWeights {
            nll: 0.9,
            kl: 0.7,
            emo: 1.3,
            stop_grad_prior: false,
        };
        for v in VariantId::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut m = Model::new(tiny(v), VOCAB, &mut rng).unwrap();
            let noise = LatentNoise::draw(3, 6, &mut rng);
            let mut g = m.zeros_like();
            m.forward_train(&examples(), &noise, weights, Some(&mut g))
                .unwrap();
            let analytic = g.flatten();
            let base = m.flatten();
            let eps = 1e-5;
            let stride = (base.len() / 61).max(1);
            for k in (0..base.len()).step_by(stride) {
                let mut p = base.clone();
                p[k] += eps;
                m.assign_flat(&p);
                let up = total(&m, &noise, weights);
                p[k] -= 2.0 * eps;
                m.assign_flat(&p);
                let down = total(&m, &noise, weights);
                let numeric = (up - down) / (2.0 * eps);
                let err =
                    (numeric - analytic[k]).abs() / (numeric.abs() + analytic[k].abs()).max(1e-4);
                assert!(
                    err < 1e-4,
                    "{v} coord {k}: numeric {numeric} analytic {}",
                    analytic[k]
                );
            }
            m.assign_flat(&base);
        }
    }

    #[test]
    fn stop_grad_prior_leaves_prior_untouched_by_emotion_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = Model::new(tiny(VariantId::EmoCvae), VOCAB, &mut rng).unwrap();
        let noise = LatentNoise::draw(3, 6, &mut rng);
        let mut g = m.zeros_like();
        let w = LossWeights {
            nll: 1.0,
            kl: 0.0,
            emo: 1.0,
            stop_grad_prior: true,
        };
        m.forward_train(&examples(), &noise, w, Some(&mut g))
            .unwrap();
        assert_eq!(g.prior.unwrap().sq_norm(), 0.0);
        let mut g = m.zeros_like();
        let w = LossWeights {
            stop_grad_prior: false,
            ..w
        };
        m.forward_train(&examples(), &noise, w, Some(&mut g))
            .unwrap();
        assert!(g.prior.unwrap().sq_norm() > 0.0);
    }

    #[test]
    fn incremental_decoding_matches_training_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = Model::new(tiny(VariantId::Cvae), VOCAB, &mut rng).unwrap();
        let ex = &examples()[0];
        let z = vec![0.3, -0.2, 0.1, 0.0, 0.5, -1.0];
        let mut state = m.decoder_prefix(&ex.post, ex.emotion, Some(&z)).unwrap();
        let mut incremental = vec![m.next_log_probs(&state)];
        for &id in ex.response.iter().chain([EOS].iter()) {
            state = m.advance(&state, id).unwrap();
            incremental.push(m.next_log_probs(&state));
        }
        let l = build_variant_layouts(
            VariantId::Cvae,
            &ex.post,
            Some(&ex.response),
            ex.emotion,
            Mode::Train,
        )
        .unwrap();
        let (layout, mask) = &l.decoder;
        let zm = Mat::from_shape_vec((1, 6), z.clone()).unwrap();
        let (y, _) = m
            .decoder
            .forward(&Batch::single(layout, mask).unwrap(), Some(&zm))
            .unwrap();
        let sos = layout.find(Role::Sos).unwrap();
        for (k, lp) in incremental.iter().enumerate() {
            let logits = m
                .decoder
                .lm_logits(&y.row(sos + k).insert_axis(Axis(0)).to_owned());
            let full = crate::nn::log_softmax(&logits.row(0).to_vec());
            for (a, b) in lp.iter().zip(&full) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn parameter_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = Model::new(tiny(VariantId::EmoCvae), VOCAB, &mut rng).unwrap();
        let manifest = m.parameter_manifest();
        assert!(manifest
            .iter()
            .any(|(n, _, g)| n.starts_with("posterior.") && *g == ParamGroup::Phi));
        assert!(manifest
            .iter()
            .any(|(n, _, g)| n.starts_with("prior.") && *g == ParamGroup::Theta));
        assert!(manifest
            .iter()
            .any(|(n, _, g)| n.starts_with("emotion_pred.") && *g == ParamGroup::Phi));
        let s2s = Model::new(tiny(VariantId::Seq2Seq), VOCAB, &mut rng).unwrap();
        assert!(s2s
            .parameter_manifest()
            .iter()
            .all(|(n, _, _)| n.starts_with("decoder.")));
        assert!(s2s.prior_distribution(&[20], Emotion::Anger).is_err());
    }
}
