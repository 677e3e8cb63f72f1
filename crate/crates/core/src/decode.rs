//! Beam search and multi-candidate generation.
//!
//! Hypotheses are ranked by length-normalized log-probability, where the
//! length counts every generated token including `[EOS]`. Generation only
//! emits content tokens and `[EOS]`.

use std::cmp::Ordering;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Emotion, TokenId, Vocabulary, EOS, NUM_SPECIALS};
use crate::error::{Error, Result};
use crate::latent::{sample, LatentSource};
use crate::masks::{build_variant_layouts, Mode, Role};
use crate::model::{DecoderState, Model};
use crate::nn::{log_softmax, Mat};
use crate::transformer::Batch;

pub const DEFAULT_BEAM_SIZE: usize = 5;
pub const DEFAULT_CANDIDATES: usize = 5;
pub const DEFAULT_MAX_DECODE_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Maximum generated tokens, `[EOS]` included.
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: DEFAULT_BEAM_SIZE,
            max_len: DEFAULT_MAX_DECODE_LEN,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_len == 0 {
            return Err(Error::Config(
                "beam_size and max_len must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Where a candidate came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    /// The `index`-th latent sample, kept so the candidate can be re-scored.
    Latent {
        index: usize,
        z: Vec<f64>,
    },
    SeedWord(TokenId),
    /// Read back from a candidate file.
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationCandidate {
    pub post_id: usize,
    pub emotion: Emotion,
    /// Response tokens without `[SOS]`/`[EOS]`.
    pub tokens: Vec<TokenId>,
    /// Sum of per-token log-probabilities, `[EOS]` included when present.
    pub log_prob: f64,
    /// Whether the hypothesis ended with `[EOS]` rather than at the length limit.
    pub ended: bool,
    pub provenance: Provenance,
}

impl GenerationCandidate {
    pub fn generated_len(&self) -> usize {
        self.tokens.len() + usize::from(self.ended)
    }

    pub fn normalized_score(&self) -> f64 {
        normalized(self.log_prob, self.generated_len())
    }
}

pub fn normalized(log_prob: f64, len: usize) -> f64 {
    log_prob / len.max(1) as f64
}

/// Tokens the decoder may emit.
pub fn is_generatable(id: TokenId) -> bool {
    id == EOS || id as usize >= NUM_SPECIALS
}

/// A finished beam hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub ended: bool,
}

impl Hypothesis {
    pub fn score(&self) -> f64 {
        normalized(self.log_prob, self.tokens.len() + usize::from(self.ended))
    }
}

/// Descending by score, then by log-probability, then ascending tokens.
pub fn rank_hypotheses(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score()
        .total_cmp(&a.score())
        .then(b.log_prob.total_cmp(&a.log_prob))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

struct Live {
    tokens: Vec<TokenId>,
    log_prob: f64,
    state: DecoderState,
}

/// Beam search from a decoder state that has already generated `prefix`.
///
/// Each step keeps the best `beam_size` expansions; those ending in `[EOS]`
/// or reaching `max_len` are finished. Search stops once `beam_size`
/// hypotheses are finished or nothing is left alive. Returns all finished
/// hypotheses, best first.
pub fn beam_search_from(
    model: &Model,
    state: DecoderState,
    prefix: Vec<TokenId>,
    prefix_log_prob: f64,
    cfg: DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let mut finished: Vec<Hypothesis> = Vec::new();
    if prefix.len() >= cfg.max_len {
        return Ok(vec![Hypothesis {
            tokens: prefix,
            log_prob: prefix_log_prob,
            ended: false,
        }]);
    }
    let mut alive = vec![Live {
        tokens: prefix,
        log_prob: prefix_log_prob,
        state,
    }];
    while !alive.is_empty() && finished.len() < cfg.beam_size {
        let mut expansions: Vec<(usize, TokenId, Hypothesis)> = Vec::new();
        for (k, live) in alive.iter().enumerate() {
            let lp = model.next_log_probs(&live.state);
            for (id, &l) in lp.iter().enumerate() {
                let id = id as TokenId;
                if !is_generatable(id) {
                    continue;
                }
                let ended = id == EOS;
                let mut tokens = live.tokens.clone();
                if !ended {
                    tokens.push(id);
                }
                expansions.push((
                    k,
                    id,
                    Hypothesis {
                        tokens,
                        log_prob: live.log_prob + l,
                        ended,
                    },
                ));
            }
        }
        expansions.sort_by(|a, b| rank_hypotheses(&a.2, &b.2));
        expansions.truncate(cfg.beam_size);
        let mut next = Vec::new();
        for (k, id, hyp) in expansions {
            if hyp.ended || hyp.tokens.len() >= cfg.max_len {
                finished.push(hyp);
            } else {
                let state = model.advance(&alive[k].state, id)?;
                next.push(Live {
                    tokens: hyp.tokens,
                    log_prob: hyp.log_prob,
                    state,
                });
            }
        }
        alive = next;
    }
    finished.sort_by(rank_hypotheses);
    Ok(finished)
}

/// Best hypothesis for one decoding condition.
pub fn beam_search(
    model: &Model,
    post: &[TokenId],
    emotion: Emotion,
    z: Option<&[f64]>,
    cfg: DecodeConfig,
) -> Result<Hypothesis> {
    let state = model.decoder_prefix(post, emotion, z)?;
    beam_search_from(model, state, Vec::new(), 0.0, cfg)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Layout("beam search produced no hypothesis".into()))
}

/// `n` candidates for one `(post, emotion)` pair.
///
/// Variational variants decode one beam per prior sample; Seq2Seq fans out
/// over the `n` most likely first tokens and continues each by beam search.
pub fn generate_multi<R: Rng>(
    model: &Model,
    post_id: usize,
    post: &[TokenId],
    emotion: Emotion,
    n: usize,
    cfg: DecodeConfig,
    rng: &mut R,
) -> Result<Vec<GenerationCandidate>> {
    if n == 0 {
        return Err(Error::Config("n_candidates must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(n);
    if model.variant().is_variational() {
        let prior = model.prior_distribution(post, emotion)?.get(0);
        for index in 0..n {
            let noise: Vec<f64> = (0..model.latent_dim())
                .map(|_| rng.sample(rand_distr::StandardNormal))
                .collect();
            let z = sample(&prior, &noise, LatentSource::Prior)?.z.to_vec();
            let best = beam_search(model, post, emotion, Some(&z), cfg)?;
            out.push(GenerationCandidate {
                post_id,
                emotion,
                tokens: best.tokens,
                log_prob: best.log_prob,
                ended: best.ended,
                provenance: Provenance::Latent { index, z },
            });
        }
    } else {
        let state = model.decoder_prefix(post, emotion, None)?;
        let lp = model.next_log_probs(&state);
        let mut seeds: Vec<TokenId> = (NUM_SPECIALS as TokenId..lp.len() as TokenId).collect();
        seeds.sort_by(|a, b| lp[*b as usize].total_cmp(&lp[*a as usize]).then(a.cmp(b)));
        if seeds.len() < n {
            return Err(Error::Config(format!(
                "only {} seed words available",
                seeds.len()
            )));
        }
        for &seed in &seeds[..n] {
            let next = model.advance(&state, seed)?;
            let best = beam_search_from(model, next, vec![seed], lp[seed as usize], cfg)?
                .into_iter()
                .next()
                .ok_or_else(|| Error::Layout("beam search produced no hypothesis".into()))?;
            out.push(GenerationCandidate {
                post_id,
                emotion,
                tokens: best.tokens,
                log_prob: best.log_prob,
                ended: best.ended,
                provenance: Provenance::SeedWord(seed),
            });
        }
    }
    Ok(out)
}

/// Log-probability of a response under a full (non-incremental) forward pass.
pub fn sequence_log_prob(
    model: &Model,
    post: &[TokenId],
    emotion: Emotion,
    z: Option<&[f64]>,
    tokens: &[TokenId],
    ended: bool,
) -> Result<f64> {
    let l = build_variant_layouts(model.variant(), post, Some(tokens), emotion, Mode::Train)?;
    let (layout, mask) = &l.decoder;
    let zm = z.map(|z| Mat::from_shape_vec((1, z.len()), z.to_vec()).expect("row"));
    let (y, _) = model
        .decoder
        .forward(&Batch::single(layout, mask)?, zm.as_ref())?;
    let sos = layout.find(Role::Sos).expect("decoder layout has [SOS]");
    let count = tokens.len() + usize::from(ended);
    let rows: Vec<usize> = (sos..sos + count).collect();
    let logits = model
        .decoder
        .lm_logits(&crate::transformer::gather_rows(&y, &rows));
    let mut total = 0.0;
    for (k, row) in logits.rows().into_iter().enumerate() {
        let target = if k < tokens.len() { tokens[k] } else { EOS };
        total += log_softmax(&row.to_vec())[target as usize];
    }
    Ok(total)
}

pub fn write_candidates<W: Write>(
    cands: &[GenerationCandidate],
    vocab: &Vocabulary,
    mut w: W,
) -> Result<()> {
    let mut rank = std::collections::HashMap::new();
    for c in cands {
        let r = rank.entry((c.post_id, c.emotion)).or_insert(0usize);
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            c.post_id,
            c.emotion,
            r,
            c.log_prob,
            vocab.decode(&c.tokens).join(" ")
        )?;
        *r += 1;
    }
    Ok(())
}

pub fn read_candidates<R: BufRead>(r: R, vocab: &Vocabulary) -> Result<Vec<GenerationCandidate>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| Error::MalformedRecord {
            line: i + 1,
            reason: reason.to_string(),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 tab-separated fields"));
        }
        let post_id = f[0].parse().map_err(|_| bad("bad post id"))?;
        let emotion = f[1].parse()?;
        let _rank: usize = f[2].parse().map_err(|_| bad("bad rank"))?;
        let log_prob: f64 = f[3].parse().map_err(|_| bad("bad log_prob"))?;
        let words: Vec<String> = f[4].split_whitespace().map(String::from).collect();
        out.push(GenerationCandidate {
            post_id,
            emotion,
            tokens: vocab.encode(&words),
            log_prob,
            ended: true,
            provenance: Provenance::Unknown,
        });
    }
    Ok(out)
}
