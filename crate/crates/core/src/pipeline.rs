//! End-to-end experiment steps shared by the command line and the acceptance suite.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_vocab, encode_pair, generate_synthetic_corpus, split_corpus, ConversationPair,
    CorpusSplit, Emotion, EncodedPair, SynthSpec, TokenId, Vocabulary,
};
use crate::decode::{generate_multi, DecodeConfig, GenerationCandidate, DEFAULT_CANDIDATES};
use crate::error::{Error, Result};
use crate::latent::LatentSource;
use crate::latent_analysis::{collect_latents, probe_accuracy, ProbeConfig, ProbeReport};
use crate::model::Model;
use crate::rerank_eval::{
    compute_metrics, lambda_sweep, score_candidates, select_top1, EvalReport, RerankConfig,
    ScoredCandidate, Selection, SweepRow,
};
use crate::scorers::{EmotionClassifier, EvalLm, ScorerConfig, ScorerReport, TopicCoherence};
use crate::training::{train, TrainConfig, TrainOutcome};
use crate::variant::VariantId;

pub const SPLIT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

/// An encoded corpus split with its vocabulary.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub split: CorpusSplit,
    pub vocab: Vocabulary,
    pub train: Vec<EncodedPair>,
    pub dev: Vec<EncodedPair>,
    pub test: Vec<EncodedPair>,
}

impl PreparedData {
    /// Splits by post and builds the vocabulary from the training partition.
    pub fn from_pairs(pairs: &[ConversationPair], split_seed: u64) -> Result<Self> {
        let split = split_corpus(pairs, SPLIT_RATIOS, split_seed)?;
        Self::from_split(split)
    }

    pub fn from_split(split: CorpusSplit) -> Result<Self> {
        let vocab = build_vocab(&split.train, 1)?;
        let enc = |ps: &[ConversationPair]| {
            ps.iter()
                .map(|p| encode_pair(p, &vocab))
                .collect::<Vec<_>>()
        };
        let (train, dev, test) = (enc(&split.train), enc(&split.dev), enc(&split.test));
        Ok(Self {
            split,
            vocab,
            train,
            dev,
            test,
        })
    }

    pub fn synthetic(spec: &SynthSpec) -> Result<Self> {
        Self::from_pairs(&generate_synthetic_corpus(spec)?, spec.seed)
    }
}

/// Distinct posts in first-seen order.
pub fn unique_posts(pairs: &[EncodedPair]) -> Vec<Vec<TokenId>> {
    let mut seen = std::collections::HashSet::new();
    pairs
        .iter()
        .filter(|p| seen.insert(p.post.clone()))
        .map(|p| p.post.clone())
        .collect()
}

#[derive(Debug, Clone)]
pub struct ScorerSet {
    pub emotion: EmotionClassifier,
    pub coherence: TopicCoherence,
    pub lm: EvalLm,
    pub emotion_report: ScorerReport,
    pub coherence_report: ScorerReport,
    pub lm_dev_ppl: f64,
}

/// Hyperparameters for the three auxiliary models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerSuiteConfig {
    pub emotion: ScorerConfig,
    pub coherence: ScorerConfig,
    pub lm: ScorerConfig,
}

impl Default for ScorerSuiteConfig {
    fn default() -> Self {
        Self {
            emotion: ScorerConfig::default(),
            // Cross-segment matching needs depth, a larger init and a longer run to leave the chance plateau.
            coherence: ScorerConfig {
                layers: 2,
                steps: 3000,
                init_std: 0.3,
                ..ScorerConfig::default()
            },
            lm: ScorerConfig::default(),
        }
    }
}

impl ScorerSuiteConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.emotion.seed = seed;
        self.coherence.seed = seed;
        self.lm.seed = seed;
        self
    }
}

pub fn train_scorers(data: &PreparedData, cfg: &ScorerSuiteConfig) -> Result<ScorerSet> {
    let v = data.vocab.len();
    let (emotion, emotion_report) =
        EmotionClassifier::train(&data.train, &data.dev, v, &cfg.emotion)?;
    let (coherence, coherence_report) =
        TopicCoherence::train(&data.train, &data.dev, v, &cfg.coherence)?;
    let responses = |ps: &[EncodedPair]| ps.iter().map(|p| p.response.clone()).collect::<Vec<_>>();
    let (lm, lm_dev_ppl) =
        EvalLm::train(&responses(&data.train), &responses(&data.dev), v, &cfg.lm)?;
    Ok(ScorerSet {
        emotion,
        coherence,
        lm,
        emotion_report,
        coherence_report,
        lm_dev_ppl,
    })
}

/// Which test posts and emotions to decode, and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPlan {
    /// Cap on distinct test posts; 0 means all.
    pub max_posts: usize,
    pub emotions: Vec<Emotion>,
    pub candidates: usize,
    pub decode: DecodeConfig,
    pub rerank: RerankConfig,
    pub seed: u64,
}

impl Default for EvalPlan {
    fn default() -> Self {
        Self {
            max_posts: 0,
            emotions: Emotion::ALL.to_vec(),
            candidates: DEFAULT_CANDIDATES,
            decode: DecodeConfig::default(),
            rerank: RerankConfig::default(),
            seed: 7,
        }
    }
}

/// Candidates for every `(post, emotion)` pair, with the post index as id.
pub fn generate_for_posts(
    model: &Model,
    posts: &[Vec<TokenId>],
    plan: &EvalPlan,
) -> Result<Vec<GenerationCandidate>> {
    plan.decode.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    rng.set_stream(3);
    let mut out = Vec::new();
    for (post_id, post) in posts.iter().enumerate() {
        for &e in &plan.emotions {
            out.extend(generate_multi(
                model,
                post_id,
                post,
                e,
                plan.candidates,
                plan.decode,
                &mut rng,
            )?);
        }
    }
    Ok(out)
}

pub fn plan_posts(data: &PreparedData, plan: &EvalPlan) -> Vec<Vec<TokenId>> {
    let mut posts = unique_posts(&data.test);
    if plan.max_posts > 0 {
        posts.truncate(plan.max_posts);
    }
    posts
}

pub fn score_for_posts(
    candidates: Vec<GenerationCandidate>,
    posts: &[Vec<TokenId>],
    scorers: &ScorerSet,
) -> Result<Vec<ScoredCandidate>> {
    score_candidates(
        candidates,
        |i| posts.get(i).map(Vec::as_slice),
        &scorers.emotion,
        &scorers.coherence,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantEval {
    pub variant: VariantId,
    pub seed: u64,
    /// Top-1 metrics after reranking.
    pub reranked: EvalReport,
    /// Top-1 metrics when ranking by length-normalized likelihood only.
    pub likelihood: EvalReport,
    pub sweep: Vec<SweepRow>,
    /// Posterior-latent probe; absent for Seq2Seq.
    pub probe: Option<ProbeReport>,
    pub final_train_nll: f64,
}

pub fn evaluate_model(
    model: &Model,
    seed: u64,
    data: &PreparedData,
    scorers: &ScorerSet,
    plan: &EvalPlan,
    sweep_grid: &[f64],
) -> Result<VariantEval> {
    let posts = plan_posts(data, plan);
    if posts.is_empty() {
        return Err(Error::Data("no test posts to evaluate".into()));
    }
    let scored = score_for_posts(generate_for_posts(model, &posts, plan)?, &posts, scorers)?;
    let reranked = compute_metrics(
        &select_top1(&scored, Selection::Rerank(plan.rerank)),
        &scorers.lm,
    )?;
    let likelihood = compute_metrics(&select_top1(&scored, Selection::Likelihood), &scorers.lm)?;
    let sweep = lambda_sweep(&scored, sweep_grid)?;
    let probe = if model.variant().is_variational() {
        let tr = collect_latents(model, &data.train, LatentSource::Posterior, seed)?;
        let dv = collect_latents(model, &data.dev, LatentSource::Posterior, seed ^ 1)?;
        Some(probe_accuracy(&tr, &dv, &ProbeConfig::default())?)
    } else {
        None
    };
    Ok(VariantEval {
        variant: model.variant(),
        seed,
        reranked,
        likelihood,
        sweep,
        probe,
        final_train_nll: f64::NAN,
    })
}

fn tail_mean_nll(outcome: &TrainOutcome) -> f64 {
    let tail = &outcome.log[outcome.log.len().saturating_sub(50)..];
    tail.iter().map(|r| r.loss.nll).sum::<f64>() / tail.len().max(1) as f64
}

/// Trains one variant with `base` hyperparameters and evaluates it.
pub fn train_and_evaluate(
    variant: VariantId,
    seed: u64,
    base: &TrainConfig,
    data: &PreparedData,
    scorers: &ScorerSet,
    plan: &EvalPlan,
    sweep_grid: &[f64],
) -> Result<(TrainOutcome, VariantEval)> {
    let mut cfg = base.clone();
    cfg.model.variant = variant;
    cfg.seed = seed;
    let outcome = train(&data.train, &data.dev, data.vocab.len(), &cfg, None)?;
    let mut eval = evaluate_model(
        &outcome.model,
        seed,
        data,
        scorers,
        &EvalPlan {
            seed,
            ..plan.clone()
        },
        sweep_grid,
    )?;
    eval.final_train_nll = tail_mean_nll(&outcome);
    Ok((outcome, eval))
}

/// Comparison table with one row per evaluation.
pub fn ablation_table(rows: &[VariantEval]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12}{:>6}{:>10}{:>9}{:>16}{:>9}{:>9}{:>10}{:>9}",
        "model", "seed", "EmoAcc%", "Rele", "Distinct-1/2", "Uniq%", "PPL", "LikeAcc%", "Probe%"
    );
    for r in rows {
        let m = &r.reranked;
        let probe = r
            .probe
            .map(|p| format!("{:.2}", p.heldout_accuracy))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<12}{:>6}{:>10.2}{:>9.4}{:>16}{:>9.2}{:>9.3}{:>10.2}{:>9}",
            r.variant.label(),
            r.seed,
            m.emo_acc,
            m.rele,
            format!("{:.3}/{:.3}", m.distinct1, m.distinct2),
            m.uniq,
            m.ppl,
            r.likelihood.emo_acc,
            probe
        );
    }
    s
}

pub const ABLATION_CSV_HEADER: &str =
    "variant,seed,emo_acc,rele,distinct1,distinct2,uniq,ppl,likelihood_emo_acc,probe_acc,train_nll";

pub fn ablation_csv(rows: &[VariantEval]) -> String {
    let mut s = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        let m = &r.reranked;
        let probe = r
            .probe
            .map(|p| format!("{:.4}", p.heldout_accuracy))
            .unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{:.4},{:.6},{:.6},{:.6},{:.4},{:.6},{:.4},{},{:.6}",
            r.variant.name(),
            r.seed,
            m.emo_acc,
            m.rele,
            m.distinct1,
            m.distinct2,
            m.uniq,
            m.ppl,
            r.likelihood.emo_acc,
            probe,
            r.final_train_nll
        );
    }
    s
}

/// For each seed, whether `a` scored a strictly higher emotion accuracy than `b`.
pub fn pairwise_wins(rows: &[VariantEval], a: VariantId, b: VariantId) -> Vec<bool> {
    let mut by_seed: BTreeMap<u64, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for r in rows {
        let e = by_seed.entry(r.seed).or_default();
        if r.variant == a {
            e.0 = Some(r.reranked.emo_acc);
        }
        if r.variant == b {
            e.1 = Some(r.reranked.emo_acc);
        }
    }
    by_seed
        .values()
        .filter_map(|(x, y)| Some(x.as_ref()? > y.as_ref()?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rerank_eval::metrics_with_ppl;

    fn row(variant: VariantId, seed: u64, acc: f64) -> VariantEval {
        let report = metrics_with_ppl(
            &[ScoredCandidate {
                candidate: GenerationCandidate {
                    post_id: 0,
                    emotion: Emotion::Liking,
                    tokens: vec![20],
                    log_prob: -1.0,
                    ended: true,
                    provenance: crate::decode::Provenance::Unknown,
                },
                score_emo: 1,
                score_rele: 0.5,
            }],
            2.0,
        )
        .unwrap();
        VariantEval {
            variant,
            seed,
            reranked: EvalReport {
                emo_acc: acc,
                ..report.clone()
            },
            likelihood: report,
            sweep: Vec::new(),
            probe: None,
            final_train_nll: 0.1,
        }
    }

    #[test]
    fn wins_are_counted_per_seed() {
        let rows = vec![
            row(VariantId::EmoCvae, 1, 90.0),
            row(VariantId::Cvae, 1, 80.0),
            row(VariantId::EmoCvae, 2, 70.0),
            row(VariantId::Cvae, 2, 80.0),
            row(VariantId::EmoCvae, 3, 80.0),
        ];
        assert_eq!(
            pairwise_wins(&rows, VariantId::EmoCvae, VariantId::Cvae),
            vec![true, false]
        );
        let table = ablation_table(&rows);
        assert_eq!(table.lines().count(), 6);
        assert_eq!(ablation_csv(&rows).lines().count(), 6);
    }

    #[test]
    fn prepared_data_is_disjoint_by_post() {
        let data = PreparedData::synthetic(&SynthSpec {
            size: 300,
            ..SynthSpec::default()
        })
        .unwrap();
        let train: std::collections::HashSet<_> = unique_posts(&data.train).into_iter().collect();
        assert!(unique_posts(&data.test).iter().all(|p| !train.contains(p)));
        assert_eq!(data.train.len() + data.dev.len() + data.test.len(), 300);
    }
}
