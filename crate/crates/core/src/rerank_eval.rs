//! Candidate reranking and the objective evaluation metrics.
//!
//! A scored candidate's combined score is `score_rele + lambda * score_emo`.
//! Top-1 selection happens per `(post_id, emotion)` group.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{Emotion, TokenId};
use crate::decode::{GenerationCandidate, Provenance};
use crate::error::{Error, Result};
use crate::scorers::{EmotionClassifier, EvalLm, TopicCoherence};

pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RerankConfig {
    pub lambda: f64,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl RerankConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be a finite non-negative number, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub candidate: GenerationCandidate,
    /// 1 when the classifier's prediction matches the requested emotion.
    pub score_emo: u8,
    /// Coherence probability in `[0, 1]`.
    pub score_rele: f64,
}

impl ScoredCandidate {
    pub fn combined(&self, lambda: f64) -> f64 {
        self.score_rele + lambda * f64::from(self.score_emo)
    }
}

pub fn score_emo(predicted: Emotion, target: Emotion) -> u8 {
    u8::from(predicted == target)
}

fn provenance_key(p: &Provenance) -> (u8, usize) {
    match p {
        Provenance::Latent { index, .. } => (0, *index),
        Provenance::SeedWord(id) => (1, *id as usize),
        Provenance::Unknown => (2, 0),
    }
}

fn tie_break(a: &GenerationCandidate, b: &GenerationCandidate) -> Ordering {
    b.log_prob
        .total_cmp(&a.log_prob)
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| (a.post_id, a.emotion).cmp(&(b.post_id, b.emotion)))
        .then_with(|| provenance_key(&a.provenance).cmp(&provenance_key(&b.provenance)))
}

/// Descending combined score, then higher log-probability, then ascending tokens.
pub fn compare_combined(a: &ScoredCandidate, b: &ScoredCandidate, lambda: f64) -> Ordering {
    b.combined(lambda)
        .total_cmp(&a.combined(lambda))
        .then_with(|| tie_break(&a.candidate, &b.candidate))
}

/// Descending length-normalized log-probability, ignoring the scorers.
pub fn compare_likelihood(a: &ScoredCandidate, b: &ScoredCandidate) -> Ordering {
    b.candidate
        .normalized_score()
        .total_cmp(&a.candidate.normalized_score())
        .then_with(|| tie_break(&a.candidate, &b.candidate))
}

pub fn rerank(mut candidates: Vec<ScoredCandidate>, cfg: &RerankConfig) -> Vec<ScoredCandidate> {
    candidates.sort_by(|a, b| compare_combined(a, b, cfg.lambda));
    candidates
}

pub fn rank_by_likelihood(mut candidates: Vec<ScoredCandidate>) -> Vec<ScoredCandidate> {
    candidates.sort_by(compare_likelihood);
    candidates
}

/// How the top-1 response of each group is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    Rerank(RerankConfig),
    Likelihood,
}

/// Best candidate per `(post_id, emotion)`, in group order.
pub fn select_top1(candidates: &[ScoredCandidate], selection: Selection) -> Vec<ScoredCandidate> {
    let mut best: BTreeMap<(usize, Emotion), &ScoredCandidate> = BTreeMap::new();
    for c in candidates {
        let key = (c.candidate.post_id, c.candidate.emotion);
        let better = match best.get(&key) {
            None => true,
            Some(cur) => {
                let ord = match selection {
                    Selection::Rerank(cfg) => compare_combined(c, cur, cfg.lambda),
                    Selection::Likelihood => compare_likelihood(c, cur),
                };
                ord == Ordering::Less
            }
        };
        if better {
            best.insert(key, c);
        }
    }
    best.into_values().cloned().collect()
}

/// Attaches classifier and coherence scores. `post_of` maps a post id to its tokens.
pub fn score_candidates<'a>(
    candidates: Vec<GenerationCandidate>,
    post_of: impl Fn(usize) -> Option<&'a [TokenId]>,
    classifier: &EmotionClassifier,
    coherence: &TopicCoherence,
) -> Result<Vec<ScoredCandidate>> {
    let responses: Vec<Vec<TokenId>> = candidates.iter().map(|c| c.tokens.clone()).collect();
    let predicted = classifier.predict(&responses)?;
    let pairs = candidates
        .iter()
        .map(|c| {
            post_of(c.post_id)
                .map(|p| (p.to_vec(), c.tokens.clone()))
                .ok_or_else(|| {
                    Error::Data(format!("candidate refers to unknown post {}", c.post_id))
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let rele = coherence.score(&pairs)?;
    Ok(candidates
        .into_iter()
        .zip(predicted)
        .zip(rele)
        .map(|((c, p), r)| ScoredCandidate {
            score_emo: score_emo(p, c.emotion),
            score_rele: r,
            candidate: c,
        })
        .collect())
}

/// Distinct n-grams over total n-grams; 0 when there are none.
pub fn distinct_n(responses: &[&[TokenId]], n: usize) -> f64 {
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        if n == 0 || r.len() < n {
            continue;
        }
        for w in r.windows(n) {
            seen.insert(w.to_vec());
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

/// Percentage of distinct whole responses.
pub fn uniq_percent(responses: &[&[TokenId]]) -> f64 {
    if responses.is_empty() {
        return 0.0;
    }
    let seen: HashSet<&[TokenId]> = responses.iter().copied().collect();
    100.0 * seen.len() as f64 / responses.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percentage of top-1 responses whose predicted emotion matches the request.
    pub emo_acc: f64,
    pub rele: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub uniq: f64,
    pub ppl: f64,
    /// Accuracy percentage per requested emotion, `None` when never requested.
    pub per_emotion: [Option<f64>; Emotion::COUNT],
    pub responses: usize,
}

/// Metrics over top-1 candidates with a precomputed perplexity.
pub fn metrics_with_ppl(top1: &[ScoredCandidate], ppl: f64) -> Result<EvalReport> {
    if top1.is_empty() {
        return Err(Error::Data("cannot evaluate an empty candidate set".into()));
    }
    let n = top1.len() as f64;
    let responses: Vec<&[TokenId]> = top1.iter().map(|c| c.candidate.tokens.as_slice()).collect();
    let mut hits = [0usize; Emotion::COUNT];
    let mut counts = [0usize; Emotion::COUNT];
    for c in top1 {
        let e = c.candidate.emotion.id();
        counts[e] += 1;
        hits[e] += usize::from(c.score_emo);
    }
    let per_emotion =
        std::array::from_fn(|e| (counts[e] > 0).then(|| 100.0 * hits[e] as f64 / counts[e] as f64));
    Ok(EvalReport {
        emo_acc: 100.0 * top1.iter().map(|c| f64::from(c.score_emo)).sum::<f64>() / n,
        rele: top1.iter().map(|c| c.score_rele).sum::<f64>() / n,
        distinct1: distinct_n(&responses, 1),
        distinct2: distinct_n(&responses, 2),
        uniq: uniq_percent(&responses),
        ppl,
        per_emotion,
        responses: top1.len(),
    })
}

pub fn compute_metrics(top1: &[ScoredCandidate], lm: &EvalLm) -> Result<EvalReport> {
    let responses: Vec<Vec<TokenId>> = top1.iter().map(|c| c.candidate.tokens.clone()).collect();
    let ppl = if responses.is_empty() {
        f64::NAN
    } else {
        lm.perplexity(&responses)?
    };
    metrics_with_ppl(top1, ppl)
}

pub const METRIC_COLUMNS: [&str; 6] = ["emo_acc", "rele", "distinct1", "distinct2", "uniq", "ppl"];

impl EvalReport {
    pub fn metric_values(&self) -> [f64; 6] {
        [
            self.emo_acc,
            self.rele,
            self.distinct1,
            self.distinct2,
            self.uniq,
            self.ppl,
        ]
    }

    pub fn csv_header() -> String {
        let mut cols: Vec<String> = METRIC_COLUMNS.iter().map(|s| s.to_string()).collect();
        cols.extend(Emotion::ALL.iter().map(|e| format!("acc_{}", e.name())));
        cols.push("responses".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols: Vec<String> = self
            .metric_values()
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect();
        cols.extend(
            self.per_emotion
                .iter()
                .map(|v| v.map(|x| format!("{x:.4}")).unwrap_or_default()),
        );
        cols.push(self.responses.to_string());
        cols.join(",")
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12}{:>12}", "metric", "value");
        for (name, v) in METRIC_COLUMNS.iter().zip(self.metric_values()) {
            let _ = writeln!(s, "{name:<12}{v:>12.4}");
        }
        for (e, v) in Emotion::ALL.iter().zip(&self.per_emotion) {
            let shown = v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(s, "{:<12}{shown:>12}", format!("acc:{}", e.name()));
        }
        s
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::csv_header())?;
        writeln!(w, "{}", self.csv_row())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    /// Mean `score_emo` of the top-1 responses.
    pub score_emo: f64,
    pub score_rele: f64,
}

/// Evenly spaced grid from `lo` to `hi` inclusive, rounded to absorb float drift.
pub fn lambda_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(hi >= lo) || lo < 0.0 {
        return Err(Error::Config(format!(
            "bad lambda grid {lo}..{hi} by {step}"
        )));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|i| ((lo + i as f64 * step) * 1e9).round() / 1e9)
        .collect())
}

pub fn lambda_sweep(candidates: &[ScoredCandidate], grid: &[f64]) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    if candidates.is_empty() {
        return Err(Error::Data("cannot sweep an empty candidate set".into()));
    }
    grid.iter()
        .map(|&lambda| {
            let top = select_top1(candidates, Selection::Rerank(RerankConfig::new(lambda)?));
            let n = top.len() as f64;
            Ok(SweepRow {
                lambda,
                score_emo: top.iter().map(|c| f64::from(c.score_emo)).sum::<f64>() / n,
                score_rele: top.iter().map(|c| c.score_rele).sum::<f64>() / n,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut w: W) -> Result<()> {
    writeln!(w, "lambda,score_emo,score_rele")?;
    for r in rows {
        writeln!(w, "{:.2},{:.6},{:.6}", r.lambda, r.score_emo, r.score_rele)?;
    }
    Ok(())
}
