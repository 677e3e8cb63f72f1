//! Auxiliary models used for reranking and evaluation: the emotion
//! classifier, the topic-coherence discriminator and the evaluation LM.
//! All three are small transformers over the shared vocabulary.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_container, write_container};
use crate::corpus::{Emotion, EncodedPair, TokenId, Vocabulary, CLS, EOS, SEP, SOS};
use crate::error::{Error, Result};
use crate::masks::{AttentionMask, LayoutToken, Mode, Role, Stack, TokenLayout};
use crate::nn::{cross_entropy_rows, join, log_softmax, softmax, Linear, Mat, Parameters};
use crate::optim::{Adam, AdamConfig};
use crate::transformer::{gather_rows, scatter_add_rows, Batch, Transformer, TransformerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            layers: 1,
            heads: 2,
            ffn_dim: 64,
            max_positions: 64,
            steps: 600,
            batch_size: 32,
            learning_rate: 2e-3,
            init_std: 0.02,
            seed: 11,
        }
    }
}

impl ScorerConfig {
    fn transformer(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            layers: self.layers,
            heads: self.heads,
            hidden_dim: self.hidden_dim,
            ffn_dim: self.ffn_dim,
            max_positions: self.max_positions,
            vocab_size,
            latent_dim: None,
            tie_embeddings: true,
            init_std: self.init_std,
        }
    }

    fn optimizer(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Classifier input: one or two token segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPair {
    pub first: Vec<TokenId>,
    pub second: Option<Vec<TokenId>>,
}

/// `[CLS] first [SEP] (second [SEP])` with full bidirectional attention.
pub fn classifier_layout(input: &SegmentPair) -> Result<(TokenLayout, AttentionMask)> {
    let mut tokens = vec![LayoutToken {
        role: Role::Cls,
        segment: 0,
        position: 0,
        id: CLS,
    }];
    let mut push = |role, segment, id| {
        let position = tokens.len();
        tokens.push(LayoutToken {
            role,
            segment,
            position,
            id,
        });
    };
    for &id in &input.first {
        push(Role::Post, 0, id);
    }
    push(Role::Sep0, 0, SEP);
    if let Some(second) = &input.second {
        for &id in second {
            push(Role::Resp, 1, id);
        }
        push(Role::Sep1, 1, SEP);
    }
    let layout = TokenLayout::new(tokens, Stack::Auxiliary, Mode::Test)?;
    let mask = AttentionMask::full(layout.len());
    Ok((layout, mask))
}

/// `[SOS] response [EOS]` with a causal mask.
pub fn lm_layout(response: &[TokenId]) -> Result<(TokenLayout, AttentionMask)> {
    let mut tokens = vec![LayoutToken {
        role: Role::Sos,
        segment: 0,
        position: 0,
        id: SOS,
    }];
    for (i, &id) in response.iter().enumerate() {
        tokens.push(LayoutToken {
            role: Role::Resp,
            segment: 0,
            position: i + 1,
            id,
        });
    }
    tokens.push(LayoutToken {
        role: Role::Eos,
        segment: 0,
        position: response.len() + 1,
        id: EOS,
    });
    let layout = TokenLayout::new(tokens, Stack::Auxiliary, Mode::Train)?;
    let mask = AttentionMask::causal(layout.len());
    Ok((layout, mask))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceClassifier {
    pub body: Transformer,
    pub head: Linear,
}

impl Parameters for SequenceClassifier {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Mat)) {
        self.body.visit(&join(prefix, "body"), f);
        self.head.visit(&join(prefix, "cls_head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Mat)) {
        self.body.visit_mut(&join(prefix, "body"), f);
        self.head.visit_mut(&join(prefix, "cls_head"), f);
    }
}

const INFERENCE_CHUNK: usize = 64;

impl SequenceClassifier {
    pub fn new<R: Rng>(
        cfg: &ScorerConfig,
        vocab_size: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let body = Transformer::new(cfg.transformer(vocab_size), rng)?;
        let head = Linear::new(cfg.hidden_dim, classes, cfg.init_std, rng);
        Ok(Self { body, head })
    }

    pub fn classes(&self) -> usize {
        self.head.out_dim()
    }

    fn cls_rows(
        &self,
        inputs: &[SegmentPair],
    ) -> Result<(Vec<(TokenLayout, AttentionMask)>, Vec<usize>)> {
        let layouts = inputs
            .iter()
            .map(classifier_layout)
            .collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::with_capacity(layouts.len());
        let mut off = 0;
        for (l, _) in &layouts {
            rows.push(off);
            off += l.len();
        }
        Ok((layouts, rows))
    }

    pub fn logits(&self, inputs: &[SegmentPair]) -> Result<Mat> {
        let mut out = Mat::zeros((inputs.len(), self.classes()));
        for (c, chunk) in inputs.chunks(INFERENCE_CHUNK).enumerate() {
            let (layouts, rows) = self.cls_rows(chunk)?;
            let batch = Batch::new(layouts.iter().map(|(l, m)| (l, m)).collect())?;
            let (y, _) = self.body.forward(&batch, None)?;
            let logits = self.head.forward(&gather_rows(&y, &rows));
            out.slice_mut(ndarray::s![
                c * INFERENCE_CHUNK..c * INFERENCE_CHUNK + chunk.len(),
                ..
            ])
            .assign(&logits);
        }
        Ok(out)
    }

    pub fn probabilities(&self, inputs: &[SegmentPair]) -> Result<Mat> {
        let mut l = self.logits(inputs)?;
        for mut row in l.rows_mut() {
            let p = softmax(&row.to_vec());
            row.assign(&ndarray::Array1::from(p));
        }
        Ok(l)
    }

    pub fn predict(&self, inputs: &[SegmentPair]) -> Result<Vec<usize>> {
        Ok(self
            .logits(inputs)?
            .rows()
            .into_iter()
            .map(|r| argmax(r.iter().copied()))
            .collect())
    }

    pub fn accuracy(&self, inputs: &[SegmentPair], labels: &[usize]) -> Result<f64> {
        if inputs.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(inputs)?;
        Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / inputs.len() as f64)
    }

    /// Mean cross-entropy over the batch, accumulating gradients into `g`.
    pub fn loss_backward(
        &self,
        inputs: &[SegmentPair],
        labels: &[usize],
        g: &mut SequenceClassifier,
    ) -> Result<f64> {
        let (layouts, rows) = self.cls_rows(inputs)?;
        let batch = Batch::new(layouts.iter().map(|(l, m)| (l, m)).collect())?;
        let (y, cache) = self.body.forward(&batch, None)?;
        let h = gather_rows(&y, &rows);
        let logits = self.head.forward(&h);
        let (sum, mut d) = cross_entropy_rows(&logits, labels);
        let n = inputs.len() as f64;
        d /= n;
        let dh = self.head.backward(&h, &d, &mut g.head);
        let mut dy = Mat::zeros(y.raw_dim());
        scatter_add_rows(&mut dy, &rows, &dh);
        self.body.backward(&batch, &cache, &dy, None, &mut g.body);
        Ok(sum / n)
    }

    pub fn fit(
        inputs: &[SegmentPair],
        labels: &[usize],
        classes: usize,
        vocab_size: usize,
        cfg: &ScorerConfig,
    ) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != labels.len() {
            return Err(Error::Data(
                "classifier needs a non-empty labeled set".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = Self::new(cfg, vocab_size, classes, &mut rng)?;
        let mut opt = Adam::new(cfg.optimizer());
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        let bs = cfg.batch_size.clamp(1, inputs.len());
        let mut cursor = order.len();
        for _ in 0..cfg.steps {
            if cursor + bs > order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + bs];
            cursor += bs;
            let xs: Vec<SegmentPair> = idx.iter().map(|&i| inputs[i].clone()).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = model.zeros_like();
            model.loss_backward(&xs, &ys, &mut g)?;
            opt.step(&mut model, &g);
        }
        Ok(model)
    }
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    it.enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
        )
        .0
}

/// Accuracy on the training and held-out sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorerReport {
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmotionClassifier {
    pub model: SequenceClassifier,
}

impl EmotionClassifier {
    pub fn train(
        train: &[EncodedPair],
        heldout: &[EncodedPair],
        vocab_size: usize,
        cfg: &ScorerConfig,
    ) -> Result<(Self, ScorerReport)> {
        let classes: std::collections::BTreeSet<Emotion> =
            train.iter().map(|p| p.emotion).collect();
        if classes.len() < 2 {
            return Err(Error::Data(
                "emotion classifier needs at least two classes".into(),
            ));
        }
        let (xs, ys) = Self::examples(train);
        let model = SequenceClassifier::fit(&xs, &ys, Emotion::COUNT, vocab_size, cfg)?;
        let (hx, hy) = Self::examples(heldout);
        let report = ScorerReport {
            train_accuracy: model.accuracy(&xs, &ys)?,
            heldout_accuracy: model.accuracy(&hx, &hy)?,
        };
        Ok((Self { model }, report))
    }

    fn examples(pairs: &[EncodedPair]) -> (Vec<SegmentPair>, Vec<usize>) {
        pairs
            .iter()
            .map(|p| {
                (
                    SegmentPair {
                        first: p.response.clone(),
                        second: None,
                    },
                    p.emotion.id(),
                )
            })
            .unzip()
    }

    pub fn predict(&self, responses: &[Vec<TokenId>]) -> Result<Vec<Emotion>> {
        let xs: Vec<SegmentPair> = responses
            .iter()
            .map(|r| SegmentPair {
                first: r.clone(),
                second: None,
            })
            .collect();
        Ok(self
            .model
            .predict(&xs)?
            .into_iter()
            .map(|i| Emotion::from_id(i).expect("class id"))
            .collect())
    }
}

/// Replaces each pair's response with one from a different post.
pub fn derangement_negatives<R: Rng>(
    pairs: &[EncodedPair],
    rng: &mut R,
) -> Result<Vec<EncodedPair>> {
    let n = pairs.len();
    if n < 2 || pairs.iter().all(|p| p.post == pairs[0].post) {
        return Err(Error::Data(
            "need at least two distinct posts to build negatives".into(),
        ));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let clash = |i: usize, j: usize| pairs[i].post == pairs[j].post;
    for i in 0..n {
        if !clash(i, perm[i]) {
            continue;
        }
        let start = rng.random_range(0..n);
        let swap = (0..n)
            .map(|k| (start + k) % n)
            .find(|&j| j != i && !clash(i, perm[j]) && !clash(j, perm[i]))
            .ok_or_else(|| Error::Data("could not build a derangement of responses".into()))?;
        perm.swap(i, swap);
    }
    Ok(pairs
        .iter()
        .zip(&perm)
        .map(|(p, &j)| EncodedPair {
            post: p.post.clone(),
            response: pairs[j].response.clone(),
            emotion: pairs[j].emotion,
        })
        .collect())
}

/// Binary post/response coherence model; its positive-class probability is the relevance score.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicCoherence {
    pub model: SequenceClassifier,
}

impl TopicCoherence {
    fn examples<R: Rng>(
        pairs: &[EncodedPair],
        rng: &mut R,
    ) -> Result<(Vec<SegmentPair>, Vec<usize>)> {
        let negatives = derangement_negatives(pairs, rng)?;
        let mut xs = Vec::with_capacity(2 * pairs.len());
        let mut ys = Vec::with_capacity(2 * pairs.len());
        for (pos, neg) in pairs.iter().zip(&negatives) {
            xs.push(SegmentPair {
                first: pos.post.clone(),
                second: Some(pos.response.clone()),
            });
            ys.push(1);
            xs.push(SegmentPair {
                first: neg.post.clone(),
                second: Some(neg.response.clone()),
            });
            ys.push(0);
        }
        Ok((xs, ys))
    }

    pub fn train(
        train: &[EncodedPair],
        heldout: &[EncodedPair],
        vocab_size: usize,
        cfg: &ScorerConfig,
    ) -> Result<(Self, ScorerReport)> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7cd);
        let (xs, ys) = Self::examples(train, &mut rng)?;
        let model = SequenceClassifier::fit(&xs, &ys, 2, vocab_size, cfg)?;
        let train_accuracy = model.accuracy(&xs, &ys)?;
        let heldout_accuracy = match Self::examples(heldout, &mut rng) {
            Ok((hx, hy)) => model.accuracy(&hx, &hy)?,
            Err(_) => 0.0,
        };
        Ok((
            Self { model },
            ScorerReport {
                train_accuracy,
                heldout_accuracy,
            },
        ))
    }

    pub fn score(&self, pairs: &[(Vec<TokenId>, Vec<TokenId>)]) -> Result<Vec<f64>> {
        let xs: Vec<SegmentPair> = pairs
            .iter()
            .map(|(p, r)| SegmentPair {
                first: p.clone(),
                second: Some(r.clone()),
            })
            .collect();
        Ok(self.model.probabilities(&xs)?.column(1).to_vec())
    }
}

/// Causal language model over responses, used only for perplexity.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalLm {
    pub body: Transformer,
}

impl Parameters for EvalLm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Mat)) {
        self.body.visit(&join(prefix, "body"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Mat)) {
        self.body.visit_mut(&join(prefix, "body"), f);
    }
}

impl EvalLm {
    pub fn new<R: Rng>(cfg: &ScorerConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            body: Transformer::new(cfg.transformer(vocab_size), rng)?,
        })
    }

    fn targets(layouts: &[(TokenLayout, AttentionMask)]) -> (Vec<usize>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut off = 0;
        for (l, _) in layouts {
            let ids = l.ids();
            for i in 0..l.len() - 1 {
                rows.push(off + i);
                targets.push(ids[i + 1] as usize);
            }
            off += l.len();
        }
        (rows, targets)
    }

    /// Summed NLL and target-token count (response tokens plus `[EOS]`).
    pub fn nll(&self, responses: &[Vec<TokenId>]) -> Result<(f64, usize)> {
        let mut total = 0.0;
        let mut count = 0;
        for chunk in responses.chunks(INFERENCE_CHUNK) {
            let layouts = chunk
                .iter()
                .map(|r| lm_layout(r))
                .collect::<Result<Vec<_>>>()?;
            let batch = Batch::new(layouts.iter().map(|(l, m)| (l, m)).collect())?;
            let (y, _) = self.body.forward(&batch, None)?;
            let (rows, targets) = Self::targets(&layouts);
            let logits = self.body.lm_logits(&gather_rows(&y, &rows));
            for (row, &t) in logits.rows().into_iter().zip(&targets) {
                total -= log_softmax(&row.to_vec())[t];
            }
            count += targets.len();
        }
        Ok((total, count))
    }

    pub fn perplexity(&self, responses: &[Vec<TokenId>]) -> Result<f64> {
        let (nll, count) = self.nll(responses)?;
        if count == 0 {
            return Err(Error::Data("perplexity of an empty set".into()));
        }
        Ok((nll / count as f64).exp())
    }

    fn loss_backward(&self, responses: &[Vec<TokenId>], g: &mut EvalLm) -> Result<f64> {
        let layouts = responses
            .iter()
            .map(|r| lm_layout(r))
            .collect::<Result<Vec<_>>>()?;
        let batch = Batch::new(layouts.iter().map(|(l, m)| (l, m)).collect())?;
        let (y, cache) = self.body.forward(&batch, None)?;
        let (rows, targets) = Self::targets(&layouts);
        let h = gather_rows(&y, &rows);
        let logits = self.body.lm_logits(&h);
        let (sum, mut d) = cross_entropy_rows(&logits, &targets);
        let n = targets.len() as f64;
        d /= n;
        let dh = self.body.lm_backward(&h, &d, &mut g.body);
        let mut dy = Mat::zeros(y.raw_dim());
        scatter_add_rows(&mut dy, &rows, &dh);
        self.body.backward(&batch, &cache, &dy, None, &mut g.body);
        Ok(sum / n)
    }

    /// Trains on `train` and reports held-out perplexity.
    pub fn train(
        train: &[Vec<TokenId>],
        heldout: &[Vec<TokenId>],
        vocab_size: usize,
        cfg: &ScorerConfig,
    ) -> Result<(Self, f64)> {
        if train.is_empty() {
            return Err(Error::Data(
                "language model needs a non-empty corpus".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1a);
        let mut model = Self::new(cfg, vocab_size, &mut rng)?;
        let mut opt = Adam::new(cfg.optimizer());
        let mut order: Vec<usize> = (0..train.len()).collect();
        let bs = cfg.batch_size.clamp(1, train.len());
        let mut cursor = order.len();
        for _ in 0..cfg.steps {
            if cursor + bs > order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let batch: Vec<Vec<TokenId>> = order[cursor..cursor + bs]
                .iter()
                .map(|&i| train[i].clone())
                .collect();
            cursor += bs;
            let mut g = model.zeros_like();
            model.loss_backward(&batch, &mut g)?;
            opt.step(&mut model, &g);
        }
        let ppl = if heldout.is_empty() {
            model.perplexity(train)?
        } else {
            model.perplexity(heldout)?
        };
        Ok((model, ppl))
    }
}

pub const EMOTION_CLASSIFIER_KIND: &str = "emotion-classifier";
pub const TCD_KIND: &str = "topic-coherence";
pub const EVAL_LM_KIND: &str = "eval-lm";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScorerMeta {
    cfg: ScorerConfig,
    classes: usize,
}

fn save_classifier(
    path: &Path,
    kind: &str,
    m: &SequenceClassifier,
    cfg: &ScorerConfig,
    vocab: &Vocabulary,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_container(
        &mut f,
        kind,
        &ScorerMeta {
            cfg: cfg.clone(),
            classes: m.classes(),
        },
        vocab,
        m,
    )?;
    f.flush()?;
    Ok(())
}

fn load_classifier<R: BufRead>(r: R, kind: &str) -> Result<(SequenceClassifier, Vocabulary)> {
    let raw = read_container(r)?;
    raw.expect_kind(kind)?;
    let meta: ScorerMeta = raw.meta()?;
    let mut m = SequenceClassifier::new(
        &meta.cfg,
        raw.vocab.len(),
        meta.classes,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    raw.load_into(&mut m)?;
    Ok((m, raw.vocab))
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>> {
    Ok(std::io::BufReader::new(std::fs::File::open(path)?))
}

impl EmotionClassifier {
    pub fn save(&self, path: &Path, cfg: &ScorerConfig, vocab: &Vocabulary) -> Result<()> {
        save_classifier(path, EMOTION_CLASSIFIER_KIND, &self.model, cfg, vocab)
    }
    pub fn load(path: &Path) -> Result<(Self, Vocabulary)> {
        let (model, v) = load_classifier(open(path)?, EMOTION_CLASSIFIER_KIND)?;
        Ok((Self { model }, v))
    }
}

impl TopicCoherence {
    pub fn save(&self, path: &Path, cfg: &ScorerConfig, vocab: &Vocabulary) -> Result<()> {
        save_classifier(path, TCD_KIND, &self.model, cfg, vocab)
    }
    pub fn load(path: &Path) -> Result<(Self, Vocabulary)> {
        let (model, v) = load_classifier(open(path)?, TCD_KIND)?;
        Ok((Self { model }, v))
    }
}

impl EvalLm {
    pub fn save(&self, path: &Path, cfg: &ScorerConfig, vocab: &Vocabulary) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_container(
            &mut f,
            EVAL_LM_KIND,
            &ScorerMeta {
                cfg: cfg.clone(),
                classes: 0,
            },
            vocab,
            self,
        )?;
        f.flush()?;
        Ok(())
    }
    pub fn load(path: &Path) -> Result<(Self, Vocabulary)> {
        let raw = read_container(open(path)?)?;
        raw.expect_kind(EVAL_LM_KIND)?;
        let meta: ScorerMeta = raw.meta()?;
        let mut m = EvalLm::new(
            &meta.cfg,
            raw.vocab.len(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        raw.load_into(&mut m)?;
        Ok((m, raw.vocab))
    }
}
