//! KL annealing, the interval KL gate, and the deterministic training loop.

use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::EncodedPair;
use crate::error::{Error, Result};
use crate::model::{LatentNoise, LossBreakdown, LossWeights, Model, ModelConfig};
use crate::nn::Parameters;
use crate::optim::{Adam, AdamConfig};

/// How the gated KL term enters optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KlMode {
    /// The gate multiplies the KL term inside the single objective.
    Gate,
    /// On gated steps a second optimizer takes a separate KL-only step.
    Alternate,
}

impl FromStr for KlMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gate" => Ok(KlMode::Gate),
            "alternate" => Ok(KlMode::Alternate),
            other => Err(Error::Config(format!("unknown kl_mode {other:?}"))),
        }
    }
}

impl KlMode {
    pub fn name(self) -> &'static str {
        match self {
            KlMode::Gate => "gate",
            KlMode::Alternate => "alternate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    /// Steps at the start with KL weight zero.
    pub pretrain_steps: usize,
    /// Length of the linear 0→1 KL ramp after pretraining.
    pub warmup_steps: usize,
    /// KL is optimized only on steps divisible by this interval.
    pub kl_interval: usize,
    pub kl_mode: KlMode,
    pub emo_weight: f64,
    /// First step at which the emotion terms are optimized.
    pub emo_start_step: usize,
    pub stop_grad_prior: bool,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        Self {
            pretrain_steps: 200,
            warmup_steps: 500,
            kl_interval: 15,
            kl_mode: KlMode::Gate,
            emo_weight: 1.0,
            emo_start_step: 0,
            stop_grad_prior: false,
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.kl_interval == 0 {
            return Err(Error::Config("kl_interval must be at least 1".into()));
        }
        if !(self.emo_weight >= 0.0) {
            return Err(Error::Config("emo_weight must be non-negative".into()));
        }
        Ok(())
    }

    /// Anneal weight `w(step)` in `[0, 1]`.
    pub fn anneal_weight(&self, step: usize) -> f64 {
        if step < self.pretrain_steps {
            return 0.0;
        }
        if self.warmup_steps == 0 {
            return 1.0;
        }
        ((step - self.pretrain_steps) as f64 / self.warmup_steps as f64).min(1.0)
    }

    /// Gate `g(step)`: whether KL is optimized on this step.
    pub fn kl_gate(&self, step: usize) -> bool {
        step % self.kl_interval == 0
    }

    pub fn kl_coefficient(&self, step: usize) -> f64 {
        if self.kl_gate(step) {
            self.anneal_weight(step)
        } else {
            0.0
        }
    }

    pub fn emo_coefficient(&self, step: usize) -> f64 {
        if step >= self.emo_start_step {
            self.emo_weight
        } else {
            0.0
        }
    }

    /// Scalar objective at `step`.
    pub fn total_loss(&self, b: &LossBreakdown, step: usize) -> f64 {
        let kl = self.kl_coefficient(step);
        let emo = self.emo_coefficient(step);
        let mut total = b.nll;
        if kl != 0.0 {
            total += kl * b.kl;
        }
        if emo != 0.0 {
            total += emo * (b.emo_post + b.emo_prior);
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schedule: TrainingSchedule,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Dev evaluation interval; 0 disables it.
    pub eval_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            schedule: TrainingSchedule::default(),
            optimizer: AdamConfig::default(),
            batch_size: 32,
            max_steps: 1000,
            eval_every: 250,
            seed: 7,
        }
    }

    /// Hyperparameters for full-size runs on a large corpus.
    pub fn large_scale_profile(model: ModelConfig) -> Self {
        let mut cfg = Self::new(model);
        cfg.optimizer.learning_rate = 2e-5;
        cfg.batch_size = 128;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub total: f64,
}

pub const METRICS_HEADER: &str = "step,nll,kl,emo_post,emo_prior,total";

pub fn write_metrics<W: Write>(records: &[StepRecord], mut w: W) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in records {
        let l = &r.loss;
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.step, l.nll, l.kl, l.emo_post, l.emo_prior, r.total
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepRecord>,
    /// `(step, dev breakdown)` at each evaluation point and at the end.
    pub dev: Vec<(usize, LossBreakdown)>,
    pub steps: usize,
}

/// Independent random streams derived from the run seed.
fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

/// Loss terms averaged over a dataset with a fixed noise stream.
pub fn evaluate_loss(
    model: &Model,
    data: &[EncodedPair],
    batch_size: usize,
    seed: u64,
) -> Result<LossBreakdown> {
    if data.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut rng = stream(seed, 3);
    let mut sum = LossBreakdown::default();
    let mut tokens = 0.0;
    for chunk in data.chunks(batch_size.max(1)) {
        let noise = LatentNoise::draw(chunk.len(), model.latent_dim(), &mut rng);
        let b = model.forward_train(chunk, &noise, LossWeights::FULL, None)?;
        let t: f64 = chunk.iter().map(|e| (e.response.len() + 1) as f64).sum();
        let n = chunk.len() as f64;
        sum.nll += b.nll * t;
        sum.kl += b.kl * n;
        sum.emo_post += b.emo_post * n;
        sum.emo_prior += b.emo_prior * n;
        tokens += t;
    }
    let n = data.len() as f64;
    Ok(LossBreakdown {
        nll: sum.nll / tokens,
        kl: sum.kl / n,
        emo_post: sum.emo_post / n,
        emo_prior: sum.emo_prior / n,
    })
}

/// Trains a fresh model. Single-threaded and fully determined by `cfg.seed`.
///
/// `observer` is called after every step with the step index and model.
pub fn train(
    train_set: &[EncodedPair],
    dev_set: &[EncodedPair],
    vocab_size: usize,
    cfg: &TrainConfig,
    mut observer: Option<&mut dyn FnMut(usize, &Model)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut init_rng = stream(cfg.seed, 0);
    let mut order_rng = stream(cfg.seed, 1);
    let mut noise_rng = stream(cfg.seed, 2);
    let mut model = Model::new(cfg.model.clone(), vocab_size, &mut init_rng)?;
    let mut opt = Adam::new(cfg.optimizer);
    let mut kl_opt = Adam::new(cfg.optimizer);
    let sched = &cfg.schedule;
    let bs = cfg.batch_size.min(train_set.len());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(cfg.max_steps);
    let mut dev = Vec::new();

    for step in 0..cfg.max_steps {
        if cursor + bs > order.len() {
            order.shuffle(&mut order_rng);
            cursor = 0;
        }
        let batch: Vec<EncodedPair> = order[cursor..cursor + bs]
            .iter()
            .map(|&i| train_set[i].clone())
            .collect();
        cursor += bs;
        let noise = LatentNoise::draw(bs, model.latent_dim(), &mut noise_rng);

        let kl_w = sched.kl_coefficient(step);
        let alternate = sched.kl_mode == KlMode::Alternate && kl_w > 0.0;
        let weights = LossWeights {
            nll: 1.0,
            kl: if alternate { 0.0 } else { kl_w },
            emo: sched.emo_coefficient(step),
            stop_grad_prior: sched.stop_grad_prior,
        };
        let mut grads = model.zeros_like();
        let loss = model
            .forward_train(&batch, &noise, weights, Some(&mut grads))
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { step },
                other => other,
            })?;
        let total = sched.total_loss(&loss, step);
        if !loss.is_finite() || !total.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged { step });
        }
        opt.step(&mut model, &grads);
        if alternate {
            let mut kl_grads = model.zeros_like();
            let w = LossWeights {
                nll: 0.0,
                kl: kl_w,
                emo: 0.0,
                stop_grad_prior: sched.stop_grad_prior,
            };
            model.forward_train(&batch, &noise, w, Some(&mut kl_grads))?;
            if !kl_grads.all_finite() {
                return Err(Error::Diverged { step });
            }
            kl_opt.step(&mut model, &kl_grads);
        }
        log.push(StepRecord { step, loss, total });

        if cfg.eval_every > 0 && !dev_set.is_empty() && (step + 1) % cfg.eval_every == 0 {
            dev.push((
                step + 1,
                evaluate_loss(&model, dev_set, cfg.batch_size, cfg.seed)?,
            ));
        }
        if let Some(obs) = observer.as_deref_mut() {
            obs(step, &model);
        }
    }
    if !dev_set.is_empty() && dev.last().map(|d| d.0) != Some(cfg.max_steps) {
        dev.push((
            cfg.max_steps,
            evaluate_loss(&model, dev_set, cfg.batch_size, cfg.seed)?,
        ));
    }
    Ok(TrainOutcome {
        model,
        log,
        dev,
        steps: cfg.max_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Emotion, NUM_SPECIALS};
    use crate::variant::VariantId;

    fn breakdown() -> LossBreakdown {
        LossBreakdown {
            nll: 2.0,
            kl: 5.0,
            emo_post: 0.25,
            emo_prior: 0.5,
        }
    }

    #[test]
    fn anneal_is_monotone_and_bounded() {
        let s = TrainingSchedule::default();
        let mut prev = 0.0;
        for step in 0..2000 {
            let w = s.anneal_weight(step);
            assert!((0.0..=1.0).contains(&w) && w >= prev);
            prev = w;
        }
        assert_eq!(s.anneal_weight(199), 0.0);
        assert_eq!(s.anneal_weight(450), 0.5);
        assert_eq!(s.anneal_weight(700), 1.0);
    }

    #[test]
    fn gate_selects_interval_steps() {
        let s = TrainingSchedule {
            pretrain_steps: 0,
            warmup_steps: 0,
            ..Default::default()
        };
        assert_eq!(s.total_loss(&breakdown(), 15), 2.0 + 5.0 + 0.75);
        assert_eq!(s.total_loss(&breakdown(), 7), 2.75);
        let huge = LossBreakdown {
            kl: 1e300,
            ..breakdown()
        };
        assert_eq!(s.total_loss(&huge, 7), 2.75);
    }

    #[test]
    fn pretraining_excludes_kl() {
        let s = TrainingSchedule::default();
        assert_eq!(s.total_loss(&breakdown(), 150), 2.75);
        assert_eq!(s.kl_coefficient(150), 0.0);
        assert!(s.kl_coefficient(450) > 0.0);
    }

    #[test]
    fn delayed_emotion_terms() {
        let s = TrainingSchedule {
            emo_start_step: 10,
            ..Default::default()
        };
        assert_eq!(s.total_loss(&breakdown(), 1), 2.0);
        assert_eq!(s.total_loss(&breakdown(), 11), 2.75);
    }

    #[test]
    fn zero_interval_is_rejected() {
        let s = TrainingSchedule {
            kl_interval: 0,
            ..Default::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn kl_mode_parses() {
        assert_eq!("alternate".parse::<KlMode>().unwrap(), KlMode::Alternate);
        assert!("sometimes".parse::<KlMode>().is_err());
    }

    fn tiny_data() -> Vec<EncodedPair> {
        let s = NUM_SPECIALS as u32;
        (0..8)
            .map(|i| EncodedPair {
                post: vec![s + i, s + 8],
                response: vec![s + 9 + i % 2, s + i],
                emotion: Emotion::ALL[i as usize % 8],
            })
            .collect()
    }

    fn tiny_cfg(variant: VariantId) -> TrainConfig {
        let model = ModelConfig {
            hidden_dim: 16,
            ffn_dim: 32,
            heads: 2,
            latent_dim: 4,
            ..ModelConfig::new(variant)
        };
        TrainConfig {
            batch_size: 4,
            max_steps: 20,
            eval_every: 10,
            ..TrainConfig::new(model)
        }
    }

    #[test]
    fn training_is_deterministic_and_logs_every_step() {
        let data = tiny_data();
        let cfg = tiny_cfg(VariantId::EmoCvae);
        let a = train(&data, &data[..2], NUM_SPECIALS + 20, &cfg, None).unwrap();
        let b = train(&data, &data[..2], NUM_SPECIALS + 20, &cfg, None).unwrap();
        assert_eq!(a.model.flatten(), b.model.flatten());
        assert_eq!(a.log.len(), 20);
        assert_eq!(a.dev.iter().map(|d| d.0).collect::<Vec<_>>(), vec![10, 20]);
        assert!(a.log.last().unwrap().loss.nll < a.log[0].loss.nll);
        let mut out = Vec::new();
        write_metrics(&a.log, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
        assert_eq!(text.lines().count(), 21);
    }

    #[test]
    fn alternate_mode_trains() {
        let data = tiny_data();
        let mut cfg = tiny_cfg(VariantId::Cvae);
        cfg.schedule = TrainingSchedule {
            kl_mode: KlMode::Alternate,
            pretrain_steps: 0,
            kl_interval: 2,
            ..Default::default()
        };
        let out = train(&data, &[], NUM_SPECIALS + 20, &cfg, None).unwrap();
        assert!(out.log.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn divergence_reports_step() {
        let data = tiny_data();
        let mut cfg = tiny_cfg(VariantId::Seq2Seq);
        cfg.optimizer.learning_rate = 1e300;
        cfg.optimizer.clip_norm = None;
        match train(&data, &[], NUM_SPECIALS + 20, &cfg, None) {
            Err(Error::Diverged { step }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
