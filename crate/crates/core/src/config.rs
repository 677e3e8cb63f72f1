//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique and
//! serialized in sorted order.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::corpus::{Emotion, SynthSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pipeline::{EvalPlan, ScorerSuiteConfig};
use crate::rerank_eval::{lambda_grid, RerankConfig};
use crate::training::TrainConfig;
use crate::variant::VariantId;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if entries
                .insert(key.to_string(), v.trim().to_string())
                .is_some()
            {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    i + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn serialize(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Entries of `other` override entries of `self`.
    pub fn merged(mut self, other: &FlatConfig) -> Self {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
        self
    }
}

/// Every setting a command may read, with defaults for absent keys.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub corpus: SynthSpec,
    pub train: TrainConfig,
    pub scorers: ScorerSuiteConfig,
    pub eval: EvalPlan,
    /// `(min, max, step)` of the lambda sweep.
    pub sweep: (f64, f64, f64),
    pub variants: Vec<VariantId>,
    pub seeds: Vec<u64>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            corpus: SynthSpec::default(),
            train: TrainConfig::new(ModelConfig::new(VariantId::EmoCvae)),
            scorers: ScorerSuiteConfig::default(),
            eval: EvalPlan::default(),
            sweep: (0.2, 1.2, 0.1),
            variants: VariantId::ALL.to_vec(),
            seeds: vec![1, 2, 3],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_clip(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl Settings {
    pub fn from_flat(flat: &FlatConfig) -> Result<Self> {
        let mut s = Self::default();
        for key in flat.keys() {
            let v = flat.get(key).expect("present");
            s.apply(key, v)?;
        }
        s.validate()?;
        Ok(s)
    }

    fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.train.model;
        let sch = &mut self.train.schedule;
        match key {
            "corpus.size" => self.corpus.size = parse(key, v)?,
            "corpus.topics" => self.corpus.topics = parse(key, v)?,
            "corpus.emotion_mix" => self.corpus.emotion_mix = parse(key, v)?,
            "corpus.seed" => self.corpus.seed = parse(key, v)?,
            "model.variant" => m.variant = parse(key, v)?,
            "model.hidden_dim" => m.hidden_dim = parse(key, v)?,
            "model.layers" => m.layers = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.ffn_dim" => m.ffn_dim = parse(key, v)?,
            "model.latent_dim" => m.latent_dim = parse(key, v)?,
            "model.max_positions" => m.max_positions = parse(key, v)?,
            "model.init_std" => m.init_std = parse(key, v)?,
            "model.tie_embeddings" => m.tie_embeddings = parse(key, v)?,
            "train.steps" => self.train.max_steps = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.eval_every" => self.train.eval_every = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.learning_rate" => self.train.optimizer.learning_rate = parse(key, v)?,
            "train.clip_norm" => self.train.optimizer.clip_norm = parse_clip(key, v)?,
            "train.pretrain_steps" => sch.pretrain_steps = parse(key, v)?,
            "train.warmup_steps" => sch.warmup_steps = parse(key, v)?,
            "train.kl_interval" => sch.kl_interval = parse(key, v)?,
            "train.kl_mode" => sch.kl_mode = parse(key, v)?,
            "train.emo_weight" => sch.emo_weight = parse(key, v)?,
            "train.emo_start_step" => sch.emo_start_step = parse(key, v)?,
            "train.stop_grad_prior" => sch.stop_grad_prior = parse(key, v)?,
            "scorer.seed" => self.scorers = self.scorers.clone().with_seed(parse(key, v)?),
            "scorer.emotion_steps" => self.scorers.emotion.steps = parse(key, v)?,
            "scorer.coherence_steps" => self.scorers.coherence.steps = parse(key, v)?,
            "scorer.lm_steps" => self.scorers.lm.steps = parse(key, v)?,
            "eval.max_posts" => self.eval.max_posts = parse(key, v)?,
            "eval.emotions" => self.eval.emotions = parse_list::<Emotion>(key, v)?,
            "eval.candidates" => self.eval.candidates = parse(key, v)?,
            "eval.beam_size" => self.eval.decode.beam_size = parse(key, v)?,
            "eval.max_len" => self.eval.decode.max_len = parse(key, v)?,
            "eval.lambda" => self.eval.rerank = RerankConfig::new(parse(key, v)?)?,
            "eval.seed" => self.eval.seed = parse(key, v)?,
            "eval.sweep_min" => self.sweep.0 = parse(key, v)?,
            "eval.sweep_max" => self.sweep.1 = parse(key, v)?,
            "eval.sweep_step" => self.sweep.2 = parse(key, v)?,
            "ablate.variants" => self.variants = parse_list(key, v)?,
            "ablate.seeds" => self.seeds = parse_list(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.eval.decode.validate()?;
        if self.eval.candidates == 0 || self.eval.emotions.is_empty() {
            return Err(Error::Config(
                "eval needs at least one candidate and one emotion".into(),
            ));
        }
        if self.variants.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(
                "ablation needs at least one variant and one seed".into(),
            ));
        }
        self.sweep_grid().map(|_| ())
    }

    pub fn sweep_grid(&self) -> Result<Vec<f64>> {
        lambda_grid(self.sweep.0, self.sweep.1, self.sweep.2)
    }

    /// Every key with its current value.
    pub fn to_flat(&self) -> FlatConfig {
        let mut f = FlatConfig::default();
        let m = &self.train.model;
        let sch = &self.train.schedule;
        f.set("corpus.size", self.corpus.size);
        f.set("corpus.topics", self.corpus.topics);
        f.set("corpus.emotion_mix", &self.corpus.emotion_mix);
        f.set("corpus.seed", self.corpus.seed);
        f.set("model.variant", m.variant);
        f.set("model.hidden_dim", m.hidden_dim);
        f.set("model.layers", m.layers);
        f.set("model.heads", m.heads);
        f.set("model.ffn_dim", m.ffn_dim);
        f.set("model.latent_dim", m.latent_dim);
        f.set("model.max_positions", m.max_positions);
        f.set("model.init_std", m.init_std);
        f.set("model.tie_embeddings", m.tie_embeddings);
        f.set("train.steps", self.train.max_steps);
        f.set("train.batch_size", self.train.batch_size);
        f.set("train.eval_every", self.train.eval_every);
        f.set("train.seed", self.train.seed);
        f.set("train.learning_rate", self.train.optimizer.learning_rate);
        f.set(
            "train.clip_norm",
            self.train
                .optimizer
                .clip_norm
                .map_or("none".to_string(), |c| c.to_string()),
        );
        f.set("train.pretrain_steps", sch.pretrain_steps);
        f.set("train.warmup_steps", sch.warmup_steps);
        f.set("train.kl_interval", sch.kl_interval);
        f.set("train.kl_mode", sch.kl_mode.name());
        f.set("train.emo_weight", sch.emo_weight);
        f.set("train.emo_start_step", sch.emo_start_step);
        f.set("train.stop_grad_prior", sch.stop_grad_prior);
        f.set("scorer.seed", self.scorers.emotion.seed);
        f.set("scorer.emotion_steps", self.scorers.emotion.steps);
        f.set("scorer.coherence_steps", self.scorers.coherence.steps);
        f.set("scorer.lm_steps", self.scorers.lm.steps);
        f.set("eval.max_posts", self.eval.max_posts);
        f.set("eval.emotions", join(&self.eval.emotions));
        f.set("eval.candidates", self.eval.candidates);
        f.set("eval.beam_size", self.eval.decode.beam_size);
        f.set("eval.max_len", self.eval.decode.max_len);
        f.set("eval.lambda", self.eval.rerank.lambda);
        f.set("eval.seed", self.eval.seed);
        f.set("eval.sweep_min", self.sweep.0);
        f.set("eval.sweep_max", self.sweep.1);
        f.set("eval.sweep_step", self.sweep.2);
        f.set("ablate.variants", join(&self.variants));
        f.set("ablate.seeds", join(&self.seeds));
        f
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_comments_and_rejects_junk() {
        let f = FlatConfig::parse("# run\n\n model.variant = CVAE \ntrain.steps=10\n").unwrap();
        assert_eq!(f.get("model.variant"), Some("CVAE"));
        assert_eq!(f.serialize(), "model.variant=CVAE\ntrain.steps=10\n");
        assert!(FlatConfig::parse("a=1\na=2").is_err());
        assert!(FlatConfig::parse("novalue").is_err());
        assert!(FlatConfig::parse("=3").is_err());
        let s = Settings::from_flat(&f).unwrap();
        assert_eq!(s.train.model.variant, VariantId::Cvae);
        assert_eq!(s.train.max_steps, 10);
        assert!(Settings::from_flat(&FlatConfig::parse("train.stepz=1").unwrap()).is_err());
        assert!(Settings::from_flat(&FlatConfig::parse("train.steps=ten").unwrap()).is_err());
        assert!(Settings::from_flat(&FlatConfig::parse("eval.lambda=-1").unwrap()).is_err());
    }

    #[test]
    fn settings_round_trip() {
        let mut s = Settings::default();
        s.train.optimizer.clip_norm = None;
        s.train.optimizer.learning_rate = 3.7e-4;
        s.eval.emotions = vec![Emotion::Fear, Emotion::Anger];
        s.variants = vec![VariantId::CvaeM2];
        let back =
            Settings::from_flat(&FlatConfig::parse(&s.to_flat().serialize()).unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(Settings::default().sweep_grid().unwrap().len(), 11);
    }

    proptest! {
        #[test]
        fn parse_serialize_parse_is_parse(
            entries in prop::collection::btree_map("[a-z][a-z._]{0,8}", "[ -~&&[^=#]]{0,12}", 0..8),
        ) {
            let text: String = entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
            let once = FlatConfig::parse(&text).unwrap();
            let twice = FlatConfig::parse(&once.serialize()).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
