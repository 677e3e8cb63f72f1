//! Conversation data model, synthetic corpus generation, vocabulary and splits.
//!
//! The synthetic corpus is templated: every post names a topic, and every
//! response opens with an emotion-marker phrase followed by topic content.
//! Marker lexicons are pairwise disjoint across emotions, so the emotion of a
//! generated response is recoverable exactly from its words.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const DEFAULT_MAX_LEN: usize = 24;

/// One of the eight annotated emotion categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Emotion {
    Liking,
    Disgust,
    Happiness,
    Sadness,
    Anger,
    Surprise,
    Fear,
    Other,
}

impl Emotion {
    pub const COUNT: usize = 8;

    pub const ALL: [Emotion; 8] = [
        Emotion::Liking,
        Emotion::Disgust,
        Emotion::Happiness,
        Emotion::Sadness,
        Emotion::Anger,
        Emotion::Surprise,
        Emotion::Fear,
        Emotion::Other,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Emotion> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Liking => "liking",
            Emotion::Disgust => "disgust",
            Emotion::Happiness => "happiness",
            Emotion::Sadness => "sadness",
            Emotion::Anger => "anger",
            Emotion::Surprise => "surprise",
            Emotion::Fear => "fear",
            Emotion::Other => "other",
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Emotion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::UnknownEmotion(s.to_string()))
    }
}

/// A post, a response to it, and the emotion expressed by the response.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConversationPair {
    pub post: Vec<String>,
    pub response: Vec<String>,
    pub emotion: Emotion,
}

impl ConversationPair {
    pub fn new(
        post: Vec<String>,
        response: Vec<String>,
        emotion: Emotion,
        max_len: usize,
    ) -> Result<Self> {
        if post.is_empty() || response.is_empty() {
            return Err(Error::Data("post and response must be non-empty".into()));
        }
        if post.len() > max_len || response.len() > max_len {
            return Err(Error::Data(format!(
                "sequence longer than {max_len} tokens (post {}, response {})",
                post.len(),
                response.len()
            )));
        }
        Ok(Self {
            post,
            response,
            emotion,
        })
    }

    pub fn post_text(&self) -> String {
        self.post.join(" ")
    }

    pub fn response_text(&self) -> String {
        self.response.join(" ")
    }
}

/// Emotion proportions, indexed by [`Emotion::id`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmotionMix(pub [f64; 8]);

impl EmotionMix {
    /// Label proportions of the annotated short-text-conversation training set.
    pub const STC_LABELS: EmotionMix = EmotionMix([
        0.2430, 0.0989, 0.0820, 0.0690, 0.0234, 0.0508, 0.0118, 0.4211,
    ]);

    pub fn uniform() -> Self {
        EmotionMix([0.125; 8])
    }

    pub fn weight(&self, e: Emotion) -> f64 {
        self.0[e.id()]
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(e) = Emotion::ALL.iter().find(|e| !(self.0[e.id()] >= 0.0)) {
            return Err(Error::InvalidEmotionMix(format!(
                "weight for {e} is {} (must be non-negative)",
                self.0[e.id()]
            )));
        }
        let sum: f64 = self.0.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidEmotionMix(format!(
                "weights sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    /// Exact per-emotion counts for `n` items by largest remainder.
    pub fn quotas(&self, n: usize) -> [usize; 8] {
        let mut counts = [0usize; 8];
        let mut rema: Vec<(f64, usize)> = Vec::with_capacity(8);
        let mut assigned = 0;
        for (i, w) in self.0.iter().enumerate() {
            let exact = w * n as f64;
            counts[i] = exact.floor() as usize;
            assigned += counts[i];
            rema.push((exact - exact.floor(), i));
        }
        rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in rema.iter().take(n.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        counts
    }
}

impl Default for EmotionMix {
    fn default() -> Self {
        Self::STC_LABELS
    }
}

impl FromStr for EmotionMix {
    type Err = Error;

    /// Parses eight comma-separated weights in label-id order.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 8 {
            return Err(Error::InvalidEmotionMix(format!(
                "expected 8 weights, got {}",
                parts.len()
            )));
        }
        let mut w = [0.0; 8];
        for (slot, p) in w.iter_mut().zip(parts) {
            *slot = p
                .parse()
                .map_err(|_| Error::InvalidEmotionMix(format!("bad weight `{p}`")))?;
        }
        Ok(EmotionMix(w))
    }
}

impl fmt::Display for EmotionMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|w| w.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

// --- synthetic corpus -------------------------------------------------------

const TOPICS: [(&str, [&str; 3]); 40] = [
    ("coffee", ["espresso", "beans", "mug"]),
    ("tea", ["kettle", "leaves", "teapot"]),
    ("pizza", ["cheese", "crust", "oven"]),
    ("football", ["goal", "stadium", "referee"]),
    ("guitar", ["strings", "chords", "amp"]),
    ("garden", ["roses", "soil", "shovel"]),
    ("rain", ["umbrella", "puddles", "clouds"]),
    ("winter", ["snow", "scarf", "frost"]),
    ("beach", ["sand", "waves", "sunscreen"]),
    ("movie", ["cinema", "popcorn", "trailer"]),
    ("train", ["station", "ticket", "platform"]),
    ("exam", ["grades", "revision", "classroom"]),
    ("puppy", ["leash", "bark", "kennel"]),
    ("cat", ["whiskers", "litter", "yarn"]),
    ("bicycle", ["pedals", "helmet", "saddle"]),
    ("phone", ["battery", "screen", "charger"]),
    ("concert", ["stage", "crowd", "encore"]),
    ("birthday", ["cake", "candles", "balloons"]),
    ("office", ["desk", "meeting", "printer"]),
    ("kitchen", ["stove", "recipe", "spatula"]),
    ("mountain", ["summit", "trail", "boots"]),
    ("ocean", ["whales", "tide", "harbor"]),
    ("library", ["books", "shelves", "librarian"]),
    ("painting", ["canvas", "brushes", "easel"]),
    ("chess", ["bishop", "checkmate", "pawns"]),
    ("marathon", ["runners", "finish", "sneakers"]),
    ("camera", ["lens", "tripod", "shutter"]),
    ("bakery", ["bread", "croissant", "flour"]),
    ("airport", ["luggage", "gate", "boarding"]),
    ("hospital", ["nurse", "ward", "doctor"]),
    ("wedding", ["bride", "rings", "vows"]),
    ("computer", ["keyboard", "monitor", "software"]),
    ("forest", ["pines", "owls", "cabin"]),
    ("river", ["bridge", "canoe", "fishing"]),
    ("snowboard", ["slopes", "lift", "goggles"]),
    ("museum", ["statues", "exhibit", "gallery"]),
    ("festival", ["lanterns", "fireworks", "parade"]),
    ("homework", ["essay", "deadline", "notebook"]),
    ("subway", ["carriage", "tunnel", "commuters"]),
    ("soup", ["noodles", "broth", "spoon"]),
];

pub const MAX_TOPICS: usize = TOPICS.len();

// {t} is the topic name, {w} one of its related words.
const POST_TEMPLATES: [&str; 6] = [
    "tell me about the {t} {w}",
    "what do you think of the {t} {w}",
    "any news on the {t} {w}",
    "have you seen the {w} at the {t}",
    "thoughts on {t} and {w}",
    "guess what about the {t} {w}",
];

const CONTENT_TEMPLATES: [&str; 6] = [
    "the {t} is here",
    "{w} and {t}",
    "about the {w} of the {t}",
    "my {t} has {w}",
    "talking of {t} and {w}",
    "that {w} at the {t} again",
];

const MARKERS: [[&str; 10]; 8] = [
    // liking
    [
        "love",
        "adore",
        "lovely",
        "fond",
        "cherish",
        "darling",
        "charming",
        "favorite",
        "love love",
        "adore darling",
    ],
    // disgust
    [
        "gross",
        "yuck",
        "nasty",
        "ew",
        "revolting",
        "vile",
        "filthy",
        "icky",
        "yuck gross",
        "ew nasty",
    ],
    // happiness
    [
        "yay",
        "hooray",
        "joyful",
        "delighted",
        "cheerful",
        "glad",
        "happy",
        "grinning",
        "yay hooray",
        "happy glad",
    ],
    // sadness
    [
        "sigh",
        "sad",
        "tears",
        "gloomy",
        "heartbroken",
        "sorrow",
        "miserable",
        "crying",
        "sigh sad",
        "tears alas",
    ],
    // anger
    [
        "furious",
        "angry",
        "outraged",
        "livid",
        "rage",
        "annoyed",
        "hate",
        "mad",
        "grr",
        "grr furious",
    ],
    // surprise
    [
        "wow",
        "whoa",
        "unbelievable",
        "omg",
        "astonishing",
        "shocked",
        "gosh",
        "unexpected",
        "wow whoa",
        "omg gosh",
    ],
    // fear
    [
        "scared",
        "afraid",
        "terrified",
        "frightening",
        "nervous",
        "eek",
        "creepy",
        "spooky",
        "panic",
        "eek scared",
    ],
    // other
    [
        "well", "okay", "hmm", "noted", "sure", "right", "anyway", "maybe", "alright", "hmm okay",
    ],
];

/// The marker phrases used for `emotion` in generated responses.
pub fn marker_phrases(emotion: Emotion) -> &'static [&'static str] {
    &MARKERS[emotion.id()]
}

/// Every word occurring in the marker phrases of `emotion`.
pub fn marker_words(emotion: Emotion) -> HashSet<&'static str> {
    marker_phrases(emotion)
        .iter()
        .flat_map(|p| p.split_whitespace())
        .collect()
}

/// Synthetic corpus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub size: usize,
    pub topics: usize,
    pub emotion_mix: EmotionMix,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            size: 5000,
            topics: MAX_TOPICS,
            emotion_mix: EmotionMix::STC_LABELS,
            seed: 7,
        }
    }
}

fn fill(template: &str, topic: &str, word: &str) -> Vec<String> {
    template
        .split_whitespace()
        .map(|tok| match tok {
            "{t}" => topic.to_string(),
            "{w}" => word.to_string(),
            other => other.to_string(),
        })
        .collect()
}

/// Generates a templated corpus whose label frequencies follow the mix exactly
/// (up to rounding to whole pairs).
pub fn generate_synthetic_corpus(spec: &SynthSpec) -> Result<Vec<ConversationPair>> {
    if spec.size == 0 {
        return Err(Error::InvalidCorpusSpec("size must be at least 1".into()));
    }
    if spec.topics == 0 || spec.topics > MAX_TOPICS {
        return Err(Error::InvalidCorpusSpec(format!(
            "topic count must be in 1..={MAX_TOPICS}, got {}",
            spec.topics
        )));
    }
    spec.emotion_mix.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let quotas = spec.emotion_mix.quotas(spec.size);
    let mut labels: Vec<Emotion> = Emotion::ALL
        .iter()
        .flat_map(|&e| std::iter::repeat_n(e, quotas[e.id()]))
        .collect();
    labels.shuffle(&mut rng);

    let mut pairs = Vec::with_capacity(spec.size);
    for emotion in labels {
        let (topic, words) = TOPICS[rng.random_range(0..spec.topics)];
        let post_t = POST_TEMPLATES[rng.random_range(0..POST_TEMPLATES.len())];
        let post_w = words[rng.random_range(0..words.len())];
        let content_t = CONTENT_TEMPLATES[rng.random_range(0..CONTENT_TEMPLATES.len())];
        let content_w = words[rng.random_range(0..words.len())];
        let phrases = marker_phrases(emotion);
        let marker = phrases[rng.random_range(0..phrases.len())];

        let post = fill(post_t, topic, post_w);
        let mut response: Vec<String> = marker.split_whitespace().map(str::to_string).collect();
        response.extend(fill(content_t, topic, content_w));
        pairs.push(ConversationPair::new(
            post,
            response,
            emotion,
            DEFAULT_MAX_LEN,
        )?);
    }
    Ok(pairs)
}

// --- vocabulary -------------------------------------------------------------

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
const EMOTION_BASE: TokenId = 2;
pub const ENC_POSTERIOR: TokenId = 10;
pub const ENC_PRIOR: TokenId = 11;
pub const SEP: TokenId = 12;
pub const Z: TokenId = 13;
pub const SOS: TokenId = 14;
pub const EOS: TokenId = 15;
/// Summary slot for the auxiliary sequence classifiers.
pub const CLS: TokenId = 16;
pub const NUM_SPECIALS: usize = 17;

/// Vocabulary id of the `[Emotion]` token for `e`.
pub fn emotion_token(e: Emotion) -> TokenId {
    EMOTION_BASE + e.id() as TokenId
}

fn special_names() -> Vec<String> {
    let mut names = vec!["[PAD]".to_string(), "[UNK]".to_string()];
    names.extend(Emotion::ALL.iter().map(|e| format!("[Emotion:{e}]")));
    names.extend(
        [
            "[ENC_posterior]",
            "[ENC_prior]",
            "[SEP]",
            "[z]",
            "[SOS]",
            "[EOS]",
            "[CLS]",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    names
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from the special tokens followed by `content`.
    pub fn from_content<I: IntoIterator<Item = String>>(content: I) -> Result<Self> {
        let mut tokens = special_names();
        tokens.extend(content);
        Self::from_tokens(tokens)
    }

    /// Accepts a full id-ordered token list; the special block must come first.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let specials = special_names();
        if tokens.len() < specials.len() || tokens[..specials.len()] != specials[..] {
            return Err(Error::Data(
                "vocabulary does not start with the reserved special tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn content_len(&self) -> usize {
        self.tokens.len() - NUM_SPECIALS
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or("[UNK]")
    }

    pub fn is_content(id: TokenId) -> bool {
        id as usize >= NUM_SPECIALS
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(w, "{t}\t{i}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::MalformedRecord {
                    line: n + 1,
                    reason: "expected `token<TAB>id`".into(),
                })?;
            let id: usize = id.parse().map_err(|_| Error::MalformedRecord {
                line: n + 1,
                reason: format!("bad id `{id}`"),
            })?;
            if id != tokens.len() {
                return Err(Error::MalformedRecord {
                    line: n + 1,
                    reason: format!("ids must be dense, got {id}"),
                });
            }
            tokens.push(tok.to_string());
        }
        Self::from_tokens(tokens)
    }
}

/// Every post/response token seen at least `min_freq` times gets an id.
pub fn build_vocab(pairs: &[ConversationPair], min_freq: usize) -> Result<Vocabulary> {
    if pairs.is_empty() {
        return Err(Error::Data(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    if min_freq == 0 {
        return Err(Error::Data("min_freq must be at least 1".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for p in pairs {
        for t in p.post.iter().chain(&p.response) {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let specials: HashSet<String> = special_names().into_iter().collect();
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq && !specials.contains(*t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Vocabulary::from_content(kept.into_iter().map(|(t, _)| t.to_string()))
}

/// A pair mapped to vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EncodedPair {
    pub post: Vec<TokenId>,
    pub response: Vec<TokenId>,
    pub emotion: Emotion,
}

pub fn encode_pair(pair: &ConversationPair, vocab: &Vocabulary) -> EncodedPair {
    EncodedPair {
        post: vocab.encode(&pair.post),
        response: vocab.encode(&pair.response),
        emotion: pair.emotion,
    }
}

// --- splits -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<ConversationPair>,
    pub dev: Vec<ConversationPair>,
    pub test: Vec<ConversationPair>,
    pub seed: u64,
}

impl CorpusSplit {
    pub fn partitions(&self) -> [(&'static str, &[ConversationPair]); 3] {
        [
            ("train", &self.train),
            ("dev", &self.dev),
            ("test", &self.test),
        ]
    }
}

/// Splits by unique post so that no post appears in two partitions.
///
/// `ratios` are (train, dev, test) weights. Post groups are shuffled with
/// `seed` and partition sizes (in post groups) follow the ratios by largest
/// remainder.
pub fn split_corpus(
    pairs: &[ConversationPair],
    ratios: [f64; 3],
    seed: u64,
) -> Result<CorpusSplit> {
    if ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::InvalidRatios(format!(
            "ratios must be positive, got {ratios:?}"
        )));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidRatios(format!(
            "ratios sum to {sum}, expected 1"
        )));
    }

    let mut groups: BTreeMap<&[String], Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        groups.entry(p.post.as_slice()).or_default().push(i);
    }
    let posts = groups.len();
    if posts < ratios.len() {
        return Err(Error::NotEnoughPosts {
            posts,
            parts: ratios.len(),
        });
    }

    let mut keys: Vec<&[String]> = groups.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    keys.shuffle(&mut rng);

    let mut sizes = [0usize; 3];
    let mut rema = Vec::with_capacity(3);
    for (i, r) in ratios.iter().enumerate() {
        let exact = r * posts as f64;
        sizes[i] = exact.floor() as usize;
        rema.push((exact - exact.floor(), i));
    }
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = posts - sizes.iter().sum::<usize>();
    for &(_, i) in rema.iter().take(short) {
        sizes[i] += 1;
    }
    // Every partition gets at least one post group.
    for i in 0..3 {
        while sizes[i] == 0 {
            let donor = (0..3).max_by_key(|&j| sizes[j]).unwrap();
            sizes[donor] -= 1;
            sizes[i] += 1;
        }
    }

    let mut parts: [Vec<ConversationPair>; 3] = Default::default();
    let mut cursor = 0;
    for (part, size) in parts.iter_mut().zip(sizes) {
        for key in &keys[cursor..cursor + size] {
            part.extend(groups[key].iter().map(|&i| pairs[i].clone()));
        }
        cursor += size;
    }
    let [train, dev, test] = parts;
    Ok(CorpusSplit {
        train,
        dev,
        test,
        seed,
    })
}

// --- corpus files -----------------------------------------------------------

/// Writes `post<TAB>response<TAB>emotion_name` records.
pub fn write_corpus<W: Write>(pairs: &[ConversationPair], mut w: W) -> Result<()> {
    for p in pairs {
        writeln!(w, "{}\t{}\t{}", p.post_text(), p.response_text(), p.emotion)?;
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(r: R, max_len: usize) -> Result<Vec<ConversationPair>> {
    let mut pairs = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::MalformedRecord {
                line: n + 1,
                reason: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let emotion: Emotion = fields[2]
            .trim()
            .parse()
            .map_err(|_| Error::MalformedRecord {
                line: n + 1,
                reason: format!("unknown emotion `{}`", fields[2]),
            })?;
        let words = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        let pair = ConversationPair::new(words(fields[0]), words(fields[1]), emotion, max_len)
            .map_err(|e| Error::MalformedRecord {
                line: n + 1,
                reason: e.to_string(),
            })?;
        pairs.push(pair);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(post: &str, resp: &str, e: Emotion) -> ConversationPair {
        let w = |s: &str| s.split_whitespace().map(str::to_string).collect();
        ConversationPair::new(w(post), w(resp), e, DEFAULT_MAX_LEN).unwrap()
    }

    #[test]
    fn emotion_ids_are_a_bijection() {
        for (i, e) in Emotion::ALL.iter().enumerate() {
            assert_eq!(e.id(), i);
            assert_eq!(Emotion::from_id(i), Some(*e));
            assert_eq!(e.name().parse::<Emotion>().unwrap(), *e);
        }
        assert_eq!("anger".parse::<Emotion>().unwrap().id(), 4);
        assert!("joy".parse::<Emotion>().is_err());
    }

    #[test]
    fn table_mix_is_valid() {
        EmotionMix::STC_LABELS.validate().unwrap();
        assert_eq!(EmotionMix::STC_LABELS.weight(Emotion::Other), 0.4211);
        assert_eq!(EmotionMix::STC_LABELS.weight(Emotion::Liking), 0.2430);
    }

    #[test]
    fn bad_mixes_are_rejected() {
        let mut neg = EmotionMix::uniform();
        neg.0[0] = -0.125;
        neg.0[1] = 0.375;
        assert!(matches!(neg.validate(), Err(Error::InvalidEmotionMix(_))));
        let mut short = EmotionMix::uniform();
        short.0[7] = 0.1;
        assert!(matches!(short.validate(), Err(Error::InvalidEmotionMix(_))));
        let spec = SynthSpec {
            emotion_mix: short,
            ..SynthSpec::default()
        };
        assert!(generate_synthetic_corpus(&spec).is_err());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let spec = SynthSpec {
            size: 0,
            ..SynthSpec::default()
        };
        assert!(matches!(
            generate_synthetic_corpus(&spec),
            Err(Error::InvalidCorpusSpec(_))
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec {
            size: 300,
            seed: 7,
            ..SynthSpec::default()
        };
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_corpus(&generate_synthetic_corpus(&spec).unwrap(), &mut a).unwrap();
        write_corpus(&generate_synthetic_corpus(&spec).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
        let other = SynthSpec { seed: 8, ..spec };
        let mut c = Vec::new();
        write_corpus(&generate_synthetic_corpus(&other).unwrap(), &mut c).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn label_frequencies_follow_mix() {
        let spec = SynthSpec {
            size: 10_000,
            seed: 3,
            ..SynthSpec::default()
        };
        let pairs = generate_synthetic_corpus(&spec).unwrap();
        let mut counts = [0usize; 8];
        for p in &pairs {
            counts[p.emotion.id()] += 1;
        }
        for e in Emotion::ALL {
            let freq = counts[e.id()] as f64 / pairs.len() as f64;
            assert!(
                (freq - spec.emotion_mix.weight(e)).abs() < 0.02,
                "{e}: {freq}"
            );
        }
    }

    #[test]
    fn marker_lexicons_are_disjoint_and_absent_from_templates() {
        let mut seen: HashMap<&str, Emotion> = HashMap::new();
        for e in Emotion::ALL {
            assert!(marker_phrases(e).len() >= 8);
            for w in marker_words(e) {
                if let Some(prev) = seen.insert(w, e) {
                    assert_eq!(prev, e, "`{w}` shared by {prev} and {e}");
                }
            }
        }
        let template_words = POST_TEMPLATES
            .iter()
            .chain(&CONTENT_TEMPLATES)
            .flat_map(|t| t.split_whitespace())
            .chain(
                TOPICS
                    .iter()
                    .flat_map(|(t, ws)| std::iter::once(*t).chain(ws.iter().copied())),
            );
        for w in template_words {
            assert!(
                !seen.contains_key(w),
                "`{w}` is both a marker and a template word"
            );
        }
    }

    #[test]
    fn responses_carry_topic_and_marker() {
        let pairs = generate_synthetic_corpus(&SynthSpec {
            size: 200,
            ..SynthSpec::default()
        })
        .unwrap();
        for p in &pairs {
            let markers = marker_words(p.emotion);
            assert!(markers.contains(p.response[0].as_str()));
            let topic = TOPICS
                .iter()
                .find(|(t, _)| p.post.iter().any(|w| w == t))
                .unwrap();
            assert!(p
                .response
                .iter()
                .any(|w| w == topic.0 || topic.1.contains(&w.as_str())));
            assert!(p.post.len() <= DEFAULT_MAX_LEN && p.response.len() <= DEFAULT_MAX_LEN);
        }
    }

    #[test]
    fn vocab_respects_min_freq() {
        let pairs = vec![
            pair("a b", "x", Emotion::Other),
            pair("a c", "x", Emotion::Other),
        ];
        let v = build_vocab(&pairs, 2).unwrap();
        assert!(v.contains("a") && v.contains("x"));
        assert_eq!(v.id("b"), UNK);
        assert_eq!(v.id("c"), UNK);
        let v1 = build_vocab(&pairs, 1).unwrap();
        for t in ["a", "b", "c", "x"] {
            assert!(v1.contains(t));
        }
        assert_eq!(v1.content_len(), 4);
        assert!(build_vocab(&pairs, 0).is_err());
        assert!(build_vocab(&[], 1).is_err());
    }

    #[test]
    fn vocab_reserves_specials_below_content() {
        let pairs = vec![pair("a b", "c", Emotion::Fear)];
        let v = build_vocab(&pairs, 1).unwrap();
        assert_eq!(v.token(PAD), "[PAD]");
        assert_eq!(v.token(EOS), "[EOS]");
        assert_eq!(v.token(emotion_token(Emotion::Anger)), "[Emotion:anger]");
        for name in special_names() {
            assert!((v.id(&name) as usize) < NUM_SPECIALS);
        }
        for t in ["a", "b", "c"] {
            assert!(v.id(t) as usize >= NUM_SPECIALS);
        }
    }

    #[test]
    fn vocab_file_round_trip() {
        let pairs = generate_synthetic_corpus(&SynthSpec {
            size: 50,
            ..SynthSpec::default()
        })
        .unwrap();
        let v = build_vocab(&pairs, 1).unwrap();
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("[PAD]\t0\n[UNK]\t1\n"));
        assert_eq!(Vocabulary::read(&buf[..]).unwrap(), v);
    }

    #[test]
    fn encode_pair_maps_unknowns_and_round_trips() {
        let pairs = vec![pair("a b", "c d", Emotion::Anger)];
        let v = build_vocab(&pairs, 1).unwrap();
        let enc = encode_pair(&pairs[0], &v);
        assert_eq!(v.decode(&enc.post), pairs[0].post);
        assert_eq!(v.decode(&enc.response), pairs[0].response);
        assert_eq!(enc.emotion.id(), 4);
        let novel = pair("a zebra", "c", Emotion::Anger);
        assert_eq!(encode_pair(&novel, &v).post[1], UNK);
    }

    #[test]
    fn split_sizes_follow_ratios() {
        let pairs: Vec<_> = (0..100)
            .map(|i| pair(&format!("post {i}"), "r", Emotion::Other))
            .collect();
        let s = split_corpus(&pairs, [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (80, 10, 10));
        assert_eq!(s, split_corpus(&pairs, [0.8, 0.1, 0.1], 1).unwrap());
    }

    #[test]
    fn split_keeps_post_groups_together() {
        let mut pairs = Vec::new();
        for i in 0..10 {
            for j in 0..4 {
                pairs.push(pair(&format!("p{i}"), &format!("r{j}"), Emotion::Liking));
            }
        }
        let s = split_corpus(&pairs, [0.6, 0.2, 0.2], 5).unwrap();
        for part in [&s.train, &s.dev, &s.test] {
            assert_eq!(part.len() % 4, 0);
        }
    }

    #[test]
    fn split_errors() {
        let pairs = vec![
            pair("a", "b", Emotion::Other),
            pair("c", "d", Emotion::Other),
        ];
        assert!(matches!(
            split_corpus(&pairs, [0.8, 0.1, 0.1], 0),
            Err(Error::NotEnoughPosts { posts: 2, parts: 3 })
        ));
        assert!(split_corpus(&pairs, [0.5, 0.5, 0.5], 0).is_err());
        assert!(split_corpus(&pairs, [1.0, 0.0, 0.0], 0).is_err());
    }

    #[test]
    fn corpus_file_round_trip_and_errors() {
        let pairs = generate_synthetic_corpus(&SynthSpec {
            size: 20,
            ..SynthSpec::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_corpus(&pairs, &mut buf).unwrap();
        assert_eq!(read_corpus(&buf[..], DEFAULT_MAX_LEN).unwrap(), pairs);
        assert!(matches!(
            read_corpus("a b\tc\n".as_bytes(), 24),
            Err(Error::MalformedRecord { line: 1, .. })
        ));
        assert!(read_corpus("a\tb\tjoy\n".as_bytes(), 24).is_err());
    }
}
