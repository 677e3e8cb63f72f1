//! Token layouts and attention-relationship matrices for the encoder and
//! decoder stacks.
//!
//! Encoder (training): `[ENC_posterior] [ENC_prior] [Emotion] {post} [SEP](0) {resp} [SEP](1)`.
//! Encoder (testing):  `[ENC_prior] [Emotion] {post} [SEP](0)`.
//! Decoder (training): `[z] {post} [SOS] {resp} [EOS]`.
//! Decoder (testing):  `[z] {post} [SOS]`, extended one token at a time.
//!
//! Masks are computed from the role sequence alone. Row `i` of a mask lists
//! the tokens that token `i` may attend to.

use std::fmt;

use crate::corpus::{self, Emotion, TokenId};
use crate::error::{Error, Result};
use crate::variant::VariantId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    EncPosterior,
    EncPrior,
    Emotion,
    Post,
    Sep0,
    Resp,
    Sep1,
    Z,
    Sos,
    Eos,
    Pad,
    Cls,
}

impl Role {
    pub fn tag(self) -> &'static str {
        match self {
            Role::EncPosterior => "ENC_POSTERIOR",
            Role::EncPrior => "ENC_PRIOR",
            Role::Emotion => "EMOTION",
            Role::Post => "POST",
            Role::Sep0 => "SEP0",
            Role::Resp => "RESP",
            Role::Sep1 => "SEP1",
            Role::Z => "Z",
            Role::Sos => "SOS",
            Role::Eos => "EOS",
            Role::Pad => "PAD",
            Role::Cls => "CLS",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stack {
    Encoder,
    Decoder,
    /// Scorer models (classifier, coherence discriminator, language model).
    Auxiliary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutToken {
    pub role: Role,
    pub segment: u8,
    pub position: usize,
    pub id: TokenId,
}

/// An ordered, role-tagged token sequence for one stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    tokens: Vec<LayoutToken>,
    stack: Stack,
    mode: Mode,
}

impl TokenLayout {
    /// Checks the structural invariants: positions strictly increasing.
    pub fn new(tokens: Vec<LayoutToken>, stack: Stack, mode: Mode) -> Result<Self> {
        if tokens.windows(2).any(|w| w[1].position <= w[0].position) {
            return Err(Error::Layout(
                "positions must be strictly increasing".into(),
            ));
        }
        if tokens.iter().any(|t| t.segment > 1) {
            return Err(Error::Layout("segment ids are 0 or 1".into()));
        }
        Ok(Self {
            tokens,
            stack,
            mode,
        })
    }

    pub fn tokens(&self) -> &[LayoutToken] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn stack(&self) -> Stack {
        self.stack
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn roles(&self) -> Vec<Role> {
        self.tokens.iter().map(|t| t.role).collect()
    }

    pub fn ids(&self) -> Vec<TokenId> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    /// Index of the first token with `role`.
    pub fn find(&self, role: Role) -> Option<usize> {
        self.tokens.iter().position(|t| t.role == role)
    }

    pub fn indices_of(&self, role: Role) -> Vec<usize> {
        (0..self.tokens.len())
            .filter(|&i| self.tokens[i].role == role)
            .collect()
    }

    pub fn last(&self) -> Option<&LayoutToken> {
        self.tokens.last()
    }

    pub fn roles_header(&self) -> String {
        self.tokens
            .iter()
            .map(|t| t.role.tag())
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Square boolean matrix; `get(i, j)` is true iff token `i` may attend to `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                bits.push(f(i, j));
            }
        }
        Self { n, bits }
    }

    pub fn full(n: usize) -> Self {
        Self::from_fn(n, |_, _| true)
    }

    /// Lower-triangular (each token sees itself and everything before it).
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, |i, j| j <= i)
    }

    pub fn self_only(n: usize) -> Self {
        Self::from_fn(n, |i, j| i == j)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.n..(i + 1) * self.n]
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.row(i).iter().filter(|b| **b).count()
    }

    /// Leading `k × k` block.
    pub fn submatrix(&self, k: usize) -> AttentionMask {
        Self::from_fn(k, |i, j| self.get(i, j))
    }

    /// Text grid with a `rows=N roles=...` header, one line of 0/1 per row.
    pub fn to_grid(&self, layout: &TokenLayout) -> String {
        let mut out = format!("rows={} roles={}\n", self.n, layout.roles_header());
        for i in 0..self.n {
            out.extend(self.row(i).iter().map(|&b| if b { '1' } else { '0' }));
            out.push('\n');
        }
        out
    }

    /// Parses a grid written by [`AttentionMask::to_grid`], returning the role tags too.
    pub fn from_grid(text: &str) -> Result<(Vec<String>, AttentionMask)> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Layout("empty grid".into()))?;
        let mut n = None;
        let mut roles = Vec::new();
        for field in header.split_whitespace() {
            if let Some(v) = field.strip_prefix("rows=") {
                n = v.parse::<usize>().ok();
            } else if let Some(v) = field.strip_prefix("roles=") {
                roles = v.split(',').map(str::to_string).collect();
            }
        }
        let n = n.ok_or_else(|| Error::Layout(format!("bad grid header `{header}`")))?;
        let mut bits = Vec::with_capacity(n * n);
        for line in lines {
            let line = line.trim();
            if line.len() != n {
                return Err(Error::Layout(format!("grid row `{line}` has wrong width")));
            }
            for c in line.chars() {
                match c {
                    '0' => bits.push(false),
                    '1' => bits.push(true),
                    _ => return Err(Error::Layout(format!("bad grid character `{c}`"))),
                }
            }
        }
        if bits.len() != n * n {
            return Err(Error::Layout(format!("expected {n} grid rows")));
        }
        Ok((roles, AttentionMask { n, bits }))
    }
}

impl fmt::Display for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.n {
            let row: String = self
                .row(i)
                .iter()
                .map(|&b| if b { '1' } else { '0' })
                .collect();
            writeln!(f, "{row}")?;
        }
        Ok(())
    }
}

fn tok(role: Role, segment: u8, position: usize, id: TokenId) -> LayoutToken {
    LayoutToken {
        role,
        segment,
        position,
        id,
    }
}

// --- encoder ---------------------------------------------------------------

/// Encoder attention revisions used by the baselines.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EncoderRules {
    /// `[ENC_posterior]` additionally attends to `[Emotion]`, giving q(z|x,e,y).
    pub posterior_sees_emotion: bool,
}

/// Builds the encoder token layout.
///
/// In test mode the posterior slot and the response segment are absent. The
/// remaining tokens keep the position indices they have in training, so the
/// prior encoding is identical in both modes.
pub fn build_encoder_layout(
    post: &[TokenId],
    resp: Option<&[TokenId]>,
    emotion: Option<Emotion>,
    mode: Mode,
) -> Result<TokenLayout> {
    if post.is_empty() {
        return Err(Error::Layout("post must be non-empty".into()));
    }
    let emotion =
        emotion.ok_or_else(|| Error::Layout("encoder layout requires an emotion label".into()))?;
    let mut tokens = Vec::with_capacity(post.len() + resp.map_or(0, <[_]>::len) + 5);
    match mode {
        Mode::Train => {
            let resp =
                resp.ok_or_else(|| Error::Layout("training layout requires a response".into()))?;
            if resp.is_empty() {
                return Err(Error::Layout("response must be non-empty".into()));
            }
            tokens.push(tok(Role::EncPosterior, 0, 0, corpus::ENC_POSTERIOR));
            tokens.push(tok(Role::EncPrior, 0, 1, corpus::ENC_PRIOR));
            tokens.push(tok(Role::Emotion, 0, 2, corpus::emotion_token(emotion)));
            let mut pos = 3;
            for &id in post {
                tokens.push(tok(Role::Post, 0, pos, id));
                pos += 1;
            }
            tokens.push(tok(Role::Sep0, 0, pos, corpus::SEP));
            pos += 1;
            for &id in resp {
                tokens.push(tok(Role::Resp, 1, pos, id));
                pos += 1;
            }
            tokens.push(tok(Role::Sep1, 1, pos, corpus::SEP));
        }
        Mode::Test => {
            tokens.push(tok(Role::EncPrior, 0, 1, corpus::ENC_PRIOR));
            tokens.push(tok(Role::Emotion, 0, 2, corpus::emotion_token(emotion)));
            let mut pos = 3;
            for &id in post {
                tokens.push(tok(Role::Post, 0, pos, id));
                pos += 1;
            }
            tokens.push(tok(Role::Sep0, 0, pos, corpus::SEP));
        }
    }
    TokenLayout::new(tokens, Stack::Encoder, mode)
}

fn encoder_attends(row: Role, col: Role, same: bool, rules: EncoderRules) -> bool {
    use Role::*;
    match row {
        EncPosterior => {
            same || matches!(col, Post | Resp) || (rules.posterior_sees_emotion && col == Emotion)
        }
        EncPrior => same || matches!(col, Emotion | Post),
        Emotion => same,
        Post => matches!(col, Post | Sep0),
        Sep0 => same || col == Post,
        Resp => matches!(col, Resp | Sep1),
        Sep1 => same || col == Resp,
        Pad => false,
        _ => same,
    }
}

/// Encoder attention relationships.
pub fn build_encoder_mask(layout: &TokenLayout) -> AttentionMask {
    build_encoder_mask_with(layout, EncoderRules::default())
}

pub fn build_encoder_mask_with(layout: &TokenLayout, rules: EncoderRules) -> AttentionMask {
    let t = layout.tokens();
    AttentionMask::from_fn(t.len(), |i, j| {
        if t[j].role == Role::Pad {
            return false;
        }
        encoder_attends(t[i].role, t[j].role, i == j, rules)
    })
}

// --- decoder ---------------------------------------------------------------

/// What precedes `{post}` at the head of the decoder sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderHead {
    /// `[Emotion]` concatenated at the head (CVAE) or standing in for `[z]` (Seq2Seq).
    pub emotion: Option<Emotion>,
    pub z: bool,
}

impl DecoderHead {
    pub const LATENT: DecoderHead = DecoderHead {
        emotion: None,
        z: true,
    };
}

/// Builds the decoder layout `[z] {post} [SOS] ({resp} [EOS])`.
pub fn build_decoder_layout(
    post: &[TokenId],
    resp: Option<&[TokenId]>,
    mode: Mode,
) -> Result<TokenLayout> {
    build_decoder_layout_with(DecoderHead::LATENT, post, resp, mode)
}

pub fn build_decoder_layout_with(
    head: DecoderHead,
    post: &[TokenId],
    resp: Option<&[TokenId]>,
    mode: Mode,
) -> Result<TokenLayout> {
    if post.is_empty() {
        return Err(Error::Layout("post must be non-empty".into()));
    }
    if head.emotion.is_none() && !head.z {
        return Err(Error::Layout("decoder head needs [z] or [Emotion]".into()));
    }
    let mut tokens = Vec::new();
    let mut pos = 0;
    let mut push = |tokens: &mut Vec<LayoutToken>, role, seg, id| {
        tokens.push(tok(role, seg, pos, id));
        pos += 1;
    };
    if let Some(e) = head.emotion {
        push(&mut tokens, Role::Emotion, 0, corpus::emotion_token(e));
    }
    if head.z {
        push(&mut tokens, Role::Z, 0, corpus::Z);
    }
    for &id in post {
        push(&mut tokens, Role::Post, 0, id);
    }
    push(&mut tokens, Role::Sos, 1, corpus::SOS);
    if mode == Mode::Train {
        let resp =
            resp.ok_or_else(|| Error::Layout("training layout requires a response".into()))?;
        for &id in resp {
            push(&mut tokens, Role::Resp, 1, id);
        }
        push(&mut tokens, Role::Eos, 1, corpus::EOS);
    }
    TokenLayout::new(tokens, Stack::Decoder, mode)
}

fn is_condition(role: Role) -> bool {
    matches!(role, Role::Z | Role::Emotion | Role::Post)
}

fn decoder_attends(t: &[LayoutToken], i: usize, j: usize) -> bool {
    let (row, col) = (t[i].role, t[j].role);
    if col == Role::Pad {
        return false;
    }
    match row {
        Role::Z | Role::Emotion | Role::Post => is_condition(col),
        Role::Sos => is_condition(col) || col == Role::Sos,
        Role::Resp => match col {
            Role::Resp => j <= i,
            Role::Eos => false,
            _ => true,
        },
        Role::Eos => true,
        Role::Pad => false,
        _ => i == j,
    }
}

/// Decoder attention relationships.
pub fn build_decoder_mask(layout: &TokenLayout) -> AttentionMask {
    let t = layout.tokens();
    AttentionMask::from_fn(t.len(), |i, j| decoder_attends(t, i, j))
}

/// Appends a generated token (a response token, or `[EOS]` when `id` is the
/// end marker) to a test-mode decoder sequence. Existing rows are untouched.
pub fn extend_decoder(
    layout: &TokenLayout,
    mask: &AttentionMask,
    id: TokenId,
) -> Result<(TokenLayout, AttentionMask)> {
    if layout.stack() != Stack::Decoder || layout.mode() != Mode::Test {
        return Err(Error::Layout(
            "only test-mode decoder layouts can be extended".into(),
        ));
    }
    if mask.size() != layout.len() {
        return Err(Error::Layout("mask does not match layout".into()));
    }
    let last = layout
        .last()
        .ok_or_else(|| Error::Layout("empty layout".into()))?;
    if last.role == Role::Eos {
        return Err(Error::Layout("cannot extend past [EOS]".into()));
    }
    let role = if id == corpus::EOS {
        Role::Eos
    } else {
        Role::Resp
    };
    let mut tokens = layout.tokens().to_vec();
    tokens.push(tok(role, 1, last.position + 1, id));
    let n = tokens.len();
    let new_row: Vec<bool> = (0..n).map(|j| decoder_attends(&tokens, n - 1, j)).collect();
    let grown = AttentionMask::from_fn(n, |i, j| {
        if i == n - 1 {
            new_row[j]
        } else if j == n - 1 {
            false
        } else {
            mask.get(i, j)
        }
    });
    Ok((
        TokenLayout {
            tokens,
            stack: Stack::Decoder,
            mode: Mode::Test,
        },
        grown,
    ))
}

// --- variants --------------------------------------------------------------

/// Encoder/decoder sequences of one example for a given variant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariantLayouts {
    /// Absent for Seq2Seq, which has no encoder.
    pub encoder: Option<(TokenLayout, AttentionMask)>,
    pub decoder: (TokenLayout, AttentionMask),
}

pub fn encoder_rules(variant: VariantId) -> EncoderRules {
    EncoderRules {
        posterior_sees_emotion: variant.posterior_sees_emotion(),
    }
}

pub fn decoder_head(variant: VariantId, emotion: Emotion) -> DecoderHead {
    DecoderHead {
        emotion: variant.decoder_sees_emotion().then_some(emotion),
        z: variant.is_variational(),
    }
}

/// Layouts with the attention flow each variant's networks require:
/// q(z|x,e,y) for the CVAE family posterior, an `[Emotion]` head token for
/// decoders conditioned on e, and `[Emotion]` in place of `[z]` for Seq2Seq.
pub fn build_variant_layouts(
    variant: VariantId,
    post: &[TokenId],
    resp: Option<&[TokenId]>,
    emotion: Emotion,
    mode: Mode,
) -> Result<VariantLayouts> {
    let encoder = if variant.is_variational() {
        let layout = build_encoder_layout(post, resp, Some(emotion), mode)?;
        let mask = build_encoder_mask_with(&layout, encoder_rules(variant));
        Some((layout, mask))
    } else {
        None
    };
    let dec = build_decoder_layout_with(decoder_head(variant, emotion), post, resp, mode)?;
    let dec_mask = build_decoder_mask(&dec);
    Ok(VariantLayouts {
        encoder,
        decoder: (dec, dec_mask),
    })
}

/// Like [`build_variant_layouts`] but takes the variant by name.
pub fn build_cvae_variant_layouts(
    variant: &str,
    post: &[TokenId],
    resp: Option<&[TokenId]>,
    emotion: Emotion,
    mode: Mode,
) -> Result<VariantLayouts> {
    build_variant_layouts(variant.parse()?, post, resp, emotion, mode)
}
