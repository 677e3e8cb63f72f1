use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The generator family: the proposed model, its ablations, and the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VariantId {
    EmoCvae,
    EmoCvaeM1,
    EmoCvaeM2,
    Cvae,
    CvaeM1,
    CvaeM2,
    Seq2Seq,
}

impl VariantId {
    pub const ALL: [VariantId; 7] = [
        VariantId::EmoCvae,
        VariantId::EmoCvaeM1,
        VariantId::EmoCvaeM2,
        VariantId::Cvae,
        VariantId::CvaeM1,
        VariantId::CvaeM2,
        VariantId::Seq2Seq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantId::EmoCvae => "EMO_CVAE",
            VariantId::EmoCvaeM1 => "EMO_CVAE_M1",
            VariantId::EmoCvaeM2 => "EMO_CVAE_M2",
            VariantId::Cvae => "CVAE",
            VariantId::CvaeM1 => "CVAE_M1",
            VariantId::CvaeM2 => "CVAE_M2",
            VariantId::Seq2Seq => "SEQ2SEQ",
        }
    }

    /// Human-readable label such as `Emo-CVAE-M1`.
    pub fn label(self) -> &'static str {
        match self {
            VariantId::EmoCvae => "Emo-CVAE",
            VariantId::EmoCvaeM1 => "Emo-CVAE-M1",
            VariantId::EmoCvaeM2 => "Emo-CVAE-M2",
            VariantId::Cvae => "CVAE",
            VariantId::CvaeM1 => "CVAE-M1",
            VariantId::CvaeM2 => "CVAE-M2",
            VariantId::Seq2Seq => "Seq2Seq",
        }
    }

    /// Has an encoder, prior/posterior networks and a sampled `[z]`.
    pub fn is_variational(self) -> bool {
        self != VariantId::Seq2Seq
    }

    /// Posterior conditions on the emotion label as well as post and response.
    pub fn posterior_sees_emotion(self) -> bool {
        matches!(
            self,
            VariantId::Cvae | VariantId::CvaeM1 | VariantId::CvaeM2
        )
    }

    /// Decoder receives an `[Emotion]` token.
    pub fn decoder_sees_emotion(self) -> bool {
        matches!(self, VariantId::Cvae | VariantId::Seq2Seq)
    }

    /// Emotion regularizer on posterior samples.
    pub fn has_emo_post(self) -> bool {
        matches!(
            self,
            VariantId::EmoCvae | VariantId::EmoCvaeM1 | VariantId::CvaeM2
        )
    }

    /// Emotion regularizer on prior samples.
    pub fn has_emo_prior(self) -> bool {
        matches!(self, VariantId::EmoCvae | VariantId::CvaeM2)
    }

    pub fn has_emotion_pred(self) -> bool {
        self.has_emo_post() || self.has_emo_prior()
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantId {
    type Err = Error;

    /// Accepts `EMO_CVAE_M1` as well as the table label `Emo-CVAE-M1`.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_names_and_labels() {
        for v in VariantId::ALL {
            assert_eq!(v.name().parse::<VariantId>().unwrap(), v);
            assert_eq!(v.label().parse::<VariantId>().unwrap(), v);
        }
        assert!(matches!(
            "CVAE_M3".parse::<VariantId>(),
            Err(Error::UnknownVariant(_))
        ));
    }

    #[test]
    fn feature_table() {
        use VariantId::*;
        assert!(EmoCvae.has_emo_post() && EmoCvae.has_emo_prior());
        assert!(EmoCvaeM1.has_emo_post() && !EmoCvaeM1.has_emo_prior());
        assert!(!EmoCvaeM2.has_emotion_pred());
        assert!(
            Cvae.posterior_sees_emotion()
                && Cvae.decoder_sees_emotion()
                && !Cvae.has_emotion_pred()
        );
        assert!(CvaeM1.posterior_sees_emotion() && !CvaeM1.decoder_sees_emotion());
        assert!(CvaeM2.has_emo_post() && CvaeM2.has_emo_prior() && !CvaeM2.decoder_sees_emotion());
        assert!(!Seq2Seq.is_variational() && Seq2Seq.decoder_sees_emotion());
    }
}
