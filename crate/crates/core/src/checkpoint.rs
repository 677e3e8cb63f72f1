//! The `emocvae-ckpt-v1` container shared by generators and scorers.
//!
//! Layout: a magic line, one JSON metadata line, then every parameter
//! matrix as little-endian `f64` in traversal order.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{param_group, Model, ParamGroup};
use crate::nn::{Mat, Parameters};
use crate::training::TrainConfig;

pub const MAGIC: &str = "emocvae-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

/// A decoded container whose tensors have not yet been bound to a model.
#[derive(Debug, Clone)]
pub struct RawCheckpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub vocab: Vocabulary,
    pub tensors: Vec<TensorEntry>,
    data: BTreeMap<String, Mat>,
}

pub fn write_container<P: Parameters, M: Serialize, W: Write>(
    mut w: W,
    kind: &str,
    meta: &M,
    vocab: &Vocabulary,
    params: &P,
) -> Result<()> {
    let mut tensors = Vec::new();
    params.visit("", &mut |name, m| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: [m.nrows(), m.ncols()],
            group: param_group(name),
        })
    });
    let header = Header {
        kind: kind.to_string(),
        meta: serde_json::to_value(meta)?,
        vocab: vocab.tokens().to_vec(),
        tensors,
    };
    writeln!(w, "{MAGIC}")?;
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    let mut bytes = Vec::with_capacity(params.param_count() * 8);
    params.visit("", &mut |_, m| {
        for v in m.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    });
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_container<R: BufRead>(mut r: R) -> Result<RawCheckpoint> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic line {:?}",
            line.trim_end()
        )));
    }
    line.clear();
    r.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end())?;
    let vocab = Vocabulary::from_tokens(header.vocab)?;
    let mut data = BTreeMap::new();
    for t in &header.tensors {
        let n = t.shape[0] * t.shape[1];
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint(format!("truncated data for {}", t.name)))?;
        let values: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = Mat::from_shape_vec((t.shape[0], t.shape[1]), values).expect("shape from header");
        data.insert(t.name.clone(), m);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(RawCheckpoint {
        kind: header.kind,
        meta: header.meta,
        vocab,
        tensors: header.tensors,
        data,
    })
}

impl RawCheckpoint {
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn meta<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.meta.clone())?)
    }

    /// Copies stored tensors into `params`, which must have identical names and shapes.
    pub fn load_into<P: Parameters>(&self, params: &mut P) -> Result<()> {
        let mut seen = 0;
        let mut err = None;
        params.visit_mut("", &mut |name, m| {
            if err.is_some() {
                return;
            }
            match self.data.get(name) {
                Some(src) if src.dim() == m.dim() => {
                    m.assign(src);
                    seen += 1;
                }
                Some(src) => {
                    err = Some(Error::Checkpoint(format!(
                        "shape mismatch for {name}: {:?} vs {:?}",
                        src.dim(),
                        m.dim()
                    )))
                }
                None => err = Some(Error::Checkpoint(format!("missing tensor {name}"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != self.data.len() {
            return Err(Error::Checkpoint(
                "checkpoint holds tensors the model does not have".into(),
            ));
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub const GENERATOR_KIND: &str = "generator";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GeneratorMeta {
    train: TrainConfig,
    step: usize,
}

/// A trained generator with everything needed to rebuild it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocabulary,
    pub train: TrainConfig,
    /// Number of optimizer steps taken.
    pub step: usize,
}

impl Checkpoint {
    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let meta = GeneratorMeta {
            train: self.train.clone(),
            step: self.step,
        };
        write_container(w, GENERATOR_KIND, &meta, &self.vocab, &self.model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write(&mut out)?;
        Ok(out)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let raw = read_container(r)?;
        raw.expect_kind(GENERATOR_KIND)?;
        let meta: GeneratorMeta = raw.meta()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(meta.train.model.clone(), raw.vocab.len(), &mut rng)?;
        raw.load_into(&mut model)?;
        Ok(Self {
            model,
            vocab: raw.vocab,
            train: meta.train,
            step: meta.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocabulary;
    use crate::model::ModelConfig;
    use crate::variant::VariantId;

    fn checkpoint(variant: VariantId) -> Checkpoint {
        let vocab =
            Vocabulary::from_content(["hello", "world", "again"].map(String::from)).unwrap();
        let model_cfg = ModelConfig {
            hidden_dim: 8,
            ffn_dim: 16,
            heads: 2,
            latent_dim: 3,
            ..ModelConfig::new(variant)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = Model::new(model_cfg.clone(), vocab.len(), &mut rng).unwrap();
        Checkpoint {
            model,
            vocab,
            train: TrainConfig::new(model_cfg),
            step: 12,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for v in VariantId::ALL {
            let ck = checkpoint(v);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::read(&bytes[..]).unwrap();
            assert_eq!(back.model, ck.model);
            assert_eq!(back.vocab, ck.vocab);
            assert_eq!(back.step, 12);
            assert_eq!(back.digest().unwrap(), ck.digest().unwrap());
        }
    }

    #[test]
    fn header_records_groups() {
        let ck = checkpoint(VariantId::EmoCvae);
        let raw = read_container(&ck.to_bytes().unwrap()[..]).unwrap();
        assert!(raw
            .tensors
            .iter()
            .any(|t| t.name == "posterior.proj.w" && t.group == ParamGroup::Phi));
        assert!(raw
            .tensors
            .iter()
            .any(|t| t.name == "decoder.tok_emb" && t.group == ParamGroup::Theta));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = checkpoint(VariantId::Cvae).to_bytes().unwrap();
        assert!(Checkpoint::read(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::read(&extra[..]).is_err());
        assert!(Checkpoint::read(&b"not-a-checkpoint\n"[..]).is_err());
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let raw = read_container(&checkpoint(VariantId::Cvae).to_bytes().unwrap()[..]).unwrap();
        let mut other = checkpoint(VariantId::Seq2Seq).model;
        assert!(raw.load_into(&mut other).is_err());
    }
}
