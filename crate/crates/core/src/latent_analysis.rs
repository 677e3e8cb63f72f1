//! Latent dumps, a 2-D principal-component projection and a linear emotion probe.

use std::io::{BufRead, Write};

use ndarray::{Array1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Emotion, EncodedPair};
use crate::error::{Error, Result};
use crate::latent::{sample_batch, standard_normal, LatentSource};
use crate::model::Model;
use crate::nn::{log_softmax, Mat};

const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    pub emotion: Emotion,
    pub source: LatentSource,
    pub z: Vec<f64>,
}

/// One sampled `z` per pair. Noise comes from a stream seeded by `seed` alone.
pub fn collect_latents(
    model: &Model,
    pairs: &[EncodedPair],
    source: LatentSource,
    seed: u64,
) -> Result<Vec<LatentRecord>> {
    if !model.variant().is_variational() {
        return Err(Error::Config(format!(
            "{} has no latent variable",
            model.variant()
        )));
    }
    let dim = model.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(CHUNK) {
        let noise = standard_normal(chunk.len(), dim, &mut rng);
        let z = match source {
            LatentSource::Posterior => sample_batch(&model.posterior_distribution(chunk)?, &noise)?,
            LatentSource::Prior => {
                let mut z = Mat::zeros((chunk.len(), dim));
                for (i, p) in chunk.iter().enumerate() {
                    let dist = model.prior_distribution(&p.post, p.emotion)?;
                    let row =
                        sample_batch(&dist, &noise.slice(ndarray::s![i..i + 1, ..]).to_owned())?;
                    z.row_mut(i).assign(&row.row(0));
                }
                z
            }
        };
        for (p, row) in chunk.iter().zip(z.rows()) {
            out.push(LatentRecord {
                emotion: p.emotion,
                source,
                z: row.to_vec(),
            });
        }
    }
    Ok(out)
}

pub fn write_dump<W: Write>(records: &[LatentRecord], mut w: W) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.z.len());
    writeln!(w, "latent_dim={dim}")?;
    for r in records {
        let values: Vec<String> = r.z.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}\t{}\t{}", r.emotion, r.source, values.join(","))?;
    }
    Ok(())
}

pub fn read_dump<R: BufRead>(r: R) -> Result<Vec<LatentRecord>> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    let dim: usize = header
        .strip_prefix("latent_dim=")
        .and_then(|d| d.trim().parse().ok())
        .ok_or(Error::MalformedRecord {
            line: 1,
            reason: "expected latent_dim=<n>".into(),
        })?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| Error::MalformedRecord {
            line: i + 2,
            reason: reason.into(),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(bad("expected 3 tab-separated fields"));
        }
        let z = f[2]
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("bad value"))?;
        if z.len() != dim {
            return Err(bad("wrong latent dimension"));
        }
        out.push(LatentRecord {
            emotion: f[0].parse()?,
            source: f[1].parse()?,
            z,
        });
    }
    Ok(out)
}

fn to_matrix(records: &[LatentRecord]) -> Mat {
    let dim = records.first().map_or(0, |r| r.z.len());
    let mut m = Mat::zeros((records.len(), dim));
    for (mut row, r) in m.rows_mut().into_iter().zip(records) {
        row.assign(&Array1::from(r.z.clone()));
    }
    m
}

/// Projects rows onto the top two principal components (power iteration with deflation).
pub fn pca_2d(records: &[LatentRecord]) -> Result<Vec<[f64; 2]>> {
    if records.len() < 2 {
        return Err(Error::Data("projection needs at least two points".into()));
    }
    let x = to_matrix(records);
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = &x - &mean;
    let mut cov = centered.t().dot(&centered) / (records.len() - 1) as f64;
    let dim = cov.nrows();
    let mut components = Vec::new();
    for k in 0..2.min(dim) {
        let mut v = Array1::from_shape_fn(dim, |i| 1.0 + (i + k) as f64 * 0.01);
        v /= v.dot(&v).sqrt();
        for _ in 0..500 {
            let next = cov.dot(&v);
            let norm = next.dot(&next).sqrt();
            if norm < 1e-300 {
                break;
            }
            v = next / norm;
        }
        let lambda = v.dot(&cov.dot(&v));
        let outer = v
            .view()
            .insert_axis(Axis(1))
            .dot(&v.view().insert_axis(Axis(0)));
        cov = cov - outer * lambda;
        components.push(v);
    }
    Ok(centered
        .rows()
        .into_iter()
        .map(|r| {
            let p = |k: usize| components.get(k).map_or(0.0, |c| r.dot(c));
            [p(0), p(1)]
        })
        .collect())
}

pub fn write_projection<W: Write>(
    records: &[LatentRecord],
    points: &[[f64; 2]],
    mut w: W,
) -> Result<()> {
    writeln!(w, "emotion\tpc1\tpc2")?;
    for (r, p) in records.iter().zip(points) {
        writeln!(w, "{}\t{}\t{}", r.emotion, p[0], p[1])?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 400,
            learning_rate: 0.5,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Percentages.
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    /// Held-out frequency of the most common training label.
    pub majority_baseline: f64,
}

/// Multinomial logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    mean: Array1<f64>,
    scale: Array1<f64>,
    weights: Mat,
    bias: Array1<f64>,
}

impl LinearProbe {
    fn standardize(&self, x: &Mat) -> Mat {
        (x - &self.mean) / &self.scale
    }

    pub fn fit(records: &[LatentRecord], cfg: &ProbeConfig) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("probe needs training points".into()));
        }
        let x = to_matrix(records);
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let scale = x
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 1e-12 { s } else { 1.0 });
        let classes = Emotion::COUNT;
        let mut probe = Self {
            mean,
            scale,
            weights: Mat::zeros((x.ncols(), classes)),
            bias: Array1::zeros(classes),
        };
        let xs = probe.standardize(&x);
        let n = records.len() as f64;
        for _ in 0..cfg.iterations {
            let mut d = xs.dot(&probe.weights) + &probe.bias;
            for (mut row, r) in d.rows_mut().into_iter().zip(records) {
                let lp = log_softmax(&row.to_vec());
                for (c, v) in row.iter_mut().enumerate() {
                    *v = (lp[c].exp() - f64::from(u8::from(c == r.emotion.id()))) / n;
                }
            }
            let gw = xs.t().dot(&d) + &probe.weights * cfg.l2;
            let gb = d.sum_axis(Axis(0));
            probe.weights.scaled_add(-cfg.learning_rate, &gw);
            probe.bias.scaled_add(-cfg.learning_rate, &gb);
        }
        Ok(probe)
    }

    pub fn predict(&self, records: &[LatentRecord]) -> Vec<Emotion> {
        if records.is_empty() {
            return Vec::new();
        }
        let scores = self.standardize(&to_matrix(records)).dot(&self.weights) + &self.bias;
        scores
            .rows()
            .into_iter()
            .map(|r| {
                let best = r
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |a, (i, &v)| if v > a.1 { (i, v) } else { a },
                    );
                Emotion::from_id(best.0).expect("class id")
            })
            .collect()
    }

    pub fn accuracy(&self, records: &[LatentRecord]) -> f64 {
        if records.is_empty() {
            return 0.0;
        }
        let hits = self
            .predict(records)
            .iter()
            .zip(records)
            .filter(|(p, r)| **p == r.emotion)
            .count();
        100.0 * hits as f64 / records.len() as f64
    }
}

/// Fits on `train` and reports accuracy on `heldout`.
pub fn probe_accuracy(
    train: &[LatentRecord],
    heldout: &[LatentRecord],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let probe = LinearProbe::fit(train, cfg)?;
    let mut counts = [0usize; Emotion::COUNT];
    for r in train {
        counts[r.emotion.id()] += 1;
    }
    let majority = (0..Emotion::COUNT)
        .max_by_key(|&c| (counts[c], std::cmp::Reverse(c)))
        .expect("classes");
    let majority_baseline = if heldout.is_empty() {
        0.0
    } else {
        100.0
            * heldout
                .iter()
                .filter(|r| r.emotion.id() == majority)
                .count() as f64
            / heldout.len() as f64
    };
    Ok(ProbeReport {
        train_accuracy: probe.accuracy(train),
        heldout_accuracy: probe.accuracy(heldout),
        majority_baseline,
    })
}
