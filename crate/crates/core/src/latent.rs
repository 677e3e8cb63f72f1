//! Diagonal Gaussian latents: prior/posterior heads, KL, reparameterized
//! sampling and the emotion predictor applied to sampled latents.
//!
//! Everything here is batched row-wise: a batch of `B` distributions is a
//! pair of `B × latent_dim` matrices.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::Emotion;
use crate::error::{Error, Result};
use crate::nn::{cross_entropy_rows, join, log_softmax, Linear, Mat, Parameters};

/// Bound applied to every predicted log-variance.
pub const LOG_VAR_BOUND: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    pub mean: Array1<f64>,
    pub log_var: Array1<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Array1<f64>, log_var: Array1<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::DimMismatch {
                expected: mean.len(),
                got: log_var.len(),
            });
        }
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: Array1::zeros(dim),
            log_var: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log-density at `z`.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        z.iter()
            .zip(self.mean.iter().zip(&self.log_var))
            .map(|(x, (m, lv))| -0.5 * (ln_2pi + lv + (x - m).powi(2) / lv.exp()))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LatentSource {
    Posterior,
    Prior,
}

impl LatentSource {
    pub fn name(self) -> &'static str {
        match self {
            LatentSource::Posterior => "posterior",
            LatentSource::Prior => "prior",
        }
    }
}

impl fmt::Display for LatentSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LatentSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "posterior" => Ok(LatentSource::Posterior),
            "prior" => Ok(LatentSource::Prior),
            other => Err(Error::Config(format!("unknown latent source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: Array1<f64>,
    pub source: LatentSource,
}

/// A batch of diagonal Gaussians with the pre-clamp log-variances kept for backprop.
#[derive(Debug, Clone)]
pub struct GaussianBatch {
    pub mean: Mat,
    pub log_var: Mat,
    raw_log_var: Mat,
}

impl GaussianBatch {
    pub fn from_parts(mean: Mat, log_var: Mat) -> Result<Self> {
        if mean.dim() != log_var.dim() {
            return Err(Error::DimMismatch {
                expected: mean.ncols(),
                got: log_var.ncols(),
            });
        }
        let clamped = log_var.mapv(|v| v.clamp(-LOG_VAR_BOUND, LOG_VAR_BOUND));
        Ok(Self {
            mean,
            log_var: clamped,
            raw_log_var: log_var,
        })
    }

    pub fn len(&self) -> usize {
        self.mean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> DiagonalGaussian {
        DiagonalGaussian {
            mean: self.mean.row(i).to_owned(),
            log_var: self.log_var.row(i).to_owned(),
        }
    }

    /// Gradient w.r.t. the raw log-variance; zero where the clamp was active.
    fn clamp_grad(&self, dlog_var: &Mat) -> Mat {
        let mut d = dlog_var.clone();
        Zip::from(&mut d)
            .and(&self.raw_log_var)
            .for_each(|g, &raw| {
                if !(-LOG_VAR_BOUND..=LOG_VAR_BOUND).contains(&raw) {
                    *g = 0.0;
                }
            });
        d
    }
}

/// A single affine map from an encoder row to `(mean, log_var)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianNet {
    pub proj: Linear,
}

impl GaussianNet {
    pub fn new<R: Rng>(hidden_dim: usize, latent_dim: usize, std: f64, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(hidden_dim, 2 * latent_dim, std, rng),
        }
    }

    pub fn zeros(hidden_dim: usize, latent_dim: usize) -> Self {
        Self {
            proj: Linear::zeros(hidden_dim, 2 * latent_dim),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.proj.out_dim() / 2
    }

    pub fn forward(&self, enc_rows: &Mat) -> Result<GaussianBatch> {
        if enc_rows.ncols() != self.proj.in_dim() {
            return Err(Error::DimMismatch {
                expected: self.proj.in_dim(),
                got: enc_rows.ncols(),
            });
        }
        let out = self.proj.forward(enc_rows);
        let l = self.latent_dim();
        let mean = out.slice(ndarray::s![.., ..l]).to_owned();
        let raw = out.slice(ndarray::s![.., l..]).to_owned();
        GaussianBatch::from_parts(mean, raw)
    }

    /// Single-row convenience wrapper.
    pub fn distribution(&self, enc_row: &[f64]) -> Result<DiagonalGaussian> {
        let x = Mat::from_shape_vec((1, enc_row.len()), enc_row.to_vec()).expect("row shape");
        Ok(self.forward(&x)?.get(0))
    }

    pub fn backward(
        &self,
        enc_rows: &Mat,
        out: &GaussianBatch,
        dmean: &Mat,
        dlog_var: &Mat,
        g: &mut GaussianNet,
    ) -> Mat {
        let draw = out.clamp_grad(dlog_var);
        let dout = ndarray::concatenate![ndarray::Axis(1), *dmean, draw];
        self.proj.backward(enc_rows, &dout, &mut g.proj)
    }
}

impl Parameters for GaussianNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Mat)) {
        self.proj.visit(&join(prefix, "proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Mat)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Closed-form `KL(q || p)` between diagonal Gaussians.
pub fn kl_divergence(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::DimMismatch {
            expected: q.dim(),
            got: p.dim(),
        });
    }
    Ok((0..q.dim())
        .map(|d| kl_term(q.mean[d], q.log_var[d], p.mean[d], p.log_var[d]))
        .sum())
}

fn kl_term(qm: f64, qlv: f64, pm: f64, plv: f64) -> f64 {
    0.5 * (plv - qlv + (qlv.exp() + (qm - pm).powi(2)) / plv.exp() - 1.0)
}

/// Gradients of a batched KL, one `B × L` matrix per input.
#[derive(Debug, Clone)]
pub struct KlGrad {
    pub q_mean: Mat,
    pub q_log_var: Mat,
    pub p_mean: Mat,
    pub p_log_var: Mat,
}

/// Per-row KL values and the gradients of `Σ_rows coeff[row] · KL_row`.
pub fn kl_batch(q: &GaussianBatch, p: &GaussianBatch, coeff: &[f64]) -> Result<(Vec<f64>, KlGrad)> {
    if q.mean.dim() != p.mean.dim() {
        return Err(Error::DimMismatch {
            expected: q.mean.ncols(),
            got: p.mean.ncols(),
        });
    }
    let (b, l) = q.mean.dim();
    let mut values = vec![0.0; b];
    let mut grad = KlGrad {
        q_mean: Mat::zeros((b, l)),
        q_log_var: Mat::zeros((b, l)),
        p_mean: Mat::zeros((b, l)),
        p_log_var: Mat::zeros((b, l)),
    };
    for i in 0..b {
        let c = coeff[i];
        for d in 0..l {
            let (qm, qlv, pm, plv) = (
                q.mean[(i, d)],
                q.log_var[(i, d)],
                p.mean[(i, d)],
                p.log_var[(i, d)],
            );
            values[i] += kl_term(qm, qlv, pm, plv);
            let inv_pv = (-plv).exp();
            let diff = qm - pm;
            grad.q_mean[(i, d)] = c * diff * inv_pv;
            grad.p_mean[(i, d)] = -c * diff * inv_pv;
            grad.q_log_var[(i, d)] = c * 0.5 * ((qlv - plv).exp() - 1.0);
            grad.p_log_var[(i, d)] = c * 0.5 * (1.0 - (qlv.exp() + diff * diff) * inv_pv);
        }
    }
    Ok((values, grad))
}

/// Reparameterized sample `z = mean + exp(½ log_var) ⊙ noise`.
pub fn sample(
    dist: &DiagonalGaussian,
    noise: &[f64],
    source: LatentSource,
) -> Result<LatentSample> {
    if noise.len() != dist.dim() {
        return Err(Error::DimMismatch {
            expected: dist.dim(),
            got: noise.len(),
        });
    }
    let z = Array1::from_iter(
        (0..dist.dim()).map(|d| dist.mean[d] + (0.5 * dist.log_var[d]).exp() * noise[d]),
    );
    Ok(LatentSample { z, source })
}

pub fn sample_batch(dist: &GaussianBatch, noise: &Mat) -> Result<Mat> {
    if noise.dim() != dist.mean.dim() {
        return Err(Error::DimMismatch {
            expected: dist.mean.ncols(),
            got: noise.ncols(),
        });
    }
    Ok(&dist.mean + &(dist.log_var.mapv(|v| (0.5 * v).exp()) * noise))
}

/// Gradients `(d mean, d log_var)` of a sample given `d z`.
pub fn sample_backward(dist: &GaussianBatch, noise: &Mat, dz: &Mat) -> (Mat, Mat) {
    let mut dlv = dz * noise;
    Zip::from(&mut dlv)
        .and(&dist.log_var)
        .for_each(|g, &lv| *g *= 0.5 * (0.5 * lv).exp());
    (dz.clone(), dlv)
}

pub fn standard_normal<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// `z → tanh(W1 z + b1) → W2 · + b2 → log-softmax` over the emotion classes.
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionPredNet {
    pub hidden: Linear,
    pub out: Linear,
}

impl EmotionPredNet {
    pub fn new<R: Rng>(latent_dim: usize, std: f64, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(latent_dim, latent_dim, std, rng),
            out: Linear::new(latent_dim, Emotion::COUNT, std, rng),
        }
    }

    pub fn zeros(latent_dim: usize) -> Self {
        Self {
            hidden: Linear::zeros(latent_dim, latent_dim),
            out: Linear::zeros(latent_dim, Emotion::COUNT),
        }
    }

    pub fn logits(&self, z: &Mat) -> Mat {
        self.out.forward(&self.hidden.forward(z).mapv(f64::tanh))
    }

    /// Log-probabilities over emotions for each row of `z`.
    pub fn log_probs(&self, z: &Mat) -> Mat {
        let mut logits = self.logits(z);
        for mut row in logits.rows_mut() {
            let lp = log_softmax(&row.to_vec());
            row.assign(&Array1::from(lp));
        }
        logits
    }

    pub fn predict(&self, z: &Mat) -> Vec<Emotion> {
        self.logits(z)
            .rows()
            .into_iter()
            .map(|r| {
                let best = r
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                    );
                Emotion::from_id(best.0).expect("class index")
            })
            .collect()
    }

    /// Per-row NLL of `labels`; accumulates `Σ coeff[row] · nll_row` gradients and returns `d z`.
    pub fn nll_backward(
        &self,
        z: &Mat,
        labels: &[Emotion],
        coeff: &[f64],
        g: &mut EmotionPredNet,
    ) -> (Vec<f64>, Mat) {
        let pre = self.hidden.forward(z);
        let act = pre.mapv(f64::tanh);
        let logits = self.out.forward(&act);
        let targets: Vec<usize> = labels.iter().map(|e| e.id()).collect();
        let mut per_row = Vec::with_capacity(labels.len());
        for (i, &t) in targets.iter().enumerate() {
            let lp = log_softmax(&logits.row(i).to_vec());
            per_row.push(-lp[t]);
        }
        let (_, mut dlogits) = cross_entropy_rows(&logits, &targets);
        for (mut row, c) in dlogits.rows_mut().into_iter().zip(coeff) {
            row *= *c;
        }
        let dact = self.out.backward(&act, &dlogits, &mut g.out);
        let dpre = dact * act.mapv(|a| 1.0 - a * a);
        let dz = self.hidden.backward(z, &dpre, &mut g.hidden);
        (per_row, dz)
    }
}

impl Parameters for EmotionPredNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Mat)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Mat)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_mat;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_gives_standard_normal() {
        let net = GaussianNet::zeros(6, 3);
        let d = net.distribution(&[1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap();
        assert_eq!(d, DiagonalGaussian::standard(3));
        assert_eq!(net.proj.out_dim(), 6);
    }

    #[test]
    fn log_var_is_clamped() {
        let mut net = GaussianNet::zeros(1, 1);
        net.proj.b[(0, 1)] = 50.0;
        assert_eq!(net.distribution(&[0.0]).unwrap().log_var[0], 10.0);
        net.proj.b[(0, 1)] = -50.0;
        assert_eq!(net.distribution(&[0.0]).unwrap().log_var[0], -10.0);
    }

    #[test]
    fn kl_closed_form_cases() {
        let q = DiagonalGaussian::new(array![1.0, 0.0], array![0.0, 0.0]).unwrap();
        let p = DiagonalGaussian::standard(2);
        assert!((kl_divergence(&q, &p).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(kl_divergence(&q, &q).unwrap(), 0.0);
        assert!(kl_divergence(&q, &DiagonalGaussian::standard(3)).is_err());
    }

    #[test]
    fn kl_batch_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = GaussianBatch::from_parts(
            normal_mat(2, 3, 1.0, &mut rng),
            normal_mat(2, 3, 1.0, &mut rng),
        )
        .unwrap();
        let p = GaussianBatch::from_parts(
            normal_mat(2, 3, 1.0, &mut rng),
            normal_mat(2, 3, 1.0, &mut rng),
        )
        .unwrap();
        let coeff = [0.7, 1.3];
        let total = |q: &GaussianBatch, p: &GaussianBatch| -> f64 {
            let (v, _) = kl_batch(q, p, &coeff).unwrap();
            v.iter().zip(&coeff).map(|(a, b)| a * b).sum()
        };
        let (_, g) = kl_batch(&q, &p, &coeff).unwrap();
        let eps = 1e-6;
        for i in 0..2 {
            for d in 0..3 {
                for (which, analytic) in [
                    (0, g.q_mean[(i, d)]),
                    (1, g.q_log_var[(i, d)]),
                    (2, g.p_mean[(i, d)]),
                    (3, g.p_log_var[(i, d)]),
                ] {
                    let bump = |s: f64| {
                        let (mut q2, mut p2) = (q.clone(), p.clone());
                        match which {
                            0 => q2.mean[(i, d)] += s,
                            1 => q2.log_var[(i, d)] += s,
                            2 => p2.mean[(i, d)] += s,
                            _ => p2.log_var[(i, d)] += s,
                        }
                        total(&q2, &p2)
                    };
                    let numeric = (bump(eps) - bump(-eps)) / (2.0 * eps);
                    assert!(
                        (numeric - analytic).abs() < 1e-6,
                        "{which} {numeric} {analytic}"
                    );
                }
            }
        }
    }

    #[test]
    fn sample_cases() {
        let d = DiagonalGaussian::new(array![1.0, -1.0], array![0.0, 2.0]).unwrap();
        assert_eq!(
            sample(&d, &[0.0, 0.0], LatentSource::Prior).unwrap().z,
            d.mean
        );
        let unit = DiagonalGaussian::new(array![1.0, -1.0], array![0.0, 0.0]).unwrap();
        assert_eq!(
            sample(&unit, &[0.5, 0.25], LatentSource::Posterior)
                .unwrap()
                .z,
            array![1.5, -0.75]
        );
        assert!(sample(&d, &[0.0], LatentSource::Prior).is_err());
    }

    #[test]
    fn sample_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dist = GaussianBatch::from_parts(
            normal_mat(2, 4, 1.0, &mut rng),
            normal_mat(2, 4, 1.0, &mut rng),
        )
        .unwrap();
        let noise = standard_normal(2, 4, &mut rng);
        let weights = normal_mat(2, 4, 1.0, &mut rng);
        let loss =
            |d: &GaussianBatch| (sample_batch(d, &noise).unwrap().mapv(f64::sin) * &weights).sum();
        let z = sample_batch(&dist, &noise).unwrap();
        let dz = z.mapv(f64::cos) * &weights;
        let (dm, dlv) = sample_backward(&dist, &noise, &dz);
        let eps = 1e-6;
        for i in 0..2 {
            for d in 0..4 {
                let mut up = dist.clone();
                up.mean[(i, d)] += eps;
                let mut down = dist.clone();
                down.mean[(i, d)] -= eps;
                let numeric = (loss(&up) - loss(&down)) / (2.0 * eps);
                assert!((numeric - dm[(i, d)]).abs() <= 1e-5 * (1.0 + numeric.abs()));
                let mut up = dist.clone();
                up.log_var[(i, d)] += eps;
                let mut down = dist.clone();
                down.log_var[(i, d)] -= eps;
                let numeric = (loss(&up) - loss(&down)) / (2.0 * eps);
                assert!((numeric - dlv[(i, d)]).abs() <= 1e-5 * (1.0 + numeric.abs()));
            }
        }
    }

    #[test]
    fn clamped_log_var_blocks_gradient() {
        let mut net = GaussianNet::zeros(2, 1);
        net.proj.b[(0, 1)] = 20.0;
        let x = Mat::ones((1, 2));
        let out = net.forward(&x).unwrap();
        let mut g = net.zeros_like();
        net.backward(&x, &out, &Mat::zeros((1, 1)), &Mat::ones((1, 1)), &mut g);
        assert_eq!(g.proj.b[(0, 1)], 0.0);
    }

    #[test]
    fn zero_emotion_net_is_uniform() {
        let net = EmotionPredNet::zeros(5);
        let lp = net.log_probs(&Mat::ones((2, 5)));
        for v in lp.iter() {
            assert!((v + (8.0f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn emotion_net_probabilities_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = EmotionPredNet::new(6, 1.0, &mut rng);
        let lp = net.log_probs(&normal_mat(10, 6, 2.0, &mut rng));
        for row in lp.rows() {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn emotion_net_overfits_fixed_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = EmotionPredNet::new(8, 0.3, &mut rng);
        let z = normal_mat(64, 8, 1.0, &mut rng);
        let labels: Vec<Emotion> = (0..64).map(|i| Emotion::ALL[i % 8]).collect();
        let coeff = vec![1.0 / 64.0; 64];
        let mut opt = crate::optim::Adam::new(crate::optim::AdamConfig {
            learning_rate: 0.02,
            clip_norm: None,
            ..Default::default()
        });
        for _ in 0..2000 {
            let mut g = net.zeros_like();
            net.nll_backward(&z, &labels, &coeff, &mut g);
            opt.step(&mut net, &g);
        }
        assert_eq!(net.predict(&z), labels);
    }
}
