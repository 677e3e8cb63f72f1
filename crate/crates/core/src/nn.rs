//! Dense building blocks with explicit backward passes.
//!
//! Every parameterized block exposes `forward`, which returns whatever the
//! backward pass needs, and `backward`, which accumulates parameter gradients
//! into a gradient container of the same type and returns the input gradient.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub type Mat = Array2<f64>;

/// Named traversal over parameter matrices in a fixed order.
///
/// The same traversal runs over a model and over its gradient container,
/// which is how the optimizer and the checkpoint writer pair them up.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Mat));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Mat));

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut g = self.clone();
        g.visit_mut("", &mut |_, m| m.fill(0.0));
        g
    }

    fn zero(&mut self) {
        self.visit_mut("", &mut |_, m| m.fill(0.0));
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, m| n += m.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit("", &mut |_, m| out.extend(m.iter().copied()));
        out
    }

    /// Overwrites parameters from a flat vector laid out by [`Parameters::flatten`].
    fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut("", &mut |_, m| {
            for (dst, src) in m.iter_mut().zip(&flat[off..]) {
                *dst = *src;
            }
            off += m.len();
        });
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, m| ok &= m.iter().all(|v| v.is_finite()));
        ok
    }

    fn sq_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit("", &mut |_, m| s += m.iter().map(|v| v * v).sum::<f64>());
        s
    }

    fn scale(&mut self, k: f64) {
        self.visit_mut("", &mut |_, m| m.mapv_inplace(|v| v * k));
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn normal_mat<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Mat {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// `c += a · b`
pub fn matmul_acc(a: &ArrayView2<f64>, b: &ArrayView2<f64>, c: &mut Mat) {
    general_mat_mul(1.0, a, b, 1.0, c);
}

/// Affine map `y = x·W + b` with `W: in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Mat,
    pub b: Mat,
}

impl Linear {
    pub fn new<R: Rng>(inp: usize, out: usize, std: f64, rng: &mut R) -> Self {
        Self {
            w: normal_mat(inp, out, std, rng),
            b: Mat::zeros((1, out)),
        }
    }

    pub fn zeros(inp: usize, out: usize) -> Self {
        Self {
            w: Mat::zeros((inp, out)),
            b: Mat::zeros((1, out)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        x.dot(&self.w) + &self.b
    }

    pub fn backward(&self, x: &Mat, dy: &Mat, g: &mut Linear) -> Mat {
        matmul_acc(&x.t(), &dy.view(), &mut g.w);
        g.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Mat)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Mat)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Mat,
    pub beta: Mat,
}

#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: Mat,
    rstd: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Mat::ones((1, dim)),
            beta: Mat::zeros((1, dim)),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LnCache) {
        let n = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            *r = 1.0 / (var + LN_EPS).sqrt();
            let s = *r;
            row.mapv_inplace(|v| v * s);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LnCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LnCache, dy: &Mat, g: &mut LayerNorm) -> Mat {
        g.gamma += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        g.beta += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let n = dy.ncols() as f64;
        let mut dx = dxhat.clone();
        for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
            let xh = cache.xhat.row(i);
            let mean_d = row.sum() / n;
            let mean_dx = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
            let r = cache.rstd[i];
            for (v, x) in row.iter_mut().zip(xh.iter()) {
                *v = r * (*v - mean_d - x * mean_dx);
            }
        }
        dx
    }
}

impl Parameters for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Mat)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Mat)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| x - lse).collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// Cross-entropy of each row of `logits` against its target index.
///
/// Returns the summed negative log-likelihood and `d(sum)/d(logits)`.
pub fn cross_entropy_rows(logits: &Mat, targets: &[usize]) -> (f64, Mat) {
    assert_eq!(logits.nrows(), targets.len());
    let mut grad = Mat::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let row = row
            .as_slice()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| row.to_vec());
        let lp = log_softmax(&row);
        total -= lp[t];
        for (j, l) in lp.iter().enumerate() {
            grad[(i, j)] = l.exp();
        }
        grad[(i, t)] -= 1.0;
    }
    (total, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check(f: &dyn Fn(&Mat) -> f64, x: &Mat, analytic: &Mat) {
        let h = 1e-6;
        for idx in 0..x.len() {
            let (i, j) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[(i, j)] += h;
            let mut xm = x.clone();
            xm[(i, j)] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = analytic[(i, j)];
            assert!(
                (fd - a).abs() <= 1e-6 + 1e-5 * fd.abs().max(a.abs()),
                "({i},{j}) fd={fd} an={a}"
            );
        }
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(4, 3, 0.5, &mut rng);
        let x = normal_mat(5, 4, 1.0, &mut rng);
        let wts = normal_mat(5, 3, 1.0, &mut rng);
        let loss = |x: &Mat| (lin.forward(x) * &wts).sum();
        let mut g = lin.zeros_like();
        let dx = lin.backward(&x, &wts, &mut g);
        fd_check(&loss, &x, &dx);
        let loss_w = |w: &Mat| {
            let l = Linear {
                w: w.clone(),
                b: lin.b.clone(),
            };
            (l.forward(&x) * &wts).sum()
        };
        fd_check(&loss_w, &lin.w, &g.w);
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ln = LayerNorm::new(6);
        ln.gamma = normal_mat(1, 6, 1.0, &mut rng);
        ln.beta = normal_mat(1, 6, 1.0, &mut rng);
        let x = normal_mat(3, 6, 2.0, &mut rng);
        let wts = normal_mat(3, 6, 1.0, &mut rng);
        let loss = |x: &Mat| (ln.forward(x).0 * &wts).sum();
        let (_, cache) = ln.forward(&x);
        let mut g = ln.zeros_like();
        let dx = ln.backward(&cache, &wts, &mut g);
        fd_check(&loss, &x, &dx);
        let loss_g = |gm: &Mat| {
            let l = LayerNorm {
                gamma: gm.clone(),
                beta: ln.beta.clone(),
            };
            (l.forward(&x).0 * &wts).sum()
        };
        fd_check(&loss_g, &ln.gamma, &g.gamma);
    }

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.3, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn cross_entropy_gradient_and_uniform_case() {
        let logits = Mat::zeros((2, 5));
        let (nll, _) = cross_entropy_rows(&logits, &[0, 3]);
        assert!((nll - 2.0 * 5f64.ln()).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = normal_mat(3, 4, 1.0, &mut rng);
        let t = [1, 0, 3];
        let (_, g) = cross_entropy_rows(&l, &t);
        fd_check(&|x: &Mat| cross_entropy_rows(x, &t).0, &l, &g);
    }

    #[test]
    fn softmax_normalizes() {
        let p = softmax(&[1.0, -2.0, 0.5, 30.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((log_sum_exp(&log_softmax(&[3.0, 1.0, -1.0]))).abs() < 1e-12);
    }

    #[test]
    fn flatten_assign_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Linear::new(3, 2, 1.0, &mut rng);
        let mut b = Linear::zeros(3, 2);
        b.assign_flat(&a.flatten());
        assert_eq!(a, b);
        assert_eq!(a.param_count(), 8);
    }
}
