//! Gaussian-process surrogate over masks with an exponential Hamming kernel.

use crate::mask::LayerMask;

/// Expected improvement below `best` for a Gaussian prediction `N(mu, sigma²)`.
///
/// With `sigma = 0` the prediction is certain and the improvement is
/// `max(best - mu, 0)`.
pub fn expected_improvement(mu: f64, sigma: f64, best: f64) -> f64 {
    let gain = best - mu;
    if !(sigma > 0.0) {
        return gain.max(0.0);
    }
    let z = gain / sigma;
    let cdf = 0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (gain * cdf + sigma * pdf).max(0.0)
}

fn bits(mask: &LayerMask) -> Vec<u64> {
    let mut words = vec![0u64; mask.depth().div_ceil(64)];
    for &i in mask.removed() {
        words[i / 64] |= 1 << (i % 64);
    }
    words
}

fn hamming(a: &[u64], b: &[u64]) -> usize {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones() as usize).sum()
}

/// GP regressor with kernel `exp(-hamming(S, S') / lengthscale)` and
/// homoscedastic observation noise, fitted to standardised targets.
///
/// Observations are added one at a time; the Cholesky factor grows by one row
/// per observation. If a new pivot is not positive the whole factor is rebuilt
/// with diagonal jitter, increased tenfold until it succeeds.
#[derive(Debug, Clone)]
pub struct HammingGp {
    kernel: Vec<f64>,
    noise: f64,
    jitter: f64,
    xs: Vec<Vec<u64>>,
    masks: Vec<LayerMask>,
    ys: Vec<f64>,
    /// Rows of the lower-triangular factor of `K + (noise + jitter) I`.
    chol: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    mean: f64,
    scale: f64,
}

impl HammingGp {
    pub fn new(depth: usize, lengthscale: f64, noise: f64) -> Self {
        let kernel = (0..=depth).map(|h| (-(h as f64) / lengthscale).exp()).collect();
        Self {
            kernel,
            noise,
            jitter: 0.0,
            xs: Vec::new(),
            masks: Vec::new(),
            ys: Vec::new(),
            chol: Vec::new(),
            alpha: Vec::new(),
            mean: 0.0,
            scale: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    /// Diagonal jitter currently applied on top of the noise.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn contains(&self, mask: &LayerMask) -> bool {
        self.masks.contains(mask)
    }

    fn k(&self, a: &[u64], b: &[u64]) -> f64 {
        self.kernel[hamming(a, b)]
    }

    fn forward(&self, rhs: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(rhs.len());
        for (i, row) in self.chol.iter().enumerate() {
            let s: f64 = row[..i].iter().zip(&v).map(|(l, x)| l * x).sum();
            v.push((rhs[i] - s) / row[i]);
        }
        v
    }

    fn backward(&self, rhs: &[f64]) -> Vec<f64> {
        let n = rhs.len();
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| self.chol[j][i] * x[j]).sum();
            x[i] = (rhs[i] - s) / self.chol[i][i];
        }
        x
    }

    /// Appends one row to the factor; `false` if the pivot is not positive.
    fn extend_factor(&mut self, x: &[u64]) -> bool {
        let kvec: Vec<f64> = self.xs[..self.chol.len()].iter().map(|o| self.k(o, x)).collect();
        let mut row = self.forward(&kvec);
        let pivot = 1.0 + self.noise + self.jitter - row.iter().map(|v| v * v).sum::<f64>();
        if !(pivot > 1e-12) {
            return false;
        }
        row.push(pivot.sqrt());
        self.chol.push(row);
        true
    }

    fn refactor(&mut self) {
        self.jitter = if self.jitter == 0.0 { 1e-8 } else { self.jitter * 10.0 };
        log::debug!("surrogate kernel singular; retrying with jitter {:e}", self.jitter);
        self.chol.clear();
        for i in 0..self.xs.len() {
            let x = self.xs[i].clone();
            if !self.extend_factor(&x) {
                return self.refactor();
            }
        }
    }

    pub fn observe(&mut self, mask: &LayerMask, y: f64) {
        let x = bits(mask);
        self.xs.push(x.clone());
        self.masks.push(mask.clone());
        self.ys.push(y);
        if !self.extend_factor(&x) {
            self.refactor();
        }
        let n = self.ys.len() as f64;
        self.mean = self.ys.iter().sum::<f64>() / n;
        let sd = (self.ys.iter().map(|v| (v - self.mean).powi(2)).sum::<f64>() / n).sqrt();
        self.scale = if sd > 0.0 && sd.is_finite() { sd } else { 1.0 };
        let z: Vec<f64> = self.ys.iter().map(|v| (v - self.mean) / self.scale).collect();
        self.alpha = self.backward(&self.forward(&z));
    }

    /// Posterior mean in the original units. Cheap: no triangular solve.
    pub fn mean(&self, mask: &LayerMask) -> f64 {
        let x = bits(mask);
        let m: f64 = self.xs.iter().zip(&self.alpha).map(|(o, a)| self.k(o, &x) * a).sum();
        self.mean + self.scale * m
    }

    /// Posterior mean and an upper bound on the posterior standard deviation,
    /// without a triangular solve. Conditioning on the single most similar
    /// observation leaves at least as much variance as conditioning on all.
    pub fn mean_and_std_bound(&self, mask: &LayerMask) -> (f64, f64) {
        let x = bits(mask);
        let mut m = 0.0;
        let mut nearest: f64 = 0.0;
        for (o, a) in self.xs.iter().zip(&self.alpha) {
            let k = self.k(o, &x);
            m += k * a;
            nearest = nearest.max(k);
        }
        let var = 1.0 - nearest * nearest / (1.0 + self.noise + self.jitter);
        (self.mean + self.scale * m, self.scale * var.max(0.0).sqrt())
    }

    /// Posterior mean and standard deviation of the latent loss.
    pub fn predict(&self, mask: &LayerMask) -> (f64, f64) {
        let x = bits(mask);
        let kvec: Vec<f64> = self.xs.iter().map(|o| self.k(o, &x)).collect();
        let m: f64 = kvec.iter().zip(&self.alpha).map(|(k, a)| k * a).sum();
        let v = self.forward(&kvec);
        let var = (1.0 - v.iter().map(|x| x * x).sum::<f64>()).max(0.0);
        (self.mean + self.scale * m, self.scale * var.sqrt())
    }

    /// Expected improvement below `best`. An already observed mask has a
    /// known loss, so it cannot improve on the incumbent: its EI is 0.
    pub fn expected_improvement(&self, mask: &LayerMask, best: f64) -> f64 {
        if self.contains(mask) {
            return 0.0;
        }
        let (mu, sigma) = self.predict(mask);
        expected_improvement(mu, sigma, best)
    }
}
