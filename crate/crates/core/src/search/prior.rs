//! Score-biased sampling of fixed-cardinality masks.

use rand::Rng as _;

use crate::error::Result;
use crate::mask::LayerMask;
use crate::seed::Rng;

/// Per-layer sampling weights `softmax(-score / temperature)`.
///
/// Layers that are cheap to remove on their own are drawn more often. When
/// the scores carry no usable signal (all non-finite) the prior is uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    weights: Vec<f64>,
    temperature: f64,
}

impl Prior {
    /// `temperature = None` uses the population standard deviation of the
    /// finite scores, or 1 when that is zero.
    pub fn new(scores: &[f64], temperature: Option<f64>) -> Self {
        let finite: Vec<f64> = scores.iter().copied().filter(|s| s.is_finite()).collect();
        let temperature = temperature.unwrap_or_else(|| {
            let sd = std_dev(&finite);
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        });
        if finite.is_empty() {
            log::warn!("no finite single-layer scores; sampling layers uniformly");
            return Self::uniform(scores.len());
        }
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let weights: Vec<f64> = scores
            .iter()
            .map(|&s| {
                if s.is_finite() {
                    (-(s - lo) / temperature).exp()
                } else {
                    0.0
                }
            })
            .collect();
        Self {
            weights,
            temperature,
        }
    }

    pub fn uniform(depth: usize) -> Self {
        Self {
            weights: vec![1.0; depth],
            temperature: f64::INFINITY,
        }
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Normalised probabilities.
    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }

    /// Draws `k` distinct layers, each successive draw proportional to the
    /// remaining weights. Zero-weight layers are only used once everything
    /// else is taken.
    pub fn sample(&self, k: usize, rng: &mut Rng) -> Result<LayerMask> {
        let n = self.weights.len();
        let mut w = self.weights.clone();
        let mut taken = vec![false; n];
        let mut picked = Vec::with_capacity(k);
        for _ in 0..k.min(n) {
            let total: f64 = w.iter().sum();
            let choice = if total > 0.0 && total.is_finite() {
                let mut u = rng.random::<f64>() * total;
                let mut pick = None;
                for (i, &wi) in w.iter().enumerate() {
                    if wi > 0.0 {
                        pick = Some(i);
                        if u < wi {
                            break;
                        }
                        u -= wi;
                    }
                }
                pick.expect("positive total weight")
            } else {
                let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
                free[rng.random_range(0..free.len())]
            };
            taken[choice] = true;
            w[choice] = 0.0;
            picked.push(choice);
        }
        LayerMask::new(n, picked)
    }
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}
