//! Exact synthetic loss surfaces.
//!
//! ```text
//! L(S) = L0 + Σ_{i∈S} a_i + Σ_{i<j∈S} b_ij + γ·(Σ_{i∈S} w_i)²
//! ```
//!
//! With `b ≡ 0` and `γ = 0` the surface is additive and top-k of the singles is
//! optimal. Pairwise terms model synergy or interference between removals; the
//! quadratic term is a superadditive penalty whose weights `w_i` make early
//! layers amplify the damage of later removals.

use rand::Rng as _;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::{LossFn, ObjectiveKind};
use crate::error::{Error, Result};
use crate::mask::LayerMask;
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeSpec {
    pub depth: usize,
    pub base: f64,
    pub singles: Vec<f64>,
    /// Full symmetric `depth × depth` matrix with zero diagonal.
    pub pairwise: Vec<Vec<f64>>,
    pub explosion_gain: f64,
    pub explosion_weights: Vec<f64>,
}

fn default_singles_sigma() -> f64 {
    0.5
}

fn default_pair_scale() -> f64 {
    0.25
}

/// Parameters of the seeded instance generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateParams {
    pub seed: u64,
    pub depth: usize,
    /// Probability that a given pair carries an interaction term.
    pub density: f64,
    pub gamma: f64,
    /// Log-space standard deviation of the singles.
    #[serde(default = "default_singles_sigma")]
    pub singles_sigma: f64,
    /// Standard deviation of non-zero pairwise entries.
    #[serde(default = "default_pair_scale")]
    pub pair_scale: f64,
}

impl GenerateParams {
    pub fn new(seed: u64, depth: usize, density: f64, gamma: f64) -> Self {
        Self {
            seed,
            depth,
            density,
            gamma,
            singles_sigma: default_singles_sigma(),
            pair_scale: default_pair_scale(),
        }
    }
}

impl LandscapeSpec {
    /// Additive surface: `L(S) = base + Σ a_i`.
    pub fn additive(singles: Vec<f64>, base: f64) -> Self {
        let n = singles.len();
        Self {
            depth: n,
            base,
            singles,
            pairwise: vec![vec![0.0; n]; n],
            explosion_gain: 0.0,
            explosion_weights: vec![0.0; n],
        }
    }

    /// Three layers where the two individually worse layers are jointly best:
    /// `a = (1.0, 1.05, 1.05)`, `b_12 = -0.5`.
    pub fn synergy_example() -> Self {
        let mut spec = Self::additive(vec![1.0, 1.05, 1.05], 0.0);
        spec.pairwise[1][2] = -0.5;
        spec.pairwise[2][1] = -0.5;
        spec
    }

    /// Seeded instance: log-normal singles, sparse zero-mean normal pairwise
    /// entries and explosion weights decreasing linearly with layer index.
    pub fn generate(p: &GenerateParams) -> Result<Self> {
        if p.depth == 0 {
            return Err(Error::ZeroDepth);
        }
        if !(0.0..=1.0).contains(&p.density) || !(p.gamma >= 0.0) {
            return Err(Error::InvalidLandscape(
                "density must lie in [0, 1] and gamma must be non-negative".into(),
            ));
        }
        let n = p.depth;
        let mut rng = rng_for(p.seed, "landscape", 0);
        let singles_dist = LogNormal::new(0.0, p.singles_sigma)
            .map_err(|e| Error::InvalidLandscape(e.to_string()))?;
        let pair_dist =
            Normal::new(0.0, p.pair_scale).map_err(|e| Error::InvalidLandscape(e.to_string()))?;

        let singles: Vec<f64> = (0..n).map(|_| singles_dist.sample(&mut rng)).collect();
        let mut pairwise = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < p.density {
                    let b = pair_dist.sample(&mut rng);
                    pairwise[i][j] = b;
                    pairwise[j][i] = b;
                }
            }
        }
        let explosion_weights = (0..n).map(|i| (n - i) as f64 / n as f64).collect();
        let spec = Self {
            depth: n,
            base: 0.0,
            singles,
            pairwise,
            explosion_gain: p.gamma,
            explosion_weights,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.depth;
        let bad = |msg: &str| Err(Error::InvalidLandscape(msg.to_string()));
        if n == 0 {
            return Err(Error::ZeroDepth);
        }
        if self.singles.len() != n || self.explosion_weights.len() != n {
            return bad("singles and explosion_weights must have one entry per layer");
        }
        if self.pairwise.len() != n || self.pairwise.iter().any(|r| r.len() != n) {
            return bad("pairwise must be depth x depth");
        }
        for i in 0..n {
            if self.pairwise[i][i] != 0.0 {
                return bad("pairwise diagonal must be zero");
            }
            for j in i + 1..n {
                if self.pairwise[i][j] != self.pairwise[j][i] {
                    return bad("pairwise must be symmetric");
                }
            }
        }
        if !(self.explosion_gain >= 0.0) || self.explosion_weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("explosion gain and weights must be non-negative");
        }
        let finite = self.base.is_finite()
            && self.singles.iter().all(|x| x.is_finite())
            && self.pairwise.iter().flatten().all(|x| x.is_finite());
        if !finite {
            return bad("all entries must be finite");
        }
        Ok(())
    }

    pub fn loss(&self, mask: &LayerMask) -> f64 {
        let s = mask.removed();
        let mut total = self.base;
        for &i in s {
            total += self.singles[i];
        }
        for (n, &i) in s.iter().enumerate() {
            for &j in &s[n + 1..] {
                total += self.pairwise[i][j];
            }
        }
        let w: f64 = s.iter().map(|&i| self.explosion_weights[i]).sum();
        total + self.explosion_gain * w * w
    }

    pub fn is_additive(&self) -> bool {
        self.explosion_gain == 0.0 && self.pairwise.iter().flatten().all(|&b| b == 0.0)
    }
}

/// A [`LandscapeSpec`] exposed as a loss, with an optional noisy proxy for
/// proxy-ranked selection.
#[derive(Debug, Clone)]
pub struct Landscape {
    spec: LandscapeSpec,
    proxy_noise: f64,
    proxy_seed: u64,
}

impl Landscape {
    pub fn new(spec: LandscapeSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            proxy_noise: 0.0,
            proxy_seed: 0,
        })
    }

    /// Proxy scores become `a_i + noise · ε_i` with `ε_i ~ N(0, 1)` drawn from `seed`.
    pub fn with_proxy_noise(mut self, noise: f64, seed: u64) -> Self {
        self.proxy_noise = noise;
        self.proxy_seed = seed;
        self
    }

    pub fn spec(&self) -> &LandscapeSpec {
        &self.spec
    }
}

impl LossFn for Landscape {
    fn depth(&self) -> usize {
        self.spec.depth
    }

    fn kind(&self) -> ObjectiveKind {
        ObjectiveKind::Landscape
    }

    fn loss(&self, mask: &LayerMask) -> Result<f64> {
        if mask.depth() != self.spec.depth {
            return Err(Error::DepthMismatch {
                expected: self.spec.depth,
                actual: mask.depth(),
            });
        }
        Ok(self.spec.loss(mask))
    }

    fn proxy_scores(&self) -> Result<Vec<f64>> {
        let mut rng = rng_for(self.proxy_seed, "proxy", 0);
        let noise = Normal::new(0.0, 1.0).expect("unit normal");
        Ok(self
            .spec
            .singles
            .iter()
            .map(|a| {
                let e: f64 = noise.sample(&mut rng);
                if self.proxy_noise == 0.0 {
                    *a
                } else {
                    a + self.proxy_noise * e
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use itertools::Itertools;
    use proptest::prelude::*;

    use super::*;

    fn mask(n: usize, s: &[usize]) -> LayerMask {
        LayerMask::new(n, s.iter().copied()).unwrap()
    }

    #[test]
    fn empty_mask_is_base() {
        let spec = LandscapeSpec::generate(&GenerateParams::new(4, 10, 0.3, 0.2)).unwrap();
        assert_eq!(spec.loss(&LayerMask::dense(10).unwrap()), spec.base);
    }

    #[test]
    fn synergy_values() {
        let spec = LandscapeSpec::synergy_example();
        assert!((spec.loss(&mask(3, &[1, 2])) - 1.6).abs() < 1e-12);
        assert!((spec.loss(&mask(3, &[0, 2])) - 2.05).abs() < 1e-12);
        assert!((spec.loss(&mask(3, &[0, 1])) - 2.05).abs() < 1e-12);
    }

    #[test]
    fn explosion_term_is_superadditive() {
        let mut spec = LandscapeSpec::additive(vec![0.0; 3], 0.0);
        spec.explosion_gain = 1.0;
        spec.explosion_weights = vec![1.0; 3];
        let joint = spec.loss(&mask(3, &[0, 1]));
        let apart = spec.loss(&mask(3, &[0])) + spec.loss(&mask(3, &[1]));
        assert_eq!(joint, 4.0);
        assert_eq!(apart, 2.0);
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let p = GenerateParams::new(99, 12, 0.4, 0.05);
        assert_eq!(
            LandscapeSpec::generate(&p).unwrap(),
            LandscapeSpec::generate(&p).unwrap()
        );
        let spec = LandscapeSpec::generate(&p).unwrap();
        assert!(spec.explosion_weights.windows(2).all(|w| w[0] > w[1]));
        assert!(spec.singles.iter().all(|&a| a > 0.0));
    }

    #[test]
    fn validation_errors() {
        let mut s = LandscapeSpec::synergy_example();
        s.pairwise[2][1] = 0.0;
        assert!(s.validate().is_err());
        let mut s = LandscapeSpec::synergy_example();
        s.pairwise[0][0] = 1.0;
        assert!(s.validate().is_err());
        let mut s = LandscapeSpec::synergy_example();
        s.explosion_gain = -1.0;
        assert!(s.validate().is_err());
        let mut s = LandscapeSpec::synergy_example();
        s.singles.pop();
        assert!(s.validate().is_err());
    }

    #[test]
    fn proxy_is_exact_without_noise() {
        let spec = LandscapeSpec::generate(&GenerateParams::new(5, 9, 0.3, 0.0)).unwrap();
        let l = Landscape::new(spec.clone()).unwrap();
        assert_eq!(l.proxy_scores().unwrap(), spec.singles);
        let noisy = Landscape::new(spec.clone())
            .unwrap()
            .with_proxy_noise(0.5, 1);
        assert_ne!(noisy.proxy_scores().unwrap(), spec.singles);
        assert_eq!(noisy.proxy_scores().unwrap(), noisy.proxy_scores().unwrap());
    }

    #[test]
    fn non_additivity_witness_exists_with_explosion() {
        let mut spec = LandscapeSpec::generate(&GenerateParams::new(2, 8, 0.0, 0.3)).unwrap();
        spec.base = 0.0;
        // constructive witness: the two heaviest explosion weights
        let s = mask(8, &[0, 1]);
        let sum_singles = spec.loss(&mask(8, &[0])) + spec.loss(&mask(8, &[1]));
        assert!(spec.loss(&s) > sum_singles);
    }

    proptest! {
        #[test]
        fn additive_certificate(seed in 0u64..1000, picks in proptest::collection::vec(0usize..16, 0..16)) {
            let mut spec = LandscapeSpec::generate(&GenerateParams::new(seed, 16, 0.0, 0.0)).unwrap();
            spec.base = 3.5;
            let obj = super::super::Objective::from_loss(Landscape::new(spec).unwrap());
            let m = LayerMask::new(16, picks).unwrap();
            let joint = obj.delta(&m).unwrap();
            let parts: f64 = m.removed().iter().map(|&i| obj.delta(&mask(16, &[i])).unwrap()).sum();
            prop_assert!((joint - parts).abs() < 1e-12);
        }
    }

    #[test]
    fn formula_matches_independent_subset_sum() {
        let spec = LandscapeSpec::generate(&GenerateParams::new(11, 7, 0.5, 0.2)).unwrap();
        for k in 0..=7 {
            for c in (0..7).combinations(k) {
                let mut expect = spec.base;
                for &i in &c {
                    expect += spec.singles[i];
                    for &j in &c {
                        if i < j {
                            expect += spec.pairwise[i][j];
                        }
                    }
                }
                let w: f64 = c.iter().map(|&i| spec.explosion_weights[i]).sum();
                expect += spec.explosion_gain * w.powi(2);
                assert!((spec.loss(&mask(7, &c)) - expect).abs() < 1e-12);
            }
        }
    }
}
