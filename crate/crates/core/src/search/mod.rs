//! Search algorithms for `argmin_{|S| = k} L(S)`.
//!
//! All algorithms share an [`Objective`] and its cache. Candidate batches are
//! sorted before evaluation and every argmin breaks ties by the lowest mask
//! (lexicographic on removed indices), so results never depend on evaluation
//! completion order.

mod bo;
mod cbo;
mod ga;
mod gp;
mod local;
mod prior;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{Budget, LayerMask};
use crate::objective::{EvalRecord, Objective};
use crate::seed::derive_seed;

pub use gp::{expected_improvement, HammingGp};
pub use prior::Prior;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    OneShot,
    Greedy,
    Beam,
    Ga,
    Bo,
    Cbo,
    FastBlockSelect,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::OneShot,
        Algorithm::Greedy,
        Algorithm::Beam,
        Algorithm::Ga,
        Algorithm::Bo,
        Algorithm::Cbo,
        Algorithm::FastBlockSelect,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Algorithm::OneShot => "one-shot",
            Algorithm::Greedy => "greedy",
            Algorithm::Beam => "beam",
            Algorithm::Ga => "ga",
            Algorithm::Bo => "bo",
            Algorithm::Cbo => "cbo",
            Algorithm::FastBlockSelect => "fast-block-select",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| Error::UnknownAlgorithm(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scorer {
    /// `Δ({i})` measured with the full loss.
    #[default]
    Singles,
    /// The objective's cheap proxy.
    Proxy,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneShotConfig {
    pub scorer: Scorer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaConfig {
    pub population: usize,
    pub elitism_fraction: f64,
    pub mutation_rate: f64,
    pub generations: usize,
    /// Softmax temperature of the prior; `None` uses the standard deviation
    /// of the single-layer scores.
    pub prior_temperature: Option<f64>,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 16,
            elitism_fraction: 0.2,
            mutation_rate: 0.15,
            generations: 10,
            prior_temperature: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoConfig {
    pub trials: usize,
    pub random_inits: usize,
    pub surrogate_noise: f64,
    /// Fresh prior samples added to the incumbent's neighbourhood per trial.
    pub acquisition_candidates: usize,
    /// Hamming-kernel length scale; `None` uses `k`.
    pub lengthscale: Option<f64>,
    pub prior_temperature: Option<f64>,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            trials: 200,
            random_inits: 10,
            surrogate_noise: 1e-4,
            acquisition_candidates: 32,
            lengthscale: None,
            prior_temperature: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealSchedule {
    /// `None` uses the standard deviation of the single-layer scores.
    pub initial_temperature: Option<f64>,
    /// Final temperature as a fraction of the initial one (geometric decay).
    pub final_ratio: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            initial_temperature: None,
            final_ratio: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CboConfig {
    /// Number of measured pair corrections; `None` measures every pair.
    pub pair_sample_budget: Option<usize>,
    pub anneal_steps: usize,
    pub anneal_schedule: AnnealSchedule,
    /// Distinct annealing candidates re-scored with the true loss.
    pub refine_top: usize,
}

impl Default for CboConfig {
    fn default() -> Self {
        Self {
            pair_sample_budget: None,
            anneal_steps: 4000,
            anneal_schedule: AnnealSchedule::default(),
            refine_top: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FbsConfig {
    pub proxy: FbsProxy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FbsProxy {
    /// Whatever cheap proxy the objective provides.
    #[default]
    Native,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub algorithm: Algorithm,
    /// Number of layers to remove.
    pub k: usize,
    pub seed: u64,
    pub beam_width: usize,
    pub one_shot: OneShotConfig,
    pub ga: GaConfig,
    pub bo: BoConfig,
    pub cbo: CboConfig,
    pub fbs: FbsConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::OneShot,
            k: 0,
            seed: 0,
            beam_width: 5,
            one_shot: OneShotConfig::default(),
            ga: GaConfig::default(),
            bo: BoConfig::default(),
            cbo: CboConfig::default(),
            fbs: FbsConfig::default(),
        }
    }
}

impl SearchConfig {
    pub fn new(algorithm: Algorithm, k: usize) -> Self {
        Self {
            algorithm,
            k,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.beam_width < 1 {
            return bad("beam_width must be at least 1");
        }
        let ga = &self.ga;
        if ga.population < 2 {
            return bad("ga.population must be at least 2");
        }
        if !(0.0..1.0).contains(&ga.elitism_fraction) {
            return bad("ga.elitism_fraction must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&ga.mutation_rate) {
            return bad("ga.mutation_rate must lie in [0, 1]");
        }
        if self.bo.trials < self.bo.random_inits {
            return bad("bo.trials must be at least bo.random_inits");
        }
        if !(self.bo.surrogate_noise >= 0.0) {
            return bad("bo.surrogate_noise must be non-negative");
        }
        if self.bo.lengthscale.is_some_and(|l| !(l > 0.0)) {
            return bad("bo.lengthscale must be positive");
        }
        for t in [ga.prior_temperature, self.bo.prior_temperature] {
            if t.is_some_and(|t| !(t > 0.0)) {
                return bad("prior_temperature must be positive");
            }
        }
        let sched = &self.cbo.anneal_schedule;
        if !(sched.final_ratio > 0.0 && sched.final_ratio <= 1.0) {
            return bad("cbo.anneal_schedule.final_ratio must lie in (0, 1]");
        }
        if sched.initial_temperature.is_some_and(|t| !(t > 0.0)) {
            return bad("cbo.anneal_schedule.initial_temperature must be positive");
        }
        if self.cbo.refine_top == 0 {
            return bad("cbo.refine_top must be at least 1");
        }
        Ok(())
    }
}

/// One line of the per-step search trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub step: usize,
    pub candidates: usize,
    pub best_loss: f64,
    pub best_mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub algorithm: Algorithm,
    pub objective: String,
    pub mask_key: String,
    pub removed: Vec<usize>,
    pub depth: usize,
    pub loss: f64,
    pub delta: f64,
    /// Computed (non-cached) evaluations made during this run.
    pub evaluations: u64,
    pub distinct_masks: u64,
    pub cache_hits: u64,
    pub wall_ms: f64,
    pub steps: Vec<Step>,
    pub config: SearchConfig,
    /// Evaluation records produced by this run, in order.
    #[serde(skip)]
    pub trace: Vec<EvalRecord>,
}

impl SearchResult {
    pub fn mask(&self) -> LayerMask {
        LayerMask::new(self.depth, self.removed.iter().copied()).expect("valid stored mask")
    }

    /// JSON with the wall-clock field zeroed; identical inputs give identical
    /// bytes.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.wall_ms = 0.0;
        serde_json::to_string_pretty(&c).expect("serializable")
    }

    /// The evaluation trace as JSONL.
    pub fn trace_jsonl(&self) -> String {
        jsonl(&self.trace)
    }

    /// The trace as JSONL with `wall_ms` zeroed.
    pub fn canonical_trace_jsonl(&self) -> String {
        let zeroed: Vec<EvalRecord> = self
            .trace
            .iter()
            .map(|r| EvalRecord {
                wall_ms: 0.0,
                ..r.clone()
            })
            .collect();
        jsonl(&zeroed)
    }

    pub fn steps_jsonl(&self) -> String {
        jsonl(&self.steps)
    }

    /// Writes `result.json`, `trace.jsonl` and `steps.jsonl` into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("result.json"),
            serde_json::to_string_pretty(self)? + "\n",
        )?;
        std::fs::write(dir.join("trace.jsonl"), self.trace_jsonl())?;
        std::fs::write(dir.join("steps.jsonl"), self.steps_jsonl())?;
        Ok(())
    }
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
        .collect()
}

/// What an algorithm hands back before accounting is stamped on.
pub(crate) struct Outcome {
    pub mask: LayerMask,
    pub loss: f64,
    pub steps: Vec<Step>,
}

/// Lowest `(loss, mask)` pair.
pub(crate) fn argmin<'a>(items: impl IntoIterator<Item = (&'a LayerMask, f64)>) -> Option<(&'a LayerMask, f64)> {
    items
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)))
}

/// Evaluates sorted, deduplicated `masks` and returns them paired with losses.
pub(crate) fn evaluate_sorted(obj: &Objective, mut masks: Vec<LayerMask>) -> Result<Vec<(LayerMask, f64)>> {
    masks.sort();
    masks.dedup();
    let recs = obj.evaluate_many(&masks)?;
    Ok(masks.into_iter().zip(recs.into_iter().map(|r| r.loss)).collect())
}

pub(crate) fn step(step: usize, candidates: usize, best: (&LayerMask, f64)) -> Step {
    Step {
        step,
        candidates,
        best_loss: best.1,
        best_mask: best.0.key(),
    }
}

/// Layer indices ordered by ascending score, ties to the lower index.
pub(crate) fn rank_layers(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx
}

/// Runs one search and stamps evaluation accounting and wall-clock time.
pub fn run_search(config: &SearchConfig, obj: &Objective) -> Result<SearchResult> {
    config.validate()?;
    let n = obj.depth();
    let k = Budget(config.k).check(n)?;
    let seed = derive_seed(config.seed, config.algorithm.tag(), 0);

    let trace_start = obj.trace_len();
    let computed0 = obj.computed();
    let hits0 = obj.cache_hits();
    let started = Instant::now();

    let out = match config.algorithm {
        Algorithm::OneShot => local::one_shot(obj, k, config.one_shot.scorer)?,
        Algorithm::Greedy => local::greedy(obj, k)?,
        Algorithm::Beam => local::beam(obj, k, config.beam_width)?,
        Algorithm::Ga => ga::run(obj, k, &config.ga, seed)?,
        Algorithm::Bo => bo::run(obj, k, &config.bo, seed)?,
        Algorithm::Cbo => cbo::run(obj, k, &config.cbo, seed)?,
        Algorithm::FastBlockSelect => local::fast_block_select(obj, k)?,
    };

    let wall_ms = started.elapsed().as_secs_f64() * 1e3;
    let trace = obj.trace_since(trace_start);
    let distinct: std::collections::HashSet<&str> =
        trace.iter().map(|r| r.mask_key.as_str()).collect();
    let baseline = obj.known_baseline().expect("searches evaluate the dense mask first");
    debug_assert_eq!(out.mask.k(), k);
    Ok(SearchResult {
        algorithm: config.algorithm,
        objective: obj.name(),
        mask_key: out.mask.key(),
        removed: out.mask.removed().to_vec(),
        depth: n,
        loss: out.loss,
        delta: out.loss - baseline,
        evaluations: obj.computed() - computed0,
        distinct_masks: distinct.len() as u64,
        cache_hits: obj.cache_hits() - hits0,
        wall_ms,
        steps: out.steps,
        config: config.clone(),
        trace,
    })
}

pub fn one_shot(obj: &Objective, k: usize) -> Result<SearchResult> {
    run_search(&SearchConfig::new(Algorithm::OneShot, k), obj)
}

pub fn greedy(obj: &Objective, k: usize) -> Result<SearchResult> {
    run_search(&SearchConfig::new(Algorithm::Greedy, k), obj)
}

pub fn beam(obj: &Objective, k: usize, width: usize) -> Result<SearchResult> {
    let mut cfg = SearchConfig::new(Algorithm::Beam, k);
    cfg.beam_width = width;
    run_search(&cfg, obj)
}

pub fn ga(obj: &Objective, k: usize, cfg: &GaConfig, seed: u64) -> Result<SearchResult> {
    let mut c = SearchConfig::new(Algorithm::Ga, k).with_seed(seed);
    c.ga = cfg.clone();
    run_search(&c, obj)
}

pub fn bo(obj: &Objective, k: usize, cfg: &BoConfig, seed: u64) -> Result<SearchResult> {
    let mut c = SearchConfig::new(Algorithm::Bo, k).with_seed(seed);
    c.bo = cfg.clone();
    run_search(&c, obj)
}

pub fn cbo(obj: &Objective, k: usize, cfg: &CboConfig, seed: u64) -> Result<SearchResult> {
    let mut c = SearchConfig::new(Algorithm::Cbo, k).with_seed(seed);
    c.cbo = cfg.clone();
    run_search(&c, obj)
}

pub fn fast_block_select(obj: &Objective, k: usize) -> Result<SearchResult> {
    run_search(&SearchConfig::new(Algorithm::FastBlockSelect, k), obj)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.tag().parse::<Algorithm>().unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{}\"", a.tag()));
        }
        assert!(matches!(
            "simplex".parse::<Algorithm>(),
            Err(Error::UnknownAlgorithm(_))
        ));
    }

    #[test]
    fn default_hyperparameters() {
        let c = SearchConfig::default();
        assert_eq!(c.beam_width, 5);
        assert_eq!(c.ga.population, 16);
        assert_eq!(c.ga.elitism_fraction, 0.2);
        assert_eq!(c.ga.mutation_rate, 0.15);
        assert_eq!(c.ga.generations, 10);
        assert_eq!(c.bo.trials, 200);
        assert_eq!(c.bo.random_inits, 10);
        c.validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        let c = SearchConfig {
            beam_width: 0,
            ..SearchConfig::default()
        };
        assert!(c.validate().is_err());
        let mut c = SearchConfig::default();
        c.ga.population = 1;
        assert!(c.validate().is_err());
        let mut c = SearchConfig::default();
        c.ga.elitism_fraction = 1.0;
        assert!(c.validate().is_err());
        let mut c = SearchConfig::default();
        c.ga.mutation_rate = 1.5;
        assert!(c.validate().is_err());
        let mut c = SearchConfig::default();
        c.bo.trials = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_rejects_unknown_fields() {
        let ok: SearchConfig =
            serde_json::from_str(r#"{"algorithm":"beam","k":3,"beam_width":2}"#).unwrap();
        assert_eq!(ok.beam_width, 2);
        assert_eq!(ok.ga.population, 16);
        assert!(serde_json::from_str::<SearchConfig>(r#"{"algorithm":"beam","width":2}"#).is_err());
        assert!(serde_json::from_str::<SearchConfig>(r#"{"ga":{"pop":2}}"#).is_err());
    }

    #[test]
    fn rank_layers_breaks_ties_low() {
        assert_eq!(rank_layers(&[5.0, 1.0, 3.0, 2.0, 4.0]), vec![1, 3, 2, 4, 0]);
        assert_eq!(rank_layers(&[1.0; 4]), vec![0, 1, 2, 3]);
    }
}
