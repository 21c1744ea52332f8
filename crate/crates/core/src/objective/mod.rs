//! Calibration losses and the cached evaluator that every search goes through.
//!
//! A [`LossFn`] maps a [`LayerMask`] to the loss of the pruned model on a fixed
//! calibration set. [`Objective`] wraps one with a per-mask cache, evaluation
//! accounting and an append-only trace of [`EvalRecord`]s.
//!
//! Concrete losses:
//!
//! * [`Landscape`]: an exactly enumerable synthetic surface with singles,
//!   pairwise interactions and a superadditive "explosion" term.
//! * [`ToyObjective`]: perplexity or task-likelihood margin of a small seeded
//!   transformer with blocks skipped on the residual stream.
//! * [`ExternalEvaluator`]: any process speaking the line-delimited JSON
//!   evaluator protocol, over stdio or TCP.

mod external;
mod landscape;
mod toy;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::LayerMask;

pub use external::{serve_lines, Endpoint, ExternalEvaluator, Handshake, PROTOCOL_VERSION};
pub use landscape::{GenerateParams, Landscape, LandscapeSpec};
pub use toy::{TaskItem, ToyConfig, ToyModel, ToyObjective};

/// Loss reported in place of a non-finite model output.
///
/// It is the largest finite `f64`, so exploded masks sort last instead of
/// poisoning comparisons.
pub const EXPLODED_LOSS: f64 = f64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    ToyPerplexity,
    ToyMargin,
    Landscape,
    External,
}

impl ObjectiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::ToyPerplexity => "toy-perplexity",
            ObjectiveKind::ToyMargin => "toy-margin",
            ObjectiveKind::Landscape => "landscape",
            ObjectiveKind::External => "external",
        }
    }
}

/// A black-box loss over layer masks. Lower is better.
pub trait LossFn: Send + Sync {
    fn depth(&self) -> usize;

    fn kind(&self) -> ObjectiveKind;

    fn name(&self) -> String {
        self.kind().as_str().to_string()
    }

    fn loss(&self, mask: &LayerMask) -> Result<f64>;

    /// Evaluates several masks. Implementations may pipeline or parallelise.
    fn loss_batch(&self, masks: &[LayerMask]) -> Vec<Result<f64>> {
        masks.iter().map(|m| self.loss(m)).collect()
    }

    /// Cheap per-layer redundancy proxy (smaller = more removable).
    fn proxy_scores(&self) -> Result<Vec<f64>> {
        Err(Error::ProxyUnavailable)
    }
}

/// Wraps a loss with a process-wide memo so that several [`Objective`]s built
/// over the same model never recompute a mask. Returned losses are identical
/// to the inner ones; per-objective accounting is unaffected.
pub struct Memoized<L: ?Sized> {
    memo: Mutex<HashMap<LayerMask, f64>>,
    inner: Arc<L>,
}

impl<L: LossFn + ?Sized> Memoized<L> {
    pub fn new(inner: Arc<L>) -> Self {
        Self {
            memo: Mutex::new(HashMap::new()),
            inner,
        }
    }
}

impl<L: LossFn + ?Sized> LossFn for Memoized<L> {
    fn depth(&self) -> usize {
        self.inner.depth()
    }
    fn kind(&self) -> ObjectiveKind {
        self.inner.kind()
    }
    fn name(&self) -> String {
        self.inner.name()
    }
    fn loss(&self, mask: &LayerMask) -> Result<f64> {
        if let Some(&v) = self.memo.lock().unwrap().get(mask) {
            return Ok(v);
        }
        let v = self.inner.loss(mask)?;
        self.memo.lock().unwrap().insert(mask.clone(), v);
        Ok(v)
    }
    fn proxy_scores(&self) -> Result<Vec<f64>> {
        self.inner.proxy_scores()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Computed,
    CacheHit,
}

/// One line of the evaluation trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub seq: u64,
    pub mask_key: String,
    pub loss: f64,
    /// `loss - dense_baseline`.
    pub delta: f64,
    pub source: Source,
    pub wall_ms: f64,
}

impl EvalRecord {
    pub fn exploded(&self) -> bool {
        self.loss == EXPLODED_LOSS
    }
}

enum Slot {
    Ready(f64),
    Pending,
}

#[derive(Default)]
struct CacheState {
    slots: HashMap<String, Slot>,
    claimed: u64,
}

/// Cached evaluator over a [`LossFn`].
///
/// Every mask key is computed at most once, even under concurrent callers.
/// Batches are recorded in the trace in request order.
pub struct Objective {
    loss_fn: Arc<dyn LossFn>,
    eval_budget: Option<u64>,
    cache: Mutex<CacheState>,
    ready: Condvar,
    trace: Mutex<Vec<EvalRecord>>,
    baseline: OnceLock<f64>,
    computed: AtomicU64,
    hits: AtomicU64,
}

enum Resolution {
    Hit(f64),
    Owned,
    DuplicateOfOwned(usize),
    Waiting,
}

impl Objective {
    pub fn new(loss_fn: Arc<dyn LossFn>) -> Self {
        Self {
            loss_fn,
            eval_budget: None,
            cache: Mutex::new(CacheState::default()),
            ready: Condvar::new(),
            trace: Mutex::new(Vec::new()),
            baseline: OnceLock::new(),
            computed: AtomicU64::new(0),
            hits: AtomicU64::new(0),
        }
    }

    pub fn from_loss(loss_fn: impl LossFn + 'static) -> Self {
        Self::new(Arc::new(loss_fn))
    }

    /// Caps the number of computed (non-cached) evaluations.
    pub fn with_eval_budget(mut self, budget: u64) -> Self {
        self.eval_budget = Some(budget);
        self
    }

    pub fn depth(&self) -> usize {
        self.loss_fn.depth()
    }

    pub fn kind(&self) -> ObjectiveKind {
        self.loss_fn.kind()
    }

    pub fn name(&self) -> String {
        self.loss_fn.name()
    }

    pub fn loss_fn(&self) -> &Arc<dyn LossFn> {
        &self.loss_fn
    }

    /// Computed evaluations so far.
    pub fn computed(&self) -> u64 {
        self.computed.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }

    /// Number of distinct masks in the cache.
    pub fn distinct(&self) -> usize {
        self.cache
            .lock()
            .unwrap()
            .slots
            .values()
            .filter(|s| matches!(s, Slot::Ready(_)))
            .count()
    }

    pub fn trace(&self) -> Vec<EvalRecord> {
        self.trace.lock().unwrap().clone()
    }

    pub fn trace_len(&self) -> usize {
        self.trace.lock().unwrap().len()
    }

    pub fn trace_since(&self, from: usize) -> Vec<EvalRecord> {
        self.trace.lock().unwrap()[from..].to_vec()
    }

    /// Loss of the unpruned model. Goes through the cache like any mask.
    pub fn dense_baseline(&self) -> Result<f64> {
        Ok(self.evaluate(&LayerMask::dense(self.depth())?)?.loss)
    }

    /// The baseline if it has been evaluated, without touching the counters.
    pub fn known_baseline(&self) -> Option<f64> {
        self.baseline.get().copied()
    }

    pub fn evaluate(&self, mask: &LayerMask) -> Result<EvalRecord> {
        Ok(self
            .evaluate_many(std::slice::from_ref(mask))?
            .pop()
            .expect("one record per mask"))
    }

    /// Δ(S) = L(S) − L(∅).
    pub fn delta(&self, mask: &LayerMask) -> Result<f64> {
        Ok(self.evaluate(mask)?.delta)
    }

    /// `s_i = Δ({i})` for every layer.
    pub fn single_layer_scores(&self) -> Result<Vec<f64>> {
        let n = self.depth();
        let singles = (0..n)
            .map(|i| LayerMask::new(n, [i]))
            .collect::<Result<Vec<_>>>()?;
        Ok(self
            .evaluate_many(&singles)?
            .into_iter()
            .map(|r| r.delta)
            .collect())
    }

    /// Evaluates a batch and returns one record per input mask, in order.
    pub fn evaluate_many(&self, masks: &[LayerMask]) -> Result<Vec<EvalRecord>> {
        let depth = self.depth();
        if let Some(m) = masks.iter().find(|m| m.depth() != depth) {
            return Err(Error::DepthMismatch {
                expected: depth,
                actual: m.depth(),
            });
        }
        if self.baseline.get().is_none() && !masks.iter().any(LayerMask::is_dense) {
            self.evaluate_many(&[LayerMask::dense(depth)?])?;
        }

        let keys: Vec<String> = masks.iter().map(LayerMask::key).collect();
        let mut resolution = Vec::with_capacity(masks.len());
        let mut owned: Vec<usize> = Vec::new();
        {
            let mut cache = self.cache.lock().unwrap();
            let mut owned_keys: HashMap<&str, usize> = HashMap::new();
            for (i, key) in keys.iter().enumerate() {
                if let Some(&first) = owned_keys.get(key.as_str()) {
                    resolution.push(Resolution::DuplicateOfOwned(first));
                    continue;
                }
                match cache.slots.get(key) {
                    Some(Slot::Ready(v)) => resolution.push(Resolution::Hit(*v)),
                    Some(Slot::Pending) => resolution.push(Resolution::Waiting),
                    None => {
                        if let Some(budget) = self.eval_budget {
                            if cache.claimed >= budget {
                                drop(cache);
                                self.release(&owned, &keys);
                                return Err(Error::BudgetExhausted(budget));
                            }
                        }
                        cache.claimed += 1;
                        cache.slots.insert(key.clone(), Slot::Pending);
                        owned_keys.insert(key, i);
                        owned.push(i);
                        resolution.push(Resolution::Owned);
                    }
                }
            }
        }

        let started = Instant::now();
        let to_compute: Vec<LayerMask> = owned.iter().map(|&i| masks[i].clone()).collect();
        let outcomes = if to_compute.is_empty() {
            Vec::new()
        } else {
            self.loss_fn.loss_batch(&to_compute)
        };
        let per_eval_ms = if owned.is_empty() {
            0.0
        } else {
            started.elapsed().as_secs_f64() * 1e3 / owned.len() as f64
        };

        let mut values: Vec<Option<f64>> = vec![None; masks.len()];
        let mut failure = None;
        {
            let mut cache = self.cache.lock().unwrap();
            for (&i, outcome) in owned.iter().zip(outcomes) {
                match outcome {
                    Ok(v) => {
                        let v = sanitize(v);
                        cache.slots.insert(keys[i].clone(), Slot::Ready(v));
                        values[i] = Some(v);
                    }
                    Err(e) => {
                        cache.slots.remove(&keys[i]);
                        cache.claimed -= 1;
                        failure.get_or_insert(e);
                    }
                }
            }
        }
        self.ready.notify_all();
        if let Some(e) = failure {
            return Err(e);
        }
        self.computed.fetch_add(owned.len() as u64, Ordering::SeqCst);

        let mut sources = Vec::with_capacity(masks.len());
        for (i, res) in resolution.iter().enumerate() {
            let (v, src) = match *res {
                Resolution::Hit(v) => (v, Source::CacheHit),
                Resolution::Owned => (values[i].expect("computed"), Source::Computed),
                Resolution::DuplicateOfOwned(j) => (values[j].expect("computed"), Source::CacheHit),
                Resolution::Waiting => (self.wait_for(&masks[i], &keys[i])?, Source::CacheHit),
            };
            values[i] = Some(v);
            sources.push(src);
        }
        let hits = sources.iter().filter(|s| **s == Source::CacheHit).count();
        self.hits.fetch_add(hits as u64, Ordering::SeqCst);

        if self.baseline.get().is_none() {
            if let Some(i) = masks.iter().position(LayerMask::is_dense) {
                let _ = self.baseline.set(values[i].expect("resolved"));
            }
        }
        let baseline = *self.baseline.get().expect("baseline evaluated first");

        let mut trace = self.trace.lock().unwrap();
        let mut out = Vec::with_capacity(masks.len());
        for (i, src) in sources.into_iter().enumerate() {
            let loss = values[i].expect("resolved");
            let rec = EvalRecord {
                seq: trace.len() as u64,
                mask_key: keys[i].clone(),
                loss,
                delta: loss - baseline,
                source: src,
                wall_ms: if src == Source::Computed { per_eval_ms } else { 0.0 },
            };
            trace.push(rec.clone());
            out.push(rec);
        }
        Ok(out)
    }

    fn release(&self, owned: &[usize], keys: &[String]) {
        let mut cache = self.cache.lock().unwrap();
        for &i in owned {
            cache.slots.remove(&keys[i]);
            cache.claimed -= 1;
        }
        drop(cache);
        self.ready.notify_all();
    }

    fn wait_for(&self, mask: &LayerMask, key: &str) -> Result<f64> {
        let mut cache = self.cache.lock().unwrap();
        loop {
            match cache.slots.get(key) {
                Some(Slot::Ready(v)) => return Ok(*v),
                Some(Slot::Pending) => cache = self.ready.wait(cache).unwrap(),
                None => {
                    // the owner failed; retry as a fresh request
                    drop(cache);
                    return Ok(self.evaluate(mask)?.loss);
                }
            }
        }
    }
}

fn sanitize(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        EXPLODED_LOSS
    }
}

fn default_timeout() -> f64 {
    300.0
}

fn default_in_flight() -> usize {
    1
}

/// Serializable description of an objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ObjectiveConfig {
    Landscape {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        /// Path to a `LandscapeSpec` JSON file.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        spec: Option<LandscapeSpec>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        generate: Option<GenerateParams>,
        #[serde(default)]
        proxy_noise: f64,
        #[serde(default)]
        proxy_seed: u64,
    },
    ToyPerplexity {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default)]
        toy: ToyConfig,
    },
    ToyMargin {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default)]
        toy: ToyConfig,
    },
    External {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        command: Option<Vec<String>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tcp: Option<String>,
        #[serde(default = "default_timeout")]
        timeout_s: f64,
        #[serde(default = "default_in_flight")]
        in_flight: usize,
    },
}

impl ObjectiveConfig {
    /// Display name: the explicit `name` or the kind.
    pub fn name(&self) -> String {
        let (name, kind) = match self {
            ObjectiveConfig::Landscape { name, .. } => (name, "landscape"),
            ObjectiveConfig::ToyPerplexity { name, .. } => (name, "toy-perplexity"),
            ObjectiveConfig::ToyMargin { name, .. } => (name, "toy-margin"),
            ObjectiveConfig::External { name, .. } => (name, "external"),
        };
        name.clone().unwrap_or_else(|| kind.to_string())
    }

    pub fn build(&self) -> Result<Arc<dyn LossFn>> {
        Ok(match self {
            ObjectiveConfig::Landscape {
                path,
                spec,
                generate,
                proxy_noise,
                proxy_seed,
                ..
            } => {
                let spec = match (path, spec, generate) {
                    (Some(p), None, None) => {
                        serde_json::from_str(&std::fs::read_to_string(p)?)?
                    }
                    (None, Some(s), None) => s.clone(),
                    (None, None, Some(g)) => LandscapeSpec::generate(g)?,
                    _ => {
                        return Err(Error::InvalidConfig(
                            "landscape needs exactly one of path, spec, generate".into(),
                        ))
                    }
                };
                Arc::new(Landscape::new(spec)?.with_proxy_noise(*proxy_noise, *proxy_seed))
            }
            ObjectiveConfig::ToyPerplexity { toy, .. } => Arc::new(Memoized::new(Arc::new(
                ToyObjective::perplexity(Arc::new(ToyModel::build(toy)?)),
            ))),
            ObjectiveConfig::ToyMargin { toy, .. } => Arc::new(Memoized::new(Arc::new(
                ToyObjective::margin(Arc::new(ToyModel::build(toy)?)),
            ))),
            ObjectiveConfig::External {
                command,
                tcp,
                timeout_s,
                in_flight,
                ..
            } => {
                let endpoint = match (command, tcp) {
                    (Some(c), None) if !c.is_empty() => Endpoint::Command(c.clone()),
                    (None, Some(addr)) => Endpoint::Tcp(addr.clone()),
                    _ => {
                        return Err(Error::InvalidConfig(
                            "external objective needs exactly one of command, tcp".into(),
                        ))
                    }
                };
                if !(*timeout_s > 0.0) || *in_flight == 0 {
                    return Err(Error::InvalidConfig(
                        "timeout_s and in_flight must be positive".into(),
                    ));
                }
                Arc::new(ExternalEvaluator::connect(
                    &endpoint,
                    std::time::Duration::from_secs_f64(*timeout_s),
                    *in_flight,
                )?)
            }
        })
    }
}
