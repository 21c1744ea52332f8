//! Algorithm × objective grids and the report bundle built from them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::LayerMask;
use crate::objective::{LossFn, Objective, ObjectiveConfig};
use crate::search::{run_search, Algorithm, SearchConfig, SearchResult};

use super::stats::{contiguity, inter_method_variance, jaccard, spearman};

/// Bundle files whose bytes depend only on the configuration.
pub const BUNDLE_FILES: [&str; 6] = [
    "report.json",
    "pruning_map.csv",
    "rank_corr.csv",
    "variance.csv",
    "timing.csv",
    "jaccard.csv",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub objectives: Vec<ObjectiveConfig>,
    #[serde(default = "all_algorithms")]
    pub algorithms: Vec<Algorithm>,
    pub budgets: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Hyperparameters shared by every cell; `algorithm`, `k` and `seed` are
    /// overwritten per cell.
    #[serde(default)]
    pub search: SearchConfig,
    /// Concurrent cells; `None` uses the available parallelism.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

fn all_algorithms() -> Vec<Algorithm> {
    Algorithm::ALL.to_vec()
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.objectives.is_empty() || self.algorithms.is_empty() || self.budgets.is_empty() || self.seeds.is_empty() {
            return bad("sweep needs at least one objective, algorithm, budget and seed");
        }
        let names: BTreeSet<String> = self.objectives.iter().map(ObjectiveConfig::name).collect();
        if names.len() != self.objectives.len() {
            return bad("objective names must be unique within a sweep");
        }
        if self.workers == Some(0) {
            return bad("workers must be positive");
        }
        self.search.validate()
    }
}

/// One grid cell. A failed cell keeps its error and is left out of the
/// derived statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub objective: String,
    pub algorithm: Algorithm,
    pub k: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<SearchResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Loss of the chosen mask under every objective of the sweep.
    #[serde(default)]
    pub cross: BTreeMap<String, f64>,
}

impl Cell {
    fn sort_key(&self) -> (&str, Algorithm, usize, u64) {
        (&self.objective, self.algorithm, self.k, self.seed)
    }

    fn file_name(&self) -> String {
        cell_file(&self.objective, self.algorithm, self.k, self.seed)
    }

    pub fn mask(&self) -> Option<LayerMask> {
        self.result.as_ref().map(SearchResult::mask)
    }
}

fn cell_file(objective: &str, algorithm: Algorithm, k: usize, seed: u64) -> String {
    let safe: String = objective
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}__{algorithm}__k{k}__s{seed}.json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCorrelation {
    pub objective: String,
    pub k: usize,
    pub seed: u64,
    /// Objective whose losses are ranked against the calibration losses.
    pub target: String,
    pub n: usize,
    /// `None` when either column is constant.
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dispersion {
    pub objective: String,
    pub k: usize,
    pub seed: u64,
    pub metric: String,
    pub n: usize,
    pub variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub k: usize,
    pub seed: u64,
    pub a_objective: String,
    pub a_algorithm: Algorithm,
    pub b_objective: String,
    pub b_algorithm: Algorithm,
    pub jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub objective: String,
    pub algorithm: Algorithm,
    pub k: usize,
    pub seed: u64,
    pub runs: usize,
    pub max_run: usize,
}

/// Statistics derived from the cells alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Derived {
    /// Losses are ranked ascending: rank 1 is the lowest (best) loss.
    pub rank_direction: String,
    pub rank_correlations: Vec<RankCorrelation>,
    pub variances: Vec<Dispersion>,
    pub jaccard: Vec<Overlap>,
    /// Mean Jaccard between masks chosen by the same algorithm, budget and
    /// seed under different objectives; `None` with fewer than two objectives.
    pub cross_objective_jaccard: Option<f64>,
    pub contiguity: Vec<Shape>,
    pub failed_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: SweepConfig,
    pub depth: usize,
    /// Sorted by (objective, algorithm, k, seed). Wall-clock fields are zeroed;
    /// see `wall_clock.csv`.
    pub cells: Vec<Cell>,
    pub derived: Derived,
}

struct Built {
    name: String,
    loss: Arc<dyn LossFn>,
}

fn run_cell(
    cfg: &SweepConfig,
    objectives: &[Built],
    (oi, algorithm, k, seed): (usize, Algorithm, usize, u64),
) -> Cell {
    let built = &objectives[oi];
    let mut cell = Cell {
        objective: built.name.clone(),
        algorithm,
        k,
        seed,
        result: None,
        error: None,
        cross: BTreeMap::new(),
    };
    let mut sc = cfg.search.clone();
    sc.algorithm = algorithm;
    sc.k = k;
    sc.seed = seed;
    let obj = Objective::new(built.loss.clone());
    let outcome = run_search(&sc, &obj).and_then(|r| {
        let mask = r.mask();
        let mut cross = BTreeMap::new();
        for other in objectives {
            let loss = if other.name == built.name {
                r.loss
            } else {
                sanitize(other.loss.loss(&mask)?)
            };
            cross.insert(other.name.clone(), loss);
        }
        Ok((r, cross))
    });
    match outcome {
        Ok((r, cross)) => {
            cell.result = Some(r);
            cell.cross = cross;
        }
        Err(e) => {
            log::warn!("cell {} failed: {e}", cell.file_name());
            cell.error = Some(e.to_string());
        }
    }
    cell
}

fn sanitize(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        crate::objective::EXPLODED_LOSS
    }
}

fn load_cell(path: &Path, cfg: &SweepConfig, key: (&str, Algorithm, usize, u64)) -> Option<Cell> {
    let cell: Cell = serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()?;
    let result = cell.result.as_ref()?;
    let mut expected = cfg.search.clone();
    expected.algorithm = key.1;
    expected.k = key.2;
    expected.seed = key.3;
    (cell.sort_key() == key && result.config == expected && cell.cross.len() == cfg.objectives.len()).then_some(cell)
}

/// Runs every (objective, algorithm, budget, seed) cell.
///
/// With `out_dir`, each finished cell is written to `out_dir/cells/` and,
/// when `resume` is set, cells already present there are reused instead of
/// recomputed. Cell failures are recorded, never fatal.
pub fn build_sweep(cfg: &SweepConfig, out_dir: Option<&Path>, resume: bool) -> Result<SweepReport> {
    cfg.validate()?;
    let objectives = cfg
        .objectives
        .iter()
        .map(|o| {
            Ok(Built {
                name: o.name(),
                loss: o.build()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let depth = objectives[0].loss.depth();
    if let Some(o) = objectives.iter().find(|o| o.loss.depth() != depth) {
        return Err(Error::DepthMismatch {
            expected: depth,
            actual: o.loss.depth(),
        });
    }
    let cell_dir: Option<PathBuf> = out_dir.map(|d| d.join("cells"));
    if let Some(d) = &cell_dir {
        std::fs::create_dir_all(d)?;
    }

    let mut keys = Vec::new();
    for (oi, _) in objectives.iter().enumerate() {
        for &a in &cfg.algorithms {
            for &k in &cfg.budgets {
                for &s in &cfg.seeds {
                    keys.push((oi, a, k, s));
                }
            }
        }
    }

    let work = || -> Vec<Cell> {
        keys.par_iter()
            .map(|&key| {
                let name = &objectives[key.0].name;
                let file = cell_dir.as_ref().map(|d| d.join(cell_file(name, key.1, key.2, key.3)));
                if resume {
                    if let Some(c) = file.as_deref().and_then(|p| load_cell(p, cfg, (name, key.1, key.2, key.3))) {
                        log::info!("reusing {}", c.file_name());
                        return c;
                    }
                }
                let cell = run_cell(cfg, &objectives, key);
                if let (Some(p), true) = (&file, cell.result.is_some()) {
                    let json = serde_json::to_string_pretty(&cell).expect("serializable");
                    if let Err(e) = std::fs::write(p, json + "\n") {
                        log::warn!("could not write {}: {e}", p.display());
                    }
                }
                cell
            })
            .collect()
    };
    let cells = match cfg.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?
            .install(work),
        None => work(),
    };

    let report = SweepReport::from_cells(cfg.clone(), depth, cells);
    if let Some(dir) = out_dir {
        report.write_bundle(dir)?;
    }
    Ok(report)
}

impl SweepReport {
    /// Sorts the cells and derives every statistic.
    pub fn from_cells(config: SweepConfig, depth: usize, mut cells: Vec<Cell>) -> Self {
        cells.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        Self {
            config,
            depth,
            derived: derive(&cells),
            cells,
        }
    }

    /// Recomputes the derived statistics from the cells.
    pub fn recompute(&self) -> Derived {
        derive(&self.cells)
    }

    fn canonical_cells(&self) -> Vec<Cell> {
        let mut cells = self.cells.clone();
        for c in &mut cells {
            if let Some(r) = c.result.as_mut() {
                r.wall_ms = 0.0;
            }
        }
        cells
    }

    /// JSON of the report with wall-clock fields zeroed.
    pub fn to_json(&self) -> String {
        let canonical = Self {
            cells: self.canonical_cells(),
            ..self.clone()
        };
        serde_json::to_string_pretty(&canonical).expect("serializable") + "\n"
    }

    /// Rows `(objective, algorithm, k, seed)` by layer, 1 where removed.
    pub fn pruning_map_csv(&self) -> String {
        let mut out = String::from("objective,algorithm,k,seed");
        for i in 0..self.depth {
            write!(out, ",layer_{i}").unwrap();
        }
        out.push('\n');
        for c in &self.cells {
            let Some(mask) = c.mask() else { continue };
            write!(out, "{},{},{},{}", c.objective, c.algorithm, c.k, c.seed).unwrap();
            for bit in mask.keep_mask() {
                write!(out, ",{}", u8::from(!bit)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn rank_corr_csv(&self) -> String {
        let mut out = String::from("objective,k,seed,target,n,rho\n");
        for r in &self.derived.rank_correlations {
            writeln!(out, "{},{},{},{},{},{}", r.objective, r.k, r.seed, r.target, r.n, opt(r.rho)).unwrap();
        }
        out
    }

    pub fn variance_csv(&self) -> String {
        let mut out = String::from("objective,k,seed,metric,n,variance\n");
        for r in &self.derived.variances {
            writeln!(out, "{},{},{},{},{},{}", r.objective, r.k, r.seed, r.metric, r.n, opt(r.variance)).unwrap();
        }
        out
    }

    /// Deterministic cost per cell: computed evaluations, distinct masks and
    /// cache hits.
    pub fn timing_csv(&self) -> String {
        let mut out = String::from("objective,algorithm,k,seed,evaluations,distinct_masks,cache_hits\n");
        for c in &self.cells {
            let Some(r) = &c.result else { continue };
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                c.objective, c.algorithm, c.k, c.seed, r.evaluations, r.distinct_masks, r.cache_hits
            )
            .unwrap();
        }
        out
    }

    pub fn jaccard_csv(&self) -> String {
        let mut out = String::from("k,seed,a_objective,a_algorithm,b_objective,b_algorithm,jaccard\n");
        for r in &self.derived.jaccard {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.k, r.seed, r.a_objective, r.a_algorithm, r.b_objective, r.b_algorithm, r.jaccard
            )
            .unwrap();
        }
        out
    }

    pub fn wall_clock_csv(&self) -> String {
        let mut out = String::from("objective,algorithm,k,seed,wall_ms\n");
        for c in &self.cells {
            let Some(r) = &c.result else { continue };
            writeln!(out, "{},{},{},{},{}", c.objective, c.algorithm, c.k, c.seed, r.wall_ms).unwrap();
        }
        out
    }

    /// Writes the bundle plus `wall_clock.csv`, which varies run to run.
    pub fn write_bundle(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let files = [
            ("report.json", self.to_json()),
            ("pruning_map.csv", self.pruning_map_csv()),
            ("rank_corr.csv", self.rank_corr_csv()),
            ("variance.csv", self.variance_csv()),
            ("timing.csv", self.timing_csv()),
            ("jaccard.csv", self.jaccard_csv()),
            ("wall_clock.csv", self.wall_clock_csv()),
        ];
        for (name, body) in files {
            std::fs::write(dir.join(name), body)?;
        }
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn derive(cells: &[Cell]) -> Derived {
    let ok: Vec<&Cell> = cells.iter().filter(|c| c.result.is_some()).collect();
    let names: BTreeSet<&str> = ok.iter().flat_map(|c| c.cross.keys().map(String::as_str)).collect();

    // condition = (calibration objective, k, seed); members are algorithms
    let mut conditions: BTreeMap<(&str, usize, u64), Vec<&Cell>> = BTreeMap::new();
    for c in &ok {
        conditions.entry((&c.objective, c.k, c.seed)).or_default().push(c);
    }
    let mut rank_correlations = Vec::new();
    let mut variances = Vec::new();
    for (&(objective, k, seed), members) in &conditions {
        let column = |name: &str| -> Vec<f64> { members.iter().filter_map(|c| c.cross.get(name).copied()).collect() };
        let own = column(objective);
        for &metric in &names {
            let values = column(metric);
            if values.len() != members.len() {
                continue;
            }
            variances.push(Dispersion {
                objective: objective.to_string(),
                k,
                seed,
                metric: metric.to_string(),
                n: values.len(),
                variance: inter_method_variance(&values).ok(),
            });
            if metric != objective {
                rank_correlations.push(RankCorrelation {
                    objective: objective.to_string(),
                    k,
                    seed,
                    target: metric.to_string(),
                    n: values.len(),
                    rho: spearman(&own, &values).ok(),
                });
            }
        }
    }

    let mut groups: BTreeMap<(usize, u64), Vec<&Cell>> = BTreeMap::new();
    for c in &ok {
        groups.entry((c.k, c.seed)).or_default().push(c);
    }
    let mut overlaps = Vec::new();
    let mut cross = Vec::new();
    for (&(k, seed), members) in &groups {
        for (i, a) in members.iter().enumerate() {
            for b in &members[i + 1..] {
                let j = jaccard(&a.mask().unwrap(), &b.mask().unwrap()).expect("sweep cells share depth");
                if a.algorithm == b.algorithm && a.objective != b.objective {
                    cross.push(j);
                }
                overlaps.push(Overlap {
                    k,
                    seed,
                    a_objective: a.objective.clone(),
                    a_algorithm: a.algorithm,
                    b_objective: b.objective.clone(),
                    b_algorithm: b.algorithm,
                    jaccard: j,
                });
            }
        }
    }

    let contiguity = ok
        .iter()
        .map(|c| {
            let (runs, max_run) = contiguity(&c.mask().unwrap());
            Shape {
                objective: c.objective.clone(),
                algorithm: c.algorithm,
                k: c.k,
                seed: c.seed,
                runs,
                max_run,
            }
        })
        .collect();

    Derived {
        rank_direction: "ascending loss; rank 1 is the lowest loss".to_string(),
        rank_correlations,
        variances,
        jaccard: overlaps,
        cross_objective_jaccard: (!cross.is_empty()).then(|| cross.iter().sum::<f64>() / cross.len() as f64),
        contiguity,
        failed_cells: cells.len() - ok.len(),
    }
}
