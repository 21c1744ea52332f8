use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use depthsel::analysis::SweepConfig;
use depthsel::objective::ObjectiveConfig;
use depthsel::search::{Algorithm, SearchConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const SEED_ENV: &str = "DEPTHSEL_SEED";

/// Everything a subcommand needs, parsed from one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<ObjectiveConfig>,
    /// Objectives of a sweep; defaults to `[objective]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objectives: Vec<ObjectiveConfig>,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub sweep: SweepGrid,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub resume: bool,
    #[serde(default)]
    pub oracle: OracleOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub algorithms: Vec<Algorithm>,
    /// Empty means `[search.k]`.
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            algorithms: Algorithm::ALL.to_vec(),
            budgets: Vec::new(),
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleOptions {
    pub cap: u64,
    pub keep_table: bool,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            cap: depthsel::oracle::DEFAULT_CAP as u64,
            keep_table: false,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("depthsel-out")
}

impl RunConfig {
    /// Reads `path` (if any), applies the seed variable and then the dotted
    /// overrides, and deserialises. Later sources win.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> anyhow::Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => Value::Object(Map::new()),
        };
        if let Ok(seed) = std::env::var(SEED_ENV) {
            let seed: u64 = seed
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV} must be an unsigned integer"))?;
            set_path(&mut doc, "search.seed", Value::from(seed))?;
        }
        for (key, raw) in overrides {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            set_path(&mut doc, key, value)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).context("invalid configuration")?;
        cfg.search.validate()?;
        Ok(cfg)
    }

    pub fn objective(&self) -> anyhow::Result<&ObjectiveConfig> {
        self.objective
            .as_ref()
            .context("configuration has no `objective` section")
    }

    pub fn sweep_config(&self) -> anyhow::Result<SweepConfig> {
        let objectives = if self.objectives.is_empty() {
            vec![self.objective()?.clone()]
        } else {
            self.objectives.clone()
        };
        let budgets = if self.sweep.budgets.is_empty() {
            vec![self.search.k]
        } else {
            self.sweep.budgets.clone()
        };
        Ok(SweepConfig {
            objectives,
            algorithms: self.sweep.algorithms.clone(),
            budgets,
            seeds: self.sweep.seeds.clone(),
            search: self.search.clone(),
            workers: self.workers,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }
}

/// Sets `a.b.c` in a JSON document, creating objects along the way.
pub fn set_path(doc: &mut Value, dotted: &str, value: Value) -> anyhow::Result<()> {
    let mut node = doc;
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed override key `{dotted}`");
    }
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            bail!("override `{dotted}` descends into a non-object");
        }
        node = node
            .as_object_mut()
            .unwrap()
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    match node.as_object_mut() {
        Some(obj) => {
            obj.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => bail!("override `{dotted}` descends into a non-object"),
    }
}

/// `(dotted path, raw value)` pairs taken from the command line.
pub type Overrides = Vec<(String, String)>;

/// Splits `--a.b=value` and `--a.b value` overrides out of the argument list.
/// A flag is an override when its name contains a dot.
pub fn split_overrides(args: Vec<String>) -> anyhow::Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().with_context(|| format!("--{name} needs a value"))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_out() {
        let (rest, ov) = split_overrides(s(&[
            "depthsel",
            "search",
            "--config",
            "c.json",
            "--search.beam_width=5",
            "--search.algorithm",
            "beam",
        ]))
        .unwrap();
        assert_eq!(rest, s(&["depthsel", "search", "--config", "c.json"]));
        assert_eq!(
            ov,
            vec![
                ("search.beam_width".to_string(), "5".to_string()),
                ("search.algorithm".to_string(), "beam".to_string())
            ]
        );
        assert!(split_overrides(s(&["--search.k"])).is_err());
    }

    #[test]
    fn nested_paths_are_created() {
        let mut doc = Value::Object(Map::new());
        set_path(&mut doc, "search.ga.population", Value::from(8)).unwrap();
        assert_eq!(doc["search"]["ga"]["population"], 8);
        set_path(&mut doc, "search.k", Value::from(3)).unwrap();
        assert!(set_path(&mut doc, "search.k.x", Value::from(1)).is_err());
        assert!(set_path(&mut doc, "search..k", Value::from(1)).is_err());
    }

    #[test]
    fn overrides_reach_typed_fields() {
        let cfg = RunConfig::load(
            None,
            &[
                ("search.algorithm".into(), "beam".into()),
                ("search.beam_width".into(), "2".into()),
                ("objective.kind".into(), "toy-margin".into()),
                ("sweep.budgets".into(), "[3,5]".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.search.algorithm, Algorithm::Beam);
        assert_eq!(cfg.search.beam_width, 2);
        assert_eq!(cfg.objective().unwrap().name(), "toy-margin");
        assert_eq!(cfg.sweep.budgets, vec![3, 5]);
    }

    #[test]
    fn unknown_fields_are_errors() {
        assert!(RunConfig::load(None, &[("search.width".into(), "2".into())]).is_err());
        assert!(RunConfig::load(None, &[("colour".into(), "2".into())]).is_err());
    }

    #[test]
    fn echoed_config_round_trips() {
        let cfg = RunConfig::load(None, &[("search.k".into(), "4".into())]).unwrap();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }
}
