//! `depthsel`: layer-subset search for depth pruning from the command line.

mod config;

use std::io::{BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use depthsel::analysis::{build_sweep, inter_method_variance, spearman, SweepReport};
use depthsel::objective::{
    serve_lines, GenerateParams, Handshake, LandscapeSpec, LossFn, ObjectiveConfig, ObjectiveKind, PROTOCOL_VERSION,
};
use depthsel::oracle::brute_force;
use depthsel::{run_search, Error, Objective};
use serde_json::json;

use crate::config::{split_overrides, RunConfig};

const AFTER_HELP: &str = "\
Layer indices are 0-based. A mask key reads `N:i1,...,ik`, e.g. `12:3,5`.

Every configuration field can be overridden with a dotted flag, for example
`--search.algorithm=beam --search.beam_width=5 --objective.kind=toy-margin`.
Precedence: dotted flags, then DEPTHSEL_SEED (sets search.seed), then the
config file.

Exit status: 0 success, 2 configuration error, 3 evaluator failure,
4 search space too large for the oracle, 1 anything else.";

#[derive(Parser)]
#[command(name = "depthsel", version, about = "Choose which transformer blocks to remove", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one search and write result.json, trace.jsonl and steps.jsonl.
    Search {
        #[command(flatten)]
        common: Common,
    },
    /// Run an algorithm x objective x budget x seed grid and write the report bundle.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Reuse finished cells found in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Enumerate every k-subset and report the exact optimum.
    Oracle {
        #[command(flatten)]
        common: Common,
    },
    /// Write a seeded synthetic loss surface as JSON.
    GenLandscape {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        depth: usize,
        #[arg(long)]
        density: f64,
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute statistics from a sweep report or from two CSV columns.
    Analyze {
        /// A report.json written by `sweep`.
        #[arg(long, conflicts_with = "table")]
        report: Option<PathBuf>,
        /// A CSV file with a header row.
        #[arg(long, requires_all = ["x", "y"])]
        table: Option<PathBuf>,
        #[arg(long)]
        x: Option<String>,
        #[arg(long)]
        y: Option<String>,
    },
    /// Serve the configured objective over the evaluator line protocol.
    #[command(hide = true)]
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Accept TCP connections here instead of using stdin/stdout.
        #[arg(long)]
        listen: Option<String>,
        #[arg(long, default_value_t = PROTOCOL_VERSION)]
        proto: u32,
        /// Depth announced in the handshake, if different from the objective's.
        #[arg(long)]
        announce_depth: Option<usize>,
    },
}

#[derive(clap::Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (same as `--output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// An error with the exit status it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let code = match error.downcast_ref::<Error>() {
            Some(e) => library_code(e, false),
            None if error.downcast_ref::<serde_json::Error>().is_some() => 2,
            None if error.downcast_ref::<clap::Error>().is_some() => 2,
            None => 1,
        };
        Failure { code, error }
    }
}

fn library_code(e: &Error, external: bool) -> u8 {
    match e {
        Error::SpaceTooLarge(_) => 4,
        e if e.is_evaluator_failure() => 3,
        Error::Io(_) if external => 3,
        Error::InvalidConfig(_)
        | Error::UnknownAlgorithm(_)
        | Error::BudgetTooLarge { .. }
        | Error::IndexOutOfRange { .. }
        | Error::ZeroDepth
        | Error::BadMaskKey(_)
        | Error::DepthMismatch { .. }
        | Error::InvalidLandscape(_)
        | Error::Json(_) => 2,
        _ => 1,
    }
}

fn config_failure(e: anyhow::Error) -> Failure {
    Failure { code: 2, error: e }
}

/// Maps a library error raised while talking to `objective`.
fn eval_failure(objective: &ObjectiveConfig, e: Error) -> Failure {
    let external = matches!(objective, ObjectiveConfig::External { .. });
    Failure {
        code: library_code(&e, external),
        error: e.into(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run() -> Result<(), Failure> {
    let (args, overrides) = split_overrides(std::env::args().collect()).map_err(config_failure)?;
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let text = e.render().to_string();
            let text = text.trim_end().strip_prefix("error: ").unwrap_or(text.trim_end());
            return Err(config_failure(anyhow!(text.to_string())));
        }
    };
    let load = |path: &Option<PathBuf>| RunConfig::load(path.as_deref(), &overrides).map_err(config_failure);
    let load_common = |c: &Common| -> Result<RunConfig, Failure> {
        let mut cfg = load(&c.config)?;
        if let Some(out) = &c.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    };
    match cli.command {
        Command::Search { common } => cmd_search(&load_common(&common)?),
        Command::Sweep { common, resume } => {
            let mut cfg = load_common(&common)?;
            cfg.resume |= resume;
            cmd_sweep(&cfg)
        }
        Command::Oracle { common } => cmd_oracle(&load_common(&common)?),
        Command::GenLandscape {
            seed,
            depth,
            density,
            gamma,
            out,
        } => cmd_gen_landscape(GenerateParams::new(seed, depth, density, gamma), &out),
        Command::Analyze { report, table, x, y } => match (report, table) {
            (Some(r), None) => cmd_analyze_report(&r),
            (None, Some(t)) => cmd_analyze_table(&t, &x.unwrap_or_default(), &y.unwrap_or_default()),
            _ => Err(config_failure(anyhow!("analyze needs --report or --table with --x and --y"))),
        },
        Command::Serve {
            config,
            listen,
            proto,
            announce_depth,
        } => cmd_serve(&load(&config)?, listen.as_deref(), proto, announce_depth),
    }
}

fn build(objective: &ObjectiveConfig) -> Result<Arc<dyn LossFn>, Failure> {
    objective.build().map_err(|e| eval_failure(objective, e))
}

fn write_config(cfg: &RunConfig) -> Result<(), Failure> {
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    std::fs::write(cfg.output_dir.join("config.json"), cfg.to_json())?;
    Ok(())
}

fn cmd_search(cfg: &RunConfig) -> Result<(), Failure> {
    let objective = cfg.objective().map_err(config_failure)?;
    let obj = Objective::new(build(objective)?);
    let result = run_search(&cfg.search, &obj).map_err(|e| eval_failure(objective, e))?;
    write_config(cfg)?;
    result.write_artifacts(&cfg.output_dir)?;
    println!("{} {}", result.mask_key, result.loss);
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig) -> Result<(), Failure> {
    let sweep = cfg.sweep_config().map_err(config_failure)?;
    sweep.validate().map_err(|e| config_failure(e.into()))?;
    write_config(cfg)?;
    let report = build_sweep(&sweep, Some(&cfg.output_dir), cfg.resume)?;
    let jaccard = report
        .derived
        .cross_objective_jaccard
        .map_or_else(|| "n/a".to_string(), |j| format!("{j:.4}"));
    println!(
        "{} cells ({} failed), cross-objective jaccard {jaccard}, bundle in {}",
        report.cells.len(),
        report.derived.failed_cells,
        cfg.output_dir.display()
    );
    Ok(())
}

fn cmd_oracle(cfg: &RunConfig) -> Result<(), Failure> {
    let objective = cfg.objective().map_err(config_failure)?;
    let obj = Objective::new(build(objective)?);
    let result = brute_force(&obj, cfg.search.k, cfg.oracle.keep_table, cfg.oracle.cap as u128)
        .map_err(|e| eval_failure(objective, e))?;
    write_config(cfg)?;
    std::fs::write(
        cfg.output_dir.join("oracle.json"),
        serde_json::to_string_pretty(&json!({
            "mask_key": result.mask_key,
            "removed": result.removed,
            "depth": result.depth,
            "loss": result.loss,
            "delta": result.delta,
            "enumerated": result.enumerated,
        }))? + "\n",
    )?;
    if result.table.is_some() {
        let file = std::fs::File::create(cfg.output_dir.join("table.csv"))?;
        result.write_table_csv(std::io::BufWriter::new(file))?;
    }
    println!("{} {}", result.mask_key, result.loss);
    Ok(())
}

fn cmd_gen_landscape(params: GenerateParams, out: &Path) -> Result<(), Failure> {
    let spec = LandscapeSpec::generate(&params)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out, serde_json::to_string_pretty(&spec)? + "\n")?;
    Ok(())
}

fn cmd_analyze_report(path: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let report: SweepReport = serde_json::from_str(&text).map_err(|e| config_failure(e.into()))?;
    let derived = report.recompute();
    let consistent = derived == report.derived;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({ "consistent": consistent, "derived": derived }))?
    );
    if !consistent {
        return Err(anyhow!("stored statistics differ from the recomputed ones").into());
    }
    Ok(())
}

fn column(reader: &mut csv::Reader<std::fs::File>, name: &str) -> Result<usize, Failure> {
    let headers = reader.headers()?;
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| config_failure(anyhow!("no column named `{name}`")))
}

fn cmd_analyze_table(path: &Path, x: &str, y: &str) -> Result<(), Failure> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let (ix, iy) = (column(&mut reader, x)?, column(&mut reader, y)?);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |i: usize| -> Result<f64, Failure> {
            record
                .get(i)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| config_failure(anyhow!("row {}: column {i} is not a number", line + 1)))
        };
        xs.push(parse(ix)?);
        ys.push(parse(iy)?);
    }
    let out = json!({
        "n": xs.len(),
        "x": x,
        "y": y,
        "spearman": spearman(&xs, &ys).ok(),
        "variance_x": inter_method_variance(&xs).ok(),
        "variance_y": inter_method_variance(&ys).ok(),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_serve(cfg: &RunConfig, listen: Option<&str>, proto: u32, announce_depth: Option<usize>) -> Result<(), Failure> {
    let objective = cfg.objective().map_err(config_failure)?;
    let loss = build(objective)?;
    let handshake = Handshake {
        proto,
        depth: announce_depth.unwrap_or_else(|| loss.depth()),
        objective: match loss.kind() {
            ObjectiveKind::ToyMargin => "margin".into(),
            _ => "perplexity".into(),
        },
        name: objective.name(),
    };
    match listen {
        None => {
            let stdin = std::io::stdin().lock();
            let stdout = std::io::stdout().lock();
            serve_lines(&handshake, loss.as_ref(), stdin, stdout)?;
        }
        Some(addr) => {
            let listener = TcpListener::bind(addr)?;
            eprintln!("listening on {}", listener.local_addr()?);
            std::io::stderr().flush()?;
            for stream in listener.incoming() {
                let stream = stream?;
                let reader = BufReader::new(stream.try_clone()?);
                if let Err(e) = serve_lines(&handshake, loss.as_ref(), reader, stream) {
                    log::warn!("connection ended: {e}");
                }
            }
        }
    }
    Ok(())
}
