use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_depthsel"));
    c.env_remove("DEPTHSEL_SEED");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn depthsel")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn landscape(dir: &Path, depth: usize) -> PathBuf {
    let path = dir.join(format!("land{depth}.json"));
    let out = run(bin()
        .args(["gen-landscape", "--seed", "3", "--depth", &depth.to_string()])
        .args(["--density", "0.5", "--gamma", "0.3", "--out"])
        .arg(&path));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn search_writes_artifacts_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let land = landscape(dir.path(), 10);
    let out = dir.path().join("out");
    let o = run(bin()
        .arg("search")
        .arg(format!("--objective.path={}", land.display()))
        .args(["--objective.kind", "landscape", "--search.k=3", "--search.algorithm=beam"])
        .arg("--out")
        .arg(&out));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let result = read_json(&out.join("result.json"));
    assert_eq!(stdout.split_whitespace().next().unwrap(), result["mask_key"]);
    assert_eq!(result["algorithm"], "beam");
    let trace = std::fs::read_to_string(out.join("trace.jsonl")).unwrap();
    let first: Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    assert_eq!(first["mask_key"], "10:");
    assert!(out.join("steps.jsonl").exists());

    // the echoed config reproduces the run
    let again = dir.path().join("again");
    let o = run(bin()
        .args(["search", "--config"])
        .arg(out.join("config.json"))
        .arg("--out")
        .arg(&again));
    assert_eq!(code(&o), 0);
    assert_eq!(read_json(&again.join("result.json"))["mask_key"], result["mask_key"]);
    let echoed = read_json(&again.join("config.json"));
    let mut original = read_json(&out.join("config.json"));
    original["output_dir"] = echoed["output_dir"].clone();
    assert_eq!(echoed, original);
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let land = landscape(dir.path(), 10);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"objective": {{"kind": "landscape", "path": {:?}}}, "search": {{"algorithm": "ga", "k": 3, "seed": 1}}}}"#,
            land.display().to_string()
        ),
    )
    .unwrap();
    let seed_of = |env: Option<&str>, flag: Option<&str>, name: &str| {
        let out = dir.path().join(name);
        let mut c = bin();
        c.args(["search", "--config"]).arg(&cfg).arg("--out").arg(&out);
        if let Some(e) = env {
            c.env("DEPTHSEL_SEED", e);
        }
        if let Some(f) = flag {
            c.arg(format!("--search.seed={f}"));
        }
        assert_eq!(code(&run(&mut c)), 0);
        read_json(&out.join("config.json"))["search"]["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of(None, None, "a"), 1);
    assert_eq!(seed_of(Some("7"), None, "b"), 7);
    assert_eq!(seed_of(Some("7"), Some("9"), "c"), 9);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let land = landscape(dir.path(), 10);
    let path_flag = format!("--objective.path={}", land.display());
    let out = dir.path().join("o");

    // configuration problems
    assert_eq!(code(&run(bin().args(["search", "--search.k=3"]))), 2);
    assert_eq!(code(&run(bin().args(["search", "--objective.kind=landscape", "--search.widht=3"]))), 2);
    assert_eq!(code(&run(bin().args(["search", "--no-such-flag"]))), 2);
    let too_big = run(bin()
        .args(["search", "--objective.kind=landscape", &path_flag, "--search.k=11"])
        .arg("--out")
        .arg(&out));
    assert_eq!(code(&too_big), 2);
    let bad_algo = run(bin().args(["search", "--objective.kind=landscape", &path_flag, "--search.algorithm=annealing"]));
    assert_eq!(code(&bad_algo), 2);

    // oracle refuses huge spaces
    let big = run(bin()
        .args(["oracle", "--objective.kind=landscape", "--search.k=20"])
        .arg(r#"--objective.generate={"seed":1,"depth":40,"density":0.5,"gamma":0.3}"#)
        .arg("--out")
        .arg(&out));
    assert_eq!(code(&big), 4);

    // an evaluator that exits immediately
    let dead = run(bin()
        .args(["search", "--objective.kind=external", r#"--objective.command=["true"]"#, "--search.k=1"])
        .arg("--out")
        .arg(&out));
    assert_eq!(code(&dead), 3, "{}", String::from_utf8_lossy(&dead.stderr));

    assert_eq!(code(&run(bin().arg("--help"))), 0);
}

#[test]
fn oracle_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let land = landscape(dir.path(), 8);
    let out = dir.path().join("o");
    let o = run(bin()
        .args(["oracle", "--objective.kind=landscape", "--search.k=2", "--oracle.keep_table=true"])
        .arg(format!("--objective.path={}", land.display()))
        .arg("--out")
        .arg(&out));
    assert_eq!(code(&o), 0);
    let result = read_json(&out.join("oracle.json"));
    assert_eq!(result["enumerated"], 28);
    let table = std::fs::read_to_string(out.join("table.csv")).unwrap();
    assert_eq!(table.lines().next(), Some("mask_key,loss,delta"));
    assert_eq!(table.lines().count(), 29);
    let best = table
        .lines()
        .skip(1)
        .map(|l| {
            let (key, loss) = l.rsplit_once(',').unwrap().0.rsplit_once(',').unwrap();
            (loss.parse::<f64>().unwrap(), key.trim_matches('"').to_string())
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap();
    assert_eq!(best.1, result["mask_key"].as_str().unwrap());
}

#[test]
fn analyze_table_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("t.csv");
    std::fs::write(&table, "a,b\n1,10\n2,30\n3,20\n").unwrap();
    let o = run(bin().args(["analyze", "--table"]).arg(&table).args(["--x", "a", "--y", "b"]));
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["n"], 3);
    assert!((v["spearman"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    let missing = run(bin().args(["analyze", "--table"]).arg(&table).args(["--x", "a", "--y", "zz"]));
    assert_eq!(code(&missing), 2);

    let land = landscape(dir.path(), 8);
    let out = dir.path().join("sweep");
    let o = run(bin()
        .args(["sweep", "--objective.kind=landscape", "--search.k=2", "--sweep.seeds=[0,1]"])
        .arg(format!("--objective.path={}", land.display()))
        .arg("--out")
        .arg(&out));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(bin().args(["analyze", "--report"]).arg(out.join("report.json")));
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["consistent"], true);
}

#[test]
fn sweep_resume_reproduces_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let land = landscape(dir.path(), 8);
    let out = dir.path().join("sweep");
    let args = |c: &mut Command| {
        c.args(["sweep", "--objective.kind=landscape", "--sweep.budgets=[2,3]", "--sweep.algorithms=[\"greedy\",\"ga\"]"])
            .arg(format!("--objective.path={}", land.display()))
            .arg("--out")
            .arg(&out);
    };
    let mut first = bin();
    args(&mut first);
    assert_eq!(code(&run(&mut first)), 0);
    let before = std::fs::read(out.join("report.json")).unwrap();
    let mut resumed = bin();
    args(&mut resumed);
    resumed.arg("--resume");
    assert_eq!(code(&run(&mut resumed)), 0);
    assert_eq!(std::fs::read(out.join("report.json")).unwrap(), before);
}

struct Server {
    child: std::process::Child,
    reader: BufReader<std::process::ChildStdout>,
}

impl Server {
    fn start(land: &Path, extra: &[&str]) -> Self {
        let mut child = bin()
            .args(["serve", "--objective.kind=landscape"])
            .arg(format!("--objective.path={}", land.display()))
            .args(extra)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        let reader = BufReader::new(child.stdout.take().unwrap());
        Server { child, reader }
    }

    fn line(&mut self) -> Value {
        let mut s = String::new();
        self.reader.read_line(&mut s).unwrap();
        serde_json::from_str(&s).unwrap()
    }

    fn send(&mut self, line: &str) -> Value {
        let stdin = self.child.stdin.as_mut().unwrap();
        writeln!(stdin, "{line}").unwrap();
        stdin.flush().unwrap();
        self.line()
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        drop(self.child.stdin.take());
        let _ = self.child.wait();
    }
}

#[test]
fn serve_speaks_the_line_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let land = landscape(dir.path(), 10);
    let mut s = Server::start(&land, &[]);
    let hello = s.line();
    assert_eq!(hello["proto"], 1);
    assert_eq!(hello["depth"], 10);
    assert_eq!(hello["objective"], "perplexity");
    let a = s.send(r#"{"id": 1, "remove": [6, 7, 8]}"#);
    assert_eq!(a["id"], 1);
    let b = s.send(r#"{"id": 2, "remove": [6, 7, 8]}"#);
    assert_eq!(a["loss"], b["loss"]);
    let bad = s.send(r#"{"id": 3, "remove": [42]}"#);
    assert_eq!(bad["id"], 3);
    assert!(bad["error"].is_string());
    let garbage = s.send("nonsense");
    assert!(garbage["error"].is_string());
    let dense = s.send(r#"{"id": 5, "remove": []}"#);
    assert!(dense["loss"].is_number());
}

#[test]
fn search_through_a_served_evaluator_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let land = landscape(dir.path(), 10);
    let exe = env!("CARGO_BIN_EXE_depthsel");
    let command = |extra: &[&str]| {
        let mut argv = vec![
            exe.to_string(),
            "serve".into(),
            "--objective.kind=landscape".into(),
            format!("--objective.path={}", land.display()),
        ];
        argv.extend(extra.iter().map(|s| s.to_string()));
        format!("--objective.command={}", serde_json::to_string(&argv).unwrap())
    };
    let ext = dir.path().join("ext");
    let o = run(bin()
        .args(["search", "--objective.kind=external", "--search.k=3", "--search.algorithm=greedy"])
        .arg(command(&[]))
        .arg("--out")
        .arg(&ext));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let local = dir.path().join("local");
    let o = run(bin()
        .args(["search", "--objective.kind=landscape", "--search.k=3", "--search.algorithm=greedy"])
        .arg(format!("--objective.path={}", land.display()))
        .arg("--out")
        .arg(&local));
    assert_eq!(code(&o), 0);
    let (e, l) = (read_json(&ext.join("result.json")), read_json(&local.join("result.json")));
    assert_eq!(e["mask_key"], l["mask_key"]);
    assert_eq!(e["loss"], l["loss"]);
    assert_eq!(e["evaluations"], l["evaluations"]);

    for extra in [&["--proto", "2"][..], &["--announce-depth", "0"][..]] {
        let o = run(bin()
            .args(["search", "--objective.kind=external", "--search.k=3"])
            .arg(command(extra))
            .arg("--out")
            .arg(dir.path().join("bad")));
        assert_eq!(code(&o), 3, "{extra:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}
