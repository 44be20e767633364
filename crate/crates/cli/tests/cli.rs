use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use circle_core::config::RunConfig;
use circle_core::run::load_manifest;

fn circle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_circle")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

const SMALL: &str = r#"
seed = 0

[corpus.toy]
n_topics = 6
facets_per_topic = 2
docs_per_facet = 3
vocab_size = 120
seed = 3
refinements_per_facet = 2
records_per_topic = 3
generic_docs_per_topic = 2
held_out_topics = 1
grouped_prob = 0.65

[model]
n_layers = 1
d_model = 32
n_heads = 2
d_ff = 64
max_len = 48

[sft]
epochs = 60
lr = 3e-3
batch = 8

[one_to_one]
epochs = 40
lr = 3e-3
batch = 8

[ppo]
batch = 8
max_steps = 2
lr = 1e-4

[experiment]
turns = 2
epsilons = [0.0, 0.5]
max_queries = 3

[[experiment.generators]]
kind = "circle"

[[experiment.generators]]
kind = "beam"
"#;

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.toml");
    fs::write(&p, SMALL).unwrap();
    p
}

/// The single run directory created under `root`.
fn only_run(root: &Path) -> PathBuf {
    let runs: Vec<_> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1, "{runs:?}");
    runs.into_iter().next().unwrap()
}

fn stdout_dir(out: &Output) -> PathBuf {
    PathBuf::from(String::from_utf8_lossy(&out.stdout).trim())
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(circle(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(circle(&["simulate", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(circle(&["eval-log"]).status.code(), Some(1));
    assert_eq!(circle(&["--help"]).status.code(), Some(0));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["toy.toml", "exp.toml"] {
        let cfg = RunConfig::load(&root.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(!cfg.experiment.generators.is_empty());
    }
}

#[test]
fn gen_corpus_writes_files_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    small_config(tmp.path());
    let runs = tmp.path().join("runs");
    // relative paths on the command line resolve against the working directory
    let out = Command::new(env!("CARGO_BIN_EXE_circle"))
        .args(["gen-corpus", "--config", "small.toml", "--out", "runs"])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run = only_run(&runs);
    assert_eq!(stdout_dir(&out), run);
    assert!(run.is_absolute());
    let m = load_manifest(&run).unwrap();
    assert_eq!(m.command, "gen-corpus");
    assert!(!m.artifacts.is_empty());
    for f in &m.artifacts {
        assert!(run.join(&f.path).exists(), "{}", f.path.display());
    }
    assert!(tmp.path().join("data").read_dir().unwrap().count() > 0);
}

#[test]
fn train_ppo_without_sft_checkpoint_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = circle(&["train-ppo", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("SFT checkpoint"));
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn eval_log_with_missing_input_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = circle(&["eval-log", "--config", cfg.to_str().unwrap(), "--input", "nope.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn small_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let step = |args: &[&str]| {
        let runs = tmp.path().join(format!("runs-{}", args[0]));
        let mut full = args.to_vec();
        full.extend(["--config", cfg, "--out", runs.to_str().unwrap(), "--offline"]);
        let out = circle(&full);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        let run = only_run(&runs);
        let m = load_manifest(&run).unwrap();
        let files: Vec<PathBuf> = m.artifacts.iter().map(|a| run.join(&a.path)).collect();
        (m, files)
    };
    step(&["build-index"]);
    assert!(tmp.path().join("data/bm25.json").exists());
    let (sft, _) = step(&["train-sft", "--seed", "4"]);
    assert_eq!(sft.seed, 4);
    assert_eq!(sft.checkpoints.len(), 2);
    let (_, ppo_files) = step(&["train-ppo"]);
    assert!(ppo_files.iter().any(|p| p.ends_with("ppo_log.csv")));
    assert!(tmp.path().join("checkpoints/ppo.ckpt").exists());

    let (_, sim) = step(&["simulate"]);
    let names: Vec<String> = sim.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".csv")).count(), 3, "{names:?}");
    let sessions = sim.iter().find(|p| p.ends_with("sessions.jsonl")).expect("session log").clone();

    // a second run of the same config is byte-identical
    let runs = tmp.path().join("runs-simulate-again");
    let out = circle(&["simulate", "--config", cfg, "--out", runs.to_str().unwrap(), "--offline"]);
    assert_eq!(out.status.code(), Some(0));
    let again = only_run(&runs);
    for p in &sim {
        assert_eq!(fs::read(p).unwrap(), fs::read(again.join(p.file_name().unwrap())).unwrap(), "{}", p.display());
    }

    // re-scoring the log reproduces the same tables
    let (_, eval) = step(&["eval-log", "--input", sessions.to_str().unwrap()]);
    let csvs: Vec<&PathBuf> = eval.iter().filter(|p| p.extension().is_some_and(|e| e == "csv")).collect();
    assert_eq!(csvs.len(), 3);
    for p in csvs {
        let original = sim.iter().find(|b| b.file_name() == p.file_name()).unwrap();
        assert_eq!(fs::read(p).unwrap(), fs::read(original).unwrap(), "{}", p.display());
    }

    // a log whose reciprocal ranks were edited no longer replays
    let text = fs::read_to_string(&sessions).unwrap();
    let mut lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    lines[0]["turns"][0]["reciprocal_rank"] = serde_json::json!(0.123);
    let tampered = tmp.path().join("tampered.jsonl");
    let body: Vec<String> = lines.iter().map(|v| v.to_string()).collect();
    fs::write(&tampered, body.join("\n") + "\n").unwrap();
    let out = circle(&["eval-log", "--config", cfg, "--input", tampered.to_str().unwrap()]);
    assert_ne!(out.status.code(), Some(0));
}

fn http(addr: &str, method: &str, path: &str, body: &str) -> Option<String> {
    use std::io::{Read, Write};
    let mut s = std::net::TcpStream::connect(addr).ok()?;
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: x\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )
    .ok()?;
    let mut out = String::new();
    s.read_to_string(&mut out).ok()?;
    Some(out)
}

#[test]
fn serve_answers_and_exports_sessions_on_interrupt() {
    let tmp = tempfile::tempdir().unwrap();
    let fixtures = tmp.path().join("fixtures.json");
    fs::write(&fixtures, r#"{"jaguar": ["jaguar car", "jaguar animal"]}"#).unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let cfg = tmp.path().join("serve.toml");
    fs::write(&cfg, format!("{SMALL}\n[serve]\naddr = \"{addr}\"\n\n[serve.generator]\nkind = \"fixture\"\nfixtures = \"fixtures.json\"\n"))
        .unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_circle"))
        .args(["serve", "--config", cfg.to_str().unwrap()])
        .env("RUST_LOG", "warn")
        .stdout(std::process::Stdio::null())
        .spawn()
        .unwrap();

    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(60);
    let health = loop {
        if let Some(r) = http(&addr, "GET", "/api/health", "") {
            break r;
        }
        assert!(std::time::Instant::now() < deadline, "server never came up");
        std::thread::sleep(std::time::Duration::from_millis(50));
    };
    assert!(health.starts_with("HTTP/1.1 200"), "{health}");
    let created = http(&addr, "POST", "/api/sessions", r#"{"query": "jaguar"}"#).unwrap();
    assert!(created.starts_with("HTTP/1.1 201"), "{created}");
    assert!(created.contains("jaguar animal"));

    let killed = Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
    assert!(killed.success());
    let status = child.wait().unwrap();
    assert_eq!(status.code(), Some(0));
    let run = only_run(&tmp.path().join("runs"));
    let m = load_manifest(&run).unwrap();
    assert_eq!(m.command, "serve");
    let log = fs::read_to_string(run.join("live_sessions.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(log.contains("\"jaguar car\""));
}
