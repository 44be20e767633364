//! The `circle` command: one subcommand per pipeline stage plus the live
//! session service. Every successful run leaves a manifest in a fresh
//! directory under `paths.out_dir`.

pub mod server;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use circle_core::config::{ConfigError, CorpusKind, RunConfig};
use circle_core::pipeline::{
    build_index, check_generator_inputs, load_checkpoint, load_or_build_index, train_one_to_one_model,
    train_ppo_model, train_sft_model, CorpusBundle, GeneratorFactory, PipelineError,
};
use circle_core::ppo::write_log_csv;
use circle_core::retrieval::Retriever;
use circle_core::run::{RunDir, RunError};
use circle_core::seqmodel::checkpoint::{self, Stage};
use circle_core::simulator::{load_sessions_jsonl, replay, run_experiment, summarize, ExperimentInputs, GeneratorKind, SessionStore};
use clap::{Args, Parser, Subcommand};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| Self::Io { path: path.to_owned(), source }
    }
}

#[derive(Debug, Parser)]
#[command(name = "circle", version, about = "Multi-turn query clarification pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML run configuration; relative paths inside resolve against its directory.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Overrides the global, PPO and experiment seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Root for run directories (overrides `paths.out_dir`).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Model checkpoint: written by train-sft, read by train-ppo (SFT),
    /// simulate (CIRCLE) and serve.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Never contact the external suggestion service.
    #[arg(long)]
    pub offline: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the toy corpus files to `paths.data_dir`.
    GenCorpus(Common),
    /// Build the BM25 index and save it to `paths.index`.
    BuildIndex(Common),
    /// Train the supervised set model and the one-to-one baseline model.
    TrainSft(Common),
    /// Fine-tune the supervised model for diverse suggestion sets.
    TrainPpo(Common),
    /// Run the simulated-user experiment grid.
    Simulate(Common),
    /// Host live clarification sessions over HTTP.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Listen address (overrides `serve.addr`).
        #[arg(long)]
        addr: Option<String>,
    },
    /// Re-score a session log and rebuild its tables.
    EvalLog {
        #[command(flatten)]
        common: Common,
        /// sessions.jsonl written by `simulate`.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::GenCorpus(_) => "gen-corpus",
            Self::BuildIndex(_) => "build-index",
            Self::TrainSft(_) => "train-sft",
            Self::TrainPpo(_) => "train-ppo",
            Self::Simulate(_) => "simulate",
            Self::Serve { .. } => "serve",
            Self::EvalLog { .. } => "eval-log",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Self::GenCorpus(c) | Self::BuildIndex(c) | Self::TrainSft(c) | Self::TrainPpo(c) | Self::Simulate(c) => c,
            Self::Serve { common, .. } | Self::EvalLog { common, .. } => common,
        }
    }
}

fn absolute(p: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(p).map_err(CliError::io(p))
}

/// Loads the config (or the defaults, relative to the working directory) and
/// applies flag overrides.
pub fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(&absolute(p)?)?,
        None => {
            let mut c = RunConfig::default();
            c.resolve_paths(&std::env::current_dir().map_err(CliError::io(Path::new(".")))?);
            c
        }
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.ppo.seed = seed;
        cfg.experiment.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.paths.out_dir = absolute(out)?;
    }
    if common.offline {
        for g in cfg.experiment.generators.iter_mut().chain(std::iter::once(&mut cfg.serve.generator)) {
            g.external.offline = true;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run_from<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

pub fn execute(command: &Command) -> Result<(), CliError> {
    let common = command.common();
    let cfg = load_config(common)?;
    match command {
        Command::GenCorpus(_) => gen_corpus(&cfg),
        Command::BuildIndex(_) => build_index_cmd(&cfg),
        Command::TrainSft(c) => train_sft(&cfg, c.checkpoint.as_deref()),
        Command::TrainPpo(c) => train_ppo(&cfg, c.checkpoint.as_deref()),
        Command::Simulate(c) => simulate(&cfg, c.checkpoint.as_deref()),
        Command::Serve { common, addr } => serve(&cfg, common.checkpoint.as_deref(), addr.as_deref()),
        Command::EvalLog { input, .. } => eval_log(&cfg, input),
    }
    .map(|()| tracing::info!(command = command.name(), "done"))
}

fn finish(run: RunDir, command: &str, cfg: &RunConfig, checkpoints: &[PathBuf], artifacts: &[PathBuf]) -> Result<(), CliError> {
    let dir = run.path().to_owned();
    run.finish(command, cfg.seed, &cfg.to_toml_string(), checkpoints, artifacts)?;
    println!("{}", dir.display());
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<PathBuf, CliError> {
    let body = serde_json::to_vec_pretty(value).expect("serialisable");
    std::fs::write(path, body).map_err(CliError::io(path))?;
    Ok(path.to_owned())
}

fn gen_corpus(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.corpus.kind != CorpusKind::Toy {
        return Err(ConfigError::Invalid("gen-corpus needs corpus.kind = \"toy\"".into()).into());
    }
    let run = RunDir::create(&cfg.paths.out_dir)?;
    let bundle = CorpusBundle::from_config(cfg)?;
    let files = bundle.write_dir(&cfg.paths.data_dir)?;
    tracing::info!(dir = %cfg.paths.data_dir.display(), docs = bundle.store.len(), queries = bundle.queries.len(), "corpus written");
    finish(run, "gen-corpus", cfg, &[], &files)
}

fn build_index_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let run = RunDir::create(&cfg.paths.out_dir)?;
    let bundle = CorpusBundle::from_config(cfg)?;
    let index = build_index(&bundle, cfg.bm25)?;
    if let Some(dir) = cfg.paths.index.parent() {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    index.save(&cfg.paths.index).map_err(PipelineError::from)?;
    tracing::info!(path = %cfg.paths.index.display(), docs = index.doc_count(), "index written");
    finish(run, "build-index", cfg, &[], &[cfg.paths.index.clone()])
}

fn train_sft(cfg: &RunConfig, out: Option<&Path>) -> Result<(), CliError> {
    let run = RunDir::create(&cfg.paths.out_dir)?;
    let bundle = CorpusBundle::from_config(cfg)?;
    let vocab = bundle.vocabulary();
    let meta = serde_json::json!({ "seed": cfg.seed });
    let sft_path = out.map_or_else(|| cfg.paths.sft_checkpoint.clone(), Path::to_path_buf);

    let (sft, sft_report) = train_sft_model(&bundle.sft, &vocab, cfg.model, &cfg.sft, cfg.seed)?;
    checkpoint::save(&sft_path, &sft, &vocab, Stage::Sft, meta.clone()).map_err(PipelineError::from)?;
    tracing::info!(loss = sft_report.final_loss, path = %sft_path.display(), "supervised model saved");

    let (o2o, o2o_report) = train_one_to_one_model(&bundle, &vocab, cfg.model, &cfg.one_to_one, cfg.seed)?;
    let o2o_path = &cfg.paths.one_to_one_checkpoint;
    checkpoint::save(o2o_path, &o2o, &vocab, Stage::Sft, meta).map_err(PipelineError::from)?;
    tracing::info!(loss = o2o_report.final_loss, path = %o2o_path.display(), "one-to-one model saved");

    let report = write_json(
        &run.path().join("sft_report.json"),
        &serde_json::json!({ "supervised": sft_report, "one_to_one": o2o_report }),
    )?;
    finish(run, "train-sft", cfg, &[sft_path, o2o_path.clone()], &[report])
}

fn train_ppo(cfg: &RunConfig, sft_path: Option<&Path>) -> Result<(), CliError> {
    let sft_path = sft_path.map_or_else(|| cfg.paths.sft_checkpoint.clone(), Path::to_path_buf);
    if !sft_path.exists() {
        return Err(ConfigError::Missing { what: "SFT checkpoint", path: sft_path }.into());
    }
    let bundle = CorpusBundle::from_config(cfg)?;
    let vocab = bundle.vocabulary();
    let sft = load_checkpoint(&sft_path, "SFT checkpoint", Some(&vocab))?.model;
    let index = load_or_build_index(cfg, &bundle)?;
    let run = RunDir::create(&cfg.paths.out_dir)?;
    let ckpt_dir = (cfg.ppo.checkpoint_every > 0).then(|| run.path().join("checkpoints"));
    if let Some(d) = &ckpt_dir {
        std::fs::create_dir_all(d).map_err(CliError::io(d))?;
    }
    let outcome = train_ppo_model(&sft, &vocab, &bundle, &index, &cfg.ppo, &cfg.rbo, ckpt_dir.as_deref())?;
    let log = run.path().join("ppo_log.csv");
    write_log_csv(&outcome.log, &log).map_err(PipelineError::from)?;
    if outcome.collapsed {
        return Err(CliError::Failed(format!(
            "PPO stopped after {} steps: well-formed rate stayed below {} (log in {})",
            outcome.log.len(),
            cfg.ppo.collapse_threshold,
            log.display()
        )));
    }
    let meta = serde_json::json!({ "seed": cfg.seed, "sft_checkpoint": sft_path });
    checkpoint::save(&cfg.paths.ppo_checkpoint, &outcome.model, &vocab, Stage::Ppo, meta).map_err(PipelineError::from)?;
    tracing::info!(
        steps = outcome.log.len(),
        cache_hit_rate = outcome.cache_hit_rate,
        path = %cfg.paths.ppo_checkpoint.display(),
        "PPO model saved"
    );
    let mut checkpoints = vec![sft_path, cfg.paths.ppo_checkpoint.clone()];
    checkpoints.extend(outcome.checkpoints);
    finish(run, "train-ppo", cfg, &checkpoints, &[log])
}

fn simulate(cfg: &RunConfig, circle_ckpt: Option<&Path>) -> Result<(), CliError> {
    let mut cfg = cfg.clone();
    if let Some(p) = circle_ckpt {
        for g in cfg.experiment.generators.iter_mut().filter(|g| g.kind == GeneratorKind::Circle) {
            g.checkpoint = Some(p.to_owned());
        }
    }
    let specs = cfg.experiment.generators.clone();
    check_generator_inputs(&specs, &cfg)?;
    let bundle = CorpusBundle::from_config(&cfg)?;
    let vocab = Arc::new(bundle.vocabulary());
    let index = load_or_build_index(&cfg, &bundle)?;
    let factory = GeneratorFactory::from_checkpoints(&specs, &cfg, vocab, Arc::new(bundle.store.clone()))?;
    let generators = factory.build_all(&specs)?;
    let queries = bundle.dev_queries();
    let run = RunDir::create(&cfg.paths.out_dir)?;
    let artifacts = run_experiment(&cfg.experiment, &ExperimentInputs { index: &index, queries: &queries, generators: &generators })
        .map_err(PipelineError::from)?;
    let files = artifacts.write(run.path()).map_err(PipelineError::from)?;
    let checkpoints = used_checkpoints(&specs, &cfg);
    tracing::info!(sessions = artifacts.sessions.len(), "experiment finished");
    finish(run, "simulate", &cfg, &checkpoints, &files)
}

fn used_checkpoints(specs: &[circle_core::simulator::GeneratorSpec], cfg: &RunConfig) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = Vec::new();
    for s in specs {
        let default = match s.kind {
            GeneratorKind::Circle => &cfg.paths.ppo_checkpoint,
            GeneratorKind::Supervised => &cfg.paths.sft_checkpoint,
            GeneratorKind::Beam | GeneratorKind::PoolCluster => &cfg.paths.one_to_one_checkpoint,
            GeneratorKind::ExternalApi | GeneratorKind::Fixture => continue,
        };
        let p = s.checkpoint.clone().unwrap_or_else(|| default.clone());
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

fn eval_log(cfg: &RunConfig, input: &Path) -> Result<(), CliError> {
    if !input.exists() {
        return Err(ConfigError::Missing { what: "session log", path: input.to_owned() }.into());
    }
    let sessions = load_sessions_jsonl(input).map_err(PipelineError::from)?;
    if sessions.is_empty() {
        return Err(CliError::Failed(format!("{}: no sessions", input.display())));
    }
    let bundle = CorpusBundle::from_config(cfg)?;
    let index = load_or_build_index(cfg, &bundle)?;
    let mut mismatched = Vec::new();
    for s in &sessions {
        let intent = bundle
            .queries
            .relevant(&s.qid)
            .ok_or_else(|| CliError::Failed(format!("query {} has no relevance judgements in this corpus", s.qid)))?;
        if replay(s, intent, &index, cfg.experiment.depth) != s.reciprocal_ranks() {
            mismatched.push(format!("{}/{}/{}/{}", s.generator, s.epsilon, s.qid, s.repeat));
        }
    }
    if !mismatched.is_empty() {
        return Err(CliError::Failed(format!(
            "{} of {} sessions do not replay to their logged reciprocal ranks (first: {})",
            mismatched.len(),
            sessions.len(),
            mismatched[0]
        )));
    }
    let turns = sessions.iter().map(|s| s.turns.len().saturating_sub(1)).max().unwrap_or(0);
    let run = RunDir::create(&cfg.paths.out_dir)?;
    let n = sessions.len();
    let artifacts = summarize(sessions, turns, &cfg.rbo, cfg.experiment.heatmap_generator.as_deref(), &index);
    let files = artifacts.write(run.path()).map_err(PipelineError::from)?;
    tracing::info!(sessions = n, "log re-scored; every session replays exactly");
    finish(run, "eval-log", cfg, &[], &files)
}

fn serve(cfg: &RunConfig, ckpt: Option<&Path>, addr: Option<&str>) -> Result<(), CliError> {
    let mut spec = cfg.serve.generator.clone();
    if let Some(p) = ckpt {
        spec.checkpoint = Some(p.to_owned());
    }
    let specs = [spec];
    check_generator_inputs(&specs, cfg)?;
    let bundle = CorpusBundle::from_config(cfg)?;
    let vocab = Arc::new(bundle.vocabulary());
    let docs = Arc::new(bundle.store.clone());
    let index: Arc<dyn Retriever> = Arc::new(load_or_build_index(cfg, &bundle)?);
    let factory = GeneratorFactory::from_checkpoints(&specs, cfg, vocab, Arc::clone(&docs))?;
    let generator = factory.build(&specs[0])?.into();
    let store = Arc::new(SessionStore::new(generator, index, docs, cfg.experiment.depth, cfg.serve.display_depth, cfg.seed));
    let addr = addr.unwrap_or(&cfg.serve.addr).to_owned();

    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Failed(format!("tokio runtime: {e}")))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Failed(format!("cannot listen on {addr}: {e}")))?;
        tracing::info!(addr = %listener.local_addr().map_or(addr.clone(), |a| a.to_string()), "serving");
        axum::serve(listener, server::router(Arc::clone(&store)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Failed(format!("server: {e}")))
    })?;

    // sessions live only in memory; keep them as a log of the run
    let run = RunDir::create(&cfg.paths.out_dir)?;
    let log = run.path().join("live_sessions.jsonl");
    std::fs::write(&log, store.export_jsonl()).map_err(CliError::io(&log))?;
    finish(run, "serve", cfg, &used_checkpoints(&specs, cfg), &[log])
}
