use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use prm_core::checkpoint::Checkpoint;
use prm_core::config::{apply_overrides, parse_flat};
use prm_core::pipeline::{parse_stages, Pipeline, PipelineConfig};
use prm_core::pretrain::PvTable;
use prm_core::serve::{serve, ServeState};
use prm_core::{PrmError, PrmModel};

/// Personalized list re-ranking: data synthesis, staged training pipeline and
/// an inference server.
#[derive(Debug, Parser)]
#[command(name = "prm", version)]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Extra `key=value` override, applied after the file (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset into `<out>/<data_dir>`.
    Synth(SynthArgs),
    /// Run pipeline stages in order.
    Pipeline(PipelineArgs),
    /// Serve a trained model over newline-delimited JSON.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Total requests, train and test together.
    #[arg(long)]
    requests: Option<usize>,
    /// Single-impression records for the pretrain network.
    #[arg(long)]
    pretrain_records: Option<usize>,
    /// Length of each initial list.
    #[arg(long)]
    list_len: Option<usize>,
    /// Candidate pool size per request.
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    num_categories: Option<usize>,
    /// Weight of the category-affinity term in the click model.
    #[arg(long)]
    interaction_scale: Option<f64>,
    /// Weight of the user-type preference term.
    #[arg(long)]
    personalization_scale: Option<f64>,
    /// Weight of the ln(position) penalty.
    #[arg(long)]
    position_scale: Option<f64>,
    /// Requests held out as the test split.
    #[arg(long)]
    test_requests: Option<usize>,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    /// Comma-separated stages, or `all` (every stage but convert-letor):
    /// convert-letor, train-baseline, build-lists, pretrain, extract-pv,
    /// train-prm, eval, export-attention.
    #[arg(long, default_value = "all")]
    stages: String,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// PRM checkpoint; defaults to the run's trained model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// PV table for models trained with personalized vectors.
    #[arg(long)]
    pv: Option<PathBuf>,
    /// Port to bind; 0 picks a free one.
    #[arg(long, default_value_t = 7878)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
}

fn flag_overrides(cli: &Cli) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for s in &cli.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| PrmError::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = cli.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    if let Command::Synth(a) = &cli.command {
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        put("synth.requests", a.requests.map(|v| v.to_string()));
        put("synth.pretrain_records", a.pretrain_records.map(|v| v.to_string()));
        put("synth.list_len", a.list_len.map(|v| v.to_string()));
        put("synth.candidates", a.candidates.map(|v| v.to_string()));
        put("synth.num_categories", a.num_categories.map(|v| v.to_string()));
        put("synth.interaction_scale", a.interaction_scale.map(|v| v.to_string()));
        put("synth.personalization_scale", a.personalization_scale.map(|v| v.to_string()));
        put("synth.position_scale", a.position_scale.map(|v| v.to_string()));
        put("test_requests", a.test_requests.map(|v| v.to_string()));
    }
    Ok(pairs)
}

fn resolve_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut pairs = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            parse_flat(&text)?
        }
        None => vec![],
    };
    pairs.extend(flag_overrides(cli)?);
    let cfg = apply_overrides(&PipelineConfig::default(), &pairs)?;
    log::info!("resolved configuration: {}", serde_json::to_string(&cfg)?);
    Ok(cfg)
}

fn load_serve_state(p: &Pipeline, a: &ServeArgs) -> Result<ServeState> {
    let ck_path = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| p.path(prm_core::pipeline::PRM_MODEL));
    let ck = Checkpoint::load(&ck_path).with_context(|| format!("loading {}", ck_path.display()))?;
    let model = PrmModel::<f64>::from_checkpoint(&ck)?;
    let pv = match &a.pv {
        Some(path) => Some(PvTable::load(path).with_context(|| format!("loading {}", path.display()))?),
        None if model.config.use_pv => {
            let default = p.path(prm_core::pipeline::PV_TEST);
            Path::new(&default)
                .exists()
                .then(|| PvTable::load(&default))
                .transpose()?
        }
        None => None,
    };
    Ok(ServeState::new(model, pv)?)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    let pipeline = Pipeline::new(cli.out.clone(), cfg);
    match &cli.command {
        Command::Synth(_) => pipeline.synthesize()?,
        Command::Pipeline(a) => pipeline.run(&parse_stages(&a.stages)?)?,
        Command::Serve(a) => {
            let state = Arc::new(load_serve_state(&pipeline, a)?);
            let listener = TcpListener::bind((a.host.as_str(), a.port))
                .with_context(|| format!("binding {}:{}", a.host, a.port))?;
            // Printed so callers binding port 0 can find the address.
            println!("listening on {}", listener.local_addr()?);
            serve(listener, state)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PRM_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            eprintln!("error: {e:#}");
            let config = e.chain().any(|c| c.downcast_ref::<PrmError>().is_some_and(PrmError::is_config));
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
