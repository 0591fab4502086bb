//! Subcommands of the `agma` binary.
//!
//! Every command resolves one [`RunConfig`] from `--config` plus flags, writes
//! its artifacts atomically under `--out`, and records a [`RunManifest`].

pub mod config;
pub mod manifest;
pub mod plot;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use agma::nets::{write_atomic, Checkpoint};
use agma::theory::{sweep_csv, theory_sweep};
use agma::train::{evaluate, fit, metrics_csv, EpochMetrics, Variant};
use agma::traj::{generate_synthetic_labeled, ingest_ethucy, write_ethucy, Point, Scene};
use clap::{Args, Parser, Subcommand};
use log::info;
use thiserror::Error;

pub use config::RunConfig;
pub use manifest::RunManifest;

pub const SCENES_FILE: &str = "scenes.txt";
pub const BRANCHES_FILE: &str = "branches.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.json";
pub const EVAL_FILE: &str = "eval_metrics.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const THEORY_FILE: &str = "theory.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

pub const BRANCHES_HEADER: &str = "scene_id,agent_id,branch";
pub const EVAL_HEADER: &str = "k,mADE,mFDE";
pub const PREDICTIONS_HEADER: &str = "scene_id,agent_id,sample_idx,t,x,y";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error("{0} theory check(s) violated")]
    TheoryViolation(usize),
    #[error(transparent)]
    Core(#[from] agma::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Checkpoint(_) => 4,
            CliError::TheoryViolation(_) => 5,
            CliError::Core(e) => match e {
                agma::Error::NonFinite(_) => 3,
                agma::Error::Checkpoint(_) => 4,
                _ => 2,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "agma", version, about = "Prior-guided multimodal trajectory forecasting")]
#[command(after_help = "Set AGMA_LOG to error, warn, info or debug to control log output.\n\
Exit codes: 0 ok, 2 config or input error, 3 numeric failure, 4 checkpoint mismatch, 5 theory violation.")]
pub struct Cli {
    /// Run configuration (TOML, JSON, or a previous run manifest).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; computation currently runs on one.
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic junction scenes.
    #[command(after_help = "Writes scenes.txt (frame_id ped_id x y) and branches.csv (scene_id,agent_id,branch).")]
    Simulate(SimulateArgs),
    /// Train a model and write a checkpoint.
    #[command(
        after_help = "Writes checkpoint.json and metrics.csv (epoch,L_B,L_G,L_distill,L_total,val_mADE_N,val_mFDE_N)."
    )]
    Train(TrainArgs),
    /// Evaluate a checkpoint with min-of-K metrics.
    #[command(after_help = "Writes eval_metrics.csv (k,mADE,mFDE) and predictions.csv \
(scene_id,agent_id,sample_idx,t,x,y) where t indexes frames of the window, the future starting at t_obs.")]
    Eval(EvalArgs),
    /// Randomised check of the prior-quality bounds.
    #[command(
        name = "verify-theory",
        after_help = "Writes theory.csv (model_id,C,V,eps_prior,eps_sample,L_dist,bound,slack,holds,\
pinsker_kl,pinsker_half_l1_sq,pinsker_holds,delta,corollary_holds) and summary.txt."
    )]
    VerifyTheory(TheoryArgs),
    /// Render SVG figures with sidecar CSVs.
    #[command(after_help = "Scene overlays: scene_<id>.svg with scene_<id>.csv (agent_id,polyline,kind,step,x,y).\n\
Curves: curve_<stem>.svg with curve_<stem>.csv (series,x,y), one series per numeric column.")]
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub n_scenes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training trajectories in frame_id ped_id x y format.
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Validation trajectories, evaluated after every epoch.
    #[arg(long, value_name = "PATH")]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Drop the batch-prior reconstruction loss.
    #[arg(long, conflicts_with_all = ["no_lg", "no_distill"])]
    pub no_lb: bool,
    /// Drop the global-prior reconstruction loss.
    #[arg(long, conflicts_with = "no_distill")]
    pub no_lg: bool,
    /// Drop the distillation loss.
    #[arg(long)]
    pub no_distill: bool,
}

impl TrainArgs {
    pub fn variant(&self) -> Option<Variant> {
        if self.no_lb {
            Some(Variant::NoLb)
        } else if self.no_lg {
            Some(Variant::NoLg)
        } else if self.no_distill {
            Some(Variant::NoDistill)
        } else {
            None
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Samples per agent.
    #[arg(long = "n", value_name = "N")]
    pub n: Option<usize>,
    /// Prefix sizes to report, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    #[arg(long)]
    pub sweep_size: Option<usize>,
    /// Use identical true and learned models.
    #[arg(long)]
    pub matched: bool,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Predictions CSV from `eval`; requires --data.
    #[arg(long, value_name = "PATH", requires = "data")]
    pub predictions: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Table whose first column is plotted on the x axis; repeatable.
    #[arg(long, value_name = "PATH")]
    pub curve: Vec<PathBuf>,
}

/// What a command produced.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
    /// Human-readable summary printed on success.
    pub summary: String,
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn write(dir: &Path, name: &str, text: &str, outputs: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let path = dir.join(name);
    write_atomic(&path, text.as_bytes())?;
    outputs.push(path);
    Ok(())
}

fn load_scenes(path: &Path, cfg: &RunConfig) -> Result<Vec<Scene>, CliError> {
    if !path.exists() {
        return Err(CliError::Input(format!("{} does not exist", path.display())));
    }
    Ok(ingest_ethucy(path, cfg.ingest_options())?)
}

/// Runs one parsed command line.
pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    let start = Instant::now();
    if cli.threads == 0 {
        return Err(CliError::Config("--threads must be at least 1".into()));
    }
    let mut cfg = resolve(cli)?;
    fs::create_dir_all(&cli.out).map_err(|e| CliError::Input(format!("{}: {e}", cli.out.display())))?;
    let out = cli.out.as_path();
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    let (name, summary, violation) = match &cli.command {
        Command::Simulate(a) => {
            if let Some(n) = a.n_scenes {
                cfg.synth.n_scenes = n;
            }
            cfg.validate()?;
            let s = simulate(&cfg, out, &mut outputs)?;
            ("simulate", s, None)
        }
        Command::Train(a) => {
            if let Some(v) = a.variant() {
                cfg.train.variant = v;
            }
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            inputs.push(a.data.clone());
            inputs.extend(a.val.clone());
            let s = train(&cfg, a, out, &mut outputs)?;
            ("train", s, None)
        }
        Command::Eval(a) => {
            inputs.push(a.checkpoint.clone());
            inputs.push(a.data.clone());
            let s = eval(&mut cfg, cli.config.is_some(), cli.seed, a, out, &mut outputs)?;
            ("eval", s, None)
        }
        Command::VerifyTheory(a) => {
            if let Some(n) = a.sweep_size {
                cfg.theory.sweep_size = n;
            }
            cfg.theory.matched |= a.matched;
            let (s, v) = verify_theory(&cfg, out, &mut outputs)?;
            ("verify-theory", s, Some(v))
        }
        Command::Plot(a) => {
            inputs.extend(a.predictions.clone());
            inputs.extend(a.data.clone());
            inputs.extend(a.curve.iter().cloned());
            let s = plot(&cfg, a, out, &mut outputs)?;
            ("plot", s, None)
        }
    };
    let mut manifest = RunManifest::new(name, &cfg, cli.threads);
    manifest.inputs = inputs;
    manifest.outputs = outputs;
    manifest.duration_secs = start.elapsed().as_secs_f64();
    let manifest_path = manifest.write(out)?;
    if let Some(v) = violation.filter(|&v| v > 0) {
        return Err(CliError::TheoryViolation(v));
    }
    Ok(Outcome {
        manifest,
        manifest_path,
        summary,
    })
}

fn simulate(cfg: &RunConfig, out: &Path, outputs: &mut Vec<PathBuf>) -> Result<String, CliError> {
    let (scenes, labels) = generate_synthetic_labeled(&cfg.synth, cfg.synth.seed)?;
    write(out, SCENES_FILE, &write_ethucy(&scenes, cfg.data.frame_step)?, outputs)?;
    let mut csv = String::from(BRANCHES_HEADER);
    csv.push('\n');
    for (scene, lab) in scenes.iter().zip(&labels) {
        for (a, l) in scene.agents.iter().zip(lab) {
            let _ = writeln!(csv, "{},{},{l}", scene.scene_id, a.agent_id);
        }
    }
    write(out, BRANCHES_FILE, &csv, outputs)?;
    let agents: usize = scenes.iter().map(|s| s.agents.len()).sum();
    Ok(format!("simulated {} scenes with {agents} agents", scenes.len()))
}

fn train(cfg: &RunConfig, args: &TrainArgs, out: &Path, outputs: &mut Vec<PathBuf>) -> Result<String, CliError> {
    let data = load_scenes(&args.data, cfg)?;
    let val = match &args.val {
        Some(p) => load_scenes(p, cfg)?,
        None => Vec::new(),
    };
    info!("training {} on {} scenes", cfg.train.variant.name(), data.len());
    let mut rows: Vec<EpochMetrics> = Vec::new();
    let trained = match fit(&data, &val, &cfg.train, |r| rows.push(*r)) {
        Ok(t) => t,
        Err(agma::Error::NonFinite(msg)) => {
            let dump = serde_json::json!({
                "error": msg,
                "completed_epochs": rows,
                "config": cfg,
            });
            let text = serde_json::to_string_pretty(&dump).map_err(agma::Error::from)?;
            write(out, DIAGNOSTIC_FILE, &text, outputs)?;
            return Err(CliError::Numeric(format!("{msg}; diagnostics in {}", out.join(DIAGNOSTIC_FILE).display())));
        }
        Err(e) => return Err(e.into()),
    };
    let meta = serde_json::to_value(cfg).map_err(agma::Error::from)?;
    let ck = Checkpoint::capture(&trained.model.cfg, &trained.store, meta);
    let ck_path = out.join(CHECKPOINT_FILE);
    ck.save(&ck_path)?;
    outputs.push(ck_path);
    write(out, METRICS_FILE, &metrics_csv(&trained.epochs), outputs)?;
    let last = trained.epochs.last().map_or(f64::NAN, |e| e.l_total);
    Ok(format!("trained {} epochs, final L_total {last}", trained.epochs.len()))
}

fn eval(
    cfg: &mut RunConfig,
    explicit_config: bool,
    seed: Option<u64>,
    args: &EvalArgs,
    out: &Path,
    outputs: &mut Vec<PathBuf>,
) -> Result<String, CliError> {
    if !args.checkpoint.exists() {
        return Err(CliError::Input(format!("{} does not exist", args.checkpoint.display())));
    }
    let ck = Checkpoint::load(&args.checkpoint).map_err(|e| CliError::Checkpoint(e.to_string()))?;
    if explicit_config {
        if cfg.train.model != ck.model {
            return Err(CliError::Checkpoint(
                "model section of the configuration differs from the checkpoint".into(),
            ));
        }
    } else if let Ok(saved) = serde_json::from_value::<RunConfig>(ck.meta.clone()) {
        *cfg = saved;
        if let Some(s) = seed {
            cfg.set_seed(s);
        }
    } else {
        cfg.train.model = ck.model.clone();
    }
    if let Some(n) = args.n {
        cfg.eval.n_samples = n;
    }
    if let Some(ks) = &args.ks {
        cfg.eval.ks = ks.clone();
    }
    cfg.validate()?;
    let (model, store) = ck.restore().map_err(|e| CliError::Checkpoint(e.to_string()))?;
    let scenes = load_scenes(&args.data, cfg)?;
    let n = cfg.eval.n_samples;
    let mut ks: Vec<usize> = cfg.eval.ks.iter().copied().filter(|&k| k <= n).collect();
    ks.push(n);
    ks.sort_unstable();
    ks.dedup();
    let result = evaluate(&model, &store, &scenes, &cfg.train, &ks, cfg.train.seed)?;
    let mut table = String::from(EVAL_HEADER);
    table.push('\n');
    for m in &result.by_k {
        let _ = writeln!(table, "{},{},{}", m.k, m.made, m.mfde);
    }
    write(out, EVAL_FILE, &table, outputs)?;
    let t_obs = model.cfg.t_obs;
    let mut csv = String::from(PREDICTIONS_HEADER);
    csv.push('\n');
    for (scene, preds) in scenes.iter().zip(&result.predictions) {
        for (agent, p) in scene.agents.iter().zip(preds) {
            for (s, traj) in p.samples().iter().enumerate() {
                for (i, q) in traj.iter().enumerate() {
                    let _ = writeln!(
                        csv,
                        "{},{},{s},{},{},{}",
                        scene.scene_id,
                        agent.agent_id,
                        t_obs + i,
                        q[0],
                        q[1]
                    );
                }
            }
        }
    }
    write(out, PREDICTIONS_FILE, &csv, outputs)?;
    let last = result.by_k.last().expect("at least one k");
    Ok(format!("mADE_{n} {} mFDE_{n} {}", last.made, last.mfde))
}

fn verify_theory(cfg: &RunConfig, out: &Path, outputs: &mut Vec<PathBuf>) -> Result<(String, usize), CliError> {
    let t = &cfg.theory;
    if t.sweep_size == 0 {
        return Err(CliError::Config("sweep size must be at least 1".into()));
    }
    let rows = theory_sweep(t.sweep_size, t.seed, t.matched);
    let violations = rows.iter().filter(|r| r.violated()).count();
    write(out, THEORY_FILE, &sweep_csv(&rows), outputs)?;
    let regime = rows.iter().filter(|r| r.decomposition.eps_prior > r.decomposition.eps_sample).count();
    let summary = format!(
        "models {} violations {violations} prior_error_dominant {regime}",
        rows.len()
    );
    write(out, SUMMARY_FILE, &format!("{summary}\n"), outputs)?;
    Ok((summary, violations))
}

/// Sampled futures keyed by scene id, then agent id, in sample order.
pub type PredictionTable = BTreeMap<u64, BTreeMap<u64, Vec<Vec<Point>>>>;

/// Reads a predictions CSV written by `eval`.
pub fn read_predictions(text: &str) -> Result<PredictionTable, CliError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(PREDICTIONS_HEADER) {
        return Err(CliError::Input(format!("predictions must start with {PREDICTIONS_HEADER}")));
    }
    let mut table = PredictionTable::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || CliError::Input(format!("predictions line {}: {line}", i + 2));
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 6 {
            return Err(bad());
        }
        let int = |s: &str| s.trim().parse::<u64>().map_err(|_| bad());
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
        let (scene, agent, sample) = (int(c[0])?, int(c[1])?, int(c[2])? as usize);
        let p = [num(c[4])?, num(c[5])?];
        let samples = table.entry(scene).or_default().entry(agent).or_default();
        if samples.len() <= sample {
            samples.resize(sample + 1, Vec::new());
        }
        samples[sample].push(p);
    }
    Ok(table)
}

fn plot(cfg: &RunConfig, args: &PlotArgs, out: &Path, outputs: &mut Vec<PathBuf>) -> Result<String, CliError> {
    if args.predictions.is_none() && args.curve.is_empty() {
        return Err(CliError::Input("nothing to plot: pass --predictions with --data, or --curve".into()));
    }
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())));
    let mut figures = 0;
    if let Some(pred_path) = &args.predictions {
        let table = read_predictions(&read(pred_path)?)?;
        let data_path = args.data.as_ref().expect("clap enforces --data");
        let scenes = load_scenes(data_path, cfg)?;
        for scene in scenes.iter().filter(|s| table.contains_key(&s.scene_id)).take(cfg.plot.max_scenes) {
            let (svg, csv) = plot::scene_overlay(scene, &table[&scene.scene_id]);
            write(out, &format!("scene_{}.svg", scene.scene_id), &svg, outputs)?;
            write(out, &format!("scene_{}.csv", scene.scene_id), &csv, outputs)?;
            figures += 1;
        }
    }
    for path in &args.curve {
        let stem = path.file_stem().map_or("curve".into(), |s| s.to_string_lossy().into_owned());
        let (svg, csv) = plot::curves(&read(path)?, &stem)?;
        write(out, &format!("curve_{stem}.svg"), &svg, outputs)?;
        write(out, &format!("curve_{stem}.csv"), &csv, outputs)?;
        figures += 1;
    }
    Ok(format!("wrote {figures} figures"))
}
