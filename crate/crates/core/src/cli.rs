//! Command-line driver: `synth`, `train`, `eval`, `robustness`, `stats`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::config::{DataSource, Precision, Protocol, RunConfig};
use crate::data::{load_dir, partition_stats, write_participant, ParticipantDataset, ParticipantId, SynthPreset};
use crate::error::{Error, Result};
use crate::eval::{
    eval_person_specific, leave_one_out_sweep_on, noisy_participants, robustness_sweep, summarize_legs, with_noise,
    write_robustness_csv, EvalResult, ModelSet, PreparedFederation, RobustnessConfig,
};
use crate::federation::{run_training, write_metrics, Checkpoint, Mode, TrainingOutcome};
use crate::model::{GazeNet, Plan, Predictor, Prepared};
use crate::tensor::Real;

#[derive(Debug, Parser)]
#[command(name = "gazefl", version, about = "Federated gaze-estimation simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic federation as GZFL files.
    Synth(SynthArgs),
    /// Train one mode and evaluate it person-specifically.
    Train(RunArgs),
    /// Run the configured evaluation protocol, or score a saved checkpoint.
    Eval(EvalArgs),
    /// Noisy-participant sweep with fedadam under leave-one-out.
    Robustness(RunArgs),
    /// Per-participant heterogeneity statistics.
    Stats(RunArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub participants: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `desk` or `full`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` settings; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mode: Option<String>,
    /// One seed or a comma-separated list.
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long = "client-lr")]
    pub client_lr: Option<f64>,
    #[arg(long = "server-lr")]
    pub server_lr: Option<f64>,
    /// Directory of GZFL files.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// `person-specific` or `leave-one-out`.
    #[arg(long)]
    pub protocol: Option<String>,
    /// Comma-separated held-out ids for leave-one-out.
    #[arg(long = "held-out")]
    pub held_out: Option<String>,
    /// Score this checkpoint on every validation split instead of training.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Parses `argv` and runs the command. Returns the process exit code.
pub fn main_with_args<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e @ Error::Config(_)) => {
            eprintln!("gazefl: {e}");
            eprintln!("run `gazefl --help` for usage");
            2
        }
        Err(e) => {
            eprintln!("gazefl: {e}");
            1
        }
    }
}

fn apply_sets(cfg: &mut RunConfig, sets: &[String]) -> Result<()> {
    for kv in sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(())
}

fn resolve(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(p) => RunConfig::from_file(p).map_err(|e| match e {
            Error::Io { path, source } => Error::Config(format!("cannot read {}: {source}", path.display())),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    let mut flags: Vec<(&str, String)> = Vec::new();
    if let Some(v) = &run.mode {
        flags.push(("mode", v.clone()));
    }
    if let Some(v) = &run.seed {
        flags.push(("seeds", v.clone()));
    }
    if let Some(v) = run.rounds {
        flags.push(("rounds", v.to_string()));
    }
    if let Some(v) = run.client_lr {
        flags.push(("client.lr", v.to_string()));
    }
    if let Some(v) = run.server_lr {
        flags.push(("server.lr", v.to_string()));
    }
    if let Some(v) = &run.data {
        flags.push(("data.path", v.display().to_string()));
    }
    if let Some(v) = run.workers {
        flags.push(("workers", v.to_string()));
    }
    for (k, v) in flags {
        cfg.set(k, &v)?;
    }
    apply_sets(&mut cfg, &run.set)?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_snapshot(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let path = out.join("config.txt");
    fs::write(&path, cfg.snapshot()).map_err(|e| Error::io(&path, e))
}

/// Output directory for one seed: `out` itself when there is only one.
fn seed_dir(cfg: &RunConfig, out: &Path, seed: u64) -> Result<PathBuf> {
    let dir = if cfg.seeds.len() == 1 {
        out.to_path_buf()
    } else {
        out.join(format!("seed-{seed}"))
    };
    create_dir(&dir)?;
    Ok(dir)
}

pub fn load_datasets(cfg: &RunConfig) -> Result<Vec<ParticipantDataset>> {
    match &cfg.data {
        DataSource::Path(dir) => load_dir(dir),
        DataSource::Synth(preset) => Ok(preset.generate()),
    }
}

fn availability(cfg: &RunConfig) -> Option<Vec<f64>> {
    match &cfg.data {
        DataSource::Synth(p) if p.availability_skew => Some(p.skew_configs().iter().map(|c| c.availability).collect()),
        _ => None,
    }
}

/// Clean federation for evaluation and a possibly noised one for training.
struct Federations<T> {
    clean: PreparedFederation<T>,
    train: PreparedFederation<T>,
    noisy: Vec<ParticipantId>,
}

fn federations<T: Real>(cfg: &RunConfig, plan: &Arc<Plan>, datasets: &[ParticipantDataset], seed: u64) -> Result<Federations<T>> {
    let build = |sets: &[ParticipantDataset]| {
        let fed = PreparedFederation::<T>::new(Arc::clone(plan), sets, cfg.val_fraction, seed)?;
        match availability(cfg) {
            Some(w) => fed.with_availability(&w),
            None => Ok(fed),
        }
    };
    let clean = build(datasets)?;
    let noisy = noisy_participants(&clean.ids(), cfg.noise_fraction, seed)?;
    let train = if noisy.is_empty() {
        clean.clone()
    } else {
        build(&with_noise(datasets, &noisy, cfg.noise_sigma, seed)?)?
    };
    Ok(Federations { clean, train, noisy })
}

fn write_checkpoints<T: Real>(cfg: &RunConfig, dir: &Path, seed: u64, outcome: &TrainingOutcome<T>) -> Result<()> {
    for (owner, params) in &outcome.models {
        let ckpt = Checkpoint {
            mode: outcome.mode,
            round: cfg.train.rounds,
            seed,
            config_hash: cfg.hash(),
            architecture: cfg.arch.clone(),
            participant: *owner,
            params: params.clone(),
        };
        let path = match owner {
            None => dir.join("checkpoint.ckpt"),
            Some(id) => {
                create_dir(&dir.join("checkpoints"))?;
                dir.join("checkpoints").join(format!("participant-{id:02}.ckpt"))
            }
        };
        ckpt.write_to(create(&path)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn write_result(dir: &Path, result: &EvalResult, protocol: &str) -> Result<()> {
    result.write_csv(create(&dir.join("report.csv"))?, protocol)?;
    result.write_summary_csv(create(&dir.join("summary.csv"))?, protocol)
}

fn person_specific<T: Real>(plan: &Arc<Plan>, fed: &PreparedFederation<T>, outcome: &TrainingOutcome<T>) -> Result<EvalResult> {
    let nets = outcome
        .models
        .iter()
        .map(|(owner, p)| Ok((*owner, GazeNet::from_params(Arc::clone(plan), p.clone())?)))
        .collect::<Result<Vec<_>>>()?;
    let models = match nets.as_slice() {
        [(None, net)] => ModelSet::Shared(net as &dyn Predictor<T>),
        _ => ModelSet::PerParticipant(
            nets.iter()
                .map(|(owner, net)| (owner.expect("per-participant model"), net as &dyn Predictor<T>))
                .collect::<BTreeMap<_, _>>(),
        ),
    };
    eval_person_specific(&models, fed, outcome.mode)
}

fn train_and_report<T: Real>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let plan = Arc::new(cfg.architecture().plan()?);
    let datasets = load_datasets(cfg)?;
    for &seed in &cfg.seeds {
        let dir = seed_dir(cfg, out, seed)?;
        let feds = federations::<T>(cfg, &plan, &datasets, seed)?;
        let vals: Vec<&Prepared<T>> = feds.clean.participants().iter().filter_map(|p| p.val.as_deref()).collect();
        let test = (!vals.is_empty()).then(|| Prepared::concat(vals));
        let outcome = run_training(cfg.mode, &cfg.train_for(seed), &plan, &feds.train.clients(None), test.as_ref())?;
        write_metrics(create(&dir.join("metrics.csv"))?, &outcome.reports)?;
        write_checkpoints(cfg, &dir, seed, &outcome)?;
        if test.is_some() {
            let result = person_specific(&plan, &feds.clean, &outcome)?;
            write_result(&dir, &result, "person-specific")?;
            println!(
                "seed {seed} {}: mean {:.3}° min {:.3}° max {:.3}°{}",
                cfg.mode,
                result.mean,
                result.min,
                result.max,
                noisy_note(&feds.noisy)
            );
        }
    }
    Ok(())
}

fn noisy_note(noisy: &[ParticipantId]) -> String {
    if noisy.is_empty() {
        String::new()
    } else {
        format!(" (noisy participants {noisy:?})")
    }
}

fn leave_one_out<T: Real>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let plan = Arc::new(cfg.architecture().plan()?);
    let datasets = load_datasets(cfg)?;
    let held = (!cfg.held_out.is_empty()).then_some(cfg.held_out.as_slice());
    for &seed in &cfg.seeds {
        let dir = seed_dir(cfg, out, seed)?;
        let feds = federations::<T>(cfg, &plan, &datasets, seed)?;
        let legs = leave_one_out_sweep_on(cfg.mode, &cfg.train_for(seed), &feds.train, &feds.clean, held)?;
        for leg in &legs {
            let leg_dir = dir.join(format!("held-out-{:02}", leg.held_out));
            create_dir(&leg_dir)?;
            write_metrics(create(&leg_dir.join("metrics.csv"))?, &leg.outcome.reports)?;
            write_checkpoints(cfg, &leg_dir, seed, &leg.outcome)?;
        }
        let result = summarize_legs(cfg.mode, &legs)?;
        write_result(&dir, &result, "leave-one-out")?;
        println!(
            "seed {seed} {} leave-one-out: mean {:.3}° min {:.3}° max {:.3}° oscillation {:.3}°{}",
            cfg.mode,
            result.mean,
            result.min,
            result.max,
            crate::eval::oscillation(&legs, 50),
            noisy_note(&feds.noisy)
        );
    }
    Ok(())
}

fn eval_checkpoint<T: Real>(cfg: &RunConfig, path: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::<T>::read_from(File::open(path).map_err(|e| Error::io(path, e))?)?;
    let arch = crate::model::Architecture::by_name(&ckpt.architecture)
        .ok_or_else(|| Error::Checkpoint(format!("unknown architecture {:?}", ckpt.architecture)))?;
    let plan = Arc::new(arch.plan()?);
    let net = GazeNet::from_params(Arc::clone(&plan), ckpt.params)?;
    let datasets = load_datasets(cfg)?;
    let fed = PreparedFederation::<T>::new(plan, &datasets, cfg.val_fraction, ckpt.seed)?;
    let result = eval_person_specific(&ModelSet::Shared(&net), &fed, ckpt.mode)?;
    write_result(out, &result, "person-specific")?;
    println!("{}: mean {:.3}° min {:.3}° max {:.3}°", ckpt.mode, result.mean, result.min, result.max);
    Ok(())
}

fn robustness<T: Real>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let plan = Arc::new(cfg.architecture().plan()?);
    let datasets = load_datasets(cfg)?;
    let rc = RobustnessConfig {
        fractions: cfg.robustness_fractions.clone(),
        sigma: cfg.noise_sigma,
        val_fraction: cfg.val_fraction,
        held_out: (!cfg.held_out.is_empty()).then(|| cfg.held_out.clone()),
        smooth: 10,
    };
    for &seed in &cfg.seeds {
        let dir = seed_dir(cfg, out, seed)?;
        let runs = robustness_sweep::<T>(&cfg.train_for(seed), Arc::clone(&plan), &datasets, &rc, None)?;
        let rows: Vec<_> = runs.iter().map(|r| r.row.clone()).collect();
        write_robustness_csv(create(&dir.join("robustness.csv"))?, &rows)?;
        for r in &rows {
            println!(
                "seed {seed} f={}: error {:.3}° (clean {:.3}°, {:+.1}%) converged={}",
                r.fraction,
                r.error_deg,
                r.clean_error_deg,
                100.0 * r.relative_change(),
                r.converged
            );
        }
    }
    Ok(())
}

fn stats(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let stats = partition_stats(&load_datasets(cfg)?);
    stats.write_csv(create(&out.join("stats.csv"))?)?;
    stats.write_distance_csv(create(&out.join("label_distance.csv"))?)?;
    for p in &stats.participants {
        println!(
            "participant {:2}: {:5} samples, pixel mean {:.3}, yaw {:+.3}±{:.3}, pitch {:+.3}±{:.3}",
            p.id, p.count, p.pixel_mean, p.yaw_mean, p.yaw_std, p.pitch_mean, p.pitch_std
        );
    }
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &args.preset {
        cfg.set("data.synth.preset", p)?;
    }
    if let Some(n) = args.participants {
        cfg.set("data.synth.participants", &n.to_string())?;
    }
    if let Some(s) = args.seed {
        cfg.set("data.synth.seed", &s.to_string())?;
    }
    apply_sets(&mut cfg, &args.set)?;
    let DataSource::Synth(preset) = &cfg.data else {
        return Err(Error::Config("synth needs a synthetic data source, not data.path".into()));
    };
    cfg.validate()?;
    create_dir(&args.out)?;
    let preset: &SynthPreset = preset;
    let mut skew = String::new();
    for (id, (c, ds)) in preset.skew_configs().iter().zip(preset.generate()).enumerate() {
        let path = args.out.join(format!("participant-{id:02}.gzfl"));
        write_participant(&path, &ds)?;
        skew.push_str(&format!(
            "[{id}]\nsamples = {}\nbrightness = {}\ncontrast = {}\ngaze_yaw = {},{}\ngaze_pitch = {},{}\nstyle = {}\n\
             label_bias = {},{}\nhead_mean = {},{}\nhead_std = {}\navailability = {}\nseed = {}\n\n",
            c.samples,
            c.brightness,
            c.contrast,
            c.gaze_box.yaw.0,
            c.gaze_box.yaw.1,
            c.gaze_box.pitch.0,
            c.gaze_box.pitch.1,
            c.style,
            c.label_bias.yaw,
            c.label_bias.pitch,
            c.head_mean.pitch,
            c.head_mean.yaw,
            c.head_std,
            c.availability,
            c.seed
        ));
    }
    let path = args.out.join("skew.txt");
    fs::write(&path, skew).map_err(|e| Error::io(&path, e))?;
    println!("wrote {} participants to {}", preset.participants, args.out.display());
    Ok(())
}

fn with_precision(cfg: &RunConfig, f32_run: impl FnOnce() -> Result<()>, f64_run: impl FnOnce() -> Result<()>) -> Result<()> {
    match cfg.precision {
        Precision::F32 => f32_run(),
        Precision::F64 => f64_run(),
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth(args) => synth(&args),
        Command::Train(run) => {
            let cfg = resolve(&run)?;
            cfg.validate()?;
            write_snapshot(&cfg, &run.out)?;
            with_precision(&cfg, || train_and_report::<f32>(&cfg, &run.out), || train_and_report::<f64>(&cfg, &run.out))
        }
        Command::Eval(args) => {
            let mut cfg = resolve(&args.run)?;
            if let Some(p) = &args.protocol {
                cfg.set("eval.protocol", p)?;
            }
            if let Some(h) = &args.held_out {
                cfg.set("eval.held_out", h)?;
            }
            cfg.validate()?;
            let out = &args.run.out;
            write_snapshot(&cfg, out)?;
            if let Some(ckpt) = &args.checkpoint {
                return with_precision(&cfg, || eval_checkpoint::<f32>(&cfg, ckpt, out), || eval_checkpoint::<f64>(&cfg, ckpt, out));
            }
            match cfg.protocol {
                Protocol::PersonSpecific => {
                    with_precision(&cfg, || train_and_report::<f32>(&cfg, out), || train_and_report::<f64>(&cfg, out))
                }
                Protocol::LeaveOneOut => {
                    if cfg.mode == Mode::Individual {
                        return Err(Error::Config("leave-one-out needs mode central, fedavg or fedadam".into()));
                    }
                    with_precision(&cfg, || leave_one_out::<f32>(&cfg, out), || leave_one_out::<f64>(&cfg, out))
                }
            }
        }
        Command::Robustness(run) => {
            let cfg = resolve(&run)?;
            cfg.validate()?;
            write_snapshot(&cfg, &run.out)?;
            with_precision(&cfg, || robustness::<f32>(&cfg, &run.out), || robustness::<f64>(&cfg, &run.out))
        }
        Command::Stats(run) => {
            let cfg = resolve(&run)?;
            cfg.validate()?;
            stats(&cfg, &run.out)
        }
    }
}
