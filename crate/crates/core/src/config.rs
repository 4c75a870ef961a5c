//! `key = value` run configuration with a canonical resolved form.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{ParticipantId, SynthPreset};
use crate::error::{Error, Result};
use crate::federation::{Mode, TrainConfig};
use crate::model::Architecture;
use crate::optim::Weighting;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Each participant's own validation split.
    PersonSpecific,
    /// Leave-one-out over `eval.held_out` (every participant when empty).
    LeaveOneOut,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Directory of `.gzfl` files.
    Path(PathBuf),
    Synth(SynthPreset),
}

/// Everything needed to reproduce one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub arch: String,
    pub precision: Precision,
    pub data: DataSource,
    pub val_fraction: f64,
    pub noise_fraction: f64,
    pub noise_sigma: f64,
    pub robustness_fractions: Vec<f64>,
    pub protocol: Protocol,
    pub held_out: Vec<ParticipantId>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::FedAdam,
            seeds: vec![1],
            train: TrainConfig::default(),
            arch: "desk".into(),
            precision: Precision::F32,
            data: DataSource::Synth(SynthPreset::desk()),
            val_fraction: 0.1,
            noise_fraction: 0.0,
            noise_sigma: 0.5,
            robustness_fractions: vec![0.0, 0.3, 0.7],
            protocol: Protocol::PersonSpecific,
            held_out: Vec::new(),
        }
    }
}

/// Every accepted key, in snapshot order.
pub const KEYS: &[&str] = &[
    "mode",
    "seeds",
    "rounds",
    "local_epochs",
    "batch_size",
    "cohort_fraction",
    "client.lr",
    "client.momentum",
    "server.optimizer",
    "server.lr",
    "server.beta1",
    "server.beta2",
    "server.eps",
    "server.weighting",
    "server.availability_sampling",
    "schedule.decay",
    "schedule.milestones",
    "drop_on_failure",
    "workers",
    "model.arch",
    "precision",
    "data.path",
    "data.synth.preset",
    "data.synth.participants",
    "data.synth.seed",
    "data.synth.min_count",
    "data.synth.max_count",
    "data.synth.label_skew",
    "data.synth.feature_skew",
    "data.synth.style_skew",
    "data.synth.label_bias",
    "data.synth.availability_skew",
    "val_fraction",
    "noise.fraction",
    "noise.sigma",
    "noise.fractions",
    "eval.protocol",
    "eval.held_out",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<V: ToString>(values: &[V]) -> String {
    values.iter().map(V::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "mode" => self.mode = value.parse()?,
            "seed" | "seeds" => {
                self.seeds = parse_list(key, value)?;
                if self.seeds.is_empty() {
                    return Err(Error::Config("seeds must not be empty".into()));
                }
            }
            "rounds" | "epochs" => t.rounds = parse(key, value)?,
            "local_epochs" => t.local_epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "cohort_fraction" => t.cohort_fraction = parse(key, value)?,
            "client.lr" => t.client_lr = parse(key, value)?,
            "client.momentum" => t.client_momentum = parse(key, value)?,
            "server.optimizer" => {
                self.mode = match value {
                    "fedavg" => Mode::FedAvg,
                    "fedadam" => Mode::FedAdam,
                    _ => return Err(Error::Config(format!("server.optimizer must be fedavg or fedadam, got {value:?}"))),
                }
            }
            "server.lr" => t.adam.lr = parse(key, value)?,
            "server.beta1" => t.adam.beta1 = parse(key, value)?,
            "server.beta2" => t.adam.beta2 = parse(key, value)?,
            "server.eps" => t.adam.eps = parse(key, value)?,
            "server.weighting" => {
                t.weighting = match value {
                    "samples" => Weighting::Samples,
                    "uniform" => Weighting::Uniform,
                    _ => return Err(Error::Config(format!("server.weighting must be samples or uniform, got {value:?}"))),
                }
            }
            "server.availability_sampling" => t.availability_sampling = parse_bool(key, value)?,
            "schedule.decay" => t.schedule_decay = parse(key, value)?,
            "schedule.milestones" => t.schedule_milestones = parse_list(key, value)?,
            "drop_on_failure" => t.drop_on_failure = parse_bool(key, value)?,
            "workers" => t.workers = parse(key, value)?,
            "model.arch" => {
                if Architecture::by_name(value).is_none() {
                    return Err(Error::Config(format!("unknown architecture {value:?} (expected desk|lenet|tiny)")));
                }
                self.arch = value.into();
            }
            "precision" => {
                self.precision = match value {
                    "f32" | "32" => Precision::F32,
                    "f64" | "64" => Precision::F64,
                    _ => return Err(Error::Config(format!("precision must be f32 or f64, got {value:?}"))),
                }
            }
            "data.path" => self.data = DataSource::Path(value.into()),
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "noise.fraction" => self.noise_fraction = parse(key, value)?,
            "noise.sigma" => self.noise_sigma = parse(key, value)?,
            "noise.fractions" => self.robustness_fractions = parse_list(key, value)?,
            "eval.protocol" => {
                self.protocol = match value {
                    "person-specific" | "specific" => Protocol::PersonSpecific,
                    "leave-one-out" | "person-independent" | "loo" => Protocol::LeaveOneOut,
                    _ => {
                        return Err(Error::Config(format!(
                            "eval.protocol must be person-specific or leave-one-out, got {value:?}"
                        )))
                    }
                }
            }
            "eval.held_out" => self.held_out = parse_list(key, value)?,
            k if k.starts_with("data.synth.") => self.set_synth(&k["data.synth.".len()..], key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    fn set_synth(&mut self, field: &str, key: &str, value: &str) -> Result<()> {
        if !matches!(self.data, DataSource::Synth(_)) {
            self.data = DataSource::Synth(SynthPreset::desk());
        }
        let DataSource::Synth(p) = &mut self.data else { unreachable!() };
        match field {
            "preset" => {
                let base = match value {
                    "desk" => SynthPreset::desk(),
                    "full" => SynthPreset::full(),
                    _ => return Err(Error::Config(format!("data.synth.preset must be desk or full, got {value:?}"))),
                };
                *p = SynthPreset { seed: p.seed, ..base };
            }
            "participants" => p.participants = parse(key, value)?,
            "seed" => p.seed = parse(key, value)?,
            "min_count" => p.min_count = parse(key, value)?,
            "max_count" => p.max_count = parse(key, value)?,
            "label_skew" => p.label_skew = parse_bool(key, value)?,
            "feature_skew" => p.feature_skew = parse_bool(key, value)?,
            "style_skew" => p.style_skew = parse_bool(key, value)?,
            "label_bias" => p.label_bias = parse(key, value)?,
            "availability_skew" => p.availability_skew = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return bad(format!("noise.fraction {} outside [0, 1]", self.noise_fraction));
        }
        if let Some(f) = self.robustness_fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return bad(format!("noise.fractions entry {f} outside [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise.sigma {} must be ≥ 0", self.noise_sigma));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        match &self.data {
            DataSource::Path(p) if !p.is_dir() => bad(format!("data.path {} is not a directory", p.display())),
            DataSource::Synth(p) if p.participants == 0 || p.min_count == 0 || p.min_count > p.max_count => {
                bad(format!("synthetic preset needs participants ≥ 1 and 1 ≤ min_count ≤ max_count, got {p:?}"))
            }
            _ => Ok(()),
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::by_name(&self.arch).expect("validated on set")
    }

    /// Training settings for one seed.
    pub fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    /// Canonical `key = value` form; parsing it yields an equal config.
    pub fn snapshot(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("mode", self.mode.to_string());
        kv("seeds", join(&self.seeds));
        kv("rounds", t.rounds.to_string());
        kv("local_epochs", t.local_epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("cohort_fraction", t.cohort_fraction.to_string());
        kv("client.lr", t.client_lr.to_string());
        kv("client.momentum", t.client_momentum.to_string());
        kv("server.lr", t.adam.lr.to_string());
        kv("server.beta1", t.adam.beta1.to_string());
        kv("server.beta2", t.adam.beta2.to_string());
        kv("server.eps", t.adam.eps.to_string());
        kv(
            "server.weighting",
            match t.weighting {
                Weighting::Samples => "samples",
                Weighting::Uniform => "uniform",
            }
            .into(),
        );
        kv("server.availability_sampling", t.availability_sampling.to_string());
        kv("schedule.decay", t.schedule_decay.to_string());
        kv("schedule.milestones", join(&t.schedule_milestones));
        kv("drop_on_failure", t.drop_on_failure.to_string());
        kv("workers", t.workers.to_string());
        kv("model.arch", self.arch.clone());
        kv(
            "precision",
            match self.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            }
            .into(),
        );
        match &self.data {
            DataSource::Path(p) => kv("data.path", p.display().to_string()),
            DataSource::Synth(p) => {
                kv("data.synth.participants", p.participants.to_string());
                kv("data.synth.seed", p.seed.to_string());
                kv("data.synth.min_count", p.min_count.to_string());
                kv("data.synth.max_count", p.max_count.to_string());
                kv("data.synth.label_skew", p.label_skew.to_string());
                kv("data.synth.feature_skew", p.feature_skew.to_string());
                kv("data.synth.style_skew", p.style_skew.to_string());
                kv("data.synth.label_bias", p.label_bias.to_string());
                kv("data.synth.availability_skew", p.availability_skew.to_string());
            }
        }
        kv("val_fraction", self.val_fraction.to_string());
        kv("noise.fraction", self.noise_fraction.to_string());
        kv("noise.sigma", self.noise_sigma.to_string());
        kv("noise.fractions", join(&self.robustness_fractions));
        kv(
            "eval.protocol",
            match self.protocol {
                Protocol::PersonSpecific => "person-specific",
                Protocol::LeaveOneOut => "leave-one-out",
            }
            .into(),
        );
        kv("eval.held_out", join(&self.held_out));
        s
    }

    /// Hex SHA-256 of the snapshot without `workers`, which never changes
    /// results.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for line in self.snapshot().lines().filter(|l| !l.starts_with("workers =")) {
            h.update(line.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}
