//! Synchronous cross-device federated training.
//!
//! A round samples a cohort, broadcasts the global parameters, runs local
//! SGD+Nesterov epochs on every cohort member, and aggregates either by
//! FedAvg or by an Adam step on the pseudo-gradient. Aggregation always
//! visits clients in id order, so results do not depend on how many worker
//! threads trained the cohort.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{derive_seed, ParticipantId};
use crate::error::{Error, Result};
use crate::model::{ParamVector, Plan, Prepared};
use crate::optim::{
    fedavg_aggregate, pseudo_gradient, AdamConfig, AdamState, LrSchedule, SgdNesterov,
    WeightedParams, Weighting,
};
use crate::tensor::Real;

const STREAM_INIT: u64 = 0x1417;
const STREAM_COHORT: u64 = 0xC0407;
const STREAM_LOCAL: u64 = 0x10CA1;
const STREAM_CENTRAL: u64 = 0xCE47;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Individual,
    Central,
    FedAvg,
    FedAdam,
}

impl Mode {
    pub fn is_federated(self) -> bool {
        matches!(self, Mode::FedAvg | Mode::FedAdam)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Individual => "individual",
            Mode::Central => "central",
            Mode::FedAvg => "fedavg",
            Mode::FedAdam => "fedadam",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "individual" => Ok(Mode::Individual),
            "central" | "datacentre" | "datacenter" => Ok(Mode::Central),
            "fedavg" => Ok(Mode::FedAvg),
            "fedadam" => Ok(Mode::FedAdam),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected individual|central|fedavg|fedadam)"
            ))),
        }
    }
}

/// Everything that shapes a training run besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub cohort_fraction: f64,
    pub client_lr: f64,
    pub client_momentum: f64,
    pub schedule_decay: f64,
    pub schedule_milestones: Vec<usize>,
    pub adam: AdamConfig,
    pub weighting: Weighting,
    /// Cohorts are drawn with probability proportional to client availability.
    pub availability_sampling: bool,
    /// A failing client is excluded from aggregation instead of aborting.
    pub drop_on_failure: bool,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 200,
            local_epochs: 1,
            batch_size: 64,
            cohort_fraction: 0.8,
            client_lr: 1e-5,
            client_momentum: 0.9,
            schedule_decay: 0.1,
            schedule_milestones: Vec::new(),
            adam: AdamConfig::default(),
            weighting: Weighting::Samples,
            availability_sampling: false,
            drop_on_failure: false,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.cohort_fraction > 0.0 && self.cohort_fraction <= 1.0) {
            return bad(format!("cohort_fraction {} outside (0, 1]", self.cohort_fraction));
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return bad("local_epochs and batch_size must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.client_momentum) || !(self.client_lr >= 0.0) {
            return bad(format!(
                "client lr {} / momentum {} invalid",
                self.client_lr, self.client_momentum
            ));
        }
        self.adam.validate()?;
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(
            self.client_lr,
            self.schedule_decay,
            self.schedule_milestones.clone(),
        )
    }
}

/// One participant's local training data as seen by the simulator.
#[derive(Debug, Clone)]
pub struct ClientData<T> {
    pub id: ParticipantId,
    pub train: Arc<Prepared<T>>,
    pub availability: f64,
}

/// Per-round view of a client: its data and local training settings.
/// Velocity is not stored; it restarts at zero every round.
#[derive(Debug, Clone)]
pub struct ClientState<T> {
    pub id: ParticipantId,
    pub data: Arc<Prepared<T>>,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
}

impl<T: Real> ClientState<T> {
    pub fn new(data: &ClientData<T>, cfg: &TrainConfig) -> Result<Self> {
        if data.train.is_empty() {
            return Err(Error::invalid(
                "client",
                format!("participant {} has an empty training split", data.id),
            ));
        }
        Ok(Self {
            id: data.id,
            data: Arc::clone(&data.train),
            local_epochs: cfg.local_epochs,
            batch_size: cfg.batch_size,
            momentum: cfg.client_momentum,
        })
    }
}

/// Everything that leaves a client after a round: a parameter-sized vector,
/// a sample count and a scalar loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate<T> {
    pub client: ParticipantId,
    pub local: ParamVector<T>,
    pub samples: usize,
    pub train_loss: f64,
}

impl<T: Real> ClientUpdate<T> {
    /// Local difference `global − local`.
    pub fn delta(&self, global: &[T]) -> ParamVector<T> {
        ParamVector(global.iter().zip(self.local.iter()).map(|(&g, &l)| g - l).collect())
    }

    fn weighted(&self) -> WeightedParams<'_, T> {
        WeightedParams {
            client: self.client,
            params: &self.local,
            samples: self.samples,
        }
    }
}

/// One pass over `data` in a freshly shuffled order. Returns the mean batch
/// loss weighted by batch size.
fn sgd_epoch<T: Real>(
    plan: &Plan,
    params: &mut ParamVector<T>,
    opt: &mut SgdNesterov<T>,
    data: &Prepared<T>,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for batch in order.chunks(batch_size) {
        let loss = opt.step(params, |look, grad| plan.loss_and_grad(look, data, batch, grad))?;
        let loss = loss.as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                location: "training loss".into(),
                index: 0,
            });
        }
        total += loss * batch.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Trains a copy of `global` for the client's local epochs.
pub fn local_train<T: Real>(
    plan: &Plan,
    client: &ClientState<T>,
    global: &ParamVector<T>,
    lr: f64,
    round: usize,
    seed: u64,
) -> Result<ClientUpdate<T>> {
    let diverged = |e: Error| Error::Divergence {
        client: client.id,
        round,
        reason: e.to_string(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        derive_seed(seed, STREAM_LOCAL),
        ((round as u64) << 16) | client.id as u64,
    ));
    let mut params = global.clone();
    let mut opt = SgdNesterov::new(params.len(), lr, client.momentum)?.with_layout(plan.layout().clone());
    let mut loss = 0.0;
    for _ in 0..client.local_epochs {
        loss += sgd_epoch(plan, &mut params, &mut opt, &client.data, client.batch_size, &mut rng)
            .map_err(diverged)?;
    }
    crate::tensor::check_finite(&params, "local parameters").map_err(diverged)?;
    Ok(ClientUpdate {
        client: client.id,
        local: params,
        samples: client.data.len(),
        train_loss: loss / client.local_epochs as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServerOptimizer {
    FedAvg,
    FedAdam,
}

/// Global model plus everything the server carries between rounds.
#[derive(Debug, Clone)]
pub struct ServerState<T> {
    pub round: usize,
    pub params: ParamVector<T>,
    pub adam: Option<AdamState<T>>,
    pub cohort_fraction: f64,
    pub schedule: LrSchedule,
    pub weighting: Weighting,
    rng: ChaCha8Rng,
}

impl<T: Real> ServerState<T> {
    pub fn new(params: ParamVector<T>, optimizer: ServerOptimizer, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = match optimizer {
            ServerOptimizer::FedAvg => None,
            ServerOptimizer::FedAdam => Some(AdamState::new(params.len(), cfg.adam)?),
        };
        Ok(Self {
            round: 0,
            adam,
            cohort_fraction: cfg.cohort_fraction,
            schedule: cfg.schedule()?,
            weighting: cfg.weighting,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_COHORT)),
            params,
        })
    }

    pub fn optimizer(&self) -> ServerOptimizer {
        if self.adam.is_some() {
            ServerOptimizer::FedAdam
        } else {
            ServerOptimizer::FedAvg
        }
    }

    pub fn cohort_size(&self, n_clients: usize) -> usize {
        // round half up, at least one, at most everyone
        ((self.cohort_fraction * n_clients as f64 + 0.5).floor() as usize).clamp(1, n_clients.max(1))
    }

    /// Sorted positions (into the client list) of this round's cohort. With
    /// `availability`, clients are drawn without replacement with
    /// probability proportional to their weight.
    pub fn sample_cohort(&mut self, n_clients: usize, availability: Option<&[f64]>) -> Result<Vec<usize>> {
        if n_clients == 0 {
            return Err(Error::invalid("sample_cohort", "no clients"));
        }
        let k = self.cohort_size(n_clients);
        let mut picked = match availability {
            None => index::sample(&mut self.rng, n_clients, k).into_vec(),
            Some(w) => index::sample_weighted(&mut self.rng, n_clients, |i| w[i], k)
                .map_err(|e| Error::invalid("sample_cohort", e.to_string()))?
                .into_vec(),
        };
        picked.sort_unstable();
        Ok(picked)
    }
}

/// Per-round (or per-epoch) metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub mode: Mode,
    pub cohort: Vec<ParticipantId>,
    pub lr: f64,
    pub train_loss_mean: f64,
    pub train_loss_min: f64,
    pub train_loss_max: f64,
    pub test_loss: Option<f64>,
    pub mae_deg: Option<f64>,
}

pub const METRICS_COLUMNS: [&str; 9] = [
    "round",
    "mode",
    "cohort",
    "lr",
    "train_loss_mean",
    "train_loss_min",
    "train_loss_max",
    "test_loss",
    "mae_deg",
];

pub fn write_metrics<W: Write>(w: W, reports: &[RoundReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_COLUMNS)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in reports {
        let cohort: Vec<String> = r.cohort.iter().map(|c| c.to_string()).collect();
        out.write_record(&[
            r.round.to_string(),
            r.mode.to_string(),
            cohort.join(";"),
            r.lr.to_string(),
            r.train_loss_mean.to_string(),
            r.train_loss_min.to_string(),
            r.train_loss_max.to_string(),
            opt(r.test_loss),
            opt(r.mae_deg),
        ])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn loss_summary(losses: &[f64]) -> (f64, f64, f64) {
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let max = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean.clamp(min, max), min, max)
}

/// Execution context shared by every round of a run.
pub struct Federation<'a, T> {
    pub plan: &'a Plan,
    pub clients: &'a [ClientState<T>],
    pub availability: Option<Vec<f64>>,
    pub test: Option<&'a Prepared<T>>,
    pub seed: u64,
    pub drop_on_failure: bool,
    pool: Option<rayon::ThreadPool>,
}

impl<'a, T: Real> Federation<'a, T> {
    pub fn new(
        plan: &'a Plan,
        clients: &'a [ClientState<T>],
        test: Option<&'a Prepared<T>>,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::invalid("federation", "no clients"));
        }
        let pool = if cfg.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.workers)
                    .build()
                    .map_err(|e| Error::invalid("federation", e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Self {
            plan,
            clients,
            availability: None,
            test,
            seed: cfg.seed,
            drop_on_failure: cfg.drop_on_failure,
            pool,
        })
    }

    pub fn with_availability(mut self, weights: Vec<f64>) -> Self {
        self.availability = Some(weights);
        self
    }

    fn train_cohort(&self, cohort: &[usize], global: &ParamVector<T>, lr: f64, round: usize) -> Vec<Result<ClientUpdate<T>>> {
        let train = |&i: &usize| local_train(self.plan, &self.clients[i], global, lr, round, self.seed);
        match &self.pool {
            Some(pool) => pool.install(|| cohort.par_iter().map(train).collect()),
            None => cohort.iter().map(train).collect(),
        }
    }

    /// Runs one communication round and advances the server.
    pub fn run_round(&self, server: &mut ServerState<T>) -> Result<RoundReport> {
        let round = server.round;
        let lr = server.schedule.lr_at(round);
        let cohort = server.sample_cohort(self.clients.len(), self.availability.as_deref())?;
        let mut updates = Vec::with_capacity(cohort.len());
        for result in self.train_cohort(&cohort, &server.params, lr, round) {
            match result {
                Ok(u) => updates.push(u),
                Err(e) if self.drop_on_failure => log_drop(&e),
                Err(e) => return Err(e),
            }
        }
        if updates.is_empty() {
            return Err(Error::invalid(
                "run_round",
                format!("every cohort member failed in round {round}"),
            ));
        }
        let weighted: Vec<WeightedParams<'_, T>> = updates.iter().map(ClientUpdate::weighted).collect();
        let weighting = server.weighting;
        let mode = match server.adam.as_mut() {
            None => {
                server.params = fedavg_aggregate(&weighted, weighting)?;
                Mode::FedAvg
            }
            Some(adam) => {
                let pg = pseudo_gradient(&server.params, &weighted, weighting)?;
                adam.step(&mut server.params, &pg)?;
                Mode::FedAdam
            }
        };
        server.round += 1;
        let losses: Vec<f64> = updates.iter().map(|u| u.train_loss).collect();
        let (mean, min, max) = loss_summary(&losses);
        let test = self.test.map(|t| self.plan.evaluate(&server.params, t)).transpose()?;
        Ok(RoundReport {
            round,
            mode,
            cohort: cohort.iter().map(|&i| self.clients[i].id).collect(),
            lr,
            train_loss_mean: mean,
            train_loss_min: min,
            train_loss_max: max,
            test_loss: test.map(|s| s.loss),
            mae_deg: test.map(|s| s.mae_deg),
        })
    }
}

fn log_drop(e: &Error) {
    eprintln!("dropping client from aggregation: {e}");
}

/// Result of [`run_training`]: one model for the global modes, one per
/// participant for individual training.
#[derive(Debug, Clone)]
pub struct TrainingOutcome<T> {
    pub mode: Mode,
    pub models: Vec<(Option<ParticipantId>, ParamVector<T>)>,
    pub reports: Vec<RoundReport>,
}

impl<T: Real> TrainingOutcome<T> {
    pub fn global(&self) -> Option<&ParamVector<T>> {
        match self.models.as_slice() {
            [(None, p)] => Some(p),
            _ => None,
        }
    }

    pub fn for_participant(&self, id: ParticipantId) -> Option<&ParamVector<T>> {
        self.models.iter().find_map(|(owner, p)| match owner {
            None => Some(p),
            Some(o) if *o == id => Some(p),
            _ => None,
        })
    }
}

pub fn initial_params<T: Real>(plan: &Plan, seed: u64) -> ParamVector<T> {
    plan.init_params(derive_seed(seed, STREAM_INIT))
}

/// Plain epoch training on a single dataset with persistent momentum.
fn train_epochs<T: Real>(
    plan: &Plan,
    data: &Prepared<T>,
    cfg: &TrainConfig,
    mode: Mode,
    owner: &[ParticipantId],
    stream: u64,
    test: Option<&Prepared<T>>,
) -> Result<(ParamVector<T>, Vec<RoundReport>)> {
    let schedule = cfg.schedule()?;
    let mut params = initial_params(plan, cfg.seed);
    let mut opt = SgdNesterov::new(params.len(), cfg.client_lr, cfg.client_momentum)?
        .with_layout(plan.layout().clone());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, STREAM_CENTRAL), stream));
    let mut reports = Vec::with_capacity(cfg.rounds);
    for epoch in 0..cfg.rounds {
        let lr = schedule.lr_at(epoch);
        opt.lr = lr;
        let loss = sgd_epoch(plan, &mut params, &mut opt, data, cfg.batch_size, &mut rng)?;
        let test = test.map(|t| plan.evaluate(&params, t)).transpose()?;
        reports.push(RoundReport {
            round: epoch,
            mode,
            cohort: owner.to_vec(),
            lr,
            train_loss_mean: loss,
            train_loss_min: loss,
            train_loss_max: loss,
            test_loss: test.map(|s| s.loss),
            mae_deg: test.map(|s| s.mae_deg),
        });
    }
    Ok((params, reports))
}

/// Trains in any of the four modes. `test`, when given, is evaluated after
/// every round/epoch and reported in the metrics.
pub fn run_training<T: Real>(
    mode: Mode,
    cfg: &TrainConfig,
    plan: &Plan,
    clients: &[ClientData<T>],
    test: Option<&Prepared<T>>,
) -> Result<TrainingOutcome<T>> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::invalid("run_training", "no participants"));
    }
    let mut sorted: Vec<&ClientData<T>> = clients.iter().collect();
    sorted.sort_by_key(|c| c.id);
    match mode {
        Mode::Individual => {
            let mut models = Vec::with_capacity(sorted.len());
            let mut reports = Vec::new();
            for c in &sorted {
                let (p, r) = train_epochs(plan, &c.train, cfg, mode, &[c.id], c.id as u64, test)?;
                models.push((Some(c.id), p));
                reports.extend(r);
            }
            Ok(TrainingOutcome {
                mode,
                models,
                reports,
            })
        }
        Mode::Central => {
            let pooled = Prepared::concat(sorted.iter().map(|c| c.train.as_ref()));
            let ids: Vec<ParticipantId> = sorted.iter().map(|c| c.id).collect();
            let (p, reports) = train_epochs(plan, &pooled, cfg, mode, &ids, u64::MAX, test)?;
            Ok(TrainingOutcome {
                mode,
                models: vec![(None, p)],
                reports,
            })
        }
        Mode::FedAvg | Mode::FedAdam => {
            let states = sorted
                .iter()
                .map(|c| ClientState::new(c, cfg))
                .collect::<Result<Vec<_>>>()?;
            let mut fed = Federation::new(plan, &states, test, cfg)?;
            if cfg.availability_sampling {
                fed = fed.with_availability(sorted.iter().map(|c| c.availability).collect());
            }
            let optimizer = if mode == Mode::FedAdam {
                ServerOptimizer::FedAdam
            } else {
                ServerOptimizer::FedAvg
            };
            let mut server = ServerState::new(initial_params(plan, cfg.seed), optimizer, cfg)?;
            let reports = (0..cfg.rounds)
                .map(|_| fed.run_round(&mut server))
                .collect::<Result<Vec<_>>>()?;
            Ok(TrainingOutcome {
                mode,
                models: vec![(None, server.params)],
                reports,
            })
        }
    }
}

/// Checkpoint: a text header terminated by an empty line, then the
/// [`ParamVector`] bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub mode: Mode,
    pub round: usize,
    pub seed: u64,
    pub config_hash: String,
    pub architecture: String,
    pub participant: Option<ParticipantId>,
    pub params: ParamVector<T>,
}

const CKPT_MAGIC: &str = "GZFL-CHECKPOINT 1";

impl<T: Real> Checkpoint<T> {
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CKPT_MAGIC}")?;
        writeln!(w, "mode={}", self.mode)?;
        writeln!(w, "round={}", self.round)?;
        writeln!(w, "seed={}", self.seed)?;
        writeln!(w, "config_hash={}", self.config_hash)?;
        writeln!(w, "arch={}", self.architecture)?;
        if let Some(p) = self.participant {
            writeln!(w, "participant={p}")?;
        }
        writeln!(w)?;
        self.params.write_to(w)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
        let header = std::str::from_utf8(&bytes[..split])
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let mut lines = header.lines();
        if lines.next() != Some(CKPT_MAGIC) {
            return Err(Error::Checkpoint("bad checkpoint magic".into()));
        }
        let mut ckpt = Checkpoint {
            mode: Mode::FedAvg,
            round: 0,
            seed: 0,
            config_hash: String::new(),
            architecture: String::new(),
            participant: None,
            params: ParamVector::read_from(&bytes[split + 2..])
                .map_err(|e| Error::Checkpoint(format!("parameter block: {e}")))?,
        };
        let num = |k: &str, v: &str| {
            v.parse::<u64>()
                .map_err(|_| Error::Checkpoint(format!("bad {k} value {v:?}")))
        };
        for line in lines {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad header line {line:?}")))?;
            match k {
                "mode" => ckpt.mode = v.parse()?,
                "round" => ckpt.round = num(k, v)? as usize,
                "seed" => ckpt.seed = num(k, v)?,
                "config_hash" => ckpt.config_hash = v.to_string(),
                "arch" => ckpt.architecture = v.to_string(),
                "participant" => ckpt.participant = Some(num(k, v)? as ParticipantId),
                _ => return Err(Error::Checkpoint(format!("unknown header key {k:?}"))),
            }
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SkewConfig, synth_participant};
    use crate::model::Architecture;

    fn clients(plan: &Plan, sizes: &[usize]) -> Vec<ClientData<f64>> {
        sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let ds = synth_participant(
                    &SkewConfig {
                        samples: n,
                        seed: 3,
                        ..SkewConfig::default()
                    },
                    i as ParticipantId,
                );
                ClientData {
                    id: ds.id,
                    train: Arc::new(Prepared::new(plan, &ds.samples).unwrap()),
                    availability: 1.0,
                }
            })
            .collect()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            seed: 5,
            rounds: 3,
            batch_size: 8,
            client_lr: 0.01,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mode_round_trips_through_strings() {
        for m in [Mode::Individual, Mode::Central, Mode::FedAvg, Mode::FedAdam] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("fedprox".parse::<Mode>().is_err());
    }

    #[test]
    fn cohort_sizes() {
        let plan = Architecture::desk().plan().unwrap();
        let p = initial_params::<f64>(&plan, 0);
        let mut s = ServerState::new(p.clone(), ServerOptimizer::FedAvg, &cfg()).unwrap();
        assert_eq!(s.sample_cohort(15, None).unwrap().len(), 12);
        assert_eq!(s.cohort_size(1), 1);
        assert_eq!(s.cohort_size(2), 2); // 1.6 rounds up
        let full = TrainConfig {
            cohort_fraction: 1.0,
            ..cfg()
        };
        let mut s = ServerState::new(p, ServerOptimizer::FedAvg, &full).unwrap();
        for _ in 0..5 {
            assert_eq!(s.sample_cohort(7, None).unwrap(), (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn cohort_sequence_is_seeded() {
        let plan = Architecture::desk().plan().unwrap();
        let seq = |seed| {
            let c = TrainConfig { seed, ..cfg() };
            let mut s = ServerState::new(initial_params::<f32>(&plan, 0), ServerOptimizer::FedAdam, &c).unwrap();
            (0..10).map(|_| s.sample_cohort(15, None).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(seq(1), seq(1));
        assert_ne!(seq(1), seq(2));
    }

    #[test]
    fn weighted_cohort_skips_unavailable_clients() {
        let plan = Architecture::desk().plan().unwrap();
        let c = TrainConfig {
            cohort_fraction: 0.5,
            ..cfg()
        };
        let mut s = ServerState::new(initial_params::<f32>(&plan, 0), ServerOptimizer::FedAvg, &c).unwrap();
        let w = [1.0, 0.0, 1.0, 0.0];
        for _ in 0..20 {
            assert_eq!(s.sample_cohort(4, Some(&w)).unwrap(), vec![0, 2]);
        }
    }

    #[test]
    fn zero_lr_leaves_delta_zero() {
        let plan = Architecture::desk().plan().unwrap();
        let data = clients(&plan, &[20]);
        let state = ClientState::new(&data[0], &cfg()).unwrap();
        let g = initial_params::<f64>(&plan, 1);
        let u = local_train(&plan, &state, &g, 0.0, 0, 1).unwrap();
        assert!(u.delta(&g).iter().all(|&d| d == 0.0));
        assert_eq!(u.samples, 20);
        assert!(u.train_loss > 0.0);
    }

    #[test]
    fn client_update_exposes_only_aggregates() {
        let plan = Architecture::desk().plan().unwrap();
        let data = clients(&plan, &[10]);
        let state = ClientState::new(&data[0], &cfg()).unwrap();
        let g = initial_params::<f64>(&plan, 1);
        // exhaustive destructuring fails to compile if a field is added
        let ClientUpdate {
            client,
            local,
            samples,
            train_loss,
        } = local_train(&plan, &state, &g, 0.01, 0, 1).unwrap();
        assert_eq!(client, 0);
        assert_eq!(local.len(), g.len());
        assert_eq!(samples, 10);
        assert!(train_loss.is_finite());
    }

    #[test]
    fn divergence_carries_client_and_round() {
        let plan = Architecture::desk().plan().unwrap();
        let data = clients(&plan, &[10]);
        let state = ClientState::new(&data[0], &cfg()).unwrap();
        let mut g = initial_params::<f64>(&plan, 1);
        g[0] = f64::NAN;
        match local_train(&plan, &state, &g, 0.01, 7, 1) {
            Err(Error::Divergence { client: 0, round: 7, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn frozen_clients_leave_global_params_unchanged() {
        let plan = Architecture::desk().plan().unwrap();
        let data = clients(&plan, &[12, 9, 15]);
        let c = TrainConfig {
            client_lr: 0.0,
            ..cfg()
        };
        let init = initial_params::<f64>(&plan, c.seed);
        for mode in [Mode::FedAvg, Mode::FedAdam] {
            let out = run_training(mode, &c, &plan, &data, None).unwrap();
            assert_eq!(out.global().unwrap(), &init, "{mode}");
        }
    }

    #[test]
    fn single_member_cohort_adopts_its_model() {
        let plan = Architecture::desk().plan().unwrap();
        let data = clients(&plan, &[12]);
        let c = cfg();
        let states = vec![ClientState::new(&data[0], &c).unwrap()];
        let fed = Federation::new(&plan, &states, None, &c).unwrap();
        let init = initial_params::<f64>(&plan, c.seed);
        let mut server = ServerState::new(init.clone(), ServerOptimizer::FedAvg, &c).unwrap();
        let report = fed.run_round(&mut server).unwrap();
        let expected = local_train(&plan, &states[0], &init, c.client_lr, 0, c.seed).unwrap();
        assert_eq!(server.params, expected.local);
        assert_eq!(report.cohort, vec![0]);
        assert_eq!(server.round, 1);
    }

    #[test]
    fn fedadam_and_fedavg_diverge_on_nonzero_updates() {
        let plan = Architecture::tiny().plan().unwrap();
        let arch = Architecture::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mk = |id: ParticipantId, rng: &mut ChaCha8Rng| {
            use rand::Rng;
            let samples: Vec<crate::data::Sample> = (0..6)
                .map(|_| crate::data::Sample {
                    eye: (0..arch.image_h * arch.image_w).map(|_| rng.random_range(0.0..1.0)).collect(),
                    head: Default::default(),
                    gaze: crate::data::GazeAngles {
                        yaw: rng.random_range(-0.3..0.3),
                        pitch: rng.random_range(-0.3..0.3),
                    },
                })
                .collect();
            ClientData {
                id,
                train: Arc::new(Prepared::<f64>::new(&plan, &samples).unwrap()),
                availability: 1.0,
            }
        };
        let data = vec![mk(0, &mut rng), mk(1, &mut rng)];
        let c = TrainConfig {
            rounds: 1,
            cohort_fraction: 1.0,
            ..cfg()
        };
        let avg = run_training(Mode::FedAvg, &c, &plan, &data, None).unwrap();
        let adam = run_training(Mode::FedAdam, &c, &plan, &data, None).unwrap();
        assert_ne!(avg.global(), adam.global());
        // first Adam step: |Δθ| = η·|g|/(|g|+ε), so about η wherever |g| ≫ ε
        let init = initial_params::<f64>(&plan, c.seed);
        let eta = c.adam.lr;
        let moved = adam.global().unwrap().iter().zip(avg.global().unwrap().iter()).zip(init.iter());
        for ((a, f), i) in moved {
            let g = i - f;
            let step = (a - i).abs();
            assert!(step <= eta * (1.0 + 1e-9));
            if g.abs() > 1e-5 {
                assert!((step - eta).abs() < 1e-3 * eta, "g {g} step {step}");
                assert_eq!((a - i).signum(), -g.signum());
            }
        }
    }

    #[test]
    fn individual_and_central_report_counts() {
        let plan = Architecture::desk().plan().unwrap();
        let data = clients(&plan, &[10, 14, 6]);
        let c = cfg();
        let ind = run_training(Mode::Individual, &c, &plan, &data, None).unwrap();
        assert_eq!(ind.models.len(), 3);
        assert_ne!(ind.models[0].1, ind.models[1].1);
        assert_eq!(ind.reports.len(), 3 * c.rounds);
        let cen = run_training(Mode::Central, &c, &plan, &data, None).unwrap();
        assert_eq!(cen.reports.len(), c.rounds);
        assert_eq!(cen.reports[0].cohort, vec![0, 1, 2]);
    }

    #[test]
    fn parallel_workers_do_not_change_results() {
        let plan = Architecture::desk().plan().unwrap();
        let data = clients(&plan, &[10, 14, 6, 9]);
        let seq = run_training(Mode::FedAdam, &cfg(), &plan, &data, None).unwrap();
        let par = run_training(Mode::FedAdam, &TrainConfig { workers: 3, ..cfg() }, &plan, &data, None).unwrap();
        assert_eq!(seq.global(), par.global());
        assert_eq!(seq.reports, par.reports);
    }

    #[test]
    fn drop_on_failure_excludes_the_failed_client() {
        let plan = Architecture::desk().plan().unwrap();
        let data = clients(&plan, &[10, 12]);
        let c = TrainConfig {
            cohort_fraction: 1.0,
            client_lr: 1e300,
            drop_on_failure: false,
            ..cfg()
        };
        assert!(run_training(Mode::FedAvg, &c, &plan, &data, None).is_err());
    }

    #[test]
    fn metrics_csv_columns() {
        let r = RoundReport {
            round: 3,
            mode: Mode::FedAdam,
            cohort: vec![0, 2, 5],
            lr: 1e-5,
            train_loss_mean: 0.5,
            train_loss_min: 0.25,
            train_loss_max: 1.0,
            test_loss: None,
            mae_deg: Some(9.5),
        };
        let mut buf = Vec::new();
        write_metrics(&mut buf, &[r]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "round,mode,cohort,lr,train_loss_mean,train_loss_min,train_loss_max,test_loss,mae_deg"
        );
        assert_eq!(lines.next().unwrap(), "3,fedadam,0;2;5,0.00001,0.5,0.25,1,,9.5");
    }

    #[test]
    fn checkpoint_round_trip() {
        let ck = Checkpoint {
            mode: Mode::FedAdam,
            round: 200,
            seed: 42,
            config_hash: "abc123".into(),
            architecture: "desk".into(),
            participant: Some(4),
            params: ParamVector(vec![0.5f32, -1.25, 3.0]),
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert!(buf.starts_with(b"GZFL-CHECKPOINT 1\nmode=fedadam\n"));
        assert_eq!(Checkpoint::<f32>::read_from(&buf[..]).unwrap(), ck);
        assert!(Checkpoint::<f32>::read_from(&b"nope\n\n"[..]).is_err());
    }
}
