//! Person-specific and person-independent (leave-one-out) evaluation,
//! fairness extremes, and the noisy-participant robustness sweep.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{derive_seed, inject_noise, ParticipantDataset, ParticipantId};
use crate::error::{Error, Result};
use crate::federation::{run_training, ClientData, Mode, RoundReport, TrainConfig, TrainingOutcome};
use crate::model::{angular_error_deg, GazeNet, GazePrediction, ParamVector, Plan, Predictor, Prepared};
use crate::tensor::Real;

const STREAM_NOISE: u64 = 0x4015E;
const STREAM_NOISY_PICK: u64 = 0x91C4;

/// One participant's data in network form.
#[derive(Debug, Clone)]
pub struct PreparedParticipant<T> {
    pub id: ParticipantId,
    pub train: Arc<Prepared<T>>,
    pub val: Option<Arc<Prepared<T>>>,
    pub all: Arc<Prepared<T>>,
    pub availability: f64,
}

/// A federation with every participant split and prepared once.
#[derive(Debug, Clone)]
pub struct PreparedFederation<T> {
    plan: Arc<Plan>,
    participants: Vec<PreparedParticipant<T>>,
}

impl<T: Real> PreparedFederation<T> {
    /// Splits each participant `1 − val_fraction` / `val_fraction`. With
    /// `val_fraction = 0` there are no validation splits.
    pub fn new(plan: Arc<Plan>, datasets: &[ParticipantDataset], val_fraction: f64, seed: u64) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::invalid("federation", "no participants"));
        }
        let mut sorted: Vec<&ParticipantDataset> = datasets.iter().collect();
        sorted.sort_by_key(|d| d.id);
        if let Some(w) = sorted.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::invalid("federation", format!("duplicate participant id {}", w[0].id)));
        }
        let participants = sorted
            .into_iter()
            .map(|ds| {
                let (train_idx, val_idx) = ds.split(val_fraction, seed)?;
                let prep = |idx: &[usize]| Prepared::new(&plan, &ds.select(idx)).map(Arc::new);
                Ok(PreparedParticipant {
                    id: ds.id,
                    train: prep(&train_idx)?,
                    val: if val_idx.is_empty() { None } else { Some(prep(&val_idx)?) },
                    all: Arc::new(Prepared::new(&plan, &ds.samples)?),
                    availability: 1.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { plan, participants })
    }

    /// Availability weights, in participant-id order.
    pub fn with_availability(mut self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.participants.len() || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("federation", "availability weights must be one non-negative value per participant"));
        }
        for (p, &w) in self.participants.iter_mut().zip(weights) {
            p.availability = w;
        }
        Ok(self)
    }

    pub fn plan(&self) -> &Arc<Plan> {
        &self.plan
    }

    pub fn participants(&self) -> &[PreparedParticipant<T>] {
        &self.participants
    }

    pub fn ids(&self) -> Vec<ParticipantId> {
        self.participants.iter().map(|p| p.id).collect()
    }

    pub fn get(&self, id: ParticipantId) -> Result<&PreparedParticipant<T>> {
        self.participants
            .iter()
            .find(|p| p.id == id)
            .ok_or(Error::UnknownParticipant(id))
    }

    /// Training splits of every participant except `exclude`.
    pub fn clients(&self, exclude: Option<ParticipantId>) -> Vec<ClientData<T>> {
        self.participants
            .iter()
            .filter(|p| Some(p.id) != exclude)
            .map(|p| ClientData {
                id: p.id,
                train: Arc::clone(&p.train),
                availability: p.availability,
            })
            .collect()
    }
}

/// Per-participant mean angular errors with their mean and extremes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub mode: Mode,
    pub per_participant: Vec<(ParticipantId, f64)>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl EvalResult {
    pub fn new(mode: Mode, mut per_participant: Vec<(ParticipantId, f64)>) -> Result<Self> {
        if per_participant.is_empty() {
            return Err(Error::invalid("eval", "no participants evaluated"));
        }
        per_participant.sort_by_key(|&(id, _)| id);
        let errors = per_participant.iter().map(|&(_, e)| e);
        let mean = errors.clone().sum::<f64>() / per_participant.len() as f64;
        let min = errors.clone().fold(f64::INFINITY, f64::min);
        let max = errors.fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            mode,
            per_participant,
            mean: mean.clamp(min, max),
            min,
            max,
        })
    }

    /// One row per participant: `mode,protocol,participant,error_deg`.
    pub fn write_csv<W: Write>(&self, w: W, protocol: &str) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["mode", "protocol", "participant", "error_deg"])?;
        for (id, e) in &self.per_participant {
            out.write_record(&[self.mode.to_string(), protocol.to_string(), id.to_string(), e.to_string()])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, w: W, protocol: &str) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["mode", "protocol", "participants", "mean_deg", "min_deg", "max_deg"])?;
        out.write_record(&[
            self.mode.to_string(),
            protocol.to_string(),
            self.per_participant.len().to_string(),
            self.mean.to_string(),
            self.min.to_string(),
            self.max.to_string(),
        ])?;
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Mean angular error of `preds` against the targets of `data`, in degrees.
pub fn mean_angular_error<T: Real>(preds: &[GazePrediction], data: &Prepared<T>) -> Result<f64> {
    if preds.len() != data.len() || preds.is_empty() {
        return Err(Error::Shape {
            op: "mean_angular_error",
            left: vec![data.len()],
            right: vec![preds.len()],
        });
    }
    let total: f64 = preds
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let t = data.target(i);
            angular_error_deg(p, GazePrediction::new(t[0].as_f64(), t[1].as_f64()))
        })
        .sum();
    Ok(total / preds.len() as f64)
}

/// Models under evaluation: one global model, or one per participant.
pub enum ModelSet<'a, T> {
    Shared(&'a dyn Predictor<T>),
    PerParticipant(BTreeMap<ParticipantId, &'a dyn Predictor<T>>),
}

impl<'a, T: Real> ModelSet<'a, T> {
    fn get(&self, id: ParticipantId) -> Result<&'a dyn Predictor<T>> {
        match self {
            ModelSet::Shared(m) => Ok(*m),
            ModelSet::PerParticipant(map) => map.get(&id).copied().ok_or(Error::UnknownParticipant(id)),
        }
    }
}

/// Each participant's error on its own validation split.
pub fn eval_person_specific<T: Real>(
    models: &ModelSet<'_, T>,
    federation: &PreparedFederation<T>,
    mode: Mode,
) -> Result<EvalResult> {
    let rows = federation
        .participants()
        .iter()
        .map(|p| {
            let val = p.val.as_ref().ok_or(Error::MissingValidation(p.id))?;
            let preds = models.get(p.id)?.predict(val)?;
            Ok((p.id, mean_angular_error(&preds, val)?))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalResult::new(mode, rows)
}

/// Trains on every participant except `held_out` and returns the mean error
/// on all of the held-out participant's samples.
pub fn eval_person_independent<T, P, F>(
    train_fn: F,
    federation: &PreparedFederation<T>,
    held_out: ParticipantId,
) -> Result<f64>
where
    T: Real,
    P: Predictor<T>,
    F: FnOnce(&[ClientData<T>]) -> Result<P>,
{
    if federation.participants().len() < 2 {
        return Err(Error::invalid("eval_person_independent", "needs at least two participants"));
    }
    let test = Arc::clone(&federation.get(held_out)?.all);
    let model = train_fn(&federation.clients(Some(held_out)))?;
    mean_angular_error(&model.predict(&test)?, &test)
}

/// One leave-one-out leg of a training run.
#[derive(Debug, Clone)]
pub struct LooLeg<T> {
    pub held_out: ParticipantId,
    pub error_deg: f64,
    pub outcome: TrainingOutcome<T>,
}

impl<T> LooLeg<T> {
    /// Held-out error after each round.
    pub fn error_curve(&self) -> Vec<f64> {
        self.outcome.reports.iter().filter_map(|r| r.mae_deg).collect()
    }
}

/// Trains `mode` without `held_out` and scores the final global model on
/// the whole held-out participant. Per-round reports carry the held-out
/// error of each round's global model.
pub fn train_leave_one_out<T: Real>(
    mode: Mode,
    cfg: &TrainConfig,
    federation: &PreparedFederation<T>,
    held_out: ParticipantId,
) -> Result<LooLeg<T>> {
    train_leave_one_out_on(mode, cfg, federation, federation, held_out)
}

/// As [`train_leave_one_out`], with clients drawn from `train` and the
/// held-out participant taken from `test`. Both must hold the same ids.
pub fn train_leave_one_out_on<T: Real>(
    mode: Mode,
    cfg: &TrainConfig,
    train: &PreparedFederation<T>,
    test: &PreparedFederation<T>,
    held_out: ParticipantId,
) -> Result<LooLeg<T>> {
    if mode == Mode::Individual {
        return Err(Error::Config(
            "person-independent evaluation needs a global model (central, fedavg or fedadam)".into(),
        ));
    }
    if train.ids() != test.ids() {
        return Err(Error::invalid("leave-one-out", "train and test federations differ in participants"));
    }
    let plan = Arc::clone(train.plan());
    let held = Arc::clone(&test.get(held_out)?.all);
    let clients = train.clients(Some(held_out));
    if clients.is_empty() {
        return Err(Error::invalid("leave-one-out", "needs at least two participants"));
    }
    let outcome = run_training(mode, cfg, &plan, &clients, Some(&held))?;
    let net = GazeNet::from_params(plan, outcome.global().expect("global mode yields one model").clone())?;
    let error_deg = mean_angular_error(&net.predict(&held)?, &held)?;
    Ok(LooLeg {
        held_out,
        error_deg,
        outcome,
    })
}

/// Leave-one-out legs for `held_out` (every participant when `None`).
pub fn leave_one_out_sweep<T: Real>(
    mode: Mode,
    cfg: &TrainConfig,
    federation: &PreparedFederation<T>,
    held_out: Option<&[ParticipantId]>,
) -> Result<Vec<LooLeg<T>>> {
    leave_one_out_sweep_on(mode, cfg, federation, federation, held_out)
}

pub fn leave_one_out_sweep_on<T: Real>(
    mode: Mode,
    cfg: &TrainConfig,
    train: &PreparedFederation<T>,
    test: &PreparedFederation<T>,
    held_out: Option<&[ParticipantId]>,
) -> Result<Vec<LooLeg<T>>> {
    let ids = held_out.map(<[_]>::to_vec).unwrap_or_else(|| test.ids());
    ids.into_iter()
        .map(|id| train_leave_one_out_on(mode, cfg, train, test, id))
        .collect()
}

pub fn summarize_legs<T>(mode: Mode, legs: &[LooLeg<T>]) -> Result<EvalResult> {
    EvalResult::new(mode, legs.iter().map(|l| (l.held_out, l.error_deg)).collect())
}

fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Round-to-round oscillation: the population standard deviation of each
/// leg's held-out error over its last `window` rounds, averaged over legs.
pub fn oscillation<T>(legs: &[LooLeg<T>], window: usize) -> f64 {
    let per_leg: Vec<f64> = legs
        .iter()
        .map(|l| {
            let curve = l.error_curve();
            std_dev(&curve[curve.len().saturating_sub(window)..])
        })
        .collect();
    per_leg.iter().sum::<f64>() / per_leg.len().max(1) as f64
}

/// Mean held-out test loss per round, averaged over legs.
pub fn mean_test_loss_curve<T>(legs: &[LooLeg<T>]) -> Vec<f64> {
    let rounds = legs.iter().map(|l| l.outcome.reports.len()).min().unwrap_or(0);
    (0..rounds)
        .map(|r| {
            legs.iter()
                .map(|l| l.outcome.reports[r].test_loss.unwrap_or(f64::NAN))
                .sum::<f64>()
                / legs.len() as f64
        })
        .collect()
}

/// Convergence check over the final quarter of a loss curve: every value is
/// finite and the least-squares slope of its trailing `smooth`-round moving
/// average is not positive. Returns `(converged, slope)`.
pub fn final_quartile_trend(curve: &[f64], smooth: usize) -> (bool, f64) {
    if curve.is_empty() || curve.iter().any(|v| !v.is_finite()) {
        return (false, f64::NAN);
    }
    let smooth = smooth.max(1);
    let ma: Vec<f64> = (0..curve.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(smooth);
            curve[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect();
    let start = curve.len() - (curve.len() / 4).max(2).min(curve.len());
    let ys = &ma[start..];
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope <= 0.0, slope)
}

/// The `round(f·N)` (half up) participants made noisy at fraction `f`: a
/// seeded prefix of a shuffled id list, so larger fractions extend smaller ones.
pub fn noisy_participants(ids: &[ParticipantId], fraction: f64, seed: u64) -> Result<Vec<ParticipantId>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("noise fraction {fraction} outside [0, 1]")));
    }
    let mut order = ids.to_vec();
    order.sort_unstable();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_NOISY_PICK)));
    let k = ((fraction * ids.len() as f64 + 0.5).floor() as usize).min(ids.len());
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Copies of `datasets` with the listed participants' images noised.
pub fn with_noise(
    datasets: &[ParticipantDataset],
    noisy: &[ParticipantId],
    sigma: f64,
    seed: u64,
) -> Result<Vec<ParticipantDataset>> {
    datasets
        .iter()
        .map(|d| {
            if noisy.contains(&d.id) {
                inject_noise(d, sigma, derive_seed(derive_seed(seed, STREAM_NOISE), d.id as u64))
            } else {
                Ok(d.clone())
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessRow {
    pub fraction: f64,
    pub noisy: Vec<ParticipantId>,
    pub error_deg: f64,
    pub clean_error_deg: f64,
    pub converged: bool,
    pub final_quartile_slope: f64,
}

impl RobustnessRow {
    /// `(noisy − clean) / clean`.
    pub fn relative_change(&self) -> f64 {
        (self.error_deg - self.clean_error_deg) / self.clean_error_deg
    }
}

/// Settings of a robustness sweep besides the training config.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessConfig {
    pub fractions: Vec<f64>,
    pub sigma: f64,
    pub val_fraction: f64,
    pub held_out: Option<Vec<ParticipantId>>,
    /// Moving-average window for the convergence check.
    pub smooth: usize,
}

/// Legs of one sweep fraction.
#[derive(Debug, Clone)]
pub struct RobustnessRun<T> {
    pub row: RobustnessRow,
    pub legs: Vec<LooLeg<T>>,
}

/// For each fraction, noises that share of participants' training images
/// and reruns the fedadam leave-one-out protocol. Held-out participants are
/// always scored on clean images. Pass `clean` to reuse an existing clean run.
pub fn robustness_sweep<T: Real>(
    cfg: &TrainConfig,
    plan: Arc<Plan>,
    datasets: &[ParticipantDataset],
    rc: &RobustnessConfig,
    clean: Option<&[LooLeg<T>]>,
) -> Result<Vec<RobustnessRun<T>>> {
    let clean_fed = PreparedFederation::<T>::new(Arc::clone(&plan), datasets, rc.val_fraction, cfg.seed)?;
    let held: Vec<ParticipantId> = rc.held_out.clone().unwrap_or_else(|| clean_fed.ids());
    let clean_legs = match clean {
        Some(legs) => legs.to_vec(),
        None => leave_one_out_sweep(Mode::FedAdam, cfg, &clean_fed, Some(&held))?,
    };
    let clean_error = summarize_legs(Mode::FedAdam, &clean_legs)?.mean;
    let ids = clean_fed.ids();
    rc.fractions
        .iter()
        .map(|&f| {
            let noisy = noisy_participants(&ids, f, cfg.seed)?;
            let legs = if noisy.is_empty() {
                clean_legs.clone()
            } else {
                let noisy_sets = with_noise(datasets, &noisy, rc.sigma, cfg.seed)?;
                let noisy_fed = PreparedFederation::<T>::new(Arc::clone(&plan), &noisy_sets, rc.val_fraction, cfg.seed)?;
                leave_one_out_sweep_on(Mode::FedAdam, cfg, &noisy_fed, &clean_fed, Some(&held))?
            };
            let (converged, slope) = final_quartile_trend(&mean_test_loss_curve(&legs), rc.smooth);
            Ok(RobustnessRun {
                row: RobustnessRow {
                    fraction: f,
                    noisy,
                    error_deg: summarize_legs(Mode::FedAdam, &legs)?.mean,
                    clean_error_deg: clean_error,
                    converged,
                    final_quartile_slope: slope,
                },
                legs,
            })
        })
        .collect()
}

pub fn write_robustness_csv<W: Write>(w: W, rows: &[RobustnessRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "fraction",
        "noisy",
        "error_deg",
        "clean_error_deg",
        "relative_change",
        "converged",
        "final_quartile_slope",
    ])?;
    for r in rows {
        let noisy: Vec<String> = r.noisy.iter().map(|i| i.to_string()).collect();
        out.write_record(&[
            r.fraction.to_string(),
            noisy.join(";"),
            r.error_deg.to_string(),
            r.clean_error_deg.to_string(),
            r.relative_change().to_string(),
            r.converged.to_string(),
            r.final_quartile_slope.to_string(),
        ])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Writes the per-leg round reports of a sweep, one block per held-out id.
pub fn sweep_reports<T>(legs: &[LooLeg<T>]) -> Vec<(ParticipantId, &[RoundReport])> {
    legs.iter().map(|l| (l.held_out, l.outcome.reports.as_slice())).collect()
}

/// Wraps parameters as a predictor.
pub fn predictor<T: Real>(plan: &Arc<Plan>, params: &ParamVector<T>) -> Result<GazeNet<T>> {
    GazeNet::from_params(Arc::clone(plan), params.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_participant, GazeBox, SkewConfig};
    use crate::model::Architecture;

    /// Returns the ground truth it is shown.
    struct Oracle;

    impl<T: Real> Predictor<T> for Oracle {
        fn predict(&self, data: &Prepared<T>) -> Result<Vec<GazePrediction>> {
            Ok((0..data.len())
                .map(|i| GazePrediction::new(data.target(i)[0].as_f64(), data.target(i)[1].as_f64()))
                .collect())
        }
    }

    struct Zero;

    impl<T: Real> Predictor<T> for Zero {
        fn predict(&self, data: &Prepared<T>) -> Result<Vec<GazePrediction>> {
            Ok(vec![GazePrediction::new(0.0, 0.0); data.len()])
        }
    }

    fn datasets(n: usize) -> Vec<ParticipantDataset> {
        (0..n)
            .map(|i| {
                synth_participant(
                    &SkewConfig {
                        samples: 30 + 5 * i,
                        gaze_box: GazeBox::square(0.2 + 0.05 * i as f32),
                        seed: 8,
                        ..SkewConfig::default()
                    },
                    i as ParticipantId,
                )
            })
            .collect()
    }

    fn fed(n: usize) -> PreparedFederation<f64> {
        let plan = Arc::new(Architecture::desk().plan().unwrap());
        PreparedFederation::new(plan, &datasets(n), 0.1, 4).unwrap()
    }

    #[test]
    fn oracle_scores_zero() {
        let f = fed(3);
        let r = eval_person_specific(&ModelSet::Shared(&Oracle), &f, Mode::Central).unwrap();
        assert!(r.per_participant.iter().all(|&(_, e)| e == 0.0));
        assert_eq!((r.min, r.max, r.mean), (0.0, 0.0, 0.0));
        let e = eval_person_independent(|_| Ok(Oracle), &f, 1).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn summary_arithmetic() {
        let r = EvalResult::new(Mode::FedAvg, vec![(2, 10.0), (0, 8.0), (1, 9.0)]).unwrap();
        assert_eq!((r.mean, r.min, r.max), (9.0, 8.0, 10.0));
        assert_eq!(r.per_participant[0], (0, 8.0));
    }

    #[test]
    fn zero_predictor_matches_brute_force() {
        let f = fed(2);
        let r = eval_person_specific(&ModelSet::Shared(&Zero), &f, Mode::Central).unwrap();
        for (p, &(id, err)) in f.participants().iter().zip(&r.per_participant) {
            assert_eq!(p.id, id);
            let val = p.val.as_ref().unwrap();
            // angle between (0,0,-1) and the label direction
            let brute = (0..val.len())
                .map(|i| {
                    let (y, pt) = (val.target(i)[0], val.target(i)[1]);
                    (pt.cos() * y.cos()).clamp(-1.0, 1.0).acos().to_degrees()
                })
                .sum::<f64>()
                / val.len() as f64;
            assert!((err - brute).abs() < 1e-9, "{err} vs {brute}");
        }
    }

    #[test]
    fn missing_validation_is_an_error() {
        let plan = Arc::new(Architecture::desk().plan().unwrap());
        let f = PreparedFederation::<f64>::new(plan, &datasets(2), 0.0, 1).unwrap();
        assert!(matches!(
            eval_person_specific(&ModelSet::Shared(&Oracle), &f, Mode::Central),
            Err(Error::MissingValidation(0))
        ));
    }

    #[test]
    fn per_participant_models_and_unknown_ids() {
        let f = fed(2);
        let mut map: BTreeMap<ParticipantId, &dyn Predictor<f64>> = BTreeMap::new();
        map.insert(0, &Oracle);
        map.insert(1, &Zero);
        let r = eval_person_specific(&ModelSet::PerParticipant(map), &f, Mode::Individual).unwrap();
        assert_eq!(r.per_participant[0].1, 0.0);
        assert!(r.per_participant[1].1 > 0.0);
        assert!(matches!(
            eval_person_independent(|_| Ok(Oracle), &f, 9),
            Err(Error::UnknownParticipant(9))
        ));
    }

    #[test]
    fn participant_order_does_not_matter() {
        let plan = Arc::new(Architecture::desk().plan().unwrap());
        let mut ds = datasets(3);
        let a = PreparedFederation::<f64>::new(Arc::clone(&plan), &ds, 0.1, 4).unwrap();
        ds.reverse();
        let b = PreparedFederation::<f64>::new(plan, &ds, 0.1, 4).unwrap();
        let ra = eval_person_specific(&ModelSet::Shared(&Zero), &a, Mode::Central).unwrap();
        let rb = eval_person_specific(&ModelSet::Shared(&Zero), &b, Mode::Central).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn sweep_has_one_row_per_participant() {
        let f = fed(3);
        let cfg = TrainConfig {
            rounds: 2,
            batch_size: 16,
            client_lr: 1e-3,
            ..TrainConfig::default()
        };
        let legs = leave_one_out_sweep(Mode::FedAvg, &cfg, &f, None).unwrap();
        let r = summarize_legs(Mode::FedAvg, &legs).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf, "leave-one-out").unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
        for l in &legs {
            assert_eq!(l.error_curve().len(), 2);
            assert_eq!(*l.error_curve().last().unwrap(), l.error_deg);
        }
        assert!(train_leave_one_out(Mode::Individual, &cfg, &f, 0).is_err());
    }

    #[test]
    fn noisy_selection() {
        let ids: Vec<ParticipantId> = (0..15).collect();
        assert!(noisy_participants(&ids, 0.0, 1).unwrap().is_empty());
        assert_eq!(noisy_participants(&ids, 0.7, 1).unwrap().len(), 11);
        assert_eq!(noisy_participants(&ids, 1.0, 1).unwrap(), ids);
        let small = noisy_participants(&ids, 0.3, 1).unwrap();
        let big = noisy_participants(&ids, 0.7, 1).unwrap();
        assert!(small.iter().all(|i| big.contains(i)));
        assert!(noisy_participants(&ids, 1.5, 1).is_err());
    }

    #[test]
    fn trend_detection() {
        let falling: Vec<f64> = (0..100).map(|i| 1.0 / (1.0 + i as f64)).collect();
        assert!(final_quartile_trend(&falling, 5).0);
        let rising: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert!(!final_quartile_trend(&rising, 5).0);
        assert!(!final_quartile_trend(&[1.0, f64::NAN, 0.5, 0.4], 1).0);
    }

    #[test]
    fn robustness_rows_and_zero_fraction_identity() {
        let plan = Arc::new(Architecture::desk().plan().unwrap());
        let ds = datasets(3);
        let cfg = TrainConfig {
            rounds: 4,
            batch_size: 16,
            client_lr: 1e-3,
            ..TrainConfig::default()
        };
        let rc = RobustnessConfig {
            fractions: vec![0.0, 0.3, 0.7],
            sigma: 0.5,
            val_fraction: 0.1,
            held_out: None,
            smooth: 1,
        };
        let runs = robustness_sweep::<f64>(&cfg, plan, &ds, &rc, None).unwrap();
        assert_eq!(runs.len(), 3);
        assert_eq!(runs[0].row.error_deg, runs[0].row.clean_error_deg);
        assert_eq!(runs[2].row.noisy.len(), 2);
        let mut buf = Vec::new();
        write_robustness_csv(&mut buf, &runs.iter().map(|r| r.row.clone()).collect::<Vec<_>>()).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }
}
