//! Client-side SGD with Nesterov momentum, step-decay schedules, and the
//! server-side aggregation rules: FedAvg and pseudo-gradient Adam.

use crate::data::ParticipantId;
use crate::error::{Error, Result};
use crate::model::{ParamLayout, ParamVector};
use crate::tensor::Real;

fn non_finite(values: &[impl Real], layout: Option<&ParamLayout>, what: &str) -> Result<()> {
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        let location = match layout.and_then(|l| l.name_of(index)) {
            Some(layer) => format!("{what} of {layer}"),
            None => what.to_string(),
        };
        return Err(Error::NonFinite { location, index });
    }
    Ok(())
}

/// SGD with Nesterov momentum:
/// `v ← γ·v + η·∇J(θ − γ·v)`, `θ ← θ − v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdNesterov<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: ParamVector<T>,
    lookahead: ParamVector<T>,
    grad: ParamVector<T>,
    layout: Option<ParamLayout>,
}

impl<T: Real> SgdNesterov<T> {
    pub fn new(len: usize, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid("sgd", format!("learning rate {lr} must be ≥ 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("sgd", format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: ParamVector::zeros(len),
            lookahead: ParamVector::zeros(len),
            grad: ParamVector::zeros(len),
            layout: None,
        })
    }

    /// Names offending layers in non-finite gradient errors.
    pub fn with_layout(mut self, layout: ParamLayout) -> Self {
        self.layout = Some(layout);
        self
    }

    pub fn velocity(&self) -> &ParamVector<T> {
        &self.velocity
    }

    pub fn reset(&mut self) {
        self.velocity.fill(T::zero());
    }

    /// One update. `grad_fn` receives the lookahead point and writes the
    /// gradient there; its return value is passed through.
    pub fn step<R, F>(&mut self, params: &mut [T], mut grad_fn: F) -> Result<R>
    where
        F: FnMut(&[T], &mut [T]) -> Result<R>,
    {
        if params.len() != self.velocity.len() {
            return Err(Error::Shape {
                op: "sgd step",
                left: vec![self.velocity.len()],
                right: vec![params.len()],
            });
        }
        let gamma = T::of(self.momentum);
        let eta = T::of(self.lr);
        for ((l, &p), &v) in self.lookahead.iter_mut().zip(params.iter()).zip(self.velocity.iter()) {
            *l = p - gamma * v;
        }
        let out = grad_fn(&self.lookahead, &mut self.grad)?;
        non_finite(&self.grad, self.layout.as_ref(), "gradient")?;
        for ((p, v), &g) in params.iter_mut().zip(self.velocity.iter_mut()).zip(self.grad.iter()) {
            *v = gamma * *v + eta * g;
            *p -= *v;
        }
        Ok(out)
    }
}

/// Step decay: `base · factor^(number of milestones ≤ round)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    base: f64,
    decay: f64,
    milestones: Vec<usize>,
}

impl LrSchedule {
    pub fn new(base: f64, decay: f64, milestones: Vec<usize>) -> Result<Self> {
        if !(base >= 0.0 && base.is_finite()) {
            return Err(Error::invalid("lr schedule", format!("base lr {base} must be ≥ 0")));
        }
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::invalid("lr schedule", format!("decay {decay} outside (0, 1]")));
        }
        if milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("lr schedule", "milestones must be strictly increasing"));
        }
        Ok(Self {
            base,
            decay,
            milestones,
        })
    }

    pub fn constant(base: f64) -> Result<Self> {
        Self::new(base, 1.0, Vec::new())
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn lr_at(&self, round: usize) -> f64 {
        let passed = self.milestones.iter().take_while(|&&m| m <= round).count();
        self.base * self.decay.powi(passed as i32)
    }
}

/// How client contributions are weighted during aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// `n_i / Σ n_j`.
    #[default]
    Samples,
    /// `1 / k` over the `k` contributions.
    Uniform,
}

/// One client's model together with the number of samples behind it.
#[derive(Debug, Clone, Copy)]
pub struct WeightedParams<'a, T> {
    pub client: ParticipantId,
    pub params: &'a [T],
    pub samples: usize,
}

/// Weighted mean in f64, accumulated in client-id order as an offset from the
/// first client's parameters (so identical inputs average exactly).
fn weighted_mean<T: Real>(updates: &[WeightedParams<'_, T>], weighting: Weighting) -> Result<Vec<f64>> {
    let Some(first) = updates.first() else {
        return Err(Error::invalid("aggregate", "no client updates"));
    };
    let len = first.params.len();
    if let Some(bad) = updates.iter().find(|u| u.params.len() != len) {
        return Err(Error::Shape {
            op: "aggregate",
            left: vec![len],
            right: vec![bad.params.len()],
        });
    }
    if let Some(bad) = updates.iter().find(|u| u.samples == 0) {
        return Err(Error::invalid(
            "aggregate",
            format!("client {} reported zero samples", bad.client),
        ));
    }
    let mut sorted: Vec<&WeightedParams<'_, T>> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client);
    let total: f64 = match weighting {
        Weighting::Samples => sorted.iter().map(|u| u.samples as f64).sum(),
        Weighting::Uniform => sorted.len() as f64,
    };
    let anchor = sorted[0].params;
    let mut acc: Vec<f64> = anchor.iter().map(|v| v.as_f64()).collect();
    for u in &sorted[1..] {
        let w = match weighting {
            Weighting::Samples => u.samples as f64 / total,
            Weighting::Uniform => 1.0 / total,
        };
        for ((a, p), base) in acc.iter_mut().zip(u.params).zip(anchor) {
            *a += w * (p.as_f64() - base.as_f64());
        }
    }
    // rounding must not leave the convex hull of the inputs
    for (j, a) in acc.iter_mut().enumerate() {
        let (lo, hi) = sorted.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), u| {
            let v = u.params[j].as_f64();
            (lo.min(v), hi.max(v))
        });
        *a = a.clamp(lo, hi);
    }
    Ok(acc)
}

/// FedAvg: `Σ wᵢ·θᵢ` over the client models.
pub fn fedavg_aggregate<T: Real>(
    updates: &[WeightedParams<'_, T>],
    weighting: Weighting,
) -> Result<ParamVector<T>> {
    Ok(ParamVector(
        weighted_mean(updates, weighting)?
            .into_iter()
            .map(T::of)
            .collect(),
    ))
}

/// Pseudo-gradient `Σ wᵢ·(θ_server − θᵢ)`, i.e. the server parameters minus
/// the FedAvg of the client models. Descending it moves the server toward
/// the clients.
pub fn pseudo_gradient<T: Real>(
    server: &[T],
    updates: &[WeightedParams<'_, T>],
    weighting: Weighting,
) -> Result<ParamVector<T>> {
    let mean = weighted_mean(updates, weighting)?;
    if mean.len() != server.len() {
        return Err(Error::Shape {
            op: "pseudo_gradient",
            left: vec![server.len()],
            right: vec![mean.len()],
        });
    }
    Ok(ParamVector(
        server
            .iter()
            .zip(&mean)
            .map(|(s, m)| T::of(s.as_f64() - m))
            .collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("adam", format!("invalid hyperparameters {self:?}")))
        }
    }
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    m: ParamVector<T>,
    u: ParamVector<T>,
    t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            m: ParamVector::zeros(len),
            u: ParamVector::zeros(len),
            t: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &ParamVector<T> {
        &self.m
    }

    pub fn second_moment(&self) -> &ParamVector<T> {
        &self.u
    }

    /// `θ ← θ − η·m̂ / (√û + ε)` with bias-corrected moments.
    pub fn step(&mut self, params: &mut [T], grad: &[T]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape {
                op: "adam step",
                left: vec![self.m.len()],
                right: vec![params.len(), grad.len()],
            });
        }
        non_finite(grad, None, "pseudo-gradient")?;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, m), u), &g) in params
            .iter_mut()
            .zip(self.m.iter_mut())
            .zip(self.u.iter_mut())
            .zip(grad)
        {
            let g = g.as_f64();
            let m_new = beta1 * m.as_f64() + (1.0 - beta1) * g;
            let u_new = beta2 * u.as_f64() + (1.0 - beta2) * g * g;
            *m = T::of(m_new);
            *u = T::of(u_new);
            let step = lr * (m_new / bc1) / ((u_new / bc2).sqrt() + eps);
            *p = T::of(p.as_f64() - step);
        }
        Ok(())
    }
}
