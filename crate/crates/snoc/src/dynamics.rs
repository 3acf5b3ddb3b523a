//! System models, disturbance sampling, and closed-loop simulation.
//!
//! A rollout couples three things: a known discrete-time model
//! `x_{t+1} = f(x_t, u_t) + w_{t+1}`, a disturbance sequence
//! `w = (w_0, …, w_T)` (with `w_0` perturbing the initial state), and a
//! feedback policy producing `u_t` from the trajectory so far. Rollouts are
//! generic over [`Scalar`], so the exact same code path produces plain
//! trajectories and recorded ones for gradient computation.
//!
//! Disturbances are sampled per sequence from independent RNG substreams of
//! a master seed, which makes datasets reproducible and order-independent,
//! and they round-trip losslessly through a plain CSV format.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::rng::substream_rng;

/// Parameters of the two-robot point-mass model.
///
/// Each robot is a planar double integrator with state `[px, py, vx, vy]`
/// and force input `[fx, fy]`; full state and input stack the robots in
/// order. Dynamics per axis combine linear and quadratic drag with a
/// proportional prestabilizing pull toward the robot's target:
///
/// ```text
/// p' = p + dt v
/// v' = v + (dt / mass) (kp (p* - p) - c1 v - c2 |v| v + f)
/// ```
///
/// The prestabilizing term is part of the known model, so policies can
/// reconstruct disturbances exactly; the learned input `f` acts on top of
/// it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotParams {
    pub mass: f64,
    /// Linear drag coefficient.
    pub c1: f64,
    /// Quadratic drag coefficient.
    pub c2: f64,
    /// Prestabilizing proportional gain toward the target.
    pub kp: f64,
    /// Euler integration step.
    pub dt: f64,
    /// Nominal initial position of each robot.
    pub starts: Vec<[f64; 2]>,
    /// Target position of each robot.
    pub targets: Vec<[f64; 2]>,
}

impl RobotParams {
    pub fn n_robots(&self) -> usize {
        self.starts.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.starts.is_empty() {
            return Err(Error::Config("robot model needs at least one robot".into()));
        }
        if self.starts.len() != self.targets.len() {
            return Err(Error::Config(format!(
                "robot model has {} starts but {} targets",
                self.starts.len(),
                self.targets.len()
            )));
        }
        if ![self.mass, self.dt].iter().all(|v| *v > 0.0) {
            return Err(Error::Config("robot mass and dt must be positive".into()));
        }
        if self.c1 < 0.0 || self.c2 < 0.0 || self.kp < 0.0 {
            return Err(Error::Config("robot drag and gain coefficients must be non-negative".into()));
        }
        Ok(())
    }

    fn step<S: Scalar>(&self, x: &[S], u: &[S]) -> Vec<S> {
        let mut next = Vec::with_capacity(x.len());
        for (i, target) in self.targets.iter().enumerate() {
            let mut vel_next = [x[4 * i]; 2];
            for axis in 0..2 {
                let p = x[4 * i + axis];
                let v = x[4 * i + 2 + axis];
                let f = u[2 * i + axis];
                let pull = (-p).shift(target[axis]).scale(self.kp);
                let drag = v.scale(-self.c1) - (v.abs() * v).scale(self.c2);
                let accel = (pull + drag + f).scale(1.0 / self.mass);
                next.push(p + v.scale(self.dt));
                vel_next[axis] = v + accel.scale(self.dt);
            }
            next.extend_from_slice(&vel_next);
        }
        next
    }
}

/// Position of robot `i` inside a stacked state vector.
pub fn robot_position<S: Scalar>(x: &[S], i: usize) -> [S; 2] {
    [x[4 * i], x[4 * i + 1]]
}

/// Velocity of robot `i` inside a stacked state vector.
pub fn robot_velocity<S: Scalar>(x: &[S], i: usize) -> [S; 2] {
    [x[4 * i + 2], x[4 * i + 3]]
}

/// A known discrete-time system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemModel {
    /// Scalar linear system `x' = a x + b u` started at `xbar`.
    ScalarLti { a: f64, b: f64, xbar: f64 },
    /// Two (or more) prestabilized planar robots.
    Robots(RobotParams),
}

impl SystemModel {
    pub fn state_dim(&self) -> usize {
        match self {
            SystemModel::ScalarLti { .. } => 1,
            SystemModel::Robots(p) => 4 * p.n_robots(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            SystemModel::ScalarLti { .. } => 1,
            SystemModel::Robots(p) => 2 * p.n_robots(),
        }
    }

    /// Nominal initial state before the `w_0` perturbation.
    pub fn initial_state(&self) -> Vec<f64> {
        match self {
            SystemModel::ScalarLti { xbar, .. } => vec![*xbar],
            SystemModel::Robots(p) => {
                let mut x = Vec::with_capacity(4 * p.n_robots());
                for s in &p.starts {
                    x.extend_from_slice(&[s[0], s[1], 0.0, 0.0]);
                }
                x
            }
        }
    }

    /// Noise-free transition `f(x_t, u_t)`.
    pub fn step<S: Scalar>(&self, _t: usize, x: &[S], u: &[S]) -> Vec<S> {
        debug_assert_eq!(x.len(), self.state_dim());
        debug_assert_eq!(u.len(), self.input_dim());
        match self {
            SystemModel::ScalarLti { a, b, .. } => vec![x[0].scale(*a) + u[0].scale(*b)],
            SystemModel::Robots(p) => p.step(x, u),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SystemModel::ScalarLti { a, b, xbar } => {
                if !(a.is_finite() && b.is_finite() && xbar.is_finite()) {
                    return Err(Error::Config("scalar system coefficients must be finite".into()));
                }
                Ok(())
            }
            SystemModel::Robots(p) => p.validate(),
        }
    }
}

/// Distribution of the disturbance at one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepNoise {
    /// Identically zero disturbance of the given dimension.
    Zero { dim: usize },
    /// Independent Gaussian components; a zero standard deviation pins the
    /// component to its mean.
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
}

impl StepNoise {
    pub fn dim(&self) -> usize {
        match self {
            StepNoise::Zero { dim } => *dim,
            StepNoise::Gaussian { mean, .. } => mean.len(),
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            StepNoise::Zero { dim } => vec![0.0; *dim],
            StepNoise::Gaussian { mean, std } => mean
                .iter()
                .zip(std)
                .map(|(&m, &s)| {
                    if s == 0.0 {
                        m
                    } else {
                        Normal::new(m, s).expect("validated std").sample(rng)
                    }
                })
                .collect(),
        }
    }
}

/// Disturbance distribution over a whole horizon: one [`StepNoise`] per
/// step, index 0 perturbing the initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    steps: Vec<StepNoise>,
}

impl NoiseModel {
    /// Build from per-step distributions. All steps must share one
    /// dimension and at least the initial step must be present.
    pub fn new(steps: Vec<StepNoise>) -> Result<Self> {
        let first = steps
            .first()
            .ok_or_else(|| Error::Config("noise model needs at least the initial step".into()))?;
        let dim = first.dim();
        if dim == 0 {
            return Err(Error::Config("noise dimension must be positive".into()));
        }
        for (t, s) in steps.iter().enumerate() {
            if s.dim() != dim {
                return Err(Error::Config(format!(
                    "noise step {t} has dimension {} but step 0 has {dim}",
                    s.dim()
                )));
            }
            if let StepNoise::Gaussian { mean, std } = s {
                if mean.len() != std.len() {
                    return Err(Error::Config(format!("noise step {t}: mean/std length mismatch")));
                }
                if std.iter().any(|v| !(v.is_finite() && *v >= 0.0))
                    || mean.iter().any(|v| !v.is_finite())
                {
                    return Err(Error::Config(format!(
                        "noise step {t}: std must be finite and non-negative, mean finite"
                    )));
                }
            }
        }
        Ok(Self { steps })
    }

    /// Horizon `T` (the model covers steps `0..=T`).
    pub fn horizon(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.steps[0].dim()
    }

    /// Draw one full disturbance sequence.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        self.steps.iter().map(|s| s.sample(rng)).collect()
    }
}

/// A sampled set of disturbance sequences with its provenance seed.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDataset {
    pub dim: usize,
    pub horizon: usize,
    pub seed: u64,
    /// `sequences[i][t]` is the disturbance vector at step `t` of
    /// sequence `i`.
    pub sequences: Vec<Vec<Vec<f64>>>,
}

/// Sample `count` independent disturbance sequences.
///
/// Sequence `i` draws from RNG substream `i` of `derive_seed(seed, domain)`,
/// so each sequence is reproducible in isolation and the dataset does not
/// depend on sampling order.
pub fn generate_dataset(model: &NoiseModel, count: usize, seed: u64, domain: &str) -> NoiseDataset {
    let sequences = (0..count)
        .map(|i| model.sample(&mut substream_rng(seed, domain, i as u64)))
        .collect();
    NoiseDataset {
        dim: model.dim(),
        horizon: model.horizon(),
        seed,
        sequences,
    }
}

impl NoiseDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Serialize as CSV: a fixed header naming the metadata, one metadata
    /// row, then one row per sequence with `(horizon + 1) * dim` values in
    /// step-major order. Values use the shortest round-tripping decimal
    /// form, so reading back reproduces every bit.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dim,horizon,sequences,seed\n");
        let _ = writeln!(out, "{},{},{},{}", self.dim, self.horizon, self.sequences.len(), self.seed);
        for seq in &self.sequences {
            let mut first = true;
            for step in seq {
                for v in step {
                    if !first {
                        out.push(',');
                    }
                    let _ = write!(out, "{v}");
                    first = false;
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default().trim();
        if header != "dim,horizon,sequences,seed" {
            return Err(Error::Parse(format!(
                "dataset header must be 'dim,horizon,sequences,seed', got '{header}'"
            )));
        }
        let meta_line = lines
            .next()
            .ok_or_else(|| Error::Parse("dataset is missing its metadata row".into()))?;
        let meta: Vec<&str> = meta_line.trim().split(',').collect();
        if meta.len() != 4 {
            return Err(Error::Parse(format!("metadata row needs 4 fields, got {}", meta.len())));
        }
        let parse_int = |s: &str, what: &str| -> Result<u64> {
            s.parse::<u64>().map_err(|_| Error::Parse(format!("invalid {what}: '{s}'")))
        };
        let dim = parse_int(meta[0], "dim")? as usize;
        let horizon = parse_int(meta[1], "horizon")? as usize;
        let count = parse_int(meta[2], "sequence count")? as usize;
        let seed = parse_int(meta[3], "seed")?;
        if dim == 0 {
            return Err(Error::Parse("dataset dim must be positive".into()));
        }
        let per_row = (horizon + 1) * dim;
        let mut sequences = Vec::with_capacity(count);
        for (row_idx, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let values: Vec<f64> = line
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Parse(format!("sequence {row_idx}: invalid value '{s}'")))
                })
                .collect::<Result<_>>()?;
            if values.len() != per_row {
                return Err(Error::Parse(format!(
                    "sequence {row_idx} has {} values, expected {per_row}",
                    values.len()
                )));
            }
            sequences.push(values.chunks(dim).map(<[f64]>::to_vec).collect());
        }
        if sequences.len() != count {
            return Err(Error::Parse(format!(
                "dataset declares {count} sequences but contains {}",
                sequences.len()
            )));
        }
        Ok(Self { dim, horizon, seed, sequences })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Feedback policy interface used by [`rollout`].
///
/// Policies are stateful: `act` is called once per step in time order, and
/// implementations may cache whatever they need between calls (internal
/// controller state, the previous state/input pair for disturbance
/// reconstruction). [`Policy::reset`] must restore the pristine state.
pub trait Policy<S: Scalar> {
    /// Forget any per-rollout state.
    fn reset(&mut self);

    /// Control input for the state at step `t`.
    fn act(&mut self, t: usize, x: &[S]) -> Result<Vec<S>>;

    /// A constant of the policy's scalar type (ties constants to the
    /// policy's tape when recording).
    fn lift(&self, v: f64) -> S;
}

/// The do-nothing policy; useful as an evaluation baseline.
pub struct ZeroPolicy {
    pub input_dim: usize,
}

impl Policy<f64> for ZeroPolicy {
    fn reset(&mut self) {}
    fn act(&mut self, _t: usize, _x: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.input_dim])
    }
    fn lift(&self, v: f64) -> f64 {
        v
    }
}

/// States and inputs of one closed-loop simulation, `0..=T` each.
pub struct Trajectory<S> {
    pub states: Vec<Vec<S>>,
    pub inputs: Vec<Vec<S>>,
}

impl<S: Scalar> Trajectory<S> {
    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }
}

fn ensure_finite<S: Scalar>(values: &[S], step: usize, what: &str) -> Result<()> {
    for (i, v) in values.iter().enumerate() {
        let val = v.value();
        if !val.is_finite() {
            return Err(Error::NonFinite {
                step,
                sequence: None,
                what: format!("{what} component {i} is {val}"),
            });
        }
    }
    Ok(())
}

/// Simulate the closed loop of `sys` under `policy` along one disturbance
/// sequence.
///
/// `noise` must hold `T + 1` vectors of the state dimension; `noise[0]`
/// perturbs the nominal initial state and `noise[t]` is added to the
/// transition into step `t`. Every visited state and input is checked to be
/// finite, failing with the offending step index otherwise.
pub fn rollout<S: Scalar, P: Policy<S> + ?Sized>(
    sys: &SystemModel,
    policy: &mut P,
    noise: &[Vec<f64>],
) -> Result<Trajectory<S>> {
    let horizon = noise
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::Config("rollout needs at least the initial noise step".into()))?;
    let n = sys.state_dim();
    for (t, w) in noise.iter().enumerate() {
        if w.len() != n {
            return Err(Error::Config(format!(
                "noise step {t} has dimension {}, system expects {n}",
                w.len()
            )));
        }
    }
    policy.reset();
    let mut x: Vec<S> = sys
        .initial_state()
        .iter()
        .zip(&noise[0])
        .map(|(&xi, &wi)| policy.lift(xi + wi))
        .collect();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut inputs = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        ensure_finite(&x, t, "state")?;
        let u = policy.act(t, &x)?;
        if u.len() != sys.input_dim() {
            return Err(Error::Config(format!(
                "policy produced input of dimension {}, system expects {}",
                u.len(),
                sys.input_dim()
            )));
        }
        ensure_finite(&u, t, "input")?;
        if t < horizon {
            let mut next = sys.step(t, &x, &u);
            for (xi, wi) in next.iter_mut().zip(&noise[t + 1]) {
                *xi = xi.shift(*wi);
            }
            states.push(std::mem::replace(&mut x, next));
        } else {
            states.push(std::mem::take(&mut x));
        }
        inputs.push(u);
    }
    Ok(Trajectory { states, inputs })
}
