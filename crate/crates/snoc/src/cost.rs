//! Stage costs, the bounded cost transform, and empirical cost averages.
//!
//! Generalization certificates require a bounded loss, while the native
//! control objectives (quadratic tracking, collision penalties) are
//! unbounded. The bridge is the saturating transform
//! `L̃ = C tanh(L / γ)`, which maps any non-negative cost into `[0, C)`
//! while preserving ordering; `γ` defaults to the cost of sitting still at
//! the nominal initial state so that typical costs land in the responsive
//! part of the curve.
//!
//! Everything here is generic over [`Scalar`]: the same stage-cost code is
//! used to evaluate controllers and to differentiate through them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::controllers::{build_policy, Architecture, ControllerParams};
use crate::dynamics::{robot_position, robot_velocity, rollout, NoiseDataset, SystemModel, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::frob_norm;

/// A circular obstacle in the plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

/// Parameters of the multi-robot stage cost: quadratic tracking plus
/// short-range collision and obstacle penalties.
///
/// The proximity penalty for a distance `d` inside a margin `D` is
/// `(d + ν)^{-2}` and exactly zero at or beyond the margin; `ν` keeps the
/// penalty finite at contact. Obstacle penalties use the distance to the
/// obstacle surface, clamped at zero inside the obstacle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotCostParams {
    /// Target position per robot (must match the dynamics model).
    pub targets: Vec<[f64; 2]>,
    /// Weight on squared distance to the target.
    pub q_pos: f64,
    /// Weight on squared velocity.
    pub q_vel: f64,
    /// Weight on squared input.
    pub r: f64,
    /// Robot-robot distance below which the proximity penalty applies.
    pub collision_margin: f64,
    /// Softening `ν` of the proximity penalty.
    pub softening: f64,
    pub obstacles: Vec<Obstacle>,
    /// Surface distance below which the obstacle penalty applies.
    pub obstacle_margin: f64,
}

impl RobotCostParams {
    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Config("robot cost needs at least one target".into()));
        }
        let nonneg = [self.q_pos, self.q_vel, self.r];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("robot cost weights must be finite and non-negative".into()));
        }
        let positive = [self.collision_margin, self.obstacle_margin, self.softening];
        if !positive.iter().all(|v| *v > 0.0) {
            return Err(Error::Config("robot cost margins and softening must be positive".into()));
        }
        if !self.obstacles.iter().all(|o| o.radius > 0.0) {
            return Err(Error::Config("obstacle radii must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step cost `l(x_t, u_t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageCost {
    /// `q ||x||^2 + r ||u||^2`.
    Quadratic { q: f64, r: f64 },
    /// Tracking plus proximity penalties for the robot scenario.
    Robots(RobotCostParams),
}

impl StageCost {
    pub fn validate(&self) -> Result<()> {
        match self {
            StageCost::Quadratic { q, r } => {
                if !(q.is_finite() && r.is_finite() && *q >= 0.0 && *r >= 0.0) {
                    return Err(Error::Config("quadratic cost weights must be finite and non-negative".into()));
                }
                Ok(())
            }
            StageCost::Robots(p) => p.validate(),
        }
    }
}

fn sum_squares<S: Scalar>(v: &[S]) -> S {
    let mut acc = v[0] * v[0];
    for &x in &v[1..] {
        acc = acc + x * x;
    }
    acc
}

/// `(d + ν)^{-2}` inside the margin, exactly zero at or beyond it. The
/// discontinuity at the margin is deliberate; gradients see only the
/// active piece.
fn proximity_penalty<S: Scalar>(d: S, margin: f64, softening: f64) -> S {
    if d.value() < margin {
        let inv = d.shift(softening).recip();
        inv * inv
    } else {
        d.lift(0.0)
    }
}

/// Evaluate the stage cost at one state/input pair.
pub fn stage_cost<S: Scalar>(stage: &StageCost, x: &[S], u: &[S]) -> S {
    match stage {
        StageCost::Quadratic { q, r } => sum_squares(x).scale(*q) + sum_squares(u).scale(*r),
        StageCost::Robots(p) => {
            let n = p.targets.len();
            let mut acc = sum_squares(u).scale(p.r);
            for (i, target) in p.targets.iter().enumerate() {
                let pos = robot_position(x, i);
                let err = [pos[0].shift(-target[0]), pos[1].shift(-target[1])];
                acc = acc + sum_squares(&err).scale(p.q_pos);
                acc = acc + sum_squares(&robot_velocity(x, i)).scale(p.q_vel);
            }
            for i in 0..n {
                for j in (i + 1)..n {
                    let pi = robot_position(x, i);
                    let pj = robot_position(x, j);
                    let diff = [pi[0] - pj[0], pi[1] - pj[1]];
                    let dist = frob_norm(&diff);
                    acc = acc + proximity_penalty(dist, p.collision_margin, p.softening);
                }
            }
            for i in 0..n {
                for obs in &p.obstacles {
                    let pos = robot_position(x, i);
                    let diff = [pos[0].shift(-obs.center[0]), pos[1].shift(-obs.center[1])];
                    let surface = frob_norm(&diff).shift(-obs.radius).vmax_c(0.0);
                    acc = acc + proximity_penalty(surface, p.obstacle_margin, p.softening);
                }
            }
            acc
        }
    }
}

/// Finite-horizon cost of a trajectory: the stage costs over steps
/// `0..=T`, scaled by `1 / max(T, 1)`.
pub fn fh_cost<S: Scalar>(stage: &StageCost, traj: &Trajectory<S>) -> S {
    let horizon = traj.horizon();
    let mut acc = stage_cost(stage, &traj.states[0], &traj.inputs[0]);
    for t in 1..=horizon {
        acc = acc + stage_cost(stage, &traj.states[t], &traj.inputs[t]);
    }
    acc.scale(1.0 / horizon.max(1) as f64)
}

/// Saturating map from raw costs into `[0, cap)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostTransform {
    /// Upper bound `C` of the transformed cost's range.
    pub cap: f64,
    /// Cost scale `γ`: raw costs near `γ` land in the responsive part of
    /// the saturation.
    pub gamma: f64,
}

impl CostTransform {
    pub fn new(cap: f64, gamma: f64) -> Result<Self> {
        if !(cap.is_finite() && cap > 0.0) {
            return Err(Error::Config(format!("cost cap must be positive and finite, got {cap}")));
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::Config(format!("cost scale must be positive and finite, got {gamma}")));
        }
        Ok(Self { cap, gamma })
    }

    /// `cap · tanh(l / γ)`, kept strictly below `cap`.
    ///
    /// `tanh` evaluates to exactly 1.0 in floating point for large
    /// arguments, so the saturation is clamped to the largest double below
    /// one before scaling; the certified range `[0, cap)` then holds for
    /// every representable input.
    pub fn apply<S: Scalar>(&self, l: S) -> S {
        l.scale(1.0 / self.gamma)
            .tanh()
            .vmin_c(1.0 - f64::EPSILON / 2.0)
            .scale(self.cap)
    }
}

/// Cost scale `γ` for [`CostTransform`]: the stage cost of holding the
/// nominal initial state with zero input, or 1 when that cost is not a
/// usable scale (zero, negative, or non-finite).
pub fn default_gamma(sys: &SystemModel, stage: &StageCost) -> f64 {
    let x = sys.initial_state();
    let u = vec![0.0; sys.input_dim()];
    let l = stage_cost(stage, &x, &u);
    if l.is_finite() && l > 0.0 {
        l
    } else {
        1.0
    }
}

/// Average closed-loop cost of one controller over a disturbance dataset.
///
/// Each sequence is simulated independently (in parallel), costs are
/// checked to be finite, and the mean is accumulated in sequence order so
/// the result is bit-reproducible regardless of thread scheduling. With a
/// transform the result lies in `[0, cap)`; without one it is the raw
/// finite-horizon cost.
pub fn empirical_cost(
    sys: &SystemModel,
    params: &ControllerParams,
    stage: &StageCost,
    dataset: &NoiseDataset,
    transform: Option<&CostTransform>,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Config("empirical cost needs a non-empty dataset".into()));
    }
    let per_sequence: Vec<Result<f64>> = dataset
        .sequences
        .par_iter()
        .enumerate()
        .map(|(i, noise)| {
            let mut policy = build_policy::<f64>(&params.architecture, sys, &params.theta)?;
            let traj = rollout(sys, &mut policy, noise).map_err(|e| e.with_sequence(i))?;
            let raw = fh_cost(stage, &traj);
            if !raw.is_finite() {
                return Err(Error::NonFinite {
                    step: traj.horizon(),
                    sequence: Some(i),
                    what: format!("finite-horizon cost is {raw}"),
                });
            }
            Ok(match transform {
                Some(tr) => tr.apply(raw),
                None => raw,
            })
        })
        .collect();
    let mut sum = 0.0;
    for c in per_sequence {
        sum += c?;
    }
    Ok(sum / dataset.len() as f64)
}

/// The training objective: a system, a controller architecture, a stage
/// cost, a dataset, and the bounding transform, bundled so that samplers
/// and posteriors can evaluate `L̂(θ)` through one call.
pub struct EmpiricalObjective<'a> {
    pub system: &'a SystemModel,
    pub architecture: Architecture,
    pub stage: &'a StageCost,
    pub dataset: &'a NoiseDataset,
    pub transform: CostTransform,
}

impl EmpiricalObjective<'_> {
    /// Transformed empirical cost `L̂(θ) ∈ [0, cap)`.
    pub fn value(&self, theta: &[f64]) -> Result<f64> {
        let params = ControllerParams {
            architecture: self.architecture.clone(),
            theta: theta.to_vec(),
        };
        empirical_cost(self.system, &params, self.stage, self.dataset, Some(&self.transform))
    }

    /// Range bound `C` of the transformed cost.
    pub fn cap(&self) -> f64 {
        self.transform.cap
    }

    pub fn param_count(&self) -> usize {
        self.architecture.param_count(self.system)
    }
}
