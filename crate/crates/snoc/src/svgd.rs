//! Stein variational training of controller distributions.
//!
//! The Gibbs posterior over controllers is known only up to its
//! normalizer, which is exactly the setting Stein variational gradient
//! descent handles: a set of particles `θ_1..θ_K` follows the update
//!
//! ```text
//! θ_i ← θ_i + η · (1/K) Σ_j [ k(θ_j, θ_i) ∇ ln q(θ_j) + ∇_{θ_j} k(θ_j, θ_i) ]
//! ```
//!
//! whose first term pulls particles toward high density and whose second
//! (the kernel repulsion) keeps them spread out; with a single particle
//! it degenerates to plain gradient ascent on `ln q`. Gradients of the
//! empirical cost flow through entire closed-loop rollouts via the
//! recording scalar type, so the same dynamics/cost code used for
//! evaluation is what gets differentiated.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt::Write as _;

use crate::autodiff::{Scalar, Tape, Var};
use crate::controllers::{build_policy, stability_interval, Architecture};
use crate::cost::{fh_cost, CostTransform, StageCost};
use crate::dynamics::{rollout, NoiseDataset, SystemModel};
use crate::error::{Error, Result};
use crate::pacbayes::GibbsPosterior;
use crate::rng::{domain_rng, substream_rng};

/// One evaluation of an unnormalized log target.
pub struct TargetEval {
    /// `ln q(θ)` up to an additive constant.
    pub log_density: f64,
    /// `∇ ln q(θ)`.
    pub grad: Vec<f64>,
    /// Mean transformed control cost at θ, when the target wraps an
    /// empirical objective (used for progress logs and divergence
    /// detection).
    pub cost: Option<f64>,
}

/// An unnormalized log density that particles can be trained against.
pub trait LogTarget: Sync {
    fn dim(&self) -> usize;

    /// Log density and gradient at θ (plus the control cost when one
    /// exists).
    fn eval(&self, theta: &[f64]) -> Result<TargetEval>;

    /// Draw an initial particle (training initializes from this).
    fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;

    /// Project a particle back into the target's support, if bounded.
    fn clamp(&self, _theta: &mut [f64]) {}
}

/// Value and gradient of the mean closed-loop cost over a dataset.
///
/// Each sequence replays on its own recording tape and the per-sequence
/// results are averaged in sequence order, so values agree bit-for-bit
/// with the plain evaluation path and gradients are reproducible under
/// any thread schedule. `transform` selects the bounded cost `L̃` (for
/// posterior training) or the raw cost (for direct empirical risk
/// minimization).
pub fn cost_and_grad(
    sys: &SystemModel,
    architecture: &Architecture,
    stage: &StageCost,
    dataset: &NoiseDataset,
    transform: Option<&CostTransform>,
    theta: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::Config("gradient evaluation needs a non-empty dataset".into()));
    }
    let per_sequence: Vec<Result<(f64, Vec<f64>)>> = dataset
        .sequences
        .par_iter()
        .enumerate()
        .map(|(i, noise)| {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = theta.iter().map(|&v| tape.var(v)).collect();
            let mut policy = build_policy(architecture, sys, &vars)?;
            let traj = rollout(sys, &mut policy, noise).map_err(|e| e.with_sequence(i))?;
            let mut total = fh_cost(stage, &traj);
            if let Some(tr) = transform {
                total = tr.apply(total);
            }
            if !total.value().is_finite() {
                return Err(Error::NonFinite {
                    step: traj.horizon(),
                    sequence: Some(i),
                    what: format!("cost is {}", total.value()),
                });
            }
            let grads = total.grad();
            let g: Vec<f64> = vars.iter().map(|v| grads.wrt(*v)).collect();
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    step: traj.horizon(),
                    sequence: Some(i),
                    what: "cost gradient is not finite".into(),
                });
            }
            Ok((total.value(), g))
        })
        .collect();
    let mut value = 0.0;
    let mut grad = vec![0.0; theta.len()];
    for r in per_sequence {
        let (v, g) = r?;
        value += v;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc += gi;
        }
    }
    let s = dataset.len() as f64;
    value /= s;
    grad.iter_mut().for_each(|v| *v /= s);
    Ok((value, grad))
}

/// Independent closed-form gradient for affine feedback on the scalar
/// linear system, via forward sensitivity recursions.
///
/// Exists to validate the recorded-tape gradients against an
/// implementation that shares no code with them; it reproduces the same
/// gain clamp and cost-transform branching.
pub fn affine_scalar_gradient(
    sys: &SystemModel,
    stage: &StageCost,
    dataset: &NoiseDataset,
    transform: Option<&CostTransform>,
    theta: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let (a, b, xbar) = match sys {
        SystemModel::ScalarLti { a, b, xbar } => (*a, *b, *xbar),
        _ => return Err(Error::Config("closed-form gradient only covers the scalar system".into())),
    };
    let (q, rw) = match stage {
        StageCost::Quadratic { q, r } => (*q, *r),
        _ => return Err(Error::Config("closed-form gradient only covers quadratic costs".into())),
    };
    if theta.len() != 2 {
        return Err(Error::Config(format!("affine feedback has 2 parameters, got {}", theta.len())));
    }
    if dataset.is_empty() {
        return Err(Error::Config("gradient evaluation needs a non-empty dataset".into()));
    }
    let (k_raw, beta) = (theta[0], theta[1]);
    // Same tie-breaking as the clamp in the policy builder: the raw
    // parameter survives exact ties, so the derivative there is 1.
    let (kc, dkc) = match stability_interval(sys) {
        Some((lo, hi)) => {
            if k_raw < lo {
                (lo, 0.0)
            } else if k_raw > hi {
                (hi, 0.0)
            } else {
                (k_raw, 1.0)
            }
        }
        None => (k_raw, 1.0),
    };
    let mut vsum = 0.0;
    let mut gk_sum = 0.0;
    let mut gb_sum = 0.0;
    for noise in &dataset.sequences {
        let horizon = noise.len() - 1;
        let mut x = xbar + noise[0][0];
        // Sensitivities of the state w.r.t. k and β.
        let (mut sk, mut sb) = (0.0, 0.0);
        let (mut j, mut jk, mut jb) = (0.0, 0.0, 0.0);
        for t in 0..=horizon {
            let u = -(kc * x + beta);
            let duk = -(dkc * x + kc * sk);
            let dub = -(kc * sb + 1.0);
            j += (x * x) * q + (u * u) * rw;
            jk += 2.0 * q * x * sk + 2.0 * rw * u * duk;
            jb += 2.0 * q * x * sb + 2.0 * rw * u * dub;
            if t < horizon {
                x = a * x + b * u + noise[t + 1][0];
                sk = a * sk + b * duk;
                sb = a * sb + b * dub;
            }
        }
        let scale = 1.0 / horizon.max(1) as f64;
        let (mut v, mut gk, mut gb) = (j * scale, jk * scale, jb * scale);
        if let Some(tr) = transform {
            let t = (v * (1.0 / tr.gamma)).tanh();
            let clamp = 1.0 - f64::EPSILON / 2.0;
            if t <= clamp {
                let factor = tr.cap * (1.0 - t * t) / tr.gamma;
                v = t * tr.cap;
                gk *= factor;
                gb *= factor;
            } else {
                v = clamp * tr.cap;
                gk = 0.0;
                gb = 0.0;
            }
        }
        vsum += v;
        gk_sum += gk;
        gb_sum += gb;
    }
    let s = dataset.len() as f64;
    Ok((vsum / s, vec![gk_sum / s, gb_sum / s]))
}

/// Median-heuristic squared bandwidth `h = med² / ln(K+1)`, where `med²`
/// is the median squared pairwise distance between particles. Falls back
/// to 1 when degenerate (a single particle, or all particles identical).
pub fn rbf_bandwidth(particles: &[Vec<f64>]) -> f64 {
    let k = particles.len();
    if k < 2 {
        return 1.0;
    }
    let mut sq = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in (i + 1)..k {
            let d: f64 = particles[i]
                .iter()
                .zip(&particles[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            sq.push(d);
        }
    }
    sq.sort_by(f64::total_cmp);
    let med = if sq.len() % 2 == 1 {
        sq[sq.len() / 2]
    } else {
        0.5 * (sq[sq.len() / 2 - 1] + sq[sq.len() / 2])
    };
    let h = med / ((k as f64) + 1.0).ln();
    if h.is_finite() && h > 0.0 {
        h
    } else {
        1.0
    }
}

/// The Stein update direction for every particle.
///
/// Uses the RBF kernel `k(x, y) = exp(-‖x-y‖²/h)`; with one particle the
/// direction is exactly its gradient (kernel one, repulsion zero).
pub fn svgd_direction(particles: &[Vec<f64>], grads: &[Vec<f64>], bandwidth: f64) -> Vec<Vec<f64>> {
    let k = particles.len();
    assert_eq!(k, grads.len(), "one gradient per particle");
    let dim = particles[0].len();
    let mut phi = vec![vec![0.0; dim]; k];
    for i in 0..k {
        for j in 0..k {
            let mut sq = 0.0;
            for (a, b) in particles[j].iter().zip(&particles[i]) {
                let d = a - b;
                sq += d * d;
            }
            let kern = (-sq / bandwidth).exp();
            let repulse = 2.0 * kern / bandwidth;
            for t in 0..dim {
                phi[i][t] += kern * grads[j][t] + repulse * (particles[i][t] - particles[j][t]);
            }
        }
        let inv = 1.0 / k as f64;
        phi[i].iter_mut().for_each(|v| *v *= inv);
    }
    phi
}

/// Knobs of the particle trainer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    /// Number of particles `K`.
    pub particles: usize,
    pub iterations: usize,
    /// Master step size of the adaptive-gradient update.
    pub step_size: f64,
    /// Denominator floor of the adaptive-gradient update.
    pub adagrad_eps: f64,
    /// Abort when the mean cost exceeds this multiple of its best value.
    pub divergence_factor: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            particles: 16,
            iterations: 500,
            step_size: 0.05,
            adagrad_eps: 1e-8,
            divergence_factor: 10.0,
            seed: 0,
        }
    }
}

/// Outcome of a particle training run.
pub struct TrainResult {
    /// Final particle positions (a sample of the trained posterior).
    pub particles: Vec<Vec<f64>>,
    /// Index of one particle drawn uniformly (seeded) for deployment.
    pub selected: usize,
    /// Per-iteration progress log as CSV
    /// (`iteration,mean_objective,max_grad_norm,bandwidth`).
    pub log: String,
    pub iterations_run: usize,
}

/// Train particles against a log target.
///
/// Particles initialize from the target's own initializer (substream `i`
/// of the seed, so the set does not depend on `K` beyond truncation).
/// Updates are adaptive-gradient ascent along the Stein direction; runs
/// abort with [`Error::Diverged`] if the mean cost blows past
/// `divergence_factor` times its best observed value. For targets
/// without a cost (pure densities) the log records mean negative log
/// density and divergence detection is off.
pub fn train_svgd(target: &dyn LogTarget, opts: &TrainOptions) -> Result<TrainResult> {
    if opts.particles == 0 {
        return Err(Error::Config("training needs at least one particle".into()));
    }
    if !(opts.step_size.is_finite() && opts.step_size > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {}", opts.step_size)));
    }
    if !(opts.adagrad_eps.is_finite() && opts.adagrad_eps > 0.0) {
        return Err(Error::Config(format!("adagrad epsilon must be positive, got {}", opts.adagrad_eps)));
    }
    if !(opts.divergence_factor.is_finite() && opts.divergence_factor > 1.0) {
        return Err(Error::Config(format!(
            "divergence factor must exceed 1, got {}",
            opts.divergence_factor
        )));
    }
    let dim = target.dim();
    let mut particles: Vec<Vec<f64>> = (0..opts.particles)
        .map(|i| {
            let mut rng = substream_rng(opts.seed, "svgd-init", i as u64);
            let mut theta = target.init(&mut rng);
            target.clamp(&mut theta);
            theta
        })
        .collect();
    for p in &particles {
        if p.len() != dim {
            return Err(Error::Config(format!(
                "target initializer produced {} coordinates, expected {dim}",
                p.len()
            )));
        }
    }
    let mut accum = vec![vec![0.0; dim]; opts.particles];
    let mut log = String::from("iteration,mean_objective,max_grad_norm,bandwidth\n");
    let mut best: Option<f64> = None;
    for iteration in 0..opts.iterations {
        let evals: Vec<Result<TargetEval>> =
            particles.par_iter().map(|theta| target.eval(theta)).collect();
        let mut grads = Vec::with_capacity(opts.particles);
        let mut cost_sum = 0.0;
        let mut density_sum = 0.0;
        let mut have_costs = true;
        for e in evals {
            let e = e?;
            match e.cost {
                Some(c) => cost_sum += c,
                None => have_costs = false,
            }
            density_sum += e.log_density;
            grads.push(e.grad);
        }
        let kf = opts.particles as f64;
        let mean_objective = if have_costs { cost_sum / kf } else { -density_sum / kf };
        if have_costs {
            match best {
                None => best = Some(mean_objective),
                Some(b) => {
                    // The absolute guard keeps near-zero costs from
                    // tripping the ratio test on noise.
                    if mean_objective > opts.divergence_factor * b && mean_objective - b > 1e-9 {
                        return Err(Error::Diverged {
                            iteration,
                            current: mean_objective,
                            best: b,
                        });
                    }
                    if mean_objective < b {
                        best = Some(mean_objective);
                    }
                }
            }
        }
        let bandwidth = rbf_bandwidth(&particles);
        let max_grad_norm = grads
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let phi = svgd_direction(&particles, &grads, bandwidth);
        for i in 0..opts.particles {
            for t in 0..dim {
                accum[i][t] += phi[i][t] * phi[i][t];
                particles[i][t] +=
                    opts.step_size * phi[i][t] / (accum[i][t].sqrt() + opts.adagrad_eps);
            }
            target.clamp(&mut particles[i]);
        }
        let _ = writeln!(log, "{iteration},{mean_objective},{max_grad_norm},{bandwidth}");
    }
    let selected = if opts.particles == 1 {
        0
    } else {
        use rand::Rng;
        domain_rng(opts.seed, "svgd-select").random_range(0..opts.particles)
    };
    Ok(TrainResult {
        particles,
        selected,
        log,
        iterations_run: opts.iterations,
    })
}

impl LogTarget for GibbsPosterior<'_> {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn eval(&self, theta: &[f64]) -> Result<TargetEval> {
        let (cost, cost_grad) = cost_and_grad(
            self.objective.system,
            &self.objective.architecture,
            self.objective.stage,
            self.objective.dataset,
            Some(&self.objective.transform),
            theta,
        )?;
        let log_density = self.prior.log_density(theta) - self.lambda * cost;
        let grad: Vec<f64> = self
            .prior
            .grad_log_density(theta)
            .iter()
            .zip(&cost_grad)
            .map(|(p, c)| p - self.lambda * c)
            .collect();
        Ok(TargetEval {
            log_density,
            grad,
            cost: Some(cost),
        })
    }

    fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.prior.sample(rng)
    }

    fn clamp(&self, theta: &mut [f64]) {
        self.prior.support_clamp(theta);
    }
}
