//! Priors, Gibbs posteriors, and high-probability generalization bounds.
//!
//! The generalization argument runs as follows. Controllers θ are drawn
//! from a posterior `Q` over parameters; for any prior `P` chosen before
//! seeing data, with probability at least `1 - δ` over the draw of the
//! dataset *and* of θ, the true expected cost obeys
//!
//! ```text
//! 𝓛(θ) ≤ L̂(θ, S) + (1/λ)(ln dQ/dP(θ) + ln(1/δ)) + λ C² / (8 s)
//! ```
//!
//! for costs bounded in `[0, C]` and `s` i.i.d. noise sequences. The
//! posterior minimizing the associated free energy is the Gibbs
//! distribution `Q*(θ) ∝ P(θ) e^{-λ L̂(θ,S)}`, for which the bound
//! collapses to `(1/λ)(ln(1/δ) - ln Z_λ) + λ C²/(8 s)` with partition
//! function `Z_λ = E_{θ∼P} e^{-λ L̂(θ,S)}` — no dependence on the drawn θ.
//!
//! `Z_λ` is rarely available in closed form. Two estimators are provided:
//! an exact discretization for 2-D parameter spaces ([`GridPosterior`]),
//! and a Monte-Carlo lower bound from prior samples with a Hoeffding
//! correction ([`GibbsPosterior::qstar_bound_empirical`]), valid with
//! probability `(1 - δ)(1 - δ̂)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use crate::controllers::{Architecture, ControllerParams};
use crate::cost::EmpiricalObjective;
use crate::error::{Error, Result};
use crate::rng::substream_rng;

/// One independent coordinate of a prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorFactor {
    Gaussian { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl PriorFactor {
    fn validate(&self) -> Result<()> {
        match self {
            PriorFactor::Gaussian { mean, std } => {
                if !mean.is_finite() || !(std.is_finite() && *std > 0.0) {
                    return Err(Error::Config(format!(
                        "gaussian prior factor needs finite mean and positive std, got ({mean}, {std})"
                    )));
                }
            }
            PriorFactor::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::Config(format!(
                        "uniform prior factor needs finite lo < hi, got ({lo}, {hi})"
                    )));
                }
            }
        }
        Ok(())
    }

    fn log_density(&self, x: f64) -> f64 {
        match self {
            PriorFactor::Gaussian { mean, std } => {
                let z = (x - mean) / std;
                -0.5 * z * z - (std * (2.0 * std::f64::consts::PI).sqrt()).ln()
            }
            PriorFactor::Uniform { lo, hi } => {
                if x >= *lo && x <= *hi {
                    -(hi - lo).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    fn grad_log_density(&self, x: f64) -> f64 {
        match self {
            PriorFactor::Gaussian { mean, std } => -(x - mean) / (std * std),
            PriorFactor::Uniform { .. } => 0.0,
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            PriorFactor::Gaussian { mean, std } => {
                Normal::new(*mean, *std).expect("validated std").sample(rng)
            }
            PriorFactor::Uniform { lo, hi } => rng.random_range(*lo..*hi),
        }
    }
}

/// A product prior: independent factors, one per parameter coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    factors: Vec<PriorFactor>,
}

impl Prior {
    pub fn new(factors: Vec<PriorFactor>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::Config("prior needs at least one factor".into()));
        }
        for f in &factors {
            f.validate()?;
        }
        Ok(Self { factors })
    }

    /// Zero-mean spherical Gaussian over `dim` coordinates.
    pub fn spherical_gaussian(dim: usize, std: f64) -> Result<Self> {
        Self::new(vec![PriorFactor::Gaussian { mean: 0.0, std }; dim])
    }

    pub fn dim(&self) -> usize {
        self.factors.len()
    }

    pub fn factors(&self) -> &[PriorFactor] {
        &self.factors
    }

    /// Log density of the product measure; `-inf` outside the support.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        debug_assert_eq!(theta.len(), self.factors.len());
        self.factors.iter().zip(theta).map(|(f, &x)| f.log_density(x)).sum()
    }

    /// Gradient of the log density (zero for uniform factors inside their
    /// support).
    pub fn grad_log_density(&self, theta: &[f64]) -> Vec<f64> {
        self.factors.iter().zip(theta).map(|(f, &x)| f.grad_log_density(x)).collect()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.factors.iter().map(|f| f.sample(rng)).collect()
    }

    /// Pull coordinates with bounded support strictly inside it (tiny
    /// relative margin), so log densities stay finite after optimizer
    /// steps. Unbounded coordinates are untouched.
    pub fn support_clamp(&self, theta: &mut [f64]) {
        for (f, x) in self.factors.iter().zip(theta.iter_mut()) {
            if let PriorFactor::Uniform { lo, hi } = f {
                let margin = 1e-9 * (hi - lo);
                *x = x.clamp(lo + margin, hi - margin);
            }
        }
    }
}

fn check_probability(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0 && v < 1.0) {
        return Err(Error::Config(format!("{name} must lie strictly in (0, 1), got {v}")));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be positive and finite, got {lambda}")));
    }
    Ok(())
}

fn check_cap(cap: f64) -> Result<()> {
    if !(cap.is_finite() && cap > 0.0) {
        return Err(Error::Config(format!("cost cap must be positive and finite, got {cap}")));
    }
    Ok(())
}

/// The bound-minimizing inverse temperature `λ* = √(8 s ln(1/δ)) / C`
/// (obtained by optimizing the bound with the partition term replaced by
/// its worst case).
pub fn lambda_star(data_size: usize, delta: f64, cap: f64) -> Result<f64> {
    if data_size == 0 {
        return Err(Error::Config("lambda_star needs a non-empty dataset".into()));
    }
    check_probability("delta", delta)?;
    check_cap(cap)?;
    Ok((8.0 * data_size as f64 * delta.recip().ln()).sqrt() / cap)
}

/// The randomized PAC-Bayes bound evaluated at one drawn controller:
/// `L̂(θ) + (1/λ)(ln dQ/dP(θ) + ln(1/δ)) + λ C² / (8 s)`.
pub fn theorem1_bound(
    empirical: f64,
    log_density_ratio: f64,
    lambda: f64,
    delta: f64,
    cap: f64,
    data_size: usize,
) -> Result<f64> {
    check_lambda(lambda)?;
    check_probability("delta", delta)?;
    check_cap(cap)?;
    if data_size == 0 {
        return Err(Error::Config("bound needs a non-empty dataset".into()));
    }
    Ok(empirical
        + (log_density_ratio + delta.recip().ln()) / lambda
        + lambda * cap * cap / (8.0 * data_size as f64))
}

/// `ln(e^x - 1)`, stable for both small and large `x`.
fn ln_exp_m1(x: f64) -> f64 {
    if x < 30.0 {
        x.exp_m1().ln()
    } else {
        x + (-x).exp().ln_1p()
    }
}

/// Minimum number of prior samples for the Monte-Carlo partition bound:
/// `(e^{λC} - 1)² ln(1/δ̂) / 2`, computed in log space so large `λC`
/// yields `inf` rather than overflow artifacts.
pub fn min_prior_samples(lambda: f64, cap: f64, delta_hat: f64) -> Result<f64> {
    check_lambda(lambda)?;
    check_cap(cap)?;
    check_probability("delta_hat", delta_hat)?;
    let ln_min = 2.0 * ln_exp_m1(lambda * cap) + delta_hat.recip().ln().ln() - std::f64::consts::LN_2;
    Ok(ln_min.exp())
}

/// Largest `λ` for which `n_p` prior samples satisfy the Monte-Carlo
/// precondition (inverse of [`min_prior_samples`] in `λ`).
pub fn max_feasible_lambda(cap: f64, delta_hat: f64, n_p: usize) -> Result<f64> {
    check_cap(cap)?;
    check_probability("delta_hat", delta_hat)?;
    if n_p == 0 {
        return Err(Error::Config("need at least one prior sample".into()));
    }
    Ok((2.0 * n_p as f64 / delta_hat.recip().ln()).sqrt().ln_1p() / cap)
}

/// Hoeffding deviation of the partition estimate:
/// `(1 - e^{-λC}) √(ln(1/δ̂) / (2 n_p))`.
pub fn hoeffding_deviation(lambda: f64, cap: f64, delta_hat: f64, n_p: usize) -> f64 {
    -(-lambda * cap).exp_m1() * (delta_hat.recip().ln() / (2.0 * n_p as f64)).sqrt()
}

/// How a certificate's partition term was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundMode {
    /// Direct evaluation of the randomized bound at one θ.
    Theorem1,
    /// Gibbs posterior with the partition function from an exact grid.
    QstarExact,
    /// Gibbs posterior with the Monte-Carlo/Hoeffding partition bound.
    QstarEmpirical,
}

/// Schema version for certificates written by this crate.
pub const CERTIFICATE_SCHEMA_VERSION: u32 = 1;

/// A self-contained record of one generalization bound: every quantity
/// needed to audit the number is present.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundCertificate {
    pub schema_version: u32,
    pub mode: BoundMode,
    /// High-probability upper bound on the true (transformed) cost.
    pub bound: f64,
    /// Probability with which the bound holds: `1-δ`, or `(1-δ)(1-δ̂)`
    /// in empirical mode.
    pub probability: f64,
    pub delta: f64,
    pub delta_hat: Option<f64>,
    /// Inverse temperature actually used by the bound.
    pub lambda: f64,
    /// The optimal inverse temperature for this `(s, δ, C)`, when the
    /// caller computed one (it may exceed `lambda` if feasibility capped
    /// the temperature).
    pub lambda_star: Option<f64>,
    pub cap: f64,
    /// Number of training noise sequences `s`.
    pub data_size: usize,
    /// Prior samples used by the Monte-Carlo estimate.
    pub prior_samples: Option<usize>,
    /// Plug-in Monte-Carlo partition estimate.
    pub z_hat: Option<f64>,
    /// Hoeffding deviation subtracted from the estimate.
    pub hoeffding: Option<f64>,
    /// High-probability lower bound on the partition function.
    pub z_lower: Option<f64>,
    /// Exact-grid log partition function.
    pub log_partition: Option<f64>,
    pub seed: Option<u64>,
}

impl BoundCertificate {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cert: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if cert.schema_version != CERTIFICATE_SCHEMA_VERSION {
            return Err(Error::Parse(format!(
                "unsupported certificate schema version {}",
                cert.schema_version
            )));
        }
        Ok(cert)
    }
}

/// The data-dependent Gibbs posterior `Q*(θ) ∝ P(θ) e^{-λ L̂(θ,S)}`.
pub struct GibbsPosterior<'a> {
    pub prior: &'a Prior,
    pub lambda: f64,
    pub objective: &'a EmpiricalObjective<'a>,
}

impl<'a> GibbsPosterior<'a> {
    /// `λ = 0` is allowed for the density (it degenerates to the prior);
    /// bound computations require `λ > 0`.
    pub fn new(prior: &'a Prior, lambda: f64, objective: &'a EmpiricalObjective<'a>) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be non-negative and finite, got {lambda}"
            )));
        }
        if prior.dim() != objective.param_count() {
            return Err(Error::Config(format!(
                "prior has {} coordinates but the architecture has {} parameters",
                prior.dim(),
                objective.param_count()
            )));
        }
        Ok(Self { prior, lambda, objective })
    }

    /// Unnormalized log density `ln P(θ) - λ L̂(θ, S)`.
    pub fn log_unnormalized(&self, theta: &[f64]) -> Result<f64> {
        let lp = self.prior.log_density(theta);
        if lp == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(lp - self.lambda * self.objective.value(theta)?)
    }

    /// Certify the Gibbs posterior via the Monte-Carlo partition bound.
    ///
    /// Draws `n_p` controllers from the prior (one RNG substream each, so
    /// the estimate is reproducible and order-independent), averages
    /// `e^{-λ L̂(θ_i)}`, subtracts the Hoeffding deviation, and plugs the
    /// resulting lower bound on `Z_λ` into the simplified Gibbs bound.
    /// The certificate holds with probability `(1-δ)(1-δ̂)`.
    pub fn qstar_bound_empirical(
        &self,
        delta: f64,
        delta_hat: f64,
        n_p: usize,
        seed: u64,
    ) -> Result<BoundCertificate> {
        check_lambda(self.lambda)?;
        check_probability("delta", delta)?;
        check_probability("delta_hat", delta_hat)?;
        let required = min_prior_samples(self.lambda, self.objective.cap(), delta_hat)?;
        if (n_p as f64) < required {
            return Err(Error::Precondition(format!(
                "partition estimate with lambda={} and cap={} requires at least {:.4e} prior \
                 samples (got {n_p}); lower lambda to at most {:.6} or increase n_p",
                self.lambda,
                self.objective.cap(),
                required,
                max_feasible_lambda(self.objective.cap(), delta_hat, n_p)?,
            )));
        }
        let weights: Vec<Result<f64>> = (0..n_p)
            .into_par_iter()
            .map(|i| {
                let mut rng = substream_rng(seed, "partition-samples", i as u64);
                let theta = self.prior.sample(&mut rng);
                Ok((-self.lambda * self.objective.value(&theta)?).exp())
            })
            .collect();
        let mut sum = 0.0;
        for w in weights {
            sum += w?;
        }
        let z_hat = sum / n_p as f64;
        let dev = hoeffding_deviation(self.lambda, self.objective.cap(), delta_hat, n_p);
        let z_lower = z_hat - dev;
        if z_lower.is_nan() || z_lower <= 0.0 {
            return Err(Error::InsufficientSamples(format!(
                "partition lower bound {z_lower:.6e} is not positive (estimate {z_hat:.6e}, \
                 deviation {dev:.6e}); increase n_p"
            )));
        }
        let s = self.objective.dataset.len();
        let cap = self.objective.cap();
        let bound = (delta.recip().ln() - z_lower.ln()) / self.lambda
            + self.lambda * cap * cap / (8.0 * s as f64);
        if !bound.is_finite() {
            return Err(Error::Precondition(format!("computed bound {bound} is not finite")));
        }
        Ok(BoundCertificate {
            schema_version: CERTIFICATE_SCHEMA_VERSION,
            mode: BoundMode::QstarEmpirical,
            bound,
            probability: (1.0 - delta) * (1.0 - delta_hat),
            delta,
            delta_hat: Some(delta_hat),
            lambda: self.lambda,
            lambda_star: None,
            cap,
            data_size: s,
            prior_samples: Some(n_p),
            z_hat: Some(z_hat),
            hoeffding: Some(dev),
            z_lower: Some(z_lower),
            log_partition: None,
            seed: Some(seed),
        })
    }
}

/// Normalize log-space weights into probabilities without underflow.
///
/// `-inf` entries map to exactly zero mass. Errors if every entry is
/// `-inf` (no representable mass anywhere).
pub fn normalized_from_log(log_weights: &[f64]) -> Result<Vec<f64>> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Precondition(
            "all log-weights are -inf: the distribution has no mass on this support".into(),
        ));
    }
    let unnorm: Vec<f64> = log_weights.iter().map(|&lw| (lw - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    Ok(unnorm.into_iter().map(|w| w / total).collect())
}

/// `ln Σ e^{x_i}` with the usual max-shift stabilization.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// One axis of a rectangular parameter grid, split into `steps` equal
/// cells evaluated at their centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl GridAxis {
    pub fn new(lo: f64, hi: f64, steps: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) || steps == 0 {
            return Err(Error::Config(format!(
                "grid axis needs finite lo < hi and at least one step, got ({lo}, {hi}, {steps})"
            )));
        }
        Ok(Self { lo, hi, steps })
    }

    /// Axis covering the bulk of a prior factor: the full support for
    /// uniform factors, `mean ± sigmas·std` for Gaussian ones.
    pub fn covering(factor: &PriorFactor, steps: usize, sigmas: f64) -> Result<Self> {
        match factor {
            PriorFactor::Uniform { lo, hi } => Self::new(*lo, *hi, steps),
            PriorFactor::Gaussian { mean, std } => {
                Self::new(mean - sigmas * std, mean + sigmas * std, steps)
            }
        }
    }

    pub fn cell_width(&self) -> f64 {
        (self.hi - self.lo) / self.steps as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.cell_width()
    }
}

/// Discretized Gibbs posterior over the 2-D affine parameter space
/// `(β, k)`: per-cell probability masses plus everything needed to audit
/// them (costs, discretized prior, log partition).
///
/// Cell masses are proportional to `P(center) · e^{-λ L̂(center)} · area`
/// and normalized in log space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridPosterior {
    pub beta_axis: GridAxis,
    pub k_axis: GridAxis,
    pub lambda: f64,
    pub prior_tag: String,
    /// Normalized posterior mass, β-major: `index = ib · k_steps + ik`.
    pub mass: Vec<f64>,
    /// Transformed empirical cost at each cell center.
    pub cost: Vec<f64>,
    /// Log mass of the discretized prior on the same cells (normalized).
    pub log_prior_mass: Vec<f64>,
    /// `ln Σ P(center)·area`: total unnormalized prior mass captured by
    /// the grid region (≤ 0 up to discretization error).
    pub log_prior_total: f64,
    /// `ln Σ P(center)·area·e^{-λ L̂}`: the grid approximation of
    /// `ln Z_λ`. Truncation to the grid region can only underestimate
    /// `Z`, which makes bounds built from it conservative.
    pub log_partition: f64,
}

/// Build a [`GridPosterior`] for a 2-D prior over `[k, β]` parameters.
///
/// The prior's first factor governs the gain `k`, the second the offset
/// `β`, matching the affine parameter layout; the grid is addressed as
/// `(β, k)`. `λ = 0` yields the discretized prior itself.
pub fn build_grid_posterior(
    prior: &Prior,
    objective: &EmpiricalObjective<'_>,
    lambda: f64,
    beta_axis: GridAxis,
    k_axis: GridAxis,
    prior_tag: &str,
) -> Result<GridPosterior> {
    if prior.dim() != 2 || objective.param_count() != 2 {
        return Err(Error::Config(
            "grid posteriors are only defined for 2-parameter controllers".into(),
        ));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let n_cells = beta_axis.steps * k_axis.steps;
    let log_area = beta_axis.cell_width().ln() + k_axis.cell_width().ln();
    let cells: Vec<Result<(f64, f64)>> = (0..n_cells)
        .into_par_iter()
        .map(|idx| {
            let ib = idx / k_axis.steps;
            let ik = idx % k_axis.steps;
            let theta = [k_axis.center(ik), beta_axis.center(ib)];
            let lp = prior.log_density(&theta);
            if lp == f64::NEG_INFINITY {
                // Outside the prior support: zero mass, cost still defined.
                let cost = objective.value(&theta)?;
                return Ok((f64::NEG_INFINITY, cost));
            }
            let cost = objective.value(&theta)?;
            Ok((lp + log_area - lambda * cost, cost))
        })
        .collect();
    let mut log_weights = Vec::with_capacity(n_cells);
    let mut costs = Vec::with_capacity(n_cells);
    let mut log_prior = Vec::with_capacity(n_cells);
    for cell in cells {
        let (lw, cost) = cell?;
        // Recover the prior-only weight by adding λ·cost back.
        log_prior.push(if lw == f64::NEG_INFINITY { lw } else { lw + lambda * cost });
        log_weights.push(lw);
        costs.push(cost);
    }
    let mass = normalized_from_log(&log_weights).map_err(|_| {
        Error::Precondition(
            "grid posterior has zero mass everywhere: the grid region lies outside the \
             prior support"
                .into(),
        )
    })?;
    let log_partition = log_sum_exp(&log_weights);
    let log_prior_total = log_sum_exp(&log_prior);
    let log_prior_mass: Vec<f64> = log_prior.iter().map(|&lp| lp - log_prior_total).collect();
    Ok(GridPosterior {
        beta_axis,
        k_axis,
        lambda,
        prior_tag: prior_tag.to_string(),
        mass,
        cost: costs,
        log_prior_mass,
        log_prior_total,
        log_partition,
    })
}

impl GridPosterior {
    fn index(&self, ib: usize, ik: usize) -> usize {
        ib * self.k_axis.steps + ik
    }

    /// Simplified Gibbs bound using the grid partition function; holds
    /// with probability `1 - δ`.
    pub fn qstar_exact_bound(&self, delta: f64, cap: f64, data_size: usize) -> Result<BoundCertificate> {
        check_lambda(self.lambda)?;
        check_probability("delta", delta)?;
        check_cap(cap)?;
        if data_size == 0 {
            return Err(Error::Config("bound needs a non-empty dataset".into()));
        }
        let bound = (delta.recip().ln() - self.log_partition) / self.lambda
            + self.lambda * cap * cap / (8.0 * data_size as f64);
        if !bound.is_finite() {
            return Err(Error::Precondition(format!("computed bound {bound} is not finite")));
        }
        Ok(BoundCertificate {
            schema_version: CERTIFICATE_SCHEMA_VERSION,
            mode: BoundMode::QstarExact,
            bound,
            probability: 1.0 - delta,
            delta,
            delta_hat: None,
            lambda: self.lambda,
            lambda_star: None,
            cap,
            data_size,
            prior_samples: None,
            z_hat: None,
            hoeffding: None,
            z_lower: None,
            log_partition: Some(self.log_partition),
            seed: None,
        })
    }

    /// Rebuild the posterior at a different inverse temperature without
    /// re-evaluating cell costs. A bound study sweeps `λ` over the same
    /// cost surface, so this turns an `O(cells · sequences)` rebuild
    /// into an `O(cells)` reweighting.
    pub fn reweighted(&self, lambda: f64) -> Result<GridPosterior> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be non-negative and finite, got {lambda}"
            )));
        }
        let log_weights: Vec<f64> = self
            .log_prior_mass
            .iter()
            .zip(&self.cost)
            .map(|(&lp, &c)| {
                if lp == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    lp + self.log_prior_total - lambda * c
                }
            })
            .collect();
        let mass = normalized_from_log(&log_weights).map_err(|_| {
            Error::Precondition("reweighted posterior has zero mass everywhere on the grid".into())
        })?;
        Ok(GridPosterior {
            lambda,
            mass,
            log_partition: log_sum_exp(&log_weights),
            ..self.clone()
        })
    }

    /// Free energy `E_Q[L̂] + (1/λ) KL(Q ‖ P)` of an arbitrary discrete
    /// distribution `q` on this grid's cells, with `P` the discretized
    /// prior. Mass on a zero-prior cell makes the KL (and the result)
    /// `+inf`, reported as such.
    pub fn free_energy(&self, q: &[f64]) -> Result<f64> {
        check_lambda(self.lambda)?;
        if q.len() != self.mass.len() {
            return Err(Error::Config(format!(
                "distribution has {} cells, grid has {}",
                q.len(),
                self.mass.len()
            )));
        }
        let total: f64 = q.iter().sum();
        if q.iter().any(|&v| v < 0.0) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "distribution must be non-negative and sum to 1 (sum = {total})"
            )));
        }
        let mut energy = 0.0;
        let mut kl = 0.0;
        for (i, &qi) in q.iter().enumerate() {
            if qi == 0.0 {
                continue;
            }
            energy += qi * self.cost[i];
            if self.log_prior_mass[i] == f64::NEG_INFINITY {
                return Ok(f64::INFINITY);
            }
            kl += qi * ((qi / total).ln() - self.log_prior_mass[i]);
        }
        Ok(energy + kl / self.lambda)
    }

    /// Draw one controller: inverse-CDF over cells, then uniform jitter
    /// inside the chosen cell. Returns affine parameters `[k, β]`.
    pub fn sample(&self, rng: &mut impl Rng) -> ControllerParams {
        let r: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = self.mass.len() - 1;
        for (i, &m) in self.mass.iter().enumerate() {
            acc += m;
            if r < acc {
                chosen = i;
                break;
            }
        }
        let ib = chosen / self.k_axis.steps;
        let ik = chosen % self.k_axis.steps;
        let jb: f64 = rng.random();
        let jk: f64 = rng.random();
        let beta = self.beta_axis.lo + (ib as f64 + jb) * self.beta_axis.cell_width();
        let k = self.k_axis.lo + (ik as f64 + jk) * self.k_axis.cell_width();
        ControllerParams {
            architecture: Architecture::Affine,
            theta: vec![k, beta],
        }
    }

    /// Marginal posterior mass over β (summing out `k`).
    pub fn beta_marginal(&self) -> Vec<(f64, f64)> {
        (0..self.beta_axis.steps)
            .map(|ib| {
                let m = (0..self.k_axis.steps).map(|ik| self.mass[self.index(ib, ik)]).sum();
                (self.beta_axis.center(ib), m)
            })
            .collect()
    }

    /// Marginal posterior mass over `k` (summing out β).
    pub fn k_marginal(&self) -> Vec<(f64, f64)> {
        (0..self.k_axis.steps)
            .map(|ik| {
                let m = (0..self.beta_axis.steps).map(|ib| self.mass[self.index(ib, ik)]).sum();
                (self.k_axis.center(ik), m)
            })
            .collect()
    }

    /// Full grid as CSV rows `beta,k,mass`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("beta,k,mass\n");
        for ib in 0..self.beta_axis.steps {
            for ik in 0..self.k_axis.steps {
                let _ = writeln!(
                    out,
                    "{},{},{}",
                    self.beta_axis.center(ib),
                    self.k_axis.center(ik),
                    self.mass[self.index(ib, ik)]
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{CostTransform, StageCost};
    use crate::dynamics::{generate_dataset, NoiseModel, StepNoise, SystemModel};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prior_log_densities_match_closed_forms() {
        let prior = Prior::new(vec![
            PriorFactor::Gaussian { mean: 0.0, std: 1.0 },
            PriorFactor::Uniform { lo: -5.0, hi: 5.0 },
        ])
        .unwrap();
        let expected = -0.9189385332046727 - 10.0_f64.ln();
        assert!((prior.log_density(&[0.0, 0.0]) - expected).abs() < 1e-15);
        assert_eq!(prior.log_density(&[0.0, 6.0]), f64::NEG_INFINITY);
        // Gradient: Gaussian pulls toward the mean, uniform is flat.
        let g = prior.grad_log_density(&[2.0, 1.0]);
        assert_eq!(g, vec![-2.0, 0.0]);
    }

    #[test]
    fn prior_sampling_matches_moments_and_support() {
        let prior = Prior::new(vec![
            PriorFactor::Gaussian { mean: 3.0, std: 1.5 },
            PriorFactor::Uniform { lo: -5.0, hi: 5.0 },
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws: Vec<Vec<f64>> = (0..8000).map(|_| prior.sample(&mut rng)).collect();
        let mean0 = draws.iter().map(|d| d[0]).sum::<f64>() / draws.len() as f64;
        assert!((mean0 - 3.0).abs() < 0.06, "gaussian mean {mean0}");
        assert!(draws.iter().all(|d| (-5.0..5.0).contains(&d[1])));
        let mean1 = draws.iter().map(|d| d[1]).sum::<f64>() / draws.len() as f64;
        assert!(mean1.abs() < 0.12, "uniform mean {mean1}");
    }

    #[test]
    fn support_clamp_pulls_uniform_coordinates_inside() {
        let prior = Prior::new(vec![
            PriorFactor::Gaussian { mean: 0.0, std: 1.0 },
            PriorFactor::Uniform { lo: -5.0, hi: 5.0 },
        ])
        .unwrap();
        let mut theta = vec![99.0, 7.5];
        prior.support_clamp(&mut theta);
        assert_eq!(theta[0], 99.0, "gaussian coordinates are untouched");
        assert!(theta[1] < 5.0 && theta[1] > 4.9999);
        assert!(prior.log_density(&theta).is_finite());
    }

    #[test]
    fn lambda_star_matches_the_closed_form() {
        let l8 = lambda_star(8, 0.2, 1.0).unwrap();
        assert!((l8 - 10.149089929436157).abs() < 1e-12);
        // The published rounding of this constant.
        assert!((l8 - 10.1482).abs() <= 1e-3);
        let l512 = lambda_star(512, 0.2, 1.0).unwrap();
        assert!((l512 - 81.19271943548925).abs() < 1e-12);
        assert!((l512 / l8 - 8.0).abs() < 1e-12, "scales with sqrt(s)");
        let halved = lambda_star(8, 0.2, 2.0).unwrap();
        assert!((halved - l8 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_star_minimizes_the_worst_case_bound() {
        // f(λ) = C + ln(1/δ)/λ + λ C²/(8 s) over a log sweep.
        let (s, delta, cap) = (8usize, 0.2, 1.0);
        let star = lambda_star(s, delta, cap).unwrap();
        let f = |lam: f64| cap + delta.recip().ln() / lam + lam * cap * cap / (8.0 * s as f64);
        let fstar = f(star);
        for i in 0..1000 {
            let lam = 10f64.powf(-2.0 + 4.0 * i as f64 / 999.0);
            assert!(f(lam) >= fstar - 1e-12, "f({lam}) = {} < f(λ*) = {fstar}", f(lam));
        }
    }

    #[test]
    fn lambda_star_rejects_out_of_range_arguments() {
        assert!(lambda_star(0, 0.2, 1.0).is_err());
        assert!(lambda_star(8, 0.0, 1.0).is_err());
        assert!(lambda_star(8, 1.0, 1.0).is_err());
        assert!(lambda_star(8, 0.2, 0.0).is_err());
    }

    #[test]
    fn theorem1_bound_matches_hand_arithmetic() {
        // Q = P: the log ratio vanishes.
        let b = theorem1_bound(0.5, 0.0, 2.0, 0.1, 1.0, 16).unwrap();
        let expected = 0.5 + 10.0_f64.ln() / 2.0 + 2.0 / 128.0;
        assert!((b - expected).abs() < 1e-15);
        // At λ = λ*, Q = P, L̂ = 0 the two remaining terms are equal and
        // the bound is 2 C √(ln(1/δ) / (8 s)).
        let star = lambda_star(8, 0.2, 1.0).unwrap();
        let b = theorem1_bound(0.0, 0.0, star, 0.2, 1.0, 8).unwrap();
        assert!((b - 0.3171590602948799).abs() < 1e-12);
        // Larger δ shrinks the bound strictly.
        let loose = theorem1_bound(0.5, 0.3, 5.0, 0.4, 1.0, 16).unwrap();
        let tight = theorem1_bound(0.5, 0.3, 5.0, 0.1, 1.0, 16).unwrap();
        assert!(loose < tight);
    }

    #[test]
    fn minimum_prior_sample_count_matches_hand_arithmetic() {
        let m = min_prior_samples(1.0, 1.0, 0.1).unwrap();
        assert!((m - 3.3991825420778534).abs() < 1e-12);
        assert_eq!(m.ceil() as u64, 4);
        // Large λC overflows to +inf instead of garbage.
        assert_eq!(min_prior_samples(1000.0, 1.0, 0.1).unwrap(), f64::INFINITY);
        // The feasibility inverse agrees with the forward formula.
        let lam = max_feasible_lambda(1.0, 0.1, 2000).unwrap();
        assert!((lam - 3.7537179263240543).abs() < 1e-12);
        let back = min_prior_samples(lam, 1.0, 0.1).unwrap();
        assert!((back - 2000.0).abs() < 1e-6);
    }

    #[test]
    fn hoeffding_deviation_matches_hand_arithmetic() {
        let h = hoeffding_deviation(1.0, 1.0, 0.1, 4);
        assert!((h - 0.33912731094128035).abs() < 1e-12);
        // Deviation shrinks like 1/√n_p.
        let h2 = hoeffding_deviation(1.0, 1.0, 0.1, 400);
        assert!((h / h2 - 10.0).abs() < 1e-9);
    }

    fn lti() -> SystemModel {
        SystemModel::ScalarLti { a: 0.8, b: 0.1, xbar: 2.0 }
    }

    fn lti_noise(horizon: usize) -> NoiseModel {
        let mut steps = vec![StepNoise::Zero { dim: 1 }];
        steps.extend(vec![StepNoise::Gaussian { mean: vec![0.3], std: vec![0.3] }; horizon]);
        NoiseModel::new(steps).unwrap()
    }

    fn lti_prior_normal() -> Prior {
        Prior::new(vec![
            PriorFactor::Gaussian { mean: 7.5621629952978004, std: 1.0 },
            PriorFactor::Gaussian { mean: 3.0, std: 1.5 },
        ])
        .unwrap()
    }

    #[test]
    fn gibbs_log_density_is_prior_minus_scaled_cost() {
        let sys = lti();
        let stage = StageCost::Quadratic { q: 5.0, r: 0.003 };
        let ds = generate_dataset(&lti_noise(10), 8, 11, "train");
        let objective = EmpiricalObjective {
            system: &sys,
            architecture: Architecture::Affine,
            stage: &stage,
            dataset: &ds,
            transform: CostTransform::new(1.0, 20.0).unwrap(),
        };
        let prior = lti_prior_normal();
        let theta = [7.0, 2.0];
        let cost = objective.value(&theta).unwrap();
        let gibbs = GibbsPosterior::new(&prior, 4.0, &objective).unwrap();
        let lq = gibbs.log_unnormalized(&theta).unwrap();
        assert!((lq - (prior.log_density(&theta) - 4.0 * cost)).abs() < 1e-12);
        // λ = 0 degenerates to the prior exactly.
        let flat = GibbsPosterior::new(&prior, 0.0, &objective).unwrap();
        assert_eq!(flat.log_unnormalized(&theta).unwrap(), prior.log_density(&theta));
    }

    #[test]
    fn equal_costs_under_a_uniform_prior_give_equal_densities() {
        // Symmetric setup: start at the origin, symmetric noise dataset.
        // Flipping β and the noise signs flips the whole trajectory, so
        // (k, β) and (k, -β) have identical empirical costs.
        let sys = SystemModel::ScalarLti { a: 0.8, b: 0.1, xbar: 0.0 };
        let stage = StageCost::Quadratic { q: 5.0, r: 0.003 };
        let base = generate_dataset(
            &NoiseModel::new(vec![
                StepNoise::Zero { dim: 1 },
                StepNoise::Gaussian { mean: vec![0.0], std: vec![0.3] },
                StepNoise::Gaussian { mean: vec![0.0], std: vec![0.3] },
            ])
            .unwrap(),
            4,
            5,
            "sym",
        );
        let mut ds = base.clone();
        for seq in &base.sequences {
            ds.sequences.push(seq.iter().map(|w| w.iter().map(|v| -v).collect()).collect());
        }
        let objective = EmpiricalObjective {
            system: &sys,
            architecture: Architecture::Affine,
            stage: &stage,
            dataset: &ds,
            transform: CostTransform::new(1.0, 1.0).unwrap(),
        };
        let prior = Prior::new(vec![
            PriorFactor::Uniform { lo: -2.0, hi: 18.0 },
            PriorFactor::Uniform { lo: -5.0, hi: 5.0 },
        ])
        .unwrap();
        let gibbs = GibbsPosterior::new(&prior, 3.0, &objective).unwrap();
        let a = gibbs.log_unnormalized(&[4.0, 1.25]).unwrap();
        let b = gibbs.log_unnormalized(&[4.0, -1.25]).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn three_point_gibbs_masses_match_hand_computation() {
        // Uniform 3-point prior, costs 0.1/0.5/0.9, λ = 2.
        let lw: Vec<f64> = [0.1, 0.5, 0.9].iter().map(|c| (1.0f64 / 3.0).ln() - 2.0 * c).collect();
        let masses = normalized_from_log(&lw).unwrap();
        let expected = [0.6056108089617322, 0.2721184774489677, 0.1222707135893002];
        for (m, e) in masses.iter().zip(expected) {
            assert!((m - e).abs() < 1e-12);
        }
    }

    #[test]
    fn log_space_normalization_survives_extreme_weights() {
        let masses = normalized_from_log(&[-2000.0, -2001.0, f64::NEG_INFINITY]).unwrap();
        assert!((masses.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(masses[0] > masses[1] && masses[2] == 0.0);
        assert!(normalized_from_log(&[f64::NEG_INFINITY; 3]).is_err());
    }

    struct GridFixture {
        sys: SystemModel,
        stage: StageCost,
        ds: crate::dynamics::NoiseDataset,
    }

    impl GridFixture {
        fn new(s: usize, seed: u64) -> Self {
            Self {
                sys: lti(),
                stage: StageCost::Quadratic { q: 5.0, r: 0.003 },
                ds: generate_dataset(&lti_noise(10), s, seed, "train"),
            }
        }

        fn objective(&self) -> EmpiricalObjective<'_> {
            EmpiricalObjective {
                system: &self.sys,
                architecture: Architecture::Affine,
                stage: &self.stage,
                dataset: &self.ds,
                transform: CostTransform::new(1.0, 20.0).unwrap(),
            }
        }
    }

    #[test]
    fn grid_masses_are_normalized_and_prior_at_lambda_zero() {
        let fx = GridFixture::new(4, 3);
        let objective = fx.objective();
        let prior = lti_prior_normal();
        let beta = GridAxis::covering(&prior.factors()[1], 40, 2.5).unwrap();
        let k = GridAxis::covering(&prior.factors()[0], 40, 2.5).unwrap();
        let grid = build_grid_posterior(&prior, &objective, 0.0, beta, k, "normal").unwrap();
        assert!((grid.mass.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (m, lp) in grid.mass.iter().zip(&grid.log_prior_mass) {
            assert!((m - lp.exp()).abs() < 1e-12, "λ=0 grid must equal the prior");
        }
    }

    #[test]
    fn reweighting_matches_direct_build_at_the_new_temperature() {
        let fx = GridFixture::new(4, 3);
        let objective = fx.objective();
        let prior = lti_prior_normal();
        let beta = GridAxis::covering(&prior.factors()[1], 30, 2.5).unwrap();
        let k = GridAxis::covering(&prior.factors()[0], 30, 2.5).unwrap();
        let base = build_grid_posterior(&prior, &objective, 5.0, beta, k, "normal").unwrap();

        for lambda in [0.0, 1.5, 12.0] {
            let direct =
                build_grid_posterior(&prior, &objective, lambda, base.beta_axis, base.k_axis, "normal")
                    .unwrap();
            let cheap = base.reweighted(lambda).unwrap();
            assert!((cheap.log_partition - direct.log_partition).abs() < 1e-9);
            for (a, b) in cheap.mass.iter().zip(&direct.mass) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(base.reweighted(f64::NAN).is_err());
    }

    #[test]
    fn symmetric_setup_gives_symmetric_grid_posterior() {
        // Origin start, ±-paired noise, zero-mean priors, symmetric axes:
        // the posterior must be symmetric under β ↔ -β.
        let sys = SystemModel::ScalarLti { a: 0.8, b: 0.1, xbar: 0.0 };
        let stage = StageCost::Quadratic { q: 5.0, r: 0.003 };
        let base = generate_dataset(&lti_noise(6), 3, 9, "sym");
        let mut ds = base.clone();
        for seq in &base.sequences {
            ds.sequences.push(seq.iter().map(|w| w.iter().map(|v| -v).collect()).collect());
        }
        // Note: lti_noise has nonzero mean; recenter by pairing ±w, which
        // makes the dataset symmetric regardless.
        let objective = EmpiricalObjective {
            system: &sys,
            architecture: Architecture::Affine,
            stage: &stage,
            dataset: &ds,
            transform: CostTransform::new(1.0, 1.0).unwrap(),
        };
        let prior = Prior::new(vec![
            PriorFactor::Gaussian { mean: 5.0, std: 2.0 },
            PriorFactor::Gaussian { mean: 0.0, std: 1.5 },
        ])
        .unwrap();
        let beta = GridAxis::new(-3.0, 3.0, 41).unwrap();
        let k = GridAxis::new(2.0, 8.0, 21).unwrap();
        let grid = build_grid_posterior(&prior, &objective, 5.0, beta, k, "sym").unwrap();
        for ib in 0..41 {
            for ik in 0..21 {
                let a = grid.mass[grid.index(ib, ik)];
                let b = grid.mass[grid.index(40 - ib, ik)];
                assert!((a - b).abs() < 1e-6, "asymmetry at ({ib}, {ik}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn per_draw_bound_on_the_grid_matches_the_simplified_bound() {
        // For θ drawn from Q*, ln dQ*/dP(θ) = -λ L̂(θ) - ln Z, so the
        // per-draw bound is the same number at every cell.
        let fx = GridFixture::new(8, 21);
        let objective = fx.objective();
        let prior = lti_prior_normal();
        let beta = GridAxis::covering(&prior.factors()[1], 30, 2.5).unwrap();
        let k = GridAxis::covering(&prior.factors()[0], 30, 2.5).unwrap();
        let lambda = lambda_star(8, 0.2, 1.0).unwrap();
        let grid = build_grid_posterior(&prior, &objective, lambda, beta, k, "normal").unwrap();
        let simplified = grid.qstar_exact_bound(0.2, 1.0, 8).unwrap().bound;
        for idx in [0usize, 17, 450, 899] {
            let cost = grid.cost[idx];
            let log_ratio = -lambda * cost - grid.log_partition;
            let per_draw = theorem1_bound(cost, log_ratio, lambda, 0.2, 1.0, 8).unwrap();
            assert!(
                (per_draw - simplified).abs() < 1e-9,
                "cell {idx}: {per_draw} vs {simplified}"
            );
        }
    }

    #[test]
    fn free_energy_is_minimized_by_the_gibbs_posterior() {
        let fx = GridFixture::new(6, 13);
        let objective = fx.objective();
        let prior = lti_prior_normal();
        let beta = GridAxis::covering(&prior.factors()[1], 25, 2.5).unwrap();
        let k = GridAxis::covering(&prior.factors()[0], 25, 2.5).unwrap();
        let grid = build_grid_posterior(&prior, &objective, 8.0, beta, k, "normal").unwrap();

        // KL(P‖P) = 0, so the prior's free energy is its mean cost.
        let prior_mass: Vec<f64> = grid.log_prior_mass.iter().map(|lp| lp.exp()).collect();
        let f_prior = grid.free_energy(&prior_mass).unwrap();
        let mean_cost: f64 = prior_mass.iter().zip(&grid.cost).map(|(p, c)| p * c).sum();
        assert!((f_prior - mean_cost).abs() < 1e-9);

        let f_gibbs = grid.free_energy(&grid.mass).unwrap();
        assert!(f_gibbs <= f_prior + 1e-12);
        // And below randomly perturbed distributions.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let mut q: Vec<f64> = grid
                .mass
                .iter()
                .map(|&m| m * rng.random_range(0.2..5.0_f64))
                .collect();
            let total: f64 = q.iter().sum();
            q.iter_mut().for_each(|v| *v /= total);
            let f_q = grid.free_energy(&q).unwrap();
            assert!(f_gibbs <= f_q + 1e-12, "gibbs {f_gibbs} vs perturbed {f_q}");
        }
        // Identity: F(Q*) = -(1/λ) ln Σ p_i e^{-λ c_i} over normalized
        // prior masses.
        let lw: Vec<f64> = grid
            .log_prior_mass
            .iter()
            .zip(&grid.cost)
            .map(|(lp, c)| lp - grid.lambda * c)
            .collect();
        let expected = -log_sum_exp(&lw) / grid.lambda;
        assert!((f_gibbs - expected).abs() < 1e-9);
    }

    #[test]
    fn free_energy_of_a_point_mass_approaches_the_minimum_cost() {
        let fx = GridFixture::new(6, 13);
        let objective = fx.objective();
        let prior = lti_prior_normal();
        let beta = GridAxis::covering(&prior.factors()[1], 25, 2.5).unwrap();
        let k = GridAxis::covering(&prior.factors()[0], 25, 2.5).unwrap();
        let grid = build_grid_posterior(&prior, &objective, 1e6, beta, k, "normal").unwrap();
        let (best, min_cost) = grid
            .cost
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, &c)| (i, c))
            .unwrap();
        let mut point = vec![0.0; grid.mass.len()];
        point[best] = 1.0;
        let f_point = grid.free_energy(&point).unwrap();
        assert!((f_point - min_cost).abs() < 1e-3, "{f_point} vs {min_cost}");
        assert!(grid.free_energy(&grid.mass).unwrap() <= f_point + 1e-12);
    }

    #[test]
    fn free_energy_is_infinite_off_the_prior_support() {
        let fx = GridFixture::new(3, 2);
        let objective = fx.objective();
        // Uniform β prior narrower than the grid: outer cells get zero
        // prior mass.
        let prior = Prior::new(vec![
            PriorFactor::Gaussian { mean: 7.5621629952978004, std: 1.0 },
            PriorFactor::Uniform { lo: -1.0, hi: 1.0 },
        ])
        .unwrap();
        let beta = GridAxis::new(-3.0, 3.0, 9).unwrap();
        let k = GridAxis::new(5.0, 10.0, 5).unwrap();
        let grid = build_grid_posterior(&prior, &objective, 2.0, beta, k, "narrow").unwrap();
        // Outermost β cells lie outside [-1, 1].
        assert_eq!(grid.mass[grid.index(0, 0)], 0.0);
        let mut q = vec![0.0; grid.mass.len()];
        q[grid.index(0, 0)] = 1.0;
        assert_eq!(grid.free_energy(&q).unwrap(), f64::INFINITY);
    }

    #[test]
    fn grid_outside_the_support_entirely_is_an_error() {
        let fx = GridFixture::new(3, 2);
        let objective = fx.objective();
        let prior = Prior::new(vec![
            PriorFactor::Uniform { lo: 5.0, hi: 6.0 },
            PriorFactor::Uniform { lo: -1.0, hi: 1.0 },
        ])
        .unwrap();
        let beta = GridAxis::new(2.0, 3.0, 4).unwrap();
        let k = GridAxis::new(5.0, 6.0, 4).unwrap();
        let err = build_grid_posterior(&prior, &objective, 2.0, beta, k, "off").unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn grid_sampling_is_reproducible_and_respects_masses() {
        let fx = GridFixture::new(4, 6);
        let objective = fx.objective();
        let prior = lti_prior_normal();
        // Single-cell grid: every draw lands in that cell.
        let beta = GridAxis::new(1.0, 2.0, 1).unwrap();
        let k = GridAxis::new(7.0, 8.0, 1).unwrap();
        let single = build_grid_posterior(&prior, &objective, 2.0, beta, k, "one").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let draw = single.sample(&mut rng);
            assert!((7.0..8.0).contains(&draw.theta[0]));
            assert!((1.0..2.0).contains(&draw.theta[1]));
        }
        // Determinism under a fixed seed.
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(single.sample(&mut r1).theta, single.sample(&mut r2).theta);

        // Two equal-mass cells: draw frequencies near 1/2 (3σ of a
        // binomial with p = 1/2, n = 10⁴ is 0.015).
        let beta2 = GridAxis::new(-1.0, 1.0, 2).unwrap();
        let sym_prior = Prior::new(vec![
            PriorFactor::Gaussian { mean: 7.5, std: 1.0 },
            PriorFactor::Uniform { lo: -1.0, hi: 1.0 },
        ])
        .unwrap();
        let grid2 = build_grid_posterior(&sym_prior, &objective, 0.0, beta2, k, "two").unwrap();
        assert!((grid2.mass[0] - 0.5).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut left = 0usize;
        for _ in 0..10_000 {
            if grid2.sample(&mut rng).theta[1] < 0.0 {
                left += 1;
            }
        }
        let freq = left as f64 / 10_000.0;
        assert!((freq - 0.5).abs() < 0.015, "frequency {freq}");
    }

    #[test]
    fn marginals_sum_the_grid_correctly() {
        let fx = GridFixture::new(4, 6);
        let objective = fx.objective();
        let prior = lti_prior_normal();
        let beta = GridAxis::covering(&prior.factors()[1], 12, 2.0).unwrap();
        let k = GridAxis::covering(&prior.factors()[0], 10, 2.0).unwrap();
        let grid = build_grid_posterior(&prior, &objective, 3.0, beta, k, "normal").unwrap();
        let bm = grid.beta_marginal();
        let km = grid.k_marginal();
        assert_eq!(bm.len(), 12);
        assert_eq!(km.len(), 10);
        assert!((bm.iter().map(|(_, m)| m).sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((km.iter().map(|(_, m)| m).sum::<f64>() - 1.0).abs() < 1e-9);
        let csv = grid.to_csv();
        assert!(csv.starts_with("beta,k,mass\n"));
        assert_eq!(csv.lines().count(), 1 + 12 * 10);
    }

    #[test]
    fn empirical_partition_bound_needs_enough_samples() {
        let fx = GridFixture::new(8, 21);
        let objective = fx.objective();
        let prior = lti_prior_normal();
        let gibbs = GibbsPosterior::new(&prior, 3.0, &objective).unwrap();
        // min_prior_samples(3, 1, 0.1) ≈ (e³-1)² ln10 / 2 ≈ 421.
        let err = gibbs.qstar_bound_empirical(0.2, 0.1, 100, 7).unwrap_err();
        match err {
            Error::Precondition(msg) => assert!(msg.contains("prior samples"), "{msg}"),
            other => panic!("unexpected error {other}"),
        }
        let cert = gibbs.qstar_bound_empirical(0.2, 0.1, 2000, 7).unwrap();
        assert_eq!(cert.mode, BoundMode::QstarEmpirical);
        assert!(cert.bound.is_finite() && cert.bound > 0.0);
        assert!((cert.probability - 0.8 * 0.9).abs() < 1e-12);
        // Conservativeness: the corrected partition bound never exceeds
        // the plug-in estimate.
        assert!(cert.z_lower.unwrap() <= cert.z_hat.unwrap());
        // Reproducibility.
        let again = gibbs.qstar_bound_empirical(0.2, 0.1, 2000, 7).unwrap();
        assert_eq!(cert.z_hat, again.z_hat);
        assert_eq!(cert.bound, again.bound);
    }

    #[test]
    fn degenerate_zero_cost_gives_the_closed_form_bound() {
        // With q = r = 0 every controller has L̂ = 0, so Ẑ = 1 exactly.
        let sys = lti();
        let stage = StageCost::Quadratic { q: 0.0, r: 0.0 };
        let ds = generate_dataset(&lti_noise(10), 8, 11, "train");
        let objective = EmpiricalObjective {
            system: &sys,
            architecture: Architecture::Affine,
            stage: &stage,
            dataset: &ds,
            transform: CostTransform::new(1.0, 20.0).unwrap(),
        };
        let prior = lti_prior_normal();
        let gibbs = GibbsPosterior::new(&prior, 1.0, &objective).unwrap();
        let cert = gibbs.qstar_bound_empirical(0.25, 0.1, 64, 3).unwrap();
        assert!((cert.z_hat.unwrap() - 1.0).abs() < 1e-15);
        let h = hoeffding_deviation(1.0, 1.0, 0.1, 64);
        let expected = 4.0_f64.ln() - (1.0 - h).ln() + 1.0 / 64.0;
        assert!((cert.bound - expected).abs() < 1e-12);
    }

    #[test]
    fn empirical_bound_approaches_the_grid_bound() {
        // Small-λ regime where e^{-λL̂} is well conditioned: the
        // Monte-Carlo bound should approach the exact-grid one.
        let fx = GridFixture::new(8, 21);
        let objective = fx.objective();
        let prior = lti_prior_normal();
        let lambda = 1.5;
        let beta = GridAxis::covering(&prior.factors()[1], 120, 5.0).unwrap();
        let k = GridAxis::covering(&prior.factors()[0], 120, 5.0).unwrap();
        let grid = build_grid_posterior(&prior, &objective, lambda, beta, k, "normal").unwrap();
        let exact = grid.qstar_exact_bound(0.2, 1.0, 8).unwrap().bound;
        let gibbs = GibbsPosterior::new(&prior, lambda, &objective).unwrap();
        let emp = gibbs.qstar_bound_empirical(0.2, 0.1, 4000, 17).unwrap();
        assert!(
            (emp.bound - exact).abs() < 0.06,
            "empirical {} vs exact {exact}",
            emp.bound
        );
        // The Monte-Carlo route is conservative relative to the plug-in.
        assert!(emp.bound >= exact - 0.02);
    }

    #[test]
    fn certificates_roundtrip_through_json() {
        let fx = GridFixture::new(4, 6);
        let objective = fx.objective();
        let prior = lti_prior_normal();
        let gibbs = GibbsPosterior::new(&prior, 1.0, &objective).unwrap();
        let cert = gibbs.qstar_bound_empirical(0.2, 0.1, 64, 3).unwrap();
        let dir = std::env::temp_dir().join(format!("snoc-cert-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("certificate.json");
        cert.save(&path).unwrap();
        let loaded = BoundCertificate::load(&path).unwrap();
        assert_eq!(loaded.bound, cert.bound);
        assert_eq!(loaded.mode, cert.mode);
        assert_eq!(loaded.z_hat, cert.z_hat);
        std::fs::remove_dir_all(&dir).ok();
    }
}
