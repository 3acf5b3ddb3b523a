//! Scenario presets and the commands that turn a configuration into
//! on-disk artifacts.
//!
//! A single [`ExperimentConfig`] describes everything a run needs: the
//! plant, the disturbance distribution, the stage cost, the prior, and
//! the optimization/certification budgets. Commands consume a config
//! plus an output directory and write deterministic artifacts:
//!
//! - [`cmd_gen_data`]: the training disturbance dataset as CSV,
//! - [`cmd_train_empirical`]: a controller fit by gradient descent on
//!   the raw empirical cost,
//! - [`cmd_train_benchmark`]: the scalar-scenario reference controller
//!   (mean-compensating offset, gain fit on a large dataset),
//! - [`cmd_train_svgd`]: a particle ensemble approximating the Gibbs
//!   posterior, plus one selected controller,
//! - [`cmd_certify`]: a high-probability bound certificate for the
//!   Gibbs posterior,
//! - [`cmd_evaluate`]: closed-loop performance of a saved controller
//!   (or the zero-input baseline) on a fresh test set,
//! - [`cmd_bound_study`]: a sweep of certified bounds against
//!   sampled true costs over data sizes, confidence levels and priors,
//! - [`cmd_grid_posterior`]: the exact (gridded) posterior with its
//!   marginals.
//!
//! Every command re-derives its inputs from the config and master seed,
//! so re-running a command into a fresh directory reproduces the same
//! bytes. Each command also writes `resolved_config.json`, the exact
//! configuration it ran with.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controllers::{build_policy, Architecture, ControllerFile, ControllerParams, EnsembleFile};
use crate::cost::{
    default_gamma, empirical_cost, fh_cost, CostTransform, EmpiricalObjective, Obstacle,
    RobotCostParams, StageCost,
};
use crate::dynamics::{
    generate_dataset, robot_position, rollout, NoiseDataset, NoiseModel, Policy, RobotParams,
    StepNoise, SystemModel, ZeroPolicy,
};
use crate::error::{Error, Result};
use crate::pacbayes::{
    build_grid_posterior, lambda_star, max_feasible_lambda, BoundCertificate, BoundMode,
    GibbsPosterior, GridAxis, GridPosterior, Prior, PriorFactor,
};
use crate::rng::{derive_seed, domain_rng, substream_rng};
use crate::svgd::{cost_and_grad, train_svgd, TrainOptions};

/// Schema version written into (and required from) config files.
pub const CONFIG_SCHEMA_VERSION: u32 = 1;
/// Schema version of [`EvaluationReport`] files.
pub const EVALUATION_SCHEMA_VERSION: u32 = 1;

pub const DATASET_FILE: &str = "dataset.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const EMPIRICAL_CONTROLLER_FILE: &str = "controller_empirical.json";
pub const BENCHMARK_CONTROLLER_FILE: &str = "controller_benchmark.json";
pub const SVGD_CONTROLLER_FILE: &str = "controller_svgd.json";
pub const ENSEMBLE_FILE: &str = "ensemble.json";
pub const CERTIFICATE_FILE: &str = "certificate.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const BASELINE_EVALUATION_FILE: &str = "evaluation_baseline.json";
pub const BOUND_STUDY_FILE: &str = "bound_study.csv";
pub const GRID_FILE: &str = "grid.csv";
pub const BETA_MARGINAL_FILE: &str = "marginal_beta.csv";
pub const K_MARGINAL_FILE: &str = "marginal_k.csv";
pub const EMPIRICAL_LOG_FILE: &str = "training_log_empirical.csv";
pub const BENCHMARK_LOG_FILE: &str = "training_log_benchmark.csv";
pub const SVGD_LOG_FILE: &str = "training_log_svgd.csv";

/// Gaussian prior axes are gridded out to this many standard deviations,
/// which captures at least 95% of the joint prior mass in two dimensions.
const GRID_SIGMAS: f64 = 2.5;
/// Denominator floor shared by all adaptive-gradient loops.
const ADAGRAD_EPS: f64 = 1e-8;

/// Which scenario a config describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Lti,
    Robots,
}

/// Budget preset: full-size runs or a fast continuous-integration cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Paper,
    Ci,
}

/// Prior families available from a config.
///
/// The gain-centered variants place a Gaussian on the feedback gain
/// around the certainty-equivalent (noise-free) optimum and an
/// independent offset factor beside it; they are only meaningful for the
/// scalar scenario. The spherical variant covers any architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec {
    /// `k ~ N(k_ce, gain_std²)`, `β ~ U(offset_lo, offset_hi)`.
    GainWithUniformOffset { gain_std: f64, offset_lo: f64, offset_hi: f64 },
    /// `k ~ N(k_ce, gain_std²)`, `β ~ N(offset_mean, offset_std²)`.
    GainWithGaussianOffset { gain_std: f64, offset_mean: f64, offset_std: f64 },
    /// Zero-mean isotropic Gaussian over the whole parameter vector.
    Spherical { std: f64 },
}

impl PriorSpec {
    /// Short label used in CSV outputs.
    pub fn tag(&self) -> &'static str {
        match self {
            PriorSpec::GainWithUniformOffset { .. } => "uniform",
            PriorSpec::GainWithGaussianOffset { .. } => "normal",
            PriorSpec::Spherical { .. } => "spherical",
        }
    }

    /// Standard uniform-offset prior of the scalar scenario.
    pub fn uniform_offset() -> Self {
        PriorSpec::GainWithUniformOffset { gain_std: 1.0, offset_lo: -5.0, offset_hi: 5.0 }
    }

    /// Standard Gaussian-offset prior of the scalar scenario, centered
    /// on the mean-compensating offset.
    pub fn gaussian_offset() -> Self {
        PriorSpec::GainWithGaussianOffset { gain_std: 1.0, offset_mean: 3.0, offset_std: 1.5 }
    }

    /// Concrete prior for `cfg`'s architecture.
    pub fn build(&self, cfg: &ExperimentConfig) -> Result<Prior> {
        match self {
            PriorSpec::GainWithUniformOffset { gain_std, offset_lo, offset_hi } => {
                let center = cfg.certainty_equivalent_gain()?;
                Prior::new(vec![
                    PriorFactor::Gaussian { mean: center, std: *gain_std },
                    PriorFactor::Uniform { lo: *offset_lo, hi: *offset_hi },
                ])
            }
            PriorSpec::GainWithGaussianOffset { gain_std, offset_mean, offset_std } => {
                let center = cfg.certainty_equivalent_gain()?;
                Prior::new(vec![
                    PriorFactor::Gaussian { mean: center, std: *gain_std },
                    PriorFactor::Gaussian { mean: *offset_mean, std: *offset_std },
                ])
            }
            PriorSpec::Spherical { std } => {
                let dim = cfg.architecture().param_count(&cfg.system());
                Prior::spherical_gaussian(dim, *std)
            }
        }
    }
}

/// Particle-training budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvgdSettings {
    pub particles: usize,
    pub iterations: usize,
    pub step_size: f64,
    /// Abort when the mean objective exceeds this multiple of its best
    /// value (shared with the plain-descent trainers).
    pub divergence_factor: f64,
}

/// Plain gradient-descent budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentSettings {
    pub iterations: usize,
    pub step_size: f64,
}

/// Grid of cells swept by [`cmd_bound_study`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundStudySettings {
    pub data_sizes: Vec<usize>,
    pub deltas: Vec<f64>,
    pub priors: Vec<PriorSpec>,
    /// Posterior draws whose true cost is estimated per cell.
    pub draws: usize,
    /// Grid resolution per axis for the exact posterior.
    pub grid_steps: usize,
    /// Size of the shared test set used to approximate true costs.
    pub test_sequences: usize,
}

/// Scalar-scenario plant, disturbance and cost constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtiSettings {
    pub a: f64,
    pub b: f64,
    /// Nominal initial state.
    pub xbar: f64,
    /// Per-step disturbance mean (steps `t ≥ 1`; the initial state is
    /// not perturbed).
    pub noise_mean: f64,
    pub noise_std: f64,
    /// State weight of the quadratic stage cost.
    pub q: f64,
    /// Input weight of the quadratic stage cost.
    pub r: f64,
}

/// Robot-scenario plant, disturbance and cost constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotSettings {
    pub dynamics: RobotParams,
    pub q_pos: f64,
    pub q_vel: f64,
    pub input_weight: f64,
    /// Robot-robot distance below which the proximity penalty applies;
    /// also the distance that counts as a collision during evaluation.
    pub collision_margin: f64,
    /// Softening of the proximity penalty.
    pub softening: f64,
    pub obstacles: Vec<Obstacle>,
    pub obstacle_margin: f64,
    /// Standard deviation of the initial position perturbation
    /// (velocities start unperturbed).
    pub init_position_std: f64,
    /// Controller internal state size.
    pub n_xi: usize,
    /// Controller equilibrium layer size.
    pub n_zeta: usize,
    /// Test rollouts run this many steps (≥ the training horizon) to
    /// expose long-run behavior.
    pub eval_horizon: usize,
}

/// Scenario-specific half of a config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioConfig {
    Lti(LtiSettings),
    Robots(RobotSettings),
}

/// Complete description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Master seed; every random stream is derived from it by domain.
    pub seed: u64,
    /// Training rollout horizon `T`.
    pub horizon: usize,
    /// Number of training disturbance sequences `s`.
    pub train_sequences: usize,
    /// Number of test sequences drawn by `evaluate`.
    pub test_sequences: usize,
    /// Confidence parameter of the certified bound.
    pub delta: f64,
    /// Confidence parameter of the Monte-Carlo partition estimate.
    pub delta_hat: f64,
    /// Range bound `C` of the transformed cost.
    pub cost_cap: f64,
    /// Cost normalization; `None` uses the stage cost of the nominal
    /// initial state.
    pub gamma: Option<f64>,
    pub prior: PriorSpec,
    /// Monte-Carlo sample count for the empirical partition estimate.
    pub prior_samples: usize,
    /// Grid resolution per axis for exact-posterior commands.
    pub grid_steps: usize,
    /// Which certificate this pipeline targets; also fixes the inverse
    /// temperature used for posterior training.
    pub certification: BoundMode,
    /// Dataset size the benchmark gain is fit on.
    pub benchmark_sequences: usize,
    pub svgd: SvgdSettings,
    pub empirical: DescentSettings,
    pub bound_study: BoundStudySettings,
    pub scenario: ScenarioConfig,
}

impl ExperimentConfig {
    /// Ready-made configuration for a scenario at a given budget.
    pub fn preset(scenario: Scenario, profile: Profile) -> Self {
        let bound_study = BoundStudySettings {
            data_sizes: vec![8, 32, 128, 512],
            deltas: vec![0.1, 0.2, 0.4],
            priors: vec![PriorSpec::uniform_offset(), PriorSpec::gaussian_offset()],
            draws: 10,
            grid_steps: 200,
            test_sequences: 1024,
        };
        let mut cfg = match scenario {
            Scenario::Lti => ExperimentConfig {
                schema_version: CONFIG_SCHEMA_VERSION,
                seed: 1,
                horizon: 10,
                train_sequences: 512,
                test_sequences: 1024,
                delta: 0.2,
                delta_hat: 0.1,
                cost_cap: 1.0,
                gamma: None,
                prior: PriorSpec::uniform_offset(),
                prior_samples: 2000,
                grid_steps: 200,
                certification: BoundMode::QstarExact,
                benchmark_sequences: 1024,
                svgd: SvgdSettings {
                    particles: 64,
                    iterations: 500,
                    step_size: 0.05,
                    divergence_factor: 10.0,
                },
                empirical: DescentSettings { iterations: 3000, step_size: 0.2 },
                bound_study,
                scenario: ScenarioConfig::Lti(LtiSettings {
                    a: 0.8,
                    b: 0.1,
                    xbar: 2.0,
                    noise_mean: 0.3,
                    noise_std: 0.3,
                    q: 5.0,
                    r: 0.003,
                }),
            },
            Scenario::Robots => ExperimentConfig {
                schema_version: CONFIG_SCHEMA_VERSION,
                seed: 1,
                horizon: 100,
                train_sequences: 30,
                test_sequences: 500,
                delta: 0.1,
                delta_hat: 0.1,
                cost_cap: 1.0,
                gamma: None,
                prior: PriorSpec::Spherical { std: 7.0 },
                prior_samples: 2000,
                grid_steps: 200,
                certification: BoundMode::QstarEmpirical,
                benchmark_sequences: 1024,
                svgd: SvgdSettings {
                    particles: 16,
                    iterations: 1200,
                    step_size: 0.02,
                    divergence_factor: 10.0,
                },
                empirical: DescentSettings { iterations: 1200, step_size: 0.02 },
                bound_study,
                scenario: ScenarioConfig::Robots(RobotSettings {
                    dynamics: RobotParams {
                        mass: 1.0,
                        c1: 5.0,
                        c2: 0.1,
                        kp: 4.0,
                        dt: 0.05,
                        starts: vec![[-2.0, -2.0], [2.0, -2.0]],
                        targets: vec![[2.0, 2.0], [-2.0, 2.0]],
                    },
                    q_pos: 1.0,
                    q_vel: 0.2,
                    input_weight: 0.05,
                    collision_margin: 0.5,
                    softening: 0.05,
                    obstacles: vec![
                        Obstacle { center: [-1.5, 0.0], radius: 0.75 },
                        Obstacle { center: [1.5, 0.0], radius: 0.75 },
                    ],
                    obstacle_margin: 0.5,
                    init_position_std: 0.2,
                    n_xi: 8,
                    n_zeta: 8,
                    eval_horizon: 400,
                }),
            },
        };
        if profile == Profile::Ci {
            match scenario {
                Scenario::Lti => {
                    cfg.train_sequences = 64;
                    cfg.test_sequences = 256;
                    cfg.prior_samples = 500;
                    cfg.grid_steps = 100;
                    cfg.svgd.particles = 16;
                    cfg.svgd.iterations = 200;
                    cfg.empirical.iterations = 2000;
                    cfg.bound_study = BoundStudySettings {
                        data_sizes: vec![8, 64],
                        deltas: vec![0.2, 0.4],
                        priors: cfg.bound_study.priors,
                        draws: 10,
                        grid_steps: 80,
                        test_sequences: 256,
                    };
                }
                Scenario::Robots => {
                    cfg.horizon = 40;
                    cfg.train_sequences = 10;
                    cfg.test_sequences = 100;
                    cfg.prior_samples = 500;
                    cfg.svgd.particles = 8;
                    cfg.svgd.iterations = 400;
                    cfg.empirical.iterations = 400;
                }
            }
        }
        cfg
    }

    pub fn scenario(&self) -> Scenario {
        match &self.scenario {
            ScenarioConfig::Lti(_) => Scenario::Lti,
            ScenarioConfig::Robots(_) => Scenario::Robots,
        }
    }

    fn lti(&self) -> Result<&LtiSettings> {
        match &self.scenario {
            ScenarioConfig::Lti(s) => Ok(s),
            ScenarioConfig::Robots(_) => {
                Err(Error::Config("this operation is only defined for the scalar scenario".into()))
            }
        }
    }

    fn robots(&self) -> Result<&RobotSettings> {
        match &self.scenario {
            ScenarioConfig::Robots(s) => Ok(s),
            ScenarioConfig::Lti(_) => {
                Err(Error::Config("this operation is only defined for the robot scenario".into()))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        for (name, v) in [
            ("train_sequences", self.train_sequences),
            ("test_sequences", self.test_sequences),
            ("prior_samples", self.prior_samples),
            ("benchmark_sequences", self.benchmark_sequences),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [("delta", self.delta), ("delta_hat", self.delta_hat)] {
            if !(v.is_finite() && v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie strictly between 0 and 1")));
            }
        }
        if !(self.cost_cap.is_finite() && self.cost_cap > 0.0) {
            return Err(Error::Config("cost_cap must be positive and finite".into()));
        }
        if let Some(g) = self.gamma {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::Config("gamma must be positive and finite when given".into()));
            }
        }
        if self.grid_steps < 2 {
            return Err(Error::Config("grid_steps must be at least 2".into()));
        }
        if self.svgd.particles == 0 {
            return Err(Error::Config("svgd.particles must be at least 1".into()));
        }
        if !(self.svgd.step_size.is_finite() && self.svgd.step_size > 0.0)
            || !(self.empirical.step_size.is_finite() && self.empirical.step_size > 0.0)
        {
            return Err(Error::Config("step sizes must be positive and finite".into()));
        }
        if !(self.svgd.divergence_factor.is_finite() && self.svgd.divergence_factor > 1.0) {
            return Err(Error::Config("svgd.divergence_factor must exceed 1".into()));
        }
        let bs = &self.bound_study;
        if bs.data_sizes.is_empty() || bs.deltas.is_empty() || bs.priors.is_empty() {
            return Err(Error::Config("bound_study axes must be non-empty".into()));
        }
        if bs.data_sizes.contains(&0) {
            return Err(Error::Config("bound_study.data_sizes must be at least 1".into()));
        }
        if bs.deltas.iter().any(|d| !(d.is_finite() && *d > 0.0 && *d < 1.0)) {
            return Err(Error::Config(
                "bound_study.deltas must lie strictly between 0 and 1".into(),
            ));
        }
        if bs.draws == 0 || bs.grid_steps < 2 || bs.test_sequences == 0 {
            return Err(Error::Config(
                "bound_study draws, grid_steps and test_sequences must be positive".into(),
            ));
        }
        match &self.scenario {
            ScenarioConfig::Lti(s) => {
                let finite = [s.a, s.b, s.xbar, s.noise_mean, s.noise_std, s.q, s.r];
                if finite.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config("scalar scenario constants must be finite".into()));
                }
                if s.b == 0.0 {
                    return Err(Error::Config("scalar input gain b must be non-zero".into()));
                }
                if s.noise_std < 0.0 || s.q < 0.0 || s.r < 0.0 {
                    return Err(Error::Config(
                        "noise_std and cost weights must be non-negative".into(),
                    ));
                }
            }
            ScenarioConfig::Robots(s) => {
                if self.certification == BoundMode::QstarExact {
                    return Err(Error::Config(
                        "exact certification requires the scalar scenario".into(),
                    ));
                }
                if !(s.init_position_std.is_finite() && s.init_position_std >= 0.0) {
                    return Err(Error::Config(
                        "init_position_std must be non-negative and finite".into(),
                    ));
                }
                if s.eval_horizon == 0 {
                    return Err(Error::Config("eval_horizon must be at least 1".into()));
                }
                self.system().validate()?;
            }
        }
        if self.certification == BoundMode::Theorem1 {
            return Err(Error::Config(
                "certification must be qstar-exact or qstar-empirical".into(),
            ));
        }
        self.architecture().validate()?;
        self.stage().validate()?;
        self.prior_distribution()?;
        self.transform()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Parse(format!(
                "unsupported config schema version {}",
                cfg.schema_version
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn system(&self) -> SystemModel {
        match &self.scenario {
            ScenarioConfig::Lti(s) => SystemModel::ScalarLti { a: s.a, b: s.b, xbar: s.xbar },
            ScenarioConfig::Robots(s) => SystemModel::Robots(s.dynamics.clone()),
        }
    }

    pub fn stage(&self) -> StageCost {
        match &self.scenario {
            ScenarioConfig::Lti(s) => StageCost::Quadratic { q: s.q, r: s.r },
            ScenarioConfig::Robots(s) => StageCost::Robots(RobotCostParams {
                targets: s.dynamics.targets.clone(),
                q_pos: s.q_pos,
                q_vel: s.q_vel,
                r: s.input_weight,
                collision_margin: s.collision_margin,
                softening: s.softening,
                obstacles: s.obstacles.clone(),
                obstacle_margin: s.obstacle_margin,
            }),
        }
    }

    pub fn architecture(&self) -> Architecture {
        match &self.scenario {
            ScenarioConfig::Lti(_) => Architecture::Affine,
            ScenarioConfig::Robots(s) => Architecture::Ren { n_xi: s.n_xi, n_zeta: s.n_zeta },
        }
    }

    /// Noise-free infinite-horizon optimal gain of the scalar scenario,
    /// from the Riccati fixed point of `(a, b, q, r)`.
    pub fn certainty_equivalent_gain(&self) -> Result<f64> {
        let s = self.lti()?;
        scalar_dare_gain(s.a, s.b, s.q, s.r)
    }

    /// Disturbance distribution over `horizon` steps (plus the initial
    /// perturbation at index 0).
    pub fn noise_model(&self, horizon: usize) -> Result<NoiseModel> {
        match &self.scenario {
            ScenarioConfig::Lti(s) => {
                let mut steps = vec![StepNoise::Zero { dim: 1 }];
                for _ in 0..horizon {
                    steps.push(StepNoise::Gaussian {
                        mean: vec![s.noise_mean],
                        std: vec![s.noise_std],
                    });
                }
                NoiseModel::new(steps)
            }
            ScenarioConfig::Robots(s) => {
                let n = s.dynamics.n_robots();
                let mut std = Vec::with_capacity(4 * n);
                for _ in 0..n {
                    std.extend_from_slice(&[s.init_position_std, s.init_position_std, 0.0, 0.0]);
                }
                let mut steps = vec![StepNoise::Gaussian { mean: vec![0.0; 4 * n], std }];
                for _ in 0..horizon {
                    steps.push(StepNoise::Zero { dim: 4 * n });
                }
                NoiseModel::new(steps)
            }
        }
    }

    pub fn transform(&self) -> Result<CostTransform> {
        let gamma = match self.gamma {
            Some(g) => g,
            None => default_gamma(&self.system(), &self.stage()),
        };
        CostTransform::new(self.cost_cap, gamma)
    }

    /// The configured prior as a concrete distribution.
    pub fn prior_distribution(&self) -> Result<Prior> {
        self.prior.build(self)
    }

    /// Horizon used for test rollouts.
    pub fn eval_horizon(&self) -> usize {
        match &self.scenario {
            ScenarioConfig::Lti(_) => self.horizon,
            ScenarioConfig::Robots(s) => s.eval_horizon.max(self.horizon),
        }
    }

    /// Seed of the training data stream.
    pub fn train_seed(&self) -> u64 {
        derive_seed(self.seed, "train-data")
    }

    /// Seed of the test data stream (differs from the training stream by
    /// domain separation).
    pub fn test_seed(&self) -> u64 {
        derive_seed(self.seed, "test-data")
    }

    pub fn train_dataset(&self) -> Result<NoiseDataset> {
        let model = self.noise_model(self.horizon)?;
        Ok(generate_dataset(&model, self.train_sequences, self.seed, "train-data"))
    }

    pub fn test_dataset(&self) -> Result<NoiseDataset> {
        let model = self.noise_model(self.eval_horizon())?;
        Ok(generate_dataset(&model, self.test_sequences, self.seed, "test-data"))
    }

    /// Inverse temperature for a certification mode: the optimal `λ*`,
    /// capped at the largest Monte-Carlo-feasible value in empirical
    /// mode (with a relative safety margin so the feasibility check
    /// cannot fail to rounding).
    pub fn lambda_for_mode(&self, mode: BoundMode) -> Result<LambdaChoice> {
        let star = lambda_star(self.train_sequences, self.delta, self.cost_cap)?;
        let used = match mode {
            BoundMode::QstarExact => star,
            BoundMode::QstarEmpirical => {
                let cap = max_feasible_lambda(self.cost_cap, self.delta_hat, self.prior_samples)?;
                star.min(cap * (1.0 - 1e-12))
            }
            BoundMode::Theorem1 => {
                return Err(Error::Config(
                    "certification must be qstar-exact or qstar-empirical".into(),
                ))
            }
        };
        Ok(LambdaChoice { used, star })
    }

    /// Inverse temperature implied by the configured certification mode.
    pub fn certification_lambda(&self) -> Result<LambdaChoice> {
        self.lambda_for_mode(self.certification)
    }

    /// Inverse temperature used when sampling the posterior for training:
    /// always the bound-optimal `λ*`. Certification may use a smaller,
    /// Monte-Carlo-feasible temperature; the certificate records both.
    pub fn training_lambda(&self) -> Result<LambdaChoice> {
        let star = lambda_star(self.train_sequences, self.delta, self.cost_cap)?;
        Ok(LambdaChoice { used: star, star })
    }
}

/// Inverse temperature actually used, next to the uncapped optimum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaChoice {
    pub used: f64,
    pub star: f64,
}

/// Fixed point `p = q + a²p - (abp)²/(b²p + r)` of the scalar Riccati
/// recursion and the induced gain `k = abp/(b²p + r)`.
pub fn scalar_dare_gain(a: f64, b: f64, q: f64, r: f64) -> Result<f64> {
    if ![a, b, q, r].iter().all(|v| v.is_finite()) || b == 0.0 || q <= 0.0 || r <= 0.0 {
        return Err(Error::Config(
            "riccati gain needs finite constants with b != 0, q > 0, r > 0".into(),
        ));
    }
    let mut p = q;
    for _ in 0..10_000 {
        let gained = a * b * p;
        let next = q + a * a * p - gained * gained / (b * b * p + r);
        if (next - p).abs() <= 1e-14 * next.abs() {
            p = next;
            break;
        }
        p = next;
    }
    Ok(a * b * p / (b * b * p + r))
}

/// Closed-loop statistics of one policy over a disturbance dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
struct EvalMetrics {
    mean_raw: f64,
    mean_transformed: f64,
    /// Fraction of sequences whose minimum robot-robot distance dips
    /// below the collision margin (robot scenario only).
    collision_rate: Option<f64>,
    max_state_norm: f64,
}

struct SeqMetrics {
    raw: f64,
    transformed: f64,
    min_distance: f64,
    max_norm: f64,
}

fn policy_metrics(
    sys: &SystemModel,
    stage: &StageCost,
    dataset: &NoiseDataset,
    transform: &CostTransform,
    collision_margin: Option<f64>,
    factory: &(dyn Fn() -> Result<Box<dyn Policy<f64>>> + Sync),
) -> Result<EvalMetrics> {
    use rayon::prelude::*;
    if dataset.is_empty() {
        return Err(Error::Config("evaluation needs a non-empty dataset".into()));
    }
    let n_robots = match sys {
        SystemModel::Robots(p) => p.n_robots(),
        _ => 0,
    };
    let per: Vec<Result<SeqMetrics>> = dataset
        .sequences
        .par_iter()
        .enumerate()
        .map(|(idx, seq)| {
            let mut policy = factory()?;
            let traj = rollout(sys, &mut *policy, seq)?;
            let raw = fh_cost(stage, &traj);
            if !raw.is_finite() {
                return Err(Error::NonFinite {
                    step: traj.horizon(),
                    sequence: Some(idx),
                    what: "closed-loop cost is not finite".into(),
                });
            }
            let mut min_distance = f64::INFINITY;
            let mut max_norm: f64 = 0.0;
            for x in &traj.states {
                max_norm = max_norm.max(x.iter().map(|v| v * v).sum::<f64>().sqrt());
                if collision_margin.is_some() {
                    for i in 0..n_robots {
                        let pi = robot_position(x, i);
                        for j in (i + 1)..n_robots {
                            let pj = robot_position(x, j);
                            let d = ((pi[0] - pj[0]).powi(2) + (pi[1] - pj[1]).powi(2)).sqrt();
                            min_distance = min_distance.min(d);
                        }
                    }
                }
            }
            Ok(SeqMetrics { raw, transformed: transform.apply(raw), min_distance, max_norm })
        })
        .collect();
    let mut raw_sum = 0.0;
    let mut transformed_sum = 0.0;
    let mut collisions = 0usize;
    let mut max_norm: f64 = 0.0;
    for result in per {
        let m = result?;
        raw_sum += m.raw;
        transformed_sum += m.transformed;
        max_norm = max_norm.max(m.max_norm);
        if let Some(margin) = collision_margin {
            if m.min_distance < margin {
                collisions += 1;
            }
        }
    }
    let count = dataset.len() as f64;
    Ok(EvalMetrics {
        mean_raw: raw_sum / count,
        mean_transformed: transformed_sum / count,
        collision_rate: collision_margin.map(|_| collisions as f64 / count),
        max_state_norm: max_norm,
    })
}

/// Adaptive-gradient descent on the empirical cost with the same
/// divergence guard as particle training. Coordinates listed in
/// `frozen` keep their initial value. The log's last row reports the
/// delivered parameters (one evaluation past the final update).
struct DescentOutcome {
    theta: Vec<f64>,
    log: String,
}

#[allow(clippy::too_many_arguments)]
fn adagrad_descent(
    sys: &SystemModel,
    architecture: &Architecture,
    stage: &StageCost,
    dataset: &NoiseDataset,
    transform: Option<&CostTransform>,
    theta0: Vec<f64>,
    opts: &DescentSettings,
    frozen: &[usize],
    divergence_factor: f64,
) -> Result<DescentOutcome> {
    let mut theta = theta0;
    let mut acc = vec![0.0; theta.len()];
    let mut best = f64::INFINITY;
    let mut log = String::from("iteration,cost,grad_norm\n");
    for iteration in 0..=opts.iterations {
        let (cost, mut grad) = cost_and_grad(sys, architecture, stage, dataset, transform, &theta)?;
        for &i in frozen {
            grad[i] = 0.0;
        }
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        log.push_str(&format!("{iteration},{cost},{grad_norm}\n"));
        if iteration == opts.iterations {
            break;
        }
        if cost < best {
            best = cost;
        } else if cost > divergence_factor * best && cost - best > 1e-9 {
            return Err(Error::Diverged { iteration, current: cost, best });
        }
        for i in 0..theta.len() {
            acc[i] += grad[i] * grad[i];
            theta[i] -= opts.step_size * grad[i] / (acc[i].sqrt() + ADAGRAD_EPS);
        }
    }
    Ok(DescentOutcome { theta, log })
}

fn ensure_out(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    cfg.save(&out.join(RESOLVED_CONFIG_FILE))
}

/// Write the training disturbance dataset as CSV and return its path.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    ensure_out(cfg, out)?;
    let dataset = cfg.train_dataset()?;
    let path = out.join(DATASET_FILE);
    dataset.write_csv(&path)?;
    Ok(path)
}

/// Fit a controller by gradient descent on the raw (untransformed)
/// empirical cost, starting from a seeded prior draw.
pub fn cmd_train_empirical(cfg: &ExperimentConfig, out: &Path) -> Result<ControllerFile> {
    cfg.validate()?;
    ensure_out(cfg, out)?;
    let sys = cfg.system();
    let stage = cfg.stage();
    let architecture = cfg.architecture();
    let dataset = cfg.train_dataset()?;
    let prior = cfg.prior_distribution()?;
    let mut theta0 = prior.sample(&mut domain_rng(cfg.seed, "empirical-init"));
    if let (Architecture::Affine, Some((lo, hi))) =
        (&architecture, crate::controllers::stability_interval(&sys))
    {
        theta0[0] = theta0[0].clamp(lo, hi);
    }
    let outcome = adagrad_descent(
        &sys,
        &architecture,
        &stage,
        &dataset,
        None,
        theta0,
        &cfg.empirical,
        &[],
        cfg.svgd.divergence_factor,
    )?;
    std::fs::write(out.join(EMPIRICAL_LOG_FILE), &outcome.log)?;
    let file = ControllerFile::new(
        "empirical",
        Some(cfg.seed),
        ControllerParams { architecture, theta: outcome.theta },
    );
    file.save(&out.join(EMPIRICAL_CONTROLLER_FILE))?;
    Ok(file)
}

/// Scalar-scenario reference controller: the offset compensates the
/// disturbance mean exactly, and the gain is fit on a large dedicated
/// dataset starting from the certainty-equivalent optimum.
pub fn cmd_train_benchmark(cfg: &ExperimentConfig, out: &Path) -> Result<ControllerFile> {
    cfg.validate()?;
    let lti = cfg.lti()?;
    ensure_out(cfg, out)?;
    let sys = cfg.system();
    let stage = cfg.stage();
    let architecture = Architecture::Affine;
    let beta = lti.noise_mean / lti.b;
    let k0 = cfg.certainty_equivalent_gain()?;
    let model = cfg.noise_model(cfg.horizon)?;
    let dataset = generate_dataset(&model, cfg.benchmark_sequences, cfg.seed, "benchmark-data");
    let outcome = adagrad_descent(
        &sys,
        &architecture,
        &stage,
        &dataset,
        None,
        vec![k0, beta],
        &cfg.empirical,
        &[1],
        cfg.svgd.divergence_factor,
    )?;
    std::fs::write(out.join(BENCHMARK_LOG_FILE), &outcome.log)?;
    let file = ControllerFile::new(
        "benchmark",
        Some(cfg.seed),
        ControllerParams { architecture, theta: outcome.theta },
    );
    file.save(&out.join(BENCHMARK_CONTROLLER_FILE))?;
    Ok(file)
}

/// Sample the Gibbs posterior with particle training; writes the full
/// ensemble, one selected controller, and the training log.
pub fn cmd_train_svgd(cfg: &ExperimentConfig, out: &Path) -> Result<EnsembleFile> {
    cfg.validate()?;
    ensure_out(cfg, out)?;
    let sys = cfg.system();
    let stage = cfg.stage();
    let architecture = cfg.architecture();
    let dataset = cfg.train_dataset()?;
    let prior = cfg.prior_distribution()?;
    let transform = cfg.transform()?;
    let lambda = cfg.training_lambda()?;
    let objective = EmpiricalObjective {
        system: &sys,
        architecture: architecture.clone(),
        stage: &stage,
        dataset: &dataset,
        transform,
    };
    let target = GibbsPosterior::new(&prior, lambda.used, &objective)?;
    let opts = TrainOptions {
        particles: cfg.svgd.particles,
        iterations: cfg.svgd.iterations,
        step_size: cfg.svgd.step_size,
        adagrad_eps: ADAGRAD_EPS,
        divergence_factor: cfg.svgd.divergence_factor,
        seed: cfg.seed,
    };
    let result = train_svgd(&target, &opts)?;
    std::fs::write(out.join(SVGD_LOG_FILE), &result.log)?;
    let ensemble =
        EnsembleFile::new("svgd", Some(cfg.seed), architecture.clone(), result.particles.clone());
    ensemble.save(&out.join(ENSEMBLE_FILE))?;
    let selected = ControllerFile::new(
        "svgd",
        Some(cfg.seed),
        ControllerParams { architecture, theta: result.particles[result.selected].clone() },
    );
    selected.save(&out.join(SVGD_CONTROLLER_FILE))?;
    Ok(ensemble)
}

fn grid_axes(prior: &Prior, steps: usize) -> Result<(GridAxis, GridAxis)> {
    let beta = GridAxis::covering(&prior.factors()[1], steps, GRID_SIGMAS)?;
    let k = GridAxis::covering(&prior.factors()[0], steps, GRID_SIGMAS)?;
    Ok((beta, k))
}

/// Certify the Gibbs posterior in the requested mode and write the
/// certificate.
pub fn cmd_certify(cfg: &ExperimentConfig, out: &Path, mode: BoundMode) -> Result<BoundCertificate> {
    cfg.validate()?;
    ensure_out(cfg, out)?;
    let sys = cfg.system();
    let stage = cfg.stage();
    let dataset = cfg.train_dataset()?;
    let prior = cfg.prior_distribution()?;
    let objective = EmpiricalObjective {
        system: &sys,
        architecture: cfg.architecture(),
        stage: &stage,
        dataset: &dataset,
        transform: cfg.transform()?,
    };
    let lambda = cfg.lambda_for_mode(mode)?;
    let mut cert = match mode {
        BoundMode::QstarExact => {
            if objective.param_count() != 2 {
                return Err(Error::Config(
                    "exact certification requires the scalar scenario".into(),
                ));
            }
            let (beta_axis, k_axis) = grid_axes(&prior, cfg.grid_steps)?;
            let grid = build_grid_posterior(
                &prior,
                &objective,
                lambda.used,
                beta_axis,
                k_axis,
                cfg.prior.tag(),
            )?;
            grid.qstar_exact_bound(cfg.delta, cfg.cost_cap, cfg.train_sequences)?
        }
        BoundMode::QstarEmpirical => {
            let posterior = GibbsPosterior::new(&prior, lambda.used, &objective)?;
            posterior.qstar_bound_empirical(
                cfg.delta,
                cfg.delta_hat,
                cfg.prior_samples,
                cfg.seed,
            )?
        }
        BoundMode::Theorem1 => {
            return Err(Error::Config(
                "certify supports qstar-exact and qstar-empirical modes".into(),
            ))
        }
    };
    cert.lambda_star = Some(lambda.star);
    cert.save(&out.join(CERTIFICATE_FILE))?;
    Ok(cert)
}

/// What [`cmd_evaluate`] should roll out.
#[derive(Debug, Clone)]
pub enum EvalSource {
    /// A controller file produced by one of the trainers.
    Controller(PathBuf),
    /// The zero-input (prestabilized) baseline.
    ZeroBaseline,
}

/// Closed-loop evaluation artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub scenario: Scenario,
    /// Label of the evaluated controller.
    pub controller: String,
    pub train_seed: u64,
    pub test_seed: u64,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub train_horizon: usize,
    pub eval_horizon: usize,
    /// Mean raw cost on the training dataset.
    pub train_cost_raw: f64,
    /// Mean transformed cost on the training dataset.
    pub train_cost_transformed: f64,
    /// Mean raw cost on the fresh test dataset.
    pub test_cost_raw: f64,
    /// Fraction of training sequences with a robot-robot distance below
    /// the collision margin at any step.
    pub train_collision_rate: Option<f64>,
    pub test_collision_rate: Option<f64>,
    /// Largest state norm observed across all test rollouts.
    pub max_test_state_norm: f64,
    /// Certificate file this evaluation accompanies, when present in
    /// the same output directory.
    pub certificate: Option<String>,
}

impl EvaluationReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let report: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if report.schema_version != EVALUATION_SCHEMA_VERSION {
            return Err(Error::Parse(format!(
                "unsupported evaluation schema version {}",
                report.schema_version
            )));
        }
        Ok(report)
    }
}

/// Evaluate a saved controller (or the zero-input baseline) on the
/// training data and on a freshly drawn test set.
pub fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path, source: &EvalSource) -> Result<EvaluationReport> {
    cfg.validate()?;
    ensure_out(cfg, out)?;
    let sys = cfg.system();
    let stage = cfg.stage();
    let transform = cfg.transform()?;
    let collision_margin = cfg.robots().ok().map(|r| r.collision_margin);
    let (label, params) = match source {
        EvalSource::Controller(path) => {
            let file = ControllerFile::load(path)?;
            if file.architecture != cfg.architecture() {
                return Err(Error::Config(format!(
                    "controller architecture {:?} does not match the scenario architecture {:?}",
                    file.architecture,
                    cfg.architecture()
                )));
            }
            (file.label.clone(), Some(file.params()))
        }
        EvalSource::ZeroBaseline => ("zero-input baseline".to_string(), None),
    };
    let factory: Box<dyn Fn() -> Result<Box<dyn Policy<f64>>> + Sync> = match &params {
        Some(p) => {
            let sys_ref = sys.clone();
            let p = p.clone();
            Box::new(move || {
                Ok(Box::new(build_policy(&p.architecture, &sys_ref, &p.theta)?)
                    as Box<dyn Policy<f64>>)
            })
        }
        None => {
            let input_dim = sys.input_dim();
            Box::new(move || Ok(Box::new(ZeroPolicy { input_dim }) as Box<dyn Policy<f64>>))
        }
    };
    let train = policy_metrics(
        &sys,
        &stage,
        &cfg.train_dataset()?,
        &transform,
        collision_margin,
        factory.as_ref(),
    )?;
    let test = policy_metrics(
        &sys,
        &stage,
        &cfg.test_dataset()?,
        &transform,
        collision_margin,
        factory.as_ref(),
    )?;
    let certificate = out
        .join(CERTIFICATE_FILE)
        .exists()
        .then(|| CERTIFICATE_FILE.to_string());
    let report = EvaluationReport {
        schema_version: EVALUATION_SCHEMA_VERSION,
        scenario: cfg.scenario(),
        controller: label,
        train_seed: cfg.train_seed(),
        test_seed: cfg.test_seed(),
        train_sequences: cfg.train_sequences,
        test_sequences: cfg.test_sequences,
        train_horizon: cfg.horizon,
        eval_horizon: cfg.eval_horizon(),
        train_cost_raw: train.mean_raw,
        train_cost_transformed: train.mean_transformed,
        test_cost_raw: test.mean_raw,
        train_collision_rate: train.collision_rate,
        test_collision_rate: test.collision_rate,
        max_test_state_norm: test.max_state_norm,
        certificate,
    };
    let file = match source {
        EvalSource::Controller(_) => EVALUATION_FILE,
        EvalSource::ZeroBaseline => BASELINE_EVALUATION_FILE,
    };
    report.save(&out.join(file))?;
    Ok(report)
}

/// One cell of a bound study: a certified bound next to the estimated
/// true costs of posterior draws.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyCell {
    pub data_size: usize,
    pub delta: f64,
    pub prior_tag: String,
    pub lambda: f64,
    pub bound: f64,
    pub true_costs: Vec<f64>,
}

fn cell_from_grid(
    cfg: &ExperimentConfig,
    grid: &GridPosterior,
    data_size: usize,
    delta: f64,
    test: &NoiseDataset,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<StudyCell> {
    let sys = cfg.system();
    let stage = cfg.stage();
    let transform = cfg.transform()?;
    let cert = grid.qstar_exact_bound(delta, cfg.cost_cap, data_size)?;
    let mut true_costs = Vec::with_capacity(cfg.bound_study.draws);
    for _ in 0..cfg.bound_study.draws {
        let params = grid.sample(rng);
        true_costs.push(empirical_cost(&sys, &params, &stage, test, Some(&transform))?);
    }
    Ok(StudyCell {
        data_size,
        delta,
        prior_tag: grid.prior_tag.clone(),
        lambda: grid.lambda,
        bound: cert.bound,
        true_costs,
    })
}

/// Cost grid for one `(prior, dataset)` pair at temperature zero; the
/// expensive part of a study cell, shared across confidence levels.
fn study_cost_grid(
    cfg: &ExperimentConfig,
    prior_spec: &PriorSpec,
    dataset: &NoiseDataset,
) -> Result<GridPosterior> {
    let sys = cfg.system();
    let stage = cfg.stage();
    let prior = prior_spec.build(cfg)?;
    let objective = EmpiricalObjective {
        system: &sys,
        architecture: Architecture::Affine,
        stage: &stage,
        dataset,
        transform: cfg.transform()?,
    };
    if objective.param_count() != 2 {
        return Err(Error::Config("bound studies require the scalar scenario".into()));
    }
    let (beta_axis, k_axis) = grid_axes(&prior, cfg.bound_study.grid_steps)?;
    build_grid_posterior(&prior, &objective, 0.0, beta_axis, k_axis, prior_spec.tag())
}

/// Recompute one study cell from scratch with explicit seeds; used for
/// independent repetitions of the same cell.
pub fn bound_study_cell(
    cfg: &ExperimentConfig,
    data_size: usize,
    delta: f64,
    prior_spec: &PriorSpec,
    dataset_seed: u64,
    draw_seed: u64,
    test: &NoiseDataset,
) -> Result<StudyCell> {
    let model = cfg.noise_model(cfg.horizon)?;
    let dataset = generate_dataset(&model, data_size, dataset_seed, "train-data");
    let base = study_cost_grid(cfg, prior_spec, &dataset)?;
    let lambda = lambda_star(data_size, delta, cfg.cost_cap)?;
    let grid = base.reweighted(lambda)?;
    let mut rng = domain_rng(draw_seed, "bound-study-draws");
    cell_from_grid(cfg, &grid, data_size, delta, test, &mut rng)
}

/// Sweep certified bounds against sampled true costs over the
/// configured `(s, δ, prior)` grid; writes and returns the CSV.
pub fn cmd_bound_study(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    cfg.validate()?;
    cfg.lti()?;
    ensure_out(cfg, out)?;
    let bs = cfg.bound_study.clone();
    let model = cfg.noise_model(cfg.horizon)?;
    let test = generate_dataset(&model, bs.test_sequences, cfg.seed, "bound-study-test");
    let mut csv = String::from("s,delta,prior,lambda,bound");
    for i in 1..=bs.draws {
        csv.push_str(&format!(",true_cost_{i}"));
    }
    csv.push('\n');
    let mut cell_index = 0u64;
    for prior_spec in &bs.priors {
        for &data_size in &bs.data_sizes {
            let dataset = generate_dataset(&model, data_size, cfg.seed, "train-data");
            let base = study_cost_grid(cfg, prior_spec, &dataset)?;
            for &delta in &bs.deltas {
                let lambda = lambda_star(data_size, delta, cfg.cost_cap)?;
                let grid = base.reweighted(lambda)?;
                let mut rng = substream_rng(cfg.seed, "bound-study-draws", cell_index);
                let cell = cell_from_grid(cfg, &grid, data_size, delta, &test, &mut rng)?;
                csv.push_str(&format!(
                    "{},{},{},{},{}",
                    cell.data_size, cell.delta, cell.prior_tag, cell.lambda, cell.bound
                ));
                for tc in &cell.true_costs {
                    csv.push_str(&format!(",{tc}"));
                }
                csv.push('\n');
                cell_index += 1;
            }
        }
    }
    std::fs::write(out.join(BOUND_STUDY_FILE), &csv)?;
    Ok(csv)
}

/// Build the exact (gridded) posterior at the certification temperature
/// and write it with both marginals.
pub fn cmd_grid_posterior(cfg: &ExperimentConfig, out: &Path) -> Result<GridPosterior> {
    cfg.validate()?;
    cfg.lti()?;
    ensure_out(cfg, out)?;
    let sys = cfg.system();
    let stage = cfg.stage();
    let dataset = cfg.train_dataset()?;
    let prior = cfg.prior_distribution()?;
    let objective = EmpiricalObjective {
        system: &sys,
        architecture: Architecture::Affine,
        stage: &stage,
        dataset: &dataset,
        transform: cfg.transform()?,
    };
    let lambda = cfg.lambda_for_mode(BoundMode::QstarExact)?;
    let (beta_axis, k_axis) = grid_axes(&prior, cfg.grid_steps)?;
    let grid = build_grid_posterior(
        &prior,
        &objective,
        lambda.used,
        beta_axis,
        k_axis,
        cfg.prior.tag(),
    )?;
    std::fs::write(out.join(GRID_FILE), grid.to_csv())?;
    let marginal_csv = |name: &str, rows: Vec<(f64, f64)>| {
        let mut text = format!("{name},mass\n");
        for (center, mass) in rows {
            text.push_str(&format!("{center},{mass}\n"));
        }
        text
    };
    std::fs::write(out.join(BETA_MARGINAL_FILE), marginal_csv("beta", grid.beta_marginal()))?;
    std::fs::write(out.join(K_MARGINAL_FILE), marginal_csv("k", grid.k_marginal()))?;
    Ok(grid)
}
