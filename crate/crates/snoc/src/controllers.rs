//! Controller architectures and their stability-preserving realizations.
//!
//! Two families are supported:
//!
//! * **Affine state feedback** `u = -(k x + β)` for scalar systems. The
//!   gain is clamped into the open interval where the closed loop is
//!   contractive, with a small safety margin, so every parameter vector
//!   realizes a stabilizing controller.
//! * **Recurrent equilibrium networks (RENs)**: a linear dynamic core with
//!   a `tanh` equilibrium layer,
//!
//!   ```text
//!   ξ_{t+1} = A ξ_t + B1 σ(ζ_t) + B2 ŵ_t
//!   ζ_t     = C1 ξ_t + D11 σ(ζ_t) + D12 ŵ_t
//!   u_t     = C2 ξ_t + D21 σ(ζ_t) + D22 ŵ_t
//!   ```
//!
//!   with `D11` strictly lower triangular so `ζ_t` resolves row by row.
//!   Raw parameters are free; the realization rescales `(A, B1, C1, D11)`
//!   so that a small-gain condition holds by construction (see
//!   [`realize_ren`]), making every parameter vector a contractive
//!   controller with bounded incremental gain.
//!
//! REN controllers act on reconstructed disturbances rather than raw
//! states: because the nominal model is known, `ŵ_t = x_t - f(x_{t-1},
//! u_{t-1})` recovers the disturbance exactly, and feeding controllers
//! this innovation signal keeps the closed loop's stability analysis
//! independent of the learned parameters.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::autodiff::Scalar;
use crate::dynamics::{Policy, SystemModel};
use crate::error::{Error, Result};
use crate::linalg::{dot, frob_norm, matvec, spectral_norm};

/// Safety margin `ε` of the contraction certificate: rescaled RENs satisfy
/// the small-gain condition with `1 - ε` in place of 1, and affine gains
/// keep this margin to their stability boundary.
pub const CONTRACTION_MARGIN: f64 = 1e-3;

/// Controller family plus its structural hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// `u = -(k x + β)` on a scalar system; parameters `[k, β]`.
    Affine,
    /// REN with internal state size `n_xi` and equilibrium layer size
    /// `n_zeta`.
    Ren { n_xi: usize, n_zeta: usize },
}

impl Architecture {
    /// Number of free parameters for this architecture on `sys`.
    ///
    /// For a REN with state size `q = n_xi`, layer size `p = n_zeta`,
    /// system state dimension `n` and input dimension `m`, the blocks
    /// `A, B1, B2, C1, D11 (strict lower), D12, C2, D21, D22` contribute
    /// `q² + qp + qn + pq + p(p-1)/2 + pn + mq + mp + mn`.
    pub fn param_count(&self, sys: &SystemModel) -> usize {
        match self {
            Architecture::Affine => 2,
            Architecture::Ren { n_xi, n_zeta } => {
                let (q, p) = (*n_xi, *n_zeta);
                let n = sys.state_dim();
                let m = sys.input_dim();
                q * q + q * p + q * n + p * q + p * (p - 1) / 2 + p * n + m * q + m * p + m * n
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Affine => Ok(()),
            Architecture::Ren { n_xi, n_zeta } => {
                if *n_xi == 0 || *n_zeta == 0 {
                    return Err(Error::Config(
                        "ren sizes n_xi and n_zeta must be at least 1".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// An architecture with a concrete parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    pub architecture: Architecture,
    pub theta: Vec<f64>,
}

/// Gain interval (with the contraction margin already applied) inside
/// which the affine closed loop `x' = (a - b k) x` is contractive.
///
/// `None` when the system is not scalar or the input has no effect.
pub fn stability_interval(sys: &SystemModel) -> Option<(f64, f64)> {
    match sys {
        SystemModel::ScalarLti { a, b, .. } if *b != 0.0 => {
            let e0 = (a - 1.0) / b;
            let e1 = (a + 1.0) / b;
            let (lo, hi) = if e0 < e1 { (e0, e1) } else { (e1, e0) };
            let (lo, hi) = (lo + CONTRACTION_MARGIN, hi - CONTRACTION_MARGIN);
            (lo < hi).then_some((lo, hi))
        }
        _ => None,
    }
}

/// Affine feedback `u = -(k x + β)` with the gain clamped into the
/// contractive interval.
pub struct AffinePolicy<S> {
    k: S,
    beta: S,
}

impl<S: Scalar> Policy<S> for AffinePolicy<S> {
    fn reset(&mut self) {}

    fn act(&mut self, _t: usize, x: &[S]) -> Result<Vec<S>> {
        Ok(vec![-(self.k * x[0] + self.beta)])
    }

    fn lift(&self, v: f64) -> S {
        self.k.lift(v)
    }
}

/// A REN's matrices after the contraction rescale, ready to run.
pub struct RenRealization<S> {
    pub n_xi: usize,
    pub n_zeta: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub a: Vec<S>,
    pub b1: Vec<S>,
    pub b2: Vec<S>,
    pub c1: Vec<S>,
    /// Full `n_zeta × n_zeta` matrix; entries on and above the diagonal
    /// are exactly zero.
    pub d11: Vec<S>,
    pub d12: Vec<S>,
    pub c2: Vec<S>,
    pub d21: Vec<S>,
    pub d22: Vec<S>,
}

/// Build a certified-contractive REN realization from free parameters.
///
/// The parameter vector packs the blocks row-major in the order
/// `A, B1, B2, C1, D11 (strictly lower rows), D12, C2, D21, D22`. The
/// dynamic core `(A, B1, C1, D11)` is rescaled by one common factor
/// `ρ ∈ (0, 1]` — the largest for which the small-gain condition holds,
/// so the rescale is the identity whenever the raw blocks already satisfy
/// it. With `‖·‖` the Frobenius norm (which dominates the spectral norm),
/// the realized blocks obey
///
/// ```text
/// ρ‖A‖ + ρ²‖B1‖‖C1‖ / (1 - ρ‖D11‖) ≤ 1 - ε    and    ρ‖D11‖ ≤ 1 - ε.
/// ```
///
/// Multiplying the first condition through by `1 - ρ‖D11‖ > 0` turns its
/// boundary into a scalar quadratic in `ρ` whose smallest positive root
/// is the exact largest admissible factor; `ρ` is that root (evaluated in
/// a cancellation-free form), additionally capped by `(1 - ε)/‖D11‖`.
/// Because `ρ` adapts to the raw magnitudes instead of using a loose
/// closed form, the realized core keeps norms of order one however large
/// the raw parameters are, and the input/output blocks
/// `(B2, D12, C2, D21, D22)` are never rescaled at all. The map is smooth
/// in the parameters except on measure-zero switching sets, so gradients
/// flow through `ρ`.
pub fn realize_ren<S: Scalar>(
    n_xi: usize,
    n_zeta: usize,
    n_in: usize,
    n_out: usize,
    theta: &[S],
    eps: f64,
) -> RenRealization<S> {
    let (q, p, n, m) = (n_xi, n_zeta, n_in, n_out);
    let mut cursor = 0usize;
    let mut take = |len: usize| {
        let slice = &theta[cursor..cursor + len];
        cursor += len;
        slice.to_vec()
    };
    let a_raw = take(q * q);
    let b1_raw = take(q * p);
    let b2 = take(q * n);
    let c1_raw = take(p * q);
    let d11_strict = take(p * (p - 1) / 2);
    let d12 = take(p * n);
    let c2 = take(m * q);
    let d21 = take(m * p);
    let d22 = take(m * n);
    debug_assert_eq!(cursor, theta.len());

    let zero = theta[0].lift(0.0);
    let one = theta[0].lift(1.0);
    let mut d11_raw = vec![zero; p * p];
    let mut k = 0usize;
    for r in 1..p {
        for c in 0..r {
            d11_raw[r * p + c] = d11_strict[k];
            k += 1;
        }
    }

    let a_bar = frob_norm(&a_raw);
    let b_bar = frob_norm(&b1_raw);
    let c_bar = frob_norm(&c1_raw);
    let d_bar = if p > 1 {
        frob_norm(&d11_strict)
    } else {
        zero
    };
    let cap = 1.0 - eps;
    // After multiplying through by 1 - ρ‖D11‖ > 0, the small-gain
    // condition fails exactly where the polynomial
    //   (‖B1‖‖C1‖ - ‖A‖‖D11‖) ρ² + (‖A‖ + cap·‖D11‖) ρ - cap
    // is positive. Branching on values (not vmin/vmax on near-zero norms)
    // keeps reciprocals off the tape in the common identity case.
    let (av, bv, cv, dv) = (a_bar.value(), b_bar.value(), c_bar.value(), d_bar.value());
    let already = dv <= cap && av + cap * dv + bv * cv - av * dv <= cap;
    let rho = if already {
        one
    } else {
        let quad = b_bar * c_bar - a_bar * d_bar;
        let lin = a_bar + d_bar.scale(cap);
        // Smallest positive root 2c / (b + √(b² + 4ac)) of the polynomial
        // above, in the form that stays finite as the quadratic
        // coefficient crosses zero; the discriminant is nonnegative
        // because the polynomial changes sign on (0, 1/‖D11‖), and is
        // clamped to absorb roundoff.
        let disc = (lin * lin + quad.scale(4.0 * cap)).vmax_c(0.0);
        let root = (lin + disc.sqrt()).recip().scale(2.0 * cap);
        if dv * root.value() > cap {
            d_bar.recip().scale(cap)
        } else {
            root
        }
    };

    let scaled = |mat: Vec<S>| -> Vec<S> { mat.into_iter().map(|v| v * rho).collect() };
    RenRealization {
        n_xi: q,
        n_zeta: p,
        n_in: n,
        n_out: m,
        a: scaled(a_raw),
        b1: scaled(b1_raw),
        b2,
        c1: scaled(c1_raw),
        d11: scaled(d11_raw),
        d12,
        c2,
        d21,
        d22,
    }
}

/// Spectral-norm quantities certified by the rescale: the left-hand side
/// `‖A‖ + ‖B1‖‖C1‖ / (1 - ‖D11‖)` of the small-gain condition and
/// `‖D11‖` itself.
pub fn certificate_norms(real: &RenRealization<f64>) -> (f64, f64) {
    let (q, p) = (real.n_xi, real.n_zeta);
    let na = spectral_norm(&real.a, q, q);
    let nb = spectral_norm(&real.b1, q, p);
    let nc = spectral_norm(&real.c1, p, q);
    let nd = spectral_norm(&real.d11, p, p);
    (na + nb * nc / (1.0 - nd), nd)
}

/// Worst-case closed-loop amplification implied by the certificate, for a
/// disturbance bounded by `‖ŵ_t‖ ≤ w_max`:
///
/// * `contraction`: the certified small-gain left-hand side `α < 1`;
/// * `state_gain`: `sup_t ‖ξ_t‖ ≤ state_gain · w_max` from `ξ_0 = 0`;
/// * `output_gain`: `sup_t ‖u_t‖ ≤ output_gain · w_max`.
pub struct GainBound {
    pub contraction: f64,
    pub state_gain: f64,
    pub output_gain: f64,
}

pub fn ren_gain_bound(real: &RenRealization<f64>) -> GainBound {
    let (q, p, n, m) = (real.n_xi, real.n_zeta, real.n_in, real.n_out);
    let na = spectral_norm(&real.a, q, q);
    let nb1 = spectral_norm(&real.b1, q, p);
    let nb2 = spectral_norm(&real.b2, q, n);
    let nc1 = spectral_norm(&real.c1, p, q);
    let nd11 = spectral_norm(&real.d11, p, p);
    let nd12 = spectral_norm(&real.d12, p, n);
    let nc2 = spectral_norm(&real.c2, m, q);
    let nd21 = spectral_norm(&real.d21, m, p);
    let nd22 = spectral_norm(&real.d22, m, n);
    // ‖σ(ζ)‖ ≤ (‖C1‖‖ξ‖ + ‖D12‖ w) / (1 - ‖D11‖) since |tanh| ≤ |·|.
    let layer = 1.0 / (1.0 - nd11);
    let contraction = na + nb1 * nc1 * layer;
    // ξ recursion gains: ‖ξ⁺‖ ≤ α ‖ξ‖ + β w.
    let beta = nb1 * nd12 * layer + nb2;
    let state_gain = beta / (1.0 - contraction);
    let output_gain = (nc2 + nd21 * nc1 * layer) * state_gain + nd21 * nd12 * layer + nd22;
    GainBound {
        contraction,
        state_gain,
        output_gain,
    }
}

/// REN controller driven by reconstructed disturbances.
pub struct RenPolicy<S> {
    sys: SystemModel,
    real: RenRealization<S>,
    zero: S,
    xi: Vec<S>,
    prev: Option<(Vec<S>, Vec<S>)>,
    reconstructed: Vec<Vec<f64>>,
}

impl<S: Scalar> RenPolicy<S> {
    pub fn new(sys: SystemModel, real: RenRealization<S>, zero: S) -> Self {
        let n_xi = real.n_xi;
        Self {
            sys,
            real,
            zero,
            xi: vec![zero; n_xi],
            prev: None,
            reconstructed: Vec::new(),
        }
    }

    /// Disturbance estimates `ŵ_0, ŵ_1, …` produced so far in this
    /// rollout (values only).
    pub fn noise_history(&self) -> &[Vec<f64>] {
        &self.reconstructed
    }

    /// Current internal state (values only).
    pub fn internal_state(&self) -> Vec<f64> {
        self.xi.iter().map(|v| v.value()).collect()
    }

    fn reconstruct(&self, t: usize, x: &[S]) -> Vec<S> {
        match (t, &self.prev) {
            (0, _) | (_, None) => {
                // ŵ_0 = x_0 - x̄: deviation from the nominal start.
                let nominal = self.sys.initial_state();
                x.iter().zip(&nominal).map(|(&xi, &nom)| xi.shift(-nom)).collect()
            }
            (_, Some((px, pu))) => {
                let predicted = self.sys.step(t - 1, px, pu);
                x.iter().zip(&predicted).map(|(&xi, &pi)| xi - pi).collect()
            }
        }
    }
}

impl<S: Scalar> Policy<S> for RenPolicy<S> {
    fn reset(&mut self) {
        self.xi = vec![self.zero; self.real.n_xi];
        self.prev = None;
        self.reconstructed.clear();
    }

    fn act(&mut self, t: usize, x: &[S]) -> Result<Vec<S>> {
        let w_hat = self.reconstruct(t, x);
        self.reconstructed.push(w_hat.iter().map(|v| v.value()).collect());

        let r = &self.real;
        let (q, p) = (r.n_xi, r.n_zeta);
        // Equilibrium layer: D11 is strictly lower triangular, so each
        // row only needs already-computed entries.
        let mut sigma = Vec::with_capacity(p);
        for row in 0..p {
            let mut pre = dot(&r.c1[row * q..(row + 1) * q], &self.xi)
                + dot(&r.d12[row * r.n_in..(row + 1) * r.n_in], &w_hat);
            for (col, &s) in sigma.iter().enumerate() {
                pre = pre + r.d11[row * p + col] * s;
            }
            sigma.push(pre.tanh());
        }
        let mut u = matvec(&r.c2, r.n_out, q, &self.xi);
        let du21 = matvec(&r.d21, r.n_out, p, &sigma);
        let du22 = matvec(&r.d22, r.n_out, r.n_in, &w_hat);
        for i in 0..r.n_out {
            u[i] = u[i] + du21[i] + du22[i];
        }
        let mut xi_next = matvec(&r.a, q, q, &self.xi);
        let xb1 = matvec(&r.b1, q, p, &sigma);
        let xb2 = matvec(&r.b2, q, r.n_in, &w_hat);
        for i in 0..q {
            xi_next[i] = xi_next[i] + xb1[i] + xb2[i];
        }
        self.xi = xi_next;
        self.prev = Some((x.to_vec(), u.clone()));
        Ok(u)
    }

    fn lift(&self, v: f64) -> S {
        self.zero.lift(v)
    }
}

/// A policy of either architecture, built from a parameter vector.
pub enum PolicyImpl<S: Scalar> {
    Affine(AffinePolicy<S>),
    Ren(Box<RenPolicy<S>>),
}

impl<S: Scalar> Policy<S> for PolicyImpl<S> {
    fn reset(&mut self) {
        match self {
            PolicyImpl::Affine(p) => p.reset(),
            PolicyImpl::Ren(p) => p.reset(),
        }
    }

    fn act(&mut self, t: usize, x: &[S]) -> Result<Vec<S>> {
        match self {
            PolicyImpl::Affine(p) => p.act(t, x),
            PolicyImpl::Ren(p) => p.act(t, x),
        }
    }

    fn lift(&self, v: f64) -> S {
        match self {
            PolicyImpl::Affine(p) => Policy::lift(p, v),
            PolicyImpl::Ren(p) => Policy::lift(p.as_ref(), v),
        }
    }
}

/// Instantiate a runnable, stability-certified policy from parameters.
///
/// Works for any [`Scalar`], so the same call builds plain controllers
/// and recorded ones for differentiation. Fails when the parameter count
/// does not match the architecture or the architecture does not fit the
/// system.
pub fn build_policy<S: Scalar>(
    arch: &Architecture,
    sys: &SystemModel,
    theta: &[S],
) -> Result<PolicyImpl<S>> {
    let expected = arch.param_count(sys);
    if theta.len() != expected {
        return Err(Error::Config(format!(
            "architecture expects {expected} parameters, got {}",
            theta.len()
        )));
    }
    match arch {
        Architecture::Affine => {
            if sys.state_dim() != 1 || sys.input_dim() != 1 {
                return Err(Error::Config(
                    "affine feedback is only defined for scalar systems".into(),
                ));
            }
            let k = match stability_interval(sys) {
                Some((lo, hi)) => theta[0].vmax_c(lo).vmin_c(hi),
                None => theta[0],
            };
            Ok(PolicyImpl::Affine(AffinePolicy { k, beta: theta[1] }))
        }
        Architecture::Ren { n_xi, n_zeta } => {
            arch.validate()?;
            let real = realize_ren(
                *n_xi,
                *n_zeta,
                sys.state_dim(),
                sys.input_dim(),
                theta,
                CONTRACTION_MARGIN,
            );
            let zero = theta[0].lift(0.0);
            Ok(PolicyImpl::Ren(Box::new(RenPolicy::new(sys.clone(), real, zero))))
        }
    }
}

/// On-disk form of a single trained controller.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerFile {
    pub schema_version: u32,
    /// Free-form provenance: which trainer produced this controller.
    pub label: String,
    /// Master seed of the producing run, when applicable.
    pub seed: Option<u64>,
    pub architecture: Architecture,
    pub theta: Vec<f64>,
}

/// On-disk form of a particle ensemble (one architecture, many parameter
/// vectors with associated sampling weights implied uniform).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleFile {
    pub schema_version: u32,
    pub label: String,
    pub seed: Option<u64>,
    pub architecture: Architecture,
    pub particles: Vec<Vec<f64>>,
}

/// Current schema version written by this crate.
pub const CONTROLLER_SCHEMA_VERSION: u32 = 1;

impl ControllerFile {
    pub fn new(label: &str, seed: Option<u64>, params: ControllerParams) -> Self {
        Self {
            schema_version: CONTROLLER_SCHEMA_VERSION,
            label: label.to_string(),
            seed,
            architecture: params.architecture,
            theta: params.theta,
        }
    }

    pub fn params(&self) -> ControllerParams {
        ControllerParams {
            architecture: self.architecture.clone(),
            theta: self.theta.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.schema_version != CONTROLLER_SCHEMA_VERSION {
            return Err(Error::Parse(format!(
                "unsupported controller schema version {}",
                file.schema_version
            )));
        }
        Ok(file)
    }
}

impl EnsembleFile {
    pub fn new(label: &str, seed: Option<u64>, architecture: Architecture, particles: Vec<Vec<f64>>) -> Self {
        Self {
            schema_version: CONTROLLER_SCHEMA_VERSION,
            label: label.to_string(),
            seed,
            architecture,
            particles,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.schema_version != CONTROLLER_SCHEMA_VERSION {
            return Err(Error::Parse(format!(
                "unsupported ensemble schema version {}",
                file.schema_version
            )));
        }
        Ok(file)
    }
}
