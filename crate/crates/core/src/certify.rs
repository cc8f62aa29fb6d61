//! Gershgorin row test on interval bounds, the `η` constant, and sampled
//! eigenvalue oracles for the contraction condition.
//!
//! Two row tests are reported side by side:
//!
//! - the *stated* test, `−Σ_{j≠i} max(|L_ij+L_ji|, |U_ij+U_ji|) − 2U_ii − η ≥ 0`
//!   with `η = −(c₁ + c₂)` and `(L, U)` bounding `M g ∂u + Ṁ`. This is the
//!   criterion the training loss drives to zero.
//! - the *sound* test, which shifts by `c₁ + c₂` instead and bounds
//!   `M g ∂u + Ṁ/2`, so that `Y + Yᵀ` equals the state-dependent part of the
//!   contraction matrix. Passing it implies the pointwise condition
//!   `Ṁ + Sym[M(∂f + g∂u)] + 2ρM ≺ 0` on the whole domain, up to the accuracy of
//!   the sampled Lipschitz estimates.

use serde::{Deserialize, Serialize};

use crate::domain::BoxDomain;
use crate::error::{dim_err, Error, Result};
use crate::ibp::{contraction_lhs_bounds, contraction_lhs_bounds_backward, MatrixBounds};
use crate::linalg::{sym_eig_max, Mat};
use crate::ncm::{
    fd_entry_grads, mdot_bounds, mdot_eval, ncm_bounds, ncm_eval, ncm_grad, NcmParams,
    LIPSCHITZ_SAFETY, LIPSCHITZ_SAMPLES, LIPSCHITZ_SEED,
};
use crate::nn::{MlpGrads, MlpParams};
use crate::systems::SystemModel;

/// Row margins of the Gershgorin test `Y + Yᵀ ≺ −shift·I` for every `Y`
/// within `b`. Returns whether all margins are non-negative.
pub fn gershgorin_check(b: &MatrixBounds, shift: f64) -> Result<(bool, Vec<f64>)> {
    let (n, m) = b.shape();
    if n != m {
        return dim_err("Gershgorin test needs square bounds");
    }
    let (lo, hi) = (&b.lo, &b.hi);
    let margins: Vec<f64> = (0..n)
        .map(|i| {
            let off: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let a = lo[(i, j)] + lo[(j, i)];
                    let c = hi[(i, j)] + hi[(j, i)];
                    a.abs().max(c.abs())
                })
                .sum();
            -off - 2.0 * hi[(i, i)] - shift
        })
        .collect();
    Ok((margins.iter().all(|&m| m >= 0.0), margins))
}

/// Cotangents on `(lo, hi)` given cotangents on the row margins of
/// [`gershgorin_check`]. Exact ties route to the lower-bound branch.
pub fn gershgorin_margins_backward(b: &MatrixBounds, d_margins: &[f64]) -> MatrixBounds {
    let n = b.rows();
    let mut dlo = Mat::zeros(n, n);
    let mut dhi = Mat::zeros(n, n);
    for (i, &dm) in d_margins.iter().enumerate() {
        if dm == 0.0 {
            continue;
        }
        dhi[(i, i)] -= 2.0 * dm;
        for j in (0..n).filter(|&j| j != i) {
            let a = b.lo[(i, j)] + b.lo[(j, i)];
            let c = b.hi[(i, j)] + b.hi[(j, i)];
            if a.abs() >= c.abs() {
                let s = -dm * a.signum();
                dlo[(i, j)] += s;
                dlo[(j, i)] += s;
            } else {
                let s = -dm * c.signum();
                dhi[(i, j)] += s;
                dhi[(j, i)] += s;
            }
        }
    }
    MatrixBounds { lo: dlo, hi: dhi }
}

/// Sampled suprema and Lipschitz constants behind `c₁` and `c₂`. Every value
/// already includes the safety factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimates {
    /// `S_M ≥ sup ‖M‖₂`.
    pub metric_sup: f64,
    /// `L_M`, spectral-norm Lipschitz constant of `M`.
    pub metric_lipschitz: f64,
    /// `S_δf ≥ sup ‖∂f‖₂`.
    pub jacobian_sup: f64,
    /// `L_δf`, spectral-norm Lipschitz constant of `∂f`.
    pub jacobian_lipschitz: f64,
    pub safety_factor: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaEstimate {
    pub eta: f64,
    pub c1: f64,
    pub c2: f64,
    pub grid_tau: f64,
    pub covering_radius: f64,
    /// Grid maximum of `λ̄(M)`.
    pub grid_max_metric_eig: f64,
    /// Grid maximum of `λ̄(Sym[M ∂f])`.
    pub grid_max_sym_eig: f64,
    pub lipschitz: LipschitzEstimates,
}

fn lipschitz_estimates(sys: &SystemModel, phi: &NcmParams, domain: &BoxDomain) -> Result<LipschitzEstimates> {
    let n = sys.n;
    let samples = domain.samples(LIPSCHITZ_SAMPLES, LIPSCHITZ_SEED);
    let (mut s_m, mut l_m, mut s_j, mut l_j) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for x in &samples {
        s_m = s_m.max(ncm_eval(phi, x)?.norm2());
        l_m = l_m.max(ncm_grad(phi, x)?.frobenius());
        s_j = s_j.max(sys.jac_f(x).norm2());
        l_j = l_j.max(fd_entry_grads(|y| Ok(sys.jac_f(y)), x, n, n)?.frobenius());
    }
    let k = LIPSCHITZ_SAFETY;
    let est = LipschitzEstimates {
        metric_sup: k * s_m,
        metric_lipschitz: k * l_m,
        jacobian_sup: k * s_j,
        jacobian_lipschitz: k * l_j,
        safety_factor: k,
        samples: samples.len(),
    };
    if [est.metric_sup, est.metric_lipschitz, est.jacobian_sup, est.jacobian_lipschitz]
        .iter()
        .all(|v| v.is_finite())
    {
        Ok(est)
    } else {
        Err(Error::NonFinite("Lipschitz estimate".into()))
    }
}

/// `c₁ = 2ρ(max λ̄(M) + L_M r)`, `c₂ = max λ̄(Sym[M ∂f]) + 2(S_M L_δf + S_δf L_M) r`,
/// maxima over a grid of spacing `tau` with covering radius `r`, and
/// `η = −(c₁ + c₂)`. `c₂` may be negative.
pub fn compute_eta(
    sys: &SystemModel,
    phi: &NcmParams,
    rho: f64,
    domain: &BoxDomain,
    tau: f64,
) -> Result<EtaEstimate> {
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::InvalidArgument(format!("rho must be non-negative, got {rho}")));
    }
    if sys.n != phi.dim() || domain.dim() != sys.n {
        return dim_err("system, metric and domain dimensions disagree");
    }
    let grid = domain.grid(tau)?;
    let r = grid.covering_radius();
    let max_m = grid.par_max(|x| sym_eig_max(&ncm_eval(phi, x)?))?;
    let max_sym = grid.par_max(|x| {
        let m = ncm_eval(phi, x)?;
        sym_eig_max(&m.matmul(&sys.jac_f(x))?.sym())
    })?;
    let lip = lipschitz_estimates(sys, phi, domain)?;
    let c1 = 2.0 * rho * (max_m + lip.metric_lipschitz * r);
    let c2 = max_sym
        + 2.0
            * (lip.metric_sup * lip.jacobian_lipschitz + lip.jacobian_sup * lip.metric_lipschitz)
            * r;
    Ok(EtaEstimate {
        eta: -(c1 + c2),
        c1,
        c2,
        grid_tau: tau,
        covering_radius: r,
        grid_max_metric_eig: max_m,
        grid_max_sym_eig: max_sym,
        lipschitz: lip,
    })
}

/// Everything about the certificate that does not depend on the controller:
/// `η` and the metric bounds over the domain.
#[derive(Debug, Clone)]
pub struct ContractionProblem {
    pub rho: f64,
    pub eta: EtaEstimate,
    pub g: Mat,
    pub m_bounds: MatrixBounds,
    pub mdot_bounds: MatrixBounds,
    pub half_mdot_bounds: MatrixBounds,
}

impl ContractionProblem {
    pub fn new(
        sys: &SystemModel,
        phi: &NcmParams,
        rho: f64,
        domain: &BoxDomain,
        tau: f64,
    ) -> Result<Self> {
        phi.validate(&sys.g)?;
        let eta = compute_eta(sys, phi, rho, domain, tau)?;
        let m_bounds = ncm_bounds(phi, domain, tau)?;
        let mdot_bounds = mdot_bounds(phi, sys, domain, tau)?;
        let half_mdot_bounds = MatrixBounds::new(mdot_bounds.lo.scale(0.5), mdot_bounds.hi.scale(0.5))?;
        Ok(Self {
            rho,
            eta,
            g: sys.g.clone(),
            m_bounds,
            mdot_bounds,
            half_mdot_bounds,
        })
    }

    /// Bounds on `M g ∂u + Ṁ` over the domain.
    pub fn lhs_bounds(&self, p: &MlpParams) -> Result<MatrixBounds> {
        contraction_lhs_bounds(&self.m_bounds, &self.g, p, &self.mdot_bounds)
    }

    /// Bounds on `M g ∂u + Ṁ/2` over the domain.
    pub fn sound_lhs_bounds(&self, p: &MlpParams) -> Result<MatrixBounds> {
        contraction_lhs_bounds(&self.m_bounds, &self.g, p, &self.half_mdot_bounds)
    }

    /// Stated row margins, shifted by `η`.
    pub fn row_margins(&self, p: &MlpParams) -> Result<Vec<f64>> {
        Ok(gershgorin_check(&self.lhs_bounds(p)?, self.eta.eta)?.1)
    }

    /// Sound row margins, shifted by `c₁ + c₂`.
    pub fn sound_row_margins(&self, p: &MlpParams) -> Result<Vec<f64>> {
        Ok(gershgorin_check(&self.sound_lhs_bounds(p)?, -self.eta.eta)?.1)
    }

    /// Gradient of `Σ_i w_i · margin_i` (stated margins) with respect to the
    /// controller weights.
    pub fn row_margins_backward(&self, p: &MlpParams, weights: &[f64]) -> Result<MlpGrads> {
        let b = self.lhs_bounds(p)?;
        let d_b = gershgorin_margins_backward(&b, weights);
        Ok(contraction_lhs_bounds_backward(&self.m_bounds, &self.g, p, &d_b))
    }
}

/// Pointwise contraction margin `−λ̄(Ṁ + Sym[M(∂f + g∂u)] + 2ρM)` at `x`.
pub fn contraction_margin_at(
    sys: &SystemModel,
    phi: &NcmParams,
    controller: &MlpParams,
    rho: f64,
    x: &[f64],
) -> Result<f64> {
    let u = controller.forward(x)?;
    let m = ncm_eval(phi, x)?;
    let mdot = mdot_eval(phi, sys, x, &u)?;
    let closed = &sys.jac_f(x) + &sys.g.matmul(&controller.input_jacobian(x)?)?;
    let total = &(&mdot + &m.matmul(&closed)?.sym()) + &m.scale(2.0 * rho);
    Ok(-sym_eig_max(&total)?)
}

/// Smallest [`contraction_margin_at`] over `samples`. Positive means the
/// contraction condition holds at every sample.
pub fn sampled_contraction_margin(
    sys: &SystemModel,
    phi: &NcmParams,
    controller: &MlpParams,
    rho: f64,
    samples: &[Vec<f64>],
) -> Result<f64> {
    samples.iter().try_fold(f64::INFINITY, |acc, x| {
        Ok(acc.min(contraction_margin_at(sys, phi, controller, rho, x)?))
    })
}

/// Margin `−λ̄(Ṁ + Sym[M ∂f̂] + λ²MᵀM + (c/λ²)I + ρM)` of the robust
/// contraction test for model error `Δ` with `ΔᵀΔ ⪯ cI`.
pub fn robust_check(m: &Mat, jac_est: &Mat, mdot: &Mat, lambda: f64, c: f64, rho: f64) -> Result<f64> {
    if lambda == 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidArgument("lambda must be non-zero".into()));
    }
    if c < 0.0 {
        return Err(Error::InvalidArgument("c must be non-negative".into()));
    }
    let n = m.rows();
    if !m.is_square() || jac_est.shape() != (n, n) || mdot.shape() != (n, n) {
        return dim_err("robust check needs n×n matrices");
    }
    let l2 = lambda * lambda;
    let total = &(&(&(mdot + &m.matmul(jac_est)?.sym()) + &m.transpose().matmul(m)?.scale(l2))
        + &Mat::identity(n).scale(c / l2))
        + &m.scale(rho);
    Ok(-sym_eig_max(&total)?)
}

fn default_tol() -> f64 {
    1e-4
}
fn default_oracle_samples() -> usize {
    1000
}
fn default_oracle_seed() -> u64 {
    7
}

/// Inputs of [`certify`] besides the models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyConfig {
    pub rho: f64,
    pub domain: BoxDomain,
    pub grid_tau: f64,
    pub x_star: Vec<f64>,
    #[serde(default = "default_tol")]
    pub equilibrium_tol: f64,
    #[serde(default = "default_oracle_samples")]
    pub oracle_samples: usize,
    #[serde(default = "default_oracle_seed")]
    pub oracle_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub eta: f64,
    pub c1: f64,
    pub c2: f64,
    pub row_margins: Vec<f64>,
    pub pass: bool,
    pub rho: f64,
    pub oracle_min_margin: f64,
    pub grid_tau: f64,
    pub sound_row_margins: Vec<f64>,
    pub sound_pass: bool,
    pub equilibrium_residual: f64,
    pub equilibrium_ok: bool,
    pub lipschitz: LipschitzEstimates,
}

/// `‖f(x*) + g u(x*)‖`.
pub fn equilibrium_residual(sys: &SystemModel, controller: &MlpParams, x_star: &[f64]) -> Result<f64> {
    let u = controller.forward(x_star)?;
    Ok(sys.closed_loop(x_star, &u).iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Full certificate: equilibrium precondition, stated and sound row tests,
/// and the sampled oracle on the domain. A controller that misses the
/// equilibrium is an error here; see [`assess`] for a report regardless.
pub fn certify(
    sys: &SystemModel,
    phi: &NcmParams,
    controller: &MlpParams,
    cfg: &CertifyConfig,
) -> Result<CertificateReport> {
    let report = assess(sys, phi, controller, cfg)?;
    if !report.equilibrium_ok {
        return Err(Error::Precondition(format!(
            "equilibrium residual {:.3e} exceeds {:.1e}",
            report.equilibrium_residual, cfg.equilibrium_tol
        )));
    }
    Ok(report)
}

/// Like [`certify`], but a missed equilibrium only clears `pass` and
/// `sound_pass` instead of failing.
pub fn assess(
    sys: &SystemModel,
    phi: &NcmParams,
    controller: &MlpParams,
    cfg: &CertifyConfig,
) -> Result<CertificateReport> {
    if cfg.x_star.len() != sys.n || controller.input_dim() != sys.n || controller.output_dim() != sys.m {
        return dim_err("controller, equilibrium and system dimensions disagree");
    }
    let residual = equilibrium_residual(sys, controller, &cfg.x_star)?;
    let equilibrium_ok = residual <= cfg.equilibrium_tol;
    let problem = ContractionProblem::new(sys, phi, cfg.rho, &cfg.domain, cfg.grid_tau)?;
    let (pass, row_margins) = gershgorin_check(&problem.lhs_bounds(controller)?, problem.eta.eta)?;
    let (sound_pass, sound_row_margins) =
        gershgorin_check(&problem.sound_lhs_bounds(controller)?, -problem.eta.eta)?;
    let samples = cfg.domain.samples(cfg.oracle_samples, cfg.oracle_seed);
    let oracle_min_margin = sampled_contraction_margin(sys, phi, controller, cfg.rho, &samples)?;
    Ok(CertificateReport {
        eta: problem.eta.eta,
        c1: problem.eta.c1,
        c2: problem.eta.c2,
        row_margins,
        pass: pass && equilibrium_ok,
        rho: cfg.rho,
        oracle_min_margin,
        grid_tau: cfg.grid_tau,
        sound_row_margins,
        sound_pass: sound_pass && equilibrium_ok,
        equilibrium_residual: residual,
        equilibrium_ok,
        lipschitz: problem.eta.lipschitz,
    })
}
