//! Neural contraction metrics `M(x) = Γ(x)ᵀΓ(x) + εI`.
//!
//! Every entry of `Γ` depends on `x` only through the projections `xᵀv_ℓ` onto
//! an orthonormal basis `v_ℓ` of the left kernel of `g`. Hence each gradient
//! `∂M_ij` lies in that kernel, `∂M_ij · g = 0` holds identically, and the
//! metric derivative along closed-loop trajectories does not depend on `u`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::BoxDomain;
use crate::error::{dim_err, Error, Result};
use crate::ibp::MatrixBounds;
use crate::linalg::{null_space_basis, Mat};
use crate::systems::SystemModel;

pub const DEFAULT_EPSILON: f64 = 0.1;

/// Safety factor applied to sampled Lipschitz estimates.
pub const LIPSCHITZ_SAFETY: f64 = 1.5;
/// Samples used to estimate Lipschitz constants. Fixed and seeded so the
/// estimate does not move when the grid is refined.
pub const LIPSCHITZ_SAMPLES: usize = 2048;
pub const LIPSCHITZ_SEED: u64 = 0x5eed_11b5;

/// Numerically stable `log(cosh z)`.
pub fn log_cosh(z: f64) -> f64 {
    let a = z.abs();
    a + ((1.0 + (-2.0 * a).exp()) / 2.0).ln()
}

/// `y(s) = Σ_k c_k tanh(w_k s + b_k) + d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarNet {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: f64,
}

impl ScalarNet {
    fn random(hidden: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut draw = |k| (0..k).map(|_| rng.gen_range(-scale..=scale)).collect::<Vec<_>>();
        let (w, b, c) = (draw(hidden), draw(hidden), draw(hidden));
        Self { w, b, c, d: 0.0 }
    }

    fn validate(&self) -> Result<()> {
        if self.w.len() != self.b.len() || self.w.len() != self.c.len() {
            return dim_err("scalar network layer sizes disagree");
        }
        Ok(())
    }

    /// Value and derivative at `s`.
    pub fn eval(&self, s: f64) -> (f64, f64) {
        let (mut y, mut dy) = (self.d, 0.0);
        for ((w, b), c) in self.w.iter().zip(&self.b).zip(&self.c) {
            let t = (w * s + b).tanh();
            y += c * t;
            dy += c * w * (1.0 - t * t);
        }
        (y, dy)
    }

    fn num_params(&self) -> usize {
        3 * self.w.len() + 1
    }

    fn push_flat(&self, out: &mut Vec<f64>) {
        out.extend(&self.w);
        out.extend(&self.b);
        out.extend(&self.c);
        out.push(self.d);
    }

    fn read_flat(&mut self, v: &[f64]) -> usize {
        let k = self.w.len();
        self.w.copy_from_slice(&v[..k]);
        self.b.copy_from_slice(&v[k..2 * k]);
        self.c.copy_from_slice(&v[2 * k..3 * k]);
        self.d = v[3 * k];
        3 * k + 1
    }
}

/// `Γ_ij(x) = γ log cosh(Σ_ℓ α_ℓ xᵀv_ℓ + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogCoshEntry {
    pub gamma: f64,
    pub alpha: Vec<f64>,
    pub b: f64,
}

/// `Γ_ij(x) = K(Σ_ℓ β_ℓ(xᵀv_ℓ))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralEntry {
    pub k: ScalarNet,
    pub beta: Vec<ScalarNet>,
}

/// Metric parameters. `entries` are stored row-major over `(i, j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NcmParams {
    Identity {
        n: usize,
    },
    LogCosh {
        n: usize,
        epsilon: f64,
        kernel_basis: Vec<Vec<f64>>,
        entries: Vec<LogCoshEntry>,
    },
    General {
        n: usize,
        epsilon: f64,
        kernel_basis: Vec<Vec<f64>>,
        entries: Vec<GeneralEntry>,
    },
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl NcmParams {
    pub fn identity(n: usize) -> Self {
        Self::Identity { n }
    }

    /// Log-cosh metric with every `γ = 0`, i.e. the constant metric `εI`.
    pub fn log_cosh_zero(g: &Mat, epsilon: f64) -> Self {
        let basis = null_space_basis(g);
        let n = g.rows();
        let r = basis.len();
        Self::LogCosh {
            n,
            epsilon,
            kernel_basis: basis,
            entries: vec![
                LogCoshEntry {
                    gamma: 0.0,
                    alpha: vec![0.0; r],
                    b: 0.0,
                };
                n * n
            ],
        }
    }

    /// Log-cosh metric with parameters uniform in `[-scale, scale]`.
    pub fn log_cosh_random(g: &Mat, epsilon: f64, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = null_space_basis(g);
        let n = g.rows();
        let r = basis.len();
        let entries = (0..n * n)
            .map(|_| LogCoshEntry {
                gamma: rng.gen_range(-scale..=scale),
                alpha: (0..r).map(|_| rng.gen_range(-scale..=scale)).collect(),
                b: rng.gen_range(-scale..=scale),
            })
            .collect();
        Self::LogCosh {
            n,
            epsilon,
            kernel_basis: basis,
            entries,
        }
    }

    /// General metric with `hidden`-unit tanh networks for every `K_ij`, `β_ℓ,ij`.
    pub fn general_random(g: &Mat, epsilon: f64, hidden: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = null_space_basis(g);
        let n = g.rows();
        let r = basis.len();
        let entries = (0..n * n)
            .map(|_| GeneralEntry {
                k: ScalarNet::random(hidden, scale, &mut rng),
                beta: (0..r)
                    .map(|_| ScalarNet::random(hidden, scale, &mut rng))
                    .collect(),
            })
            .collect();
        Self::General {
            n,
            epsilon,
            kernel_basis: basis,
            entries,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Identity { n } | Self::LogCosh { n, .. } | Self::General { n, .. } => *n,
        }
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            Self::Identity { .. } => "identity",
            Self::LogCosh { .. } => "log_cosh",
            Self::General { .. } => "general",
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Self::Identity { .. })
    }

    pub fn epsilon(&self) -> Option<f64> {
        match self {
            Self::Identity { .. } => None,
            Self::LogCosh { epsilon, .. } | Self::General { epsilon, .. } => Some(*epsilon),
        }
    }

    fn basis(&self) -> &[Vec<f64>] {
        match self {
            Self::Identity { .. } => &[],
            Self::LogCosh { kernel_basis, .. } | Self::General { kernel_basis, .. } => {
                kernel_basis
            }
        }
    }

    /// Checks shapes, `ε > 0`, and that the kernel basis is orthonormal and
    /// annihilates `g`.
    pub fn validate(&self, g: &Mat) -> Result<()> {
        let n = self.dim();
        if g.rows() != n {
            return dim_err(format!("metric is {n}-dimensional but g has {} rows", g.rows()));
        }
        let (epsilon, count, r) = match self {
            Self::Identity { .. } => return Ok(()),
            Self::LogCosh {
                epsilon, entries, ..
            } => {
                let r = self.basis().len();
                if entries.iter().any(|e| e.alpha.len() != r) {
                    return dim_err("log-cosh entry needs one alpha per kernel direction");
                }
                (*epsilon, entries.len(), r)
            }
            Self::General {
                epsilon, entries, ..
            } => {
                let r = self.basis().len();
                for e in entries {
                    if e.beta.len() != r {
                        return dim_err("general entry needs one beta network per kernel direction");
                    }
                    e.k.validate()?;
                    e.beta.iter().try_for_each(ScalarNet::validate)?;
                }
                (*epsilon, entries.len(), r)
            }
        };
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
        }
        if count != n * n {
            return dim_err(format!("expected {} metric entries, got {count}", n * n));
        }
        if r != null_space_basis(g).len() {
            return dim_err("kernel basis has the wrong size");
        }
        let basis = self.basis();
        let gscale = g.max_abs().max(1.0);
        for (a, va) in basis.iter().enumerate() {
            if va.len() != n {
                return dim_err("kernel basis vector has the wrong length");
            }
            for (b, vb) in basis.iter().enumerate() {
                let target = if a == b { 1.0 } else { 0.0 };
                if (dot(va, vb) - target).abs() > 1e-9 {
                    return Err(Error::InvalidArgument("kernel basis is not orthonormal".into()));
                }
            }
            let vg = g.tmatvec(va)?;
            if vg.iter().any(|v| v.abs() > 1e-9 * gscale) {
                return Err(Error::InvalidArgument("kernel basis does not annihilate g".into()));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        match self {
            Self::Identity { .. } => 0,
            Self::LogCosh { entries, .. } => entries.iter().map(|e| e.alpha.len() + 2).sum(),
            Self::General { entries, .. } => entries
                .iter()
                .map(|e| e.k.num_params() + e.beta.iter().map(ScalarNet::num_params).sum::<usize>())
                .sum(),
        }
    }

    /// Trainable parameters, entry by entry.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        match self {
            Self::Identity { .. } => {}
            Self::LogCosh { entries, .. } => {
                for e in entries {
                    out.push(e.gamma);
                    out.extend(&e.alpha);
                    out.push(e.b);
                }
            }
            Self::General { entries, .. } => {
                for e in entries {
                    e.k.push_flat(&mut out);
                    e.beta.iter().for_each(|bn| bn.push_flat(&mut out));
                }
            }
        }
        out
    }

    pub fn set_flat(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.num_params() {
            return dim_err(format!("expected {} parameters, got {}", self.num_params(), v.len()));
        }
        let mut at = 0;
        match self {
            Self::Identity { .. } => {}
            Self::LogCosh { entries, .. } => {
                for e in entries {
                    e.gamma = v[at];
                    let r = e.alpha.len();
                    e.alpha.copy_from_slice(&v[at + 1..at + 1 + r]);
                    e.b = v[at + 1 + r];
                    at += r + 2;
                }
            }
            Self::General { entries, .. } => {
                for e in entries {
                    at += e.k.read_flat(&v[at..]);
                    for bn in &mut e.beta {
                        at += bn.read_flat(&v[at..]);
                    }
                }
            }
        }
        Ok(())
    }

    /// `Γ(x)` and, per entry, coefficients `c` with `∂Γ_ij = Σ_ℓ c_ℓ v_ℓ`.
    fn gamma(&self, x: &[f64]) -> (Mat, Vec<Vec<f64>>) {
        let n = self.dim();
        let proj: Vec<f64> = self.basis().iter().map(|v| dot(v, x)).collect();
        let mut gam = Mat::zeros(n, n);
        let mut coef = Vec::with_capacity(n * n);
        match self {
            Self::Identity { .. } => {}
            Self::LogCosh { entries, .. } => {
                for (k, e) in entries.iter().enumerate() {
                    let z = dot(&e.alpha, &proj) + e.b;
                    gam.as_mut_slice()[k] = e.gamma * log_cosh(z);
                    let s = e.gamma * z.tanh();
                    coef.push(e.alpha.iter().map(|a| s * a).collect());
                }
            }
            Self::General { entries, .. } => {
                for (k, e) in entries.iter().enumerate() {
                    let inner: Vec<(f64, f64)> =
                        e.beta.iter().zip(&proj).map(|(bn, p)| bn.eval(*p)).collect();
                    let s: f64 = inner.iter().map(|(y, _)| y).sum();
                    let (y, dy) = e.k.eval(s);
                    gam.as_mut_slice()[k] = y;
                    coef.push(inner.iter().map(|(_, d)| dy * d).collect());
                }
            }
        }
        (gam, coef)
    }

    /// Per-entry gradients `∂Γ_ij` as rows of an `n² × n` matrix.
    fn gamma_grad_rows(&self, coef: &[Vec<f64>]) -> Mat {
        let n = self.dim();
        let basis = self.basis();
        let mut out = Mat::zeros(n * n, n);
        for (k, c) in coef.iter().enumerate() {
            for (cl, v) in c.iter().zip(basis) {
                for (q, vq) in v.iter().enumerate() {
                    out[(k, q)] += cl * vq;
                }
            }
        }
        out
    }
}

fn check_state(phi: &NcmParams, x: &[f64]) -> Result<()> {
    if x.len() != phi.dim() {
        return dim_err(format!("state has length {}, metric expects {}", x.len(), phi.dim()));
    }
    Ok(())
}

/// `M(x) = Γ(x)ᵀΓ(x) + εI`; the identity in identity mode.
pub fn ncm_eval(phi: &NcmParams, x: &[f64]) -> Result<Mat> {
    check_state(phi, x)?;
    let n = phi.dim();
    let Some(eps) = phi.epsilon() else {
        return Ok(Mat::identity(n));
    };
    let (gam, _) = phi.gamma(x);
    let mut m = gam.transpose().matmul(&gam)?;
    for i in 0..n {
        m[(i, i)] += eps;
    }
    Ok(m)
}

/// Gradients `∂M_ij(x)` as the rows `i·n + j` of an `n² × n` matrix.
pub fn ncm_grad(phi: &NcmParams, x: &[f64]) -> Result<Mat> {
    check_state(phi, x)?;
    let n = phi.dim();
    if phi.is_identity() {
        return Ok(Mat::zeros(n * n, n));
    }
    let (gam, coef) = phi.gamma(x);
    let dg = phi.gamma_grad_rows(&coef);
    let mut out = Mat::zeros(n * n, n);
    // ∂M_ij = Σ_k ∂Γ_ki Γ_kj + Γ_ki ∂Γ_kj
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let (ki, kj) = (k * n + i, k * n + j);
                for q in 0..n {
                    out[(i * n + j, q)] += dg[(ki, q)] * gam[(k, j)] + gam[(k, i)] * dg[(kj, q)];
                }
            }
        }
    }
    Ok(out)
}

/// Directional derivative of `M` along the velocity `v`.
pub fn metric_derivative_along(phi: &NcmParams, x: &[f64], v: &[f64]) -> Result<Mat> {
    let n = phi.dim();
    let grad = ncm_grad(phi, x)?;
    let flat = grad.matvec(v)?;
    Mat::from_vec(n, n, flat)
}

/// `Ṁ(x) = [∂M_ij · (f(x) + g u)]`.
pub fn mdot_eval(phi: &NcmParams, sys: &SystemModel, x: &[f64], u: &[f64]) -> Result<Mat> {
    if sys.n != phi.dim() || u.len() != sys.m {
        return dim_err("metric, system and input dimensions disagree");
    }
    metric_derivative_along(phi, x, &sys.closed_loop(x, u))
}

/// `Ṁ` with the input dropped; equal to [`mdot_eval`] for any `u` because
/// every `∂M_ij` annihilates `g`.
pub fn mdot_drift(phi: &NcmParams, sys: &SystemModel, x: &[f64]) -> Result<Mat> {
    metric_derivative_along(phi, x, &sys.f(x))
}

/// Largest gradient norm per matrix entry over `samples`.
fn max_entry_grad_norms<F>(n: usize, samples: &[Vec<f64>], grad: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Mat>,
{
    let mut out = vec![0.0f64; n * n];
    for x in samples {
        let gr = grad(x)?;
        for (k, o) in out.iter_mut().enumerate() {
            let nrm = gr.row(k).iter().map(|v| v * v).sum::<f64>().sqrt();
            *o = o.max(nrm);
        }
    }
    Ok(out)
}

/// Central-difference gradients of every entry of a matrix function, as rows.
pub(crate) fn fd_entry_grads<F>(f: F, x: &[f64], rows: usize, cols: usize) -> Result<Mat>
where
    F: Fn(&[f64]) -> Result<Mat>,
{
    let n = x.len();
    let scale = x.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let h = 1e-5 * scale;
    let mut out = Mat::zeros(rows * cols, n);
    let mut xp = x.to_vec();
    for q in 0..n {
        xp[q] = x[q] + h;
        let fp = f(&xp)?;
        xp[q] = x[q] - h;
        let fm = f(&xp)?;
        xp[q] = x[q];
        for k in 0..rows * cols {
            out[(k, q)] = (fp.as_slice()[k] - fm.as_slice()[k]) / (2.0 * h);
        }
    }
    Ok(out)
}

/// Entry-wise Lipschitz estimates of `M` over `domain`: sampled gradient norms
/// times [`LIPSCHITZ_SAFETY`].
pub fn metric_lipschitz(phi: &NcmParams, domain: &BoxDomain) -> Result<Vec<f64>> {
    let samples = domain.samples(LIPSCHITZ_SAMPLES, LIPSCHITZ_SEED);
    let norms = max_entry_grad_norms(phi.dim(), &samples, |x| ncm_grad(phi, x))?;
    Ok(norms.into_iter().map(|v| v * LIPSCHITZ_SAFETY).collect())
}

/// Entry-wise Lipschitz estimates of `Ṁ` over `domain`, from finite-difference
/// gradients at seeded samples times [`LIPSCHITZ_SAFETY`].
pub fn mdot_lipschitz(phi: &NcmParams, sys: &SystemModel, domain: &BoxDomain) -> Result<Vec<f64>> {
    let n = phi.dim();
    let samples = domain.samples(LIPSCHITZ_SAMPLES, LIPSCHITZ_SEED);
    let norms = max_entry_grad_norms(n, &samples, |x| {
        fd_entry_grads(|y| mdot_drift(phi, sys, y), x, n, n)
    })?;
    Ok(norms.into_iter().map(|v| v * LIPSCHITZ_SAFETY).collect())
}

fn widen(lo: Mat, hi: Mat, lip: &[f64], radius: f64) -> Result<MatrixBounds> {
    let lo = Mat::from_vec(
        lo.rows(),
        lo.cols(),
        lo.as_slice().iter().zip(lip).map(|(v, l)| v - l * radius).collect(),
    )?;
    let hi = Mat::from_vec(
        hi.rows(),
        hi.cols(),
        hi.as_slice().iter().zip(lip).map(|(v, l)| v + l * radius).collect(),
    )?;
    MatrixBounds::new(lo, hi)
}

/// Element-wise bounds of `M` over `domain`: extrema over a grid of spacing
/// `tau`, widened by each entry's Lipschitz estimate times the covering radius.
pub fn ncm_bounds(phi: &NcmParams, domain: &BoxDomain, tau: f64) -> Result<MatrixBounds> {
    let n = phi.dim();
    if domain.dim() != n {
        return dim_err("domain dimension differs from metric dimension");
    }
    let grid = domain.grid(tau)?;
    if phi.is_identity() {
        return Ok(MatrixBounds::point(Mat::identity(n)));
    }
    let (lo, hi) = grid.par_extrema(n, n, |x| ncm_eval(phi, x))?;
    widen(lo, hi, &metric_lipschitz(phi, domain)?, grid.covering_radius())
}

/// Element-wise bounds of `Ṁ` over `domain`, built like [`ncm_bounds`].
pub fn mdot_bounds(
    phi: &NcmParams,
    sys: &SystemModel,
    domain: &BoxDomain,
    tau: f64,
) -> Result<MatrixBounds> {
    let n = phi.dim();
    if domain.dim() != n || sys.n != n {
        return dim_err("domain, system and metric dimensions disagree");
    }
    let grid = domain.grid(tau)?;
    if phi.is_identity() {
        return Ok(MatrixBounds::zeros(n, n));
    }
    let (lo, hi) = grid.par_extrema(n, n, |x| mdot_drift(phi, sys, x))?;
    widen(lo, hi, &mdot_lipschitz(phi, sys, domain)?, grid.covering_radius())
}

impl NcmParams {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and validates against the input matrix `g`.
    pub fn from_json(s: &str, g: &Mat) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate(g)?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eig;
    use crate::systems::{andrieu3, pendulum};

    fn random_metrics(g: &Mat, seed: u64) -> [NcmParams; 2] {
        [
            NcmParams::log_cosh_random(g, DEFAULT_EPSILON, 1.0, seed),
            NcmParams::general_random(g, DEFAULT_EPSILON, 4, 1.0, seed),
        ]
    }

    #[test]
    fn log_cosh_is_stable_and_accurate() {
        for z in [-3.0, -0.5, 0.0, 1e-3, 2.0, 10.0] {
            assert!((log_cosh(z) - f64::cosh(z).ln()).abs() < 1e-14);
        }
        assert!((log_cosh(800.0) - (800.0 - 2f64.ln())).abs() < 1e-12);
        assert!(log_cosh(-1e6).is_finite());
    }

    #[test]
    fn identity_mode() {
        let phi = NcmParams::identity(3);
        let x = [1.0, -2.0, 0.5];
        assert_eq!(ncm_eval(&phi, &x).unwrap(), Mat::identity(3));
        assert_eq!(ncm_grad(&phi, &x).unwrap(), Mat::zeros(9, 3));
        assert_eq!(mdot_eval(&phi, &andrieu3(), &x, &[4.0]).unwrap(), Mat::zeros(3, 3));
        let d = BoxDomain::new(vec![-1.0; 3], vec![1.0; 3]).unwrap();
        assert_eq!(ncm_bounds(&phi, &d, 0.5).unwrap(), MatrixBounds::point(Mat::identity(3)));
        assert_eq!(mdot_bounds(&phi, &andrieu3(), &d, 0.5).unwrap(), MatrixBounds::zeros(3, 3));
    }

    #[test]
    fn zero_gamma_gives_scaled_identity() {
        let g = andrieu3().g;
        let phi = NcmParams::log_cosh_zero(&g, 0.1);
        assert_eq!(ncm_eval(&phi, &[0.3, 1.0, -2.0]).unwrap(), Mat::identity(3).scale(0.1));
    }

    #[test]
    fn positive_definite_with_epsilon_floor() {
        let g = andrieu3().g;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..30 {
            for phi in random_metrics(&g, seed) {
                let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let m = ncm_eval(&phi, &x).unwrap();
                assert_eq!(m, m.transpose());
                assert!(sym_eig(&m).unwrap().eigenvalues[0] >= DEFAULT_EPSILON - 1e-12);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_and_annihilates_g() {
        let g = andrieu3().g;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..20 {
            for phi in random_metrics(&g, seed) {
                let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let an = ncm_grad(&phi, &x).unwrap();
                let fd = fd_entry_grads(|y| ncm_eval(&phi, y), &x, 3, 3).unwrap();
                assert!((&an - &fd).max_abs() < 1e-6, "{}", (&an - &fd).max_abs());
                let pde = an.matvec(&[0.0, 0.0, 1.0]).unwrap();
                assert!(pde.iter().all(|v| v.abs() < 1e-8));
            }
        }
    }

    #[test]
    fn mdot_ignores_input() {
        let sys = andrieu3();
        let phi = NcmParams::log_cosh_random(&sys.g, 0.1, 1.0, 9);
        let x = [0.4, -0.1, 0.8];
        let a = mdot_eval(&phi, &sys, &x, &[0.0]).unwrap();
        let b = mdot_eval(&phi, &sys, &x, &[100.0]).unwrap();
        assert!((&a - &b).max_abs() < 1e-8);
    }

    #[test]
    fn mdot_is_time_derivative_along_flow() {
        let sys = andrieu3();
        let phi = NcmParams::general_random(&sys.g, 0.1, 4, 1.0, 2);
        let x = [0.2, 0.5, -0.3];
        let u = [0.7];
        let v = sys.closed_loop(&x, &u);
        let h = 1e-5;
        let step = |s: f64| -> Vec<f64> { x.iter().zip(&v).map(|(a, b)| a + s * b).collect() };
        let fd = (&ncm_eval(&phi, &step(h)).unwrap() - &ncm_eval(&phi, &step(-h)).unwrap())
            .scale(0.5 / h);
        assert!((&fd - &mdot_eval(&phi, &sys, &x, &u).unwrap()).max_abs() < 1e-6);
    }

    #[test]
    fn bounds_contain_random_samples() {
        let sys = pendulum();
        let mut phi = NcmParams::log_cosh_random(&sys.g, 0.1, 1.0, 5);
        if let NcmParams::LogCosh { entries, .. } = &mut phi {
            entries.iter_mut().for_each(|e| e.gamma = 1.0);
        }
        let d = BoxDomain::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let mb = ncm_bounds(&phi, &d, 0.1).unwrap();
        let db = mdot_bounds(&phi, &sys, &d, 0.1).unwrap();
        for x in d.samples(2000, 6) {
            assert!(mb.contains(&ncm_eval(&phi, &x).unwrap(), 0.0));
            assert!(db.contains(&mdot_drift(&phi, &sys, &x).unwrap(), 0.0));
        }
    }

    #[test]
    fn refinement_never_loosens() {
        let sys = pendulum();
        let phi = NcmParams::log_cosh_random(&sys.g, 0.1, 1.0, 8);
        let d = BoxDomain::new(vec![-1.0, -2.0], vec![1.0, 2.0]).unwrap();
        let coarse = ncm_bounds(&phi, &d, 0.2).unwrap();
        let fine = ncm_bounds(&phi, &d, 0.1).unwrap();
        assert!(coarse.encloses(&fine));
        let coarse = mdot_bounds(&phi, &sys, &d, 0.2).unwrap();
        let fine = mdot_bounds(&phi, &sys, &d, 0.1).unwrap();
        assert!(coarse.encloses(&fine));
    }

    #[test]
    fn flat_round_trip() {
        let g = andrieu3().g;
        for mut phi in random_metrics(&g, 11) {
            let v = phi.flat();
            assert_eq!(v.len(), phi.num_params());
            let doubled: Vec<f64> = v.iter().map(|a| 2.0 * a).collect();
            phi.set_flat(&doubled).unwrap();
            assert_eq!(phi.flat(), doubled);
            assert!(phi.set_flat(&v[1..]).is_err());
        }
    }

    #[test]
    fn json_round_trip_and_validation() {
        let g = andrieu3().g;
        for phi in random_metrics(&g, 12) {
            let s = phi.to_json().unwrap();
            assert!(s.contains(&format!("\"mode\": \"{}\"", phi.mode_name())));
            assert_eq!(NcmParams::from_json(&s, &g).unwrap(), phi);
        }
        let id = NcmParams::identity(3).to_json().unwrap();
        assert!(NcmParams::from_json(&id, &g).unwrap().is_identity());
        // basis not orthogonal to a different input direction
        let other = Mat::column(&[1.0, 0.0, 0.0]);
        let s = NcmParams::log_cosh_random(&g, 0.1, 1.0, 1).to_json().unwrap();
        assert!(NcmParams::from_json(&s, &other).is_err());
        let mut bad = NcmParams::log_cosh_zero(&g, 0.1);
        if let NcmParams::LogCosh { epsilon, .. } = &mut bad {
            *epsilon = 0.0;
        }
        assert!(bad.validate(&g).is_err());
    }

    #[test]
    fn rejects_wrong_state_length() {
        let phi = NcmParams::identity(2);
        assert!(ncm_eval(&phi, &[1.0]).is_err());
    }
}
