//! Control-affine benchmark systems `ẋ = f(x) + g u` and the LQR baseline.

use std::fmt;
use std::sync::Arc;

use crate::domain::BoxDomain;
use crate::error::{dim_err, Error, Result};
use crate::linalg::{care_residual, solve_care, Mat};

pub type VectorField = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type JacobianField = Arc<dyn Fn(&[f64]) -> Mat + Send + Sync>;

/// Drift `f`, its analytic Jacobian, and a constant input matrix `g`.
#[derive(Clone)]
pub struct SystemModel {
    pub name: String,
    pub n: usize,
    pub m: usize,
    f: VectorField,
    jac: JacobianField,
    pub g: Mat,
    pub domain: BoxDomain,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("g", &self.g)
            .field("domain", &self.domain)
            .finish()
    }
}

impl SystemModel {
    pub fn new(
        name: impl Into<String>,
        f: VectorField,
        jac: JacobianField,
        g: Mat,
        domain: BoxDomain,
    ) -> Result<Self> {
        let n = g.rows();
        if domain.dim() != n {
            return dim_err("domain dimension differs from state dimension");
        }
        Ok(Self {
            name: name.into(),
            n,
            m: g.cols(),
            f,
            jac,
            g,
            domain,
        })
    }

    /// Linear drift `f(x) = A x`.
    pub fn linear(name: &str, a: Mat, g: Mat, domain: BoxDomain) -> Result<Self> {
        if !a.is_square() || a.rows() != g.rows() {
            return dim_err("A must be n×n with g n×m");
        }
        let a2 = a.clone();
        Self::new(
            name,
            Arc::new(move |x| a.matvec(x).expect("state dimension")),
            Arc::new(move |_| a2.clone()),
            g,
            domain,
        )
    }

    pub fn f(&self, x: &[f64]) -> Vec<f64> {
        (self.f)(x)
    }

    pub fn jac_f(&self, x: &[f64]) -> Mat {
        (self.jac)(x)
    }

    /// `f(x) + g u`.
    pub fn closed_loop(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let gu = self.g.matvec(u).expect("input dimension");
        self.f(x).iter().zip(gu).map(|(a, b)| a + b).collect()
    }

    pub fn with_domain(mut self, domain: BoxDomain) -> Result<Self> {
        if domain.dim() != self.n {
            return dim_err("domain dimension differs from state dimension");
        }
        self.domain = domain;
        Ok(self)
    }

    /// The same plant with a linear feedback `u = −K(x − x₀)` folded into the
    /// drift, so that further inputs act on the pre-stabilized loop.
    pub fn with_linear_feedback(&self, k: &Mat, x0: &[f64]) -> Result<Self> {
        if k.shape() != (self.m, self.n) || x0.len() != self.n {
            return dim_err("feedback gain must be m×n");
        }
        let gk = self.g.matmul(k)?;
        let (f, jac) = (self.f.clone(), self.jac.clone());
        let (gk1, gk2) = (gk.clone(), gk);
        let x0 = x0.to_vec();
        Self::new(
            format!("{}+lqr", self.name),
            Arc::new(move |x| {
                let e: Vec<f64> = x.iter().zip(&x0).map(|(a, b)| a - b).collect();
                let corr = gk1.matvec(&e).expect("state dimension");
                f(x).iter().zip(corr).map(|(a, b)| a - b).collect()
            }),
            Arc::new(move |x| &jac(x) - &gk2),
            self.g.clone(),
            self.domain.clone(),
        )
    }
}

/// Physical constants of the pendulum benchmarks.
#[derive(Debug, Clone, Copy)]
pub struct PendulumParams {
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub damping: f64,
    pub inverted: bool,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            mass: 0.15,
            length: 0.5,
            damping: 0.1,
            inverted: false,
        }
    }
}

impl PendulumParams {
    /// `m g l`, the gravity torque scale.
    pub fn torque_scale(&self) -> f64 {
        self.mass * self.gravity * self.length
    }

    pub fn inertia(&self) -> f64 {
        self.mass * self.length * self.length
    }

    /// Input that holds the pendulum at rest at angle `x1`.
    pub fn equilibrium_input(&self, x1: f64) -> f64 {
        let s = if self.inverted { -1.0 } else { 1.0 };
        s * self.torque_scale() * x1.sin()
    }

    /// Mechanical energy `½ m l² ω² − s·m g l cos θ` (`s = −1` when inverted).
    pub fn energy(&self, x: &[f64]) -> f64 {
        let s = if self.inverted { -1.0 } else { 1.0 };
        0.5 * self.inertia() * x[1] * x[1] - s * self.torque_scale() * x[0].cos()
    }

    pub fn model(self) -> SystemModel {
        let sign = if self.inverted { -1.0 } else { 1.0 };
        let ml2 = self.inertia();
        let mgl = self.torque_scale();
        let d = self.damping;
        let g_over_l = self.gravity / self.length;
        let name = if self.inverted {
            "inverted_pendulum"
        } else {
            "pendulum"
        };
        SystemModel::new(
            name,
            Arc::new(move |x| vec![x[1], (-sign * mgl * x[0].sin() - d * x[1]) / ml2]),
            Arc::new(move |x| {
                Mat::from_rows(&[[0.0, 1.0], [-sign * g_over_l * x[0].cos(), -d / ml2]])
            }),
            Mat::column(&[0.0, 1.0 / ml2]),
            BoxDomain::new(
                vec![-std::f64::consts::PI, -4.0],
                vec![std::f64::consts::PI, 4.0],
            )
            .expect("static box"),
        )
        .expect("static dimensions")
    }
}

/// `θ̈ = (−m g l sin θ − 0.1 θ̇ + u)/(m l²)`, `g = 9.81`, `m = 0.15`, `l = 0.5`.
pub fn pendulum() -> SystemModel {
    PendulumParams::default().model()
}

/// The pendulum with the gravity term's sign flipped.
pub fn inverted_pendulum() -> SystemModel {
    PendulumParams {
        inverted: true,
        ..Default::default()
    }
    .model()
}

/// Three-state single-input system with a quadratic coupling in the second
/// state; its LQR design is only locally stabilizing.
pub fn andrieu3() -> SystemModel {
    SystemModel::new(
        "andrieu3",
        Arc::new(|x| {
            vec![
                -x[0] + x[2],
                x[0] * x[0] - x[1] - 2.0 * x[0] * x[2] + x[2],
                -x[1],
            ]
        }),
        Arc::new(|x| {
            Mat::from_rows(&[
                [-1.0, 0.0, 1.0],
                [2.0 * x[0] - 2.0 * x[2], -1.0, -2.0 * x[0] + 1.0],
                [0.0, -1.0, 0.0],
            ])
        }),
        Mat::column(&[0.0, 0.0, 1.0]),
        BoxDomain::new(vec![-12.0; 3], vec![12.0; 3]).expect("static box"),
    )
    .expect("static dimensions")
}

pub const SYSTEM_NAMES: [&str; 3] = ["pendulum", "inverted_pendulum", "andrieu3"];

pub fn by_name(name: &str) -> Result<SystemModel> {
    match name {
        "pendulum" => Ok(pendulum()),
        "inverted_pendulum" => Ok(inverted_pendulum()),
        "andrieu3" => Ok(andrieu3()),
        other => Err(Error::UnknownSystem(other.to_string())),
    }
}

/// Linear state feedback `u = −K (x − x_lin)` with `K = R⁻¹BᵀP`.
#[derive(Debug, Clone)]
pub struct LqrController {
    pub gain: Mat,
    pub riccati: Mat,
    pub x_lin: Vec<f64>,
    /// Max-abs Riccati residual of `riccati`.
    pub residual: f64,
}

impl LqrController {
    pub fn control(&self, x: &[f64]) -> Vec<f64> {
        let e: Vec<f64> = x.iter().zip(&self.x_lin).map(|(a, b)| a - b).collect();
        self.gain
            .matvec(&e)
            .expect("state dimension")
            .into_iter()
            .map(|v| -v)
            .collect()
    }
}

/// LQR design on the linearization `A = ∂f(x_lin)`, `B = g`.
pub fn lqr_controller(sys: &SystemModel, x_lin: &[f64], r: &Mat, q: &Mat) -> Result<LqrController> {
    if x_lin.len() != sys.n {
        return dim_err("linearization point dimension");
    }
    let a = sys.jac_f(x_lin);
    let p = solve_care(&a, &sys.g, q, r)?;
    let gain = r.inverse()?.matmul(&sys.g.transpose())?.matmul(&p)?;
    let residual = care_residual(&a, &sys.g, q, r, &p)?.max_abs();
    Ok(LqrController {
        gain,
        riccati: p,
        x_lin: x_lin.to_vec(),
        residual,
    })
}

/// Central finite-difference Jacobian of `sys.f`.
pub fn fd_jacobian(sys: &SystemModel, x: &[f64], h: f64) -> Mat {
    let mut j = Mat::zeros(sys.n, sys.n);
    let mut xp = x.to_vec();
    for k in 0..sys.n {
        xp[k] = x[k] + h;
        let fp = sys.f(&xp);
        xp[k] = x[k] - h;
        let fm = sys.f(&xp);
        xp[k] = x[k];
        for i in 0..sys.n {
            j[(i, k)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    j
}
