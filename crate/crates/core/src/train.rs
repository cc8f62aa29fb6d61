//! Controller synthesis: minimize `ℓ₁ + ν ℓ₂`, where `ℓ₁ = ‖f(x*) + g u(x*)‖`
//! pins the equilibrium and `ℓ₂ = Σ_i [−margin_i]₊` is the hinge on the row
//! margins of the certificate.

use std::io::Write;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::certify::ContractionProblem;
use crate::domain::BoxDomain;
use crate::error::{dim_err, Error, Result};
use crate::ncm::NcmParams;
use crate::nn::{MlpGrads, MlpParams};
use crate::systems::SystemModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

fn default_nu() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    1e-3
}
fn default_target_l1() -> f64 {
    1e-4
}
fn default_log_every() -> usize {
    100
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rho: f64,
    #[serde(default = "default_nu")]
    pub nu: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    pub domain: BoxDomain,
    pub grid_tau: f64,
    pub x_star: Vec<f64>,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_target_l1")]
    pub target_l1: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Stop as soon as `ℓ₁ < target_l1` and `ℓ₂ = 0`.
    #[serde(default = "default_true")]
    pub early_stop: bool,
    /// Also update the metric parameters (finite-difference gradients of `ℓ₂`).
    #[serde(default)]
    pub train_metric: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if !(self.rho > 0.0) {
            return bad("rho must be positive");
        }
        if !(self.nu > 0.0) {
            return bad("nu must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1");
        }
        self.domain.validate()?;
        if self.x_star.len() != self.domain.dim() {
            return dim_err("x_star and domain dimensions disagree");
        }
        Ok(())
    }
}

/// `ℓ₁ = ‖f(x*) + g u(x*)‖`.
pub fn loss_l1(sys: &SystemModel, controller: &MlpParams, x_star: &[f64]) -> Result<f64> {
    crate::certify::equilibrium_residual(sys, controller, x_star)
}

/// `ℓ₁` and its gradient with respect to the controller weights. At a zero
/// residual the gradient is zero.
pub fn loss_l1_grad(sys: &SystemModel, controller: &MlpParams, x_star: &[f64]) -> Result<(f64, MlpGrads)> {
    let u = controller.forward(x_star)?;
    let v = sys.closed_loop(x_star, &u);
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok((0.0, MlpGrads::zeros_like(controller)));
    }
    let unit: Vec<f64> = v.iter().map(|a| a / norm).collect();
    let cot = sys.g.tmatvec(&unit)?;
    Ok((norm, controller.backprop(x_star, &cot)?))
}

/// `ℓ₂ = Σ_i max(0, −margin_i)`.
pub fn loss_l2(row_margins: &[f64]) -> f64 {
    row_margins.iter().map(|m| (-m).max(0.0)).sum()
}

/// Cotangent of `ℓ₂` on the margins: `−1` on violated rows. A margin of
/// exactly zero counts as satisfied.
pub fn loss_l2_margin_weights(row_margins: &[f64]) -> Vec<f64> {
    row_margins.iter().map(|&m| if m < 0.0 { -1.0 } else { 0.0 }).collect()
}

/// `ℓ₂` and its subgradient with respect to the controller weights.
pub fn loss_l2_grad(problem: &ContractionProblem, controller: &MlpParams) -> Result<(f64, MlpGrads)> {
    let margins = problem.row_margins(controller)?;
    let w = loss_l2_margin_weights(&margins);
    let grads = problem.row_margins_backward(controller, &w)?;
    Ok((loss_l2(&margins), grads))
}

/// First-order update rule over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, len: usize) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - self.beta1.powi(self.t);
                let c2 = 1.0 - self.beta2.powi(self.t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grad)
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub controller: MlpParams,
    pub metric: NcmParams,
    pub history: Vec<HistoryRow>,
    /// `ℓ₁ < target_l1` and `ℓ₂ = 0` at the returned parameters.
    pub converged: bool,
    pub epochs_run: usize,
}

/// Writes `epoch,l1,l2,total` rows.
pub fn write_history_csv<W: Write>(rows: &[HistoryRow], mut w: W) -> Result<()> {
    writeln!(w, "epoch,l1,l2,total")?;
    for r in rows {
        writeln!(w, "{},{:e},{:e},{:e}", r.epoch, r.l1, r.l2, r.total)?;
    }
    Ok(())
}

fn finite(v: f64, what: &str, epoch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} at epoch {epoch}")))
    }
}

/// Central finite-difference gradient of `ℓ₂` with respect to the metric
/// parameters.
fn metric_l2_grad(
    sys: &SystemModel,
    phi: &NcmParams,
    controller: &MlpParams,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let base = phi.flat();
    let h = 1e-6;
    let mut grad = vec![0.0; base.len()];
    let mut probe = phi.clone();
    let l2_at = |p: &NcmParams| -> Result<f64> {
        let pb = ContractionProblem::new(sys, p, cfg.rho, &cfg.domain, cfg.grid_tau)?;
        Ok(loss_l2(&pb.row_margins(controller)?))
    };
    for k in 0..base.len() {
        let mut v = base.clone();
        v[k] = base[k] + h;
        probe.set_flat(&v)?;
        let up = l2_at(&probe)?;
        v[k] = base[k] - h;
        probe.set_flat(&v)?;
        let down = l2_at(&probe)?;
        grad[k] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Runs the optimization. Deterministic for a fixed input.
pub fn train(
    sys: &SystemModel,
    controller: &MlpParams,
    phi: &NcmParams,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    controller.validate()?;
    phi.validate(&sys.g)?;
    if controller.input_dim() != sys.n || controller.output_dim() != sys.m || cfg.x_star.len() != sys.n {
        return dim_err("controller, system and equilibrium dimensions disagree");
    }
    let mut theta = controller.clone();
    let mut phi = phi.clone();
    let update_metric = cfg.train_metric && phi.num_params() > 0;
    let mut problem = ContractionProblem::new(sys, &phi, cfg.rho, &cfg.domain, cfg.grid_tau)?;
    info!(
        "eta = {:.6}, c1 = {:.6}, c2 = {:.6}",
        problem.eta.eta, problem.eta.c1, problem.eta.c2
    );
    let mut flat = theta.flat();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, flat.len());
    let mut phi_flat = phi.flat();
    let mut phi_opt = Optimizer::new(cfg.optimizer, cfg.lr, phi_flat.len());
    let mut history = Vec::new();
    let mut epochs_run = cfg.epochs;

    for epoch in 0..=cfg.epochs {
        let (l1, g1) = loss_l1_grad(sys, &theta, &cfg.x_star)?;
        let (l2, g2) = loss_l2_grad(&problem, &theta)?;
        let l1 = finite(l1, "l1", epoch)?;
        let l2 = finite(l2, "l2", epoch)?;
        let total = l1 + cfg.nu * l2;
        let done = cfg.early_stop && l1 < cfg.target_l1 && l2 == 0.0;
        if epoch % cfg.log_every == 0 || epoch == cfg.epochs || done {
            history.push(HistoryRow { epoch, l1, l2, total });
            debug!("epoch {epoch}: l1 = {l1:.3e}, l2 = {l2:.3e}");
        }
        if done {
            epochs_run = epoch;
            break;
        }
        if epoch == cfg.epochs {
            break;
        }
        let mut grad = g1;
        grad.add_scaled(&g2, cfg.nu);
        let gflat = grad.flat();
        if gflat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient at epoch {epoch}")));
        }
        opt.step(&mut flat, &gflat);
        theta.set_flat(&flat)?;

        if update_metric {
            let gphi: Vec<f64> = metric_l2_grad(sys, &phi, &theta, cfg)?
                .into_iter()
                .map(|v| cfg.nu * v)
                .collect();
            phi_opt.step(&mut phi_flat, &gphi);
            phi.set_flat(&phi_flat)?;
            problem = ContractionProblem::new(sys, &phi, cfg.rho, &cfg.domain, cfg.grid_tau)?;
        }
    }
    let l1 = loss_l1(sys, &theta, &cfg.x_star)?;
    let l2 = loss_l2(&problem.row_margins(&theta)?);
    let converged = l1 < cfg.target_l1 && l2 == 0.0;
    info!("finished after {epochs_run} epochs: l1 = {l1:.3e}, l2 = {l2:.3e}");
    Ok(TrainResult {
        controller: theta,
        metric: phi,
        history,
        converged,
        epochs_run,
    })
}
