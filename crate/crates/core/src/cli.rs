//! Command-line pipelines: `train`, `certify`, `simulate`, `bounds`, `lqr`.
//!
//! Every command reads one JSON [`RunConfig`] and writes its artifacts under
//! the output directory. Exit codes follow sysexits: 0 success, 1 certificate
//! failed, 2 training ran out of epochs, 64 usage or invalid config, 66
//! unreadable input, 70 internal error.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::certify::{assess, CertifyConfig, ContractionProblem};
use crate::domain::BoxDomain;
use crate::error::Error;
use crate::ibp::jacobian_bounds;
use crate::linalg::{is_hurwitz, Mat};
use crate::ncm::NcmParams;
use crate::nn::MlpParams;
use crate::sim::{batch_rollouts, emit_csv, emit_svg, estimate_rate, rollout, PlotAxes, Trajectory};
use crate::systems::{by_name, lqr_controller, LqrController, SystemModel};
use crate::train::{train, write_history_csv, OptimizerKind, TrainConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CERT_FAIL: u8 = 1;
pub const EXIT_TRAIN_EXHAUSTED: u8 = 2;
pub const EXIT_USAGE: u8 = 64;
pub const EXIT_NOINPUT: u8 = 66;
pub const EXIT_SOFTWARE: u8 = 70;

#[derive(Debug, Parser)]
#[command(name = "contrakt", version, about = "Train and certify contracting neural controllers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a controller and write its parameters and loss history.
    Train(CommonArgs),
    /// Check the row certificate for a trained controller.
    Certify(CommonArgs),
    /// Roll out the closed loop and write trajectories, plots and rates.
    Simulate(CommonArgs),
    /// Print interval bounds on the controller Jacobian as CSV.
    Bounds(CommonArgs),
    /// Design the LQR baseline at the equilibrium.
    Lqr(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Seed; overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// A failed command: exit code and message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn usage(msg: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_USAGE,
            message: msg.to_string(),
        }
    }
    fn input(msg: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_NOINPUT,
            message: msg.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: EXIT_SOFTWARE,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type CmdResult = std::result::Result<u8, Failure>;

fn default_alpha() -> f64 {
    0.3
}
fn default_hidden() -> Vec<usize> {
    vec![32]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSpec {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl Default for ControllerSpec {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            alpha: default_alpha(),
        }
    }
}

/// LQR weights; identity when omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LqrSpec {
    pub q: Option<Mat>,
    pub r: Option<Mat>,
}

fn d_nu() -> f64 {
    1.0
}
fn d_lr() -> f64 {
    1e-3
}
fn d_epochs() -> usize {
    20_000
}
fn d_target() -> f64 {
    1e-4
}
fn d_log_every() -> usize {
    100
}
fn d_true() -> bool {
    true
}
fn d_opt() -> OptimizerKind {
    OptimizerKind::Adam
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub rho: f64,
    pub grid_tau: f64,
    #[serde(default = "d_nu")]
    pub nu: f64,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_opt")]
    pub optimizer: OptimizerKind,
    #[serde(default = "d_target")]
    pub target_l1: f64,
    #[serde(default = "d_log_every")]
    pub log_every: usize,
    #[serde(default = "d_true")]
    pub early_stop: bool,
    #[serde(default)]
    pub train_metric: bool,
}

fn d_oracle_samples() -> usize {
    1000
}
fn d_oracle_seed() -> u64 {
    7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifySpec {
    pub rho: f64,
    pub grid_tau: f64,
    #[serde(default = "d_oracle_samples")]
    pub oracle_samples: usize,
    #[serde(default = "d_target")]
    pub equilibrium_tol: f64,
    #[serde(default = "d_oracle_seed")]
    pub oracle_seed: u64,
}

fn d_t() -> f64 {
    10.0
}
fn d_dt() -> f64 {
    1e-2
}
fn d_n_init() -> usize {
    20
}
fn d_radius() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSpec {
    #[serde(rename = "T", default = "d_t")]
    pub t_end: f64,
    #[serde(default = "d_dt")]
    pub dt: f64,
    #[serde(default = "d_n_init")]
    pub n_init: usize,
    #[serde(default = "d_radius")]
    pub radius: f64,
    /// Falls back to the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Extra initial states rolled out in addition to the random ball.
    #[serde(default)]
    pub initial_states: Vec<Vec<f64>>,
    /// Time window for the rate fit; the whole horizon when omitted.
    #[serde(default)]
    pub rate_window: Option<(f64, f64)>,
    /// Also roll out the LQR baseline from the same initial states.
    #[serde(default)]
    pub compare_lqr: bool,
}

impl Default for SimulateSpec {
    fn default() -> Self {
        Self {
            t_end: d_t(),
            dt: d_dt(),
            n_init: d_n_init(),
            radius: d_radius(),
            seed: None,
            initial_states: Vec::new(),
            rate_window: None,
            compare_lqr: false,
        }
    }
}

/// One JSON document describing a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub system: String,
    pub x_star: Vec<f64>,
    /// State box for the certificate; the system's default box when omitted.
    #[serde(default)]
    pub domain: Option<BoxDomain>,
    #[serde(default)]
    pub seed: u64,
    /// Fold an LQR gain designed at `x_star` into the plant; the network
    /// then supplies an additive correction.
    #[serde(default)]
    pub prestabilize: bool,
    #[serde(default)]
    pub lqr: LqrSpec,
    #[serde(default)]
    pub controller: ControllerSpec,
    /// Trained parameters; `<output_dir>/controller.json` when omitted.
    #[serde(default)]
    pub controller_path: Option<PathBuf>,
    /// Metric parameters; the identity metric when omitted.
    #[serde(default)]
    pub ncm_path: Option<PathBuf>,
    pub train: Option<TrainSpec>,
    pub certify: Option<CertifySpec>,
    #[serde(default)]
    pub simulate: SimulateSpec,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(s: &str) -> std::result::Result<Self, Failure> {
        serde_json::from_str(s).map_err(|e| Failure::usage(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> std::result::Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::input(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Everything resolved from a config: plant, metric, domain, output paths.
pub struct Session {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub seed: u64,
    /// The system as named in the config.
    pub base: SystemModel,
    /// The plant the network acts on (pre-stabilized when requested).
    pub plant: SystemModel,
    pub lqr: Option<LqrController>,
    pub metric: NcmParams,
}

impl Session {
    pub fn new(cfg: RunConfig, output: Option<PathBuf>, seed: Option<u64>) -> std::result::Result<Self, Failure> {
        let base = by_name(&cfg.system).map_err(Failure::usage)?;
        if cfg.x_star.len() != base.n {
            return Err(Failure::usage(format!(
                "x_star has length {}, system {} has {} states",
                cfg.x_star.len(),
                base.name,
                base.n
            )));
        }
        let domain = cfg.domain.clone().unwrap_or_else(|| base.domain.clone());
        let base = base.with_domain(domain).map_err(Failure::usage)?;
        let lqr = if cfg.prestabilize {
            Some(design_lqr(&base, &cfg)?)
        } else {
            None
        };
        let plant = match &lqr {
            Some(l) => base.with_linear_feedback(&l.gain, &cfg.x_star)?,
            None => base.clone(),
        };
        let metric = match &cfg.ncm_path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Failure::input(format!("cannot read metric {}: {e}", p.display())))?;
                NcmParams::from_json(&text, &base.g)
                    .map_err(|e| Failure::input(format!("invalid metric {}: {e}", p.display())))?
            }
            None => NcmParams::identity(base.n),
        };
        let out = output
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        let seed = seed.unwrap_or(cfg.seed);
        Ok(Self {
            cfg,
            out,
            seed,
            base,
            plant,
            lqr,
            metric,
        })
    }

    fn ensure_out(&self) -> std::result::Result<(), Failure> {
        fs::create_dir_all(&self.out)?;
        Ok(())
    }

    fn controller_path(&self) -> PathBuf {
        self.cfg
            .controller_path
            .clone()
            .unwrap_or_else(|| self.out.join("controller.json"))
    }

    pub fn load_controller(&self) -> std::result::Result<MlpParams, Failure> {
        let path = self.controller_path();
        let text = fs::read_to_string(&path)
            .map_err(|e| Failure::input(format!("cannot read controller {}: {e}", path.display())))?;
        let p = MlpParams::from_json(&text)
            .map_err(|e| Failure::input(format!("invalid controller {}: {e}", path.display())))?;
        if p.input_dim() != self.base.n || p.output_dim() != self.base.m {
            return Err(Failure::input(format!(
                "controller {} does not match system {}",
                path.display(),
                self.base.name
            )));
        }
        Ok(p)
    }
}

fn design_lqr(sys: &SystemModel, cfg: &RunConfig) -> std::result::Result<LqrController, Failure> {
    let q = cfg.lqr.q.clone().unwrap_or_else(|| Mat::identity(sys.n));
    let r = cfg.lqr.r.clone().unwrap_or_else(|| Mat::identity(sys.m));
    if q.shape() != (sys.n, sys.n) || r.shape() != (sys.m, sys.m) {
        return Err(Failure::usage("LQR weights have the wrong shape"));
    }
    Ok(lqr_controller(sys, &cfg.x_star, &r, &q)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> std::result::Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn create(path: &Path) -> std::result::Result<BufWriter<fs::File>, Failure> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

pub fn cmd_train(s: &Session) -> CmdResult {
    let spec = s
        .cfg
        .train
        .as_ref()
        .ok_or_else(|| Failure::usage("config has no \"train\" section"))?;
    let mut sizes = vec![s.base.n];
    sizes.extend(&s.cfg.controller.hidden);
    sizes.push(s.base.m);
    let init = MlpParams::random(&sizes, s.cfg.controller.alpha, s.seed).map_err(Failure::usage)?;
    let tc = TrainConfig {
        rho: spec.rho,
        nu: spec.nu,
        lr: spec.lr,
        epochs: spec.epochs,
        seed: s.seed,
        domain: s.plant.domain.clone(),
        grid_tau: spec.grid_tau,
        x_star: s.cfg.x_star.clone(),
        optimizer: spec.optimizer,
        target_l1: spec.target_l1,
        log_every: spec.log_every,
        early_stop: spec.early_stop,
        train_metric: spec.train_metric,
    };
    tc.validate().map_err(Failure::usage)?;
    let result = train(&s.plant, &init, &s.metric, &tc)?;
    s.ensure_out()?;
    fs::write(s.out.join("controller.json"), result.controller.to_json()? + "\n")?;
    fs::write(s.out.join("metric.json"), result.metric.to_json()? + "\n")?;
    write_history_csv(&result.history, create(&s.out.join("history.csv"))?)?;
    info!(
        "wrote {} ({} epochs, converged: {})",
        s.out.display(),
        result.epochs_run,
        result.converged
    );
    Ok(if result.converged {
        EXIT_OK
    } else {
        EXIT_TRAIN_EXHAUSTED
    })
}

pub fn cmd_certify(s: &Session) -> CmdResult {
    let spec = s
        .cfg
        .certify
        .as_ref()
        .ok_or_else(|| Failure::usage("config has no \"certify\" section"))?;
    let controller = s.load_controller()?;
    let cc = CertifyConfig {
        rho: spec.rho,
        domain: s.plant.domain.clone(),
        grid_tau: spec.grid_tau,
        x_star: s.cfg.x_star.clone(),
        equilibrium_tol: spec.equilibrium_tol,
        oracle_samples: spec.oracle_samples,
        oracle_seed: spec.oracle_seed,
    };
    let report = assess(&s.plant, &s.metric, &controller, &cc)?;
    s.ensure_out()?;
    write_json(&s.out.join("certificate.json"), &report)?;
    info!("certificate pass: {}", report.pass);
    Ok(if report.pass { EXIT_OK } else { EXIT_CERT_FAIL })
}

#[derive(Debug, Serialize)]
struct RolloutSummary {
    initial_state: Vec<f64>,
    final_state: Vec<f64>,
    final_distance: f64,
    rate: Option<f64>,
    diverged_at: Option<f64>,
}

#[derive(Debug, Serialize)]
struct SimulationSummary {
    controller: &'static str,
    x_star: Vec<f64>,
    max_final_distance: f64,
    min_rate: Option<f64>,
    any_diverged: bool,
    rollouts: Vec<RolloutSummary>,
}

fn summarize(trajs: &[Trajectory], x_star: &[f64], window: (f64, f64), label: &'static str) -> SimulationSummary {
    let rollouts: Vec<RolloutSummary> = trajs
        .iter()
        .map(|tr| {
            let last = tr.last().to_vec();
            let dist = last
                .iter()
                .zip(x_star)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            RolloutSummary {
                initial_state: tr.x[0].clone(),
                final_distance: dist,
                final_state: last,
                rate: if tr.diverged() {
                    None
                } else {
                    estimate_rate(tr, x_star, window).ok()
                },
                diverged_at: tr.diverged_at,
            }
        })
        .collect();
    let rates: Vec<f64> = rollouts.iter().filter_map(|r| r.rate).collect();
    SimulationSummary {
        controller: label,
        x_star: x_star.to_vec(),
        max_final_distance: rollouts
            .iter()
            .map(|r| if r.final_distance.is_finite() { r.final_distance } else { f64::INFINITY })
            .fold(0.0, f64::max),
        min_rate: rates.iter().cloned().reduce(f64::min),
        any_diverged: rollouts.iter().any(|r| r.diverged_at.is_some()),
        rollouts,
    }
}

fn write_plots(trajs: &[Trajectory], dir: &Path, prefix: &str, title: &str) -> std::result::Result<(), Failure> {
    let n = trajs.first().map_or(0, |t| t.x[0].len());
    for i in 0..n {
        emit_svg(
            trajs,
            PlotAxes::Time(i),
            &format!("{title}: x{}", i + 1),
            create(&dir.join(format!("{prefix}_x{}.svg", i + 1)))?,
        )?;
    }
    if n >= 2 {
        emit_svg(
            trajs,
            PlotAxes::Phase(0, 1),
            &format!("{title}: phase"),
            create(&dir.join(format!("{prefix}_phase.svg")))?,
        )?;
    }
    Ok(())
}

pub fn cmd_simulate(s: &Session) -> CmdResult {
    let sim = &s.cfg.simulate;
    let controller = s.load_controller()?;
    let seed = sim.seed.unwrap_or(s.seed);
    let policy = |x: &[f64]| controller.forward(x).expect("validated dimensions");
    let mut trajs = Vec::new();
    for x0 in &sim.initial_states {
        if x0.len() != s.base.n {
            return Err(Failure::usage("initial state has the wrong length"));
        }
        trajs.push(rollout(&s.plant, policy, x0, sim.t_end, sim.dt)?);
    }
    trajs.extend(batch_rollouts(
        &s.plant,
        policy,
        &s.cfg.x_star,
        sim.n_init,
        sim.radius,
        seed,
        sim.t_end,
        sim.dt,
    )?);
    let window = sim.rate_window.unwrap_or((0.0, sim.t_end));
    s.ensure_out()?;
    emit_csv(&trajs, create(&s.out.join("trajectories.csv"))?)?;
    write_plots(&trajs, &s.out, "trajectories", "closed loop")?;
    write_json(
        &s.out.join("simulation.json"),
        &summarize(&trajs, &s.cfg.x_star, window, "network"),
    )?;
    if sim.compare_lqr {
        let lqr = match &s.lqr {
            Some(l) => l.clone(),
            None => design_lqr(&s.base, &s.cfg)?,
        };
        let x0s: Vec<Vec<f64>> = trajs.iter().map(|t| t.x[0].clone()).collect();
        let lqr_trajs = x0s
            .iter()
            .map(|x0| rollout(&s.base, |x| lqr.control(x), x0, sim.t_end, sim.dt))
            .collect::<crate::error::Result<Vec<_>>>()?;
        emit_csv(&lqr_trajs, create(&s.out.join("lqr_trajectories.csv"))?)?;
        write_plots(&lqr_trajs, &s.out, "lqr_trajectories", "LQR")?;
        write_json(
            &s.out.join("lqr_simulation.json"),
            &summarize(&lqr_trajs, &s.cfg.x_star, window, "lqr"),
        )?;
    }
    Ok(EXIT_OK)
}

/// Writes `i,j,lo,hi` CSV for the controller Jacobian (also printed) and for
/// the contraction left-hand side when a certify section is present.
pub fn cmd_bounds(s: &Session) -> std::result::Result<(u8, String), Failure> {
    let controller = s.load_controller()?;
    let jb = jacobian_bounds(&controller);
    let csv = jb.to_csv();
    s.ensure_out()?;
    fs::write(s.out.join("jacobian_bounds.csv"), &csv)?;
    if let Some(spec) = &s.cfg.certify {
        let pb = ContractionProblem::new(&s.plant, &s.metric, spec.rho, &s.plant.domain, spec.grid_tau)?;
        fs::write(s.out.join("contraction_bounds.csv"), pb.lhs_bounds(&controller)?.to_csv())?;
    }
    Ok((EXIT_OK, csv))
}

#[derive(Debug, Serialize)]
struct LqrReport {
    x_lin: Vec<f64>,
    gain: Mat,
    riccati: Mat,
    care_residual: f64,
    closed_loop_hurwitz: bool,
}

pub fn cmd_lqr(s: &Session) -> CmdResult {
    let lqr = design_lqr(&s.base, &s.cfg)?;
    let a = s.base.jac_f(&s.cfg.x_star);
    let acl = &a - &s.base.g.matmul(&lqr.gain)?;
    let report = LqrReport {
        x_lin: lqr.x_lin.clone(),
        gain: lqr.gain.clone(),
        riccati: lqr.riccati.clone(),
        care_residual: lqr.residual,
        closed_loop_hurwitz: is_hurwitz(&acl),
    };
    s.ensure_out()?;
    write_json(&s.out.join("lqr.json"), &report)?;
    info!("LQR gain {:?}, residual {:.2e}", lqr.gain.to_rows(), lqr.residual);
    Ok(EXIT_OK)
}

/// Runs one parsed command; returns the exit code.
pub fn run(cli: Cli) -> u8 {
    let (Command::Train(a)
    | Command::Certify(a)
    | Command::Simulate(a)
    | Command::Bounds(a)
    | Command::Lqr(a)) = &cli.command;
    let outcome = RunConfig::load(&a.config)
        .and_then(|cfg| Session::new(cfg, a.output.clone(), a.seed))
        .and_then(|s| match &cli.command {
            Command::Train(_) => cmd_train(&s),
            Command::Certify(_) => cmd_certify(&s),
            Command::Simulate(_) => cmd_simulate(&s),
            Command::Lqr(_) => cmd_lqr(&s),
            Command::Bounds(_) => cmd_bounds(&s).map(|(code, csv)| {
                print!("{csv}");
                code
            }),
        });
    match outcome {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

/// Parses `args` and runs; usage errors exit with 64.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_USAGE
            } else {
                EXIT_OK
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"system": "pendulum", "x_star": [0.5, 0.0]}"#).unwrap();
        assert_eq!(cfg.simulate.n_init, 20);
        assert_eq!(cfg.simulate.t_end, 10.0);
        assert_eq!(cfg.controller.hidden, vec![32]);
        assert!(cfg.train.is_none());
    }

    #[test]
    fn unknown_system_is_a_usage_error() {
        let cfg = RunConfig::from_json(r#"{"system": "cartpole", "x_star": [0.0]}"#).unwrap();
        let err = Session::new(cfg, None, None).err().unwrap();
        assert_eq!(err.code, EXIT_USAGE);
    }

    #[test]
    fn missing_system_is_a_usage_error() {
        assert_eq!(RunConfig::from_json(r#"{"x_star": [0.0]}"#).unwrap_err().code, EXIT_USAGE);
    }

    #[test]
    fn bad_flags_exit_64() {
        assert_eq!(main_with_args(["contrakt", "train"]), EXIT_USAGE);
        assert_eq!(main_with_args(["contrakt", "fly", "--config", "x"]), EXIT_USAGE);
    }

    #[test]
    fn missing_config_file_exits_66() {
        let code = main_with_args(["contrakt", "lqr", "--config", "/nonexistent/run.json"]);
        assert_eq!(code, EXIT_NOINPUT);
    }
}
