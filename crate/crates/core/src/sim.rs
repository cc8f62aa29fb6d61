//! Fixed-step closed-loop rollouts, decay-rate estimates, and CSV/SVG output.

use std::fmt::Write as _;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{dim_err, Error, Result};
use crate::systems::SystemModel;

/// Norm beyond which a rollout is declared divergent and stopped.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    /// Input applied at each sample; the last one is evaluated at the final
    /// state.
    pub u: Vec<Vec<f64>>,
    /// Time at which `‖x‖` first exceeded [`DIVERGENCE_NORM`] or became
    /// non-finite.
    pub diverged_at: Option<f64>,
}

impl Trajectory {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn last(&self) -> &[f64] {
        self.x.last().expect("trajectories hold at least the initial state")
    }

    /// State at the sample closest to time `t`.
    pub fn at(&self, t: f64) -> &[f64] {
        let i = self
            .t
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        &self.x[i]
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn axpy(x: &[f64], h: f64, k: &[f64]) -> Vec<f64> {
    x.iter().zip(k).map(|(a, b)| a + h * b).collect()
}

/// Classical RK4 on `ẋ = f(x) + g u(x)` from `x0` over `[0, t_end]`.
pub fn rollout<C>(sys: &SystemModel, controller: C, x0: &[f64], t_end: f64, dt: f64) -> Result<Trajectory>
where
    C: Fn(&[f64]) -> Vec<f64>,
{
    if x0.len() != sys.n {
        return dim_err("initial state dimension");
    }
    if !(dt > 0.0) || !(t_end >= 0.0) {
        return Err(Error::InvalidArgument("need dt > 0 and t_end ≥ 0".into()));
    }
    let rhs = |x: &[f64]| sys.closed_loop(x, &controller(x));
    let steps = (t_end / dt).round() as usize;
    let mut tr = Trajectory {
        t: Vec::with_capacity(steps + 1),
        x: Vec::with_capacity(steps + 1),
        u: Vec::with_capacity(steps + 1),
        diverged_at: None,
    };
    let mut x = x0.to_vec();
    for k in 0..=steps {
        let u = controller(&x);
        tr.t.push(k as f64 * dt);
        tr.x.push(x.clone());
        tr.u.push(u.clone());
        let nx = norm(&x);
        if !nx.is_finite() || nx > DIVERGENCE_NORM {
            tr.diverged_at = Some(k as f64 * dt);
            break;
        }
        if k == steps {
            break;
        }
        let k1 = sys.closed_loop(&x, &u);
        let k2 = rhs(&axpy(&x, dt / 2.0, &k1));
        let k3 = rhs(&axpy(&x, dt / 2.0, &k2));
        let k4 = rhs(&axpy(&x, dt, &k3));
        for i in 0..x.len() {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    Ok(tr)
}

/// Distances below this are treated as converged and left out of the fit.
pub const RATE_FLOOR: f64 = 1e-10;

/// Exponential decay rate `ρ̂`: the negated least-squares slope of
/// `log ‖x(t) − x*‖` over samples with `t ∈ [t0, t1]`.
pub fn estimate_rate(traj: &Trajectory, x_star: &[f64], window: (f64, f64)) -> Result<f64> {
    let pts: Vec<(f64, f64)> = traj
        .t
        .iter()
        .zip(&traj.x)
        .filter(|(t, _)| **t >= window.0 && **t <= window.1)
        .filter_map(|(t, x)| {
            let d = norm(&x.iter().zip(x_star).map(|(a, b)| a - b).collect::<Vec<_>>());
            (d > RATE_FLOOR).then(|| (*t, d.ln()))
        })
        .collect();
    if pts.len() < 2 {
        return Err(Error::InvalidArgument(
            "rate window holds fewer than two usable samples".into(),
        ));
    }
    let k = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|(t, y)| (t - mt) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(t, _)| (t - mt) * (t - mt)).sum();
    Ok(-sxy / sxx)
}

/// `count` seeded points uniformly distributed in the ball of `radius`
/// around `center`.
pub fn sample_ball(center: &[f64], radius: f64, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = center.len();
    let unit = Uniform::new(0.0f64, 1.0);
    (0..count)
        .map(|_| {
            let dir: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let len = norm(&dir);
            let r = radius * unit.sample(&mut rng).powf(1.0 / n as f64);
            center.iter().zip(&dir).map(|(c, d)| c + r * d / len).collect()
        })
        .collect()
}

/// Rollouts from `count` seeded initial states in the ball of `radius`
/// around `center`.
#[allow(clippy::too_many_arguments)]
pub fn batch_rollouts<C>(
    sys: &SystemModel,
    controller: C,
    center: &[f64],
    count: usize,
    radius: f64,
    seed: u64,
    t_end: f64,
    dt: f64,
) -> Result<Vec<Trajectory>>
where
    C: Fn(&[f64]) -> Vec<f64>,
{
    sample_ball(center, radius, count, seed)
        .iter()
        .map(|x0| rollout(sys, &controller, x0, t_end, dt))
        .collect()
}

/// Writes `t,x1,…,xn,u1,…,um,traj` rows, trajectories numbered from 0.
pub fn emit_csv<W: Write>(trajs: &[Trajectory], mut w: W) -> Result<()> {
    let (n, m) = trajs.first().map_or((0, 0), |t| (t.x[0].len(), t.u[0].len()));
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=m).map(|i| format!("u{i}")));
    header.push("traj".into());
    writeln!(w, "{}", header.join(","))?;
    for (k, tr) in trajs.iter().enumerate() {
        for ((t, x), u) in tr.t.iter().zip(&tr.x).zip(&tr.u) {
            let mut row = vec![t.to_string()];
            row.extend(x.iter().chain(u).map(|v| format!("{v:e}")));
            row.push(k.to_string());
            writeln!(w, "{}", row.join(","))?;
        }
    }
    Ok(())
}

/// What an SVG plot shows on its axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotAxes {
    /// State component `i` against time.
    Time(usize),
    /// State component `i` (horizontal) against component `j`.
    Phase(usize, usize),
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Writes a line plot with one `<path>` per trajectory. Output depends only
/// on the data, so equal inputs give byte-identical files.
pub fn emit_svg<W: Write>(trajs: &[Trajectory], axes: PlotAxes, title: &str, mut w: W) -> Result<()> {
    let (width, height, pad) = (640.0, 480.0, 60.0);
    let pick = |tr: &Trajectory, k: usize| -> (f64, f64) {
        match axes {
            PlotAxes::Time(i) => (tr.t[k], tr.x[k][i]),
            PlotAxes::Phase(i, j) => (tr.x[k][i], tr.x[k][j]),
        }
    };
    let n = trajs.first().map_or(0, |t| t.x[0].len());
    let (i_max, label) = match axes {
        PlotAxes::Time(i) => (i, ("t".to_string(), format!("x{}", i + 1))),
        PlotAxes::Phase(i, j) => (i.max(j), (format!("x{}", i + 1), format!("x{}", j + 1))),
    };
    if !trajs.is_empty() && i_max >= n {
        return dim_err("plot axis exceeds state dimension");
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for tr in trajs {
        for k in 0..tr.t.len() {
            let (a, b) = pick(tr, k);
            if a.is_finite() && b.is_finite() {
                x0 = x0.min(a);
                x1 = x1.max(a);
                y0 = y0.min(b);
                y1 = y1.max(b);
            }
        }
    }
    if !(x1 > x0) {
        (x0, x1) = (x0.min(0.0) - 1.0, x1.max(0.0) + 1.0);
    }
    if !(y1 > y0) {
        (y0, y1) = (y0.min(0.0) - 1.0, y1.max(0.0) + 1.0);
    }
    let sx = |a: f64| pad + (a - x0) / (x1 - x0) * (width - 2.0 * pad);
    let sy = |b: f64| height - pad - (b - y0) / (y1 - y0) * (height - 2.0 * pad);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        width / 2.0,
        xml_escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        width - 2.0 * pad,
        height - 2.0 * pad
    );
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="{anchor}" font-family="sans-serif" font-size="11">{v:.3}</text>"#,
            sx(v),
            height - pad + 16.0
        );
    }
    for v in [y0, y1] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.3}</text>"#,
            pad - 6.0,
            sy(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13">{}</text>"#,
        width / 2.0,
        height - 16.0,
        label.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 18 {})">{}</text>"#,
        height / 2.0,
        height / 2.0,
        label.1
    );
    for (k, tr) in trajs.iter().enumerate() {
        let mut d = String::new();
        let mut pen_up = true;
        for idx in 0..tr.t.len() {
            let (a, b) = pick(tr, idx);
            if !(a.is_finite() && b.is_finite()) {
                pen_up = true;
                continue;
            }
            let cmd = if pen_up { 'M' } else { 'L' };
            let _ = write!(d, "{cmd}{:.2},{:.2} ", sx(a), sy(b));
            pen_up = false;
        }
        let _ = writeln!(
            s,
            r#"<path d="{}" fill="none" stroke="{}" stroke-width="1.2"/>"#,
            d.trim_end(),
            PALETTE[k % PALETTE.len()]
        );
    }
    s.push_str("</svg>\n");
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
