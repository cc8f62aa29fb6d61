//! Element-wise interval bounds on matrix products.
//!
//! Three primitive propagators cover every product that appears in the
//! certificate:
//!
//! - [`left_mul_bounds`]: `W·Q` for a known matrix `W` and interval `Q`.
//! - [`slope_scale_bounds`]: `J·P` for an unknown diagonal `J` with entries in
//!   `[a, b]`, `a > 0`, and interval `P`.
//! - [`interval_product_bounds`]: `W·P` with both factors interval-valued.
//!
//! [`jacobian_bounds`] chains the first two through the controller to bound
//! `∂u/∂x` uniformly over the state space, and [`contraction_lhs_bounds`]
//! assembles the bounds on `M g ∂u/∂x + Ṁ` used by the row test.
//!
//! Each propagator has a reverse pass (`*_backward`) that maps cotangents on
//! the output bounds back to the inputs. The maps are piecewise linear; on
//! ties the branch listed first in the forward pass receives the gradient.

use crate::error::{dim_err, Error, Result};
use crate::linalg::Mat;
use crate::nn::{Layer, MlpGrads, MlpParams};

/// Element-wise lower and upper bounds of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixBounds {
    pub lo: Mat,
    pub hi: Mat,
}

impl MatrixBounds {
    pub fn new(lo: Mat, hi: Mat) -> Result<Self> {
        if !lo.same_shape(&hi) {
            return dim_err("lower and upper bounds differ in shape");
        }
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::NonFinite("matrix bounds".into()));
        }
        if lo
            .as_slice()
            .iter()
            .zip(hi.as_slice())
            .any(|(l, h)| l > h)
        {
            return Err(Error::InvalidArgument("lower bound exceeds upper bound".into()));
        }
        Ok(Self { lo, hi })
    }

    /// Degenerate bounds `[m, m]`.
    pub fn point(m: Mat) -> Self {
        Self {
            lo: m.clone(),
            hi: m,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::point(Mat::zeros(rows, cols))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.lo.shape()
    }

    pub fn rows(&self) -> usize {
        self.lo.rows()
    }

    pub fn cols(&self) -> usize {
        self.lo.cols()
    }

    /// True when every entry of `m` lies within the bounds, up to `tol`
    /// relative slack for floating-point rounding.
    pub fn contains(&self, m: &Mat, tol: f64) -> bool {
        m.same_shape(&self.lo)
            && m.as_slice()
                .iter()
                .zip(self.lo.as_slice().iter().zip(self.hi.as_slice()))
                .all(|(&v, (&l, &h))| {
                    v >= l - tol * (1.0 + l.abs()) && v <= h + tol * (1.0 + h.abs())
                })
    }

    /// True when `self` encloses `other` entry-wise.
    pub fn encloses(&self, other: &MatrixBounds) -> bool {
        self.shape() == other.shape()
            && self
                .lo
                .as_slice()
                .iter()
                .zip(other.lo.as_slice())
                .all(|(a, b)| a <= b)
            && self
                .hi
                .as_slice()
                .iter()
                .zip(other.hi.as_slice())
                .all(|(a, b)| a >= b)
    }

    pub fn add(&self, other: &MatrixBounds) -> Result<MatrixBounds> {
        if self.shape() != other.shape() {
            return dim_err("adding bounds of different shapes");
        }
        Ok(Self {
            lo: &self.lo + &other.lo,
            hi: &self.hi + &other.hi,
        })
    }

    /// One CSV line per entry: `i,j,lo,hi`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("i,j,lo,hi\n");
        for i in 0..self.rows() {
            for j in 0..self.cols() {
                s.push_str(&format!(
                    "{},{},{:?},{:?}\n",
                    i,
                    j,
                    self.lo[(i, j)],
                    self.hi[(i, j)]
                ));
            }
        }
        s
    }
}

/// Bounds on `W·Q` for every `Q` within `q`.
pub fn left_mul_bounds(q: &MatrixBounds, w: &Mat) -> Result<MatrixBounds> {
    if w.cols() != q.rows() {
        return dim_err(format!(
            "left factor is {}x{} but bounds have {} rows",
            w.rows(),
            w.cols(),
            q.rows()
        ));
    }
    let (rows, cols) = (w.rows(), q.cols());
    let mut lo = Mat::zeros(rows, cols);
    let mut hi = Mat::zeros(rows, cols);
    for i in 0..rows {
        for k in 0..w.cols() {
            let wik = w[(i, k)];
            let (a, b) = if wik >= 0.0 {
                (&q.lo, &q.hi)
            } else {
                (&q.hi, &q.lo)
            };
            for j in 0..cols {
                lo[(i, j)] += wik * a[(k, j)];
                hi[(i, j)] += wik * b[(k, j)];
            }
        }
    }
    Ok(MatrixBounds { lo, hi })
}

/// Reverse pass of [`left_mul_bounds`]: returns cotangents on `q` and on `w`.
pub fn left_mul_bounds_backward(
    q: &MatrixBounds,
    w: &Mat,
    d_out: &MatrixBounds,
) -> (MatrixBounds, Mat) {
    let mut dq = MatrixBounds::zeros(q.rows(), q.cols());
    let mut dw = Mat::zeros(w.rows(), w.cols());
    for i in 0..w.rows() {
        for k in 0..w.cols() {
            let wik = w[(i, k)];
            let pos = wik >= 0.0;
            let mut acc = 0.0;
            for j in 0..q.cols() {
                let (dl, dh) = (d_out.lo[(i, j)], d_out.hi[(i, j)]);
                if pos {
                    acc += dl * q.lo[(k, j)] + dh * q.hi[(k, j)];
                    dq.lo[(k, j)] += dl * wik;
                    dq.hi[(k, j)] += dh * wik;
                } else {
                    acc += dl * q.hi[(k, j)] + dh * q.lo[(k, j)];
                    dq.hi[(k, j)] += dl * wik;
                    dq.lo[(k, j)] += dh * wik;
                }
            }
            dw[(i, k)] = acc;
        }
    }
    (dq, dw)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum SignCase {
    NonNegative,
    Straddle,
    NonPositive,
}

fn sign_case(lo: f64, hi: f64) -> SignCase {
    if lo >= 0.0 {
        SignCase::NonNegative
    } else if hi >= 0.0 {
        SignCase::Straddle
    } else {
        SignCase::NonPositive
    }
}

fn check_slopes(a: f64, b: f64) -> Result<()> {
    if !(a > 0.0) || !(b >= a) || !b.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "slope bounds need 0 < a <= b, got a = {a}, b = {b}"
        )));
    }
    Ok(())
}

/// Bounds on `J·P` where `J` is diagonal with entries in `[a, b]`, `0 < a ≤ b`.
pub fn slope_scale_bounds(p: &MatrixBounds, a: f64, b: f64) -> Result<MatrixBounds> {
    check_slopes(a, b)?;
    let mut out = p.clone();
    for (lo, hi) in out
        .lo
        .as_mut_slice()
        .iter_mut()
        .zip(out.hi.as_mut_slice().iter_mut())
    {
        let (l, h) = match sign_case(*lo, *hi) {
            SignCase::NonNegative => (a * *lo, b * *hi),
            SignCase::Straddle => (b * *lo, b * *hi),
            SignCase::NonPositive => (b * *lo, a * *hi),
        };
        *lo = l;
        *hi = h;
    }
    Ok(out)
}

pub fn slope_scale_bounds_backward(
    p: &MatrixBounds,
    a: f64,
    b: f64,
    d_out: &MatrixBounds,
) -> MatrixBounds {
    let mut dp = MatrixBounds::zeros(p.rows(), p.cols());
    let n = p.lo.as_slice().len();
    for idx in 0..n {
        let (lo, hi) = (p.lo.as_slice()[idx], p.hi.as_slice()[idx]);
        let (sl, sh) = match sign_case(lo, hi) {
            SignCase::NonNegative => (a, b),
            SignCase::Straddle => (b, b),
            SignCase::NonPositive => (b, a),
        };
        dp.lo.as_mut_slice()[idx] = sl * d_out.lo.as_slice()[idx];
        dp.hi.as_mut_slice()[idx] = sh * d_out.hi.as_slice()[idx];
    }
    dp
}

/// Which factor-corner realises a scalar interval-product bound.
#[derive(Clone, Copy, Debug)]
enum Corner {
    LoLo,
    LoHi,
    HiLo,
    HiHi,
}

impl Corner {
    fn pick(self, wl: f64, wh: f64, pl: f64, ph: f64) -> (f64, f64) {
        match self {
            Corner::LoLo => (wl, pl),
            Corner::LoHi => (wl, ph),
            Corner::HiLo => (wh, pl),
            Corner::HiHi => (wh, ph),
        }
    }
}

/// Scalar interval product `[wl, wh]·[pl, ph]`, with the corner attaining
/// each end.
fn scalar_product(wl: f64, wh: f64, pl: f64, ph: f64) -> ((f64, Corner), (f64, Corner)) {
    if wl >= 0.0 && pl >= 0.0 {
        ((wl * pl, Corner::LoLo), (wh * ph, Corner::HiHi))
    } else if wh <= 0.0 && ph <= 0.0 {
        ((wh * ph, Corner::HiHi), (wl * pl, Corner::LoLo))
    } else {
        // mixed signs: all four corners
        let first_min = [Corner::LoHi, Corner::HiLo, Corner::LoLo, Corner::HiHi];
        let first_max = [Corner::HiHi, Corner::LoLo, Corner::LoHi, Corner::HiLo];
        let eval = |c: Corner| {
            let (x, y) = c.pick(wl, wh, pl, ph);
            x * y
        };
        let lo = first_min
            .iter()
            .map(|&c| (eval(c), c))
            .fold(None, |acc: Option<(f64, Corner)>, x| match acc {
                Some(a) if a.0 <= x.0 => Some(a),
                _ => Some(x),
            })
            .expect("four corners");
        let hi = first_max
            .iter()
            .map(|&c| (eval(c), c))
            .fold(None, |acc: Option<(f64, Corner)>, x| match acc {
                Some(a) if a.0 >= x.0 => Some(a),
                _ => Some(x),
            })
            .expect("four corners");
        (lo, hi)
    }
}

/// Bounds on `W·P` when both factors are only known through bounds.
pub fn interval_product_bounds(w: &MatrixBounds, p: &MatrixBounds) -> Result<MatrixBounds> {
    if w.cols() != p.rows() {
        return dim_err(format!(
            "cannot multiply {:?} bounds by {:?} bounds",
            w.shape(),
            p.shape()
        ));
    }
    let (rows, cols) = (w.rows(), p.cols());
    let mut lo = Mat::zeros(rows, cols);
    let mut hi = Mat::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let (mut sl, mut sh) = (0.0, 0.0);
            for k in 0..w.cols() {
                let ((l, _), (h, _)) = scalar_product(
                    w.lo[(i, k)],
                    w.hi[(i, k)],
                    p.lo[(k, j)],
                    p.hi[(k, j)],
                );
                sl += l;
                sh += h;
            }
            lo[(i, j)] = sl;
            hi[(i, j)] = sh;
        }
    }
    Ok(MatrixBounds { lo, hi })
}

/// Reverse pass of [`interval_product_bounds`]: cotangents on `w` and `p`.
pub fn interval_product_bounds_backward(
    w: &MatrixBounds,
    p: &MatrixBounds,
    d_out: &MatrixBounds,
) -> (MatrixBounds, MatrixBounds) {
    let mut dw = MatrixBounds::zeros(w.rows(), w.cols());
    let mut dp = MatrixBounds::zeros(p.rows(), p.cols());
    for i in 0..w.rows() {
        for j in 0..p.cols() {
            let (dl, dh) = (d_out.lo[(i, j)], d_out.hi[(i, j)]);
            for k in 0..w.cols() {
                let (wl, wh, pl, ph) = (w.lo[(i, k)], w.hi[(i, k)], p.lo[(k, j)], p.hi[(k, j)]);
                let ((_, cl), (_, ch)) = scalar_product(wl, wh, pl, ph);
                for (corner, d) in [(cl, dl), (ch, dh)] {
                    if d == 0.0 {
                        continue;
                    }
                    let (x, y) = corner.pick(wl, wh, pl, ph);
                    let (w_slot, p_slot) = match corner {
                        Corner::LoLo => (&mut dw.lo, &mut dp.lo),
                        Corner::LoHi => (&mut dw.lo, &mut dp.hi),
                        Corner::HiLo => (&mut dw.hi, &mut dp.lo),
                        Corner::HiHi => (&mut dw.hi, &mut dp.hi),
                    };
                    w_slot[(i, k)] += d * y;
                    p_slot[(k, j)] += d * x;
                }
            }
        }
    }
    (dw, dp)
}

/// Bounds on the controller input Jacobian valid for every state.
///
/// Starts from `[I, I]`, alternates [`left_mul_bounds`] with each hidden
/// weight and [`slope_scale_bounds`] with the activation slope range, then
/// applies the output weight `W_o` so the result covers the full product.
pub fn jacobian_bounds(p: &MlpParams) -> MatrixBounds {
    jacobian_bounds_trace(p).pop().expect("non-empty trace")
}

/// Every intermediate of [`jacobian_bounds`]: for each layer the bounds
/// before the weight product and after it, then the final result.
fn jacobian_bounds_trace(p: &MlpParams) -> Vec<MatrixBounds> {
    let (a, b) = (p.slope_lo(), p.slope_hi());
    let mut trace = Vec::with_capacity(2 * p.depth() + 2);
    let mut cur = MatrixBounds::point(Mat::identity(p.input_dim()));
    for l in &p.layers {
        trace.push(cur.clone());
        let pre = left_mul_bounds(&cur, &l.w).expect("validated shapes");
        cur = slope_scale_bounds(&pre, a, b).expect("validated slopes");
        trace.push(pre);
    }
    trace.push(cur.clone());
    trace.push(left_mul_bounds(&cur, &p.wo).expect("validated shapes"));
    trace
}

/// Reverse pass of [`jacobian_bounds`] with respect to the weights. Biases
/// receive zero: the bounds hold uniformly in the state and do not depend
/// on them.
pub fn jacobian_bounds_backward(p: &MlpParams, d_out: &MatrixBounds) -> MlpGrads {
    let (a, b) = (p.slope_lo(), p.slope_hi());
    let trace = jacobian_bounds_trace(p);
    let mut grads = MlpGrads::zeros_like(p);
    let last_in = &trace[2 * p.depth()];
    let (mut d_cur, dwo) = left_mul_bounds_backward(last_in, &p.wo, d_out);
    grads.wo = dwo;
    for (k, l) in p.layers.iter().enumerate().rev() {
        let input = &trace[2 * k];
        let pre = &trace[2 * k + 1];
        let d_pre = slope_scale_bounds_backward(pre, a, b, &d_cur);
        let (d_in, dw) = left_mul_bounds_backward(input, &l.w, &d_pre);
        grads.layers[k] = Layer {
            w: dw,
            b: vec![0.0; l.b.len()],
        };
        d_cur = d_in;
    }
    grads
}

/// Bounds on `M g ∂u/∂x + Ṁ` given bounds on the metric and its time
/// derivative. The Jacobian bounds are multiplied by `g` first, then by the
/// metric bounds.
pub fn contraction_lhs_bounds(
    m_bounds: &MatrixBounds,
    g: &Mat,
    p: &MlpParams,
    mdot_bounds: &MatrixBounds,
) -> Result<MatrixBounds> {
    let n = g.rows();
    if m_bounds.shape() != (n, n) || mdot_bounds.shape() != (n, n) {
        return dim_err("metric bounds must be n×n");
    }
    if g.cols() != p.output_dim() || p.input_dim() != n {
        return dim_err("input matrix and controller dimensions disagree");
    }
    let jac = jacobian_bounds(p);
    let int = left_mul_bounds(&jac, g)?;
    let theta = interval_product_bounds(m_bounds, &int)?;
    theta.add(mdot_bounds)
}

/// Reverse pass of [`contraction_lhs_bounds`] with respect to the controller
/// weights (metric bounds are treated as constants).
pub fn contraction_lhs_bounds_backward(
    m_bounds: &MatrixBounds,
    g: &Mat,
    p: &MlpParams,
    d_out: &MatrixBounds,
) -> MlpGrads {
    let jac = jacobian_bounds(p);
    let int = left_mul_bounds(&jac, g).expect("validated shapes");
    let (_, d_int) = interval_product_bounds_backward(m_bounds, &int, d_out);
    let (d_jac, _) = left_mul_bounds_backward(&jac, g, &d_int);
    jacobian_bounds_backward(p, &d_jac)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(lo: f64, hi: f64) -> MatrixBounds {
        MatrixBounds::new(Mat::from_rows(&[[lo]]), Mat::from_rows(&[[hi]])).unwrap()
    }

    #[test]
    fn left_mul_examples() {
        let q = MatrixBounds::new(
            Mat::from_rows(&[[-1.0, 0.5], [2.0, -3.0]]),
            Mat::from_rows(&[[1.0, 0.5], [4.0, 3.0]]),
        )
        .unwrap();
        assert_eq!(left_mul_bounds(&q, &Mat::identity(2)).unwrap(), q);
        assert_eq!(
            left_mul_bounds(&scalar(-1.0, 3.0), &Mat::from_rows(&[[2.0]])).unwrap(),
            scalar(-2.0, 6.0)
        );
        assert_eq!(
            left_mul_bounds(&scalar(-1.0, 3.0), &Mat::from_rows(&[[-1.0]])).unwrap(),
            scalar(-3.0, 1.0)
        );
        assert!(left_mul_bounds(&q, &Mat::identity(3)).is_err());
    }

    #[test]
    fn slope_scale_cases() {
        let f = |l, h| slope_scale_bounds(&scalar(l, h), 0.3, 1.0).unwrap();
        assert_eq!(f(2.0, 4.0), scalar(0.6, 4.0));
        assert_eq!(f(-4.0, -2.0), scalar(-4.0, -0.6));
        assert_eq!(f(-2.0, 4.0), scalar(-2.0, 4.0));
        assert!(slope_scale_bounds(&scalar(0.0, 1.0), 0.0, 1.0).is_err());
        assert!(slope_scale_bounds(&scalar(0.0, 1.0), 0.5, 0.4).is_err());
    }

    #[test]
    fn interval_product_examples() {
        let r = interval_product_bounds(&scalar(-1.0, 2.0), &scalar(-3.0, 1.0)).unwrap();
        assert_eq!(r, scalar(-6.0, 3.0));

        let w = Mat::from_rows(&[[1.0, -2.0], [0.5, 3.0]]);
        let p = Mat::from_rows(&[[2.0, 1.0], [-1.0, 4.0]]);
        let r = interval_product_bounds(&MatrixBounds::point(w.clone()), &MatrixBounds::point(p.clone()))
            .unwrap();
        assert_eq!(r, MatrixBounds::point(&w * &p));

        let pb = MatrixBounds::new(p.scale(0.5), p.map(|v| v + 1.0)).unwrap();
        let r = interval_product_bounds(&MatrixBounds::point(Mat::identity(2)), &pb).unwrap();
        assert_eq!(r, pb);
    }

    #[test]
    fn jacobian_bounds_identity_net() {
        let p = MlpParams {
            alpha: 0.3,
            layers: vec![Layer {
                w: Mat::identity(2),
                b: vec![0.0; 2],
            }],
            wo: Mat::identity(2),
        };
        let jb = jacobian_bounds(&p);
        assert_eq!(jb.lo, Mat::from_rows(&[[0.3, 0.0], [0.0, 0.3]]));
        assert_eq!(jb.hi, Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));

        let z = MlpParams::zeros(&[1, 4, 1], 0.3).unwrap();
        assert_eq!(jacobian_bounds(&z), MatrixBounds::zeros(1, 1));
    }

    #[test]
    fn zero_controller_contributes_nothing() {
        let p = MlpParams::zeros(&[2, 8, 1], 0.3).unwrap();
        let g = Mat::column(&[0.0, 1.0]);
        let m = MatrixBounds::point(Mat::identity(2));
        let b = contraction_lhs_bounds(&m, &g, &p, &MatrixBounds::zeros(2, 2)).unwrap();
        assert_eq!(b, MatrixBounds::zeros(2, 2));
    }

    #[test]
    fn identity_metric_places_jacobian_in_actuated_row() {
        let p = MlpParams::random(&[2, 3, 1], 0.3, 4).unwrap();
        let g = Mat::column(&[0.0, 1.0]);
        let m = MatrixBounds::point(Mat::identity(2));
        let b = contraction_lhs_bounds(&m, &g, &p, &MatrixBounds::zeros(2, 2)).unwrap();
        let want = left_mul_bounds(&jacobian_bounds(&p), &g).unwrap();
        assert_eq!(b, want);
        assert_eq!(b.lo.row(0), &[0.0, 0.0]);
        assert_eq!(b.hi.row(1), jacobian_bounds(&p).hi.row(0));
    }

    #[test]
    fn new_rejects_inverted_bounds() {
        assert!(MatrixBounds::new(Mat::from_rows(&[[1.0]]), Mat::from_rows(&[[0.0]])).is_err());
        assert!(MatrixBounds::new(Mat::zeros(1, 2), Mat::zeros(2, 1)).is_err());
    }
}
