//! Small dense linear algebra.
//!
//! Everything here targets matrices of dimension ten or less: controller
//! Jacobians, metric values, and the Riccati solve for the LQR baseline.
//! Storage is row-major `f64`.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{dim_err, Error, Result};

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return dim_err(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row slices. Panics on ragged input; use
    /// [`Mat::try_from_rows`] for untrusted data.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        Self::try_from_rows(rows).expect("ragged rows")
    }

    pub fn try_from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.as_ref().len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            let row = row.as_ref();
            if row.len() != c {
                return dim_err("ragged rows");
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: r,
            cols: c,
            data,
        })
    }

    pub fn column(v: &[f64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Mat) -> Result<Mat> {
        if self.cols != rhs.rows {
            return dim_err(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            ));
        }
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..rhs.cols {
                    out[(i, j)] += a * rhs[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return dim_err(format!(
                "cannot apply {}x{} matrix to vector of length {}",
                self.rows,
                self.cols,
                v.len()
            ));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `Mᵀ v`.
    pub fn tmatvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.rows != v.len() {
            return dim_err("transpose-vector length mismatch");
        }
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (j, o) in out.iter_mut().enumerate() {
                *o += self[(i, j)] * v[i];
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `A + Aᵀ`.
    pub fn sym(&self) -> Mat {
        debug_assert!(self.is_square());
        let mut s = self.clone();
        for i in 0..self.rows {
            for j in 0..self.cols {
                s[(i, j)] = self[(i, j)] + self[(j, i)];
            }
        }
        s
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Spectral norm, from the largest eigenvalue of `AᵀA`.
    pub fn norm2(&self) -> f64 {
        let ata = self.transpose().matmul(self).expect("AᵀA is square");
        sym_eig(&ata)
            .map(|e| e.max.max(0.0).sqrt())
            .unwrap_or(f64::NAN)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Mat) -> bool {
        self.shape() == other.shape()
    }

    fn zip_with(&self, rhs: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert!(
            self.same_shape(rhs),
            "shape mismatch {:?} vs {:?}",
            self.shape(),
            rhs.shape()
        );
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Solves `A X = B` by Gaussian elimination with partial pivoting.
    pub fn solve(&self, rhs: &Mat) -> Result<Mat> {
        if !self.is_square() || rhs.rows != self.rows {
            return dim_err("solve requires square A and matching B");
        }
        let n = self.rows;
        let mut a = self.clone();
        let mut b = rhs.clone();
        let scale = a.max_abs().max(f64::MIN_POSITIVE);
        for col in 0..n {
            let (piv, pmax) = (col..n)
                .map(|r| (r, a[(r, col)].abs()))
                .fold((col, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if pmax <= 1e-14 * scale {
                return Err(Error::Singular);
            }
            if piv != col {
                for j in 0..n {
                    a.data.swap(col * n + j, piv * n + j);
                }
                for j in 0..b.cols {
                    b.data.swap(col * b.cols + j, piv * b.cols + j);
                }
            }
            let d = a[(col, col)];
            for r in col + 1..n {
                let factor = a[(r, col)] / d;
                if factor == 0.0 {
                    continue;
                }
                for j in col..n {
                    a[(r, j)] -= factor * a[(col, j)];
                }
                for j in 0..b.cols {
                    b[(r, j)] -= factor * b[(col, j)];
                }
            }
        }
        let mut x = Mat::zeros(n, b.cols);
        for j in 0..b.cols {
            for i in (0..n).rev() {
                let mut s = b[(i, j)];
                for k in i + 1..n {
                    s -= a[(i, k)] * x[(k, j)];
                }
                x[(i, j)] = s / a[(i, i)];
            }
        }
        Ok(x)
    }

    pub fn inverse(&self) -> Result<Mat> {
        self.solve(&Mat::identity(self.rows))
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl Add for &Mat {
    type Output = Mat;
    fn add(self, rhs: &Mat) -> Mat {
        self.zip_with(rhs, |a, b| a + b)
    }
}

impl Sub for &Mat {
    type Output = Mat;
    fn sub(self, rhs: &Mat) -> Mat {
        self.zip_with(rhs, |a, b| a - b)
    }
}

impl Mul for &Mat {
    type Output = Mat;
    fn mul(self, rhs: &Mat) -> Mat {
        self.matmul(rhs).expect("matrix product shape mismatch")
    }
}

impl Neg for &Mat {
    type Output = Mat;
    fn neg(self) -> Mat {
        self.scale(-1.0)
    }
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat{}x{} ", self.rows, self.cols)?;
        f.debug_list().entries(self.to_rows()).finish()
    }
}

impl Serialize for Mat {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Mat::try_from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Full spectrum of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigResult {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub max: f64,
}

/// Cyclic Jacobi eigenvalue iteration on `(A + Aᵀ)/2`.
pub fn sym_eig(a: &Mat) -> Result<SymEigResult> {
    if !a.is_square() {
        return dim_err(format!("eigenvalues of a {}x{} matrix", a.rows, a.cols));
    }
    let n = a.rows;
    let mut m = a.sym().scale(0.5);
    if n == 0 {
        return Ok(SymEigResult {
            eigenvalues: vec![],
            max: f64::NEG_INFINITY,
        });
    }
    let off = |m: &Mat| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[(i, j)] * m[(i, j)];
                }
            }
        }
        s.sqrt()
    };
    let scale = m.frobenius().max(1.0);
    for _sweep in 0..100 {
        if off(&m) < 1e-12 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eigenvalues: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    eigenvalues.sort_by(|a, b| a.total_cmp(b));
    let max = *eigenvalues.last().expect("n > 0");
    Ok(SymEigResult { eigenvalues, max })
}

/// Largest eigenvalue of a symmetric matrix.
pub fn sym_eig_max(a: &Mat) -> Result<f64> {
    Ok(sym_eig(a)?.max)
}

/// Orthonormal basis of the left kernel of `g`, i.e. vectors `v` with `vᵀg = 0`.
///
/// Columns of `g` are orthonormalized first; rank decisions use pivot norms
/// against `1e-9 * max|g|`. The basis is then completed greedily from the
/// standard basis vectors with the largest residual.
pub fn null_space_basis(g: &Mat) -> Vec<Vec<f64>> {
    let n = g.rows;
    let tol = 1e-9 * g.max_abs().max(f64::MIN_POSITIVE);
    let mut basis: Vec<Vec<f64>> = Vec::new();

    let project_out = |v: &mut Vec<f64>, basis: &[Vec<f64>]| {
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for b in basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= d * y;
                }
            }
        }
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();

    for j in 0..g.cols {
        let mut c: Vec<f64> = (0..n).map(|i| g[(i, j)]).collect();
        project_out(&mut c, &basis);
        let nc = norm(&c);
        if nc > tol {
            c.iter_mut().for_each(|x| *x /= nc);
            basis.push(c);
        }
    }
    let rank = basis.len();

    let mut kernel = Vec::with_capacity(n - rank);
    while basis.len() < n {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for k in 0..n {
            let mut e = vec![0.0; n];
            e[k] = 1.0;
            project_out(&mut e, &basis);
            let ne = norm(&e);
            if best.as_ref().is_none_or(|(b, _)| ne > *b) {
                best = Some((ne, e));
            }
        }
        let (ne, mut e) = best.expect("n > 0");
        e.iter_mut().for_each(|x| *x /= ne);
        basis.push(e.clone());
        kernel.push(e);
    }
    kernel
}

/// Solves the Lyapunov equation `AᵀP + PA = −Q` by Kronecker vectorization,
/// `(I ⊗ Aᵀ + Aᵀ ⊗ I) vec(P) = −vec(Q)`.
pub fn solve_lyapunov(a: &Mat, q: &Mat) -> Result<Mat> {
    if !a.is_square() || !q.is_square() || a.rows != q.rows {
        return dim_err("Lyapunov equation needs square A and Q of equal size");
    }
    let n = a.rows;
    let nn = n * n;
    let mut k = Mat::zeros(nn, nn);
    // vec is row-major: index(i, j) = i*n + j.
    // (AᵀP)_{ij} = Σ_k A_{ki} P_{kj};  (PA)_{ij} = Σ_k P_{ik} A_{kj}
    for i in 0..n {
        for j in 0..n {
            let row = i * n + j;
            for l in 0..n {
                k[(row, l * n + j)] += a[(l, i)];
                k[(row, i * n + l)] += a[(l, j)];
            }
        }
    }
    let rhs = Mat::from_vec(nn, 1, q.as_slice().iter().map(|v| -v).collect())?;
    let p = k.solve(&rhs)?;
    let p = Mat::from_vec(n, n, p.data)?;
    Ok(p.sym().scale(0.5))
}

/// Residual `AᵀP + PA − PBR⁻¹BᵀP + Q` of the continuous algebraic Riccati equation.
pub fn care_residual(a: &Mat, b: &Mat, q: &Mat, r: &Mat, p: &Mat) -> Result<Mat> {
    let rinv = r.inverse()?;
    let bt = b.transpose();
    let at = a.transpose();
    let pb = p.matmul(b)?;
    let quad = pb.matmul(&rinv)?.matmul(&bt)?.matmul(p)?;
    Ok(&(&(&at.matmul(p)? + &p.matmul(a)?) - &quad) + q)
}

const CARE_MAX_ITERS: usize = 200;

/// True when `A` is Hurwitz, decided by positive definiteness of the
/// solution of `AᵀX + XA = −I`.
pub fn is_hurwitz(a: &Mat) -> bool {
    match solve_lyapunov(a, &Mat::identity(a.rows)) {
        Ok(x) => x.is_finite() && sym_eig(&x).is_ok_and(|e| e.eigenvalues[0] > 0.0),
        Err(_) => false,
    }
}

/// Kleinman–Newton iteration from a stabilizing gain `k`.
fn kleinman(a: &Mat, b: &Mat, q: &Mat, r: &Mat, mut k: Mat) -> Result<Mat> {
    let rinv_bt = r.inverse()?.matmul(&b.transpose())?;
    let mut p_prev: Option<Mat> = None;
    for _ in 0..CARE_MAX_ITERS {
        let acl = a - &b.matmul(&k)?;
        let rhs = q + &k.transpose().matmul(r)?.matmul(&k)?;
        let p = solve_lyapunov(&acl, &rhs)
            .map_err(|_| Error::NotStabilizable("closed-loop Lyapunov solve failed".into()))?;
        if !p.is_finite() {
            return Err(Error::NotStabilizable("iterate diverged".into()));
        }
        k = rinv_bt.matmul(&p)?;
        if let Some(prev) = &p_prev {
            if (&p - prev).max_abs() <= 1e-14 * p.max_abs().max(1.0) {
                return Ok(p);
            }
        }
        p_prev = Some(p);
    }
    let p = p_prev.expect("at least one iteration");
    let res = care_residual(a, b, q, r, &p)?.max_abs();
    if res < 1e-10 * p.max_abs().max(1.0) {
        Ok(p)
    } else {
        Err(Error::NotStabilizable(format!(
            "no convergence in {CARE_MAX_ITERS} steps (residual {res:.3e})"
        )))
    }
}

/// Stabilizing solution of `AᵀP + PA − PBR⁻¹BᵀP + Q = 0`.
///
/// Kleinman–Newton iteration needs a stabilizing initial gain. It is obtained
/// by eigenvalue shifting: `A − βI` with `β > ‖A‖_F` is Hurwitz, so `K = 0`
/// stabilizes it; the shift is then walked down to zero, each step reusing
/// the previous gain, which stays stabilizing as long as the step is smaller
/// than the closed-loop stability margin.
pub fn solve_care(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Result<Mat> {
    let n = a.rows;
    if !a.is_square() || b.rows != n || !q.is_square() || q.rows != n {
        return dim_err("CARE needs A n×n, B n×m, Q n×n");
    }
    if !r.is_square() || r.rows != b.cols {
        return dim_err("CARE needs R m×m");
    }
    let rinv_bt = r.inverse()?.matmul(&b.transpose())?;
    let eye = Mat::identity(n);

    let mut beta = a.frobenius() + 1.0;
    let mut k = Mat::zeros(b.cols, n);
    let mut step = beta;
    let mut shifts = 0;
    loop {
        let shifted = a - &eye.scale(beta);
        let p = kleinman(&shifted, b, q, r, k.clone())?;
        k = rinv_bt.matmul(&p)?;
        if beta == 0.0 {
            return Ok(p);
        }
        loop {
            let next = (beta - step).max(0.0);
            let acl = &(a - &eye.scale(next)) - &b.matmul(&k)?;
            if is_hurwitz(&acl) {
                beta = next;
                break;
            }
            step *= 0.5;
            if step < 1e-10 {
                return Err(Error::NotStabilizable(format!(
                    "shift continuation stalled at β = {beta:.3e}"
                )));
            }
        }
        shifts += 1;
        if shifts > CARE_MAX_ITERS {
            return Err(Error::NotStabilizable("too many shift steps".into()));
        }
        step = step.max(beta * 0.5).min(beta.max(f64::MIN_POSITIVE));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut impl Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn eig_identity_and_diagonal() {
        assert_eq!(sym_eig_max(&Mat::identity(3)).unwrap(), 1.0);
        let d = sym_eig(&Mat::from_diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(d.eigenvalues, vec![1.0, 2.0, 3.0]);
        assert_eq!(d.max, 3.0);
    }

    #[test]
    fn eig_two_by_two_matches_quadratic_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let (a, b, c) = (
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            );
            let m = Mat::from_rows(&[[a, b], [b, c]]);
            let disc = ((a - c) * (a - c) / 4.0 + b * b).sqrt();
            let top = (a + c) / 2.0 + disc;
            assert!((sym_eig_max(&m).unwrap() - top).abs() < 1e-10);
        }
    }

    #[test]
    fn eig_rejects_non_square() {
        assert!(matches!(
            sym_eig_max(&Mat::zeros(2, 3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn eig_spectral_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.gen_range(1..6);
            let a = rand_mat(&mut rng, n, n).sym();
            let t = rng.gen_range(-10.0..10.0);
            let shifted = &a + &Mat::identity(n).scale(t);
            let d = sym_eig_max(&a).unwrap() - sym_eig_max(&shifted).unwrap() + t;
            assert!(d.abs() < 1e-10, "{d}");
        }
    }

    #[test]
    fn null_space_examples() {
        let g = Mat::column(&[0.0, 0.0, 1.0]);
        assert_eq!(
            null_space_basis(&g),
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]
        );
        let g = Mat::column(&[1.0, 0.0]);
        assert_eq!(null_space_basis(&g), vec![vec![0.0, 1.0]]);
        assert!(null_space_basis(&Mat::identity(3)).is_empty());
    }

    #[test]
    fn null_space_random_orthonormal_annihilators() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let n = rng.gen_range(1..6);
            let m = rng.gen_range(0..=n);
            let g = rand_mat(&mut rng, n, m);
            let v = null_space_basis(&g);
            assert_eq!(v.len(), n - m);
            for (a, va) in v.iter().enumerate() {
                for j in 0..m {
                    let d: f64 = (0..n).map(|i| va[i] * g[(i, j)]).sum();
                    assert!(d.abs() < 1e-10);
                }
                for (b, vb) in v.iter().enumerate() {
                    let d: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((d - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn null_space_rank_deficient() {
        // two parallel columns
        let g = Mat::from_rows(&[[1.0, 2.0], [1.0, 2.0], [0.0, 0.0]]);
        assert_eq!(null_space_basis(&g).len(), 2);
    }

    #[test]
    fn care_scalar_cases() {
        let one = Mat::identity(1);
        let p = solve_care(&Mat::zeros(1, 1), &one, &one, &one).unwrap();
        assert!((p[(0, 0)] - 1.0).abs() < 1e-12);
        let p = solve_care(&one.scale(-1.0), &one, &one, &one).unwrap();
        assert!((p[(0, 0)] - (2f64.sqrt() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn care_andrieu_linearization() {
        let a = Mat::from_rows(&[[-1.0, 0.0, 1.0], [0.0, -1.0, 1.0], [0.0, -1.0, 0.0]]);
        let b = Mat::column(&[0.0, 0.0, 1.0]);
        let p = solve_care(&a, &b, &Mat::identity(3), &Mat::identity(1)).unwrap();
        let res = care_residual(&a, &b, &Mat::identity(3), &Mat::identity(1), &p).unwrap();
        assert!(res.max_abs() < 1e-8);
    }

    #[test]
    fn care_random_stabilizable() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(1..5);
            let m = rng.gen_range(1..=n);
            let a = rand_mat(&mut rng, n, n).scale(2.0);
            let b = rand_mat(&mut rng, n, m);
            let p = match solve_care(&a, &b, &Mat::identity(n), &Mat::identity(m)) {
                Ok(p) => p,
                // a random pair can be ill-conditioned for controllability
                Err(Error::NotStabilizable(_)) => continue,
                Err(e) => panic!("{e}"),
            };
            assert!((&p - &p.transpose()).max_abs() < 1e-12);
            assert!(sym_eig(&p).unwrap().eigenvalues[0] > 0.0);
            let res = care_residual(&a, &b, &Mat::identity(n), &Mat::identity(m), &p).unwrap();
            assert!(res.max_abs() < 1e-8 * p.max_abs().max(1.0), "{}", res.max_abs());
        }
    }

    #[test]
    fn care_uncontrollable_unstable_fails() {
        let a = Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let b = Mat::column(&[1.0, 0.0]);
        assert!(solve_care(&a, &b, &Mat::identity(2), &Mat::identity(1)).is_err());
    }

    #[test]
    fn solve_and_inverse() {
        let a = Mat::from_rows(&[[4.0, 1.0], [2.0, 3.0]]);
        let inv = a.inverse().unwrap();
        assert!((&a.matmul(&inv).unwrap() - &Mat::identity(2)).max_abs() < 1e-14);
        assert!(matches!(
            Mat::zeros(2, 2).inverse(),
            Err(Error::Singular)
        ));
    }
}
