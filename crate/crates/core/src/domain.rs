//! Axis-aligned state boxes and the uniform grids laid over them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        let d = Self { lo, hi };
        d.validate()?;
        Ok(d)
    }

    /// `[-r, r]^n` around `center`.
    pub fn around(center: &[f64], r: f64) -> Result<Self> {
        Self::new(
            center.iter().map(|c| c - r).collect(),
            center.iter().map(|c| c + r).collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo.len() != self.hi.len() || self.lo.is_empty() {
            return dim_err("box bounds must be non-empty and of equal length");
        }
        for (l, h) in self.lo.iter().zip(&self.hi) {
            if !l.is_finite() || !h.is_finite() {
                return Err(Error::InvalidArgument("box extents must be finite".into()));
            }
            if !(h > l) {
                return Err(Error::InvalidArgument(format!(
                    "degenerate box side [{l}, {h}]"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| rng.gen_range(l..=h))
            .collect()
    }

    /// `count` seeded uniform samples.
    pub fn samples(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.sample(&mut rng)).collect()
    }

    /// Uniform grid with spacing at most `tau` along every axis; both ends of
    /// each side are grid points.
    pub fn grid(&self, tau: f64) -> Result<Grid> {
        self.validate()?;
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidArgument(format!("grid spacing must be positive, got {tau}")));
        }
        let counts: Vec<usize> = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| ((h - l) / tau).ceil() as usize + 1)
            .collect();
        Ok(Grid::with_counts(self.clone(), counts))
    }
}

/// Tensor-product grid over a [`BoxDomain`].
#[derive(Debug, Clone)]
pub struct Grid {
    pub domain: BoxDomain,
    pub counts: Vec<usize>,
    pub spacing: Vec<f64>,
}

impl Grid {
    pub fn with_counts(domain: BoxDomain, counts: Vec<usize>) -> Self {
        let spacing = domain
            .lo
            .iter()
            .zip(&domain.hi)
            .zip(&counts)
            .map(|((l, h), &c)| (h - l) / (c.max(2) - 1) as f64)
            .collect();
        Self {
            domain,
            counts,
            spacing,
        }
    }

    /// Same box, every cell split in half along each axis. The original grid
    /// points are a subset of the refined ones.
    pub fn refined(&self) -> Self {
        Self::with_counts(
            self.domain.clone(),
            self.counts.iter().map(|c| 2 * c - 1).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid point with flat index `idx` (first axis varies slowest).
    pub fn point(&self, mut idx: usize) -> Vec<f64> {
        let n = self.counts.len();
        let mut x = vec![0.0; n];
        for k in (0..n).rev() {
            let c = self.counts[k];
            let i = idx % c;
            idx /= c;
            x[k] = if i + 1 == c {
                self.domain.hi[k]
            } else {
                self.domain.lo[k] + i as f64 * self.spacing[k]
            };
        }
        x
    }

    pub fn points(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(move |i| self.point(i))
    }

    /// Largest distance from any point of the box to its nearest grid point:
    /// half the cell diagonal.
    pub fn covering_radius(&self) -> f64 {
        0.5 * self.spacing.iter().map(|h| h * h).sum::<f64>().sqrt()
    }
}

fn check_finite(m: &Mat, x: &[f64]) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("non-finite value at {x:?}")))
    }
}

impl Grid {
    /// Largest value of `f` over the grid points. The reduction is a max, so
    /// the result does not depend on how the scan is partitioned.
    pub fn par_max<F>(&self, f: F) -> Result<f64>
    where
        F: Fn(&[f64]) -> Result<f64> + Sync,
    {
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                let x = self.point(i);
                let v = f(&x)?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFinite(format!("non-finite value at {x:?}")))
                }
            })
            .try_reduce(|| f64::NEG_INFINITY, |a, b| Ok(a.max(b)))
    }

    /// Element-wise minimum and maximum of a matrix-valued `f` over the grid.
    pub fn par_extrema<F>(&self, rows: usize, cols: usize, f: F) -> Result<(Mat, Mat)>
    where
        F: Fn(&[f64]) -> Result<Mat> + Sync,
    {
        let init = || {
            (
                Mat::zeros(rows, cols).map(|_| f64::INFINITY),
                Mat::zeros(rows, cols).map(|_| f64::NEG_INFINITY),
            )
        };
        (0..self.len())
            .into_par_iter()
            .try_fold(init, |(mut lo, mut hi), i| {
                let x = self.point(i);
                let m = f(&x)?;
                if m.shape() != (rows, cols) {
                    return dim_err("grid function returned the wrong shape");
                }
                check_finite(&m, &x)?;
                for ((l, h), v) in lo
                    .as_mut_slice()
                    .iter_mut()
                    .zip(hi.as_mut_slice().iter_mut())
                    .zip(m.as_slice())
                {
                    *l = l.min(*v);
                    *h = h.max(*v);
                }
                Ok((lo, hi))
            })
            .try_reduce(init, |(l1, h1), (l2, h2)| {
                let lo = Mat::from_vec(
                    rows,
                    cols,
                    l1.as_slice().iter().zip(l2.as_slice()).map(|(a, b)| a.min(*b)).collect(),
                )?;
                let hi = Mat::from_vec(
                    rows,
                    cols,
                    h1.as_slice().iter().zip(h2.as_slice()).map(|(a, b)| a.max(*b)).collect(),
                )?;
                Ok((lo, hi))
            })
    }
}
