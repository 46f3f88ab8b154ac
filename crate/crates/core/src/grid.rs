//! Tensor-product state grids.

use crate::error::{Error, Result};
use crate::linalg::Vector;

/// Evenly spaced points in `[lo_i, hi_i]` along each axis, endpoints included.
#[derive(Clone, Debug, PartialEq)]
pub struct StateGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub counts: Vec<usize>,
}

impl StateGrid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() != counts.len() || lo.is_empty() {
            return Err(Error::Dimension("grid bounds and counts differ in length".into()));
        }
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::InvalidArgument("grid needs at least one point per axis".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::InvalidArgument("grid bounds must be finite with lo ≤ hi".into()));
        }
        Ok(Self { lo, hi, counts })
    }

    /// `n` points per axis over `[-half_width, half_width]^dim`.
    pub fn square(dim: usize, half_width: f64, n: usize) -> Result<Self> {
        Self::new(vec![-half_width; dim], vec![half_width; dim], vec![n; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest axis width.
    pub fn extent(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| h - l)
            .fold(0.0, f64::max)
    }

    fn coord(&self, axis: usize, k: usize) -> f64 {
        let n = self.counts[axis];
        if n == 1 {
            0.5 * (self.lo[axis] + self.hi[axis])
        } else {
            let t = k as f64 / (n - 1) as f64;
            self.lo[axis] + t * (self.hi[axis] - self.lo[axis])
        }
    }

    /// Point `index`, with the last axis varying fastest.
    pub fn point(&self, index: usize) -> Vector {
        let d = self.dim();
        let mut x = Vector::zeros(d);
        let mut rest = index;
        for axis in (0..d).rev() {
            let k = rest % self.counts[axis];
            rest /= self.counts[axis];
            x[axis] = self.coord(axis, k);
        }
        x
    }

    pub fn points(&self) -> impl Iterator<Item = Vector> + '_ {
        (0..self.len()).map(|i| self.point(i))
    }
}

/// `n` log-spaced values from `start` to `stop` inclusive.
pub fn logspace(start: f64, stop: f64, n: usize) -> Result<Vec<f64>> {
    if !(start > 0.0 && stop > 0.0) || n == 0 {
        return Err(Error::InvalidArgument("logspace needs positive endpoints and n ≥ 1".into()));
    }
    if n == 1 {
        return Ok(vec![start]);
    }
    let (a, b) = (start.log10(), stop.log10());
    Ok((0..n)
        .map(|i| {
            if i == n - 1 {
                stop
            } else {
                10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)
            }
        })
        .collect())
}
