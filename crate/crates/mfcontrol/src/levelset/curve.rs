//! Trained auxiliary-loss curves and value extraction.
//!
//! Internally every problem is a minimization and the curve is indexed by an
//! ascending grid; maximization problems are mirrored (`z -> -z`) before they
//! reach the solver, and `negated` records how to report values back in the
//! original orientation.

use crate::{Error, Result};

/// Auxiliary losses over the candidate grid, with Monte Carlo error bars.
#[derive(Debug, Clone)]
pub struct LevelSetCurve {
    /// Internal (minimization) grid, strictly increasing.
    grid: Vec<f64>,
    /// Mean trained loss per grid point, nonnegative up to MC noise.
    pub w: Vec<f64>,
    /// Standard error of the mean across evaluation replications.
    pub stderr: Vec<f64>,
    /// Level-set threshold used for extraction.
    pub epsilon: f64,
    /// True when the original problem was a maximization (mirrored grid).
    pub negated: bool,
}

/// Result of extrapolating the decreasing affine segment to zero.
#[derive(Debug, Clone, Copy)]
pub struct AffineExtraction {
    /// Zero crossing, reported in the original orientation.
    pub root: f64,
    /// RMS residual of the least-squares fit.
    pub residual: f64,
    /// Fitted slope on the internal grid (negative).
    pub slope: f64,
    /// Points used in the fit.
    pub n_points: usize,
}

impl LevelSetCurve {
    pub fn new(
        grid: Vec<f64>,
        w: Vec<f64>,
        stderr: Vec<f64>,
        epsilon: f64,
        negated: bool,
    ) -> Result<Self> {
        if grid.len() != w.len() || grid.len() != stderr.len() || grid.is_empty() {
            return Err(Error::Config("curve arrays must be non-empty, same length".into()));
        }
        if grid.windows(2).any(|p| !(p[0] < p[1])) {
            return Err(Error::Config("grid must be strictly increasing".into()));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Config("threshold must be positive".into()));
        }
        Ok(Self {
            grid,
            w,
            stderr,
            epsilon,
            negated,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn internal_grid(&self) -> &[f64] {
        &self.grid
    }

    /// Grid in the user's orientation (descending mirrored values re-sorted
    /// ascending for maximization problems), paired with loss and stderr.
    pub fn reported_points(&self) -> Vec<(f64, f64, f64)> {
        let mut pts: Vec<(f64, f64, f64)> = self
            .grid
            .iter()
            .zip(self.w.iter().zip(&self.stderr))
            .map(|(&z, (&w, &se))| (if self.negated { -z } else { z }, w, se))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts
    }

    fn orient(&self, z_internal: f64) -> f64 {
        if self.negated {
            -z_internal
        } else {
            z_internal
        }
    }

    /// First grid point (scanning ascending on the internal grid) whose loss
    /// is at or below `eps`: the zero level-set value. `None` when the whole
    /// grid stays above the threshold.
    pub fn extract_value(&self, eps: f64) -> Option<f64> {
        self.grid
            .iter()
            .zip(&self.w)
            .find(|(_, &w)| w <= eps)
            .map(|(&z, _)| self.orient(z))
    }

    /// `extract_value` at the curve's own threshold.
    pub fn value(&self) -> Option<f64> {
        self.extract_value(self.epsilon)
    }

    /// Fit the decreasing affine segment that precedes the flat region and
    /// return its zero crossing. At most the `max_points` segment points
    /// nearest the flat region enter the fit (the far tail of a heavily
    /// penalized curve need not be affine).
    pub fn extract_value_affine(&self, max_points: usize) -> Result<AffineExtraction> {
        let wmax = self.w.iter().cloned().fold(0.0f64, f64::max);
        let noise = self
            .stderr
            .iter()
            .cloned()
            .fold(0.0f64, f64::max);
        let cutoff = self.epsilon.max(3.0 * noise).max(1e-12 * wmax);
        // Decreasing prefix: points strictly above the flat cutoff.
        let mut k = 0;
        while k < self.len() && self.w[k] > cutoff {
            k += 1;
        }
        if k < 3 {
            return Err(Error::NoDecreasingSegment);
        }
        let lo = k.saturating_sub(max_points.max(3));
        let seg: Vec<(f64, f64)> = (lo..k).map(|i| (self.grid[i], self.w[i])).collect();
        for p in seg.windows(2) {
            // Strict decrease up to three combined standard errors.
            let slack = 3.0 * (self.stderr[lo] + noise);
            if !(p[1].1 < p[0].1 + slack) {
                return Err(Error::NoDecreasingSegment);
            }
        }
        let n = seg.len() as f64;
        let sx: f64 = seg.iter().map(|p| p.0).sum();
        let sy: f64 = seg.iter().map(|p| p.1).sum();
        let sxx: f64 = seg.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = seg.iter().map(|p| p.0 * p.1).sum();
        let denom = n * sxx - sx * sx;
        if denom.abs() < 1e-300 {
            return Err(Error::NoDecreasingSegment);
        }
        let slope = (n * sxy - sx * sy) / denom;
        let intercept = (sy - slope * sx) / n;
        if !(slope < 0.0) {
            return Err(Error::NoDecreasingSegment);
        }
        let root = -intercept / slope;
        let residual = (seg
            .iter()
            .map(|&(x, y)| {
                let e = y - (slope * x + intercept);
                e * e
            })
            .sum::<f64>()
            / n)
            .sqrt();
        Ok(AffineExtraction {
            root: self.orient(root),
            residual,
            slope,
            n_points: seg.len(),
        })
    }

    /// Property-suite violations at `tol = 3 x` combined MC standard errors.
    pub fn property_violations(&self, convexity: bool) -> Vec<String> {
        let mut out = Vec::new();
        for (i, (&w, &se)) in self.w.iter().zip(&self.stderr).enumerate() {
            if w < -3.0 * se {
                out.push(format!("negative loss at grid[{i}]: {w} (stderr {se})"));
            }
        }
        for i in 0..self.len().saturating_sub(1) {
            let tol = 3.0 * (self.stderr[i].powi(2) + self.stderr[i + 1].powi(2)).sqrt();
            if self.w[i + 1] > self.w[i] + tol {
                out.push(format!(
                    "monotonicity violated at grid[{i}]: {} -> {} (tol {tol})",
                    self.w[i],
                    self.w[i + 1]
                ));
            }
        }
        for i in 0..self.len() {
            for j in (i + 1)..self.len() {
                let tol = 3.0 * (self.stderr[i].powi(2) + self.stderr[j].powi(2)).sqrt();
                let gap = (self.w[i] - self.w[j]).abs();
                let dist = (self.grid[i] - self.grid[j]).abs();
                if gap > dist + tol {
                    out.push(format!(
                        "Lipschitz violated between grid[{i}], grid[{j}]: |dw|={gap} > {dist}+{tol}"
                    ));
                }
            }
        }
        if convexity {
            for i in 1..self.len().saturating_sub(1) {
                let h1 = self.grid[i] - self.grid[i - 1];
                let h2 = self.grid[i + 1] - self.grid[i];
                let second =
                    (self.w[i + 1] - self.w[i]) / h2 - (self.w[i] - self.w[i - 1]) / h1;
                let tol = 3.0
                    * ((self.stderr[i - 1].powi(2)
                        + 4.0 * self.stderr[i].powi(2)
                        + self.stderr[i + 1].powi(2))
                    .sqrt())
                    / h1.min(h2);
                if second < -tol {
                    out.push(format!(
                        "convexity violated at grid[{i}]: second difference {second} (tol {tol})"
                    ));
                }
            }
        }
        out
    }
}
