//! Statistics of empirical measures.
//!
//! An [`EmpiricalMeasure`] is a uniform-weight view over selected coordinates
//! of a particle matrix, stored coordinate-major (each coordinate is one
//! contiguous slice of length `stride >= n`, of which the first `n` entries
//! are live particles). All functionals are exact finite-sample quantities;
//! nothing here is estimated.
//!
//! Variance uses the population `1/n` convention throughout: these statistics
//! feed Monte Carlo objectives that are themselves `1/n` averages, and their
//! gradients must match the differentiated loss exactly.

use crate::{Error, Result};

/// Uniform empirical measure `(1/n) sum of Dirac masses` on `n` points in
/// `R^k`, viewed over coordinate-major storage.
#[derive(Debug, Clone, Copy)]
pub struct EmpiricalMeasure<'a> {
    data: &'a [f64],
    n: usize,
    k: usize,
    stride: usize,
}

impl<'a> EmpiricalMeasure<'a> {
    /// `data` holds `k` coordinate slices of length `stride`, concatenated.
    pub fn new(data: &'a [f64], n: usize, k: usize, stride: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("empirical measure needs n >= 1".into()));
        }
        // Views may start mid-buffer (group offsets), so require only that
        // the last coordinate's live entries fit.
        if stride < n || k == 0 || data.len() < (k - 1) * stride + n {
            return Err(Error::Dimension {
                expected: (k.max(1) - 1) * stride + n,
                got: data.len(),
            });
        }
        Ok(Self { data, n, k, stride })
    }

    /// Convenience constructor for one-dimensional samples.
    pub fn from_slice(samples: &'a [f64]) -> Result<Self> {
        Self::new(samples, samples.len(), 1, samples.len())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false // n >= 1 by construction
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    /// Live entries of coordinate `c`.
    pub fn coord(&self, c: usize) -> &'a [f64] {
        &self.data[c * self.stride..c * self.stride + self.n]
    }
}

/// Sample mean per coordinate.
pub fn mean(mu: &EmpiricalMeasure) -> Vec<f64> {
    let inv = 1.0 / mu.len() as f64;
    (0..mu.dim())
        .map(|c| mu.coord(c).iter().sum::<f64>() * inv)
        .collect()
}

/// Population variance (`1/n`) per coordinate.
pub fn variance(mu: &EmpiricalMeasure) -> Vec<f64> {
    let inv = 1.0 / mu.len() as f64;
    let means = mean(mu);
    (0..mu.dim())
        .map(|c| {
            mu.coord(c)
                .iter()
                .map(|&x| (x - means[c]) * (x - means[c]))
                .sum::<f64>()
                * inv
        })
        .collect()
}

/// Lower-tail conditional expectation gap in product form:
/// `(delta - E[X | X <= theta]) * P(X <= theta)`, which equals the plain
/// average of `(delta - x) 1{x <= theta}` and is exactly `0` when no sample
/// point lies at or below `theta`.
///
/// Operates on coordinate 0.
pub fn tail_conditional(mu: &EmpiricalMeasure, theta: f64, delta: f64) -> f64 {
    let inv = 1.0 / mu.len() as f64;
    mu.coord(0)
        .iter()
        .filter(|&&x| x <= theta)
        .map(|&x| delta - x)
        .sum::<f64>()
        * inv
}

/// Exact 2-Wasserstein distance between two one-dimensional equal-size
/// uniform empirical measures: sort both samples and average the squared
/// differences of the order statistics.
///
/// Higher dimensions and unequal sizes are not supported here; general
/// constraints accept arbitrary callables instead.
pub fn wasserstein2_1d(mu: &EmpiricalMeasure, eta: &EmpiricalMeasure) -> Result<f64> {
    if mu.dim() != 1 || eta.dim() != 1 {
        return Err(Error::Config(
            "wasserstein2_1d supports one-dimensional samples only".into(),
        ));
    }
    if mu.len() != eta.len() {
        return Err(Error::Dimension {
            expected: mu.len(),
            got: eta.len(),
        });
    }
    let mut a = mu.coord(0).to_vec();
    let mut b = eta.coord(0).to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let ms = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / mu.len() as f64;
    Ok(ms.sqrt())
}

/// Mean squared excursion outside `[lo, hi]` of coordinate 0:
/// `E[(lo - x)_+^2 + (x - hi)_+^2]`. Zero iff every point lies in the band.
pub fn squared_excursion(mu: &EmpiricalMeasure, lo: f64, hi: f64) -> Result<f64> {
    if lo > hi {
        return Err(Error::Config(format!(
            "squared_excursion needs lo <= hi, got [{lo}, {hi}]"
        )));
    }
    let inv = 1.0 / mu.len() as f64;
    Ok(mu
        .coord(0)
        .iter()
        .map(|&x| {
            let below = (lo - x).max(0.0);
            let above = (x - hi).max(0.0);
            below * below + above * above
        })
        .sum::<f64>()
        * inv)
}
