//! Functions and probability densities sampled on a uniform circle grid.
//!
//! A grid of size `N` (a power of two) holds values at `x_j = j / N`.
//! Integrals use the rectangle rule and off-grid values come from periodic
//! Catmull-Rom interpolation.

use std::fmt::Write as _;
use std::ops::{Add, Mul};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maps::fixed_to_unit;
use crate::rng::{purpose, StreamRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensityError {
    #[error("grid sizes differ: {0} vs {1}")]
    GridMismatch(usize, usize),
    #[error("grid size {0} is not a power of two >= 4")]
    BadGridSize(usize),
    #[error("density value {value} at index {index} is negative or not finite")]
    BadValue { index: usize, value: f64 },
    #[error("density has zero mass")]
    ZeroMass,
    #[error("malformed density file: {0}")]
    Parse(String),
}

/// Values that can be interpolated and integrated on a grid.
pub trait GridValue: Copy + Default + Add<Output = Self> + Mul<f64, Output = Self> {}
impl GridValue for f64 {}
impl GridValue for Complex64 {}

pub fn check_grid_size(n: usize) -> Result<(), DensityError> {
    if n >= 4 && n.is_power_of_two() {
        Ok(())
    } else {
        Err(DensityError::BadGridSize(n))
    }
}

/// Grid nodes `j / n`.
pub fn grid_points(n: usize) -> impl Iterator<Item = f64> + Clone {
    (0..n).map(move |j| j as f64 / n as f64)
}

pub fn sample_fn(n: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    grid_points(n).map(f).collect()
}

/// Rectangle-rule integral over the circle.
pub fn integrate<T: GridValue>(values: &[T]) -> T {
    let s = values.iter().fold(T::default(), |acc, &v| acc + v);
    s * (1.0 / values.len() as f64)
}

/// Rectangle-rule integral of a product.
pub fn integrate_product(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64
}

pub fn sup_norm<T: Copy + Into<Complex64>>(values: &[T]) -> f64 {
    values.iter().map(|&v| v.into().norm()).fold(0.0, f64::max)
}

/// Interpolation stencil at `x`: the index of the left node and the weights
/// of nodes `i - 1, i, i + 1, i + 2` (indices mod `n`).
#[inline]
pub fn stencil(x: f64, n: usize) -> (usize, [f64; 4]) {
    let s = x.rem_euclid(1.0) * n as f64;
    let mut i = s.floor() as usize;
    let mut t = s - i as f64;
    if i >= n {
        i = n - 1;
        t = 1.0;
    }
    let t2 = t * t;
    let t3 = t2 * t;
    (
        i,
        [
            0.5 * (-t3 + 2.0 * t2 - t),
            0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
            0.5 * (-3.0 * t3 + 4.0 * t2 + t),
            0.5 * (t3 - t2),
        ],
    )
}

/// Periodic Catmull-Rom interpolation.
#[inline]
pub fn interpolate<T: GridValue>(values: &[T], x: f64) -> T {
    let n = values.len();
    let (i, w) = stencil(x, n);
    let mask = n - 1;
    values[(i + n - 1) & mask] * w[0]
        + values[i] * w[1]
        + values[(i + 1) & mask] * w[2]
        + values[(i + 2) & mask] * w[3]
}

/// Lags used by [`holder_estimate`] on a grid of size `n`.
///
/// All lags for `n <= 1024`; beyond that every lag up to `n / 4` plus the
/// multiples of `n / 1024`. The lag set of `2n` contains twice the lag set of
/// `n`, so the estimate cannot decrease under grid refinement.
pub fn holder_lags(n: usize) -> Vec<usize> {
    let half = n / 2;
    if n <= 1024 {
        return (1..=half).collect();
    }
    let stride = n / 1024;
    (1..=half).filter(|&k| k <= n / 4 || k % stride == 0).collect()
}

/// Discrete Holder constant: the largest `|f(x) - f(y)| / d(x, y)^alpha`
/// over grid pairs, `d` the circle metric. This is a lower bound for the
/// Holder constant of any function with these grid values.
pub fn holder_estimate(f: &[f64], alpha: f64) -> f64 {
    assert!(alpha > 0.0 && alpha <= 1.0, "alpha must lie in (0, 1]");
    let n = f.len();
    let mut best: f64 = 0.0;
    for k in holder_lags(n) {
        let inv = (k as f64 / n as f64).powf(-alpha);
        let mut m: f64 = 0.0;
        for i in 0..n {
            m = m.max((f[i] - f[(i + k) % n]).abs());
        }
        best = best.max(m * inv);
    }
    best
}

/// Holder estimate of a complex grid function, using moduli of differences.
pub fn holder_estimate_complex(f: &[Complex64], alpha: f64) -> f64 {
    assert!(alpha > 0.0 && alpha <= 1.0, "alpha must lie in (0, 1]");
    let n = f.len();
    let mut best: f64 = 0.0;
    for k in holder_lags(n) {
        let inv = (k as f64 / n as f64).powf(-alpha);
        let mut m: f64 = 0.0;
        for i in 0..n {
            m = m.max((f[i] - f[(i + k) % n]).norm());
        }
        best = best.max(m * inv);
    }
    best
}

/// A nonnegative density on the circle grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    n_points: usize,
    values: Vec<f64>,
}

impl DensityGrid {
    pub fn new(values: Vec<f64>) -> Result<Self, DensityError> {
        check_grid_size(values.len())?;
        if let Some((index, &value)) =
            values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(DensityError::BadValue { index, value });
        }
        Ok(Self { n_points: values.len(), values })
    }

    /// Grid values of `f`, normalized to unit mass.
    pub fn from_fn(n: usize, f: impl Fn(f64) -> f64) -> Result<Self, DensityError> {
        Self::new(sample_fn(n, f))?.normalized()
    }

    pub fn uniform(n: usize) -> Result<Self, DensityError> {
        Self::new(vec![1.0; n])
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mass(&self) -> f64 {
        integrate(&self.values)
    }

    pub fn is_normalized(&self) -> bool {
        (self.mass() - 1.0).abs() <= 1e-12
    }

    pub fn normalized(mut self) -> Result<Self, DensityError> {
        let m = self.mass();
        if !(m > 0.0) {
            return Err(DensityError::ZeroMass);
        }
        self.values.iter_mut().for_each(|v| *v /= m);
        Ok(self)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn at(&self, x: f64) -> f64 {
        interpolate(&self.values, x)
    }

    /// `|log psi|_alpha`, infinite if the density touches zero.
    pub fn log_holder(&self, alpha: f64) -> f64 {
        if self.min() <= 0.0 {
            return f64::INFINITY;
        }
        let logs: Vec<f64> = self.values.iter().map(|v| v.ln()).collect();
        holder_estimate(&logs, alpha)
    }

    /// Membership in `H_K` with the given relative slack on the grid estimate.
    pub fn in_class(&self, k: f64, alpha: f64, slack: f64) -> bool {
        self.min() > 0.0 && self.log_holder(alpha) <= k * (1.0 + slack)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# n_points={}\nx,value\n", self.n_points);
        for (x, v) in grid_points(self.n_points).zip(&self.values) {
            writeln!(s, "{x},{v}").expect("writing to a String cannot fail");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, DensityError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| DensityError::Parse("empty file".into()))?;
        let n: usize = header
            .strip_prefix("# n_points=")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| DensityError::Parse("missing '# n_points=N' header".into()))?;
        if lines.next().map(str::trim) != Some("x,value") {
            return Err(DensityError::Parse("missing 'x,value' column header".into()));
        }
        let values = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .nth(1)
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .ok_or_else(|| DensityError::Parse(format!("bad row '{l}'")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != n {
            return Err(DensityError::Parse(format!(
                "header says {n} points, found {}",
                values.len()
            )));
        }
        Self::new(values)
    }
}

/// Rectangle-rule L1 distance.
pub fn l1_distance(a: &DensityGrid, b: &DensityGrid) -> Result<f64, DensityError> {
    l1_distance_values(a.values(), b.values())
}

pub fn l1_distance_values(a: &[f64], b: &[f64]) -> Result<f64, DensityError> {
    if a.len() != b.len() {
        return Err(DensityError::GridMismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// `psi_h = (psi + h) / (1 + h)` with `h = |psi|_alpha + lip_phi`.
///
/// Since `|log psi_h|_alpha <= |psi|_alpha / h`, the result has discrete
/// log-Holder constant at most 1.
pub fn regularize(
    psi: &DensityGrid,
    alpha: f64,
    lip_phi: f64,
) -> Result<(DensityGrid, f64), DensityError> {
    let h = holder_estimate(psi.values(), alpha) + lip_phi;
    let values = psi.values().iter().map(|v| (v + h) / (1.0 + h)).collect();
    Ok((DensityGrid::new(values)?.normalized()?, h))
}

/// Inverse-CDF sampler for a grid density.
///
/// Cell `[x_j, x_{j+1})` carries mass `phi_j / N` spread uniformly, so the
/// CDF is piecewise linear through the cumulative rectangle-rule masses.
#[derive(Debug, Clone)]
pub struct DensitySampler {
    cumulative: Vec<f64>,
    log2_n: u32,
}

impl DensitySampler {
    pub fn new(phi: &DensityGrid) -> Result<Self, DensityError> {
        let total: f64 = phi.values().iter().sum();
        if !(total > 0.0) {
            return Err(DensityError::ZeroMass);
        }
        let mut acc = 0.0;
        let cumulative = phi
            .values()
            .iter()
            .map(|v| {
                acc += v / total;
                acc
            })
            .collect();
        Ok(Self { cumulative, log2_n: phi.n_points().trailing_zeros() })
    }

    /// A draw as a 64-bit fixed-point circle coordinate.
    #[inline]
    pub fn sample_fixed(&self, rng: &mut StreamRng) -> u64 {
        let u = rng.uniform();
        let last = self.cumulative.len() - 1;
        let j = self.cumulative.partition_point(|&c| c <= u).min(last);
        // Skip cells of zero mass that rounding may land on.
        let j = if j > 0 && self.cumulative[j] == self.cumulative[j - 1] {
            self.cumulative[..j].iter().rposition(|&c| c < self.cumulative[j]).map_or(0, |p| p + 1)
        } else {
            j
        };
        let offset = rng.bits() >> self.log2_n;
        ((j as u64) << (64 - self.log2_n)) | offset
    }

    #[inline]
    pub fn sample(&self, rng: &mut StreamRng) -> f64 {
        fixed_to_unit(self.sample_fixed(rng))
    }

    /// Piecewise-linear CDF at `x` in `[0, 1]`.
    pub fn cdf(&self, x: f64) -> f64 {
        let n = self.cumulative.len();
        let s = (x.clamp(0.0, 1.0) * n as f64).min(n as f64);
        let j = (s.floor() as usize).min(n - 1);
        let before = if j == 0 { 0.0 } else { self.cumulative[j - 1] };
        before + (self.cumulative[j] - before) * (s - j as f64)
    }
}

/// `m` i.i.d. draws from `phi`, reproducible under `seed`.
pub fn sample_from_density(
    phi: &DensityGrid,
    m: usize,
    seed: u64,
) -> Result<Vec<f64>, DensityError> {
    let sampler = DensitySampler::new(phi)?;
    let mut rng = StreamRng::new(seed, purpose::DENSITY_SAMPLE, 0);
    Ok((0..m).map(|_| sampler.sample(&mut rng)).collect())
}
