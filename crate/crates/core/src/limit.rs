//! Limit statistics of Birkhoff sums `sum_{k<n} f(X_k)` under the stationary
//! law: pair and multiple correlations, the limit covariance `Sigma^2`,
//! variance growth, an empirical central limit test and the coboundary
//! detector.
//!
//! Operator estimators iterate the grid Koopman and normalized transfer
//! operators and are deterministic. Monte Carlo estimators run one stream
//! per trajectory and report batch-means standard errors over
//! [`MC_BATCHES`] groups of trajectories.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{integrate, sup_norm, DensityError, DensityGrid, DensitySampler};
use crate::ensemble::{Ensemble, SelectionLaw};
use crate::observable::{Observable, TrigPoly};
use crate::rng::{purpose, StreamRng};
use crate::stats::{
    anderson_darling, ks_p_value, ks_statistic, linear_fit, std_normal_cdf, LineFit,
    AD_CRITICAL_1PCT, Z99,
};
use crate::trajectory::{batched, walk, Walker};
use crate::transfer::{stationary_residual, OperatorSet, Stencil, TransferError};

/// Number of trajectory groups behind every Monte Carlo standard error.
pub const MC_BATCHES: usize = 100;
/// Default stopping threshold for the covariance series.
pub const DEFAULT_TAIL_TOL: f64 = 1e-9;
/// Consecutive small terms that end a series.
pub const TAIL_RUN: usize = 3;
/// Window over which a nonconverged series must be decreasing.
pub const TREND_WINDOW: usize = 5;
/// Directions with `v^T Sigma^2 v` below this are degenerate.
pub const DEGENERATE_VARIANCE: f64 = 1e-6;
/// Fewest samples for which the central limit test gives a verdict.
pub const MIN_CLT_SAMPLES: usize = 100;
/// Significance level of the goodness-of-fit tests.
pub const CLT_LEVEL: f64 = 0.01;
/// Terms of the coboundary series below this sup norm count as zero.
pub const COBOUNDARY_TERM_TOL: f64 = 1e-12;
/// Maps sampled for the coboundary residual of a continuous selection law.
pub const COBOUNDARY_SAMPLED_MAPS: usize = 100;
/// Envelope values below this are excluded from the decay fit.
pub const ENVELOPE_FLOOR: f64 = 1e-12;
/// Minimum `R^2` for an envelope to count as exponential.
pub const ENVELOPE_MIN_R2: f64 = 0.8;

#[derive(Debug, Error)]
pub enum LimitError {
    #[error("covariance series did not reach its tail tolerance by m = {m} and its terms are not decreasing over the last {TREND_WINDOW} lags")]
    TailNotConverged { m: usize },
    #[error("coboundary series partial sums grew over the last {TREND_WINDOW} terms at m = {m}")]
    SeriesDiverged { m: usize },
    #[error("direction has limit variance {variance:.3e} below {DEGENERATE_VARIANCE:e}; use the coboundary detector")]
    DegenerateDirection { variance: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Density(#[from] DensityError),
}

/// An ensemble with its grid operators and computed stationary density.
#[derive(Debug, Clone, Copy)]
pub struct Stationary<'a> {
    pub ensemble: &'a Ensemble,
    pub ops: &'a OperatorSet,
    pub phi: &'a DensityGrid,
}

impl<'a> Stationary<'a> {
    pub fn new(
        ensemble: &'a Ensemble,
        ops: &'a OperatorSet,
        phi: &'a DensityGrid,
    ) -> Result<Self, LimitError> {
        if ops.n() != phi.n_points() {
            return Err(DensityError::GridMismatch(ops.n(), phi.n_points()).into());
        }
        Ok(Self { ensemble, ops, phi })
    }

    pub fn n(&self) -> usize {
        self.ops.n()
    }

    /// `int f phi dm`.
    pub fn mean(&self, f: &[f64]) -> f64 {
        f.iter().zip(self.phi.values()).map(|(a, b)| a * b).sum::<f64>() / f.len() as f64
    }

    /// `f - int f phi dm`.
    pub fn center(&self, f: &[f64]) -> Vec<f64> {
        let m = self.mean(f);
        f.iter().map(|v| v - m).collect()
    }

    /// `L1` distance between `P phi` and `phi`; centering against `phi`
    /// instead of the true invariant law is off by at most this times the
    /// sup norm of the observable.
    pub fn residual(&self) -> Result<f64, LimitError> {
        Ok(stationary_residual(self.ops, self.phi)?)
    }

    fn check_grid(&self, f: &[f64]) -> Result<(), LimitError> {
        if f.len() != self.n() {
            return Err(DensityError::GridMismatch(self.n(), f.len()).into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Operator,
    MonteCarlo,
}

/// Correlations `C_n` at lags `0..=n_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCurve {
    pub lags: Vec<usize>,
    pub values: Vec<Complex64>,
    /// Standard errors (Monte Carlo only).
    pub se: Option<Vec<f64>>,
    pub estimator: Estimator,
}

impl CorrelationCurve {
    pub fn real(&self) -> Vec<f64> {
        self.values.iter().map(|c| c.re).collect()
    }

    pub fn moduli(&self) -> Vec<f64> {
        self.values.iter().map(|c| c.norm()).collect()
    }

    /// `lag,re,im,se` rows; `se` is empty for operator curves.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lag,re,im,se\n");
        for (i, (lag, v)) in self.lags.iter().zip(&self.values).enumerate() {
            let se = self.se.as_ref().map_or(String::new(), |s| s[i].to_string());
            out.push_str(&format!("{lag},{},{},{se}\n", v.re, v.im));
        }
        out
    }
}

/// `C_n = int f Q^n g phi dm - int f phi dm int g phi dm` for `n <= n_max`,
/// evaluated on the transfer side as `int g P^n(f phi) dm`. Iterating `P`
/// averages over preimages and damps grid-scale modes, while iterating the
/// grid Koopman operator samples `g` along expanding orbits and aliases.
pub fn correlation_operator(
    st: &Stationary<'_>,
    f: &[f64],
    g: &[f64],
    n_max: usize,
) -> Result<CorrelationCurve, LimitError> {
    st.check_grid(f)?;
    st.check_grid(g)?;
    let (mf, mg) = (st.mean(f), st.mean(g));
    let mut p: Vec<f64> = f.iter().zip(st.phi.values()).map(|(a, b)| a * b).collect();
    let mut values = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        let c = p.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / p.len() as f64;
        values.push(Complex64::new(c - mf * mg, 0.0));
        if n < n_max {
            p = st.ops.annealed(&p);
        }
    }
    Ok(CorrelationCurve {
        lags: (0..=n_max).collect(),
        values,
        se: None,
        estimator: Estimator::Operator,
    })
}

/// Pooled sums of `F`, `G_n` and `F G_n` over a group of trajectories.
#[derive(Debug, Clone)]
struct CrossSums {
    count: usize,
    f: Complex64,
    g: Vec<Complex64>,
    fg: Vec<Complex64>,
}

impl CrossSums {
    fn new(lags: usize) -> Self {
        Self {
            count: 0,
            f: Complex64::default(),
            g: vec![Complex64::default(); lags],
            fg: vec![Complex64::default(); lags],
        }
    }

    fn add(&mut self, f: Complex64, g: &[Complex64]) {
        self.count += 1;
        self.f += f;
        for ((sg, sfg), &gn) in self.g.iter_mut().zip(self.fg.iter_mut()).zip(g) {
            *sg += gn;
            *sfg += f * gn;
        }
    }

    fn covariances(&self) -> Vec<Complex64> {
        let m = self.count as f64;
        self.g.iter().zip(&self.fg).map(|(g, fg)| fg / m - (self.f / m) * (g / m)).collect()
    }

    fn merge(parts: &[CrossSums]) -> Self {
        let mut out = Self::new(parts[0].g.len());
        for p in parts {
            out.count += p.count;
            out.f += p.f;
            for (a, b) in out.g.iter_mut().zip(&p.g) {
                *a += b;
            }
            for (a, b) in out.fg.iter_mut().zip(&p.fg) {
                *a += b;
            }
        }
        out
    }
}

/// Pooled estimate with batch-means standard errors (the modulus of the
/// real and imaginary standard errors).
fn pooled_curve(parts: &[CrossSums]) -> CorrelationCurve {
    let values = CrossSums::merge(parts).covariances();
    let per: Vec<Vec<Complex64>> = parts.iter().map(CrossSums::covariances).collect();
    let b = per.len() as f64;
    let se = (0..values.len())
        .map(|n| {
            let mean = per.iter().map(|c| c[n]).sum::<Complex64>() / b;
            let var = per.iter().map(|c| (c[n] - mean).norm_sqr()).sum::<f64>() / (b - 1.0);
            (var / b).sqrt()
        })
        .collect();
    CorrelationCurve {
        lags: (0..values.len()).collect(),
        values,
        se: Some(se),
        estimator: Estimator::MonteCarlo,
    }
}

fn mc_batches(samples: usize) -> usize {
    MC_BATCHES.min(samples / 2).max(2)
}

fn check_samples(samples: usize) -> Result<(), LimitError> {
    if samples < 4 {
        return Err(LimitError::Invalid(format!("need at least 4 samples, got {samples}")));
    }
    Ok(())
}

/// Trajectory estimate of `E f(X_0) g(X_n) - E f(X_0) E g(X_n)` with
/// `X_0 ~ phi`. Observables take fixed-point coordinates.
pub fn correlation_mc(
    st: &Stationary<'_>,
    f: &(dyn Fn(u64) -> f64 + Sync),
    g: &(dyn Fn(u64) -> f64 + Sync),
    n_max: usize,
    samples: usize,
    seed: u64,
) -> Result<CorrelationCurve, LimitError> {
    check_samples(samples)?;
    let sampler = DensitySampler::new(st.phi)?;
    let walker = Walker::new(st.ensemble);
    let parts = batched(samples, mc_batches(samples), |range| {
        let mut sums = CrossSums::new(n_max + 1);
        let mut gs = vec![Complex64::default(); n_max + 1];
        for i in range {
            let mut f0 = 0.0;
            walk(&walker, &sampler, seed, i, n_max + 1, |k, x| {
                if k == 0 {
                    f0 = f(x);
                }
                gs[k] = Complex64::new(g(x), 0.0);
            });
            sums.add(Complex64::new(f0, 0.0), &gs);
        }
        sums
    });
    Ok(pooled_curve(&parts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum CovarianceMethod {
    Series { tail_tol: f64, m_max: usize },
    BatchMeans { n: usize, batches: usize },
}

/// An estimate of the limit covariance `Sigma^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    pub sigma2: Vec<Vec<f64>>,
    pub se: Option<Vec<Vec<f64>>>,
    pub method: CovarianceMethod,
    /// Last series lag used, or the trajectory length.
    pub truncation: usize,
    /// Whether the series met its stopping rule (always true for batch means).
    pub converged: bool,
    pub min_eigenvalue: f64,
    /// `int f_i phi dm`, subtracted from each component.
    pub centering: Vec<f64>,
    /// `L1` stationary residual of `phi`, bounding the centering error.
    pub stationary_residual: f64,
}

impl CovarianceEstimate {
    pub fn dim(&self) -> usize {
        self.sigma2.len()
    }

    pub fn is_symmetric(&self) -> bool {
        let d = self.dim();
        (0..d).all(|i| (0..d).all(|j| self.sigma2[i][j] == self.sigma2[j][i]))
    }

    /// `v^T Sigma^2 v`.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        let d = self.dim();
        (0..d).map(|i| (0..d).map(|j| v[i] * self.sigma2[i][j] * v[j]).sum::<f64>()).sum()
    }
}

pub fn min_eigenvalue(m: &[Vec<f64>]) -> f64 {
    let d = m.len();
    if d == 0 {
        return 0.0;
    }
    let mat = DMatrix::from_fn(d, d, |i, j| m[i][j]);
    mat.symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

fn decreasing_tail(xs: &[f64]) -> bool {
    xs.len() >= TREND_WINDOW && xs[xs.len() - TREND_WINDOW..].windows(2).all(|w| w[1] <= w[0])
}

fn growing_tail(xs: &[f64]) -> bool {
    xs.len() >= TREND_WINDOW && xs[xs.len() - TREND_WINDOW..].windows(2).all(|w| w[1] > w[0])
}

/// `Sigma^2 = int f (x) f phi + sum_{m >= 1} int (f (x) Q^m f + Q^m f (x) f) phi`
/// for the grid components `f`, centered against `phi` first. The series
/// stops once [`TAIL_RUN`] consecutive terms have max-entry norm below
/// `tail_tol` times that of the lag-0 term, or at `m_max`. Reaching `m_max` is an error unless the terms
/// are still decreasing.
pub fn covariance_series(
    st: &Stationary<'_>,
    f: &[Vec<f64>],
    tail_tol: f64,
    m_max: usize,
) -> Result<CovarianceEstimate, LimitError> {
    if f.is_empty() {
        return Err(LimitError::Invalid("observable has no components".into()));
    }
    for c in f {
        st.check_grid(c)?;
    }
    let d = f.len();
    let centering: Vec<f64> = f.iter().map(|c| st.mean(c)).collect();
    let fc: Vec<Vec<f64>> = f.iter().map(|c| st.center(c)).collect();
    let pair =
        |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64;
    // `int phi f_i Q^m f_j = int f_j P^m(phi f_i)`.
    let mut p: Vec<Vec<f64>> =
        fc.iter().map(|c| c.iter().zip(st.phi.values()).map(|(a, b)| a * b).collect()).collect();
    let mut sigma = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in i..d {
            sigma[i][j] = pair(&p[i], &fc[j]);
        }
    }
    // The tolerance is relative to the lag-0 term so that truncation, and
    // with it the estimate, is exactly equivariant under scaling of `f`.
    let scale = sigma.iter().flatten().fold(0.0f64, |a, &b| a.max(b.abs()));
    let mut norms = Vec::new();
    let mut small = 0;
    let mut m = 0;
    let mut converged = false;
    while m < m_max {
        m += 1;
        p = p.iter().map(|c| st.ops.annealed(c)).collect();
        let mut norm: f64 = 0.0;
        for i in 0..d {
            for j in i..d {
                let t = pair(&p[i], &fc[j]) + pair(&p[j], &fc[i]);
                sigma[i][j] += t;
                norm = norm.max(t.abs());
            }
        }
        norms.push(norm);
        small = if norm <= tail_tol * scale { small + 1 } else { 0 };
        if small >= TAIL_RUN {
            converged = true;
            break;
        }
    }
    if !converged && !decreasing_tail(&norms) {
        return Err(LimitError::TailNotConverged { m });
    }
    for i in 0..d {
        for j in 0..i {
            sigma[i][j] = sigma[j][i];
        }
    }
    Ok(CovarianceEstimate {
        min_eigenvalue: min_eigenvalue(&sigma),
        sigma2: sigma,
        se: None,
        method: CovarianceMethod::Series { tail_tol, m_max },
        truncation: m,
        converged,
        centering,
        stationary_residual: st.residual()?,
    })
}

/// Birkhoff sums `sum_{k<n} f_i(X_k) - n int f_i phi` of trajectories
/// `indices`, one row per trajectory.
fn birkhoff_sums(
    st: &Stationary<'_>,
    comps: &[TrigPoly],
    means: &[f64],
    n: usize,
    samples: usize,
    first_index: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, LimitError> {
    let sampler = DensitySampler::new(st.phi)?;
    let walker = Walker::new(st.ensemble);
    let parts = batched(samples, mc_batches(samples), |range| {
        range
            .map(|i| {
                let mut s = vec![0.0; comps.len()];
                walk(&walker, &sampler, seed, first_index + i, n, |_, x| {
                    for (acc, c) in s.iter_mut().zip(comps) {
                        *acc += c.eval_fixed(x);
                    }
                });
                s.iter().zip(means).map(|(v, m)| v - n as f64 * m).collect::<Vec<f64>>()
            })
            .collect::<Vec<_>>()
    });
    Ok(parts.into_iter().flatten().collect())
}

/// Empirical covariance of `S_n / sqrt(n)` over `batches` independent
/// stationary trajectories of length `n`. This estimates `E S_n S_n^T / n`,
/// which differs from `Sigma^2` by `O(1/n)`.
pub fn covariance_batch_means(
    st: &Stationary<'_>,
    f: &Observable,
    n: usize,
    batches: usize,
    seed: u64,
) -> Result<CovarianceEstimate, LimitError> {
    check_samples(batches)?;
    if n == 0 {
        return Err(LimitError::Invalid("trajectory length must be positive".into()));
    }
    let d = f.dim();
    let centering: Vec<f64> = f.grids(st.n()).iter().map(|g| st.mean(g)).collect();
    let sums = birkhoff_sums(st, &f.components, &centering, n, batches, 0, seed)?;
    let scale = 1.0 / (n as f64).sqrt();
    let v: Vec<Vec<f64>> = sums.iter().map(|s| s.iter().map(|x| x * scale).collect()).collect();
    let b = v.len() as f64;
    let mean: Vec<f64> = (0..d).map(|i| v.iter().map(|r| r[i]).sum::<f64>() / b).collect();
    let mut sigma = vec![vec![0.0; d]; d];
    let mut se = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in i..d {
            let w: Vec<f64> = v.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).collect();
            let c = w.iter().sum::<f64>() / (b - 1.0);
            let wm = w.iter().sum::<f64>() / b;
            let var = w.iter().map(|x| (x - wm).powi(2)).sum::<f64>() / (b - 1.0);
            sigma[i][j] = c;
            sigma[j][i] = c;
            se[i][j] = (var / b).sqrt();
            se[j][i] = se[i][j];
        }
    }
    Ok(CovarianceEstimate {
        min_eigenvalue: min_eigenvalue(&sigma),
        sigma2: sigma,
        se: Some(se),
        method: CovarianceMethod::BatchMeans { n, batches },
        truncation: n,
        converged: true,
        centering,
        stationary_residual: st.residual()?,
    })
}

/// Exact `E S_n S_n^T / n` for stationary starts, the quantity that
/// [`covariance_batch_means`] estimates:
/// `C_0 + sum_{0<m<n} (1 - m/n) (C_m + C_m^T)`.
pub fn finite_horizon_covariance(
    st: &Stationary<'_>,
    f: &[Vec<f64>],
    n: usize,
) -> Result<Vec<Vec<f64>>, LimitError> {
    if n == 0 {
        return Err(LimitError::Invalid("trajectory length must be positive".into()));
    }
    let d = f.len();
    // curves[i][j][m] = cov(f_i(X_0), f_j(X_m))
    let mut curves = vec![vec![Vec::new(); d]; d];
    for i in 0..d {
        for j in 0..d {
            curves[i][j] = correlation_operator(st, &f[i], &f[j], n - 1)?.real();
        }
    }
    let nf = n as f64;
    let mut out = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            out[i][j] = curves[i][j][0]
                + (1..n)
                    .map(|m| (1.0 - m as f64 / nf) * (curves[i][j][m] + curves[j][i][m]))
                    .sum::<f64>();
        }
    }
    Ok(out)
}

/// Limit variance `v^T Sigma^2 v` of the scalar observable with grid `f_v`.
pub fn directional_variance(st: &Stationary<'_>, f_v: &[f64]) -> Result<f64, LimitError> {
    Ok(covariance_series(st, &[f_v.to_vec()], DEFAULT_TAIL_TOL, 100_000)?.sigma2[0][0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceGrowthRow {
    pub n: usize,
    /// `n C_0 + 2 sum_{m<n} (n - m) C_m` from the operator curve.
    pub exact: f64,
    pub mc_mean: f64,
    pub mc_se: f64,
    pub linear: f64,
    pub residual_exact: f64,
    pub residual_mc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceGrowthReport {
    pub sigma2: f64,
    pub rows: Vec<VarianceGrowthRow>,
    /// Weighted least-squares slope of the Monte Carlo residual against `n`.
    pub slope: f64,
    pub slope_se: f64,
    /// `max_n |E S_n^2 - n sigma^2|` along the exact curve.
    pub max_exact_residual: f64,
    /// True when the slope is within `Z99` standard errors of zero.
    pub no_trend: bool,
}

impl VarianceGrowthReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,exact,mc_mean,mc_se,linear,residual_exact,residual_mc\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.n, r.exact, r.mc_mean, r.mc_se, r.linear, r.residual_exact, r.residual_mc
            ));
        }
        out
    }
}

/// Compares `E (v^T S_n)^2` with `n v^T Sigma^2 v` along `n_list`: exactly
/// through the correlation curve and by Monte Carlo with independent
/// trajectories for each `n`. A bounded difference shows no trend in `n`.
pub fn variance_growth_check(
    st: &Stationary<'_>,
    f: &Observable,
    v: &[f64],
    n_list: &[usize],
    samples: usize,
    seed: u64,
) -> Result<VarianceGrowthReport, LimitError> {
    check_samples(samples)?;
    if n_list.len() < 3 || n_list.contains(&0) {
        return Err(LimitError::Invalid("need at least three positive horizons".into()));
    }
    if v.len() != f.dim() {
        return Err(LimitError::Invalid("direction has the wrong dimension".into()));
    }
    let fv = f.project(v);
    let grid = fv.grid(st.n());
    let sigma2 = directional_variance(st, &grid)?;
    let n_max = *n_list.iter().max().expect("nonempty");
    let curve = correlation_operator(st, &grid, &grid, n_max - 1)?.real();
    let mean = st.mean(&grid);
    let mut rows = Vec::with_capacity(n_list.len());
    let mut offset = 0;
    for &n in n_list {
        let exact =
            n as f64 * curve[0] + 2.0 * (1..n).map(|m| (n - m) as f64 * curve[m]).sum::<f64>();
        let sums = birkhoff_sums(st, std::slice::from_ref(&fv), &[mean], n, samples, offset, seed)?;
        offset += samples;
        let sq: Vec<f64> = sums.iter().map(|s| s[0] * s[0]).collect();
        let m = sq.iter().sum::<f64>() / samples as f64;
        let var = sq.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (samples as f64 - 1.0);
        let linear = n as f64 * sigma2;
        rows.push(VarianceGrowthRow {
            n,
            exact,
            mc_mean: m,
            mc_se: (var / samples as f64).sqrt(),
            linear,
            residual_exact: exact - linear,
            residual_mc: m - linear,
        });
    }
    let (slope, slope_se) = if rows.iter().all(|r| r.mc_se > 0.0) {
        let w: Vec<f64> = rows.iter().map(|r| r.mc_se.powi(-2)).collect();
        let sw: f64 = w.iter().sum();
        let mx = rows.iter().zip(&w).map(|(r, w)| w * r.n as f64).sum::<f64>() / sw;
        let my = rows.iter().zip(&w).map(|(r, w)| w * r.residual_mc).sum::<f64>() / sw;
        let sxx: f64 = rows.iter().zip(&w).map(|(r, w)| w * (r.n as f64 - mx).powi(2)).sum();
        let sxy: f64 =
            rows.iter().zip(&w).map(|(r, w)| w * (r.n as f64 - mx) * (r.residual_mc - my)).sum();
        (sxy / sxx, sxx.sqrt().recip())
    } else {
        // Zero spread means every sum is deterministic; fall back to an exact
        // comparison.
        let flat = rows.iter().all(|r| r.residual_mc.abs() <= 1e-12 * (1.0 + r.linear.abs()));
        (if flat { 0.0 } else { f64::NAN }, 0.0)
    };
    let max_exact_residual = rows.iter().map(|r| r.residual_exact.abs()).fold(0.0, f64::max);
    Ok(VarianceGrowthReport {
        sigma2,
        no_trend: slope.abs() <= Z99 * slope_se || slope == 0.0,
        rows,
        slope,
        slope_se,
        max_exact_residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub n: usize,
    pub samples: usize,
    pub variance: f64,
    pub ks_statistic: f64,
    pub ks_p_value: f64,
    pub ad_statistic: f64,
    pub ks_pass: bool,
    pub ad_pass: bool,
    /// `None` when the sample is too small for a verdict.
    pub verdict: Option<bool>,
    pub warning: Option<String>,
}

/// Standardized Birkhoff sums `v^T S_n / sqrt(n v^T Sigma^2 v)` from
/// independent stationary starts, tested against `N(0, 1)` with
/// Kolmogorov-Smirnov and Anderson-Darling at level [`CLT_LEVEL`].
pub fn clt_test(
    st: &Stationary<'_>,
    f: &Observable,
    v: &[f64],
    n: usize,
    samples: usize,
    seed: u64,
) -> Result<CltReport, LimitError> {
    if v.len() != f.dim() {
        return Err(LimitError::Invalid("direction has the wrong dimension".into()));
    }
    check_samples(samples)?;
    let fv = f.project(v);
    let grid = fv.grid(st.n());
    let variance = directional_variance(st, &grid)?;
    if variance < DEGENERATE_VARIANCE {
        return Err(LimitError::DegenerateDirection { variance });
    }
    clt_test_with_variance(st, &fv, variance, n, samples, seed)
}

/// [`clt_test`] with a given limit variance of the scalar observable `f_v`.
pub fn clt_test_with_variance(
    st: &Stationary<'_>,
    fv: &TrigPoly,
    variance: f64,
    n: usize,
    samples: usize,
    seed: u64,
) -> Result<CltReport, LimitError> {
    check_samples(samples)?;
    let mean = st.mean(&fv.grid(st.n()));
    let sums = birkhoff_sums(st, std::slice::from_ref(fv), &[mean], n, samples, 0, seed)?;
    let scale = 1.0 / (n as f64 * variance).sqrt();
    let z: Vec<f64> = sums.iter().map(|s| s[0] * scale).collect();
    let ks = ks_statistic(&z, std_normal_cdf);
    let p = ks_p_value(ks, samples);
    let ad = anderson_darling(&z, std_normal_cdf);
    let (ks_pass, ad_pass) = (p > CLT_LEVEL, ad < AD_CRITICAL_1PCT);
    let small = samples < MIN_CLT_SAMPLES;
    Ok(CltReport {
        n,
        samples,
        variance,
        ks_statistic: ks,
        ks_p_value: p,
        ad_statistic: ad,
        ks_pass,
        ad_pass,
        verdict: (!small).then_some(ks_pass && ad_pass),
        warning: small.then(|| {
            format!("{samples} samples is below {MIN_CLT_SAMPLES}; the tests have no power")
        }),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResidual {
    pub weight: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoboundaryReport {
    /// The truncated series `sum_m (Q^m f_v - int Q^m f_v phi)`.
    pub g: Vec<f64>,
    /// `max` over maps and grid points of `|f_v - g + g o T_omega|`.
    pub residual: f64,
    pub per_map: Vec<MapResidual>,
    /// `"atoms"` or `"sampled maps"`.
    pub coverage: String,
    pub terms: usize,
    pub converged: bool,
}

/// Solves `f_v = g - Q g` by the Neumann series of the centered `f_v`, each
/// term re-centered against `phi`, and measures how far `f_v` is from the
/// pathwise coboundary `g - g o T_omega`. Finite laws are checked on every
/// atom, continuous ones on [`COBOUNDARY_SAMPLED_MAPS`] maps drawn with
/// `seed`.
pub fn coboundary_residual(
    st: &Stationary<'_>,
    f_v: &[f64],
    m_max: usize,
    seed: u64,
) -> Result<CoboundaryReport, LimitError> {
    st.check_grid(f_v)?;
    let f = st.center(f_v);
    let mut g = f.clone();
    let mut t = f.clone();
    let mut partial = vec![sup_norm(&g)];
    let mut small = usize::from(sup_norm(&t) < COBOUNDARY_TERM_TOL);
    let mut m = 0;
    let mut converged = small >= TAIL_RUN;
    while !converged && m < m_max {
        m += 1;
        t = st.center(&st.ops.koopman(&t));
        for (a, b) in g.iter_mut().zip(&t) {
            *a += b;
        }
        partial.push(sup_norm(&g));
        small = if sup_norm(&t) < COBOUNDARY_TERM_TOL { small + 1 } else { 0 };
        converged = small >= TAIL_RUN;
    }
    if !converged && growing_tail(&partial) {
        return Err(LimitError::SeriesDiverged { m });
    }
    let n = st.n();
    let (maps, coverage): (Vec<(f64, _)>, _) = match st.ensemble.law() {
        SelectionLaw::Finite(atoms) => {
            (atoms.iter().map(|a| (a.weight, a.sample.map)).collect(), "atoms")
        }
        SelectionLaw::Family(_) => {
            let mut rng = StreamRng::new(seed, purpose::FAMILY_MAPS, 1);
            let w = 1.0 / COBOUNDARY_SAMPLED_MAPS as f64;
            let maps = (0..COBOUNDARY_SAMPLED_MAPS)
                .map(|_| (w, st.ensemble.circle_map(st.ensemble.draw(&mut rng))))
                .collect();
            (maps, "sampled maps")
        }
    };
    let mut per_map = Vec::with_capacity(maps.len());
    for (weight, map) in maps {
        let gt = Stencil::koopman(&map, n)?.apply(&g);
        let residual =
            f.iter().zip(&g).zip(&gt).map(|((a, b), c)| (a - b + c).abs()).fold(0.0, f64::max);
        per_map.push(MapResidual { weight, residual });
    }
    let residual = per_map.iter().map(|r| r.residual).fold(0.0, f64::max);
    Ok(CoboundaryReport { g, residual, per_map, coverage: coverage.into(), terms: m, converged })
}

/// Admissible tilts and observables for the multiple-correlation check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltBounds {
    /// `sup |t_j| <= epsilon`.
    pub epsilon: f64,
    /// `sup |f_j|_alpha <= h`, checked through `sup |f_j'|`.
    pub holder: f64,
}

impl Default for TiltBounds {
    fn default() -> Self {
        Self { epsilon: 0.2, holder: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiCorrReport {
    pub m: usize,
    pub k: usize,
    pub operator: CorrelationCurve,
    pub mc: CorrelationCurve,
    /// `max_{j >= n} |C_j|` of the operator curve.
    pub envelope: Vec<f64>,
    /// Fit of `log envelope` against the lag, over lags above [`ENVELOPE_FLOOR`].
    pub fit: Option<LineFit>,
    /// Fit of `log |C_n|` of the Monte Carlo curve over lags where it exceeds
    /// three standard errors.
    pub mc_fit: Option<LineFit>,
    /// `max_n |mc - operator| / se`.
    pub max_z: f64,
    pub decays: bool,
    /// Whether the Monte Carlo estimator returns exactly zero at `t = 0`.
    pub zero_at_t0: bool,
}

impl MultiCorrReport {
    pub fn to_csv(&self) -> String {
        let se = self.mc.se.as_ref().expect("mc curve has standard errors");
        let mut out = String::from("lag,operator_re,operator_im,mc_re,mc_im,mc_se,envelope\n");
        for n in 0..self.envelope.len() {
            let (o, c) = (self.operator.values[n], self.mc.values[n]);
            out.push_str(&format!(
                "{n},{},{},{},{},{},{}\n",
                o.re, o.im, c.re, c.im, se[n], self.envelope[n]
            ));
        }
        out
    }
}

fn expand<T: Clone>(xs: &[T], len: usize, what: &str) -> Result<Vec<T>, LimitError> {
    match xs.len() {
        1 => Ok(vec![xs[0].clone(); len]),
        l if l == len => Ok(xs.to_vec()),
        l => Err(LimitError::Invalid(format!("{what}: expected 1 or {len} entries, got {l}"))),
    }
}

fn unimodular(f: &TrigPoly, t: f64) -> impl Fn(u64) -> Complex64 + '_ {
    move |x| Complex64::from_polar(1.0, t * f.eval_fixed(x))
}

/// Operator curve of `E[F G_n] - E[F] E[G_n]` with
/// `F = g_0(X_0) ... g_m(X_m)` and `G_n = g_{m+1}(X_{m+1+n}) ... g_{m+k}(X_{m+k+n})`.
/// In the normalized form this is `int phi u Q^n w - int phi u int phi w`
/// with `u = g_m P^(g_{m-1} ... P^(g_0))` and `w = Q(g_{m+1} Q(... Q(g_{m+k})))`;
/// it is evaluated on the transfer side, pushing `phi u = g_m P(... P(g_0 phi))`
/// forward `n + 1` steps and then through the factors of `G_n`.
pub fn multiple_correlation_operator(
    st: &Stationary<'_>,
    g: &[Vec<Complex64>],
    m: usize,
    n_max: usize,
) -> Result<CorrelationCurve, LimitError> {
    let k = g.len() - m - 1;
    if k == 0 {
        return Err(LimitError::Invalid("need at least one factor in G_n".into()));
    }
    let mul = |a: &[Complex64], b: &[Complex64]| -> Vec<Complex64> {
        a.iter().zip(b).map(|(x, y)| x * y).collect()
    };
    // `int G_n d(law of X_{m+n})` for the weighted law `start`.
    let close = |start: &[Complex64]| -> Complex64 {
        let mut c = st.ops.annealed(start);
        for (j, gj) in g[m + 1..].iter().enumerate() {
            c = mul(gj, &c);
            if j + 1 < k {
                c = st.ops.annealed(&c);
            }
        }
        integrate(&c)
    };
    let phi: Vec<Complex64> = st.phi.values().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut a = mul(&g[0], &phi);
    for gj in &g[1..=m] {
        a = mul(gj, &st.ops.annealed(&a));
    }
    let (ef, eg) = (integrate(&a), close(&phi));
    let mut values = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        values.push(close(&a) - ef * eg);
        if n < n_max {
            a = st.ops.annealed(&a);
        }
    }
    Ok(CorrelationCurve {
        lags: (0..=n_max).collect(),
        values,
        se: None,
        estimator: Estimator::Operator,
    })
}

/// Monte Carlo curve of the same multiple correlation for `g_j = exp(i t_j f_j)`.
pub fn multiple_correlation_mc(
    st: &Stationary<'_>,
    fs: &[TrigPoly],
    ts: &[f64],
    m: usize,
    n_max: usize,
    samples: usize,
    seed: u64,
) -> Result<CorrelationCurve, LimitError> {
    check_samples(samples)?;
    let k = fs.len() - m - 1;
    let sampler = DensitySampler::new(st.phi)?;
    let walker = Walker::new(st.ensemble);
    let g: Vec<_> = fs.iter().zip(ts).map(|(f, &t)| unimodular(f, t)).collect();
    let len = m + k + n_max + 1;
    let parts = batched(samples, mc_batches(samples), |range| {
        let mut sums = CrossSums::new(n_max + 1);
        let mut xs = vec![0u64; len];
        let mut gn = vec![Complex64::default(); n_max + 1];
        for i in range {
            walk(&walker, &sampler, seed, i, len, |j, x| xs[j] = x);
            let f = (0..=m).fold(Complex64::new(1.0, 0.0), |acc, j| acc * g[j](xs[j]));
            for (n, out) in gn.iter_mut().enumerate() {
                *out =
                    (1..=k).fold(Complex64::new(1.0, 0.0), |acc, j| acc * g[m + j](xs[m + j + n]));
            }
            sums.add(f, &gn);
        }
        sums
    });
    Ok(pooled_curve(&parts))
}

/// `max_{j >= n} |c_j|`.
pub fn tail_envelope(c: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; c.len()];
    let mut run: f64 = 0.0;
    for n in (0..c.len()).rev() {
        run = run.max(c[n]);
        out[n] = run;
    }
    out
}

fn log_fit(points: impl Iterator<Item = (usize, f64)>) -> Option<LineFit> {
    let (x, y): (Vec<f64>, Vec<f64>) = points.map(|(n, v)| (n as f64, v.ln())).unzip();
    linear_fit(&x, &y)
}

/// Multiple correlations of `g_j = exp(i t_j f_j)` with `m + 1` factors in
/// `F` and `k` in `G_n`, by the operator formula and by Monte Carlo, with an
/// exponential fit to the tail envelope of the operator curve. `fs` and
/// `ts` hold either one entry (shared by every factor) or `m + k + 1`.
#[allow(clippy::too_many_arguments)]
pub fn multiple_correlation_check(
    st: &Stationary<'_>,
    fs: &[TrigPoly],
    ts: &[f64],
    m: usize,
    k: usize,
    n_max: usize,
    samples: usize,
    seed: u64,
    bounds: TiltBounds,
) -> Result<MultiCorrReport, LimitError> {
    if k == 0 {
        return Err(LimitError::Invalid("k must be at least 1".into()));
    }
    let factors = m + k + 1;
    let fs = expand(fs, factors, "observables")?;
    let ts = expand(ts, factors, "tilts")?;
    if let Some(t) = ts.iter().find(|t| t.abs() > bounds.epsilon) {
        return Err(LimitError::Invalid(format!("tilt {t} exceeds epsilon = {}", bounds.epsilon)));
    }
    if let Some(h) = fs.iter().map(TrigPoly::lipschitz_bound).find(|&h| h > bounds.holder) {
        return Err(LimitError::Invalid(format!(
            "observable Holder bound {h} exceeds H = {}",
            bounds.holder
        )));
    }
    let n = st.n();
    let grids: Vec<Vec<Complex64>> = fs
        .iter()
        .zip(&ts)
        .map(|(f, &t)| f.grid(n).into_iter().map(|v| Complex64::from_polar(1.0, t * v)).collect())
        .collect();
    let operator = multiple_correlation_operator(st, &grids, m, n_max)?;
    let mc = multiple_correlation_mc(st, &fs, &ts, m, n_max, samples, seed)?;
    let zeros = vec![0.0; factors];
    let zero_mc = multiple_correlation_mc(st, &fs, &zeros, m, n_max, samples, seed)?;
    let zero_at_t0 = zero_mc.values.iter().all(|c| c.re == 0.0 && c.im == 0.0);
    let envelope = tail_envelope(&operator.moduli());
    let fit = log_fit(envelope.iter().copied().enumerate().filter(|&(_, v)| v > ENVELOPE_FLOOR));
    let se = mc.se.as_ref().expect("mc curve has standard errors");
    let mc_fit = log_fit(
        mc.moduli().into_iter().enumerate().filter(|&(i, v)| se[i] > 0.0 && v > 3.0 * se[i]),
    );
    let max_z = operator
        .values
        .iter()
        .zip(&mc.values)
        .zip(se)
        .map(|((o, c), &s)| {
            let d = (o - c).norm();
            if s > 0.0 {
                d / s
            } else if d == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max);
    let decays = fit.is_some_and(|f| f.slope < 0.0 && f.r2 > ENVELOPE_MIN_R2);
    Ok(MultiCorrReport { m, k, operator, mc, envelope, fit, mc_fit, max_z, decays, zero_at_t0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::sample_fn;
    use crate::ensemble::{doubling, mix_a};
    use crate::transfer::compute_stationary;
    use std::f64::consts::TAU;

    struct Setup {
        e: Ensemble,
        ops: OperatorSet,
        phi: DensityGrid,
    }

    impl Setup {
        fn new(e: Ensemble, n: usize) -> Self {
            let ops = OperatorSet::new(&e, n).unwrap();
            let phi = compute_stationary(&e, &ops, 1e-11, 5000).unwrap().phi;
            Self { e, ops, phi }
        }

        fn st(&self) -> Stationary<'_> {
            Stationary::new(&self.e, &self.ops, &self.phi).unwrap()
        }
    }

    fn cos_k(n: usize, k: f64) -> Vec<f64> {
        sample_fn(n, |x| (TAU * k * x).cos())
    }

    #[test]
    fn doubling_correlations_are_fourier_exact() {
        let s = Setup::new(doubling(), 4096);
        let f = cos_k(4096, 1.0);
        let c = correlation_operator(&s.st(), &f, &f, 6).unwrap().real();
        assert!((c[0] - 0.5).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12), "{c:?}");
        let f2: Vec<f64> = f.iter().zip(cos_k(4096, 2.0)).map(|(a, b)| a + b).collect();
        let c = correlation_operator(&s.st(), &f2, &f2, 6).unwrap().real();
        assert!((c[0] - 1.0).abs() < 1e-12 && (c[1] - 0.5).abs() < 1e-12);
        assert!(c[2..].iter().all(|v| v.abs() < 1e-12));
        let one = vec![1.0; 4096];
        let c = correlation_operator(&s.st(), &f2, &one, 4).unwrap().real();
        assert!(c.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn mc_correlations_match_operator() {
        let s = Setup::new(mix_a(), 1024);
        let f = TrigPoly::cos_mode(1);
        let fg = f.grid(1024);
        let op = correlation_operator(&s.st(), &fg, &fg, 8).unwrap();
        let mc = correlation_mc(&s.st(), &|x| f.eval_fixed(x), &|x| f.eval_fixed(x), 8, 100_000, 3)
            .unwrap();
        let se = mc.se.as_ref().unwrap();
        for n in 0..=8 {
            assert!((op.values[n] - mc.values[n]).norm() < 4.0 * se[n], "lag {n}");
        }
        let c = correlation_mc(&s.st(), &|x| f.eval_fixed(x), &|_| 1.0, 4, 1000, 3).unwrap();
        assert!(c.values.iter().all(|v| v.norm() < 1e-15));
    }

    #[test]
    fn covariance_series_examples() {
        let s = Setup::new(doubling(), 4096);
        let c1 = cos_k(4096, 1.0);
        let est =
            covariance_series(&s.st(), std::slice::from_ref(&c1), DEFAULT_TAIL_TOL, 1000).unwrap();
        assert!((est.sigma2[0][0] - 0.5).abs() < 1e-8 && est.converged);
        let cob: Vec<f64> = c1.iter().zip(cos_k(4096, 2.0)).map(|(a, b)| a - b).collect();
        let est = covariance_series(&s.st(), &[cob], DEFAULT_TAIL_TOL, 1000).unwrap();
        assert!(est.sigma2[0][0].abs() < 1e-8);
        let est =
            covariance_series(&s.st(), &vec![vec![0.0; 4096]; 2], DEFAULT_TAIL_TOL, 10).unwrap();
        assert!(est.sigma2.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn covariance_is_symmetric_and_scales_quadratically() {
        let s = Setup::new(mix_a(), 1024);
        let a = TrigPoly::cos_mode(1).plus(&TrigPoly::sin_mode(2).scaled(0.3));
        let b = TrigPoly::sin_mode(1);
        let grids = vec![a.grid(1024), b.grid(1024)];
        let est = covariance_series(&s.st(), &grids, DEFAULT_TAIL_TOL, 1000).unwrap();
        assert!(est.is_symmetric() && est.min_eigenvalue >= -1e-6);
        let scaled: Vec<Vec<f64>> =
            grids.iter().map(|g| g.iter().map(|v| 3.0 * v).collect()).collect();
        let est3 = covariance_series(&s.st(), &scaled, DEFAULT_TAIL_TOL, 1000).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = 9.0 * est.sigma2[i][j];
                assert!((est3.sigma2[i][j] - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn series_without_decay_is_rejected() {
        // A rotation never mixes: the terms of a rotation-invariant mode do
        // not decay and do not decrease.
        let e = Ensemble::deterministic(crate::maps::CircleMap::linear(1, 0.25).unwrap()).unwrap();
        let ops = OperatorSet::new(&e, 64).unwrap();
        let phi = DensityGrid::uniform(64).unwrap();
        let st = Stationary::new(&e, &ops, &phi).unwrap();
        let err = covariance_series(&st, &[cos_k(64, 1.0)], DEFAULT_TAIL_TOL, 40).unwrap_err();
        assert!(matches!(err, LimitError::TailNotConverged { .. }));
    }

    #[test]
    fn batch_means_examples() {
        let s = Setup::new(doubling(), 1024);
        let f = Observable::scalar(TrigPoly::cos_mode(1));
        let est = covariance_batch_means(&s.st(), &f, 2048, 4096, 11).unwrap();
        let se = est.se.as_ref().unwrap()[0][0];
        assert!((est.sigma2[0][0] - 0.5).abs() < 4.0 * se, "{} +- {se}", est.sigma2[0][0]);
        // For f = g - g o T with g = cos 2 pi x, S_n = g(X_0) - g(X_n) and
        // E S_n^2 / n = 1 / n exactly.
        let cob = Observable::scalar(TrigPoly::cos_mode(1).minus(&TrigPoly::cos_mode(2)));
        let est = covariance_batch_means(&s.st(), &cob, 2048, 4096, 12).unwrap();
        let se = est.se.as_ref().unwrap()[0][0];
        assert!((est.sigma2[0][0] - 1.0 / 2048.0).abs() < 4.0 * se);
        let zero = Observable::scalar(TrigPoly::zero());
        let est = covariance_batch_means(&s.st(), &zero, 64, 100, 1).unwrap();
        assert_eq!(est.sigma2[0][0], 0.0);
    }

    #[test]
    fn finite_horizon_covariance_examples() {
        let s = Setup::new(doubling(), 1024);
        let c1 = cos_k(1024, 1.0);
        let cob: Vec<f64> = c1.iter().zip(cos_k(1024, 2.0)).map(|(a, b)| a - b).collect();
        let exact = finite_horizon_covariance(&s.st(), &[c1.clone(), cob], 64).unwrap();
        assert!((exact[0][0] - 0.5).abs() < 1e-12);
        // S_n = g(X_0) - g(X_n) with g = cos 2 pi x: E S_n^2 / n = 1 / n.
        assert!((exact[1][1] - 1.0 / 64.0).abs() < 1e-8, "{}", exact[1][1]);
        assert_eq!(exact[0][1], exact[1][0]);
    }

    #[test]
    fn variance_growth_examples() {
        let s = Setup::new(doubling(), 1024);
        let f = Observable::scalar(TrigPoly::cos_mode(1));
        let rep = variance_growth_check(&s.st(), &f, &[1.0], &[16, 64, 256], 4000, 5).unwrap();
        assert!(rep.max_exact_residual < 1e-9 && rep.no_trend);
        let cob = Observable::scalar(TrigPoly::cos_mode(1).minus(&TrigPoly::cos_mode(2)));
        let rep = variance_growth_check(&s.st(), &cob, &[1.0], &[16, 64, 256], 4000, 5).unwrap();
        // E S_n^2 = |g - g o T^n|^2 = 1 for n >= 1, up to grid interpolation
        // error in the mode-2 correlations at N = 1024.
        assert!(
            rep.rows.iter().all(|r| (r.exact - 1.0).abs() < 1e-6 && r.mc_mean <= 4.0),
            "{:?}",
            rep.rows
        );
        assert!(rep.no_trend);
        let zero = Observable::scalar(TrigPoly::zero());
        let rep = variance_growth_check(&s.st(), &zero, &[1.0], &[4, 8, 16], 10, 5).unwrap();
        assert!(rep.no_trend && rep.max_exact_residual == 0.0);
    }

    #[test]
    fn clt_examples() {
        let s = Setup::new(doubling(), 1024);
        let f = Observable::scalar(TrigPoly::cos_mode(1));
        let rep = clt_test(&s.st(), &f, &[1.0], 1024, 2000, 7).unwrap();
        assert!(rep.verdict.is_some() && rep.ks_p_value > 0.01);
        let cob = Observable::scalar(TrigPoly::cos_mode(1).minus(&TrigPoly::cos_mode(2)));
        assert!(matches!(
            clt_test(&s.st(), &cob, &[1.0], 64, 1000, 7),
            Err(LimitError::DegenerateDirection { .. })
        ));
        let rep = clt_test(&s.st(), &f, &[1.0], 64, 10, 7).unwrap();
        assert!(rep.verdict.is_none() && rep.warning.is_some());
    }

    #[test]
    fn coboundary_examples() {
        let s = Setup::new(doubling(), 4096);
        let c1 = cos_k(4096, 1.0);
        let cob: Vec<f64> = c1.iter().zip(cos_k(4096, 2.0)).map(|(a, b)| a - b).collect();
        let rep = coboundary_residual(&s.st(), &cob, 200, 1).unwrap();
        assert!(rep.residual < 1e-6 && rep.converged);
        let err = rep.g.iter().zip(&c1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9);
        let rep = coboundary_residual(&s.st(), &c1, 200, 1).unwrap();
        assert!(rep.residual >= 0.5);
        let rep = coboundary_residual(&s.st(), &vec![0.0; 4096], 200, 1).unwrap();
        assert!(rep.residual == 0.0 && rep.g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn multiple_correlation_examples() {
        let s = Setup::new(mix_a(), 1024);
        let f = TrigPoly::cos_mode(1);
        let rep = multiple_correlation_check(
            &s.st(),
            std::slice::from_ref(&f),
            &[0.0],
            1,
            1,
            5,
            1000,
            3,
            TiltBounds::default(),
        )
        .unwrap();
        assert!(rep.zero_at_t0 && rep.mc.values.iter().all(|c| c.norm() == 0.0));
        assert!(matches!(
            multiple_correlation_check(
                &s.st(),
                std::slice::from_ref(&f),
                &[0.5],
                1,
                1,
                5,
                100,
                3,
                TiltBounds::default()
            ),
            Err(LimitError::Invalid(_))
        ));
        // m = 0, k = 1: a pair correlation of e^{i t f}, expanded into real
        // and imaginary parts.
        let t = 0.2;
        let op = multiple_correlation_operator(
            &s.st(),
            &[
                f.grid(1024).into_iter().map(|v| Complex64::from_polar(1.0, t * v)).collect(),
                f.grid(1024).into_iter().map(|v| Complex64::from_polar(1.0, t * v)).collect(),
            ],
            0,
            4,
        )
        .unwrap();
        let re: Vec<f64> = f.grid(1024).iter().map(|v| (t * v).cos()).collect();
        let im: Vec<f64> = f.grid(1024).iter().map(|v| (t * v).sin()).collect();
        let pair = |a: &[f64], b: &[f64]| correlation_operator(&s.st(), a, b, 5).unwrap().real();
        let (rr, ii, ri, ir) = (pair(&re, &re), pair(&im, &im), pair(&re, &im), pair(&im, &re));
        for n in 0..=4 {
            let want = Complex64::new(rr[n + 1] - ii[n + 1], ri[n + 1] + ir[n + 1]);
            assert!((op.values[n] - want).norm() < 1e-10, "lag {n}: {} vs {want}", op.values[n]);
        }
    }

    #[test]
    fn tail_envelope_is_monotone() {
        assert_eq!(tail_envelope(&[1.0, 0.1, 0.5, 0.0]), vec![1.0, 0.5, 0.5, 0.0]);
    }
}
