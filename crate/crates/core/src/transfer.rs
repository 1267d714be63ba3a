//! Transfer, Koopman and normalized operators on grid functions.
//!
//! The transfer operator of a map is `L g(x) = sum_{T y = x} g(y) / |T'(y)|`.
//! On a grid each output node is a fixed linear combination of input nodes
//! (preimages interpolated by the Catmull-Rom stencil), so every operator is
//! precomputed once as a sparse [`Stencil`] and then applied to real or
//! complex grid functions.

use std::borrow::Cow;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coupling::{mean_r_sup, sr_recursion};
use crate::density::{
    check_grid_size, grid_points, holder_estimate, integrate, interpolate, l1_distance, stencil,
    DensityError, DensityGrid, GridValue,
};
use crate::ensemble::{Ensemble, EnsembleError, MapId, SelectionLaw};
use crate::maps::{CircleMap, MapError, MapSample};
use crate::observable::TrigPoly;

/// Residual tolerance of the branch solver, in lift units.
pub const INVERSION_TOL: f64 = 1e-13;
/// Newton-plus-bisection step budget of the branch solver.
pub const INVERSION_MAX_STEPS: usize = 100;
/// Largest clamped negative mass tolerated in one push step.
pub const MAX_CLAMPED_MASS: f64 = 1e-6;
/// Allowed renormalization drift per push step.
pub const DRIFT_PER_STEP: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransferError {
    #[error("branch solve for lift value {target} did not converge in {steps} steps")]
    InversionFailure { target: f64, steps: usize },
    #[error("density is not strictly positive (min = {min:e})")]
    NonpositiveDensity { min: f64 },
    #[error("stationary solve did not converge in {max_iter} iterations (residual {residual:e})")]
    NoConvergence { max_iter: usize, residual: f64 },
    #[error("inf phi = {inf_phi} is below the moment lower bound {bound}")]
    LowerBoundViolated { inf_phi: f64, bound: f64 },
    #[error("points {x} and {y} do not lie in a common arc of length 1/2")]
    BranchMismatch { x: f64, y: f64 },
    #[error("step {step}: clamped negative mass {mass:e} exceeds {MAX_CLAMPED_MASS:e}")]
    ClampedMass { step: usize, mass: f64 },
    #[error("step {step}: cumulative renormalization drift {drift:e} exceeds {limit:e}")]
    MassDrift { step: usize, drift: f64, limit: f64 },
    #[error("sequence has {len} maps, {n} requested")]
    SequenceTooShort { len: usize, n: usize },
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

/// Inverse branches of a circle map, solved on the lift.
#[derive(Debug, Clone, Copy)]
pub struct BranchInverter {
    map: CircleMap,
    t0: f64,
    d: f64,
}

impl BranchInverter {
    pub fn new(map: CircleMap) -> Self {
        Self { map, t0: map.lift(0.0), d: map.degree() as f64 }
    }

    pub fn map(&self) -> &CircleMap {
        &self.map
    }

    /// Solves `T(y) = r` for `y` in `[0, 1]`, given `T(0) <= r <= T(1)`.
    fn solve_unit(&self, r: f64) -> Result<f64, TransferError> {
        if let Some(y) = self.map.linear_lift_inverse(r) {
            return Ok(y);
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut y = ((r - self.t0) / self.d).clamp(0.0, 1.0);
        for _ in 0..INVERSION_MAX_STEPS {
            let (v, dv) = self.map.lift_and_deriv(y);
            let f = v - r;
            if f.abs() <= INVERSION_TOL {
                return Ok(y);
            }
            if f < 0.0 {
                lo = y;
            } else {
                hi = y;
            }
            if hi - lo <= 2.0 * f64::EPSILON {
                return Ok(0.5 * (lo + hi));
            }
            let newton = y - f / dv;
            y = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        }
        Err(TransferError::InversionFailure { target: r, steps: INVERSION_MAX_STEPS })
    }

    /// Inverse of the (strictly increasing) lift on the whole real line.
    pub fn lift_inverse(&self, x: f64) -> Result<f64, TransferError> {
        let j = ((x - self.t0) / self.d).floor();
        let r = x - self.d * j;
        Ok(j + self.solve_unit(r)?)
    }

    /// The `|degree|` preimages of `x` in `[0, 1)`, with `T'` at each.
    pub fn preimages(&self, x: f64) -> Result<Vec<(f64, f64)>, TransferError> {
        let x = x.rem_euclid(1.0);
        let m0 = (self.t0 - x).ceil();
        (0..self.map.degree())
            .map(|i| {
                let y = self.solve_unit(x + m0 + i as f64)?;
                let y = if y >= 1.0 { y - 1.0 } else { y };
                Ok((y, self.map.deriv(y)))
            })
            .collect()
    }
}

/// A sparse linear map between grid functions of the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    n: usize,
    offsets: Vec<usize>,
    index: Vec<u32>,
    weight: Vec<f64>,
}

impl Stencil {
    fn build(
        n: usize,
        mut row: impl FnMut(f64, &mut Vec<(f64, f64)>) -> Result<(), TransferError>,
    ) -> Result<Self, TransferError> {
        let mut offsets = Vec::with_capacity(n + 1);
        let mut index = Vec::new();
        let mut weight = Vec::new();
        let mut points = Vec::new();
        offsets.push(0);
        let mask = n - 1;
        for x in grid_points(n) {
            points.clear();
            row(x, &mut points)?;
            for &(y, scale) in &points {
                let (i, w) = stencil(y, n);
                for (k, wk) in w.iter().enumerate() {
                    index.push(((i + n + k - 1) & mask) as u32);
                    weight.push(scale * wk);
                }
            }
            offsets.push(index.len());
        }
        Ok(Self { n, offsets, index, weight })
    }

    /// Transfer operator `L` of `map`.
    pub fn transfer(map: &CircleMap, n: usize) -> Result<Self, TransferError> {
        check_grid_size(n)?;
        let inv = BranchInverter::new(*map);
        Self::build(n, |x, out| {
            for (y, dt) in inv.preimages(x)? {
                out.push((y, 1.0 / dt.abs()));
            }
            Ok(())
        })
    }

    /// Composition operator `f -> f o T`.
    pub fn koopman(map: &CircleMap, n: usize) -> Result<Self, TransferError> {
        check_grid_size(n)?;
        Self::build(n, |x, out| {
            out.push((map.eval(x), 1.0));
            Ok(())
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn apply<T: GridValue>(&self, g: &[T]) -> Vec<T> {
        assert_eq!(g.len(), self.n, "grid size mismatch");
        (0..self.n)
            .map(|j| {
                let (a, b) = (self.offsets[j], self.offsets[j + 1]);
                self.index[a..b]
                    .iter()
                    .zip(&self.weight[a..b])
                    .fold(T::default(), |acc, (&i, &w)| acc + g[i as usize] * w)
            })
            .collect()
    }

    /// `out += c * (self g)`.
    fn apply_add<T: GridValue>(&self, g: &[T], c: f64, out: &mut [T]) {
        for (j, o) in out.iter_mut().enumerate() {
            let (a, b) = (self.offsets[j], self.offsets[j + 1]);
            let s = self.index[a..b]
                .iter()
                .zip(&self.weight[a..b])
                .fold(T::default(), |acc, (&i, &w)| acc + g[i as usize] * w);
            *o = *o + s * c;
        }
    }
}

/// Transfer and Koopman stencils of one atom (or quadrature node) of `eta`.
#[derive(Debug, Clone)]
pub struct AtomOperators {
    pub weight: f64,
    pub sample: MapSample,
    pub transfer: Stencil,
    pub koopman: Stencil,
}

/// Precomputed grid operators of an ensemble.
#[derive(Debug, Clone)]
pub struct OperatorSet {
    n: usize,
    atoms: Vec<AtomOperators>,
}

impl OperatorSet {
    pub fn new(e: &Ensemble, n: usize) -> Result<Self, TransferError> {
        check_grid_size(n)?;
        let atoms = e
            .operator_atoms()?
            .iter()
            .map(|a| {
                Ok(AtomOperators {
                    weight: a.weight,
                    sample: a.sample,
                    transfer: Stencil::transfer(&a.sample.map, n)?,
                    koopman: Stencil::koopman(&a.sample.map, n)?,
                })
            })
            .collect::<Result<Vec<_>, TransferError>>()?;
        Ok(Self { n, atoms })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn atoms(&self) -> &[AtomOperators] {
        &self.atoms
    }

    /// Annealed transfer operator `P = int L_omega d eta`.
    pub fn annealed<T: GridValue>(&self, g: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); self.n];
        for a in &self.atoms {
            a.transfer.apply_add(g, a.weight, &mut out);
        }
        out
    }

    /// Markov operator `Q f = int f o T_omega d eta`.
    pub fn koopman<T: GridValue>(&self, f: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); self.n];
        for a in &self.atoms {
            a.koopman.apply_add(f, a.weight, &mut out);
        }
        out
    }

    /// Transfer stencil of one sampled map.
    pub fn transfer_of(&self, e: &Ensemble, id: MapId) -> Result<Cow<'_, Stencil>, TransferError> {
        match (e.law(), id) {
            (SelectionLaw::Finite(_), MapId::Atom(i)) => Ok(Cow::Borrowed(&self.atoms[i].transfer)),
            _ => Ok(Cow::Owned(Stencil::transfer(&e.circle_map(id), self.n)?)),
        }
    }

    pub fn koopman_of(&self, e: &Ensemble, id: MapId) -> Result<Cow<'_, Stencil>, TransferError> {
        match (e.law(), id) {
            (SelectionLaw::Finite(_), MapId::Atom(i)) => Ok(Cow::Borrowed(&self.atoms[i].koopman)),
            _ => Ok(Cow::Owned(Stencil::koopman(&e.circle_map(id), self.n)?)),
        }
    }
}

/// `L_omega psi` for a single map.
pub fn transfer_apply(map: &MapSample, psi: &[f64]) -> Result<Vec<f64>, TransferError> {
    Ok(Stencil::transfer(&map.map, psi.len())?.apply(psi))
}

pub fn annealed_transfer_apply<T: GridValue>(ops: &OperatorSet, psi: &[T]) -> Vec<T> {
    ops.annealed(psi)
}

pub fn koopman_apply<T: GridValue>(ops: &OperatorSet, f: &[T]) -> Vec<T> {
    ops.koopman(f)
}

fn require_positive(phi: &DensityGrid) -> Result<(), TransferError> {
    let min = phi.min();
    if min > 0.0 {
        Ok(())
    } else {
        Err(TransferError::NonpositiveDensity { min })
    }
}

/// `P^ g = phi^{-1} P(phi g)`.
pub fn normalized_transfer_apply<T: GridValue>(
    ops: &OperatorSet,
    phi: &DensityGrid,
    g: &[T],
) -> Result<Vec<T>, TransferError> {
    require_positive(phi)?;
    let weighted: Vec<T> = g.iter().zip(phi.values()).map(|(&v, &p)| v * p).collect();
    Ok(ops.annealed(&weighted).into_iter().zip(phi.values()).map(|(v, &p)| v * (1.0 / p)).collect())
}

/// Tilted normalized operator `P^_g h = P^(g h)`.
pub fn tilted_normalized_apply(
    ops: &OperatorSet,
    phi: &DensityGrid,
    g: &[Complex64],
    h: &[Complex64],
) -> Result<Vec<Complex64>, TransferError> {
    let gh: Vec<Complex64> = g.iter().zip(h).map(|(a, b)| a * b).collect();
    normalized_transfer_apply(ops, phi, &gh)
}

/// Tilted Markov operator `Q_g h = Q(g h)`.
pub fn tilted_koopman_apply(ops: &OperatorSet, g: &[Complex64], h: &[Complex64]) -> Vec<Complex64> {
    let gh: Vec<Complex64> = g.iter().zip(h).map(|(a, b)| a * b).collect();
    ops.koopman(&gh)
}

/// Pushforwards along a sequence, with the per-step bookkeeping.
#[derive(Debug, Clone)]
pub struct QuenchedPush {
    /// `steps[k]` is the density after `k` maps; `steps[0]` is the input.
    pub steps: Vec<DensityGrid>,
    /// `|mass - 1|` before each renormalization.
    pub drift: Vec<f64>,
    /// Negative mass clamped to zero at each step.
    pub clamped: Vec<f64>,
}

impl QuenchedPush {
    pub fn last(&self) -> &DensityGrid {
        self.steps.last().expect("at least the initial density")
    }

    pub fn total_drift(&self) -> f64 {
        self.drift.iter().sum()
    }
}

/// Renormalized, clamped transfer step. Returns `(density, drift, clamped)`.
fn push_step(
    stencil: &Stencil,
    psi: &DensityGrid,
) -> Result<(DensityGrid, f64, f64), TransferError> {
    let before = psi.mass();
    let mut out = stencil.apply(psi.values());
    let mut clamped = 0.0;
    for v in out.iter_mut() {
        if *v < 0.0 {
            clamped -= *v;
            *v = 0.0;
        }
    }
    clamped /= out.len() as f64;
    let after = integrate(&out);
    let drift = (after - before).abs();
    let grid = DensityGrid::new(out)?;
    let grid = if after > 0.0 { grid.normalized()? } else { grid };
    Ok((grid, drift, clamped))
}

/// `L_{omega_n} ... L_{omega_1} psi` together with every intermediate step.
pub fn quenched_push_steps(
    ops: &OperatorSet,
    e: &Ensemble,
    omega: &[MapId],
    psi: &DensityGrid,
    n: usize,
) -> Result<QuenchedPush, TransferError> {
    if n > omega.len() {
        return Err(TransferError::SequenceTooShort { len: omega.len(), n });
    }
    if psi.n_points() != ops.n() {
        return Err(DensityError::GridMismatch(psi.n_points(), ops.n()).into());
    }
    let mut steps = Vec::with_capacity(n + 1);
    let mut drift = Vec::with_capacity(n);
    let mut clamped = Vec::with_capacity(n);
    steps.push(psi.clone());
    let mut total = 0.0;
    for (k, &id) in omega[..n].iter().enumerate() {
        let stencil = ops.transfer_of(e, id)?;
        let (next, d, c) = push_step(&stencil, steps.last().expect("nonempty"))?;
        if c > MAX_CLAMPED_MASS {
            return Err(TransferError::ClampedMass { step: k + 1, mass: c });
        }
        total += d;
        let limit = DRIFT_PER_STEP * (k + 1) as f64;
        if total > limit {
            return Err(TransferError::MassDrift { step: k + 1, drift: total, limit });
        }
        steps.push(next);
        drift.push(d);
        clamped.push(c);
    }
    Ok(QuenchedPush { steps, drift, clamped })
}

pub fn quenched_push(
    ops: &OperatorSet,
    e: &Ensemble,
    omega: &[MapId],
    psi: &DensityGrid,
    n: usize,
) -> Result<DensityGrid, TransferError> {
    let mut record = quenched_push_steps(ops, e, omega, psi, n)?;
    Ok(record.steps.pop().expect("nonempty"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StationaryMethod {
    Power,
    Cesaro,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationaryResult {
    /// The iterate with the smaller residual.
    pub phi: DensityGrid,
    pub method: StationaryMethod,
    pub residual: f64,
    pub iterations: usize,
    pub power_residual: f64,
    pub cesaro_residual: f64,
    pub cesaro: DensityGrid,
    pub inf_phi: f64,
    pub lip_phi: f64,
    /// `exp(-sup_n E[R_n])`, the lower bound on `inf phi` from the moments.
    pub moment_lower_bound: f64,
}

/// Slack allowed between `inf phi` and the moment lower bound.
pub const LOWER_BOUND_GRID_TOL: f64 = 1e-3;

fn l1_values(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Stationary density by power iteration of `P` from `1`, with the Cesaro
/// averages of the same iterates carried along.
pub fn compute_stationary(
    e: &Ensemble,
    ops: &OperatorSet,
    tol: f64,
    max_iter: usize,
) -> Result<StationaryResult, TransferError> {
    let n = ops.n();
    let mut current = vec![1.0; n];
    let mut sum = vec![0.0; n];
    let mut iterations = 0;
    while iterations < max_iter {
        for (s, v) in sum.iter_mut().zip(&current) {
            *s += v;
        }
        let mut next = ops.annealed(&current);
        let mass = integrate(&next);
        next.iter_mut().for_each(|v| *v /= mass);
        let step = l1_values(&next, &current);
        current = next;
        iterations += 1;
        if step < tol {
            break;
        }
    }
    let cesaro: Vec<f64> = sum.iter().map(|s| s / iterations as f64).collect();
    let cesaro_residual = l1_values(&ops.annealed(&cesaro), &cesaro);
    // Residual of the returned power iterate itself.
    let power_residual = l1_values(&ops.annealed(&current), &current);
    let (phi, method, residual) = if power_residual <= cesaro_residual {
        (current, StationaryMethod::Power, power_residual)
    } else {
        (cesaro.clone(), StationaryMethod::Cesaro, cesaro_residual)
    };
    if !(residual <= tol) {
        return Err(TransferError::NoConvergence { max_iter, residual });
    }
    let phi = DensityGrid::new(phi.into_iter().map(|v| v.max(0.0)).collect())?.normalized()?;
    let cesaro = DensityGrid::new(cesaro.into_iter().map(|v| v.max(0.0)).collect())?;
    let inf_phi = phi.min();
    let lip_phi = holder_estimate(phi.values(), 1.0);
    let moment_lower_bound = (-mean_r_sup(e.moments())).exp();
    if inf_phi < moment_lower_bound - LOWER_BOUND_GRID_TOL {
        return Err(TransferError::LowerBoundViolated { inf_phi, bound: moment_lower_bound });
    }
    Ok(StationaryResult {
        phi,
        method,
        residual,
        iterations,
        power_residual,
        cesaro_residual,
        cesaro,
        inf_phi,
        lip_phi,
        moment_lower_bound,
    })
}

/// One tilt `g_k = exp(i t_k f_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tilt {
    pub t: f64,
    pub f: TrigPoly,
}

impl Tilt {
    pub fn grid(&self, n: usize) -> Vec<Complex64> {
        grid_points(n).map(|x| Complex64::from_polar(1.0, self.t * self.f.eval(x))).collect()
    }
}

/// Both sides of the tilted composition identity
/// `L_{n, g_{n-1}} ... L_{1, g_0} h = L_n ... L_1 (e^{V_n} h)`.
#[derive(Debug, Clone)]
pub struct TiltedPush {
    /// Iterated tilted grid operators.
    pub left: Vec<Complex64>,
    /// Exact sum over the preimages of the composition, with `V_n` evaluated
    /// along each preimage chain; only `h` is interpolated.
    pub right: Vec<Complex64>,
    pub max_abs_diff: f64,
}

/// Tilted quenched pushforward of `h`, evaluated in both orders.
pub fn tilted_quenched_push(
    ops: &OperatorSet,
    e: &Ensemble,
    omega: &[MapId],
    tilts: &[Tilt],
    h: &[f64],
    n: usize,
) -> Result<TiltedPush, TransferError> {
    if n > omega.len() || n > tilts.len() {
        return Err(TransferError::SequenceTooShort { len: omega.len().min(tilts.len()), n });
    }
    let size = h.len();
    if size != ops.n() {
        return Err(DensityError::GridMismatch(size, ops.n()).into());
    }
    let mut left: Vec<Complex64> = h.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    for k in 0..n {
        let g = tilts[k].grid(size);
        left.iter_mut().zip(&g).for_each(|(v, w)| *v *= w);
        left = ops.transfer_of(e, omega[k])?.apply(&left);
    }

    let inverters: Vec<BranchInverter> =
        omega[..n].iter().map(|&id| BranchInverter::new(e.circle_map(id))).collect();
    let mut right = Vec::with_capacity(size);
    for x in grid_points(size) {
        let mut acc = Complex64::new(0.0, 0.0);
        chain_sum(&inverters, tilts, h, n, x, 1.0, 0.0, &mut acc)?;
        right.push(acc);
    }
    let max_abs_diff = left.iter().zip(&right).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    Ok(TiltedPush { left, right, max_abs_diff })
}

/// Depth-first sum over preimage chains `y_0 -> ... -> y_k = x`.
#[allow(clippy::too_many_arguments)]
fn chain_sum(
    inverters: &[BranchInverter],
    tilts: &[Tilt],
    h: &[f64],
    k: usize,
    y: f64,
    weight: f64,
    phase: f64,
    acc: &mut Complex64,
) -> Result<(), TransferError> {
    if k == 0 {
        *acc += Complex64::from_polar(weight * interpolate(h, y), phase);
        return Ok(());
    }
    for (z, dt) in inverters[k - 1].preimages(y)? {
        let tilt = &tilts[k - 1];
        chain_sum(
            inverters,
            tilts,
            h,
            k - 1,
            z,
            weight / dt.abs(),
            phase + tilt.t * tilt.f.eval(z),
            acc,
        )?;
    }
    Ok(())
}

/// Worst case of the distortion bound over a set of point pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistortionReport {
    pub n: usize,
    pub r_n: f64,
    pub pairs: usize,
    pub branches_checked: usize,
    /// `max |log ratio| / (R_n d(x, y))`, 0 when every ratio is exactly 1.
    pub max_normalized_log_ratio: f64,
    pub max_abs_log_ratio: f64,
    pub holds: bool,
}

fn circle_gap(x: f64, y: f64) -> f64 {
    let d = (x - y).abs().rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Checks `e^{-R_n d} <= (T^n)'(v_i y) / (T^n)'(v_i x) <= e^{R_n d}` for
/// every inverse branch `v_i` of the composition and every pair.
pub fn verify_distortion(
    e: &Ensemble,
    omega: &[MapId],
    n: usize,
    pairs: &[(f64, f64)],
) -> Result<DistortionReport, TransferError> {
    if n > omega.len() {
        return Err(TransferError::SequenceTooShort { len: omega.len(), n });
    }
    let samples = omega[..n].iter().map(|&id| e.map_sample(id)).collect::<Result<Vec<_>, _>>()?;
    let lambdas: Vec<f64> = samples.iter().map(|s| s.lambda).collect();
    let deltas: Vec<f64> = samples.iter().map(|s| s.delta).collect();
    let r_n = *sr_recursion(&lambdas, &deltas).1.last().expect("R_0");
    let inverters: Vec<BranchInverter> =
        samples.iter().map(|s| BranchInverter::new(s.map)).collect();
    let total_degree: i64 = samples.iter().map(|s| s.degree()).product();

    let mut max_norm: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut branches = 0;
    for &(x, y) in pairs {
        // Lift representatives with |x - y| <= 1/2.
        let x = x.rem_euclid(1.0);
        let mut y = y.rem_euclid(1.0);
        if y - x > 0.5 {
            y -= 1.0;
        } else if x - y > 0.5 {
            y += 1.0;
        }
        if (y - x).abs() > 0.5 + 1e-15 {
            return Err(TransferError::BranchMismatch { x, y });
        }
        let dist = circle_gap(x, y);
        for m in 0..total_degree {
            let mut log_ratio = 0.0;
            let (mut a, mut b) = (x + m as f64, y + m as f64);
            for inv in inverters.iter().rev() {
                a = inv.lift_inverse(a)?;
                b = inv.lift_inverse(b)?;
                log_ratio += (inv.map().deriv(b) / inv.map().deriv(a)).ln();
            }
            branches += 1;
            max_abs = max_abs.max(log_ratio.abs());
            if log_ratio != 0.0 {
                max_norm = max_norm.max(log_ratio.abs() / (r_n * dist));
            }
        }
    }
    Ok(DistortionReport {
        n,
        r_n,
        pairs: pairs.len(),
        branches_checked: branches,
        max_normalized_log_ratio: max_norm,
        max_abs_log_ratio: max_abs,
        holds: max_norm <= 1.0 + 1e-6,
    })
}

/// Absolute tolerance of the discrete Holder propagation check.
pub const HOLDER_PROPAGATION_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HolderStep {
    pub n: usize,
    pub s_n: f64,
    pub r_n: f64,
    /// Discrete `|log L^n psi|_alpha`.
    pub log_holder: f64,
    /// `S_n^alpha |log psi|_alpha + R_n`.
    pub bound: f64,
    pub sup: f64,
    /// `1 + R_n`, the sup bound for pushforwards of `1`.
    pub sup_bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HolderPropagationReport {
    pub alpha: f64,
    pub initial_log_holder: f64,
    pub steps: Vec<HolderStep>,
    pub holds: bool,
}

/// Checks `|log L^n psi|_alpha <= S_n^alpha |log psi|_alpha + R_n` at every
/// step, and `sup L^n psi <= (1 + R_n) sup psi` (which is `1 + R_n` for
/// `psi = 1`).
pub fn verify_holder_propagation(
    ops: &OperatorSet,
    e: &Ensemble,
    omega: &[MapId],
    n: usize,
    psi: &DensityGrid,
    alpha: f64,
) -> Result<HolderPropagationReport, TransferError> {
    require_positive(psi)?;
    let push = quenched_push_steps(ops, e, omega, psi, n)?;
    let samples = omega[..n].iter().map(|&id| e.map_sample(id)).collect::<Result<Vec<_>, _>>()?;
    let lambdas: Vec<f64> = samples.iter().map(|s| s.lambda).collect();
    let deltas: Vec<f64> = samples.iter().map(|s| s.delta).collect();
    let (s, r) = sr_recursion(&lambdas, &deltas);
    let initial = psi.log_holder(alpha);
    let sup0 = psi.max();
    let steps: Vec<HolderStep> = (0..=n)
        .map(|k| {
            let grid = &push.steps[k];
            let log_holder = grid.log_holder(alpha);
            let bound = s[k].powf(alpha) * initial + r[k];
            let sup = grid.max();
            let sup_bound = (1.0 + r[k]) * sup0;
            HolderStep {
                n: k,
                s_n: s[k],
                r_n: r[k],
                log_holder,
                bound,
                sup,
                sup_bound,
                holds: log_holder <= bound + HOLDER_PROPAGATION_TOL
                    && sup <= sup_bound + HOLDER_PROPAGATION_TOL,
            }
        })
        .collect();
    let holds = steps.iter().all(|s| s.holds);
    Ok(HolderPropagationReport { alpha, initial_log_holder: initial, steps, holds })
}

/// Dual pairing defect `|int g Q f - int (P g) f|`.
pub fn duality_defect(ops: &OperatorSet, f: &[f64], g: &[f64]) -> f64 {
    let qf = ops.koopman(f);
    let pg = ops.annealed(g);
    let lhs: f64 = g.iter().zip(&qf).map(|(a, b)| a * b).sum::<f64>() / f.len() as f64;
    let rhs: f64 = pg.iter().zip(f).map(|(a, b)| a * b).sum::<f64>() / f.len() as f64;
    (lhs - rhs).abs()
}

/// `L1` distance between `P phi` and `phi`.
pub fn stationary_residual(ops: &OperatorSet, phi: &DensityGrid) -> Result<f64, TransferError> {
    let next =
        DensityGrid::new(ops.annealed(phi.values()).into_iter().map(|v| v.max(0.0)).collect())?;
    Ok(l1_distance(&next, phi)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::sample_fn;
    use crate::ensemble::{doubling, mix_a, sample_sequence};
    use proptest::prelude::*;
    use std::f64::consts::TAU;

    fn max_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn doubling_transfer_examples() {
        let s = MapSample::new(CircleMap::linear(2, 0.0).unwrap()).unwrap();
        let n = 1024;
        let one = vec![1.0; n];
        assert!(max_err(&transfer_apply(&s, &one).unwrap(), &one) < 1e-15);
        let psi = sample_fn(n, |x| 1.0 + (2.0 * TAU * x).cos());
        let want = sample_fn(n, |x| 1.0 + (TAU * x).cos());
        assert!(max_err(&transfer_apply(&s, &psi).unwrap(), &want) < 1e-8);
        let psi = sample_fn(n, |x| 1.0 + (TAU * x).cos());
        assert!(max_err(&transfer_apply(&s, &psi).unwrap(), &one) < 1e-8);
    }

    #[test]
    fn branch_inverter_solves_on_the_lift() {
        for map in [
            CircleMap::diffeo(0.9, 0.3).unwrap(),
            CircleMap::perturbed(3, 2.5, 1.0).unwrap(),
            CircleMap::linear(5, 0.7).unwrap(),
        ] {
            let inv = BranchInverter::new(map);
            for &x in &[0.0, 0.123, 0.5, 0.999_999] {
                let pre = inv.preimages(x).unwrap();
                assert_eq!(pre.len(), map.degree() as usize);
                for &(y, _) in &pre {
                    assert!((0.0..1.0).contains(&y));
                    let r = map.eval(y);
                    let gap = (r - x).abs().min(1.0 - (r - x).abs());
                    assert!(gap < 1e-12, "{map:?} x={x} y={y}");
                }
                for i in 0..pre.len() {
                    for j in 0..i {
                        assert!((pre[i].0 - pre[j].0).abs() > 1e-9);
                    }
                }
            }
            for &x in &[-3.2, 0.4, 7.9] {
                let y = inv.lift_inverse(x).unwrap();
                assert!((map.lift(y) - x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn annealed_examples() {
        let n = 512;
        let one = vec![1.0; n];
        let ops = OperatorSet::new(&doubling(), n).unwrap();
        assert!(max_err(&ops.annealed(&one), &one) < 1e-14);
        let e = Ensemble::finite(vec![
            (0.5, CircleMap::linear(2, 0.0).unwrap()),
            (0.5, CircleMap::linear(3, 0.0).unwrap()),
        ])
        .unwrap();
        let ops = OperatorSet::new(&e, n).unwrap();
        assert!(max_err(&ops.annealed(&one), &one) < 1e-14);
        let ops = OperatorSet::new(&mix_a(), n).unwrap();
        let p1 = ops.annealed(&one);
        assert!((integrate(&p1) - 1.0).abs() < 1e-10);
        assert!(max_err(&p1, &one) > 1e-2);
    }

    #[test]
    fn koopman_examples() {
        let n = 1024;
        let ops = OperatorSet::new(&doubling(), n).unwrap();
        let c = vec![2.5; n];
        assert!(max_err(&ops.koopman(&c), &c) < 1e-14);
        let f = sample_fn(n, |x| (TAU * x).cos());
        let want = sample_fn(n, |x| (2.0 * TAU * x).cos());
        assert!(max_err(&ops.koopman(&f), &want) < 1e-12);
    }

    #[test]
    fn normalized_operator_examples() {
        let n = 1024;
        let e = doubling();
        let ops = OperatorSet::new(&e, n).unwrap();
        let phi = DensityGrid::uniform(n).unwrap();
        let g = sample_fn(n, |x| (2.0 * TAU * x).cos());
        let want = sample_fn(n, |x| (TAU * x).cos());
        assert!(max_err(&normalized_transfer_apply(&ops, &phi, &g).unwrap(), &want) < 1e-8);

        let e = mix_a();
        let ops = OperatorSet::new(&e, n).unwrap();
        let st = compute_stationary(&e, &ops, 1e-10, 500).unwrap();
        let one = vec![1.0; n];
        assert!(max_err(&normalized_transfer_apply(&ops, &st.phi, &one).unwrap(), &one) < 1e-8);
        let tilt = Tilt { t: 0.1, f: TrigPoly::cos_mode(1) }.grid(n);
        let h = vec![Complex64::new(1.0, 0.0); n];
        let out = tilted_normalized_apply(&ops, &st.phi, &tilt, &h).unwrap();
        assert!(crate::density::sup_norm(&out) <= 1.0 + 1e-8);
        let zero = DensityGrid::new(vec![0.0; n]).unwrap();
        assert!(matches!(
            normalized_transfer_apply(&ops, &zero, &one),
            Err(TransferError::NonpositiveDensity { .. })
        ));
    }

    #[test]
    fn quenched_examples() {
        let n = 1024;
        let e = doubling();
        let ops = OperatorSet::new(&e, n).unwrap();
        let omega = sample_sequence(&e, 3, 0, 0);
        let psi = DensityGrid::from_fn(n, |x| 1.0 + (4.0 * TAU * x).cos()).unwrap();
        assert_eq!(quenched_push(&ops, &e, &omega.entries, &psi, 0).unwrap(), psi);
        let two = quenched_push(&ops, &e, &omega.entries, &psi, 2).unwrap();
        assert!(max_err(two.values(), &sample_fn(n, |x| 1.0 + (TAU * x).cos())) < 1e-8);
        let three = quenched_push(&ops, &e, &omega.entries, &psi, 3).unwrap();
        assert!(max_err(three.values(), &vec![1.0; n]) < 1e-8);
        assert!(matches!(
            quenched_push(&ops, &e, &omega.entries, &psi, 4),
            Err(TransferError::SequenceTooShort { .. })
        ));
    }

    #[test]
    fn stationary_examples() {
        for d in [2, 3] {
            let e = Ensemble::deterministic(CircleMap::linear(d, 0.0).unwrap()).unwrap();
            let ops = OperatorSet::new(&e, 1024).unwrap();
            let st = compute_stationary(&e, &ops, 1e-12, 10).unwrap();
            assert_eq!(st.iterations, 1);
            assert!(st.residual < 1e-12);
            assert!(max_err(st.phi.values(), &vec![1.0; 1024]) < 1e-13);
        }
        let e = mix_a();
        let ops = OperatorSet::new(&e, 1024).unwrap();
        let st = compute_stationary(&e, &ops, 1e-8, 1000).unwrap();
        assert!(st.residual < 1e-8 && st.inf_phi > st.moment_lower_bound);
        assert_eq!(st.method, StationaryMethod::Power);
        assert!(st.cesaro_residual >= st.power_residual);
    }

    #[test]
    fn tilted_push_reduces_correctly() {
        let n = 1024;
        let e = mix_a();
        let ops = OperatorSet::new(&e, n).unwrap();
        let omega = sample_sequence(&e, 4, 7, 0);
        let h = sample_fn(n, |x| 1.0 + 0.3 * (TAU * x).sin());
        let psi = DensityGrid::new(h.clone()).unwrap();
        let untilted = vec![Tilt { t: 0.0, f: TrigPoly::cos_mode(1) }; 4];
        let tp = tilted_quenched_push(&ops, &e, &omega.entries, &untilted, &h, 4).unwrap();
        let push = quenched_push_steps(&ops, &e, &omega.entries, &psi, 4).unwrap();
        for (a, b) in tp.left.iter().zip(push.last().values()) {
            assert!(a.im == 0.0 && (a.re - b).abs() < 1e-9);
        }
        let one = vec![Tilt { t: 0.1, f: TrigPoly::cos_mode(1) }];
        let tp = tilted_quenched_push(&ops, &e, &omega.entries, &one, &h, 1).unwrap();
        let gh: Vec<Complex64> = one[0].grid(n).iter().zip(&h).map(|(g, v)| g * v).collect();
        let direct = ops.transfer_of(&e, omega.entries[0]).unwrap().apply(&gh);
        assert_eq!(tp.left, direct);
    }

    #[test]
    fn tilted_push_doubling_identity() {
        let n = 4096;
        let e = doubling();
        let ops = OperatorSet::new(&e, n).unwrap();
        let omega = sample_sequence(&e, 3, 0, 0);
        let tilts = vec![Tilt { t: 0.1, f: TrigPoly::cos_mode(1) }; 3];
        let h = vec![1.0; n];
        let tp = tilted_quenched_push(&ops, &e, &omega.entries, &tilts, &h, 3).unwrap();
        assert!(tp.max_abs_diff < 1e-6, "{}", tp.max_abs_diff);
    }

    #[test]
    fn distortion_examples() {
        let e = doubling();
        let omega = sample_sequence(&e, 5, 0, 0);
        let r = verify_distortion(&e, &omega.entries, 5, &[(0.1, 0.4), (0.3, 0.3)]).unwrap();
        assert_eq!(r.r_n, 0.0);
        assert_eq!(r.max_abs_log_ratio, 0.0);
        assert!(r.holds);

        let e = mix_a();
        let omega = sample_sequence(&e, 10, 3, 0);
        let pairs = [(0.2, 0.2), (0.05, 0.45), (0.9, 0.1)];
        let r = verify_distortion(&e, &omega.entries, 10, &pairs).unwrap();
        assert!(r.holds, "{r:?}");
    }

    #[test]
    fn holder_propagation_examples() {
        let n = 2048;
        let e = doubling();
        let ops = OperatorSet::new(&e, n).unwrap();
        let omega = sample_sequence(&e, 3, 0, 0);
        let one = DensityGrid::uniform(n).unwrap();
        let r = verify_holder_propagation(&ops, &e, &omega.entries, 3, &one, 0.5).unwrap();
        assert!(r.holds);
        assert!(r.steps.iter().all(|s| s.log_holder < 1e-12 && s.bound == 0.0));

        let psi = DensityGrid::from_fn(n, |x| 1.0 + 0.5 * (TAU * x).cos()).unwrap();
        for alpha in [0.5, 1.0] {
            let r = verify_holder_propagation(&ops, &e, &omega.entries, 1, &psi, alpha).unwrap();
            let step = r.steps[1];
            assert_eq!(step.bound, 0.5f64.powf(alpha) * r.initial_log_holder);
            assert!(step.holds);
        }
    }

    fn smooth(coeffs: &[f64]) -> impl Fn(f64) -> f64 + '_ {
        move |x| {
            coeffs
                .iter()
                .enumerate()
                .map(|(k, c)| c * (TAU * (k as f64 / 2.0).floor() * x + (k % 2) as f64).cos())
                .sum()
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn transfer_preserves_mass_and_positivity(
            c in prop::collection::vec(-0.3f64..0.3, 6), a in -0.9f64..0.9, shift in 0.0f64..1.0
        ) {
            // Interpolation leaks mass at O(N^-4): about 1e-10 at N = 1024.
            let n = 4096;
            let psi = DensityGrid::from_fn(n, |x| 1.5 + smooth(&c)(x)).unwrap();
            for map in [CircleMap::diffeo(a, shift).unwrap(), CircleMap::perturbed(2, 1.5 * a, shift).unwrap()] {
                let out = transfer_apply(&MapSample::new(map).unwrap(), psi.values()).unwrap();
                prop_assert!((integrate(&out) - 1.0).abs() < 1e-10);
                prop_assert!(out.iter().all(|&v| v > 0.0));
            }
        }

        #[test]
        fn koopman_is_sup_contraction(c in prop::collection::vec(-1.0f64..1.0, 6)) {
            let n = 1024;
            let ops = OperatorSet::new(&mix_a(), n).unwrap();
            let f = sample_fn(n, smooth(&c));
            let sup = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let qf = ops.koopman(&f);
            // Cubic interpolation may overshoot the node values by a hair.
            prop_assert!(qf.iter().all(|v| v.abs() <= sup * (1.0 + 1e-3)));
        }
    }
}
