//! Circle-map templates and their dilation/distortion summaries.
//!
//! Maps are handled through their lift `T: R -> R`, which satisfies
//! `T(x + 1) = T(x) + degree`. All built-in templates are orientation
//! preserving, so the lift is strictly increasing.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::StreamRng;

/// Scan resolution used for the extremal searches.
pub const DEFAULT_SCAN_POINTS: usize = 4096;
/// Relative tolerance of the golden-section refinement.
pub const REFINE_TOL: f64 = 1e-10;
/// Scan points with `|T'|` below this are treated as critical points.
pub const CRITICAL_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error(
        "derivative vanishes near x = {x} (|T'| = {value:e}); critical points are not allowed"
    )]
    ZeroDerivative { x: f64, value: f64 },
    #[error("invalid template parameters: {0}")]
    InvalidParameters(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    /// `d x + c`
    Linear,
    /// `d x + c + (a / 2pi) sin(2 pi x + phase)`, `|a| < d`
    Perturbed,
    /// `x + c + (a / 2pi) sin(2 pi x)`, `|a| < 1`
    Diffeo,
}

impl MapKind {
    pub fn name(self) -> &'static str {
        match self {
            MapKind::Linear => "linear",
            MapKind::Perturbed => "perturbed",
            MapKind::Diffeo => "diffeo",
        }
    }
}

/// A circle map given by a template and its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleMap {
    pub kind: MapKind,
    pub d: i64,
    pub c: f64,
    pub a: f64,
    pub phase: f64,
}

impl CircleMap {
    pub fn linear(d: i64, c: f64) -> Result<Self, MapError> {
        Self::new(MapKind::Linear, d, c, 0.0, 0.0)
    }

    pub fn perturbed(d: i64, a: f64, phase: f64) -> Result<Self, MapError> {
        Self::new(MapKind::Perturbed, d, 0.0, a, phase)
    }

    pub fn diffeo(a: f64, c: f64) -> Result<Self, MapError> {
        Self::new(MapKind::Diffeo, 1, c, a, 0.0)
    }

    /// Validating constructor shared by all templates.
    pub fn new(kind: MapKind, d: i64, c: f64, a: f64, phase: f64) -> Result<Self, MapError> {
        if !(c.is_finite() && a.is_finite() && phase.is_finite()) {
            return Err(MapError::InvalidParameters("non-finite parameter".into()));
        }
        match kind {
            MapKind::Linear => {
                if d < 1 {
                    return Err(MapError::InvalidParameters(format!(
                        "linear template needs integer d >= 1, got {d}"
                    )));
                }
            }
            MapKind::Perturbed => {
                if d < 1 {
                    return Err(MapError::InvalidParameters(format!(
                        "perturbed template needs integer d >= 1, got {d}"
                    )));
                }
                if a.abs() >= d as f64 {
                    return Err(MapError::InvalidParameters(format!(
                        "perturbed template needs |a| < d, got a = {a}, d = {d}"
                    )));
                }
            }
            MapKind::Diffeo => {
                if d != 1 {
                    return Err(MapError::InvalidParameters(format!(
                        "diffeo template has degree 1, got {d}"
                    )));
                }
                if a.abs() >= 1.0 {
                    return Err(MapError::InvalidParameters(format!(
                        "diffeo template needs |a| < 1, got {a}"
                    )));
                }
            }
        }
        let a = if kind == MapKind::Linear { 0.0 } else { a };
        let phase = if kind == MapKind::Perturbed { phase } else { 0.0 };
        Ok(Self { kind, d, c, a, phase })
    }

    pub fn degree(&self) -> i64 {
        self.d
    }

    #[inline]
    fn angle(&self, x: f64) -> f64 {
        TAU * x + self.phase
    }

    /// The lift `T(x)` on the real line.
    #[inline]
    pub fn lift(&self, x: f64) -> f64 {
        let base = self.d as f64 * x + self.c;
        match self.kind {
            MapKind::Linear => base,
            MapKind::Perturbed | MapKind::Diffeo => base + self.a / TAU * self.angle(x).sin(),
        }
    }

    /// `T(x) mod 1`.
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.lift(x).rem_euclid(1.0)
    }

    #[inline]
    pub fn deriv(&self, x: f64) -> f64 {
        match self.kind {
            MapKind::Linear => self.d as f64,
            MapKind::Perturbed | MapKind::Diffeo => self.d as f64 + self.a * self.angle(x).cos(),
        }
    }

    #[inline]
    pub fn deriv2(&self, x: f64) -> f64 {
        match self.kind {
            MapKind::Linear => 0.0,
            MapKind::Perturbed | MapKind::Diffeo => -TAU * self.a * self.angle(x).sin(),
        }
    }

    /// Lift value and derivative in one call.
    #[inline]
    pub fn lift_and_deriv(&self, x: f64) -> (f64, f64) {
        match self.kind {
            MapKind::Linear => (self.d as f64 * x + self.c, self.d as f64),
            MapKind::Perturbed | MapKind::Diffeo => {
                let (s, c) = self.angle(x).sin_cos();
                (self.d as f64 * x + self.c + self.a / TAU * s, self.d as f64 + self.a * c)
            }
        }
    }

    /// Closed-form inverse of the lift, available for the linear template.
    #[inline]
    pub fn linear_lift_inverse(&self, y: f64) -> Option<f64> {
        (self.kind == MapKind::Linear).then(|| (y - self.c) / self.d as f64)
    }

    /// One step of the map on a 64-bit fixed-point circle coordinate.
    ///
    /// The point `x / 2^64` stands for a point whose binary expansion beyond
    /// 64 bits is unknown and uniformly distributed. Linear maps shift
    /// unknown bits into view by drawing them, so long orbits of `d x mod 1`
    /// stay exact in distribution instead of collapsing to 0 in floating
    /// point. Nonlinear maps are evaluated in `f64` and the bits below the
    /// `f64` resolution are redrawn.
    #[inline]
    pub fn step_fixed(&self, x: u64, rng: &mut StreamRng) -> u64 {
        match self.kind {
            MapKind::Linear => {
                let d = self.d as u64;
                let carry = if d.is_power_of_two() {
                    rng.take_bits(d.trailing_zeros())
                } else {
                    rng.below(d)
                };
                x.wrapping_mul(d)
                    .wrapping_add(carry)
                    .wrapping_add(fixed_from_unit(self.c.rem_euclid(1.0)))
            }
            MapKind::Perturbed | MapKind::Diffeo => {
                let y = self.eval(fixed_to_unit(x));
                fixed_from_unit(y).wrapping_add(rng.bits() >> 53)
            }
        }
    }
}

const TWO64: f64 = 18_446_744_073_709_551_616.0;

/// Fixed-point circle coordinate to `[0, 1)`.
#[inline]
pub fn fixed_to_unit(x: u64) -> f64 {
    x as f64 / TWO64
}

/// `[0, 1)` to fixed point, truncating.
#[inline]
pub fn fixed_from_unit(y: f64) -> u64 {
    let y = y.rem_euclid(1.0);
    // `as` saturates, which maps values rounding up to 1.0 onto the top cell.
    (y * TWO64) as u64
}

/// A map together with its dilation `lambda = inf |T'|` and distortion
/// `delta = sup |T''| / T'^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapSample {
    pub map: CircleMap,
    pub lambda: f64,
    pub delta: f64,
}

impl MapSample {
    pub fn new(map: CircleMap) -> Result<Self, MapError> {
        let (lambda, delta) = compute_dilation_distortion(&map)?;
        Ok(Self { map, lambda, delta })
    }

    pub fn degree(&self) -> i64 {
        self.map.degree()
    }
}

/// Dilation and distortion by grid scan plus golden-section refinement.
pub fn compute_dilation_distortion(map: &CircleMap) -> Result<(f64, f64), MapError> {
    dilation_distortion_with_scan(map, DEFAULT_SCAN_POINTS)
}

pub fn dilation_distortion_with_scan(
    map: &CircleMap,
    scan_points: usize,
) -> Result<(f64, f64), MapError> {
    assert!(scan_points >= 4, "scan grid too coarse");
    let h = 1.0 / scan_points as f64;
    let mut abs_d = Vec::with_capacity(scan_points);
    let mut ratio = Vec::with_capacity(scan_points);
    for j in 0..scan_points {
        let x = j as f64 * h;
        let d1 = map.deriv(x);
        if d1.abs() < CRITICAL_EPS {
            return Err(MapError::ZeroDerivative { x, value: d1.abs() });
        }
        abs_d.push(d1.abs());
        ratio.push(map.deriv2(x).abs() / (d1 * d1));
    }
    let dilation = |x: f64| map.deriv(x).abs();
    let distortion = |x: f64| {
        let d1 = map.deriv(x);
        map.deriv2(x).abs() / (d1 * d1)
    };
    let lambda = refine_extremum(&abs_d, h, &dilation, Extremum::Min);
    let delta = refine_extremum(&ratio, h, &distortion, Extremum::Max);
    if lambda < CRITICAL_EPS {
        return Err(MapError::ZeroDerivative { x: f64::NAN, value: lambda });
    }
    Ok((lambda, delta))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Extremum {
    Min,
    Max,
}

/// Refines every discrete local extremum of the periodic samples and keeps
/// the best refined value.
fn refine_extremum(samples: &[f64], h: f64, f: &dyn Fn(f64) -> f64, kind: Extremum) -> f64 {
    let n = samples.len();
    let better = |a: f64, b: f64| match kind {
        Extremum::Min => a < b,
        Extremum::Max => a > b,
    };
    let mut best = samples[0];
    for &v in samples {
        if better(v, best) {
            best = v;
        }
    }
    let spread = samples.iter().fold(0.0f64, |m, &v| m.max((v - best).abs()));
    if spread == 0.0 {
        // Constant on the scan grid (linear templates); nothing to refine.
        return best;
    }
    for j in 0..n {
        let prev = samples[(j + n - 1) % n];
        let next = samples[(j + 1) % n];
        let v = samples[j];
        let local = match kind {
            Extremum::Min => v <= prev && v <= next,
            Extremum::Max => v >= prev && v >= next,
        };
        if !local {
            continue;
        }
        let x = j as f64 * h;
        let refined = golden_section(f, x - h, x + h, kind);
        if better(refined, best) {
            best = refined;
        }
    }
    best
}

fn golden_section(f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64, kind: Extremum) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let sign = if kind == Extremum::Min { 1.0 } else { -1.0 };
    let g = |x: f64| sign * f(x);
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut g1 = g(x1);
    let mut g2 = g(x2);
    let mut best = g(lo).min(g(hi)).min(g1).min(g2);
    for _ in 0..200 {
        if hi - lo <= REFINE_TOL * hi.abs().max(1.0) {
            break;
        }
        if g1 < g2 {
            hi = x2;
            x2 = x1;
            g2 = g1;
            x1 = hi - INV_PHI * (hi - lo);
            g1 = g(x1);
            best = best.min(g1);
        } else {
            lo = x1;
            x1 = x2;
            g1 = g2;
            x2 = lo + INV_PHI * (hi - lo);
            g2 = g(x2);
            best = best.min(g2);
        }
    }
    sign * best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::purpose;
    use proptest::prelude::*;

    #[test]
    fn linear_doubling_summary() {
        let s = MapSample::new(CircleMap::linear(2, 0.0).unwrap()).unwrap();
        assert_eq!((s.lambda, s.delta), (2.0, 0.0));
    }

    #[test]
    fn perturbed_doubling_summary_matches_closed_form() {
        let m = CircleMap::perturbed(2, 1.0, 0.0).unwrap();
        let (lambda, delta) = compute_dilation_distortion(&m).unwrap();
        assert!((lambda - 1.0).abs() < 1e-12);
        // maximum of 2 pi sin u / (2 + cos u)^2 at cos u = 1 - sqrt 3
        let cu = 1.0 - 3f64.sqrt();
        let su = (1.0 - cu * cu).sqrt();
        let exact = TAU * su / (2.0 + cu).powi(2);
        assert!((delta - exact).abs() < 1e-9 * exact, "{delta} vs {exact}");
    }

    #[test]
    fn diffeo_dilation_by_scan() {
        let m = CircleMap::diffeo(0.5, 0.3).unwrap();
        let (lambda, _) = compute_dilation_distortion(&m).unwrap();
        assert!((lambda - 0.5).abs() < 1e-12);
    }

    #[test]
    fn template_validation() {
        assert!(CircleMap::linear(0, 0.0).is_err());
        assert!(CircleMap::perturbed(2, 2.0, 0.0).is_err());
        assert!(CircleMap::diffeo(1.0, 0.0).is_err());
        assert!(CircleMap::new(MapKind::Diffeo, 2, 0.0, 0.1, 0.0).is_err());
    }

    #[test]
    fn critical_point_rejected() {
        // Bypass validation to build a map with T'(1/2) = 0.
        let m = CircleMap { kind: MapKind::Diffeo, d: 1, c: 0.0, a: 1.0, phase: 0.0 };
        assert!(matches!(compute_dilation_distortion(&m), Err(MapError::ZeroDerivative { .. })));
    }

    #[test]
    fn lift_respects_degree() {
        for m in [
            CircleMap::linear(3, 0.2).unwrap(),
            CircleMap::perturbed(2, 0.7, 0.4).unwrap(),
            CircleMap::diffeo(0.5, 0.3).unwrap(),
        ] {
            for k in 0..20 {
                let x = k as f64 * 0.073 - 0.4;
                let diff = m.lift(x + 1.0) - m.lift(x) - m.degree() as f64;
                assert!(diff.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fixed_point_doubling_does_not_collapse() {
        let m = CircleMap::linear(2, 0.0).unwrap();
        let mut rng = StreamRng::new(1, purpose::TRAJECTORY, 0);
        let mut x = fixed_from_unit(0.3);
        let mut zeros = 0;
        for _ in 0..500 {
            x = m.step_fixed(x, &mut rng);
            if fixed_to_unit(x) == 0.0 {
                zeros += 1;
            }
        }
        assert_eq!(zeros, 0);
    }

    #[test]
    fn fixed_point_step_tracks_float_map() {
        let m = CircleMap::perturbed(2, 0.6, 0.1).unwrap();
        let mut rng = StreamRng::new(2, purpose::TRAJECTORY, 0);
        let x = fixed_from_unit(0.41);
        let y = fixed_to_unit(m.step_fixed(x, &mut rng));
        assert!((y - m.eval(0.41)).abs() < 1e-14);
    }

    fn any_map() -> impl Strategy<Value = CircleMap> {
        prop_oneof![
            (1i64..5, 0.0..1.0f64).prop_map(|(d, c)| CircleMap::linear(d, c).unwrap()),
            (1i64..4, -0.95..0.95f64, 0.0..6.0f64).prop_map(|(d, a, p)| CircleMap::perturbed(
                d,
                a * d as f64,
                p
            )
            .unwrap()),
            (-0.9..0.9f64, 0.0..1.0f64).prop_map(|(a, c)| CircleMap::diffeo(a, c).unwrap()),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn derivatives_match_central_differences(m in any_map(), x in 0.0..1.0f64) {
            let h = 1e-5;
            let num1 = (m.lift(x + h) - m.lift(x - h)) / (2.0 * h);
            let num2 = (m.deriv(x + h) - m.deriv(x - h)) / (2.0 * h);
            let scale1 = m.deriv(x).abs().max(1.0);
            let scale2 = m.deriv2(x).abs().max(1.0);
            prop_assert!((num1 - m.deriv(x)).abs() <= 1e-6 * scale1);
            prop_assert!((num2 - m.deriv2(x)).abs() <= 1e-6 * scale2);
        }

        #[test]
        fn summary_bounds_hold_on_grid(m in any_map()) {
            let (lambda, delta) = compute_dilation_distortion(&m).unwrap();
            prop_assert!(lambda > 0.0);
            for j in 0..1024 {
                let x = j as f64 / 1024.0;
                let d1 = m.deriv(x);
                prop_assert!(lambda <= d1.abs() * (1.0 + 1e-12));
                prop_assert!(m.deriv2(x).abs() / (d1 * d1) <= delta * (1.0 + 1e-12) + 1e-15);
            }
        }

        #[test]
        fn summary_stable_under_scan_refinement(m in any_map()) {
            let (l1, d1) = dilation_distortion_with_scan(&m, 4096).unwrap();
            let (l2, d2) = dilation_distortion_with_scan(&m, 8192).unwrap();
            prop_assert!((l1 - l2).abs() <= 1e-9 * l1.max(1.0));
            prop_assert!((d1 - d2).abs() <= 1e-9 * d1.max(1.0));
        }
    }
}
