//! Trigonometric-polynomial observables.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::density::{holder_estimate, sample_fn};
use crate::maps::fixed_to_unit;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigTerm {
    pub k: u32,
    #[serde(default)]
    pub cos: f64,
    #[serde(default)]
    pub sin: f64,
}

/// `constant + sum_k (cos_k cos 2 pi k x + sin_k sin 2 pi k x)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigPoly {
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub terms: Vec<TrigTerm>,
}

impl TrigPoly {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn cos_mode(k: u32) -> Self {
        Self { constant: 0.0, terms: vec![TrigTerm { k, cos: 1.0, sin: 0.0 }] }
    }

    pub fn sin_mode(k: u32) -> Self {
        Self { constant: 0.0, terms: vec![TrigTerm { k, cos: 0.0, sin: 1.0 }] }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.terms.iter().fold(self.constant, |acc, t| {
            let (s, c) = (TAU * t.k as f64 * x).sin_cos();
            acc + t.cos * c + t.sin * s
        })
    }

    /// Value at the fixed-point coordinate `x / 2^64`. Each phase `k x` is
    /// reduced mod 1 exactly in integer arithmetic before the trig call.
    #[inline]
    pub fn eval_fixed(&self, x: u64) -> f64 {
        self.terms.iter().fold(self.constant, |acc, t| {
            let u = TAU * fixed_to_unit(x.wrapping_mul(t.k as u64));
            if t.sin == 0.0 {
                acc + t.cos * u.cos()
            } else {
                let (s, c) = u.sin_cos();
                acc + t.cos * c + t.sin * s
            }
        })
    }

    pub fn deriv(&self, x: f64) -> f64 {
        self.terms.iter().fold(0.0, |acc, t| {
            let w = TAU * t.k as f64;
            let (s, c) = (w * x).sin_cos();
            acc + w * (t.sin * c - t.cos * s)
        })
    }

    pub fn grid(&self, n: usize) -> Vec<f64> {
        sample_fn(n, |x| self.eval(x))
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            constant: c * self.constant,
            terms: self
                .terms
                .iter()
                .map(|t| TrigTerm { k: t.k, cos: c * t.cos, sin: c * t.sin })
                .collect(),
        }
    }

    /// Sum of two polynomials (terms are concatenated, not merged).
    pub fn plus(&self, other: &Self) -> Self {
        let mut terms = self.terms.clone();
        terms.extend_from_slice(&other.terms);
        Self { constant: self.constant + other.constant, terms }
    }

    pub fn minus(&self, other: &Self) -> Self {
        self.plus(&other.scaled(-1.0))
    }

    /// `sup |f'|`, an upper bound for every Holder constant `|f|_alpha`
    /// with `alpha <= 1` on the circle (whose diameter is 1/2).
    pub fn lipschitz_bound(&self) -> f64 {
        self.terms.iter().map(|t| TAU * t.k as f64 * t.cos.hypot(t.sin)).sum()
    }
}

/// A vector-valued Holder observable `f: S^1 -> R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Observable {
    pub components: Vec<TrigPoly>,
    pub alpha: f64,
}

impl Observable {
    pub fn new(components: Vec<TrigPoly>, alpha: f64) -> Self {
        assert!(!components.is_empty(), "an observable needs at least one component");
        assert!(alpha > 0.0 && alpha <= 1.0, "alpha must lie in (0, 1]");
        Self { components, alpha }
    }

    pub fn scalar(f: TrigPoly) -> Self {
        Self::new(vec![f], 1.0)
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn grids(&self, n: usize) -> Vec<Vec<f64>> {
        self.components.iter().map(|c| c.grid(n)).collect()
    }

    /// Discrete `|f_i|_alpha` per component.
    pub fn holder_consts(&self, n: usize) -> Vec<f64> {
        self.components.iter().map(|c| holder_estimate(&c.grid(n), self.alpha)).collect()
    }

    /// The scalar projection `v^T f`.
    pub fn project(&self, v: &[f64]) -> TrigPoly {
        assert_eq!(v.len(), self.dim(), "direction has the wrong dimension");
        self.components.iter().zip(v).fold(TrigPoly::zero(), |acc, (c, &w)| acc.plus(&c.scaled(w)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::fixed_from_unit;
    use proptest::prelude::*;

    #[test]
    fn evaluation_and_json() {
        let f: TrigPoly = serde_json::from_str(
            r#"{"constant":0.5,"terms":[{"k":1,"cos":1.0},{"k":2,"sin":-2.0}]}"#,
        )
        .unwrap();
        let x = 0.137;
        let want = 0.5 + (TAU * x).cos() - 2.0 * (2.0 * TAU * x).sin();
        assert!((f.eval(x) - want).abs() < 1e-15);
        assert!(serde_json::from_str::<TrigPoly>(r#"{"terms":[{"k":1,"tan":1}]}"#).is_err());
    }

    #[test]
    fn projection_is_linear() {
        let obs = Observable::new(vec![TrigPoly::cos_mode(1), TrigPoly::sin_mode(3)], 1.0);
        let g = obs.project(&[2.0, -1.0]);
        let x = 0.71;
        assert!((g.eval(x) - (2.0 * (TAU * x).cos() - (3.0 * TAU * x).sin())).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn derivative_matches_central_differences(
            c in prop::collection::vec(-1.0f64..1.0, 3), x in 0.0f64..1.0
        ) {
            let f = TrigPoly {
                constant: 0.3,
                terms: vec![
                    TrigTerm { k: 1, cos: c[0], sin: c[1] },
                    TrigTerm { k: 4, cos: c[2], sin: 0.0 },
                ],
            };
            let h = 1e-6;
            let fd = (f.eval(x + h) - f.eval(x - h)) / (2.0 * h);
            prop_assert!((fd - f.deriv(x)).abs() < 1e-6 * (1.0 + f.deriv(x).abs()));
            prop_assert!(f.deriv(x).abs() <= f.lipschitz_bound() + 1e-12);
            prop_assert!((f.eval_fixed(fixed_from_unit(x)) - f.eval(x)).abs() < 1e-12);
        }
    }
}
