//! The acceptance suite: fixed experiments with pass/fail thresholds and
//! runtime budgets.
//!
//! Criteria 1 to 10 each write their curves as CSV; criterion 11 reruns
//! them with the same seeds and compares every CSV byte for byte. The
//! ensemble passed in plays the role of mix-A.

use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;
use rcm_core::coupling::{
    enumerate_second_moment_r, exact_second_moment_r, mc_second_moment_r, rde_simulate,
    verify_memory_loss, CoefficientLaw, CouplingConstants,
};
use rcm_core::density::{integrate_product, DensityGrid};
use rcm_core::ensemble::{doubling, sample_sequence, Ensemble};
use rcm_core::limit::{
    clt_test_with_variance, coboundary_residual, correlation_operator, covariance_batch_means,
    covariance_series, multiple_correlation_check, Stationary, TiltBounds, DEFAULT_TAIL_TOL,
};
use rcm_core::observable::{Observable, TrigPoly, TrigTerm};
use rcm_core::rng::{purpose, StreamRng};
use rcm_core::trajectory::occupation_histogram;
use rcm_core::transfer::{
    compute_stationary, duality_defect, tilted_quenched_push, verify_holder_propagation,
    OperatorSet, StationaryResult, Tilt, LOWER_BOUND_GRID_TOL,
};
use serde::{Deserialize, Serialize};

use crate::derive_seed;

/// Grid size used by every operator-based criterion.
pub const GRID: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionOutcome {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    /// Whether the numerical checks passed, regardless of runtime.
    pub checks_passed: bool,
    pub detail: String,
    #[serde(skip)]
    pub seconds: f64,
    pub budget_seconds: f64,
    #[serde(skip)]
    pub files: Vec<(String, String)>,
}

impl CriterionOutcome {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {:<28} {} ({:.1} s of {:.0} s) {}",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.seconds,
            self.budget_seconds,
            self.detail
        )
    }
}

/// Collected checks and files of one criterion.
#[derive(Default)]
struct Findings {
    ok: bool,
    notes: Vec<String>,
    files: Vec<(String, String)>,
}

impl Findings {
    fn new() -> Self {
        Self { ok: true, ..Default::default() }
    }

    fn check(&mut self, passed: bool, note: String) {
        self.ok &= passed;
        self.notes.push(if passed { note } else { format!("FAILED {note}") });
    }

    fn fail(&mut self, what: &str, err: impl std::fmt::Display) {
        self.check(false, format!("{what}: {err}"));
    }

    fn file(&mut self, name: &str, csv: String) {
        self.files.push((name.to_string(), csv));
    }
}

type CriterionFn = fn(&Ensemble, u64, &mut Findings);

const CRITERIA: [(u8, &str, f64, CriterionFn); 10] = [
    (1, "exact second moment", 10.0, exact_moment),
    (2, "first passage tail", 30.0, first_passage_tail),
    (3, "pathwise memory loss", 300.0, memory_loss),
    (4, "stationary density", 120.0, stationary_density),
    (5, "correlation exactness", 30.0, correlation_exactness),
    (6, "limit covariance", 120.0, covariance),
    (7, "central limit theorem", 300.0, clt),
    (8, "holder propagation", 120.0, holder_propagation),
    (9, "tilted composition", 60.0, tilted_composition),
    (10, "multiple correlation decay", 300.0, multiple_correlation),
];

/// Runs criteria 1 to 10, reporting each as it finishes.
pub fn run_criteria(
    mix_a: &Ensemble,
    seed: u64,
    on_done: &mut dyn FnMut(&CriterionOutcome),
) -> Vec<CriterionOutcome> {
    CRITERIA
        .iter()
        .map(|&(id, name, budget, f)| {
            let start = Instant::now();
            let mut found = Findings::new();
            f(mix_a, derive_seed(seed, id as u64), &mut found);
            let seconds = start.elapsed().as_secs_f64();
            let out = CriterionOutcome {
                id,
                name: name.into(),
                passed: found.ok && seconds <= budget,
                checks_passed: found.ok,
                detail: found.notes.join("; "),
                seconds,
                budget_seconds: budget,
                files: found.files,
            };
            on_done(&out);
            out
        })
        .collect()
}

/// Criterion 11: both runs produced the same CSV files with the same bytes.
pub fn determinism(first: &[CriterionOutcome], second: &[CriterionOutcome]) -> CriterionOutcome {
    let files = |runs: &[CriterionOutcome]| -> Vec<(String, String)> {
        runs.iter().flat_map(|c| c.files.iter().cloned()).collect()
    };
    let (a, b) = (files(first), files(second));
    let differing: Vec<&str> =
        a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    let same = a.len() == b.len() && differing.is_empty();
    let detail = if same {
        format!("{} CSV files identical", a.len())
    } else {
        format!("{} vs {} files; differing: {}", a.len(), b.len(), differing.join(", "))
    };
    CriterionOutcome {
        id: 11,
        name: "determinism".into(),
        passed: same,
        checks_passed: same,
        detail,
        seconds: 0.0,
        budget_seconds: f64::INFINITY,
        files: Vec::new(),
    }
}

fn exact_moment(_: &Ensemble, seed: u64, out: &mut Findings) {
    // (lambda, Delta) = (2, 1) or (4, 0) with equal weights.
    let law = CoefficientLaw::new(vec![(0.5, 0.5, 1.0), (0.5, 0.25, 0.0)]).expect("valid law");
    let m = law.moments();
    let at2 = exact_second_moment_r(&m, 2).expect("finite").value;
    let rel = (at2 - 53.0 / 64.0).abs() / (53.0 / 64.0);
    out.check(rel <= 1e-12, format!("E[R_2^2] = {at2} (relative error {rel:.1e})"));
    let mut csv = String::from("n,exact,enumerated,mc_mean,mc_se,z\n");
    let mut max_rel: f64 = 0.0;
    let mut max_z: f64 = 0.0;
    for n in 1..=6 {
        let exact = exact_second_moment_r(&m, n).expect("finite").value;
        let en = enumerate_second_moment_r(&law, n);
        let (mc, se) = mc_second_moment_r(&law, n, 100_000, derive_seed(seed, n as u64));
        let z = (mc - exact) / se;
        max_rel = max_rel.max((exact - en).abs() / en);
        max_z = max_z.max(z.abs());
        csv.push_str(&format!("{n},{exact},{en},{mc},{se},{z}\n"));
    }
    out.check(max_rel <= 1e-12, format!("enumeration n <= 6 max relative error {max_rel:.1e}"));
    out.check(max_z <= 4.0, format!("Monte Carlo max |z| {max_z:.2}"));
    out.file("c01-second-moment.csv", csv);
}

fn first_passage_tail(_: &Ensemble, seed: u64, out: &mut Findings) {
    // <A> = 0.5, <B> = 1.
    let law = CoefficientLaw::new(vec![(0.5, 0.25, 0.0), (0.5, 0.75, 2.0)]).expect("valid law");
    match rde_simulate(&law, 8.0, 4.0, 60, 100_000, seed) {
        Ok(rep) => {
            let formula = rep
                .curve
                .iter()
                .map(|p| (p.bound - 8.0 / 3.0 * (5.0f64 / 6.0).powi(p.n as i32)).abs())
                .fold(0.0, f64::max);
            out.check(
                formula < 1e-12,
                format!("bound is (8/3)(5/6)^n (max deviation {formula:.1e})"),
            );
            out.check(
                rep.violations == 0,
                format!(
                    "{} violations over n <= 60, max ratio {:.3}",
                    rep.violations, rep.max_ratio
                ),
            );
            let mut csv = String::from("n,survivors,empirical,wilson_lo,wilson_hi,bound\n");
            for p in &rep.curve {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    p.n, p.survivors, p.empirical, p.wilson_lo, p.wilson_hi, p.bound
                ));
            }
            out.file("c02-first-passage.csv", csv);
        }
        Err(e) => out.fail("simulation", e),
    }
}

fn operators(e: &Ensemble, out: &mut Findings) -> Option<OperatorSet> {
    match OperatorSet::new(e, GRID) {
        Ok(ops) => Some(ops),
        Err(err) => {
            out.fail("operators", err);
            None
        }
    }
}

fn stationary(
    e: &Ensemble,
    ops: &OperatorSet,
    tol: f64,
    out: &mut Findings,
) -> Option<StationaryResult> {
    match compute_stationary(e, ops, tol, 20_000) {
        Ok(r) => Some(r),
        Err(err) => {
            out.fail("stationary density", err);
            None
        }
    }
}

fn memory_loss(mix_a: &Ensemble, seed: u64, out: &mut Findings) {
    let Some(ops) = operators(mix_a, out) else { return };
    let consts = CoefficientLaw::from_ensemble(mix_a)
        .and_then(|law| CouplingConstants::new(&law, 0.5, None, 1.0));
    let consts = match consts {
        Ok(c) => c,
        Err(e) => return out.fail("coupling constants", e),
    };
    let psi = |s: f64| {
        DensityGrid::from_fn(GRID, |x| (s * (std::f64::consts::TAU * x).cos()).exp())
            .and_then(DensityGrid::normalized)
            .expect("positive density")
    };
    let (psi1, psi2) = (psi(0.15), psi(-0.15));
    let horizon = 50;
    let reports: Result<Vec<_>, _> = (0..100u64)
        .into_par_iter()
        .map(|i| {
            let omega = sample_sequence(mix_a, horizon, seed, i);
            verify_memory_loss(&ops, mix_a, &omega, &psi1, &psi2, &consts, horizon)
        })
        .collect();
    let reports = match reports {
        Ok(r) => r,
        Err(e) => return out.fail("memory loss", e),
    };
    let violations: usize = reports.iter().map(|r| r.violations).sum();
    let excess = reports.iter().map(|r| r.max_excess).fold(f64::NEG_INFINITY, f64::max);
    out.check(
        violations == 0,
        format!(
            "{violations} violations in 100 sequences (K = {:.3}, max excess {excess:.2e})",
            consts.k
        ),
    );
    let mut csv = String::from("sequence,n,distance,bound,count\n");
    for (i, r) in reports.iter().enumerate() {
        for n in 0..=horizon {
            csv.push_str(&format!("{i},{n},{},{},{}\n", r.distance[n], r.bound[n], r.counts[n]));
        }
    }
    out.file("c03-memory-loss.csv", csv);
}

fn stationary_density(mix_a: &Ensemble, seed: u64, out: &mut Findings) {
    let dbl = doubling();
    if let Some(ops) = operators(&dbl, out) {
        if let Some(r) = stationary(&dbl, &ops, 1e-14, out) {
            let dev = r.phi.values().iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
            out.check(r.residual < 1e-12, format!("doubling residual {:.1e}", r.residual));
            out.check(dev < 1e-12, format!("doubling sup |phi - 1| {dev:.1e}"));
        }
    }
    let Some(ops) = operators(mix_a, out) else { return };
    let Some(r) = stationary(mix_a, &ops, 1e-12, out) else { return };
    out.check(r.residual < 1e-8, format!("mix-A residual {:.1e}", r.residual));
    out.check(r.inf_phi > 0.0, format!("inf phi {:.4}", r.inf_phi));
    out.check(
        r.inf_phi >= r.moment_lower_bound - LOWER_BOUND_GRID_TOL,
        format!("moment lower bound {:.4}", r.moment_lower_bound),
    );
    match occupation_histogram(mix_a, &r.phi, 10_000_000, 64, 1000, seed) {
        Ok(h) => {
            out.check(h.within(3.0), format!("histogram max |z| {:.2}", h.max_abs_z));
            out.file("c04-histogram.csv", h.to_csv());
        }
        Err(e) => out.fail("histogram", e),
    }
    out.file("c04-phi.csv", r.phi.to_csv());
}

fn random_trig(rng: &mut StreamRng) -> TrigPoly {
    TrigPoly {
        constant: 2.0 * rng.uniform() - 1.0,
        terms: (1..=3)
            .map(|k| TrigTerm { k, cos: 2.0 * rng.uniform() - 1.0, sin: 2.0 * rng.uniform() - 1.0 })
            .collect(),
    }
}

fn correlation_exactness(mix_a: &Ensemble, seed: u64, out: &mut Findings) {
    let dbl = doubling();
    let Some(ops) = operators(&dbl, out) else { return };
    let phi = DensityGrid::uniform(GRID).expect("valid grid");
    let st = Stationary::new(&dbl, &ops, &phi).expect("grids match");
    let f = TrigPoly::cos_mode(1).plus(&TrigPoly::cos_mode(2)).grid(GRID);
    match correlation_operator(&st, &f, &f, 10) {
        Ok(curve) => {
            let want = |n: usize| match n {
                0 => 1.0,
                1 => 0.5,
                _ => 0.0,
            };
            let err = curve
                .real()
                .iter()
                .enumerate()
                .map(|(n, c)| (c - want(n)).abs())
                .fold(0.0, f64::max);
            out.check(err <= 1e-6, format!("curve max error {err:.1e}"));
            out.file("c05-correlation.csv", curve.to_csv());
        }
        Err(e) => out.fail("correlation curve", e),
    }
    let mut csv = String::from("ensemble,pair,int_g_qf,defect\n");
    let mut worst: f64 = 0.0;
    for (label, e) in [("doubling", &dbl), ("mix-A", mix_a)] {
        let ops = if label == "doubling" { None } else { operators(e, out) };
        let ops = ops.as_ref().unwrap_or(st.ops);
        let mut rng = StreamRng::new(seed, purpose::EXPERIMENT, 5);
        for pair in 0..50 {
            let f = random_trig(&mut rng).grid(GRID);
            let g = random_trig(&mut rng).grid(GRID);
            let pairing = integrate_product(&g, &ops.koopman(&f));
            let defect = duality_defect(ops, &f, &g);
            worst = worst.max(defect);
            csv.push_str(&format!("{label},{pair},{pairing},{defect}\n"));
        }
    }
    out.check(worst <= 1e-8, format!("duality max defect {worst:.1e} on 2 x 50 pairs"));
    out.file("c05-duality.csv", csv);
}

fn covariance(_: &Ensemble, seed: u64, out: &mut Findings) {
    let dbl = doubling();
    let Some(ops) = operators(&dbl, out) else { return };
    let phi = DensityGrid::uniform(GRID).expect("valid grid");
    let st = Stationary::new(&dbl, &ops, &phi).expect("grids match");
    let cos = TrigPoly::cos_mode(1);
    let mut csv = String::from("observable,estimator,sigma2,se\n");
    match covariance_series(&st, &[cos.grid(GRID)], DEFAULT_TAIL_TOL, 10_000) {
        Ok(s) => {
            let v = s.sigma2[0][0];
            out.check((v - 0.5).abs() <= 1e-8 && s.converged, format!("series {v:.10}"));
            csv.push_str(&format!("cos,series,{v},\n"));
        }
        Err(e) => out.fail("series", e),
    }
    match covariance_batch_means(&st, &Observable::scalar(cos.clone()), 2048, 4096, seed) {
        Ok(b) => {
            let (v, se) = (b.sigma2[0][0], b.se.as_ref().expect("se")[0][0]);
            out.check((v - 0.5).abs() <= 4.0 * se, format!("batch means {v:.4} +- {se:.4}"));
            csv.push_str(&format!("cos,batch_means,{v},{se}\n"));
        }
        Err(e) => out.fail("batch means", e),
    }
    let cob = cos.minus(&TrigPoly::cos_mode(2)).grid(GRID);
    match covariance_series(&st, std::slice::from_ref(&cob), DEFAULT_TAIL_TOL, 10_000) {
        Ok(s) => {
            let v = s.sigma2[0][0];
            out.check(v < 1e-3, format!("coboundary series {v:.1e}"));
            csv.push_str(&format!("cos-cos2,series,{v},\n"));
        }
        Err(e) => out.fail("coboundary series", e),
    }
    match coboundary_residual(&st, &cob, 1000, seed) {
        Ok(r) => {
            out.check(r.residual < 1e-4, format!("coboundary residual {:.1e}", r.residual));
            let c = cos.grid(GRID);
            let (mg, mc) = (st.mean(&r.g), st.mean(&c));
            let dev = r.g.iter().zip(&c).map(|(g, c)| (g - mg - c + mc).abs()).fold(0.0, f64::max);
            out.check(dev < 1e-4, format!("g = cos 2 pi x + const within {dev:.1e}"));
            let mut g_csv = String::from("x,g\n");
            for (j, g) in r.g.iter().enumerate() {
                g_csv.push_str(&format!("{},{g}\n", j as f64 / GRID as f64));
            }
            out.file("c06-cobounding-function.csv", g_csv);
        }
        Err(e) => out.fail("coboundary residual", e),
    }
    out.file("c06-covariance.csv", csv);
}

fn clt(_: &Ensemble, seed: u64, out: &mut Findings) {
    let dbl = doubling();
    let Some(ops) = operators(&dbl, out) else { return };
    let phi = DensityGrid::uniform(GRID).expect("valid grid");
    let st = Stationary::new(&dbl, &ops, &phi).expect("grids match");
    let cos = TrigPoly::cos_mode(1);
    let mut csv = String::from("replication,ks_statistic,ks_p_value,ks_pass\n");
    let mut passes = 0;
    for r in 0..40u64 {
        match clt_test_with_variance(&st, &cos, 0.5, 4096, 10_000, derive_seed(seed, r)) {
            Ok(rep) => {
                passes += usize::from(rep.ks_pass);
                csv.push_str(&format!(
                    "{r},{},{},{}\n",
                    rep.ks_statistic, rep.ks_p_value, rep.ks_pass
                ));
            }
            Err(e) => return out.fail("clt", e),
        }
    }
    out.check(passes >= 38, format!("{passes} of 40 replications pass KS at 1%"));
    out.file("c07-clt.csv", csv);
}

fn holder_propagation(mix_a: &Ensemble, seed: u64, out: &mut Findings) {
    let Some(ops) = operators(mix_a, out) else { return };
    let psi = DensityGrid::uniform(GRID).expect("valid grid");
    let reports: Result<Vec<_>, _> = (0..100u64)
        .into_par_iter()
        .map(|i| {
            let omega = sample_sequence(mix_a, 10, seed, i);
            verify_holder_propagation(&ops, mix_a, &omega.entries, 10, &psi, 0.5)
        })
        .collect();
    let reports = match reports {
        Ok(r) => r,
        Err(e) => return out.fail("holder propagation", e),
    };
    let failed = reports.iter().filter(|r| !r.holds).count();
    out.check(failed == 0, format!("{failed} of 100 sequences violate a bound"));
    let mut csv = String::from("sequence,n,s_n,r_n,log_holder,bound,sup,sup_bound\n");
    for (i, r) in reports.iter().enumerate() {
        for s in &r.steps {
            csv.push_str(&format!(
                "{i},{},{},{},{},{},{},{}\n",
                s.n, s.s_n, s.r_n, s.log_holder, s.bound, s.sup, s.sup_bound
            ));
        }
    }
    out.file("c08-holder.csv", csv);
}

fn tilted_composition(mix_a: &Ensemble, seed: u64, out: &mut Findings) {
    let h =
        TrigPoly { constant: 1.0, terms: vec![TrigTerm { k: 1, cos: 0.5, sin: 0.0 }] }.grid(GRID);
    let f = TrigPoly::cos_mode(1).plus(&TrigPoly::sin_mode(2).scaled(0.5));
    let tilts = |t: f64| -> Vec<Tilt> {
        (0..8).map(|k| Tilt { t: t * (1.0 + 0.1 * k as f64), f: f.clone() }).collect()
    };
    let mut csv = String::from("ensemble,sequence,n,max_abs_diff\n");
    let mut worst: f64 = 0.0;
    let mut plain_exact = true;
    let dbl = doubling();
    for (label, e, sequences) in [("doubling", &dbl, 1u64), ("mix-A", mix_a, 10)] {
        let Some(ops) = operators(e, out) else { return };
        for s in 0..sequences {
            let omega = sample_sequence(e, 8, seed, s);
            for n in 1..=8 {
                match tilted_quenched_push(&ops, e, &omega.entries, &tilts(0.15), &h, n) {
                    Ok(p) => {
                        worst = worst.max(p.max_abs_diff);
                        csv.push_str(&format!("{label},{s},{n},{}\n", p.max_abs_diff));
                    }
                    Err(err) => return out.fail("tilted push", err),
                }
            }
            // At t = 0 the tilted grid operators are the plain ones.
            let zero = match tilted_quenched_push(&ops, e, &omega.entries, &tilts(0.0), &h, 8) {
                Ok(p) => p,
                Err(err) => return out.fail("untilted push", err),
            };
            let mut plain: Vec<Complex64> = h.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            for &id in &omega.entries {
                match ops.transfer_of(e, id) {
                    Ok(st) => plain = st.apply(&plain),
                    Err(err) => return out.fail("transfer operator", err),
                }
            }
            plain_exact &= zero.left == plain;
            worst = worst.max(zero.max_abs_diff);
        }
    }
    out.check(worst <= 1e-6, format!("left/right max difference {worst:.1e} for n <= 8"));
    out.check(plain_exact, "t = 0 reduces to the plain operators exactly".into());
    out.file("c09-tilted.csv", csv);
}

fn multiple_correlation(mix_a: &Ensemble, seed: u64, out: &mut Findings) {
    let Some(ops) = operators(mix_a, out) else { return };
    let Some(r) = stationary(mix_a, &ops, 1e-12, out) else { return };
    let st = Stationary::new(mix_a, &ops, &r.phi).expect("grids match");
    let fs = [TrigPoly::cos_mode(1)];
    match multiple_correlation_check(
        &st,
        &fs,
        &[0.1],
        2,
        2,
        30,
        1_000_000,
        seed,
        TiltBounds::default(),
    ) {
        Ok(rep) => {
            match rep.fit {
                Some(fit) => out.check(
                    rep.decays,
                    format!("envelope slope {:.3}, R^2 {:.3}", fit.slope, fit.r2),
                ),
                None => out.check(false, "no envelope fit".into()),
            }
            out.check(rep.zero_at_t0, "t = 0 curve identically zero".into());
            out.file("c10-multiple-correlation.csv", rep.to_csv());
        }
        Err(e) => out.fail("multiple correlations", e),
    }
}
