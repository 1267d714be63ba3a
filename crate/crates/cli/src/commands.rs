//! Experiment subcommands. Each one calls a single family of library
//! operations, writes its curves and summary, and turns the library's
//! verdicts into checks.

use std::fmt::Display;

use rayon::prelude::*;
use rcm_core::coupling::{
    coupling_count_tail, enumerate_second_moment_r, exact_second_moment_r, mc_second_moment_r,
    mean_r, mean_r_sup, rde_simulate, verify_memory_loss, CoefficientLaw, CouplingConstants,
};
use rcm_core::density::DensityGrid;
use rcm_core::ensemble::{check_standing_assumption, sample_sequence, Ensemble};
use rcm_core::limit::{
    clt_test, coboundary_residual, correlation_mc, correlation_operator, covariance_batch_means,
    covariance_series, directional_variance, finite_horizon_covariance, multiple_correlation_check,
    variance_growth_check, LimitError, Stationary, TiltBounds,
};
use rcm_core::observable::TrigPoly;
use rcm_core::stats::{wilson_interval, Z99};
use rcm_core::trajectory::occupation_histogram;
use rcm_core::transfer::{compute_stationary, OperatorSet, StationaryResult, LOWER_BOUND_GRID_TOL};
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, LoadedConfig};
use crate::derive_seed;
use crate::output::{Check, RunDir, DATA, SUMMARY};

/// Monte Carlo and operator estimates must agree within this many
/// standard errors.
pub const AGREEMENT_Z: f64 = 4.0;
/// Largest acceptable `L1` stationary residual.
pub const STATIONARY_RESIDUAL_MAX: f64 = 1e-8;
/// Histogram bins must match the stationary density within this many
/// standard errors.
pub const HISTOGRAM_Z: f64 = 3.0;
/// `Sigma^2` below this counts as degenerate.
pub const DEGENERATE_SIGMA2: f64 = 1e-3;
/// `f - g + g o T` below this counts as a coboundary.
pub const COBOUNDARY_RESIDUAL_MAX: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Moments,
    Stationary,
    MemoryLoss,
    Coupling,
    RdeTail,
    Correlation,
    Covariance,
    Clt,
    Coboundary,
    MultiCorr,
}

impl Subcommand {
    pub const ALL: [Subcommand; 10] = [
        Subcommand::Moments,
        Subcommand::Stationary,
        Subcommand::MemoryLoss,
        Subcommand::Coupling,
        Subcommand::RdeTail,
        Subcommand::Correlation,
        Subcommand::Covariance,
        Subcommand::Clt,
        Subcommand::Coboundary,
        Subcommand::MultiCorr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Moments => "moments",
            Subcommand::Stationary => "stationary",
            Subcommand::MemoryLoss => "memory-loss",
            Subcommand::Coupling => "coupling",
            Subcommand::RdeTail => "rde-tail",
            Subcommand::Correlation => "correlation",
            Subcommand::Covariance => "covariance",
            Subcommand::Clt => "clt",
            Subcommand::Coboundary => "coboundary",
            Subcommand::MultiCorr => "multi-corr",
        }
    }
}

/// Seed identifiers of the subcommands, so that each draws its own streams.
fn seed_id(cmd: Subcommand) -> u64 {
    100 + Subcommand::ALL.iter().position(|&c| c == cmd).expect("listed") as u64
}

/// Records a failing check for a library error and yields `None`.
pub fn attempt<T, E: Display>(checks: &mut Vec<Check>, name: &str, r: Result<T, E>) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            checks.push(Check::new(name, false, format!("error: {e}")));
            None
        }
    }
}

/// Everything a subcommand needs besides the run directory.
pub struct Context<'a> {
    pub loaded: &'a LoadedConfig,
    pub ensemble: &'a Ensemble,
}

impl Context<'_> {
    fn cfg(&self) -> &ExperimentConfig {
        &self.loaded.config
    }

    fn seed(&self, cmd: Subcommand, stream: u64) -> u64 {
        derive_seed(derive_seed(self.cfg().seed, seed_id(cmd)), stream)
    }

    fn stationary(&self, run: &mut RunDir) -> Result<(OperatorSet, StationaryResult), String> {
        let c = self.cfg();
        let ops = run
            .timed("operators", || OperatorSet::new(self.ensemble, c.grid))
            .map_err(|e| e.to_string())?;
        let res = run
            .timed("stationary density", || {
                compute_stationary(self.ensemble, &ops, c.stationary.tol, c.stationary.max_iter)
            })
            .map_err(|e| e.to_string())?;
        Ok((ops, res))
    }

    fn projected(&self) -> TrigPoly {
        self.cfg().observable.project(&self.cfg().direction())
    }
}

pub fn run_subcommand(
    cmd: Subcommand,
    ctx: &Context<'_>,
    run: &mut RunDir,
) -> std::io::Result<Vec<Check>> {
    match cmd {
        Subcommand::Moments => moments(ctx, run),
        Subcommand::Stationary => stationary(ctx, run),
        Subcommand::MemoryLoss => memory_loss(ctx, run),
        Subcommand::Coupling => coupling(ctx, run),
        Subcommand::RdeTail => rde_tail(ctx, run),
        Subcommand::Correlation => correlation(ctx, run),
        Subcommand::Covariance => covariance(ctx, run),
        Subcommand::Clt => clt(ctx, run),
        Subcommand::Coboundary => coboundary(ctx, run),
        Subcommand::MultiCorr => multi_corr(ctx, run),
    }
}

fn z_score(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff / se
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn moments(ctx: &Context<'_>, run: &mut RunDir) -> std::io::Result<Vec<Check>> {
    let c = ctx.cfg();
    let e = ctx.ensemble;
    let mut checks = Vec::new();
    let report = check_standing_assumption(e, c.alpha);
    let m = *e.moments();
    let mut summary = json!({
        "sup_mean_r": mean_r_sup(&m),
        "moment_lower_bound": (-mean_r_sup(&m)).exp(),
    });
    match &report {
        Ok(r) => {
            summary["standing_assumption"] = json!(r);
            checks.push(Check::new("standing assumption", r.pass, r.to_string()));
        }
        Err(err) => checks.push(Check::new("standing assumption", false, err.to_string())),
    }
    // Monte Carlo and enumeration need an explicit coefficient law.
    let law = e.is_finite().then(|| CoefficientLaw::from_ensemble(e).ok()).flatten();
    let mut csv = String::from("n,mean_r,second_moment,enumerated,mc_mean,mc_se,z\n");
    let mut max_z: f64 = 0.0;
    let seed = ctx.seed(Subcommand::Moments, 0);
    let rows = run.timed("second moments", || {
        (1..=c.moments.n_max)
            .into_par_iter()
            .map(|n| {
                let exact = exact_second_moment_r(&m, n).ok().map(|s| s.value);
                let enumerated = law
                    .as_ref()
                    .filter(|l| (l.atoms.len() as f64).powi(n as i32) <= 1e6)
                    .map(|l| enumerate_second_moment_r(l, n));
                let mc = law.as_ref().map(|l| {
                    mc_second_moment_r(l, n, c.moments.samples, derive_seed(seed, n as u64))
                });
                (n, exact, enumerated, mc)
            })
            .collect::<Vec<_>>()
    });
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut max_rel: f64 = 0.0;
    for (n, exact, enumerated, mc) in rows {
        let z = match (exact, mc) {
            (Some(x), Some((mean, se))) => Some(z_score(mean - x, se)),
            _ => None,
        };
        if let Some(z) = z {
            max_z = max_z.max(z.abs());
        }
        if let (Some(x), Some(en)) = (exact, enumerated) {
            max_rel = max_rel.max((x - en).abs() / en.abs().max(f64::MIN_POSITIVE));
        }
        csv.push_str(&format!(
            "{n},{},{},{},{},{},{}\n",
            mean_r(&m, n),
            fmt(exact),
            fmt(enumerated),
            fmt(mc.map(|p| p.0)),
            fmt(mc.map(|p| p.1)),
            fmt(z)
        ));
    }
    if law.is_some() {
        checks.push(Check::new(
            "enumeration agreement",
            max_rel <= 1e-12,
            format!("max relative difference {max_rel:.3e}"),
        ));
        checks.push(Check::new(
            "monte carlo agreement",
            max_z <= AGREEMENT_Z,
            format!("max |z| = {max_z:.3}"),
        ));
    }
    summary["max_z"] = json!(max_z);
    run.write(DATA, &csv)?;
    run.write_json(SUMMARY, &summary)?;
    Ok(checks)
}

fn stationary(ctx: &Context<'_>, run: &mut RunDir) -> std::io::Result<Vec<Check>> {
    let c = ctx.cfg();
    let mut checks = Vec::new();
    let Some((_ops, res)) = attempt(&mut checks, "stationary density", ctx.stationary(run)) else {
        run.write_json(SUMMARY, &json!({}))?;
        return Ok(checks);
    };
    checks.push(Check::new(
        "residual",
        res.residual <= STATIONARY_RESIDUAL_MAX,
        format!("{:.3e} after {} iterations", res.residual, res.iterations),
    ));
    checks.push(Check::new("positive", res.inf_phi > 0.0, format!("inf phi = {:.6}", res.inf_phi)));
    checks.push(Check::new(
        "moment lower bound",
        res.inf_phi >= res.moment_lower_bound - LOWER_BOUND_GRID_TOL,
        format!("inf phi = {:.6}, bound = {:.6}", res.inf_phi, res.moment_lower_bound),
    ));
    let seed = ctx.seed(Subcommand::Stationary, 0);
    let st = &c.stationary;
    let hist = run.timed("occupation histogram", || {
        occupation_histogram(ctx.ensemble, &res.phi, st.histogram_steps, st.bins, st.batches, seed)
    });
    let mut summary = json!({
        "residual": res.residual,
        "iterations": res.iterations,
        "method": res.method,
        "inf_phi": res.inf_phi,
        "lip_phi": res.lip_phi,
        "moment_lower_bound": res.moment_lower_bound,
    });
    if let Some(h) = attempt(&mut checks, "occupation histogram", hist) {
        checks.push(Check::new(
            "occupation histogram",
            h.within(HISTOGRAM_Z),
            format!("max |z| = {:.3} over {} bins", h.max_abs_z, h.bins.len()),
        ));
        summary["histogram_max_abs_z"] = json!(h.max_abs_z);
        run.write("histogram.csv", &h.to_csv())?;
    }
    run.write(DATA, &res.phi.to_csv())?;
    run.write_json(SUMMARY, &summary)?;
    Ok(checks)
}

fn constants(
    ctx: &Context<'_>,
    k: Option<f64>,
) -> Result<(CoefficientLaw, CouplingConstants), String> {
    let c = ctx.cfg();
    let law = CoefficientLaw::from_ensemble(ctx.ensemble).map_err(|e| e.to_string())?;
    let consts =
        CouplingConstants::new(&law, c.alpha, k, c.coupling.k_dprime).map_err(|e| e.to_string())?;
    Ok((law, consts))
}

fn initial_density(n: usize, log_psi: &TrigPoly) -> Result<DensityGrid, String> {
    DensityGrid::from_fn(n, |x| log_psi.eval(x).exp())
        .and_then(DensityGrid::normalized)
        .map_err(|e| e.to_string())
}

fn memory_loss(ctx: &Context<'_>, run: &mut RunDir) -> std::io::Result<Vec<Check>> {
    let c = ctx.cfg();
    let mut checks = Vec::new();
    let Some((_, consts)) =
        attempt(&mut checks, "coupling constants", constants(ctx, c.coupling.k.value()))
    else {
        run.write_json(SUMMARY, &json!({}))?;
        return Ok(checks);
    };
    let ops = match run.timed("operators", || OperatorSet::new(ctx.ensemble, c.grid)) {
        Ok(o) => o,
        Err(e) => {
            checks.push(Check::new("operators", false, e.to_string()));
            run.write_json(SUMMARY, &json!({}))?;
            return Ok(checks);
        }
    };
    let psi: Result<Vec<DensityGrid>, String> =
        c.coupling.log_psi.iter().map(|l| initial_density(c.grid, l)).collect();
    let Some(psi) = attempt(&mut checks, "initial densities", psi) else {
        run.write_json(SUMMARY, &json!({}))?;
        return Ok(checks);
    };
    let seed = ctx.seed(Subcommand::MemoryLoss, 0);
    let horizon = c.coupling.horizon;
    let reports = run.timed("memory loss", || {
        (0..c.coupling.sequences)
            .into_par_iter()
            .map(|i| {
                let omega = sample_sequence(ctx.ensemble, horizon, seed, i as u64);
                verify_memory_loss(&ops, ctx.ensemble, &omega, &psi[0], &psi[1], &consts, horizon)
            })
            .collect::<Result<Vec<_>, _>>()
    });
    let Some(reports) = attempt(&mut checks, "memory loss", reports) else {
        run.write_json(SUMMARY, &json!({ "constants": consts }))?;
        return Ok(checks);
    };
    let mut csv = String::from("sequence,n,distance,bound,count\n");
    for (i, r) in reports.iter().enumerate() {
        for n in 0..=horizon {
            csv.push_str(&format!("{i},{n},{},{},{}\n", r.distance[n], r.bound[n], r.counts[n]));
        }
    }
    let violations: usize = reports.iter().map(|r| r.violations).sum();
    let max_excess = reports.iter().map(|r| r.max_excess).fold(f64::NEG_INFINITY, f64::max);
    let max_increase = reports.iter().map(|r| r.max_increase).fold(f64::NEG_INFINITY, f64::max);
    checks.push(Check::new(
        "memory loss bound",
        violations == 0,
        format!("{violations} violations, max excess {max_excess:.3e}"),
    ));
    run.write(DATA, &csv)?;
    run.write_json(
        SUMMARY,
        &json!({
            "constants": consts,
            "sequences": reports.len(),
            "horizon": horizon,
            "violations": violations,
            "max_excess": max_excess,
            "max_increase": max_increase,
            "mean_final_count":
                reports.iter().map(|r| r.counts[horizon] as f64).sum::<f64>() / reports.len() as f64,
        }),
    )?;
    Ok(checks)
}

fn coupling(ctx: &Context<'_>, run: &mut RunDir) -> std::io::Result<Vec<Check>> {
    let c = ctx.cfg();
    let mut checks = Vec::new();
    let Some((_, consts)) =
        attempt(&mut checks, "coupling constants", constants(ctx, c.coupling.k.value()))
    else {
        run.write_json(SUMMARY, &json!({}))?;
        return Ok(checks);
    };
    let seed = ctx.seed(Subcommand::Coupling, 0);
    let rep = run.timed("coupling counts", || {
        coupling_count_tail(
            ctx.ensemble,
            &consts,
            c.coupling.t,
            c.coupling.horizon,
            c.coupling.sequences,
            seed,
        )
    });
    let Some(rep) = attempt(&mut checks, "coupling counts", rep) else {
        run.write_json(SUMMARY, &json!({ "constants": consts }))?;
        return Ok(checks);
    };
    let mut csv = String::from("n,probability,wilson_lo,wilson_hi,bound\n");
    let mut violations = 0;
    for &(n, p, bound) in &rep.curve {
        let hits = (p * rep.sequences as f64).round() as u64;
        let (lo, hi) = wilson_interval(hits, rep.sequences as u64, Z99);
        if lo > bound {
            violations += 1;
        }
        csv.push_str(&format!("{n},{p},{lo},{hi},{bound}\n"));
    }
    checks.push(Check::new(
        "coupling count tail",
        violations == 0,
        format!("{violations} lags where the Wilson band lies above D theta^n"),
    ));
    run.write(DATA, &csv)?;
    run.write_json(SUMMARY, &json!({ "constants": consts, "report": rep }))?;
    Ok(checks)
}

fn rde_tail(ctx: &Context<'_>, run: &mut RunDir) -> std::io::Result<Vec<Check>> {
    let c = ctx.cfg();
    let mut checks = Vec::new();
    let law = match &c.rde.law {
        Some(atoms) => CoefficientLaw::new(atoms.iter().map(|a| (a[0], a[1], a[2])).collect())
            .map_err(|e| e.to_string()),
        None => CoefficientLaw::from_ensemble(ctx.ensemble).map_err(|e| e.to_string()),
    };
    let Some(law) = attempt(&mut checks, "coefficient law", law) else {
        run.write_json(SUMMARY, &json!({}))?;
        return Ok(checks);
    };
    let k = c.rde.k.value().unwrap_or(CouplingConstants::min_k(&law) + 1.0);
    let seed = ctx.seed(Subcommand::RdeTail, 0);
    let rep = run.timed("first passage", || {
        rde_simulate(&law, c.rde.ell, k, c.rde.n_max, c.rde.samples, seed)
    });
    let Some(rep) = attempt(&mut checks, "first passage", rep) else {
        run.write_json(SUMMARY, &json!({}))?;
        return Ok(checks);
    };
    let mut csv = String::from("n,survivors,empirical,wilson_lo,wilson_hi,bound\n");
    for p in &rep.curve {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.n, p.survivors, p.empirical, p.wilson_lo, p.wilson_hi, p.bound
        ));
    }
    checks.push(Check::new(
        "tail bound",
        rep.violations == 0,
        format!("{} violations, max empirical/bound {:.4}", rep.violations, rep.max_ratio),
    ));
    run.write(DATA, &csv)?;
    run.write_json(
        SUMMARY,
        &json!({
            "law": law.atoms,
            "ell": rep.ell,
            "k": rep.k,
            "q": rep.q,
            "samples": rep.samples,
            "violations": rep.violations,
            "max_ratio": rep.max_ratio,
        }),
    )?;
    Ok(checks)
}

/// Runs `body` with the stationary setup, or records why it is missing.
fn with_stationary(
    ctx: &Context<'_>,
    run: &mut RunDir,
    body: impl FnOnce(
        &Stationary<'_>,
        &StationaryResult,
        &mut RunDir,
        &mut Vec<Check>,
    ) -> std::io::Result<()>,
) -> std::io::Result<Vec<Check>> {
    let mut checks = Vec::new();
    let Some((ops, res)) = attempt(&mut checks, "stationary density", ctx.stationary(run)) else {
        run.write_json(SUMMARY, &json!({}))?;
        return Ok(checks);
    };
    let st = Stationary::new(ctx.ensemble, &ops, &res.phi).expect("grids match");
    body(&st, &res, run, &mut checks)?;
    Ok(checks)
}

fn correlation(ctx: &Context<'_>, run: &mut RunDir) -> std::io::Result<Vec<Check>> {
    let c = ctx.cfg();
    let f = ctx.projected();
    let g = c.correlation.g.clone().unwrap_or_else(|| f.clone());
    let seed = ctx.seed(Subcommand::Correlation, 0);
    with_stationary(ctx, run, |st, _, run, checks| {
        let n = st.n();
        let op = run.timed("operator curve", || {
            correlation_operator(st, &f.grid(n), &g.grid(n), c.correlation.n_max)
        });
        let mc = run.timed("monte carlo curve", || {
            correlation_mc(
                st,
                &|x| f.eval_fixed(x),
                &|x| g.eval_fixed(x),
                c.correlation.n_max,
                c.correlation.samples,
                seed,
            )
        });
        let (Some(op), Some(mc)) =
            (attempt(checks, "operator curve", op), attempt(checks, "monte carlo curve", mc))
        else {
            return run.write_json(SUMMARY, &json!({}));
        };
        let se = mc.se.clone().unwrap_or_default();
        let mut csv = String::from("lag,operator,mc,se,z\n");
        let mut max_z: f64 = 0.0;
        for (i, lag) in op.lags.iter().enumerate() {
            let z = z_score(mc.values[i].re - op.values[i].re, se[i]);
            max_z = max_z.max(z.abs());
            csv.push_str(&format!("{lag},{},{},{},{z}\n", op.values[i].re, mc.values[i].re, se[i]));
        }
        checks.push(Check::new(
            "monte carlo agreement",
            max_z <= AGREEMENT_Z,
            format!("max |z| = {max_z:.3}"),
        ));
        run.write(DATA, &csv)?;
        run.write_json(
            SUMMARY,
            &json!({ "operator": op.real(), "mc": mc.real(), "se": se, "max_z": max_z }),
        )
    })
}

fn covariance(ctx: &Context<'_>, run: &mut RunDir) -> std::io::Result<Vec<Check>> {
    let c = ctx.cfg();
    let obs = &c.observable;
    let v = c.direction();
    let cov = &c.covariance;
    let seed = ctx.seed(Subcommand::Covariance, 0);
    with_stationary(ctx, run, |st, _, run, checks| {
        let grids = obs.grids(st.n());
        let series = run
            .timed("correlation series", || covariance_series(st, &grids, cov.tail_tol, cov.m_max));
        let batch = run.timed("batch means", || {
            covariance_batch_means(st, obs, cov.n, cov.batches, derive_seed(seed, 0))
        });
        let exact_n =
            run.timed("finite horizon covariance", || finite_horizon_covariance(st, &grids, cov.n));
        let growth = run.timed("variance growth", || {
            variance_growth_check(
                st,
                obs,
                &v,
                &cov.growth_n,
                cov.growth_samples,
                derive_seed(seed, 1),
            )
        });
        let series = attempt(checks, "correlation series", series);
        let batch = attempt(checks, "batch means", batch);
        let exact_n = attempt(checks, "finite horizon covariance", exact_n);
        let growth = attempt(checks, "variance growth", growth);
        let mut summary = json!({});
        if let Some(s) = &series {
            checks.push(Check::new(
                "series converged",
                s.converged,
                format!("truncated at lag {}", s.truncation),
            ));
            summary["sigma2"] = json!(s.sigma2);
            summary["directional_variance"] = json!(s.quadratic_form(&v));
            summary["series"] = json!(s);
        }
        let mut csv = String::from("i,j,series,batch_means,batch_se,finite_horizon,z\n");
        if let (Some(b), Some(x)) = (&batch, &exact_n) {
            let se = b.se.as_ref().expect("batch means have standard errors");
            let d = b.dim();
            let mut max_z: f64 = 0.0;
            for i in 0..d {
                for j in 0..d {
                    let z = z_score(b.sigma2[i][j] - x[i][j], se[i][j]);
                    max_z = max_z.max(z.abs());
                    let s = series.as_ref().map_or(String::new(), |s| s.sigma2[i][j].to_string());
                    csv.push_str(&format!(
                        "{i},{j},{s},{},{},{},{z}\n",
                        b.sigma2[i][j], se[i][j], x[i][j]
                    ));
                }
            }
            checks.push(Check::new(
                "batch means agreement",
                max_z <= AGREEMENT_Z,
                format!("max |z| = {max_z:.3} against the exact n = {} covariance", cov.n),
            ));
            summary["batch_means"] = json!(b);
            summary["finite_horizon"] = json!(x);
        }
        if let Some(g) = &growth {
            checks.push(Check::new(
                "variance growth",
                g.no_trend,
                format!("slope {:.3e} +- {:.3e}", g.slope, g.slope_se),
            ));
            run.write("growth.csv", &g.to_csv())?;
            summary["variance_growth"] = json!(g);
        }
        run.write(DATA, &csv)?;
        run.write_json(SUMMARY, &summary)
    })
}

/// Replications whose Kolmogorov-Smirnov test passes must be at least this
/// fraction of all replications, rounded down in the replications' favour.
fn required_passes(replications: usize) -> usize {
    replications - replications / 20
}

fn clt(ctx: &Context<'_>, run: &mut RunDir) -> std::io::Result<Vec<Check>> {
    let c = ctx.cfg();
    let obs = &c.observable;
    let v = c.direction();
    let seed = ctx.seed(Subcommand::Clt, 0);
    with_stationary(ctx, run, |st, _, run, checks| {
        let reps = run.timed("clt replications", || {
            (0..c.clt.replications)
                .map(|r| clt_test(st, obs, &v, c.clt.n, c.clt.samples, derive_seed(seed, r as u64)))
                .collect::<Result<Vec<_>, LimitError>>()
        });
        let Some(reps) = attempt(checks, "clt", reps) else {
            return run.write_json(SUMMARY, &json!({}));
        };
        let mut csv =
            String::from("replication,ks_statistic,ks_p_value,ad_statistic,ks_pass,ad_pass\n");
        for (r, rep) in reps.iter().enumerate() {
            csv.push_str(&format!(
                "{r},{},{},{},{},{}\n",
                rep.ks_statistic, rep.ks_p_value, rep.ad_statistic, rep.ks_pass, rep.ad_pass
            ));
        }
        let passes = reps.iter().filter(|r| r.ks_pass).count();
        let need = required_passes(reps.len());
        checks.push(Check::new(
            "normal limit",
            passes >= need,
            format!("{passes} of {} replications pass KS at 1% (need {need})", reps.len()),
        ));
        let warnings: Vec<&String> = reps.iter().filter_map(|r| r.warning.as_ref()).collect();
        run.write(DATA, &csv)?;
        run.write_json(
            SUMMARY,
            &json!({
                "variance": reps.first().map(|r| r.variance),
                "replications": reps.len(),
                "ks_passes": passes,
                "ad_passes": reps.iter().filter(|r| r.ad_pass).count(),
                "warnings": warnings,
            }),
        )
    })
}

fn coboundary(ctx: &Context<'_>, run: &mut RunDir) -> std::io::Result<Vec<Check>> {
    let c = ctx.cfg();
    let fv = ctx.projected();
    let seed = ctx.seed(Subcommand::Coboundary, 0);
    with_stationary(ctx, run, |st, _, run, checks| {
        let grid = fv.grid(st.n());
        let sigma2 = run.timed("directional variance", || directional_variance(st, &grid));
        let rep = run.timed("coboundary series", || {
            coboundary_residual(st, &grid, c.coboundary.m_max, seed)
        });
        let Some(sigma2) = attempt(checks, "directional variance", sigma2) else {
            return run.write_json(SUMMARY, &json!({}));
        };
        let (is_coboundary, mut summary) = match rep {
            Ok(r) => {
                let mut csv = String::from("x,f,g\n");
                for (j, (f, g)) in grid.iter().zip(&r.g).enumerate() {
                    csv.push_str(&format!("{},{f},{g}\n", j as f64 / grid.len() as f64));
                }
                run.write(DATA, &csv)?;
                let yes = r.converged && r.residual < COBOUNDARY_RESIDUAL_MAX;
                (
                    yes,
                    json!({
                        "residual": r.residual,
                        "per_map": r.per_map,
                        "coverage": r.coverage,
                        "terms": r.terms,
                        "converged": r.converged,
                    }),
                )
            }
            Err(LimitError::SeriesDiverged { m }) => {
                run.write(DATA, "x,f,g\n")?;
                (false, json!({ "diverged_at": m }))
            }
            Err(e) => {
                checks.push(Check::new("coboundary series", false, e.to_string()));
                return run.write_json(SUMMARY, &json!({ "sigma2": sigma2 }));
            }
        };
        let degenerate = sigma2 < DEGENERATE_SIGMA2;
        checks.push(Check::new(
            "degeneracy matches coboundary",
            degenerate == is_coboundary,
            format!("sigma^2 = {sigma2:.3e}, coboundary: {is_coboundary}"),
        ));
        summary["sigma2"] = json!(sigma2);
        summary["is_coboundary"] = json!(is_coboundary);
        run.write_json(SUMMARY, &summary)
    })
}

fn multi_corr(ctx: &Context<'_>, run: &mut RunDir) -> std::io::Result<Vec<Check>> {
    let c = ctx.cfg();
    let mc = &c.multi_corr;
    // One observable per factor when the configuration lists m + k + 1 of
    // them; otherwise every factor uses the projection v^T f.
    let fs = if c.observable.dim() == mc.m + mc.k + 1 {
        c.observable.components.clone()
    } else {
        vec![ctx.projected()]
    };
    let seed = ctx.seed(Subcommand::MultiCorr, 0);
    let bounds = TiltBounds { epsilon: mc.epsilon, holder: mc.holder };
    with_stationary(ctx, run, |st, _, run, checks| {
        let rep = run.timed("multiple correlations", || {
            multiple_correlation_check(
                st, &fs, &mc.t, mc.m, mc.k, mc.n_max, mc.samples, seed, bounds,
            )
        });
        let Some(rep) = attempt(checks, "multiple correlations", rep) else {
            return run.write_json(SUMMARY, &json!({}));
        };
        let fit = rep.fit.map(|f| json!({"slope": f.slope, "r2": f.r2, "points": f.points}));
        checks.push(Check::new(
            "envelope decays",
            rep.decays,
            format!("fit {}", fit.clone().unwrap_or(Value::Null)),
        ));
        checks.push(Check::new("zero at t = 0", rep.zero_at_t0, String::new()));
        checks.push(Check::new(
            "monte carlo agreement",
            rep.max_z <= AGREEMENT_Z,
            format!("max |z| = {:.3}", rep.max_z),
        ));
        run.write(DATA, &rep.to_csv())?;
        run.write_json(
            SUMMARY,
            &json!({
                "m": rep.m,
                "k": rep.k,
                "fit": rep.fit,
                "mc_fit": rep.mc_fit,
                "max_z": rep.max_z,
                "decays": rep.decays,
                "zero_at_t0": rep.zero_at_t0,
            }),
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_count_rule() {
        assert_eq!(required_passes(40), 38);
        assert_eq!(required_passes(1), 1);
        assert_eq!(required_passes(19), 19);
        assert_eq!(required_passes(20), 19);
    }

    #[test]
    fn seed_ids_are_distinct() {
        let ids: std::collections::BTreeSet<u64> =
            Subcommand::ALL.iter().map(|&c| seed_id(c)).collect();
        assert_eq!(ids.len(), Subcommand::ALL.len());
    }
}
