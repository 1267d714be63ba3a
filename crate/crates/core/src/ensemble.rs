//! Selection laws for the random maps and the moments they induce.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maps::{CircleMap, MapError, MapKind, MapSample};
use crate::rng::{purpose, StreamRng};

/// Minimum Monte Carlo sample size for family moments.
pub const MIN_MC_MOMENT_SAMPLES: usize = 10_000;
/// Default Gauss-Legendre order for uniform parameter laws.
pub const DEFAULT_QUADRATURE_NODES: usize = 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("invalid ensemble: {0}")]
    Invalid(String),
    #[error("standing assumption violated: {moment} = {value} (report: {report})")]
    AssumptionViolated { moment: &'static str, value: f64, report: Box<MomentReport> },
}

/// Which template parameter a one-parameter family varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyParam {
    C,
    A,
    Phase,
}

impl FamilyParam {
    fn apply(self, base: &CircleMap, value: f64) -> Result<CircleMap, MapError> {
        let (mut c, mut a, mut phase) = (base.c, base.a, base.phase);
        match self {
            FamilyParam::C => c = value,
            FamilyParam::A => a = value,
            FamilyParam::Phase => phase = value,
        }
        CircleMap::new(base.kind, base.d, c, a, phase)
    }
}

pub type ParamSampler = Arc<dyn Fn(&mut StreamRng) -> f64 + Send + Sync>;

/// Law of the scalar family parameter.
#[derive(Clone)]
pub enum ParamLaw {
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// User-supplied sampler with optional quadrature nodes `(value, weight)`.
    Custom {
        sampler: ParamSampler,
        nodes: Option<Vec<(f64, f64)>>,
    },
}

impl fmt::Debug for ParamLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamLaw::Uniform { lo, hi } => write!(f, "Uniform[{lo}, {hi}]"),
            ParamLaw::Custom { nodes, .. } => {
                write!(f, "Custom(nodes: {})", nodes.as_ref().map_or(0, Vec::len))
            }
        }
    }
}

impl ParamLaw {
    pub fn sample(&self, rng: &mut StreamRng) -> f64 {
        match self {
            ParamLaw::Uniform { lo, hi } => lo + (hi - lo) * rng.uniform(),
            ParamLaw::Custom { sampler, .. } => sampler(rng),
        }
    }

    fn quadrature(&self, order: usize) -> Option<Vec<(f64, f64)>> {
        match self {
            ParamLaw::Uniform { lo, hi } => Some(
                gauss_legendre(order)
                    .into_iter()
                    .map(|(z, w)| (0.5 * (lo + hi) + 0.5 * (hi - lo) * z, 0.5 * w))
                    .collect(),
            ),
            ParamLaw::Custom { nodes, .. } => nodes.clone(),
        }
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(order: usize) -> Vec<(f64, f64)> {
    assert!(order >= 1);
    let n = order;
    let mut out = Vec::with_capacity(n);
    for i in 1..=n {
        let mut z = (std::f64::consts::PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j - 1) as f64 * z * p2 - (j - 1) as f64 * p3) / j as f64;
            }
            dp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let step = p1 / dp;
            z -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        out.push((z, 2.0 / ((1.0 - z * z) * dp * dp)));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// How family moments are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentMethod {
    Quadrature { order: usize },
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentSource {
    Exact,
    Quadrature,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub weight: f64,
    pub sample: MapSample,
}

#[derive(Debug, Clone)]
pub struct Family {
    pub base: CircleMap,
    pub param: FamilyParam,
    pub law: ParamLaw,
    /// Quadrature nodes as weighted map samples; empty when unavailable.
    pub nodes: Vec<Atom>,
}

#[derive(Debug, Clone)]
pub enum SelectionLaw {
    Finite(Vec<Atom>),
    Family(Family),
}

/// Weighted `(lambda, delta)` points from which all moments are computed.
#[derive(Debug, Clone, PartialEq)]
struct MomentPoints {
    points: Vec<(f64, f64, f64)>,
    source: MomentSource,
}

impl MomentPoints {
    fn mean(&self, h: impl Fn(f64, f64) -> f64) -> f64 {
        self.points.iter().map(|&(w, l, d)| w * h(l, d)).sum()
    }

    fn std_error(&self, h: impl Fn(f64, f64) -> f64) -> Option<f64> {
        if self.source != MomentSource::MonteCarlo {
            return None;
        }
        let m = self.points.len() as f64;
        let mean = self.mean(&h);
        let var =
            self.points.iter().map(|&(_, l, d)| (h(l, d) - mean).powi(2)).sum::<f64>() / (m - 1.0);
        Some((var / m).sqrt())
    }
}

/// The moments entering the standing assumption and the coupling constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub inv_lambda: f64,
    pub inv_lambda2: f64,
    pub delta: f64,
    pub delta2: f64,
    pub inv_lambda_delta: f64,
    pub source: MomentSource,
}

/// The selection law `eta`.
#[derive(Debug, Clone)]
pub struct Ensemble {
    law: SelectionLaw,
    points: MomentPoints,
    moments: Moments,
    cumulative: Vec<f64>,
}

impl Ensemble {
    /// Finite mixture from `(weight, map)` pairs.
    pub fn finite(atoms: Vec<(f64, CircleMap)>) -> Result<Self, EnsembleError> {
        if atoms.is_empty() {
            return Err(EnsembleError::Invalid("no atoms".into()));
        }
        let total: f64 = atoms.iter().map(|a| a.0).sum();
        if atoms.iter().any(|a| !(a.0 >= 0.0) || !a.0.is_finite()) {
            return Err(EnsembleError::Invalid("weights must be nonnegative".into()));
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(EnsembleError::Invalid(format!("weights sum to {total}, not 1")));
        }
        let atoms = atoms
            .into_iter()
            .map(|(weight, map)| Ok(Atom { weight, sample: MapSample::new(map)? }))
            .collect::<Result<Vec<_>, MapError>>()?;
        let points = MomentPoints {
            points: atoms.iter().map(|a| (a.weight, a.sample.lambda, a.sample.delta)).collect(),
            source: MomentSource::Exact,
        };
        let mut acc = 0.0;
        let cumulative = atoms
            .iter()
            .map(|a| {
                acc += a.weight;
                acc
            })
            .collect();
        Ok(Self::assemble(SelectionLaw::Finite(atoms), points, cumulative))
    }

    /// Single-map ensemble.
    pub fn deterministic(map: CircleMap) -> Result<Self, EnsembleError> {
        Self::finite(vec![(1.0, map)])
    }

    /// One-parameter family `param ~ law` around the `base` template.
    pub fn family(
        base: CircleMap,
        param: FamilyParam,
        law: ParamLaw,
        method: MomentMethod,
    ) -> Result<Self, EnsembleError> {
        let order = match method {
            MomentMethod::Quadrature { order } => order,
            MomentMethod::MonteCarlo { .. } => DEFAULT_QUADRATURE_NODES,
        };
        let nodes = match law.quadrature(order) {
            Some(nodes) => nodes
                .into_iter()
                .map(|(v, w)| {
                    Ok(Atom { weight: w, sample: MapSample::new(param.apply(&base, v)?)? })
                })
                .collect::<Result<Vec<_>, MapError>>()?,
            None => Vec::new(),
        };
        let points = match method {
            MomentMethod::Quadrature { .. } => {
                if nodes.is_empty() {
                    return Err(EnsembleError::Invalid(
                        "quadrature requested but the parameter law has no nodes".into(),
                    ));
                }
                MomentPoints {
                    points: nodes
                        .iter()
                        .map(|a| (a.weight, a.sample.lambda, a.sample.delta))
                        .collect(),
                    source: MomentSource::Quadrature,
                }
            }
            MomentMethod::MonteCarlo { samples, seed } => {
                if samples < MIN_MC_MOMENT_SAMPLES {
                    return Err(EnsembleError::Invalid(format!(
                        "Monte Carlo moments need at least {MIN_MC_MOMENT_SAMPLES} samples, got {samples}"
                    )));
                }
                let mut rng = StreamRng::new(seed, purpose::MOMENTS, 0);
                let w = 1.0 / samples as f64;
                let mut points = Vec::with_capacity(samples);
                for _ in 0..samples {
                    let s = MapSample::new(param.apply(&base, law.sample(&mut rng))?)?;
                    points.push((w, s.lambda, s.delta));
                }
                MomentPoints { points, source: MomentSource::MonteCarlo }
            }
        };
        let family = Family { base, param, law, nodes };
        Ok(Self::assemble(SelectionLaw::Family(family), points, Vec::new()))
    }

    fn assemble(law: SelectionLaw, points: MomentPoints, cumulative: Vec<f64>) -> Self {
        let moments = Moments {
            inv_lambda: points.mean(|l, _| 1.0 / l),
            inv_lambda2: points.mean(|l, _| 1.0 / (l * l)),
            delta: points.mean(|_, d| d),
            delta2: points.mean(|_, d| d * d),
            inv_lambda_delta: points.mean(|l, d| d / l),
            source: points.source,
        };
        Self { law, points, moments, cumulative }
    }

    pub fn law(&self) -> &SelectionLaw {
        &self.law
    }

    pub fn moments(&self) -> &Moments {
        &self.moments
    }

    /// `<lambda^-p>` for arbitrary `p`.
    pub fn inv_lambda_power(&self, p: f64) -> f64 {
        self.points.mean(|l, _| l.powf(-p))
    }

    /// Atoms of a finite law, or quadrature atoms of a family.
    pub fn operator_atoms(&self) -> Result<&[Atom], EnsembleError> {
        match &self.law {
            SelectionLaw::Finite(atoms) => Ok(atoms),
            SelectionLaw::Family(f) if !f.nodes.is_empty() => Ok(&f.nodes),
            SelectionLaw::Family(_) => Err(EnsembleError::Invalid(
                "annealed operators need quadrature nodes for this family".into(),
            )),
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self.law, SelectionLaw::Finite(_))
    }

    /// One draw from `eta`.
    pub fn draw(&self, rng: &mut StreamRng) -> MapId {
        match &self.law {
            SelectionLaw::Finite(atoms) => {
                if atoms.len() == 1 {
                    return MapId::Atom(0);
                }
                let u = rng.uniform();
                let idx = self.cumulative.partition_point(|&c| c <= u);
                MapId::Atom(idx.min(atoms.len() - 1))
            }
            SelectionLaw::Family(f) => MapId::Param(f.law.sample(rng)),
        }
    }

    pub fn circle_map(&self, id: MapId) -> CircleMap {
        match (&self.law, id) {
            (SelectionLaw::Finite(atoms), MapId::Atom(i)) => atoms[i].sample.map,
            (SelectionLaw::Family(f), MapId::Param(v)) => f
                .param
                .apply(&f.base, v)
                .expect("family parameter outside the template's admissible range"),
            _ => panic!("map id {id:?} does not belong to this ensemble"),
        }
    }

    pub fn map_sample(&self, id: MapId) -> Result<MapSample, MapError> {
        match (&self.law, id) {
            (SelectionLaw::Finite(atoms), MapId::Atom(i)) => Ok(atoms[i].sample),
            _ => MapSample::new(self.circle_map(id)),
        }
    }
}

/// Identity of one sampled map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MapId {
    Atom(usize),
    Param(f64),
}

/// A sampled sequence `omega = (omega_1, omega_2, ...)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaSequence {
    pub seed: u64,
    pub stream: u64,
    pub entries: Vec<MapId>,
}

impl OmegaSequence {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The left shift `sigma^m omega`, as a view.
    pub fn shifted(&self, m: usize) -> &[MapId] {
        &self.entries[m.min(self.entries.len())..]
    }

    /// Summaries `(lambda, delta)` of the first `n` maps.
    pub fn summaries(&self, e: &Ensemble, n: usize) -> Result<Vec<MapSample>, MapError> {
        self.entries[..n].iter().map(|&id| e.map_sample(id)).collect()
    }

    pub fn maps(&self, e: &Ensemble, n: usize) -> Vec<CircleMap> {
        self.entries[..n].iter().map(|&id| e.circle_map(id)).collect()
    }
}

/// i.i.d. draws from `eta` on stream `stream` of `seed`.
pub fn sample_sequence(e: &Ensemble, n: usize, seed: u64, stream: u64) -> OmegaSequence {
    let mut rng = StreamRng::new(seed, purpose::SEQUENCE, stream);
    let entries = (0..n).map(|_| e.draw(&mut rng)).collect();
    OmegaSequence { seed, stream, entries }
}

/// Standard errors attached to Monte Carlo moment estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentErrors {
    pub inv_lambda: f64,
    pub inv_lambda2: f64,
    pub inv_lambda_2alpha: f64,
    pub delta: f64,
    pub delta2: f64,
    pub inv_lambda_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub alpha: f64,
    pub inv_lambda: f64,
    pub inv_lambda2: f64,
    pub inv_lambda_2alpha: f64,
    pub delta: f64,
    pub delta2: f64,
    pub inv_lambda_delta: f64,
    pub source: MomentSource,
    pub std_errors: Option<MomentErrors>,
    /// `<lambda^-1> <= <lambda^-2>^(1/2)`
    pub jensen_consistent: bool,
    pub pass: bool,
}

impl fmt::Display for MomentReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "<l^-1>={:.6} <l^-2>={:.6} <D>={:.6} <D^2>={:.6} ({:?})",
            self.inv_lambda, self.inv_lambda2, self.delta, self.delta2, self.source
        )
    }
}

/// Checks `<lambda^-2> < 1` and `<Delta^2> < inf`.
pub fn check_standing_assumption(e: &Ensemble, alpha: f64) -> Result<MomentReport, EnsembleError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(EnsembleError::Invalid(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let m = e.moments;
    let p = &e.points;
    let std_errors = (m.source == MomentSource::MonteCarlo).then(|| MomentErrors {
        inv_lambda: p.std_error(|l, _| 1.0 / l).unwrap_or(0.0),
        inv_lambda2: p.std_error(|l, _| 1.0 / (l * l)).unwrap_or(0.0),
        inv_lambda_2alpha: p.std_error(|l, _| l.powf(-2.0 * alpha)).unwrap_or(0.0),
        delta: p.std_error(|_, d| d).unwrap_or(0.0),
        delta2: p.std_error(|_, d| d * d).unwrap_or(0.0),
        inv_lambda_delta: p.std_error(|l, d| d / l).unwrap_or(0.0),
    });
    let pass = m.inv_lambda2 < 1.0 && m.delta2.is_finite();
    let report = MomentReport {
        alpha,
        inv_lambda: m.inv_lambda,
        inv_lambda2: m.inv_lambda2,
        inv_lambda_2alpha: e.inv_lambda_power(2.0 * alpha),
        delta: m.delta,
        delta2: m.delta2,
        inv_lambda_delta: m.inv_lambda_delta,
        source: m.source,
        std_errors,
        jensen_consistent: m.inv_lambda <= m.inv_lambda2.sqrt() * (1.0 + 1e-12),
        pass,
    };
    if !(m.inv_lambda2 < 1.0) {
        return Err(EnsembleError::AssumptionViolated {
            moment: "<lambda^-2>",
            value: m.inv_lambda2,
            report: Box::new(report),
        });
    }
    if !m.delta2.is_finite() {
        return Err(EnsembleError::AssumptionViolated {
            moment: "<Delta^2>",
            value: m.delta2,
            report: Box::new(report),
        });
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// JSON description

/// A scalar template parameter: fixed, or (for families) a law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamSpec {
    Fixed(f64),
    Law(LawSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawSpec {
    pub uniform: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomSpec {
    pub weight: f64,
    pub kind: MapKind,
    #[serde(default)]
    pub d: Option<i64>,
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default)]
    pub a: Option<f64>,
    #[serde(default)]
    pub phase: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub kind: MapKind,
    #[serde(default)]
    pub d: Option<i64>,
    #[serde(default)]
    pub c: Option<ParamSpec>,
    #[serde(default)]
    pub a: Option<ParamSpec>,
    #[serde(default)]
    pub phase: Option<ParamSpec>,
    /// Gauss-Legendre order for moments and annealed operators.
    #[serde(default)]
    pub quadrature_nodes: Option<usize>,
    /// Use Monte Carlo moments with this many draws instead of quadrature.
    #[serde(default)]
    pub mc_samples: Option<usize>,
}

/// `{"atoms": [...]}` or `{"family": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    #[serde(default)]
    pub atoms: Option<Vec<AtomSpec>>,
    #[serde(default)]
    pub family: Option<FamilySpec>,
}

fn default_degree(kind: MapKind, d: Option<i64>) -> i64 {
    d.unwrap_or(match kind {
        MapKind::Diffeo => 1,
        _ => 2,
    })
}

impl EnsembleSpec {
    /// Builds the ensemble; `seed` is used only for Monte Carlo moments.
    pub fn build(&self, seed: u64) -> Result<Ensemble, EnsembleError> {
        match (&self.atoms, &self.family) {
            (Some(atoms), None) => {
                let atoms = atoms
                    .iter()
                    .map(|a| {
                        let map = CircleMap::new(
                            a.kind,
                            default_degree(a.kind, a.d),
                            a.c.unwrap_or(0.0),
                            a.a.unwrap_or(0.0),
                            a.phase.unwrap_or(0.0),
                        )?;
                        Ok((a.weight, map))
                    })
                    .collect::<Result<Vec<_>, EnsembleError>>()?;
                Ensemble::finite(atoms)
            }
            (None, Some(f)) => {
                let mut varying = None;
                let mut fixed = [0.0; 3];
                for (slot, (name, spec)) in
                    [("c", &f.c), ("a", &f.a), ("phase", &f.phase)].into_iter().enumerate()
                {
                    match spec {
                        None => {}
                        Some(ParamSpec::Fixed(v)) => fixed[slot] = *v,
                        Some(ParamSpec::Law(law)) => {
                            if varying.is_some() {
                                return Err(EnsembleError::Invalid(
                                    "family: exactly one parameter may carry a law".into(),
                                ));
                            }
                            let [lo, hi] = law.uniform;
                            if !(lo <= hi) {
                                return Err(EnsembleError::Invalid(format!(
                                    "family.{name}: uniform bounds out of order"
                                )));
                            }
                            let param = match name {
                                "c" => FamilyParam::C,
                                "a" => FamilyParam::A,
                                _ => FamilyParam::Phase,
                            };
                            varying = Some((param, ParamLaw::Uniform { lo, hi }));
                        }
                    }
                }
                let (param, law) = varying.ok_or_else(|| {
                    EnsembleError::Invalid("family: one parameter must carry a law".into())
                })?;
                // The base map is validated at the law's midpoint.
                let mid = match &law {
                    ParamLaw::Uniform { lo, hi } => 0.5 * (lo + hi),
                    ParamLaw::Custom { .. } => unreachable!(),
                };
                let mut vals = fixed;
                vals[match param {
                    FamilyParam::C => 0,
                    FamilyParam::A => 1,
                    FamilyParam::Phase => 2,
                }] = mid;
                let base =
                    CircleMap::new(f.kind, default_degree(f.kind, f.d), vals[0], vals[1], vals[2])?;
                if let ParamLaw::Uniform { lo, hi } = law {
                    param.apply(&base, lo)?;
                    param.apply(&base, hi)?;
                }
                let method = match f.mc_samples {
                    Some(samples) => MomentMethod::MonteCarlo { samples, seed },
                    None => MomentMethod::Quadrature {
                        order: f.quadrature_nodes.unwrap_or(DEFAULT_QUADRATURE_NODES),
                    },
                };
                Ensemble::family(base, param, law, method)
            }
            _ => Err(EnsembleError::Invalid(
                "ensemble: exactly one of \"atoms\" or \"family\" must be given".into(),
            )),
        }
    }
}

/// The two-map mixture used throughout the experiments: 90% doubling and 10%
/// of the contracting diffeomorphism `x + 0.3 + (0.5/2pi) sin 2 pi x`.
pub fn mix_a() -> Ensemble {
    Ensemble::finite(vec![
        (0.9, CircleMap::linear(2, 0.0).expect("valid")),
        (0.1, CircleMap::diffeo(0.5, 0.3).expect("valid")),
    ])
    .expect("mix-A is a valid ensemble")
}

pub fn doubling() -> Ensemble {
    Ensemble::deterministic(CircleMap::linear(2, 0.0).expect("valid")).expect("valid")
}
