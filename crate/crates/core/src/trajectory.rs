//! Monte Carlo trajectories of the random composition `X_n`.
//!
//! Points are 64-bit fixed-point circle coordinates (see
//! [`CircleMap::step_fixed`]). Trajectory `i` under seed `s` always draws
//! from stream `(s, TRAJECTORY, i)`, so batching and thread count never
//! change a result.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{DensityError, DensityGrid, DensitySampler};
use crate::ensemble::Ensemble;
use crate::maps::{fixed_to_unit, CircleMap};
use crate::rng::{purpose, StreamRng};

/// Draws a map from `eta` and applies it, one step at a time.
#[derive(Debug, Clone, Copy)]
pub struct Walker<'a> {
    ensemble: &'a Ensemble,
    single: Option<CircleMap>,
}

impl<'a> Walker<'a> {
    pub fn new(ensemble: &'a Ensemble) -> Self {
        let single = match ensemble.law() {
            crate::ensemble::SelectionLaw::Finite(atoms) if atoms.len() == 1 => {
                Some(atoms[0].sample.map)
            }
            _ => None,
        };
        Self { ensemble, single }
    }

    #[inline]
    pub fn step(&self, x: u64, rng: &mut StreamRng) -> u64 {
        match &self.single {
            Some(map) => map.step_fixed(x, rng),
            None => self.ensemble.circle_map(self.ensemble.draw(rng)).step_fixed(x, rng),
        }
    }
}

pub fn trajectory_rng(seed: u64, index: usize) -> StreamRng {
    StreamRng::new(seed, purpose::TRAJECTORY, index as u64)
}

/// Splits `0..samples` into `batches` contiguous ranges of near-equal size
/// and evaluates `f` on each, in parallel, returning results in order.
pub fn batched<T, F>(samples: usize, batches: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let batches = batches.clamp(1, samples.max(1));
    (0..batches)
        .into_par_iter()
        .map(|b| (b * samples / batches)..((b + 1) * samples / batches))
        .map(f)
        .collect()
}

/// Visits `X_0, ..., X_{steps-1}` of trajectory `index`, with `X_0 ~ phi`.
pub fn walk(
    walker: &Walker<'_>,
    sampler: &DensitySampler,
    seed: u64,
    index: usize,
    steps: usize,
    mut visit: impl FnMut(usize, u64),
) {
    let mut rng = trajectory_rng(seed, index);
    let mut x = sampler.sample_fixed(&mut rng);
    for k in 0..steps {
        visit(k, x);
        if k + 1 < steps {
            x = walker.step(x, &mut rng);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinCheck {
    pub lo: f64,
    pub hi: f64,
    /// Mass of the bin under the grid density (trapezoid rule).
    pub expected: f64,
    pub observed: f64,
    pub se: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub steps: usize,
    pub batches: usize,
    pub bins: Vec<BinCheck>,
    pub max_abs_z: f64,
}

impl HistogramReport {
    pub fn within(&self, z: f64) -> bool {
        self.max_abs_z <= z
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lo,hi,expected,observed,se,z\n");
        for b in &self.bins {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                b.lo, b.hi, b.expected, b.observed, b.se, b.z
            ));
        }
        out
    }
}

/// Trapezoid mass of `[j/bins, (j+1)/bins)` for each bin; `bins` must divide
/// the grid size.
pub fn bin_masses(phi: &DensityGrid, bins: usize) -> Vec<f64> {
    let v = phi.values();
    let n = v.len();
    assert!(bins > 0 && n.is_multiple_of(bins), "bins must divide the grid size");
    let per = n / bins;
    (0..bins)
        .map(|b| {
            (b * per..(b + 1) * per).map(|j| 0.5 * (v[j] + v[(j + 1) % n])).sum::<f64>() / n as f64
        })
        .collect()
}

fn bin_of(x: u64, bins: usize) -> usize {
    ((fixed_to_unit(x) * bins as f64) as usize).min(bins - 1)
}

fn histogram_report(
    counts: &[Vec<u64>],
    per_batch: &[usize],
    expected: &[f64],
    steps: usize,
) -> HistogramReport {
    let bins = expected.len();
    let nb = counts.len() as f64;
    let mut out = Vec::with_capacity(bins);
    let mut max_abs_z: f64 = 0.0;
    for (b, &exp) in expected.iter().enumerate() {
        let fracs: Vec<f64> =
            counts.iter().zip(per_batch).map(|(c, &m)| c[b] as f64 / m as f64).collect();
        let total: u64 = counts.iter().map(|c| c[b]).sum();
        let observed = total as f64 / steps as f64;
        let mean = fracs.iter().sum::<f64>() / nb;
        let var = fracs.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (nb - 1.0);
        let se = (var / nb).sqrt();
        let z = if se > 0.0 {
            (observed - exp) / se
        } else if observed == exp {
            0.0
        } else {
            f64::INFINITY
        };
        max_abs_z = max_abs_z.max(z.abs());
        out.push(BinCheck {
            lo: b as f64 / bins as f64,
            hi: (b + 1) as f64 / bins as f64,
            expected: exp,
            observed,
            se,
            z,
        });
    }
    HistogramReport { steps, batches: counts.len(), bins: out, max_abs_z }
}

/// Occupation frequencies of one long trajectory started from `phi`,
/// compared with the bin masses of `phi`. Standard errors come from
/// `batches` consecutive blocks of the trajectory.
pub fn occupation_histogram(
    e: &Ensemble,
    phi: &DensityGrid,
    steps: usize,
    bins: usize,
    batches: usize,
    seed: u64,
) -> Result<HistogramReport, DensityError> {
    assert!(batches >= 2 && steps >= batches, "need at least two nonempty batches");
    let expected = bin_masses(phi, bins);
    let sampler = DensitySampler::new(phi)?;
    let walker = Walker::new(e);
    let mut counts = vec![vec![0u64; bins]; batches];
    let per_batch: Vec<usize> =
        (0..batches).map(|b| (b + 1) * steps / batches - b * steps / batches).collect();
    let mut batch = 0;
    let mut next_edge = per_batch[0];
    walk(&walker, &sampler, seed, 0, steps, |k, x| {
        if k == next_edge {
            batch += 1;
            next_edge += per_batch[batch];
        }
        counts[batch][bin_of(x, bins)] += 1;
    });
    Ok(histogram_report(&counts, &per_batch, &expected, steps))
}

/// Distribution of `X_1` for independent `X_0 ~ psi`, compared with the bin
/// masses of `target` (normally the annealed pushforward `P psi`). Standard
/// errors come from `batches` groups of independent samples.
pub fn one_step_histogram(
    e: &Ensemble,
    psi: &DensityGrid,
    target: &DensityGrid,
    samples: usize,
    bins: usize,
    batches: usize,
    seed: u64,
) -> Result<HistogramReport, DensityError> {
    let expected = bin_masses(target, bins);
    let sampler = DensitySampler::new(psi)?;
    let walker = Walker::new(e);
    let parts = batched(samples, batches, |range| {
        let mut c = vec![0u64; bins];
        let len = range.len();
        for i in range {
            walk(&walker, &sampler, seed, i, 2, |k, x| {
                if k == 1 {
                    c[bin_of(x, bins)] += 1;
                }
            });
        }
        (c, len)
    });
    let (counts, per_batch): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    Ok(histogram_report(&counts, &per_batch, &expected, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{doubling, mix_a};

    #[test]
    fn batches_cover_the_range_in_order() {
        let parts = batched(10, 3, |r| r);
        assert_eq!(parts, vec![0..3, 3..6, 6..10]);
        assert_eq!(batched(2, 5, |r| r.len()), vec![1, 1]);
    }

    #[test]
    fn trajectories_are_reproducible() {
        let e = mix_a();
        let phi = DensityGrid::uniform(64).unwrap();
        let sampler = DensitySampler::new(&phi).unwrap();
        let w = Walker::new(&e);
        let run = |i| {
            let mut v = Vec::new();
            walk(&w, &sampler, 9, i, 20, |_, x| v.push(x));
            v
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
        assert_eq!(run(0).len(), 20);
    }

    #[test]
    fn doubling_occupation_is_uniform() {
        let e = doubling();
        let phi = DensityGrid::uniform(256).unwrap();
        let rep = occupation_histogram(&e, &phi, 200_000, 16, 50, 1).unwrap();
        assert!(rep.bins.iter().all(|b| (b.expected - 1.0 / 16.0).abs() < 1e-15));
        assert!(rep.within(4.5), "max |z| = {}", rep.max_abs_z);
    }

    #[test]
    fn bin_masses_sum_to_mass() {
        let phi =
            DensityGrid::from_fn(128, |x| 1.0 + 0.5 * (std::f64::consts::TAU * x).cos()).unwrap();
        let m: f64 = bin_masses(&phi, 8).iter().sum();
        assert!((m - phi.mass()).abs() < 1e-14);
    }
}
