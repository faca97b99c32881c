//! Wasserstein distances under the parameter metric, the deviation and
//! non-stationarity budgets built from them, and total variation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lp::{lp_solve, LpProblem, LpStatus};
use crate::model::{
    rho_distance, ArrivalParameter, DistributionSchedule, MixtureComponent, PhaseDistribution,
    RewardLaw, PROB_SUM_TOL,
};

pub const DEFAULT_GRID: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    atoms: Vec<ArrivalParameter>,
    weights: Vec<f64>,
}

fn same_point(a: &ArrivalParameter, b: &ArrivalParameter) -> bool {
    a.reward == b.reward && a.consumption == b.consumption
}

impl DiscreteMeasure {
    /// Validates weights and merges duplicate atoms.
    pub fn new(atoms: Vec<ArrivalParameter>, weights: Vec<f64>) -> Result<Self> {
        if atoms.len() != weights.len() || atoms.is_empty() {
            return Err(Error::InvalidDistribution(format!(
                "{} atoms with {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidDistribution("negative weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidDistribution(format!("weights sum to {total}")));
        }
        let m = atoms[0].dim();
        if let Some(a) = atoms.iter().find(|a| a.dim() != m) {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: a.dim(),
            });
        }
        Ok(Self::merged(atoms, weights))
    }

    /// Merges duplicates and rescales to total mass one without validation.
    fn merged(atoms: Vec<ArrivalParameter>, weights: Vec<f64>) -> Self {
        let mut index: HashMap<(u64, Vec<u64>), usize> = HashMap::new();
        let mut out_atoms: Vec<ArrivalParameter> = Vec::new();
        let mut out_w: Vec<f64> = Vec::new();
        for (a, w) in atoms.into_iter().zip(weights) {
            let key = (
                a.reward.to_bits(),
                a.consumption.iter().map(|v| v.to_bits()).collect(),
            );
            match index.get(&key) {
                Some(&k) => out_w[k] += w,
                None => {
                    index.insert(key, out_atoms.len());
                    out_atoms.push(ArrivalParameter::new(a.reward, a.consumption));
                    out_w.push(w);
                }
            }
        }
        let total: f64 = out_w.iter().sum();
        out_w.iter_mut().for_each(|w| *w /= total);
        DiscreteMeasure {
            atoms: out_atoms,
            weights: out_w,
        }
    }

    pub fn dirac(a: ArrivalParameter) -> Self {
        DiscreteMeasure {
            atoms: vec![a],
            weights: vec![1.0],
        }
    }

    pub fn atoms(&self) -> &[ArrivalParameter] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].dim()
    }
}

/// Exact 1-D distance between discrete reward distributions via the
/// monotone coupling.
fn monotone_1d(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
    let sorted = |d: &DiscreteMeasure| {
        let mut v: Vec<(f64, f64)> = d.atoms.iter().map(|a| a.reward).zip(d.weights.iter().copied()).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    };
    let a = sorted(mu);
    let b = sorted(nu);
    let (mut i, mut j) = (0, 0);
    let (mut left_a, mut left_b) = (a[0].1, b[0].1);
    let mut cost = 0.0;
    loop {
        let step = left_a.min(left_b);
        cost += step * (a[i].0 - b[j].0).abs();
        left_a -= step;
        left_b -= step;
        if left_a <= 1e-15 {
            i += 1;
            if i == a.len() {
                break;
            }
            left_a = a[i].1;
        }
        if left_b <= 1e-15 {
            j += 1;
            if j == b.len() {
                break;
            }
            left_b = b[j].1;
        }
    }
    cost
}

/// Optimal transport cost between two discrete measures with ground cost ρ.
pub fn wasserstein_discrete(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch {
            expected: mu.dim(),
            found: nu.dim(),
        });
    }
    let shared = &mu.atoms[0].consumption;
    if mu.atoms.iter().chain(&nu.atoms).all(|a| &a.consumption == shared) {
        return Ok(monotone_1d(mu, nu));
    }
    transport_lp(mu, nu)
}

/// The transport LP itself, without the 1-D shortcut.
pub fn transport_lp(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
    let (n, k) = (mu.atoms.len(), nu.atoms.len());
    let mut cost = Vec::with_capacity(n * k);
    for a in &mu.atoms {
        for b in &nu.atoms {
            cost.push(-rho_distance(a, b)?);
        }
    }
    let mut rows = Vec::with_capacity(n + k);
    let mut rhs = Vec::with_capacity(n + k);
    for j in 0..n {
        let mut row = vec![0.0; n * k];
        row[j * k..(j + 1) * k].iter_mut().for_each(|v| *v = 1.0);
        rows.push(row);
        rhs.push(mu.weights[j]);
    }
    for l in 0..k {
        let mut row = vec![0.0; n * k];
        for j in 0..n {
            row[j * k + l] = -1.0;
        }
        rows.push(row);
        rhs.push(-nu.weights[l]);
    }
    let lp = LpProblem::boxed(cost, rows, rhs, vec![f64::INFINITY; n * k]);
    let sol = lp_solve(&lp)?;
    if sol.status != LpStatus::Optimal {
        return Err(Error::InvalidDistribution(format!("transport LP is {:?}", sol.status)));
    }
    Ok((-sol.objective_value).max(0.0))
}

/// `∫_0^1 |F_a^{-1}(u) - F_b^{-1}(u)| du` by the midpoint rule.
pub fn wasserstein_1d_reward(law_a: &RewardLaw, law_b: &RewardLaw, grid: usize) -> Result<f64> {
    if grid < 2 {
        return Err(Error::Config(format!("quantile grid must have at least 2 points, got {grid}")));
    }
    law_a.validate()?;
    law_b.validate()?;
    if law_a == law_b {
        return Ok(0.0);
    }
    let h = 1.0 / grid as f64;
    let total: f64 = (0..grid)
        .map(|k| {
            let u = (k as f64 + 0.5) * h;
            (law_a.quantile(u) - law_b.quantile(u)).abs()
        })
        .sum();
    Ok(total * h)
}

/// Quantile discretization of a reward law: `n` equal-weight atoms at the
/// midpoint quantiles, all with consumption `a`.
pub fn quantile_discretization(law: &RewardLaw, n: usize, a: Vec<f64>) -> DiscreteMeasure {
    let atoms = (0..n)
        .map(|k| ArrivalParameter::new(law.quantile((k as f64 + 0.5) / n as f64), a.clone()))
        .collect();
    DiscreteMeasure::merged(atoms, vec![1.0 / n as f64; n])
}

/// Distance between two phase laws. Discrete pairs go through optimal
/// transport; continuous pairs must share the consumption law.
pub fn phase_distance(a: &PhaseDistribution, b: &PhaseDistribution, m: usize, grid: usize) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    if let (Some(x), Some(y)) = (a.atoms(m), b.atoms(m)) {
        let (ax, wx): (Vec<_>, Vec<_>) = x.into_iter().unzip();
        let (ay, wy): (Vec<_>, Vec<_>) = y.into_iter().unzip();
        return wasserstein_discrete(&DiscreteMeasure::merged(ax, wx), &DiscreteMeasure::merged(ay, wy));
    }
    match (a, b) {
        (
            PhaseDistribution::Product {
                reward: ra,
                consumption: ca,
            },
            PhaseDistribution::Product {
                reward: rb,
                consumption: cb,
            },
        ) if ca == cb => wasserstein_1d_reward(ra, rb, grid),
        _ => Err(Error::Unsupported(
            "continuous distances need equal consumption laws".into(),
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentDistance {
    /// First period, 1-based.
    pub start: usize,
    /// Last period, inclusive.
    pub end: usize,
    pub distance: f64,
}

/// Per-segment distances between two schedules over the common refinement
/// of their phases.
pub fn segment_distances(
    true_sched: &DistributionSchedule,
    prior_sched: &DistributionSchedule,
    m: usize,
    grid: usize,
) -> Result<Vec<SegmentDistance>> {
    if true_sched.horizon != prior_sched.horizon {
        return Err(Error::InvalidInstance("schedules have different horizons".into()));
    }
    let mut cuts: Vec<usize> = true_sched
        .spans()
        .iter()
        .chain(prior_sched.spans().iter())
        .map(|s| s.start)
        .collect();
    cuts.push(true_sched.horizon);
    cuts.sort_unstable();
    cuts.dedup();
    let mut cache: HashMap<(usize, usize), f64> = HashMap::new();
    let mut out = Vec::with_capacity(cuts.len());
    for w in cuts.windows(2) {
        let (i, j) = (true_sched.phase_at(w[0]), prior_sched.phase_at(w[0]));
        let d = match cache.get(&(i, j)) {
            Some(d) => *d,
            None => {
                let d = phase_distance(&true_sched.phases[i].dist, &prior_sched.phases[j].dist, m, grid)?;
                cache.insert((i, j), d);
                d
            }
        };
        out.push(SegmentDistance {
            start: w[0] + 1,
            end: w[1],
            distance: d,
        });
    }
    Ok(out)
}

/// Cumulative deviation `Σ_t W(P_t, P̂_t)`.
pub fn wbdb(
    true_sched: &DistributionSchedule,
    prior_sched: &DistributionSchedule,
    m: usize,
    grid: usize,
) -> Result<f64> {
    Ok(segment_distances(true_sched, prior_sched, m, grid)?
        .iter()
        .map(|s| (s.end + 1 - s.start) as f64 * s.distance)
        .sum())
}

/// Non-stationarity `Σ_t W(P_t, P̄_T)` with `P̄_T` the uniform mixture.
pub fn wbnb(sched: &DistributionSchedule, m: usize, grid: usize) -> Result<f64> {
    let spans = sched.spans();
    let horizon = sched.horizon as f64;
    if sched.is_stationary() {
        return Ok(0.0);
    }
    let discrete: Option<Vec<_>> = sched.phases.iter().map(|p| p.dist.atoms(m)).collect();
    let mixture = match discrete {
        Some(per_phase) => {
            let mut atoms = Vec::new();
            let mut weights = Vec::new();
            for (span, ph) in spans.iter().zip(per_phase) {
                let share = span.len() as f64 / horizon;
                for (a, w) in ph {
                    atoms.push(a);
                    weights.push(share * w);
                }
            }
            let mix = DiscreteMeasure::merged(atoms, weights);
            let fs = crate::model::FiniteSupport {
                points: std::sync::Arc::new(mix.atoms),
                probs: mix.weights,
            };
            PhaseDistribution::FiniteSupport(fs)
        }
        None => {
            let mut parts = Vec::new();
            let mut consumption = None;
            for (span, ph) in spans.iter().zip(&sched.phases) {
                let PhaseDistribution::Product {
                    reward,
                    consumption: c,
                } = &ph.dist
                else {
                    return Err(Error::Unsupported("mixed discrete and continuous phases".into()));
                };
                match &consumption {
                    None => consumption = Some(c.clone()),
                    Some(prev) if prev != c => {
                        return Err(Error::Unsupported(
                            "continuous distances need equal consumption laws".into(),
                        ))
                    }
                    _ => {}
                }
                parts.push(MixtureComponent {
                    weight: span.len() as f64 / horizon,
                    law: reward.clone(),
                });
            }
            PhaseDistribution::Product {
                reward: RewardLaw::Mixture(parts),
                consumption: consumption.expect("at least one phase"),
            }
        }
    };
    let mut total = 0.0;
    for (span, ph) in spans.iter().zip(&sched.phases) {
        total += span.len() as f64 * phase_distance(&ph.dist, &mixture, m, grid)?;
    }
    Ok(total)
}

/// `½ Σ |μ(θ) - ν(θ)|` over the union of atoms.
pub fn total_variation_discrete(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
    let mut diff: Vec<(ArrivalParameter, f64)> = mu
        .atoms
        .iter()
        .cloned()
        .zip(mu.weights.iter().copied())
        .collect();
    for (b, w) in nu.atoms.iter().zip(&nu.weights) {
        match diff.iter_mut().find(|(a, _)| same_point(a, b)) {
            Some((_, v)) => *v -= w,
            None => diff.push((b.clone(), -w)),
        }
    }
    (0.5 * diff.iter().map(|(_, v)| v.abs()).sum::<f64>()).min(1.0)
}
