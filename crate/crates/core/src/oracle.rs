//! Offline benchmarks and dual machinery: hindsight optimum, the
//! expectation upper bound, the dual function and its minimizer, and the
//! consumption plan tracked by the gradient policies.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lp::{lp_solve, LpProblem, LpSolution, LpStatus};
use crate::model::{
    rng_from_seed, trial_seed, ArrivalParameter, DistributionSchedule, Instance, Span, Which,
};

/// Nonnegative shadow prices, one per resource.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DualVector {
    pub prices: Vec<f64>,
}

impl DualVector {
    pub fn zeros(m: usize) -> Self {
        DualVector { prices: vec![0.0; m] }
    }

    pub fn new(prices: Vec<f64>) -> Self {
        DualVector { prices }
    }

    pub fn inf_norm(&self) -> f64 {
        self.prices.iter().fold(0.0, |m, p| m.max(p.abs()))
    }
}

impl std::ops::Deref for DualVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.prices
    }
}

/// Per-period expected consumption targets (`T x m`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumptionPlan {
    pub targets: Vec<Vec<f64>>,
}

impl ConsumptionPlan {
    /// The budget spread evenly: `c / T` every period.
    pub fn uniform(capacities: &[f64], horizon: usize) -> Self {
        let row: Vec<f64> = capacities.iter().map(|c| c / horizon as f64).collect();
        ConsumptionPlan {
            targets: vec![row; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.targets.len()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.targets[t]
    }

    /// Column sums `Σ_t γ_t`.
    pub fn totals(&self) -> Vec<f64> {
        let m = self.targets.first().map_or(0, Vec::len);
        let mut out = vec![0.0; m];
        for row in &self.targets {
            for (o, g) in out.iter_mut().zip(row) {
                *o += g;
            }
        }
        out
    }
}

/// Pointwise Lagrangian maximizer for accept/reject: accept iff `r - p·a > 0`.
/// Exact ties reject.
pub fn h_maximize(p: &[f64], theta: &ArrivalParameter) -> (f64, f64) {
    let surplus = theta.reward - theta.priced(p);
    if surplus > 0.0 {
        (1.0, surplus)
    } else {
        (0.0, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualMethod {
    /// Exact LP on discrete schedules, subgradient otherwise.
    Auto,
    /// Projected subgradient always; discrete schedules still use exact
    /// expectations rather than samples.
    Subgradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualConfig {
    /// SAA draws per phase for continuous phases.
    pub saa_samples: usize,
    pub max_iterations: usize,
    /// Relative change in dual value between checks that counts as converged.
    pub tolerance: f64,
    /// Multiplier on the base step `max c / T`.
    pub step_scale: f64,
    pub seed: u64,
    pub clip_consumption: bool,
    pub method: DualMethod,
}

impl Default for DualConfig {
    fn default() -> Self {
        DualConfig {
            saa_samples: 10_000,
            max_iterations: 5_000,
            tolerance: 1e-6,
            step_scale: 1.0,
            seed: 0x0DDB_1A5E_5BAD_5EED,
            clip_consumption: true,
            method: DualMethod::Auto,
        }
    }
}

const CHECK_EVERY: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSolveReport {
    pub p_star: DualVector,
    pub dual_value: f64,
    pub iterations: usize,
    pub saa_samples: usize,
    pub converged: bool,
    #[serde(serialize_with = "row_major")]
    pub gamma: ConsumptionPlan,
    /// Standard error of `Σ_t γ_{t,i}` from SAA noise; zero when exact.
    pub gamma_std_error: Vec<f64>,
}

fn row_major<S: serde::Serializer>(plan: &ConsumptionPlan, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(plan.targets.iter().flatten())
}

/// Per-phase SAA draws stored flat for fast pricing.
#[derive(Debug, Clone)]
struct SampleSet {
    rewards: Vec<f64>,
    /// `len x m`, row-major.
    consumption: Vec<f64>,
}

impl SampleSet {
    fn len(&self) -> usize {
        self.rewards.len()
    }
}

#[derive(Debug, Clone)]
enum ModelKind {
    Discrete {
        atoms: Vec<ArrivalParameter>,
        /// Probabilities of each atom, per phase.
        phase_probs: Vec<Vec<f64>>,
        /// Expected counts over all phases strictly after phase k.
        after: Vec<Vec<f64>>,
    },
    Sampled {
        samples: Vec<SampleSet>,
    },
}

/// Offline view of a schedule: exact atom tables for discrete laws,
/// per-phase samples otherwise. Built once and shared read-only.
#[derive(Debug, Clone)]
pub struct DualModel {
    m: usize,
    horizon: usize,
    spans: Vec<Span>,
    kind: ModelKind,
    saa_samples: usize,
}

/// `(value, subgradient)` of the dual function, as sums over the tail.
struct Eval {
    value: f64,
    consumption: Vec<f64>,
}

impl DualModel {
    pub fn build(schedule: &DistributionSchedule, m: usize, cfg: &DualConfig) -> Result<Self> {
        if cfg.saa_samples == 0 {
            return Err(Error::Config("saa_samples must be at least 1".into()));
        }
        let spans = schedule.spans();
        let discrete: Option<Vec<_>> = schedule.phases.iter().map(|p| p.dist.atoms(m)).collect();
        let kind = match discrete {
            Some(per_phase) => Self::discrete_tables(schedule, per_phase, &spans),
            None => {
                let mut rng = rng_from_seed(cfg.seed);
                let mut clips = 0;
                let samples = schedule
                    .phases
                    .iter()
                    .map(|ph| {
                        let mut set = SampleSet {
                            rewards: Vec::with_capacity(cfg.saa_samples),
                            consumption: Vec::with_capacity(cfg.saa_samples * m),
                        };
                        for _ in 0..cfg.saa_samples {
                            let th = ph.dist.draw(m, cfg.clip_consumption, &mut rng, &mut clips);
                            set.rewards.push(th.reward);
                            set.consumption.extend_from_slice(&th.consumption);
                        }
                        set
                    })
                    .collect();
                ModelKind::Sampled { samples }
            }
        };
        Ok(DualModel {
            m,
            horizon: schedule.horizon,
            spans,
            kind,
            saa_samples: cfg.saa_samples,
        })
    }

    fn discrete_tables(
        schedule: &DistributionSchedule,
        per_phase: Vec<Vec<(ArrivalParameter, f64)>>,
        spans: &[Span],
    ) -> ModelKind {
        use crate::model::PhaseDistribution;
        // Phases over one shared support keep a single atom table.
        let shared = schedule.phases.windows(2).all(|w| match (&w[0].dist, &w[1].dist) {
            (PhaseDistribution::FiniteSupport(a), PhaseDistribution::FiniteSupport(b)) => {
                std::sync::Arc::ptr_eq(&a.points, &b.points) || a.points == b.points
            }
            _ => false,
        }) && matches!(schedule.phases[0].dist, PhaseDistribution::FiniteSupport(_));

        let (atoms, phase_probs) = if shared {
            let atoms: Vec<ArrivalParameter> = per_phase[0].iter().map(|(a, _)| a.clone()).collect();
            let probs = per_phase
                .iter()
                .map(|ph| ph.iter().map(|(_, w)| *w).collect())
                .collect();
            (atoms, probs)
        } else {
            let total: usize = per_phase.iter().map(Vec::len).sum();
            let mut atoms = Vec::with_capacity(total);
            let mut probs = Vec::with_capacity(per_phase.len());
            for ph in &per_phase {
                let mut row = vec![0.0; total];
                for (a, w) in ph {
                    row[atoms.len()] = *w;
                    atoms.push(a.clone());
                }
                probs.push(row);
            }
            (atoms, probs)
        };

        let n = atoms.len();
        let mut after = vec![vec![0.0; n]; spans.len()];
        for k in (0..spans.len().saturating_sub(1)).rev() {
            let next = &spans[k + 1];
            let len = next.len() as f64;
            after[k] = after[k + 1]
                .iter()
                .zip(&phase_probs[k + 1])
                .map(|(acc, p)| acc + len * p)
                .collect();
        }
        ModelKind::Discrete {
            atoms,
            phase_probs,
            after,
        }
    }

    pub fn num_resources(&self) -> usize {
        self.m
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.kind, ModelKind::Discrete { .. })
    }

    pub fn atoms(&self) -> Option<&[ArrivalParameter]> {
        match &self.kind {
            ModelKind::Discrete { atoms, .. } => Some(atoms),
            ModelKind::Sampled { .. } => None,
        }
    }

    /// Index of the phase covering period `t`.
    pub fn phase_index(&self, t: usize) -> usize {
        self.spans.partition_point(|s| s.start <= t) - 1
    }

    /// Atom matching an untyped arrival in period `t`, among the atoms the
    /// period can draw.
    pub fn locate(&self, t: usize, theta: &ArrivalParameter) -> Option<usize> {
        let atoms = self.atoms()?;
        let probs = self.probs_at(t)?;
        (0..atoms.len()).find(|&j| {
            probs[j] > 0.0 && atoms[j].reward == theta.reward && atoms[j].consumption == theta.consumption
        })
    }

    /// Atom probabilities in period `t` (discrete models only).
    pub fn probs_at(&self, t: usize) -> Option<&[f64]> {
        match &self.kind {
            ModelKind::Discrete { phase_probs, .. } => Some(&phase_probs[self.phase_index(t)]),
            ModelKind::Sampled { .. } => None,
        }
    }

    /// `E[H_j(t)]`: expected arrivals of each atom in periods `t..T`.
    pub fn expected_counts(&self, t: usize) -> Option<Vec<f64>> {
        let ModelKind::Discrete {
            phase_probs, after, ..
        } = &self.kind
        else {
            return None;
        };
        if t >= self.horizon {
            return Some(vec![0.0; phase_probs[0].len()]);
        }
        let k = self.phase_index(t);
        let left = (self.spans[k].end - t) as f64;
        Some(
            after[k]
                .iter()
                .zip(&phase_probs[k])
                .map(|(a, p)| a + left * p)
                .collect(),
        )
    }

    /// Tail sums of `E[h(p;θ)]` and `E[a 1{accept}]` over periods `t..T`.
    fn eval(&self, t: usize, p: &[f64]) -> Eval {
        let m = self.m;
        let mut value = 0.0;
        let mut consumption = vec![0.0; m];
        match &self.kind {
            ModelKind::Discrete { atoms, .. } => {
                let counts = self.expected_counts(t).expect("discrete");
                for (a, e) in atoms.iter().zip(&counts) {
                    if *e == 0.0 {
                        continue;
                    }
                    let (x, h) = h_maximize(p, a);
                    if x > 0.0 {
                        value += e * h;
                        for (c, ai) in consumption.iter_mut().zip(&a.consumption) {
                            *c += e * ai;
                        }
                    }
                }
            }
            ModelKind::Sampled { samples } => {
                for span in &self.spans {
                    if span.end <= t {
                        continue;
                    }
                    let len = (span.end - span.start.max(t)) as f64;
                    let set = &samples[span.phase];
                    let w = len / set.len() as f64;
                    let mut hsum = 0.0;
                    let mut csum = vec![0.0; m];
                    for (k, r) in set.rewards.iter().enumerate() {
                        let a = &set.consumption[k * m..(k + 1) * m];
                        let s = r - a.iter().zip(p).map(|(x, y)| x * y).sum::<f64>();
                        if s > 0.0 {
                            hsum += s;
                            for (c, ai) in csum.iter_mut().zip(a) {
                                *c += ai;
                            }
                        }
                    }
                    value += w * hsum;
                    for (c, s) in consumption.iter_mut().zip(&csum) {
                        *c += w * s;
                    }
                }
            }
        }
        Eval { value, consumption }
    }

    /// `c·p + Σ_{s>=t} E[h(p;θ_s)]`.
    pub fn dual_value(&self, t: usize, remaining: &[f64], p: &[f64]) -> f64 {
        let cp: f64 = remaining.iter().zip(p).map(|(c, p)| c * p).sum();
        cp + self.eval(t, p).value
    }

    /// A subgradient of the dual function at `p` (Danskin, ties reject).
    pub fn subgradient(&self, t: usize, remaining: &[f64], p: &[f64]) -> Vec<f64> {
        let e = self.eval(t, p);
        remaining.iter().zip(&e.consumption).map(|(c, g)| c - g).collect()
    }

    /// Expected consumption in period `s` at price `p`, ties rejected.
    pub fn gamma_row(&self, s: usize, p: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut row = vec![0.0; m];
        match &self.kind {
            ModelKind::Discrete {
                atoms, phase_probs, ..
            } => {
                let probs = &phase_probs[self.phase_index(s)];
                for (a, w) in atoms.iter().zip(probs) {
                    if *w > 0.0 && h_maximize(p, a).0 > 0.0 {
                        for (g, ai) in row.iter_mut().zip(&a.consumption) {
                            *g += w * ai;
                        }
                    }
                }
            }
            ModelKind::Sampled { samples } => {
                let set = &samples[self.spans[self.phase_index(s)].phase];
                for (k, r) in set.rewards.iter().enumerate() {
                    let a = &set.consumption[k * m..(k + 1) * m];
                    if r - a.iter().zip(p).map(|(x, y)| x * y).sum::<f64>() > 0.0 {
                        for (g, ai) in row.iter_mut().zip(a) {
                            *g += ai;
                        }
                    }
                }
                let n = set.len() as f64;
                row.iter_mut().for_each(|g| *g /= n);
            }
        }
        row
    }

    /// Discrete `γ_s` when atom `j` is accepted with probability `frac[j]`.
    pub fn gamma_row_fractional(&self, s: usize, frac: &[f64]) -> Vec<f64> {
        let mut row = vec![0.0; self.m];
        if let ModelKind::Discrete {
            atoms, phase_probs, ..
        } = &self.kind
        {
            let probs = &phase_probs[self.phase_index(s)];
            for ((a, w), f) in atoms.iter().zip(probs).zip(frac) {
                let wf = w * f;
                if wf > 0.0 {
                    for (g, ai) in row.iter_mut().zip(&a.consumption) {
                        *g += wf * ai;
                    }
                }
            }
        }
        row
    }

    /// The expectation LP over periods `t..T` with capacity `remaining`.
    pub fn tail_lp(&self, t: usize, remaining: &[f64]) -> Result<LpSolution> {
        let atoms = self
            .atoms()
            .ok_or_else(|| Error::Unsupported("tail LP needs a finite-support schedule".into()))?;
        let counts = self.expected_counts(t).expect("discrete");
        deterministic_ub_finite(remaining, atoms, &counts)
    }

    /// Minimizes the dual function over periods `t..T` with capacity
    /// `remaining`, optionally starting the subgradient method from `start`.
    pub fn solve_tail(
        &self,
        t: usize,
        remaining: &[f64],
        cfg: &DualConfig,
        start: Option<&[f64]>,
    ) -> Result<DualSolveReport> {
        if remaining.len() != self.m {
            return Err(Error::DimensionMismatch {
                expected: self.m,
                found: remaining.len(),
            });
        }
        if self.is_discrete() && cfg.method == DualMethod::Auto {
            self.solve_tail_exact(t, remaining)
        } else {
            Ok(self.solve_tail_subgradient(t, remaining, cfg, start))
        }
    }

    fn solve_tail_exact(&self, t: usize, remaining: &[f64]) -> Result<DualSolveReport> {
        let sol = self.tail_lp(t, remaining)?;
        if sol.status != LpStatus::Optimal {
            return Err(Error::InvalidInstance(format!("expectation LP is {:?}", sol.status)));
        }
        let counts = self.expected_counts(t).expect("discrete");
        let frac: Vec<f64> = sol
            .primal
            .iter()
            .zip(&counts)
            .map(|(z, e)| if *e > 0.0 { (z / e).clamp(0.0, 1.0) } else { 0.0 })
            .collect();
        let p = DualVector::new(sol.dual.clone());
        let targets = (t..self.horizon)
            .map(|s| self.gamma_row_fractional(s, &frac))
            .collect();
        Ok(DualSolveReport {
            dual_value: self.dual_value(t, remaining, &p),
            p_star: p,
            iterations: sol.iterations,
            saa_samples: 0,
            converged: true,
            gamma: ConsumptionPlan { targets },
            gamma_std_error: vec![0.0; self.m],
        })
    }

    fn solve_tail_subgradient(
        &self,
        t: usize,
        remaining: &[f64],
        cfg: &DualConfig,
        start: Option<&[f64]>,
    ) -> DualSolveReport {
        let m = self.m;
        let tail = self.horizon.saturating_sub(t);
        let (p, iterations, converged) = if tail == 0 {
            (vec![0.0; m], 0, true)
        } else {
            let scale = tail as f64;
            let eta0 = cfg.step_scale * remaining.iter().fold(0.0f64, |a, c| a.max(*c)) / scale;
            let mut p: Vec<f64> = start.map_or_else(|| vec![0.0; m], |s| s.iter().map(|v| v.max(0.0)).collect());
            let mut history: Vec<Vec<f64>> = Vec::with_capacity(cfg.max_iterations);
            let mut last_check: Option<f64> = None;
            let mut converged = false;
            let mut k = 0;
            while k < cfg.max_iterations {
                k += 1;
                history.push(p.clone());
                let g = self.subgradient(t, remaining, &p);
                let eta = eta0 / (k as f64).sqrt();
                for (pi, gi) in p.iter_mut().zip(&g) {
                    *pi = (*pi - eta * gi / scale).max(0.0);
                }
                if k % CHECK_EVERY == 0 && k >= 2 * CHECK_EVERY {
                    let avg = average_tail(&history);
                    let v = self.dual_value(t, remaining, &avg) / scale;
                    if let Some(prev) = last_check {
                        if (prev - v).abs() <= cfg.tolerance * v.abs().max(1.0) {
                            converged = true;
                            break;
                        }
                    }
                    last_check = Some(v);
                }
            }
            (average_tail(&history), k, converged)
        };
        let report_gamma: Vec<Vec<f64>> = (t..self.horizon).map(|s| self.gamma_row(s, &p)).collect();
        let gamma_std_error = self.gamma_std_error(t, &p);
        DualSolveReport {
            dual_value: self.dual_value(t, remaining, &p),
            p_star: DualVector::new(p),
            iterations,
            saa_samples: self.saa_samples,
            converged,
            gamma: ConsumptionPlan {
                targets: report_gamma,
            },
            gamma_std_error,
        }
    }

    /// Standard error of the tail total `Σ_s γ_{s,i}` due to sampling.
    pub fn gamma_std_error(&self, t: usize, p: &[f64]) -> Vec<f64> {
        let m = self.m;
        let ModelKind::Sampled { samples } = &self.kind else {
            return vec![0.0; m];
        };
        let mut var = vec![0.0; m];
        for span in &self.spans {
            if span.end <= t {
                continue;
            }
            let len = (span.end - span.start.max(t)) as f64;
            let set = &samples[span.phase];
            let n = set.len() as f64;
            let mut s1 = vec![0.0; m];
            let mut s2 = vec![0.0; m];
            for (k, r) in set.rewards.iter().enumerate() {
                let a = &set.consumption[k * m..(k + 1) * m];
                if r - a.iter().zip(p).map(|(x, y)| x * y).sum::<f64>() > 0.0 {
                    for i in 0..m {
                        s1[i] += a[i];
                        s2[i] += a[i] * a[i];
                    }
                }
            }
            for i in 0..m {
                let mean = s1[i] / n;
                let sample_var = if n > 1.0 {
                    ((s2[i] - n * mean * mean) / (n - 1.0)).max(0.0)
                } else {
                    0.0
                };
                var[i] += len * len * sample_var / n;
            }
        }
        var.into_iter().map(f64::sqrt).collect()
    }
}

fn average_tail(history: &[Vec<f64>]) -> Vec<f64> {
    let from = history.len() / 2;
    let window = &history[from..];
    let m = window[0].len();
    let mut avg = vec![0.0; m];
    for p in window {
        for (a, v) in avg.iter_mut().zip(p) {
            *a += v;
        }
    }
    avg.iter_mut().for_each(|a| *a /= window.len() as f64);
    avg
}

/// Minimizes `c·p + Σ_t E_{P_t}[h(p;θ)]` over `p >= 0`.
pub fn dual_solve(
    schedule: &DistributionSchedule,
    capacities: &[f64],
    cfg: &DualConfig,
) -> Result<DualSolveReport> {
    let model = DualModel::build(schedule, capacities.len(), cfg)?;
    model.solve_tail(0, capacities, cfg, None)
}

/// `max Σ r_j z_j  s.t.  Σ a_j z_j <= remaining,  0 <= z_j <= E[H_j]`.
pub fn deterministic_ub_finite(
    remaining: &[f64],
    atoms: &[ArrivalParameter],
    expected: &[f64],
) -> Result<LpSolution> {
    if atoms.len() != expected.len() {
        return Err(Error::DimensionMismatch {
            expected: atoms.len(),
            found: expected.len(),
        });
    }
    let m = remaining.len();
    if let Some(a) = atoms.iter().find(|a| a.dim() != m) {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: a.dim(),
        });
    }
    let rows = (0..m)
        .map(|i| atoms.iter().map(|a| a.consumption[i]).collect())
        .collect();
    let p = LpProblem::boxed(
        atoms.iter().map(|a| a.reward).collect(),
        rows,
        remaining.iter().map(|c| c.max(0.0)).collect(),
        expected.to_vec(),
    );
    Ok(lp_solve(&p)?)
}

/// Rough dual of the path's own LP, used only to pick a starting vertex.
fn path_price_guess(path: &[ArrivalParameter], capacities: &[f64]) -> Vec<f64> {
    let m = capacities.len();
    let t = path.len() as f64;
    let mut p = vec![0.0; m];
    let eta0 = capacities.iter().fold(0.0f64, |a, c| a.max(*c)) / t;
    let mut avg = vec![0.0; m];
    let iters = 400;
    for k in 1..=iters {
        let mut g: Vec<f64> = capacities.to_vec();
        for th in path {
            if th.reward - th.priced(&p) > 0.0 {
                for (gi, a) in g.iter_mut().zip(&th.consumption) {
                    *gi -= a;
                }
            }
        }
        let eta = eta0 / (k as f64).sqrt();
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi = (*pi - eta * gi / t).max(0.0);
        }
        if k > iters / 2 {
            for (a, v) in avg.iter_mut().zip(&p) {
                *a += v / (iters - iters / 2) as f64;
            }
        }
    }
    avg
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hindsight {
    pub value: f64,
    /// Acceptance level of each arrival.
    pub primal: Vec<f64>,
    /// Relative gap between the primal value and its dual certificate.
    pub duality_gap: f64,
}

/// Full-information optimum `max Σ r_t x_t, Σ a_t x_t <= c, x ∈ [0,1]^T`.
pub fn hindsight_optimum(path: &[ArrivalParameter], capacities: &[f64]) -> Result<Hindsight> {
    let m = capacities.len();
    if let Some(a) = path.iter().find(|a| a.dim() != m) {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: a.dim(),
        });
    }
    if path.is_empty() {
        return Ok(Hindsight {
            value: 0.0,
            primal: vec![],
            duality_gap: 0.0,
        });
    }

    // Typed arrivals collapse to one variable per type.
    if path.iter().all(|a| a.type_index.is_some()) {
        let n = path.iter().filter_map(|a| a.type_index).max().unwrap_or(0) + 1;
        let mut reps: Vec<Option<&ArrivalParameter>> = vec![None; n];
        let mut counts = vec![0.0; n];
        let mut consistent = true;
        for a in path {
            let j = a.type_index.expect("checked");
            counts[j] += 1.0;
            match reps[j] {
                None => reps[j] = Some(a),
                Some(r) => consistent &= r.reward == a.reward && r.consumption == a.consumption,
            }
        }
        if consistent {
            let atoms: Vec<ArrivalParameter> = reps
                .iter()
                .map(|r| r.cloned().unwrap_or_else(|| ArrivalParameter::new(0.0, vec![0.0; m])))
                .collect();
            let rows = (0..m)
                .map(|i| atoms.iter().map(|a| a.consumption[i]).collect())
                .collect();
            let lp = LpProblem::boxed(
                atoms.iter().map(|a| a.reward).collect(),
                rows,
                capacities.to_vec(),
                counts.clone(),
            );
            let sol = lp_solve(&lp)?;
            let gap = certify(&lp, &sol)?;
            let primal = path
                .iter()
                .map(|a| {
                    let j = a.type_index.expect("checked");
                    sol.primal[j] / counts[j]
                })
                .collect();
            return Ok(Hindsight {
                value: sol.objective_value,
                primal,
                duality_gap: gap,
            });
        }
    }

    let guess = path_price_guess(path, capacities);
    let rows = (0..m)
        .map(|i| path.iter().map(|a| a.consumption[i]).collect())
        .collect();
    let mut lp = LpProblem::boxed(
        path.iter().map(|a| a.reward).collect(),
        rows,
        capacities.to_vec(),
        vec![1.0; path.len()],
    );
    lp.start_at_upper = Some(path.iter().map(|a| a.reward - a.priced(&guess) > 0.0).collect());
    let sol = lp_solve(&lp)?;
    let gap = certify(&lp, &sol)?;
    Ok(Hindsight {
        value: sol.objective_value,
        primal: sol.primal,
        duality_gap: gap,
    })
}

fn certify(lp: &LpProblem, sol: &LpSolution) -> Result<f64> {
    if sol.status != LpStatus::Optimal {
        return Err(Error::InvalidInstance(format!("hindsight LP is {:?}", sol.status)));
    }
    Ok((sol.objective_value - sol.dual_objective(lp)).abs() / (1.0 + sol.objective_value.abs()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UbEstimate {
    pub mean_hindsight: f64,
    pub std_error: f64,
    pub dual_value: f64,
    pub trials: usize,
}

/// Monte Carlo mean of the hindsight optimum next to the dual bound on the
/// true schedule.
pub fn ub_estimate(instance: &Instance, trials: usize, seed: u64, cfg: &DualConfig) -> Result<UbEstimate> {
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    let values: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|k| {
            let path = instance.sample_path(Which::True, trial_seed(seed, k))?;
            Ok(hindsight_optimum(&path.arrivals, &instance.capacities)?.value)
        })
        .collect::<Result<_>>()?;
    let (mean, se) = mean_and_se(&values);
    let dual = dual_solve(&instance.true_schedule, &instance.capacities, cfg)?;
    Ok(UbEstimate {
        mean_hindsight: mean,
        std_error: se,
        dual_value: dual.dual_value,
        trials,
    })
}

/// Sample mean and its standard error.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FiniteSupport, PhaseDistribution, RewardLaw};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn point_schedule(t: usize, r: f64, a: f64) -> DistributionSchedule {
        DistributionSchedule::stationary(
            t,
            PhaseDistribution::product(RewardLaw::point(r), RewardLaw::point(a)),
        )
    }

    #[test]
    fn h_maximize_threshold_and_tie() {
        let th = ArrivalParameter::new(1.0, vec![0.5]);
        assert_eq!(h_maximize(&[1.0], &th), (1.0, 0.5));
        assert_eq!(h_maximize(&[2.0], &th), (0.0, 0.0));
        let tie = ArrivalParameter::new(1.0, vec![0.25, 0.25]);
        assert_eq!(h_maximize(&[2.0, 2.0], &tie), (0.0, 0.0));
        // Both actions give the same Lagrangian value at a tie.
        let accept = tie.reward - tie.priced(&[2.0, 2.0]);
        assert_eq!(accept, 0.0);
    }

    #[test]
    fn point_mass_dual_matches_grid() {
        let t = 100;
        let sched = point_schedule(t, 1.0, 1.0);
        let rep = dual_solve(&sched, &[50.0], &DualConfig::default()).unwrap();
        // L(p) = 50 p + 100 max(0, 1 - p), minimized at p = 1 with value 50.
        let grid_min = (0..=4000)
            .map(|k| {
                let p = k as f64 * 0.001;
                50.0 * p + 100.0 * (1.0 - p).max(0.0)
            })
            .fold(f64::INFINITY, f64::min);
        assert!((rep.dual_value - grid_min).abs() < 1e-9);
        assert!((rep.p_star[0] - 1.0).abs() < 1e-9);
        let total: f64 = rep.gamma.totals()[0];
        assert!((total - 50.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_reward_dual_near_analytic() {
        let t = 1000;
        let sched = DistributionSchedule::stationary(
            t,
            PhaseDistribution::product(RewardLaw::uniform(0.0, 1.0), RewardLaw::point(1.0)),
        );
        let cfg = DualConfig {
            saa_samples: 40_000,
            ..DualConfig::default()
        };
        let rep = dual_solve(&sched, &[250.0], &cfg).unwrap();
        // P(r > p) = 1/4 gives p* = 0.75 and value 0.75 * 250 + 1000 * 0.03125.
        assert!((rep.p_star[0] - 0.75).abs() < 0.01, "{:?}", rep.p_star);
        assert!((rep.dual_value - 218.75).abs() < 1.5, "{}", rep.dual_value);
        // A fine grid on the same sample agrees with the solver.
        let model = DualModel::build(&sched, 1, &cfg).unwrap();
        let grid = (500..=1000)
            .map(|k| model.dual_value(0, &[250.0], &[k as f64 * 0.001]))
            .fold(f64::INFINITY, f64::min);
        assert!(rep.dual_value - grid < 0.05, "{} vs grid {grid}", rep.dual_value);
    }

    #[test]
    fn huge_capacity_gives_zero_price() {
        let sched = DistributionSchedule::stationary(
            200,
            PhaseDistribution::product(RewardLaw::uniform(0.0, 1.0), RewardLaw::uniform(0.1, 1.0)),
        );
        let rep = dual_solve(&sched, &[200.0, 200.0], &DualConfig::default()).unwrap();
        assert!(rep.p_star.iter().all(|p| *p < 1e-9), "{:?}", rep.p_star);
    }

    #[test]
    fn ub_finite_examples() {
        let atoms = vec![
            ArrivalParameter::new(2.0, vec![1.0]),
            ArrivalParameter::new(1.0, vec![1.0]),
        ];
        let sol = deterministic_ub_finite(&[6.0], &atoms, &[5.0, 5.0]).unwrap();
        assert!((sol.objective_value - 11.0).abs() < 1e-12);
        assert!((sol.primal[0] - 5.0).abs() < 1e-12 && (sol.primal[1] - 1.0).abs() < 1e-12);
        let sol = deterministic_ub_finite(&[0.0], &atoms, &[5.0, 5.0]).unwrap();
        assert_eq!(sol.objective_value, 0.0);
        let one = vec![ArrivalParameter::new(1.0, vec![1.0])];
        let sol = deterministic_ub_finite(&[3.0], &one, &[7.5]).unwrap();
        assert!((sol.primal[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn hindsight_examples() {
        // Accept the first half when later rewards drop.
        let path: Vec<_> = (0..8)
            .map(|k| ArrivalParameter::new(if k < 4 { 1.0 } else { 0.5 }, vec![1.0]))
            .collect();
        let h = hindsight_optimum(&path, &[4.0]).unwrap();
        assert!((h.value - 4.0).abs() < 1e-9);
        let h = hindsight_optimum(&[ArrivalParameter::new(2.0, vec![0.5])], &[1.0]).unwrap();
        assert!((h.value - 2.0).abs() < 1e-12 && h.primal == vec![1.0]);
    }

    /// Greedy-free oracle: enumerate which arrivals sit at bounds and solve
    /// the single-row remainder exactly (one fractional variable).
    fn single_row_oracle(path: &[ArrivalParameter], cap: f64) -> f64 {
        let n = path.len();
        let mut best = 0.0f64;
        for mask in 0u32..(1 << n) {
            let used: f64 = (0..n).filter(|k| mask >> k & 1 == 1).map(|k| path[k].consumption[0]).sum();
            if used > cap + 1e-12 {
                continue;
            }
            let val: f64 = (0..n).filter(|k| mask >> k & 1 == 1).map(|k| path[k].reward).sum();
            best = best.max(val);
            for f in 0..n {
                if mask >> f & 1 == 0 && path[f].consumption[0] > 0.0 {
                    let x = ((cap - used) / path[f].consumption[0]).min(1.0);
                    best = best.max(val + x * path[f].reward);
                }
            }
        }
        best
    }

    #[test]
    fn random_hindsight_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let path: Vec<_> = (0..12)
                .map(|_| ArrivalParameter::new(rng.random_range(0.0..1.0), vec![rng.random_range(0.1..1.0)]))
                .collect();
            let cap = rng.random_range(0.5..4.0);
            let h = hindsight_optimum(&path, &[cap]).unwrap();
            let oracle = single_row_oracle(&path, cap);
            assert!((h.value - oracle).abs() < 1e-8, "{} vs {oracle}", h.value);
            assert!(h.duality_gap < 1e-9);
        }
    }

    #[test]
    fn typed_path_aggregates() {
        let pts = Arc::new(vec![
            ArrivalParameter::new(2.0, vec![1.0, 0.0]),
            ArrivalParameter::new(1.0, vec![0.5, 0.5]),
        ]);
        let path: Vec<_> = [0, 1, 1, 0, 1, 1]
            .iter()
            .map(|&j| pts[j].clone().with_type(j))
            .collect();
        let typed = hindsight_optimum(&path, &[1.0, 1.0]).unwrap();
        let untyped: Vec<_> = path.iter().map(|a| ArrivalParameter::new(a.reward, a.consumption.clone())).collect();
        let plain = hindsight_optimum(&untyped, &[1.0, 1.0]).unwrap();
        assert!((typed.value - plain.value).abs() < 1e-9);
    }

    #[test]
    fn finite_support_plan_is_slack_complementary() {
        let pts = Arc::new(vec![
            ArrivalParameter::new(3.0, vec![1.0]),
            ArrivalParameter::new(2.0, vec![1.0]),
            ArrivalParameter::new(1.0, vec![1.0]),
        ]);
        let fs = FiniteSupport::new(pts, vec![0.3, 0.3, 0.4]).unwrap();
        let sched = DistributionSchedule::stationary(100, PhaseDistribution::FiniteSupport(fs));
        let rep = dual_solve(&sched, &[45.0], &DualConfig::default()).unwrap();
        assert!((rep.p_star[0] - 2.0).abs() < 1e-9);
        assert!((rep.gamma.totals()[0] - 45.0).abs() < 1e-9);
        assert!((rep.dual_value - 120.0).abs() < 1e-9);
    }

    #[test]
    fn weak_duality_on_random_prices() {
        let sched = DistributionSchedule::stationary(
            300,
            PhaseDistribution::product(RewardLaw::uniform(0.0, 1.0), RewardLaw::uniform(0.1, 1.0)),
        );
        let cfg = DualConfig {
            saa_samples: 300,
            ..DualConfig::default()
        };
        let model = DualModel::build(&sched, 2, &cfg).unwrap();
        // The sampled problem: one variable per sample, weights len / N = 1.
        let ModelKind::Sampled { samples } = &model.kind else { panic!() };
        let set = &samples[0];
        let path: Vec<_> = (0..set.len())
            .map(|k| ArrivalParameter::new(set.rewards[k], set.consumption[2 * k..2 * k + 2].to_vec()))
            .collect();
        let primal = hindsight_optimum(&path, &[40.0, 40.0]).unwrap().value;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let p = [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)];
            assert!(model.dual_value(0, &[40.0, 40.0], &p) >= primal - 1e-9);
        }
    }

    #[test]
    fn danskin_matches_finite_difference() {
        let sched = DistributionSchedule::stationary(
            500,
            PhaseDistribution::product(RewardLaw::uniform(0.0, 1.0), RewardLaw::uniform(0.1, 1.0)),
        );
        let cfg = DualConfig {
            saa_samples: 2000,
            ..DualConfig::default()
        };
        let model = DualModel::build(&sched, 3, &cfg).unwrap();
        let c = [100.0, 80.0, 120.0];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let p: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..0.8)).collect();
            let dir: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = model.subgradient(0, &c, &p);
            let analytic: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
            // Small enough that no sample crosses its kink.
            let h = 1e-9;
            let q: Vec<f64> = p.iter().zip(&dir).map(|(a, b)| a + h * b).collect();
            let fd = (model.dual_value(0, &c, &q) - model.dual_value(0, &c, &p)) / h;
            assert!((fd - analytic).abs() < 1e-4 * (1.0 + analytic.abs()), "{fd} vs {analytic}");
        }
    }

    #[test]
    fn discrete_dual_is_deterministic() {
        let pts = Arc::new(vec![
            ArrivalParameter::new(1.0, vec![0.3]),
            ArrivalParameter::new(0.4, vec![0.2]),
        ]);
        let fs = FiniteSupport::new(pts, vec![0.5, 0.5]).unwrap();
        let sched = DistributionSchedule::stationary(50, PhaseDistribution::FiniteSupport(fs));
        let a = dual_solve(&sched, &[5.0], &DualConfig::default()).unwrap();
        let b = dual_solve(&sched, &[5.0], &DualConfig { seed: 1, ..DualConfig::default() }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn point_mass_ub_has_no_variance() {
        let inst = Instance::new(vec![3.0], point_schedule(6, 1.0, 1.0), None).unwrap();
        let est = ub_estimate(&inst, 5, 1, &DualConfig::default()).unwrap();
        assert!((est.mean_hindsight - 3.0).abs() < 1e-12);
        assert_eq!(est.std_error, 0.0);
        assert!((est.dual_value - 3.0).abs() < 1e-9);
    }
}
