//! Instances, arrival parameters, per-phase distributions and seeded sampling.
//!
//! Periods are numbered from 1 in serialized documents (`start` of a phase)
//! and from 0 everywhere inside the library.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::error::{Error, Result};

/// Tolerance on probability vectors and mixture weights summing to one.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// Odd multiplier used to split a master seed into per-trial streams.
const SEED_SPLIT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Seed of trial `trial` under `master`.
pub fn trial_seed(master: u64, trial: u64) -> u64 {
    master ^ trial.wrapping_mul(SEED_SPLIT)
}

/// Deterministic generator for a seed. Every random draw in the crate goes
/// through this so paths are reproducible across platforms.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One realized arrival: reward coefficient and per-resource consumption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrivalParameter {
    pub reward: f64,
    pub consumption: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub type_index: Option<usize>,
}

impl ArrivalParameter {
    pub fn new(reward: f64, consumption: Vec<f64>) -> Self {
        Self {
            reward,
            consumption,
            type_index: None,
        }
    }

    pub fn with_type(mut self, j: usize) -> Self {
        self.type_index = Some(j);
        self
    }

    pub fn dim(&self) -> usize {
        self.consumption.len()
    }

    /// `p·a`, the priced consumption of accepting this arrival.
    pub fn priced(&self, prices: &[f64]) -> f64 {
        self.consumption
            .iter()
            .zip(prices)
            .map(|(a, p)| a * p)
            .sum()
    }

    fn validate(&self, m: usize, support_len: Option<usize>) -> Result<()> {
        if self.consumption.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: self.consumption.len(),
            });
        }
        if !self.reward.is_finite() {
            return Err(Error::InvalidDistribution("non-finite reward".into()));
        }
        if self.consumption.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidDistribution(
                "consumption entries must lie in [0, 1]".into(),
            ));
        }
        if let (Some(j), Some(n)) = (self.type_index, support_len) {
            if j >= n {
                return Err(Error::InvalidDistribution(format!(
                    "type index {j} outside support of size {n}"
                )));
            }
        }
        Ok(())
    }
}

/// Parameter metric for the linear accept/reject family: the sup-norm gap of
/// `(r x, a x)` over `x ∈ [0, 1]`, attained at `x = 1`.
pub fn rho_distance(a: &ArrivalParameter, b: &ArrivalParameter) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let gap = a
        .consumption
        .iter()
        .zip(&b.consumption)
        .map(|(x, y)| (x - y).abs())
        .fold((a.reward - b.reward).abs(), f64::max);
    Ok(gap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub law: RewardLaw,
}

/// Scalar law used for rewards and (per resource) for consumptions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardLaw {
    PointMass { value: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Normal(mean, sd) conditioned on being nonnegative.
    TruncNormal { mean: f64, sd: f64 },
    Mixture(Vec<MixtureComponent>),
}

impl RewardLaw {
    pub fn uniform(lo: f64, hi: f64) -> Self {
        RewardLaw::Uniform { lo, hi }
    }

    pub fn point(value: f64) -> Self {
        RewardLaw::PointMass { value }
    }

    pub fn trunc_normal(mean: f64, sd: f64) -> Self {
        RewardLaw::TruncNormal { mean, sd }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            RewardLaw::PointMass { value } if !value.is_finite() => {
                Err(Error::InvalidDistribution("non-finite point mass".into()))
            }
            RewardLaw::PointMass { .. } => Ok(()),
            RewardLaw::Uniform { lo, hi } => {
                if lo.is_finite() && hi.is_finite() && lo <= hi {
                    Ok(())
                } else {
                    Err(Error::InvalidDistribution(format!(
                        "uniform needs finite lo <= hi, got [{lo}, {hi}]"
                    )))
                }
            }
            RewardLaw::TruncNormal { mean, sd } => {
                if mean.is_finite() && sd.is_finite() && *sd > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidDistribution(format!(
                        "truncated normal needs sd > 0, got mean {mean}, sd {sd}"
                    )))
                }
            }
            RewardLaw::Mixture(parts) => {
                if parts.is_empty() {
                    return Err(Error::InvalidDistribution("empty mixture".into()));
                }
                let mut total = 0.0;
                for c in parts {
                    if !(c.weight >= 0.0) {
                        return Err(Error::InvalidDistribution(
                            "mixture weights must be nonnegative".into(),
                        ));
                    }
                    total += c.weight;
                    c.law.validate()?;
                }
                if (total - 1.0).abs() > PROB_SUM_TOL {
                    return Err(Error::InvalidDistribution(format!(
                        "mixture weights sum to {total}"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            RewardLaw::PointMass { value } => *value,
            RewardLaw::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            RewardLaw::TruncNormal { mean, sd } => {
                let normal = Normal::new(*mean, *sd).expect("validated sd");
                loop {
                    let x = normal.sample(rng);
                    if x >= 0.0 {
                        return x;
                    }
                }
            }
            RewardLaw::Mixture(parts) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for c in parts {
                    acc += c.weight;
                    if u < acc {
                        return c.law.sample(rng);
                    }
                }
                parts.last().expect("validated mixture").law.sample(rng)
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            RewardLaw::PointMass { value } => {
                if x >= *value {
                    1.0
                } else {
                    0.0
                }
            }
            RewardLaw::Uniform { lo, hi } => {
                if x < *lo {
                    0.0
                } else if x >= *hi {
                    1.0
                } else {
                    (x - lo) / (hi - lo)
                }
            }
            RewardLaw::TruncNormal { mean, sd } => {
                if x < 0.0 {
                    return 0.0;
                }
                let n = StdNormal::standard();
                let below = n.cdf(-mean / sd);
                ((n.cdf((x - mean) / sd) - below) / (1.0 - below)).clamp(0.0, 1.0)
            }
            RewardLaw::Mixture(parts) => parts.iter().map(|c| c.weight * c.law.cdf(x)).sum(),
        }
    }

    /// Generalized inverse `inf{x : F(x) >= u}` for `u ∈ (0, 1)`.
    pub fn quantile(&self, u: f64) -> f64 {
        match self {
            RewardLaw::PointMass { value } => *value,
            RewardLaw::Uniform { lo, hi } => lo + (hi - lo) * u,
            RewardLaw::TruncNormal { mean, sd } => {
                let n = StdNormal::standard();
                let below = n.cdf(-mean / sd);
                let z = n.inverse_cdf(below + u * (1.0 - below));
                (mean + sd * z).max(0.0)
            }
            RewardLaw::Mixture(parts) => {
                // The mixture quantile lies between the extreme component quantiles.
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for c in parts.iter().filter(|c| c.weight > 0.0) {
                    let q = c.law.quantile(u);
                    lo = lo.min(q);
                    hi = hi.max(q);
                }
                if hi - lo <= 0.0 {
                    return lo;
                }
                if self.cdf(lo) >= u {
                    return lo;
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    if self.cdf(mid) >= u {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                hi
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            RewardLaw::PointMass { value } => *value,
            RewardLaw::Uniform { lo, hi } => 0.5 * (lo + hi),
            RewardLaw::TruncNormal { mean, sd } => {
                let n = StdNormal::standard();
                let alpha = -mean / sd;
                let pdf = (-0.5 * alpha * alpha).exp() / (2.0 * std::f64::consts::PI).sqrt();
                mean + sd * pdf / (1.0 - n.cdf(alpha))
            }
            RewardLaw::Mixture(parts) => parts.iter().map(|c| c.weight * c.law.mean()).sum(),
        }
    }

    /// Smallest and largest values in the support; the upper end is infinite
    /// for truncated normals.
    pub fn support(&self) -> (f64, f64) {
        match self {
            RewardLaw::PointMass { value } => (*value, *value),
            RewardLaw::Uniform { lo, hi } => (*lo, *hi),
            RewardLaw::TruncNormal { .. } => (0.0, f64::INFINITY),
            RewardLaw::Mixture(parts) => parts
                .iter()
                .filter(|c| c.weight > 0.0)
                .map(|c| c.law.support())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (lo, hi)| {
                    (a.min(lo), b.max(hi))
                }),
        }
    }

    pub fn as_point_mass(&self) -> Option<f64> {
        match self {
            RewardLaw::PointMass { value } => Some(*value),
            _ => None,
        }
    }
}

/// Finite support distribution; the support is shared between phases that
/// only differ in their probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteSupport {
    pub points: Arc<Vec<ArrivalParameter>>,
    pub probs: Vec<f64>,
}

impl FiniteSupport {
    pub fn new(points: Arc<Vec<ArrivalParameter>>, probs: Vec<f64>) -> Result<Self> {
        let fs = FiniteSupport { points, probs };
        fs.validate_probs()?;
        Ok(fs)
    }

    fn validate_probs(&self) -> Result<()> {
        if self.points.len() != self.probs.len() || self.points.is_empty() {
            return Err(Error::InvalidDistribution(format!(
                "finite support has {} points but {} probabilities",
                self.points.len(),
                self.probs.len()
            )));
        }
        if self.probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::InvalidDistribution(
                "probabilities must be nonnegative".into(),
            ));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {total}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PhaseDistribution {
    /// Reward drawn from `reward`, each consumption entry drawn i.i.d. from `consumption`.
    Product {
        reward: RewardLaw,
        consumption: RewardLaw,
    },
    FiniteSupport(FiniteSupport),
}

impl PhaseDistribution {
    pub fn product(reward: RewardLaw, consumption: RewardLaw) -> Self {
        PhaseDistribution::Product {
            reward,
            consumption,
        }
    }

    /// Atoms and weights when the law is discrete: finite support, or a
    /// product of point masses.
    pub fn atoms(&self, m: usize) -> Option<Vec<(ArrivalParameter, f64)>> {
        match self {
            PhaseDistribution::FiniteSupport(fs) => Some(
                fs.points
                    .iter()
                    .zip(&fs.probs)
                    .enumerate()
                    .map(|(j, (p, w))| (p.clone().with_type(j), *w))
                    .collect(),
            ),
            PhaseDistribution::Product {
                reward,
                consumption,
            } => match (reward.as_point_mass(), consumption.as_point_mass()) {
                (Some(r), Some(a)) => Some(vec![(ArrivalParameter::new(r, vec![a; m]), 1.0)]),
                _ => None,
            },
        }
    }

    pub(crate) fn draw<R: Rng + ?Sized>(&self, m: usize, clip: bool, rng: &mut R, clips: &mut u64) -> ArrivalParameter {
        match self {
            PhaseDistribution::Product {
                reward,
                consumption,
            } => {
                let r = reward.sample(rng);
                let a = (0..m)
                    .map(|_| {
                        let x = consumption.sample(rng);
                        if clip && !(0.0..=1.0).contains(&x) {
                            *clips += 1;
                            x.clamp(0.0, 1.0)
                        } else {
                            x
                        }
                    })
                    .collect();
                ArrivalParameter::new(r, a)
            }
            PhaseDistribution::FiniteSupport(fs) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = fs.probs.len() - 1;
                for (j, p) in fs.probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = j;
                        break;
                    }
                }
                fs.points[pick].clone().with_type(pick)
            }
        }
    }

    fn validate(&self, m: usize) -> Result<()> {
        match self {
            PhaseDistribution::Product {
                reward,
                consumption,
            } => {
                reward.validate()?;
                consumption.validate()
            }
            PhaseDistribution::FiniteSupport(fs) => {
                fs.validate_probs()?;
                let n = fs.points.len();
                fs.points.iter().try_for_each(|p| p.validate(m, Some(n)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    /// First period of the phase, 1-based.
    pub start: usize,
    pub dist: PhaseDistribution,
}

/// A contiguous run of periods governed by one phase (0-based, half open).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub phase: usize,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionSchedule {
    pub horizon: usize,
    pub phases: Vec<Phase>,
}

impl DistributionSchedule {
    pub fn new(horizon: usize, phases: Vec<Phase>) -> Result<Self> {
        let s = DistributionSchedule { horizon, phases };
        s.check_partition()?;
        Ok(s)
    }

    pub fn stationary(horizon: usize, dist: PhaseDistribution) -> Self {
        DistributionSchedule {
            horizon,
            phases: vec![Phase { start: 1, dist }],
        }
    }

    fn check_partition(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidInstance("horizon must be positive".into()));
        }
        match self.phases.first() {
            Some(p) if p.start == 1 => {}
            _ => {
                return Err(Error::InvalidInstance(
                    "first phase must start at period 1".into(),
                ))
            }
        }
        for w in self.phases.windows(2) {
            if w[1].start <= w[0].start {
                return Err(Error::InvalidInstance(
                    "phase starts must be strictly increasing".into(),
                ));
            }
        }
        if self.phases.last().map_or(0, |p| p.start) > self.horizon {
            return Err(Error::InvalidInstance(
                "phase starts beyond the horizon".into(),
            ));
        }
        Ok(())
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        self.check_partition()?;
        self.phases.iter().try_for_each(|p| p.dist.validate(m))
    }

    pub fn spans(&self) -> Vec<Span> {
        self.phases
            .iter()
            .enumerate()
            .map(|(k, p)| Span {
                phase: k,
                start: p.start - 1,
                end: self
                    .phases
                    .get(k + 1)
                    .map_or(self.horizon, |next| next.start - 1),
            })
            .collect()
    }

    /// Phase index governing 0-based period `t`.
    pub fn phase_at(&self, t: usize) -> usize {
        self.phases.partition_point(|p| p.start - 1 <= t) - 1
    }

    pub fn dist_at(&self, t: usize) -> &PhaseDistribution {
        &self.phases[self.phase_at(t)].dist
    }

    pub fn is_stationary(&self) -> bool {
        self.phases.windows(2).all(|w| w[0].dist == w[1].dist)
    }

    /// Draws one path. Returns the arrivals and the number of clipped
    /// consumption entries.
    pub fn sample(&self, m: usize, clip: bool, seed: u64) -> (Vec<ArrivalParameter>, u64) {
        let mut rng = rng_from_seed(seed);
        let mut clips = 0;
        let mut path = Vec::with_capacity(self.horizon);
        for span in self.spans() {
            let dist = &self.phases[span.phase].dist;
            for _ in span.start..span.end {
                path.push(dist.draw(m, clip, &mut rng, &mut clips));
            }
        }
        (path, clips)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    True,
    Prior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub horizon: usize,
    pub num_resources: usize,
    pub capacities: Vec<f64>,
    pub true_schedule: DistributionSchedule,
    pub prior_schedule: Option<DistributionSchedule>,
    /// Ratio bound `r <= q a_i`; diagnostic only.
    pub q_bound: Option<f64>,
    /// Clip sampled consumptions into [0, 1] (counted per path).
    pub clip_consumption: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    pub arrivals: Vec<ArrivalParameter>,
    pub clip_count: u64,
}

impl Instance {
    pub fn new(
        capacities: Vec<f64>,
        true_schedule: DistributionSchedule,
        prior_schedule: Option<DistributionSchedule>,
    ) -> Result<Self> {
        let inst = Instance {
            horizon: true_schedule.horizon,
            num_resources: capacities.len(),
            capacities,
            true_schedule,
            prior_schedule,
            q_bound: None,
            clip_consumption: true,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_resources == 0 || self.capacities.len() != self.num_resources {
            return Err(Error::InvalidInstance(format!(
                "expected {} capacities, got {}",
                self.num_resources,
                self.capacities.len()
            )));
        }
        if self.capacities.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
            return Err(Error::InvalidInstance(
                "capacities must be positive and finite".into(),
            ));
        }
        if self.true_schedule.horizon != self.horizon {
            return Err(Error::InvalidInstance("true schedule horizon differs from T".into()));
        }
        self.true_schedule.validate(self.num_resources)?;
        if let Some(prior) = &self.prior_schedule {
            if prior.horizon != self.horizon {
                return Err(Error::InvalidInstance(
                    "prior schedule horizon differs from T".into(),
                ));
            }
            prior.validate(self.num_resources)?;
        }
        Ok(())
    }

    pub fn schedule(&self, which: Which) -> Result<&DistributionSchedule> {
        match which {
            Which::True => Ok(&self.true_schedule),
            Which::Prior => self
                .prior_schedule
                .as_ref()
                .ok_or(Error::MissingSchedule("prior")),
        }
    }

    /// Prior schedule if present, otherwise the true one.
    pub fn planning_schedule(&self) -> &DistributionSchedule {
        self.prior_schedule.as_ref().unwrap_or(&self.true_schedule)
    }

    /// Ratio bound `q` when it is known exactly: the explicit value, or the
    /// supremum over laws that all have bounded support.
    pub fn exact_q(&self) -> Option<f64> {
        if let Some(q) = self.q_bound {
            return Some(q);
        }
        let mut schedules = vec![&self.true_schedule];
        schedules.extend(self.prior_schedule.as_ref());
        schedules
            .iter()
            .flat_map(|s| s.phases.iter())
            .map(|p| phase_ratio_sup(&p.dist, self.num_resources))
            .try_fold(0.0f64, |acc, q| q.map(|q| acc.max(q)))
            .filter(|q| q.is_finite())
    }

    /// `exact_q`, or else the largest ratio over 10^5 planning-schedule draws.
    pub fn effective_q(&self) -> f64 {
        if let Some(q) = self.exact_q() {
            return q;
        }
        let sched = self.planning_schedule();
        let mut rng = rng_from_seed(0x5151_0000_0000_0001);
        let mut clips = 0;
        (0..100_000)
            .map(|k| {
                let theta = sched.dist_at(k % sched.horizon).draw(
                    self.num_resources,
                    self.clip_consumption,
                    &mut rng,
                    &mut clips,
                );
                arrival_ratio(&theta)
            })
            .fold(0.0, f64::max)
    }

    pub fn sample_path(&self, which: Which, seed: u64) -> Result<SampledPath> {
        let sched = self.schedule(which)?;
        let (arrivals, clip_count) = sched.sample(self.num_resources, self.clip_consumption, seed);
        Ok(SampledPath {
            arrivals,
            clip_count,
        })
    }
}

/// `r / min positive a_i`, zero when nothing is consumed or the reward is nonpositive.
fn arrival_ratio(theta: &ArrivalParameter) -> f64 {
    let amin = theta
        .consumption
        .iter()
        .copied()
        .filter(|a| *a > 0.0)
        .fold(f64::INFINITY, f64::min);
    if amin.is_finite() && theta.reward > 0.0 {
        theta.reward / amin
    } else {
        0.0
    }
}

fn phase_ratio_sup(dist: &PhaseDistribution, m: usize) -> Option<f64> {
    match dist {
        PhaseDistribution::FiniteSupport(fs) => {
            Some(fs.points.iter().map(arrival_ratio).fold(0.0, f64::max))
        }
        PhaseDistribution::Product {
            reward,
            consumption,
        } => {
            let (_, rmax) = reward.support();
            let (amin, amax) = consumption.support();
            if !rmax.is_finite() {
                return None;
            }
            if rmax <= 0.0 || amax <= 0.0 || m == 0 {
                return Some(0.0);
            }
            // Clipping maps draws below 0 to 0, so the smallest positive
            // consumption is the law's lower end when positive.
            if amin > 0.0 {
                Some(rmax / amin.min(1.0))
            } else {
                None
            }
        }
    }
}

/// Wire form of an instance document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceDoc {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub m: usize,
    pub c: Vec<f64>,
    pub phases: Vec<PhaseDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_phases: Option<Vec<PhaseDoc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_bound: Option<f64>,
    #[serde(default = "default_clip")]
    pub clip_consumption: bool,
}

fn default_clip() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseDoc {
    pub start: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_law: Option<RewardLaw>,
    pub consumption_law: ConsumptionLawDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConsumptionLawDoc {
    FiniteSupport { finite_support: FiniteSupport },
    Law(RewardLaw),
}

impl PhaseDoc {
    fn into_phase(self) -> Result<Phase> {
        let dist = match (self.consumption_law, self.reward_law) {
            (ConsumptionLawDoc::FiniteSupport { finite_support }, None) => {
                PhaseDistribution::FiniteSupport(finite_support)
            }
            (ConsumptionLawDoc::FiniteSupport { .. }, Some(_)) => {
                return Err(Error::InvalidInstance(
                    "finite-support phase must not carry a reward_law".into(),
                ))
            }
            (ConsumptionLawDoc::Law(consumption), Some(reward)) => PhaseDistribution::Product {
                reward,
                consumption,
            },
            (ConsumptionLawDoc::Law(_), None) => {
                return Err(Error::InvalidInstance(format!(
                    "phase starting at {} lacks a reward_law",
                    self.start
                )))
            }
        };
        Ok(Phase {
            start: self.start,
            dist,
        })
    }

    fn from_phase(p: &Phase) -> Self {
        match &p.dist {
            PhaseDistribution::Product {
                reward,
                consumption,
            } => PhaseDoc {
                start: p.start,
                reward_law: Some(reward.clone()),
                consumption_law: ConsumptionLawDoc::Law(consumption.clone()),
            },
            PhaseDistribution::FiniteSupport(fs) => PhaseDoc {
                start: p.start,
                reward_law: None,
                consumption_law: ConsumptionLawDoc::FiniteSupport {
                    finite_support: fs.clone(),
                },
            },
        }
    }
}

fn schedule_from_docs(horizon: usize, docs: Vec<PhaseDoc>) -> Result<DistributionSchedule> {
    let phases = docs
        .into_iter()
        .map(PhaseDoc::into_phase)
        .collect::<Result<Vec<_>>>()?;
    DistributionSchedule::new(horizon, phases)
}

impl TryFrom<InstanceDoc> for Instance {
    type Error = Error;

    fn try_from(doc: InstanceDoc) -> Result<Self> {
        if doc.c.len() != doc.m {
            return Err(Error::DimensionMismatch {
                expected: doc.m,
                found: doc.c.len(),
            });
        }
        let true_schedule = schedule_from_docs(doc.horizon, doc.phases)?;
        let prior_schedule = doc
            .prior_phases
            .map(|p| schedule_from_docs(doc.horizon, p))
            .transpose()?;
        let inst = Instance {
            horizon: doc.horizon,
            num_resources: doc.m,
            capacities: doc.c,
            true_schedule,
            prior_schedule,
            q_bound: doc.q_bound,
            clip_consumption: doc.clip_consumption,
        };
        inst.validate()?;
        Ok(inst)
    }
}

impl From<&Instance> for InstanceDoc {
    fn from(inst: &Instance) -> Self {
        InstanceDoc {
            horizon: inst.horizon,
            m: inst.num_resources,
            c: inst.capacities.clone(),
            phases: inst.true_schedule.phases.iter().map(PhaseDoc::from_phase).collect(),
            prior_phases: inst
                .prior_schedule
                .as_ref()
                .map(|s| s.phases.iter().map(PhaseDoc::from_phase).collect()),
            q_bound: inst.q_bound,
            clip_consumption: inst.clip_consumption,
        }
    }
}

impl Instance {
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: InstanceDoc = serde_json::from_str(text)?;
        Instance::try_from(doc)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&InstanceDoc::from(self))?)
    }
}

/// A schedule document on its own (`{T, m, phases}`), as read by the
/// `wasserstein` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleDoc {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub m: usize,
    pub phases: Vec<PhaseDoc>,
}

impl ScheduleDoc {
    pub fn into_schedule(self) -> Result<(DistributionSchedule, usize)> {
        let s = schedule_from_docs(self.horizon, self.phases)?;
        s.validate(self.m)?;
        Ok((s, self.m))
    }

    pub fn from_schedule(s: &DistributionSchedule, m: usize) -> Self {
        ScheduleDoc {
            horizon: s.horizon,
            m,
            phases: s.phases.iter().map(PhaseDoc::from_phase).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unif_instance(t: usize) -> Instance {
        let sched = DistributionSchedule::stationary(
            t,
            PhaseDistribution::product(RewardLaw::uniform(0.0, 1.0), RewardLaw::point(1.0)),
        );
        Instance::new(vec![t as f64 / 4.0], sched, None).unwrap()
    }

    #[test]
    fn point_mass_path_is_constant() {
        let sched = DistributionSchedule::stationary(
            7,
            PhaseDistribution::product(RewardLaw::point(0.7), RewardLaw::point(0.3)),
        );
        let inst = Instance::new(vec![1.0, 2.0], sched, None).unwrap();
        for seed in [0, 1, 99] {
            let path = inst.sample_path(Which::True, seed).unwrap();
            assert_eq!(path.arrivals.len(), 7);
            assert!(path
                .arrivals
                .iter()
                .all(|a| a.reward == 0.7 && a.consumption == vec![0.3, 0.3]));
        }
    }

    #[test]
    fn prior_request_without_prior_fails() {
        let inst = unif_instance(10);
        assert!(matches!(
            inst.sample_path(Which::Prior, 1),
            Err(Error::MissingSchedule("prior"))
        ));
    }

    #[test]
    fn uniform_reward_mean_is_half() {
        let inst = unif_instance(100_000);
        let path = inst.sample_path(Which::True, 2024).unwrap();
        let mean = path.arrivals.iter().map(|a| a.reward).sum::<f64>() / 1e5;
        // 3 sigma of the sample mean: 3 * sqrt(1/12) / sqrt(1e5) < 0.003
        assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn same_seed_same_path() {
        let inst = unif_instance(500);
        let a = inst.sample_path(Which::True, 42).unwrap();
        let b = inst.sample_path(Which::True, 42).unwrap();
        let c = inst.sample_path(Which::True, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn clipping_counts_and_bounds() {
        let sched = DistributionSchedule::stationary(
            2000,
            PhaseDistribution::product(RewardLaw::uniform(0.0, 1.0), RewardLaw::uniform(0.1, 1.1)),
        );
        let inst = Instance::new(vec![100.0; 3], sched, None).unwrap();
        let path = inst.sample_path(Which::True, 5).unwrap();
        assert!(path.clip_count > 0);
        assert!(path
            .arrivals
            .iter()
            .flat_map(|a| &a.consumption)
            .all(|a| (0.0..=1.0).contains(a)));

        let mut raw = inst.clone();
        raw.clip_consumption = false;
        let path = raw.sample_path(Which::True, 5).unwrap();
        assert_eq!(path.clip_count, 0);
        assert!(path.arrivals.iter().flat_map(|a| &a.consumption).any(|a| *a > 1.0));
    }

    #[test]
    fn rho_examples() {
        let a = ArrivalParameter::new(1.0, vec![0.5]);
        assert_eq!(rho_distance(&a, &a).unwrap(), 0.0);
        let b = ArrivalParameter::new(0.6, vec![0.5]);
        assert!((rho_distance(&a, &b).unwrap() - 0.4).abs() < 1e-15);
        let x = ArrivalParameter::new(0.3, vec![0.9]);
        let y = ArrivalParameter::new(0.5, vec![0.1]);
        assert!((rho_distance(&x, &y).unwrap() - 0.8).abs() < 1e-15);
        let z = ArrivalParameter::new(0.5, vec![0.1, 0.2]);
        assert!(matches!(
            rho_distance(&x, &z),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn finite_support_sampling_tags_types() {
        let pts = Arc::new(vec![
            ArrivalParameter::new(2.0, vec![1.0]),
            ArrivalParameter::new(1.0, vec![0.5]),
        ]);
        let fs = FiniteSupport::new(pts, vec![0.25, 0.75]).unwrap();
        let sched = DistributionSchedule::stationary(4000, PhaseDistribution::FiniteSupport(fs));
        let inst = Instance::new(vec![10.0], sched, None).unwrap();
        let path = inst.sample_path(Which::True, 3).unwrap();
        let ones = path.arrivals.iter().filter(|a| a.type_index == Some(1)).count();
        assert!(path.arrivals.iter().all(|a| a.type_index.is_some()));
        // 3 sigma band around 3000: sqrt(4000 * 0.1875) ~ 27.4
        assert!((ones as f64 - 3000.0).abs() < 90.0, "{ones}");
    }

    #[test]
    fn bad_probabilities_rejected() {
        let pts = Arc::new(vec![ArrivalParameter::new(1.0, vec![1.0])]);
        assert!(FiniteSupport::new(pts.clone(), vec![0.9]).is_err());
        assert!(FiniteSupport::new(pts, vec![1.0 + 1e-9]).is_err());
        let bad = RewardLaw::Mixture(vec![
            MixtureComponent { weight: 0.5, law: RewardLaw::point(0.0) },
            MixtureComponent { weight: 0.6, law: RewardLaw::point(1.0) },
        ]);
        assert!(bad.validate().is_err());
        assert!(RewardLaw::uniform(1.0, 0.0).validate().is_err());
        assert!(RewardLaw::trunc_normal(1.0, 0.0).validate().is_err());
    }

    #[test]
    fn schedule_partition_checks() {
        let d = PhaseDistribution::product(RewardLaw::point(1.0), RewardLaw::point(1.0));
        let bad_start = DistributionSchedule::new(5, vec![Phase { start: 2, dist: d.clone() }]);
        assert!(bad_start.is_err());
        let unordered = DistributionSchedule::new(
            5,
            vec![
                Phase { start: 1, dist: d.clone() },
                Phase { start: 4, dist: d.clone() },
                Phase { start: 3, dist: d.clone() },
            ],
        );
        assert!(unordered.is_err());
        let ok = DistributionSchedule::new(
            5,
            vec![Phase { start: 1, dist: d.clone() }, Phase { start: 3, dist: d }],
        )
        .unwrap();
        assert_eq!(ok.phase_at(0), 0);
        assert_eq!(ok.phase_at(1), 0);
        assert_eq!(ok.phase_at(2), 1);
        assert_eq!(ok.phase_at(4), 1);
        let spans = ok.spans();
        assert_eq!((spans[1].start, spans[1].end), (2, 5));
    }

    #[test]
    fn truncated_normal_quantile_inverts_cdf() {
        let law = RewardLaw::trunc_normal(0.5, 1.0);
        for u in [0.01, 0.2, 0.5, 0.9, 0.999] {
            let x = law.quantile(u);
            assert!(x >= 0.0);
            assert!((law.cdf(x) - u).abs() < 1e-9, "u={u}");
        }
        let mix = RewardLaw::Mixture(vec![
            MixtureComponent { weight: 0.5, law: RewardLaw::uniform(0.0, 2.0) },
            MixtureComponent { weight: 0.5, law: RewardLaw::trunc_normal(2.0, 1.0) },
        ]);
        for u in [0.05, 0.5, 0.95] {
            assert!((mix.cdf(mix.quantile(u)) - u).abs() < 1e-9);
        }
    }

    #[test]
    fn json_rejects_unknown_fields() {
        let text = r#"{"T": 4, "m": 1, "c": [2], "phases": [
            {"start": 1, "reward_law": {"point_mass": {"value": 1}}, "consumption_law": {"point_mass": {"value": 1}}}
        ], "bogus": 1}"#;
        assert!(Instance::from_json(text).is_err());
        let ok = text.replace(r#", "bogus": 1"#, "");
        let inst = Instance::from_json(&ok).unwrap();
        assert_eq!(inst.horizon, 4);
        let back = Instance::from_json(&inst.to_json().unwrap()).unwrap();
        assert_eq!(back, inst);
    }

    #[test]
    fn exact_q_for_bounded_laws() {
        let sched = DistributionSchedule::stationary(
            10,
            PhaseDistribution::product(RewardLaw::uniform(0.0, 2.0), RewardLaw::uniform(0.1, 1.1)),
        );
        let inst = Instance::new(vec![3.0], sched, None).unwrap();
        assert!((inst.effective_q() - 20.0).abs() < 1e-12);
    }
}
