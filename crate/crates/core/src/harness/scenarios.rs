//! Instance builders for the two experiment families and the
//! hand-built counterexamples.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    rng_from_seed, ArrivalParameter, DistributionSchedule, FiniteSupport, Instance, InstanceDoc,
    MixtureComponent, Phase, PhaseDistribution, RewardLaw,
};

const BUNDLED_TOPOLOGY: &str = include_str!("../../data/topology.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exp1Setting {
    Uniform,
    Normal,
    Mixed,
}

impl std::str::FromStr for Exp1Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Exp1Setting::Uniform),
            "normal" => Ok(Exp1Setting::Normal),
            "mixed" => Ok(Exp1Setting::Mixed),
            other => Err(Error::Config(format!("unknown setting `{other}`"))),
        }
    }
}

/// Reward law with location `a`: `Unif[0,a]`, `Norm(a,1)` cut at zero, or
/// their even mixture.
pub fn exp1_reward_law(setting: Exp1Setting, a: f64) -> RewardLaw {
    match setting {
        Exp1Setting::Uniform => RewardLaw::uniform(0.0, a),
        Exp1Setting::Normal => RewardLaw::trunc_normal(a, 1.0),
        Exp1Setting::Mixed => RewardLaw::Mixture(vec![
            MixtureComponent {
                weight: 0.5,
                law: RewardLaw::uniform(0.0, a),
            },
            MixtureComponent {
                weight: 0.5,
                law: RewardLaw::trunc_normal(a, 1.0),
            },
        ]),
    }
}

/// Two-phase online LP: locations `1, α` for the truth and `1+β, α+β` for
/// the prior, switching after `⌊T/2⌋`. Consumptions are `Unif[0.1,1.1]`.
pub fn build_exp1(
    setting: Exp1Setting,
    alpha: f64,
    beta: f64,
    horizon: usize,
    m: usize,
    c: f64,
) -> Result<Instance> {
    if horizon < 2 {
        return Err(Error::InvalidInstance("experiment I needs T >= 2".into()));
    }
    if !(alpha > 0.0) || !(beta >= 0.0) || !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::InvalidInstance(format!(
            "need alpha > 0 and beta >= 0, got {alpha}, {beta}"
        )));
    }
    let consumption = RewardLaw::uniform(0.1, 1.1);
    let split = horizon / 2 + 1;
    let two_phase = |first: f64, second: f64| {
        DistributionSchedule::new(
            horizon,
            vec![
                Phase {
                    start: 1,
                    dist: PhaseDistribution::product(exp1_reward_law(setting, first), consumption.clone()),
                },
                Phase {
                    start: split,
                    dist: PhaseDistribution::product(exp1_reward_law(setting, second), consumption.clone()),
                },
            ],
        )
    };
    let truth = two_phase(1.0, alpha)?;
    let prior = two_phase(1.0 + beta, alpha + beta)?;
    Instance::new(vec![c; m], truth, Some(prior))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Leg {
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Itinerary {
    pub origin: usize,
    pub destination: usize,
    pub legs: Vec<usize>,
    pub fare: f64,
    /// Base arrival probability `P_0`.
    pub prob: f64,
}

/// Airline network: legs are resources, itineraries are request types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub cities: usize,
    pub hub: usize,
    /// Horizon at which `capacities` apply; they scale linearly with `T`.
    pub base_horizon: usize,
    pub legs: Vec<Leg>,
    pub capacities: Vec<f64>,
    pub itineraries: Vec<Itinerary>,
}

impl Topology {
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED_TOPOLOGY).expect("bundled topology is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Topology = serde_json::from_str(text)
            .map_err(|e| Error::InvalidInstance(format!("malformed topology: {e}")))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInstance(format!("malformed topology: {msg}")));
        if self.legs.is_empty() || self.itineraries.is_empty() {
            return bad("needs at least one leg and one itinerary".into());
        }
        if self.capacities.len() != self.legs.len() {
            return bad(format!(
                "{} capacities for {} legs",
                self.capacities.len(),
                self.legs.len()
            ));
        }
        if self.base_horizon == 0 || self.capacities.iter().any(|c| !(*c > 0.0)) {
            return bad("capacities and base horizon must be positive".into());
        }
        for (k, l) in self.legs.iter().enumerate() {
            if l.from >= self.cities || l.to >= self.cities || l.from == l.to {
                return bad(format!("leg {k} has bad endpoints"));
            }
        }
        for (k, it) in self.itineraries.iter().enumerate() {
            if it.legs.is_empty() || it.legs.iter().any(|&l| l >= self.legs.len()) {
                return bad(format!("itinerary {k} references unknown legs"));
            }
            if !(it.fare >= 0.0) || !(it.prob >= 0.0) || !it.fare.is_finite() {
                return bad(format!("itinerary {k} has a bad fare or probability"));
            }
        }
        let total: f64 = self.itineraries.iter().map(|i| i.prob).sum();
        if !(total > 0.0) {
            return bad("base probabilities sum to zero".into());
        }
        Ok(())
    }

    /// One arrival type per itinerary with its leg-incidence row.
    pub fn arrival_types(&self) -> Vec<ArrivalParameter> {
        self.itineraries
            .iter()
            .enumerate()
            .map(|(j, it)| {
                let mut a = vec![0.0; self.legs.len()];
                for &l in &it.legs {
                    a[l] = 1.0;
                }
                ArrivalParameter::new(it.fare, a).with_type(j)
            })
            .collect()
    }

    pub fn base_probs(&self) -> Vec<f64> {
        normalize(self.itineraries.iter().map(|i| i.prob).collect())
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn perturbed<R: Rng>(base: &[f64], scale: f64, rng: &mut R) -> Vec<f64> {
    normalize(base.iter().map(|p| p + scale * rng.random::<f64>()).collect())
}

fn per_period_schedule(
    points: &Arc<Vec<ArrivalParameter>>,
    probs: Vec<Vec<f64>>,
) -> Result<DistributionSchedule> {
    let horizon = probs.len();
    let phases = probs
        .into_iter()
        .enumerate()
        .map(|(t, p)| {
            Ok(Phase {
                start: t + 1,
                dist: PhaseDistribution::FiniteSupport(FiniteSupport::new(points.clone(), p)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    DistributionSchedule::new(horizon, phases)
}

/// Network revenue management: `P_t = normalize(P_0 + α U_t)` drawn once
/// from `seed`, prior `P̂_t = normalize(P_t + β V_t)`. Leg capacities scale
/// with `T / base_horizon`.
pub fn build_exp2(alpha: f64, beta: f64, topology: &Topology, horizon: usize, seed: u64) -> Result<Instance> {
    topology.validate()?;
    if horizon == 0 {
        return Err(Error::InvalidInstance("horizon must be positive".into()));
    }
    if !(alpha >= 0.0) || !(beta >= 0.0) || !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::InvalidInstance("alpha and beta must be nonnegative".into()));
    }
    let points = Arc::new(topology.arrival_types());
    let base = topology.base_probs();
    let mut rng = rng_from_seed(seed);
    let truth_probs: Vec<Vec<f64>> = (0..horizon)
        .map(|_| {
            if alpha == 0.0 {
                base.clone()
            } else {
                perturbed(&base, alpha, &mut rng)
            }
        })
        .collect();
    let prior_probs: Option<Vec<Vec<f64>>> = (beta > 0.0).then(|| {
        truth_probs
            .iter()
            .map(|p| perturbed(p, beta, &mut rng))
            .collect()
    });

    let truth = if alpha == 0.0 {
        DistributionSchedule::stationary(
            horizon,
            PhaseDistribution::FiniteSupport(FiniteSupport::new(points.clone(), base)?),
        )
    } else {
        per_period_schedule(&points, truth_probs)?
    };
    let prior = prior_probs.map(|p| per_period_schedule(&points, p)).transpose()?;
    let scale = horizon as f64 / topology.base_horizon as f64;
    let capacities = topology.capacities.iter().map(|c| c * scale).collect();
    Instance::new(capacities, truth, prior)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialKind {
    /// Rewards 1 then `1+κ`: waiting for the second half pays.
    Eg1,
    /// Rewards 1 then `1-κ`: accepting early pays.
    Eg2,
    /// True rewards `1, 1, ½` by thirds; the prior inflates them to
    /// `1+2ε, 1+ε, ½+ε` and misleads any fixed bid price.
    EggPair,
}

impl std::str::FromStr for AdversarialKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eg1" => Ok(AdversarialKind::Eg1),
            "eg2" => Ok(AdversarialKind::Eg2),
            "egg_pair" | "egg" => Ok(AdversarialKind::EggPair),
            other => Err(Error::Config(format!("unknown adversarial kind `{other}`"))),
        }
    }
}

fn point_mass_blocks(horizon: usize, blocks: &[(usize, f64)]) -> Result<DistributionSchedule> {
    let phases = blocks
        .iter()
        .filter(|(start, _)| *start <= horizon)
        .map(|&(start, r)| Phase {
            start,
            dist: PhaseDistribution::product(RewardLaw::point(r), RewardLaw::point(1.0)),
        })
        .collect();
    DistributionSchedule::new(horizon, phases)
}

/// Single-resource point-mass counterexamples with unit consumption.
pub fn build_adversarial(kind: AdversarialKind, horizon: usize, param: f64) -> Result<Instance> {
    if !(param >= 0.0) || !param.is_finite() {
        return Err(Error::InvalidInstance(format!("parameter must be nonnegative, got {param}")));
    }
    match kind {
        AdversarialKind::Eg1 | AdversarialKind::Eg2 => {
            if horizon < 2 {
                return Err(Error::InvalidInstance("needs T >= 2".into()));
            }
            let second = if kind == AdversarialKind::Eg1 {
                1.0 + param
            } else {
                1.0 - param
            };
            if second < 0.0 {
                return Err(Error::InvalidInstance("kappa must not exceed 1".into()));
            }
            let truth = point_mass_blocks(horizon, &[(1, 1.0), (horizon / 2 + 1, second)])?;
            Instance::new(vec![horizon as f64 / 2.0], truth, None)
        }
        AdversarialKind::EggPair => {
            let third = horizon / 3;
            if third == 0 {
                return Err(Error::InvalidInstance("needs T >= 3".into()));
            }
            let starts = [1, third + 1, 2 * third + 1];
            let truth = point_mass_blocks(
                horizon,
                &[(starts[0], 1.0), (starts[1], 1.0), (starts[2], 0.5)],
            )?;
            let prior = point_mass_blocks(
                horizon,
                &[
                    (starts[0], 1.0 + 2.0 * param),
                    (starts[1], 1.0 + param),
                    (starts[2], 0.5 + param),
                ],
            )?;
            Instance::new(vec![third as f64], truth, Some(prior))
        }
    }
}

fn default_horizon() -> usize {
    1000
}

fn default_m() -> usize {
    10
}

fn default_c() -> f64 {
    200.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exp1Params {
    pub setting: Exp1Setting,
    pub alpha: f64,
    pub beta: f64,
    #[serde(rename = "T", default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_true")]
    pub clip_consumption: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exp2Params {
    pub alpha: f64,
    pub beta: f64,
    #[serde(rename = "T", default = "default_horizon")]
    pub horizon: usize,
    /// Bundled network when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<PathBuf>,
    /// Seed for the probability vectors; the master seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prob_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarialParams {
    pub kind: AdversarialKind,
    #[serde(rename = "T")]
    pub horizon: usize,
    /// `κ` for eg1/eg2, `ε` for the egg pair.
    pub param: f64,
}

/// Where an experiment's instance comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Exp1(Exp1Params),
    Exp2(Exp2Params),
    Adversarial(AdversarialParams),
    Instance(Box<InstanceDoc>),
}

impl Scenario {
    pub fn horizon(&self) -> usize {
        match self {
            Scenario::Exp1(p) => p.horizon,
            Scenario::Exp2(p) => p.horizon,
            Scenario::Adversarial(p) => p.horizon,
            Scenario::Instance(d) => d.horizon,
        }
    }

    pub fn build(&self, master_seed: u64) -> Result<Instance> {
        match self {
            Scenario::Exp1(p) => {
                let mut inst = build_exp1(p.setting, p.alpha, p.beta, p.horizon, p.m, p.c)?;
                inst.clip_consumption = p.clip_consumption;
                Ok(inst)
            }
            Scenario::Exp2(p) => {
                let topo = match &p.topology {
                    Some(path) => Topology::load(path)?,
                    None => Topology::bundled(),
                };
                build_exp2(p.alpha, p.beta, &topo, p.horizon, p.prob_seed.unwrap_or(master_seed))
            }
            Scenario::Adversarial(p) => build_adversarial(p.kind, p.horizon, p.param),
            Scenario::Instance(doc) => Instance::try_from((**doc).clone()),
        }
    }

    /// Same scenario at horizon `t` with capacities scaled by `t / T`.
    pub fn at_horizon(&self, t: usize) -> Result<Scenario> {
        if t == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        let base = self.horizon() as f64;
        let scale = t as f64 / base;
        Ok(match self {
            Scenario::Exp1(p) => Scenario::Exp1(Exp1Params {
                horizon: t,
                c: p.c * scale,
                ..p.clone()
            }),
            // Exp II and the counterexamples derive capacities from T.
            Scenario::Exp2(p) => Scenario::Exp2(Exp2Params {
                horizon: t,
                ..p.clone()
            }),
            Scenario::Adversarial(p) => Scenario::Adversarial(AdversarialParams {
                horizon: t,
                ..p.clone()
            }),
            Scenario::Instance(doc) => {
                let mut d = (**doc).clone();
                let rescale = |start: usize| ((start - 1) as f64 * scale).floor() as usize + 1;
                let mut phases = std::mem::take(&mut d.phases);
                for ph in phases.iter_mut() {
                    ph.start = rescale(ph.start);
                }
                phases.dedup_by_key(|ph| ph.start);
                d.phases = phases;
                if let Some(prior) = d.prior_phases.as_mut() {
                    for ph in prior.iter_mut() {
                        ph.start = rescale(ph.start);
                    }
                    prior.dedup_by_key(|ph| ph.start);
                }
                d.c.iter_mut().for_each(|c| *c *= scale);
                d.horizon = t;
                Scenario::Instance(Box::new(d))
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Which;
    use crate::oracle::hindsight_optimum;

    fn reward_law(inst: &Instance, which: Which, t: usize) -> RewardLaw {
        match inst.schedule(which).unwrap().dist_at(t) {
            PhaseDistribution::Product { reward, .. } => reward.clone(),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn exp1_uniform_without_prior_error_matches_truth() {
        let inst = build_exp1(Exp1Setting::Uniform, 1.0, 0.0, 1000, 10, 200.0).unwrap();
        assert_eq!(inst.true_schedule, *inst.prior_schedule.as_ref().unwrap());
        assert_eq!(reward_law(&inst, Which::True, 0), RewardLaw::uniform(0.0, 1.0));
        assert_eq!(reward_law(&inst, Which::True, 999), RewardLaw::uniform(0.0, 1.0));
        assert_eq!(inst.capacities, vec![200.0; 10]);
    }

    #[test]
    fn exp1_prior_is_shifted_by_beta() {
        let inst = build_exp1(Exp1Setting::Uniform, 2.0, 1.0, 1000, 10, 200.0).unwrap();
        assert_eq!(reward_law(&inst, Which::Prior, 500), RewardLaw::uniform(0.0, 3.0));
        assert_eq!(reward_law(&inst, Which::Prior, 499), RewardLaw::uniform(0.0, 2.0));
        assert_eq!(inst.true_schedule.phase_at(499), 0);
        assert_eq!(inst.true_schedule.phase_at(500), 1);

        let normal = build_exp1(Exp1Setting::Normal, 1.0, 0.5, 1000, 10, 200.0).unwrap();
        assert_eq!(reward_law(&normal, Which::Prior, 0), RewardLaw::trunc_normal(1.5, 1.0));

        let odd = build_exp1(Exp1Setting::Mixed, 2.0, 0.0, 7, 1, 2.0).unwrap();
        assert_eq!(odd.true_schedule.phase_at(2), 0);
        assert_eq!(odd.true_schedule.phase_at(3), 1);
    }

    #[test]
    fn eg1_rewards_and_capacity() {
        let inst = build_adversarial(AdversarialKind::Eg1, 6, 0.5).unwrap();
        let path = inst.sample_path(Which::True, 1).unwrap().arrivals;
        let r: Vec<f64> = path.iter().map(|a| a.reward).collect();
        assert_eq!(r, vec![1.0, 1.0, 1.0, 1.5, 1.5, 1.5]);
        assert_eq!(inst.capacities, vec![3.0]);
    }

    #[test]
    fn eg2_hindsight_is_half_horizon() {
        let inst = build_adversarial(AdversarialKind::Eg2, 100, 0.3).unwrap();
        let path = inst.sample_path(Which::True, 1).unwrap().arrivals;
        let h = hindsight_optimum(&path, &inst.capacities).unwrap();
        assert!((h.value - 50.0).abs() < 1e-9);
    }

    #[test]
    fn egg_pair_prior_blocks() {
        let inst = build_adversarial(AdversarialKind::EggPair, 9, 0.1).unwrap();
        let prior = inst.sample_path(Which::Prior, 0).unwrap().arrivals;
        let r: Vec<f64> = prior.iter().map(|a| a.reward).collect();
        let want = [1.2, 1.2, 1.2, 1.1, 1.1, 1.1, 0.6, 0.6, 0.6];
        for (a, b) in r.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{r:?}");
        }
        let truth = inst.sample_path(Which::True, 0).unwrap().arrivals;
        let r: Vec<f64> = truth.iter().map(|a| a.reward).collect();
        assert_eq!(r, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5]);
        assert_eq!(inst.capacities, vec![3.0]);
    }

    #[test]
    fn bundled_topology_shape() {
        let t = Topology::bundled();
        assert_eq!(t.cities, 8);
        assert_eq!(t.legs.len(), 14);
        assert_eq!(t.itineraries.len(), 41);
        assert!(t.itineraries.iter().all(|i| i.fare <= 1.0 && i.fare > 0.0));
        assert!(t.itineraries.iter().all(|i| i.legs.len() <= 2));
    }

    fn phase_probs(s: &DistributionSchedule, t: usize) -> Vec<f64> {
        match s.dist_at(t) {
            PhaseDistribution::FiniteSupport(fs) => fs.probs.clone(),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn exp2_probability_vectors() {
        let topo = Topology::bundled();
        let stat = build_exp2(0.0, 0.0, &topo, 50, 3).unwrap();
        assert!(stat.prior_schedule.is_none());
        assert_eq!(phase_probs(&stat.true_schedule, 0), topo.base_probs());
        assert_eq!(phase_probs(&stat.true_schedule, 49), topo.base_probs());

        let inst = build_exp2(0.02, 0.01, &topo, 50, 3).unwrap();
        let prior = inst.prior_schedule.as_ref().unwrap();
        for t in 0..50 {
            for s in [&inst.true_schedule, prior] {
                let p = phase_probs(s, t);
                assert!(p.iter().all(|x| *x >= 0.0));
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert_ne!(phase_probs(&inst.true_schedule, 0), phase_probs(&inst.true_schedule, 1));
        assert_ne!(phase_probs(&inst.true_schedule, 7), phase_probs(prior, 7));

        let again = build_exp2(0.02, 0.01, &topo, 50, 3).unwrap();
        assert_eq!(again.true_schedule, inst.true_schedule);
        let other = build_exp2(0.02, 0.01, &topo, 50, 4).unwrap();
        assert_ne!(other.true_schedule, inst.true_schedule);
    }

    #[test]
    fn malformed_topology_is_rejected() {
        assert!(Topology::from_json("{\"cities\": 2}").is_err());
        let mut t = Topology::bundled();
        t.itineraries[0].legs.push(99);
        assert!(t.validate().is_err());
    }

    #[test]
    fn rescaling_keeps_split_and_load() {
        let s = Scenario::Exp1(Exp1Params {
            setting: Exp1Setting::Uniform,
            alpha: 1.0,
            beta: 0.0,
            horizon: 1000,
            m: 2,
            c: 200.0,
            clip_consumption: true,
        });
        let big = s.at_horizon(4000).unwrap().build(0).unwrap();
        assert_eq!(big.capacities, vec![800.0; 2]);
        assert_eq!(big.true_schedule.phases[1].start, 2001);

        let doc = InstanceDoc::from(&build_adversarial(AdversarialKind::Eg1, 10, 0.5).unwrap());
        let scaled = Scenario::Instance(Box::new(doc)).at_horizon(20).unwrap().build(0).unwrap();
        assert_eq!(scaled.capacities, vec![10.0]);
        assert_eq!(scaled.true_schedule.phases[1].start, 11);
    }
}
