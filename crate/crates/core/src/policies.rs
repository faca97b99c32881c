//! Online policies behind one step interface. Each step observes `θ_t`,
//! picks a virtual action, passes it through the budget gate and updates
//! its internal state.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{rng_from_seed, ArrivalParameter, Instance};
use crate::oracle::{
    h_maximize, ConsumptionPlan, DualConfig, DualMethod, DualModel, DualSolveReport, DualVector,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Igdp,
    Ugd,
    Bigd,
    Fbp,
    O2o,
    Resolve,
    IgdpResolve,
}

/// A policy and its hyperparameters as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub policy: PolicyKind,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolve_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saa_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

pub const DEFAULT_POOL_SIZE: usize = 5;

impl PolicySpec {
    pub fn new(policy: PolicyKind) -> Self {
        PolicySpec {
            policy,
            batch: None,
            alpha: None,
            resolve_every: None,
            pool_size: None,
            saa_samples: None,
            name: None,
        }
    }

    pub fn bigd(k: usize) -> Self {
        PolicySpec {
            batch: Some(k),
            ..Self::new(PolicyKind::Bigd)
        }
    }

    pub fn igdp_resolve(every: usize) -> Self {
        PolicySpec {
            resolve_every: Some(every),
            ..Self::new(PolicyKind::IgdpResolve)
        }
    }

    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        match self.policy {
            PolicyKind::Igdp => "IGDP".into(),
            PolicyKind::Ugd => "UGD".into(),
            PolicyKind::Bigd => format!("B-IGD({})", self.batch.unwrap_or(1)),
            PolicyKind::Fbp => "FBP".into(),
            PolicyKind::O2o => "O2O".into(),
            PolicyKind::Resolve => "Resolve".into(),
            PolicyKind::IgdpResolve => format!("Re-solve({})", self.resolve_every.unwrap_or(0)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("{}: {msg}", self.label())));
        match self.policy {
            PolicyKind::Bigd => match self.batch {
                Some(k) if k >= 1 => {}
                _ => return bad("B-IGD needs K >= 1"),
            },
            PolicyKind::IgdpResolve => match self.resolve_every {
                Some(k) if k >= 1 => {}
                _ => return bad("igdp_resolve needs resolve_every >= 1"),
            },
            PolicyKind::O2o => {
                if self.pool_size == Some(0) {
                    return bad("pool_size must be positive");
                }
            }
            _ => {}
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return bad("alpha must be positive");
            }
        }
        if self.saa_samples == Some(0) {
            return bad("saa_samples must be positive");
        }
        Ok(())
    }
}

/// Outcome of one period.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: f64,
    /// The Lagrangian choice before the budget gate.
    pub virtual_action: f64,
    pub accepted: bool,
    pub reward: f64,
    pub consumption: Vec<f64>,
}

/// `remaining_i >= g_i` for every resource, compared exactly.
pub fn budget_permits(remaining: &[f64], consumption: &[f64]) -> bool {
    remaining.iter().zip(consumption).all(|(c, g)| c >= g)
}

/// Offline artifacts computed once per experiment and shared by all trials.
pub struct Offline {
    instance: Arc<Instance>,
    dual_cfg: DualConfig,
    solved: Mutex<HashMap<usize, (Arc<DualModel>, Arc<DualSolveReport>)>>,
    pools: Mutex<HashMap<(usize, usize), Arc<Vec<DualVector>>>>,
}

impl Offline {
    pub fn new(instance: Arc<Instance>, dual_cfg: DualConfig) -> Self {
        Offline {
            instance,
            dual_cfg,
            solved: Mutex::new(HashMap::new()),
            pools: Mutex::new(HashMap::new()),
        }
    }

    pub fn instance(&self) -> &Arc<Instance> {
        &self.instance
    }

    fn cfg_for(&self, saa: Option<usize>) -> DualConfig {
        DualConfig {
            saa_samples: saa.unwrap_or(self.dual_cfg.saa_samples),
            clip_consumption: self.instance.clip_consumption,
            ..self.dual_cfg.clone()
        }
    }

    /// Dual model of the planning schedule and its full-horizon solution.
    pub fn prior_solution(&self, saa: Option<usize>) -> Result<(Arc<DualModel>, Arc<DualSolveReport>)> {
        let cfg = self.cfg_for(saa);
        let mut cache = self.solved.lock().expect("offline cache poisoned");
        if let Some(hit) = cache.get(&cfg.saa_samples) {
            return Ok(hit.clone());
        }
        let inst = &self.instance;
        let model = DualModel::build(inst.planning_schedule(), inst.num_resources, &cfg)?;
        let report = model.solve_tail(0, &inst.capacities, &cfg, None)?;
        let entry = (Arc::new(model), Arc::new(report));
        cache.insert(cfg.saa_samples, entry.clone());
        Ok(entry)
    }

    /// O2O pool: subgradient duals with step multipliers `2^(k - size/2)`.
    pub fn o2o_pool(&self, size: usize, saa: Option<usize>) -> Result<Arc<Vec<DualVector>>> {
        let cfg = self.cfg_for(saa);
        let key = (size, cfg.saa_samples);
        if let Some(hit) = self.pools.lock().expect("pool cache poisoned").get(&key) {
            return Ok(hit.clone());
        }
        let inst = &self.instance;
        let sub = DualConfig {
            method: DualMethod::Subgradient,
            ..cfg
        };
        let model = DualModel::build(inst.planning_schedule(), inst.num_resources, &sub)?;
        let pool = (0..size)
            .map(|k| {
                let c = DualConfig {
                    step_scale: sub.step_scale * 2f64.powi(k as i32 - (size / 2) as i32),
                    ..sub.clone()
                };
                model.solve_tail(0, &inst.capacities, &c, None).map(|r| r.p_star)
            })
            .collect::<Result<Vec<_>>>()?;
        let pool = Arc::new(pool);
        self.pools
            .lock()
            .expect("pool cache poisoned")
            .insert(key, pool.clone());
        Ok(pool)
    }
}

/// Consumption targets `γ_t`, possibly computed on demand.
#[derive(Clone)]
enum Plan {
    /// Rows indexed from `offset`.
    Table {
        plan: Arc<ConsumptionPlan>,
        offset: usize,
    },
    Uniform(Vec<f64>),
    /// Discrete model, atom `j` accepted with probability `frac[j]`.
    Fractional {
        model: Arc<DualModel>,
        frac: Vec<f64>,
    },
    /// Continuous model at a fixed price, cached per phase boundary.
    AtPrice {
        model: Arc<DualModel>,
        price: Vec<f64>,
        cache: Option<(usize, Vec<f64>)>,
    },
}

impl Plan {
    fn row(&mut self, t: usize) -> Vec<f64> {
        match self {
            Plan::Table { plan, offset } => plan.row(t - *offset).to_vec(),
            Plan::Uniform(g) => g.clone(),
            Plan::Fractional { model, frac } => model.gamma_row_fractional(t, frac),
            Plan::AtPrice {
                model,
                price,
                cache,
            } => {
                let key = model.phase_index(t);
                match cache {
                    Some((k, row)) if *k == key => row.clone(),
                    _ => {
                        let row = model.gamma_row(t, price);
                        *cache = Some((key, row.clone()));
                        row
                    }
                }
            }
        }
    }
}

/// Surplus band treated as a tie right after an exact re-solve.
const TIE_BAND: f64 = 1e-9;

/// Virtual action of the gradient policies. Ties reject, except right after
/// an exact discrete re-solve: there the marginal atoms sit exactly on the
/// price, and the LP's acceptance fraction (rounded at one half) decides.
fn gradient_action(p: &[f64], theta: &ArrivalParameter, plan: &Plan) -> f64 {
    let surplus = theta.reward - theta.priced(p);
    if let Plan::Fractional { model, frac } = plan {
        if surplus.abs() <= TIE_BAND {
            let atoms = model.atoms().expect("discrete model");
            let j = theta
                .type_index
                .filter(|&j| j < atoms.len())
                .or_else(|| atoms.iter().position(|a| a.reward == theta.reward && a.consumption == theta.consumption));
            return match j {
                Some(j) if frac[j] >= 0.5 => 1.0,
                _ => 0.0,
            };
        }
    }
    h_maximize(p, theta).0
}

struct Batch {
    size: usize,
    alpha: f64,
    acc: Vec<f64>,
}

struct Resolver {
    every: usize,
    model: Arc<DualModel>,
    cfg: DualConfig,
}

enum Rule {
    Gradient {
        plan: Plan,
        batch: Option<Batch>,
        resolver: Option<Resolver>,
    },
    /// Fixed bid price; ties accepted.
    BidPrice,
    Pool {
        pool: Arc<Vec<DualVector>>,
        rng: ChaCha8Rng,
    },
    Resolve {
        model: Arc<DualModel>,
    },
}

/// Run-time state of one policy on one path.
pub struct PolicyState {
    name: String,
    rule: Rule,
    dual: Vec<f64>,
    remaining: Vec<f64>,
    capacities: Vec<f64>,
    period: usize,
    horizon: usize,
    step_size: f64,
    max_dual: f64,
    dual_bound: Option<f64>,
    virtual_total: Vec<f64>,
}

impl PolicyState {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dual(&self) -> &[f64] {
        &self.dual
    }

    pub fn remaining(&self) -> &[f64] {
        &self.remaining
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    /// Largest `‖p_t‖∞` seen so far, including the current dual.
    pub fn max_dual(&self) -> f64 {
        self.max_dual
    }

    /// `Σ_t g(x̃_t)`, the consumption the virtual actions would have used.
    pub fn virtual_consumption(&self) -> &[f64] {
        &self.virtual_total
    }

    pub fn capacities(&self) -> &[f64] {
        &self.capacities
    }

    fn note_dual(&mut self) {
        let n = self.dual.iter().fold(0.0f64, |m, p| m.max(p.abs()));
        self.max_dual = self.max_dual.max(n);
        if let Some(bound) = self.dual_bound {
            debug_assert!(n <= bound + 1e-9, "dual {n} above bound {bound}");
        }
    }

    /// Plays period `self.period` on `theta`.
    pub fn step(&mut self, theta: &ArrivalParameter) -> Result<Decision> {
        if self.period >= self.horizon {
            return Err(Error::InvalidInstance(format!(
                "policy stepped past the horizon {}",
                self.horizon
            )));
        }
        if theta.dim() != self.remaining.len() {
            return Err(Error::DimensionMismatch {
                expected: self.remaining.len(),
                found: theta.dim(),
            });
        }
        let t = self.period;

        // Re-solve before playing when this (1-based) period is in the set.
        if let Rule::Gradient {
            plan,
            resolver: Some(res),
            ..
        } = &mut self.rule
        {
            if (t + 1) % res.every == 0 {
                if res.model.is_discrete() {
                    let sol = res.model.tail_lp(t, &self.remaining)?;
                    let counts = res.model.expected_counts(t).expect("discrete model");
                    let frac = sol
                        .primal
                        .iter()
                        .zip(&counts)
                        .map(|(z, e)| if *e > 0.0 { (z / e).clamp(0.0, 1.0) } else { 0.0 })
                        .collect();
                    *plan = Plan::Fractional {
                        model: res.model.clone(),
                        frac,
                    };
                    self.dual = sol.dual;
                } else {
                    let report = res
                        .model
                        .solve_tail(t, &self.remaining, &res.cfg, Some(&self.dual))?;
                    *plan = Plan::AtPrice {
                        model: res.model.clone(),
                        price: report.p_star.prices.clone(),
                        cache: None,
                    };
                    self.dual = report.p_star.prices;
                }
                self.note_dual();
            }
        }

        let virtual_action = match &mut self.rule {
            Rule::Gradient { plan, .. } => gradient_action(&self.dual, theta, plan),
            Rule::BidPrice => {
                if theta.reward >= theta.priced(&self.dual) {
                    1.0
                } else {
                    0.0
                }
            }
            Rule::Pool { pool, rng } => {
                let k = rng.random_range(0..pool.len());
                self.dual.clone_from(&pool[k].prices);
                let n = pool[k].inf_norm();
                self.max_dual = self.max_dual.max(n);
                h_maximize(&pool[k], theta).0
            }
            Rule::Resolve { model } => {
                let j = theta.type_index.or_else(|| model.locate(t, theta)).ok_or_else(|| {
                    Error::Unsupported("arrival is outside the planning support".into())
                })?;
                let counts = model.expected_counts(t).ok_or_else(|| {
                    Error::Unsupported("re-solving needs a finite-support prior".into())
                })?;
                if j >= counts.len() {
                    return Err(Error::InvalidInstance(format!("type {j} outside the prior support")));
                }
                let sol = model.tail_lp(t, &self.remaining)?;
                if sol.primal[j] >= 0.5 * counts[j] {
                    1.0
                } else {
                    0.0
                }
            }
        };

        let virtual_g: Vec<f64> = theta.consumption.iter().map(|a| a * virtual_action).collect();
        for (v, g) in self.virtual_total.iter_mut().zip(&virtual_g) {
            *v += g;
        }
        let accepted = virtual_action > 0.0 && budget_permits(&self.remaining, &virtual_g);
        let decision = if accepted {
            for (c, g) in self.remaining.iter_mut().zip(&virtual_g) {
                *c -= g;
            }
            Decision {
                action: virtual_action,
                virtual_action,
                accepted,
                reward: theta.reward * virtual_action,
                consumption: virtual_g.clone(),
            }
        } else {
            Decision {
                action: 0.0,
                virtual_action,
                accepted: false,
                reward: 0.0,
                consumption: vec![0.0; virtual_g.len()],
            }
        };

        if let Rule::Gradient { plan, batch, .. } = &mut self.rule {
            let gamma = plan.row(t);
            match batch {
                None => {
                    for ((p, g), y) in self.dual.iter_mut().zip(&virtual_g).zip(&gamma) {
                        *p = (*p + self.step_size * (g - y)).max(0.0);
                    }
                }
                Some(b) => {
                    for ((acc, g), y) in b.acc.iter_mut().zip(&virtual_g).zip(&gamma) {
                        *acc += g - y;
                    }
                    if (t + 1) % b.size == 0 {
                        for (p, acc) in self.dual.iter_mut().zip(b.acc.iter_mut()) {
                            *p = (*p + b.alpha * *acc).max(0.0);
                            *acc = 0.0;
                        }
                    }
                }
            }
            self.note_dual();
        }
        self.period += 1;
        Ok(decision)
    }
}

/// A policy ready to be started on any number of paths.
pub struct PreparedPolicy {
    pub spec: PolicySpec,
    instance: Arc<Instance>,
    kind: Prepared,
    dual_bound: Option<f64>,
}

enum Prepared {
    Gradient {
        plan: Plan,
        start: Vec<f64>,
        batch: Option<(usize, f64)>,
        resolver: Option<(usize, Arc<DualModel>, DualConfig)>,
    },
    BidPrice(Vec<f64>),
    Pool(Arc<Vec<DualVector>>),
    Resolve(Arc<DualModel>),
}

impl PreparedPolicy {
    pub fn new(spec: &PolicySpec, offline: &Offline) -> Result<Self> {
        spec.validate()?;
        let instance = offline.instance().clone();
        let m = instance.num_resources;
        let horizon = instance.horizon;
        let exact_q = if instance.clip_consumption {
            instance.exact_q()
        } else {
            None
        };
        let mut dual_bound = None;
        let kind = match spec.policy {
            PolicyKind::Igdp | PolicyKind::Bigd | PolicyKind::IgdpResolve => {
                let (model, report) = offline.prior_solution(spec.saa_samples)?;
                let plan = Plan::Table {
                    plan: Arc::new(report.gamma.clone()),
                    offset: 0,
                };
                let batch = (spec.policy == PolicyKind::Bigd).then(|| {
                    let k = spec.batch.expect("validated");
                    (k, spec.alpha.unwrap_or(1.0 / ((horizon * k) as f64).sqrt()))
                });
                dual_bound = match (spec.policy, batch, exact_q) {
                    (PolicyKind::Igdp, _, Some(q)) => Some(q + 1.0),
                    (PolicyKind::Bigd, Some((k, a)), Some(q)) => Some(q + a * k as f64),
                    _ => None,
                };
                let resolver = (spec.policy == PolicyKind::IgdpResolve).then(|| {
                    (
                        spec.resolve_every.expect("validated"),
                        model.clone(),
                        offline.cfg_for(spec.saa_samples),
                    )
                });
                Prepared::Gradient {
                    plan,
                    start: vec![0.0; m],
                    batch,
                    resolver,
                }
            }
            PolicyKind::Ugd => {
                dual_bound = exact_q.map(|q| q + 1.0);
                Prepared::Gradient {
                    plan: Plan::Uniform(instance.capacities.iter().map(|c| c / horizon as f64).collect()),
                    start: vec![0.0; m],
                    batch: None,
                    resolver: None,
                }
            }
            PolicyKind::Fbp => {
                let (_, report) = offline.prior_solution(spec.saa_samples)?;
                Prepared::BidPrice(report.p_star.prices.clone())
            }
            PolicyKind::O2o => Prepared::Pool(
                offline.o2o_pool(spec.pool_size.unwrap_or(DEFAULT_POOL_SIZE), spec.saa_samples)?,
            ),
            PolicyKind::Resolve => {
                let (model, _) = offline.prior_solution(spec.saa_samples)?;
                if !model.is_discrete() {
                    return Err(Error::Unsupported(
                        "the re-solving policy needs a finite-support prior".into(),
                    ));
                }
                Prepared::Resolve(model)
            }
        };
        Ok(PreparedPolicy {
            spec: spec.clone(),
            instance,
            kind,
            dual_bound,
        })
    }

    /// Gradient policy with an explicit plan, for callers that build their own.
    pub fn with_plan(instance: Arc<Instance>, plan: ConsumptionPlan, name: &str) -> Result<Self> {
        if plan.horizon() != instance.horizon {
            return Err(Error::DimensionMismatch {
                expected: instance.horizon,
                found: plan.horizon(),
            });
        }
        let m = instance.num_resources;
        Ok(PreparedPolicy {
            spec: PolicySpec {
                name: Some(name.into()),
                ..PolicySpec::new(PolicyKind::Igdp)
            },
            kind: Prepared::Gradient {
                plan: Plan::Table {
                    plan: Arc::new(plan),
                    offset: 0,
                },
                start: vec![0.0; m],
                batch: None,
                resolver: None,
            },
            instance,
            dual_bound: None,
        })
    }

    /// Fixed bid-price policy at `prices`.
    pub fn bid_price(instance: Arc<Instance>, prices: Vec<f64>) -> Self {
        PreparedPolicy {
            spec: PolicySpec::new(PolicyKind::Fbp),
            kind: Prepared::BidPrice(prices),
            instance,
            dual_bound: None,
        }
    }

    /// O2O with an explicit pool.
    pub fn pool(instance: Arc<Instance>, pool: Vec<DualVector>) -> Self {
        PreparedPolicy {
            spec: PolicySpec::new(PolicyKind::O2o),
            kind: Prepared::Pool(Arc::new(pool)),
            instance,
            dual_bound: None,
        }
    }

    pub fn name(&self) -> String {
        self.spec.label()
    }

    /// Fresh state; `seed` drives the O2O pool draws.
    pub fn start(&self, seed: u64) -> PolicyState {
        let inst = &self.instance;
        let m = inst.num_resources;
        let (rule, dual) = match &self.kind {
            Prepared::Gradient {
                plan,
                start,
                batch,
                resolver,
            } => (
                Rule::Gradient {
                    plan: plan.clone(),
                    batch: batch.map(|(size, alpha)| Batch {
                        size,
                        alpha,
                        acc: vec![0.0; m],
                    }),
                    resolver: resolver.as_ref().map(|(every, model, cfg)| Resolver {
                        every: *every,
                        model: model.clone(),
                        cfg: cfg.clone(),
                    }),
                },
                start.clone(),
            ),
            Prepared::BidPrice(p) => (Rule::BidPrice, p.clone()),
            Prepared::Pool(pool) => (
                Rule::Pool {
                    pool: pool.clone(),
                    rng: rng_from_seed(seed),
                },
                vec![0.0; m],
            ),
            Prepared::Resolve(model) => (Rule::Resolve { model: model.clone() }, vec![0.0; m]),
        };
        let mut st = PolicyState {
            name: self.name(),
            rule,
            dual,
            remaining: inst.capacities.clone(),
            capacities: inst.capacities.clone(),
            period: 0,
            horizon: inst.horizon,
            step_size: 1.0 / (inst.horizon as f64).sqrt(),
            max_dual: 0.0,
            dual_bound: self.dual_bound,
            virtual_total: vec![0.0; m],
        };
        st.note_dual();
        st
    }
}
