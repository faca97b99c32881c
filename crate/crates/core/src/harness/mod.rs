//! Monte Carlo trial runner. Every policy in a config plays the same
//! sampled path in a trial, and the hindsight optimum is solved once per
//! path, so policy comparisons are paired.

mod output;
mod scaling;
mod scenarios;

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{trial_seed, Instance, Which};
use crate::oracle::{dual_solve, hindsight_optimum, mean_and_se, DualConfig};
use crate::policies::{Offline, PolicyKind, PolicySpec, PreparedPolicy};

pub use output::{write_dual_traj_csv, write_summary_json, write_trials_csv, SummaryDoc, TRIALS_HEADER};
pub use scaling::{scaling_study, ScalingRow, ScalingStudy};
pub use scenarios::{
    build_adversarial, build_exp1, build_exp2, exp1_reward_law, AdversarialKind, AdversarialParams,
    Exp1Params, Exp1Setting, Exp2Params, Itinerary, Leg, Scenario, Topology,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    #[default]
    MeanHindsight,
    DualValue,
    Both,
}

fn default_trials() -> usize {
    500
}

fn default_trace_trials() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub policies: Vec<PolicySpec>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub benchmark: Benchmark,
    /// Worker threads for trials; the global rayon pool when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Record dual trajectories for the first `trace_trials` trials.
    #[serde(default)]
    pub trace: bool,
    #[serde(default = "default_trace_trials")]
    pub trace_trials: usize,
    #[serde(default)]
    pub dual: DualConfig,
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario, policies: Vec<PolicySpec>, trials: usize, master_seed: u64) -> Self {
        ExperimentConfig {
            scenario,
            policies,
            trials,
            master_seed,
            benchmark: Benchmark::default(),
            threads: None,
            trace: false,
            trace_trials: default_trace_trials(),
            dual: DualConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.policies.is_empty() {
            return Err(Error::Config("no policies configured".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        let mut names: Vec<String> = self.policies.iter().map(PolicySpec::label).collect();
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate policy name `{}`", w[0])));
        }
        self.policies.iter().try_for_each(PolicySpec::validate)
    }
}

/// One policy on one path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: usize,
    pub policy: String,
    pub total_reward: f64,
    pub hindsight_value: f64,
    /// `hindsight_value - total_reward`.
    pub regret: f64,
    pub final_remaining: Vec<f64>,
    /// Sum of the accepted consumption vectors.
    pub consumed: Vec<f64>,
    pub max_dual_inf_norm: f64,
    pub clip_count: u64,
    /// Periods where an accepted action drove some resource negative.
    pub budget_violations: usize,
    pub accepted: usize,
    pub hindsight_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub trial_index: usize,
    /// Absent when the failure hit the shared path or hindsight solve.
    pub policy: Option<String>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    pub trials: usize,
    pub mean_reward: f64,
    pub std_error: f64,
    pub mean_regret: f64,
    pub regret_std_error: f64,
    /// `100 * mean_reward / benchmark`.
    pub pct_of_ub: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pct_of_dual: Option<f64>,
    pub benchmark: f64,
    pub max_dual_inf_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkValues {
    pub mean_hindsight: f64,
    pub hindsight_std_error: f64,
    /// Dual bound on the true schedule, when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dual_value: Option<f64>,
}

/// Offline quantities each policy was prepared with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineSummary {
    pub policy: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_star: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_dual_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub trial_index: usize,
    pub policy: String,
    /// 1-based period after whose update `dual` was recorded.
    pub period: usize,
    pub dual: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub records: Vec<TrialRecord>,
    pub summary: Vec<SummaryRow>,
    pub benchmark: BenchmarkValues,
    pub failures: Vec<FailureRecord>,
    pub offline: Vec<OfflineSummary>,
    pub traces: Vec<TracePoint>,
}

struct TrialOutput {
    records: Vec<TrialRecord>,
    failures: Vec<FailureRecord>,
    traces: Vec<TracePoint>,
    hindsight: Option<f64>,
}

fn play(
    trial: usize,
    policy_index: usize,
    prepared: &PreparedPolicy,
    path_seed: u64,
    arrivals: &[crate::model::ArrivalParameter],
    trace: bool,
    traces: &mut Vec<TracePoint>,
) -> Result<(f64, Vec<f64>, Vec<f64>, f64, usize, usize)> {
    let mut state = prepared.start(trial_seed(path_seed, 1 + policy_index as u64));
    let m = state.capacities().len();
    let mut reward = 0.0;
    let mut consumed = vec![0.0; m];
    let mut violations = 0;
    let mut accepted = 0;
    for theta in arrivals {
        let d = state.step(theta)?;
        if d.accepted {
            accepted += 1;
            reward += d.reward;
            consumed.iter_mut().zip(&d.consumption).for_each(|(c, g)| *c += g);
            if state.remaining().iter().any(|r| *r < 0.0) {
                violations += 1;
            }
        }
        if trace {
            traces.push(TracePoint {
                trial_index: trial,
                policy: state.name().to_string(),
                period: state.period(),
                dual: state.dual().to_vec(),
            });
        }
    }
    Ok((
        reward,
        state.remaining().to_vec(),
        consumed,
        state.max_dual(),
        violations,
        accepted,
    ))
}

fn run_trial(
    trial: usize,
    instance: &Instance,
    prepared: &[PreparedPolicy],
    cfg: &ExperimentConfig,
) -> TrialOutput {
    let path_seed = trial_seed(cfg.master_seed, trial as u64);
    let mut out = TrialOutput {
        records: Vec::with_capacity(prepared.len()),
        failures: vec![],
        traces: vec![],
        hindsight: None,
    };
    let shared = instance
        .sample_path(Which::True, path_seed)
        .and_then(|p| hindsight_optimum(&p.arrivals, &instance.capacities).map(|h| (p, h)));
    let (path, hindsight) = match shared {
        Ok(v) => v,
        Err(e) => {
            out.failures.push(FailureRecord {
                trial_index: trial,
                policy: None,
                error: e.to_string(),
            });
            return out;
        }
    };
    out.hindsight = Some(hindsight.value);
    let trace = cfg.trace && trial < cfg.trace_trials;
    for (k, pol) in prepared.iter().enumerate() {
        match play(trial, k, pol, path_seed, &path.arrivals, trace, &mut out.traces) {
            Ok((reward, remaining, consumed, max_dual, violations, accepted)) => {
                out.records.push(TrialRecord {
                    trial_index: trial,
                    policy: pol.name(),
                    total_reward: reward,
                    hindsight_value: hindsight.value,
                    regret: hindsight.value - reward,
                    final_remaining: remaining,
                    consumed,
                    max_dual_inf_norm: max_dual,
                    clip_count: path.clip_count,
                    budget_violations: violations,
                    accepted,
                    hindsight_gap: hindsight.duality_gap,
                })
            }
            Err(e) => out.failures.push(FailureRecord {
                trial_index: trial,
                policy: Some(pol.name()),
                error: e.to_string(),
            }),
        }
    }
    out
}

fn offline_summary(spec: &PolicySpec, offline: &Offline) -> Result<OfflineSummary> {
    let uses_prior = matches!(
        spec.policy,
        PolicyKind::Igdp | PolicyKind::Bigd | PolicyKind::IgdpResolve | PolicyKind::Fbp | PolicyKind::Resolve
    );
    if !uses_prior {
        return Ok(OfflineSummary {
            policy: spec.label(),
            p_star: None,
            prior_dual_value: None,
            converged: None,
        });
    }
    let (_, report) = offline.prior_solution(spec.saa_samples)?;
    Ok(OfflineSummary {
        policy: spec.label(),
        p_star: Some(report.p_star.prices.clone()),
        prior_dual_value: Some(report.dual_value),
        converged: Some(report.converged),
    })
}

/// Runs every trial of `cfg` on an already built instance.
pub fn run_on_instance(instance: Arc<Instance>, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let dual_cfg = DualConfig {
        clip_consumption: instance.clip_consumption,
        ..cfg.dual.clone()
    };
    let offline = Offline::new(instance.clone(), dual_cfg.clone());
    let prepared = cfg
        .policies
        .iter()
        .map(|s| PreparedPolicy::new(s, &offline))
        .collect::<Result<Vec<_>>>()?;
    let offline_rows = cfg
        .policies
        .iter()
        .map(|s| offline_summary(s, &offline))
        .collect::<Result<Vec<_>>>()?;

    let work = || -> Vec<TrialOutput> {
        (0..cfg.trials)
            .into_par_iter()
            .map(|k| run_trial(k, &instance, &prepared, cfg))
            .collect()
    };
    let outputs = match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };

    let mut records = vec![];
    let mut failures = vec![];
    let mut traces = vec![];
    let mut hindsight = vec![];
    let mut failed_trials = 0;
    for o in outputs {
        failed_trials += usize::from(!o.failures.is_empty());
        records.extend(o.records);
        failures.extend(o.failures);
        traces.extend(o.traces);
        hindsight.extend(o.hindsight);
    }
    if failed_trials * 100 > cfg.trials {
        return Err(Error::TooManyFailures {
            failed: failed_trials,
            total: cfg.trials,
            first: failures.first().map(|f| f.error.clone()).unwrap_or_default(),
        });
    }
    records.sort_by_key(|r| r.trial_index);

    let (mean_hindsight, hindsight_se) = mean_and_se(&hindsight);
    let dual_value = match cfg.benchmark {
        Benchmark::MeanHindsight => None,
        Benchmark::DualValue | Benchmark::Both => {
            Some(dual_solve(&instance.true_schedule, &instance.capacities, &dual_cfg)?.dual_value)
        }
    };
    let benchmark = BenchmarkValues {
        mean_hindsight,
        hindsight_std_error: hindsight_se,
        dual_value,
    };
    let summary = summarize(&records, &prepared, &benchmark, cfg.benchmark);
    Ok(ExperimentResult {
        records,
        summary,
        benchmark,
        failures,
        offline: offline_rows,
        traces,
    })
}

/// Builds the scenario and runs it.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let instance = Arc::new(cfg.scenario.build(cfg.master_seed)?);
    run_on_instance(instance, cfg)
}

fn summarize(
    records: &[TrialRecord],
    prepared: &[PreparedPolicy],
    bench: &BenchmarkValues,
    choice: Benchmark,
) -> Vec<SummaryRow> {
    prepared
        .iter()
        .map(|p| {
            let name = p.name();
            let mine: Vec<&TrialRecord> = records.iter().filter(|r| r.policy == name).collect();
            let rewards: Vec<f64> = mine.iter().map(|r| r.total_reward).collect();
            let regrets: Vec<f64> = mine.iter().map(|r| r.regret).collect();
            let (mean_reward, std_error) = mean_and_se(&rewards);
            let (mean_regret, regret_std_error) = mean_and_se(&regrets);
            let ub = match choice {
                Benchmark::DualValue => bench.dual_value.expect("dual value computed"),
                _ => bench.mean_hindsight,
            };
            let pct = |b: f64| if b > 0.0 { 100.0 * mean_reward / b } else { f64::NAN };
            SummaryRow {
                policy: name,
                trials: mine.len(),
                mean_reward,
                std_error,
                mean_regret,
                regret_std_error,
                pct_of_ub: pct(ub),
                pct_of_dual: match choice {
                    Benchmark::Both => bench.dual_value.map(pct),
                    _ => None,
                },
                benchmark: ub,
                max_dual_inf_norm: mine.iter().map(|r| r.max_dual_inf_norm).fold(0.0, f64::max),
            }
        })
        .collect()
}
