use serde::{Deserialize, Serialize};

use super::{run_experiment, Benchmark, ExperimentConfig, Scenario};
use crate::error::{Error, Result};
use crate::oracle::DualConfig;
use crate::policies::PolicySpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub capacities: Vec<f64>,
    pub mean_regret: f64,
    pub std_error: f64,
    pub regret_over_sqrt_t: f64,
    pub mean_hindsight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingStudy {
    pub policy: String,
    pub base_horizon: usize,
    /// How capacities follow `T`.
    pub capacity_scaling: String,
    pub rows: Vec<ScalingRow>,
}

impl ScalingStudy {
    /// `regret(T_{k+1}) / regret(T_k)` for consecutive rows.
    pub fn growth_ratios(&self) -> Vec<f64> {
        self.rows
            .windows(2)
            .map(|w| w[1].mean_regret / w[0].mean_regret)
            .collect()
    }
}

/// Regret of one policy as `T` grows with capacities scaled by `T / T_base`.
pub fn scaling_study(
    base: &Scenario,
    horizons: &[usize],
    policy: &PolicySpec,
    trials: usize,
    master_seed: u64,
    threads: Option<usize>,
    dual: DualConfig,
) -> Result<ScalingStudy> {
    if horizons.is_empty() {
        return Err(Error::Config("empty horizon grid".into()));
    }
    let rows = horizons
        .iter()
        .map(|&t| {
            let scenario = base.at_horizon(t)?;
            let instance = scenario.build(master_seed)?;
            let cfg = ExperimentConfig {
                threads,
                benchmark: Benchmark::MeanHindsight,
                dual: dual.clone(),
                ..ExperimentConfig::new(scenario, vec![policy.clone()], trials, master_seed)
            };
            let res = run_experiment(&cfg)?;
            let row = &res.summary[0];
            Ok(ScalingRow {
                horizon: t,
                capacities: instance.capacities,
                mean_regret: row.mean_regret,
                std_error: row.regret_std_error,
                regret_over_sqrt_t: row.mean_regret / (t as f64).sqrt(),
                mean_hindsight: res.benchmark.mean_hindsight,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScalingStudy {
        policy: policy.label(),
        base_horizon: base.horizon(),
        capacity_scaling: "linear: c_i * T / T_base".into(),
        rows,
    })
}
