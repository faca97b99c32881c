use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    BenchmarkValues, ExperimentConfig, ExperimentResult, FailureRecord, OfflineSummary, SummaryRow,
    TracePoint, TrialRecord,
};
use crate::error::Result;

pub const TRIALS_HEADER: [&str; 7] = [
    "trial",
    "policy",
    "reward",
    "hindsight",
    "regret",
    "max_dual",
    "clip_count",
];

fn csv_err(e: csv::Error) -> crate::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io.into(),
        other => crate::Error::Config(format!("csv: {other:?}")),
    }
}

pub fn write_trials_csv(path: &Path, records: &[TrialRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(TRIALS_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.trial_index.to_string(),
            r.policy.clone(),
            r.total_reward.to_string(),
            r.hindsight_value.to_string(),
            r.regret.to_string(),
            r.max_dual_inf_norm.to_string(),
            r.clip_count.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `trial,policy,t,p_1..p_m`, one row per period.
pub fn write_dual_traj_csv(path: &Path, traces: &[TracePoint]) -> Result<()> {
    let m = traces.first().map_or(0, |p| p.dual.len());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["trial".to_string(), "policy".into(), "t".into()];
    header.extend((1..=m).map(|i| format!("p_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for p in traces {
        let mut row = vec![p.trial_index.to_string(), p.policy.clone(), p.period.to_string()];
        row.extend(p.dual.iter().map(f64::to_string));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryDoc {
    pub version: String,
    pub config: ExperimentConfig,
    pub benchmark: BenchmarkValues,
    pub rows: Vec<SummaryRow>,
    pub offline: Vec<OfflineSummary>,
    pub failures: Vec<FailureRecord>,
}

impl SummaryDoc {
    pub fn new(version: &str, config: &ExperimentConfig, result: &ExperimentResult) -> Self {
        SummaryDoc {
            version: version.to_string(),
            config: config.clone(),
            benchmark: result.benchmark.clone(),
            rows: result.summary.clone(),
            offline: result.offline.clone(),
            failures: result.failures.clone(),
        }
    }
}

pub fn write_summary_json(path: &Path, doc: &SummaryDoc) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, doc)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}
