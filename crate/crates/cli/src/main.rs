//! `nsalloc` command-line front end.
//!
//! Experiment subcommands take an optional `--config` JSON document (the
//! serialized `ExperimentConfig`); any flag given on the command line
//! overrides the matching config value.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nsalloc::harness::{
    run_experiment, scaling_study, write_dual_traj_csv, write_summary_json, write_trials_csv,
    AdversarialKind, AdversarialParams, Benchmark, ExperimentConfig, ExperimentResult, Exp1Params,
    Exp1Setting, Exp2Params, Scenario, SummaryDoc,
};
use nsalloc::lp::{lp_solve, LpProblem};
use nsalloc::model::ScheduleDoc;
use nsalloc::policies::{PolicyKind, PolicySpec};
use nsalloc::wasserstein::{segment_distances, wbdb, wbnb, DEFAULT_GRID};
use serde_json::json;

const BUILD_ID: &str = env!("NSALLOC_BUILD_ID");

const PRECEDENCE: &str = "Precedence: command-line flags override values from --config, \
which override built-in defaults. --seed (or master_seed in the config) is required.";

#[derive(Parser)]
#[command(name = "nsalloc", version = BUILD_ID, about = "Online allocation under non-stationary arrivals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-phase single-type experiment with uniform, normal or mixed rewards.
    #[command(after_help = PRECEDENCE)]
    Exp1(Exp1Args),
    /// Hub-and-spoke network revenue management.
    #[command(after_help = PRECEDENCE)]
    Exp2(Exp2Args),
    /// Point-mass counterexamples (eg1, eg2, egg_pair).
    #[command(after_help = PRECEDENCE)]
    Adversarial(AdversarialArgs),
    /// Regret of one policy over a grid of horizons.
    #[command(after_help = PRECEDENCE)]
    Scaling(ScalingArgs),
    /// Deviation and non-stationarity budgets of two schedule documents.
    Wasserstein(WassersteinArgs),
    /// Solve an LP document read from standard input.
    Lp,
}

#[derive(Args)]
struct Common {
    /// Master seed; no experiment runs without one.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Worker threads; all cores by default, 1 for strictly sequential runs.
    #[arg(long)]
    threads: Option<usize>,
    /// Experiment config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated policies, e.g. `igdp,ugd,bigd:10,fbp,o2o,resolve,igdp_resolve:100`.
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<String>>,
    /// mean_hindsight, dual_value or both.
    #[arg(long)]
    benchmark: Option<String>,
    /// Also write dual_traj.csv.
    #[arg(long)]
    trace: bool,
    /// Trials whose dual trajectories are recorded with --trace.
    #[arg(long)]
    trace_trials: Option<usize>,
    /// SAA sample size of the offline dual solve.
    #[arg(long)]
    saa_samples: Option<usize>,
    /// Output directory, created if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Exp1Args {
    #[arg(long)]
    setting: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long = "T")]
    horizon: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    /// Per-resource capacity.
    #[arg(long)]
    c: Option<f64>,
    /// Keep consumptions in [0.1, 1.1] instead of clipping to [0, 1].
    #[arg(long)]
    raw_consumption: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Exp2Args {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long = "T")]
    horizon: Option<usize>,
    /// Re-solve period of the default re-solving policy.
    #[arg(long)]
    resolve_every: Option<usize>,
    /// Topology JSON replacing the bundled network.
    #[arg(long)]
    topology: Option<PathBuf>,
    /// Seed of the random probability vectors; the master seed by default.
    #[arg(long)]
    prob_seed: Option<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct AdversarialArgs {
    /// eg1, eg2 or egg_pair.
    #[arg(long)]
    kind: Option<String>,
    /// Prior inflation of the egg pair.
    #[arg(long)]
    eps: Option<f64>,
    /// Reward shift of eg1/eg2.
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long = "T")]
    horizon: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ScalingArgs {
    /// Policy to study, in the --policies grammar.
    #[arg(long, default_value = "ugd")]
    policy: String,
    /// Comma-separated horizons.
    #[arg(long = "T", value_delimiter = ',', default_values_t = [1000usize, 4000, 16000])]
    horizons: Vec<usize>,
    #[arg(long)]
    setting: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct WassersteinArgs {
    /// Schedule JSON of the true distributions.
    truth: PathBuf,
    /// Schedule JSON of the prior estimates.
    prior: PathBuf,
    /// Quantile grid size for continuous reward laws.
    #[arg(long, default_value_t = DEFAULT_GRID)]
    grid: usize,
}

enum Failure {
    Usage(String),
    Domain(String),
}

impl From<nsalloc::Error> for Failure {
    fn from(e: nsalloc::Error) -> Self {
        Failure::Domain(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Domain(format!("{}: {e}", path.display()))
}

fn parse_policy(text: &str) -> CliResult<PolicySpec> {
    let (name, arg) = match text.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (text, None),
    };
    let number = |what: &str| -> CliResult<usize> {
        match arg.map(str::parse::<usize>) {
            Some(Ok(k)) => Ok(k),
            _ => usage(format!("policy `{text}` needs {what}, e.g. `{name}:10`")),
        }
    };
    let spec = match name.trim().to_ascii_lowercase().as_str() {
        "igdp" | "igd" => PolicySpec::new(PolicyKind::Igdp),
        "ugd" => PolicySpec::new(PolicyKind::Ugd),
        "fbp" => PolicySpec::new(PolicyKind::Fbp),
        "o2o" => PolicySpec::new(PolicyKind::O2o),
        "resolve" => PolicySpec::new(PolicyKind::Resolve),
        "bigd" | "b-igd" => PolicySpec::bigd(number("a batch size K")?),
        "igdp_resolve" | "re-solve" => PolicySpec::igdp_resolve(number("a re-solve period")?),
        other => return usage(format!("unknown policy `{other}`")),
    };
    if arg.is_some() && !matches!(spec.policy, PolicyKind::Bigd | PolicyKind::IgdpResolve) {
        return usage(format!("policy `{name}` takes no argument"));
    }
    Ok(spec)
}

fn parse_benchmark(text: &str) -> CliResult<Benchmark> {
    match text {
        "mean_hindsight" => Ok(Benchmark::MeanHindsight),
        "dual_value" => Ok(Benchmark::DualValue),
        "both" => Ok(Benchmark::Both),
        other => usage(format!("unknown benchmark `{other}`")),
    }
}

fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

/// Config from `--config` (if any) with the common flags applied on top.
/// `scenario` turns the config's scenario (if any) into the subcommand's.
fn assemble(
    common: &Common,
    scenario: impl FnOnce(Option<Scenario>) -> CliResult<Scenario>,
    default_policies: impl FnOnce() -> Vec<PolicySpec>,
) -> CliResult<ExperimentConfig> {
    let base = common.config.as_deref().map(load_config).transpose()?;
    let seed = match (common.seed, &base) {
        (Some(s), _) => s,
        (None, Some(cfg)) => cfg.master_seed,
        (None, None) => return usage("--seed is required (or master_seed in --config)"),
    };
    let mut cfg = match base {
        Some(mut cfg) => {
            cfg.scenario = scenario(Some(cfg.scenario))?;
            cfg
        }
        None => ExperimentConfig::new(scenario(None)?, default_policies(), 500, seed),
    };
    cfg.master_seed = seed;
    if let Some(t) = common.trials {
        cfg.trials = t;
    }
    if common.threads.is_some() {
        cfg.threads = common.threads;
    }
    if let Some(p) = &common.policies {
        cfg.policies = p.iter().map(|s| parse_policy(s)).collect::<CliResult<_>>()?;
    }
    if let Some(b) = &common.benchmark {
        cfg.benchmark = parse_benchmark(b)?;
    }
    if common.trace {
        cfg.trace = true;
    }
    if let Some(k) = common.trace_trials {
        cfg.trace_trials = k;
    }
    if let Some(n) = common.saa_samples {
        cfg.dual.saa_samples = n;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn mismatch<T>(want: &str) -> CliResult<T> {
    usage(format!("config scenario is not an {want} scenario"))
}

fn require<T>(v: Option<T>, flag: &str) -> CliResult<T> {
    match v {
        Some(v) => Ok(v),
        None => usage(format!("{flag} is required")),
    }
}

fn exp1_config(a: &Exp1Args) -> CliResult<ExperimentConfig> {
    let setting = a
        .setting
        .as_deref()
        .map(|s| s.parse::<Exp1Setting>().map_err(|e| Failure::Usage(e.to_string())))
        .transpose()?;
    assemble(
        &a.common,
        |base| {
            let mut p = match base {
                Some(Scenario::Exp1(p)) => p,
                Some(_) => return mismatch("exp1"),
                None => Exp1Params {
                    setting: setting.unwrap_or(Exp1Setting::Uniform),
                    alpha: require(a.alpha, "--alpha")?,
                    beta: a.beta.unwrap_or(0.0),
                    horizon: 1000,
                    m: 10,
                    c: 200.0,
                    clip_consumption: true,
                },
            };
            if let Some(s) = setting {
                p.setting = s;
            }
            if let Some(v) = a.alpha {
                p.alpha = v;
            }
            if let Some(v) = a.beta {
                p.beta = v;
            }
            if let Some(v) = a.horizon {
                p.horizon = v;
            }
            if let Some(v) = a.m {
                p.m = v;
            }
            if let Some(v) = a.c {
                p.c = v;
            }
            if a.raw_consumption {
                p.clip_consumption = false;
            }
            Ok(Scenario::Exp1(p))
        },
        || {
            [PolicyKind::Igdp, PolicyKind::Ugd, PolicyKind::Fbp, PolicyKind::O2o]
                .into_iter()
                .map(PolicySpec::new)
                .collect()
        },
    )
}

fn exp2_config(a: &Exp2Args) -> CliResult<ExperimentConfig> {
    let every = a.resolve_every.unwrap_or(100);
    let mut cfg = assemble(
        &a.common,
        |base| {
            let mut p = match base {
                Some(Scenario::Exp2(p)) => p,
                Some(_) => return mismatch("exp2"),
                None => Exp2Params {
                    alpha: 0.0,
                    beta: 0.0,
                    horizon: 1000,
                    topology: None,
                    prob_seed: None,
                },
            };
            if let Some(v) = a.alpha {
                p.alpha = v;
            }
            if let Some(v) = a.beta {
                p.beta = v;
            }
            if let Some(v) = a.horizon {
                p.horizon = v;
            }
            if a.topology.is_some() {
                p.topology = a.topology.clone();
            }
            if a.prob_seed.is_some() {
                p.prob_seed = a.prob_seed;
            }
            Ok(Scenario::Exp2(p))
        },
        || {
            vec![
                PolicySpec::new(PolicyKind::Igdp),
                PolicySpec::igdp_resolve(every),
                PolicySpec::new(PolicyKind::Fbp),
            ]
        },
    )?;
    // An explicit period also retunes re-solving policies from a config.
    if let Some(k) = a.resolve_every {
        for p in cfg.policies.iter_mut().filter(|p| p.policy == PolicyKind::IgdpResolve) {
            p.resolve_every = Some(k);
        }
        cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(cfg)
}

fn adversarial_config(a: &AdversarialArgs) -> CliResult<ExperimentConfig> {
    let kind = a
        .kind
        .as_deref()
        .map(|s| s.parse::<AdversarialKind>().map_err(|e| Failure::Usage(e.to_string())))
        .transpose()?;
    if a.eps.is_some() && a.kappa.is_some() {
        return usage("give --eps or --kappa, not both");
    }
    let param = a.eps.or(a.kappa);
    assemble(
        &a.common,
        |base| {
            let mut p = match base {
                Some(Scenario::Adversarial(p)) => p,
                Some(_) => return mismatch("adversarial"),
                None => {
                    let kind = require(kind, "--kind")?;
                    AdversarialParams {
                        kind,
                        horizon: 999,
                        param: match kind {
                            AdversarialKind::EggPair => 0.05,
                            _ => 0.4,
                        },
                    }
                }
            };
            if let Some(k) = kind {
                p.kind = k;
            }
            if let Some(v) = param {
                p.param = v;
            }
            if let Some(v) = a.horizon {
                p.horizon = v;
            }
            Ok(Scenario::Adversarial(p))
        },
        || {
            [PolicyKind::Igdp, PolicyKind::Ugd, PolicyKind::Fbp, PolicyKind::Resolve]
                .into_iter()
                .map(PolicySpec::new)
                .collect()
        },
    )
}

fn write_outputs(out: Option<&Path>, cfg: &ExperimentConfig, res: &ExperimentResult) -> CliResult<()> {
    let doc = SummaryDoc::new(BUILD_ID, cfg, res);
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_trials_csv(&dir.join("trials.csv"), &res.records)?;
        write_summary_json(&dir.join("summary.json"), &doc)?;
        if cfg.trace {
            write_dual_traj_csv(&dir.join("dual_traj.csv"), &res.traces)?;
        }
    }
    println!("{:<16} {:>12} {:>10} {:>12} {:>8}", "policy", "reward", "se", "regret", "% UB");
    for r in &res.summary {
        println!(
            "{:<16} {:>12.3} {:>10.3} {:>12.3} {:>8.2}",
            r.policy, r.mean_reward, r.std_error, r.mean_regret, r.pct_of_ub
        );
    }
    println!(
        "mean hindsight {:.3} (se {:.3}){}",
        res.benchmark.mean_hindsight,
        res.benchmark.hindsight_std_error,
        res.benchmark
            .dual_value
            .map(|d| format!(", dual value {d:.3}"))
            .unwrap_or_default()
    );
    if !res.failures.is_empty() {
        eprintln!("warning: {} trial failures recorded in summary.json", res.failures.len());
    }
    Ok(())
}

fn run(cfg: ExperimentConfig, out: Option<&Path>) -> CliResult<()> {
    eprintln!(
        "running {} trials x {} policies (seed {})",
        cfg.trials,
        cfg.policies.len(),
        cfg.master_seed
    );
    let res = run_experiment(&cfg)?;
    write_outputs(out, &cfg, &res)
}

fn scaling(a: &ScalingArgs) -> CliResult<()> {
    let policy = parse_policy(&a.policy)?;
    let setting = a
        .setting
        .as_deref()
        .map(|s| s.parse::<Exp1Setting>().map_err(|e| Failure::Usage(e.to_string())))
        .transpose()?;
    let cfg = assemble(
        &a.common,
        |base| match base {
            Some(s) => Ok(s),
            None => Ok(Scenario::Exp1(Exp1Params {
                setting: setting.unwrap_or(Exp1Setting::Uniform),
                alpha: a.alpha.unwrap_or(1.0),
                beta: a.beta.unwrap_or(0.0),
                horizon: 1000,
                m: 10,
                c: 200.0,
                clip_consumption: true,
            })),
        },
        || vec![policy.clone()],
    )?;
    if a.horizons.is_empty() || a.horizons.contains(&0) {
        return usage("--T needs positive horizons");
    }
    eprintln!("scaling {} over T = {:?}", policy.label(), a.horizons);
    let study = scaling_study(
        &cfg.scenario,
        &a.horizons,
        &policy,
        cfg.trials,
        cfg.master_seed,
        cfg.threads,
        cfg.dual.clone(),
    )?;
    let doc = json!({ "version": BUILD_ID, "study": study, "growth_ratios": study.growth_ratios() });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Failure::Domain(e.to_string()))?;
    if let Some(dir) = &a.common.out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join("scaling.json");
        fs::write(&path, format!("{text}\n")).map_err(|e| io_err(&path, e))?;
    }
    println!("{text}");
    Ok(())
}

fn read_schedule(path: &Path) -> CliResult<(nsalloc::model::DistributionSchedule, usize)> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let doc: ScheduleDoc = serde_json::from_str(&text).map_err(|e| io_err(path, e))?;
    Ok(doc.into_schedule()?)
}

fn wasserstein(a: &WassersteinArgs) -> CliResult<()> {
    let (truth, m) = read_schedule(&a.truth)?;
    let (prior, m_prior) = read_schedule(&a.prior)?;
    if m != m_prior {
        return Err(Failure::Domain(format!("resource counts differ: {m} vs {m_prior}")));
    }
    let doc = json!({
        "wbdb": wbdb(&truth, &prior, m, a.grid)?,
        "wbnb_true": wbnb(&truth, m, a.grid)?,
        "per_phase_distances": segment_distances(&truth, &prior, m, a.grid)?,
    });
    println!("{}", serde_json::to_string_pretty(&doc).expect("plain json"));
    Ok(())
}

fn lp() -> CliResult<()> {
    let mut text = String::new();
    std::io::stdin()
        .read_to_string(&mut text)
        .map_err(|e| Failure::Domain(format!("stdin: {e}")))?;
    let problem: LpProblem =
        serde_json::from_str(&text).map_err(|e| Failure::Domain(format!("malformed LP document: {e}")))?;
    let solution = lp_solve(&problem).map_err(|e| Failure::Domain(e.to_string()))?;
    println!("{}", serde_json::to_string_pretty(&solution).expect("plain json"));
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Exp1(a) => run(exp1_config(&a)?, a.common.out.as_deref()),
        Command::Exp2(a) => run(exp2_config(&a)?, a.common.out.as_deref()),
        Command::Adversarial(a) => run(adversarial_config(&a)?, a.common.out.as_deref()),
        Command::Scaling(a) => scaling(&a),
        Command::Wasserstein(a) => wasserstein(&a),
        Command::Lp => lp(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(Failure::Domain(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
