use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use raro_core::calibrate::{
    calibrate, config_fragment, per_mode_params, verify, CalibrationSampling, CalibrationTargets, RetryRange,
};
use raro_core::config::ConfigError;
use raro_core::experiment::{self, default_sweep, policy_set, ExperimentError};
use raro_core::{ExperimentConfig, FlashMode, PerStage, PolicyKind, ReliabilityStage};

#[derive(Parser)]
#[command(name = "raro", version, about = "Read-retry aware flash mode simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Built-in defaults fill every missing key.
    #[arg(long)]
    config: Vec<PathBuf>,
    /// Workload seed (calibration: sampling seed).
    #[arg(long, env = "RARO_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "RARO_OUT")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Precondition, simulate one policy and write its stats.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: Option<PolicyKind>,
        #[arg(long)]
        stage: Option<ReliabilityStage>,
    },
    /// Run baseline, hotness and raro on one experiment and tabulate them.
    /// Several --config files may be given instead; they must differ only
    /// in their policy section.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage: Option<ReliabilityStage>,
    },
    /// Fit QLC RBER coefficients to per-stage retry ranges.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Young-stage retry range, e.g. 1-10.
        #[arg(long, value_parser = parse_range)]
        young: Option<RetryRange>,
        #[arg(long, value_parser = parse_range)]
        middle: Option<RetryRange>,
        #[arg(long, value_parser = parse_range)]
        old: Option<RetryRange>,
        /// Required share of pages inside each range.
        #[arg(long)]
        coverage: Option<f64>,
        /// Read-disturb term at the largest sampled read count, relative to wear.
        #[arg(long)]
        disturb_share: Option<f64>,
        /// Drop the increasing-wear constraint.
        #[arg(long)]
        no_monotone: bool,
    },
    /// Sweep R2 for the raro policy.
    Sensitivity {
        #[command(flatten)]
        common: Common,
        /// Sweep only this stage.
        #[arg(long)]
        stage: Option<ReliabilityStage>,
        /// Comma-separated R2 values; needs --stage.
        #[arg(long, value_delimiter = ',', requires = "stage")]
        r2: Vec<u32>,
        #[arg(long)]
        policy: Option<PolicyKind>,
    },
}

fn parse_range(s: &str) -> Result<RetryRange, String> {
    let (lo, hi) = s.split_once('-').ok_or_else(|| format!("expected LO-HI, got {s:?}"))?;
    let lo = lo.trim().parse().map_err(|e| format!("{lo:?}: {e}"))?;
    let hi = hi.trim().parse().map_err(|e| format!("{hi:?}: {e}"))?;
    if lo > hi {
        return Err(format!("{lo} exceeds {hi}"));
    }
    Ok(RetryRange::new(lo, hi))
}

/// Usage and config problems exit with 2, everything else with 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn load(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            ConfigError::Io { .. } => anyhow::Error::new(e),
            other => anyhow::Error::new(Usage(format!("{}: {other}", p.display()))),
        }),
        None => Ok(ExperimentConfig::default()),
    }
}

fn single_config(common: &Common) -> Result<ExperimentConfig> {
    if common.config.len() > 1 {
        return Err(Usage("this command takes at most one --config".into()).into());
    }
    load(common.config.first().map(PathBuf::as_path))
}

/// Apply command-line overrides and re-validate.
fn apply(
    mut cfg: ExperimentConfig,
    common: &Common,
    policy: Option<PolicyKind>,
    stage: Option<ReliabilityStage>,
) -> Result<ExperimentConfig> {
    if let Some(seed) = common.seed {
        cfg.workload.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.experiment.out = out.clone();
    }
    if let Some(p) = policy {
        cfg.policy.kind = p;
    }
    if let Some(s) = stage {
        cfg.experiment.stage = s;
    }
    cfg.validate().map_err(|e| Usage(e.to_string()))?;
    Ok(cfg)
}

fn experiment_error(e: ExperimentError) -> anyhow::Error {
    match e {
        ExperimentError::Config(_) | ExperimentError::Mismatch(_) | ExperimentError::ThresholdOrder { .. } => {
            Usage(e.to_string()).into()
        }
        other => other.into(),
    }
}

fn mib(bytes: u64) -> f64 {
    bytes as f64 / (1 << 20) as f64
}

fn cmd_run(common: &Common, policy: Option<PolicyKind>, stage: Option<ReliabilityStage>) -> Result<()> {
    let cfg = apply(single_config(common)?, common, policy, stage)?;
    let stats = experiment::run(&cfg).map_err(experiment_error)?;
    println!(
        "{} {}: {:.0} IOPS, mean retries {:.2}, capacity loss {:.0} MiB, {} migrations, {} failed requests",
        cfg.policy.kind,
        cfg.experiment.stage,
        stats.iops,
        stats.mean_retries,
        mib(stats.capacity_loss_bytes),
        stats.migration_count,
        stats.failed
    );
    println!("wrote {}", cfg.experiment.out.display());
    Ok(())
}

fn cmd_compare(common: &Common, stage: Option<ReliabilityStage>) -> Result<()> {
    let configs = if common.config.len() > 1 {
        let mut seen = Vec::new();
        let mut configs = Vec::new();
        for path in &common.config {
            let cfg = apply(load(Some(path))?, common, None, stage)?;
            if seen.contains(&cfg.policy.kind) {
                return Err(Usage(format!("{}: policy {} given twice", path.display(), cfg.policy.kind)).into());
            }
            seen.push(cfg.policy.kind);
            configs.push(cfg);
        }
        configs
    } else {
        policy_set(&apply(single_config(common)?, common, None, stage)?)
    };
    let out = configs[0].experiment.out.clone();
    let rows = experiment::compare(&configs, &out).map_err(experiment_error)?;
    println!(
        "{:<9} {:>10} {:>8} {:>10} {:>8} {:>10} {:>8}",
        "policy", "iops", "x base", "loss MiB", "x hot", "migrations", "retries"
    );
    for r in &rows {
        println!(
            "{:<9} {:>10.0} {:>8.2} {:>10.0} {:>8.3} {:>10} {:>8.2}",
            r.policy.as_str(),
            r.iops,
            r.iops_ratio_vs_baseline,
            mib(r.capacity_loss_bytes),
            r.capacity_loss_ratio_vs_hotness,
            r.migrations,
            r.mean_retries
        );
    }
    println!("wrote {}", out.join("compare.csv").display());
    Ok(())
}

struct CalibrateArgs {
    ranges: PerStage<Option<RetryRange>>,
    coverage: Option<f64>,
    disturb_share: Option<f64>,
    no_monotone: bool,
}

fn cmd_calibrate(common: &Common, args: CalibrateArgs) -> Result<()> {
    let cfg = single_config(common)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.experiment.out.clone());
    let mut targets = CalibrationTargets::default();
    for stage in ReliabilityStage::ALL {
        if let Some(r) = args.ranges[stage] {
            targets.ranges[stage] = r;
            // A custom range replaces the default central band too.
            targets.central[stage] = r;
        }
    }
    if let Some(c) = args.coverage {
        targets.coverage = c;
    }
    targets.monotone_wear = !args.no_monotone;
    let mut sampling = CalibrationSampling::default();
    if let Some(seed) = common.seed {
        sampling.seed = seed;
    }
    if let Some(d) = args.disturb_share {
        sampling.disturb_share = d;
    }
    let fit = calibrate(&targets, &sampling, &cfg.reliability, &cfg.modes[FlashMode::Qlc])?;
    let mut model = cfg.reliability.clone();
    model.rber = per_mode_params(fit.params);
    let check = verify(&model, &cfg.modes, &targets, &sampling)?;

    std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let fragment_path = out.join("calibration.toml");
    std::fs::write(&fragment_path, config_fragment(fit.params))
        .with_context(|| format!("cannot write {}", fragment_path.display()))?;
    let mut hist = String::from("stage,retries,reads\n");
    for stage in ReliabilityStage::ALL {
        for (retries, reads) in check.histograms[stage].iter().enumerate() {
            writeln!(hist, "{stage},{retries},{reads}").unwrap();
        }
    }
    let hist_path = out.join("calibration_hist.csv");
    std::fs::write(&hist_path, hist).with_context(|| format!("cannot write {}", hist_path.display()))?;

    let p = fit.params;
    println!(
        "epsilon {:e}, alpha_wear {:e}, k {}, gamma {:e}, p {}, q {}",
        p.epsilon, p.alpha_wear, p.k, p.gamma, p.p, p.q
    );
    let mut short = false;
    for stage in ReliabilityStage::ALL {
        let r = targets.ranges[stage];
        let a = fit.achieved[stage];
        println!(
            "{stage:<6} target {}-{}: sampled pages {:.1}%, simulated reads {:.1}%, central {}-{}",
            r.lo,
            r.hi,
            fit.coverage[stage] * 100.0,
            check.coverage[stage] * 100.0,
            a.lo,
            a.hi
        );
        short |= check.coverage[stage] < targets.coverage;
    }
    println!("wrote {} and {}", fragment_path.display(), hist_path.display());
    if short {
        bail!("simulated read histogram falls short of the required coverage");
    }
    Ok(())
}

fn cmd_sensitivity(
    common: &Common,
    stage: Option<ReliabilityStage>,
    r2: Vec<u32>,
    policy: Option<PolicyKind>,
) -> Result<()> {
    if policy.is_some_and(|p| p != PolicyKind::Raro) {
        return Err(Usage("sensitivity sweeps R2, which only the raro policy uses".into()).into());
    }
    let cfg = apply(single_config(common)?, common, policy, None)?;
    let mut sweep = default_sweep();
    if let Some(only) = stage {
        for s in ReliabilityStage::ALL {
            if s != only {
                sweep[s].clear();
            }
        }
        if !r2.is_empty() {
            sweep[only] = r2;
        }
    }
    let out = cfg.experiment.out.clone();
    let rows = experiment::sensitivity(&cfg, &sweep, &out).map_err(experiment_error)?;
    println!("{:<6} {:>3} {:>10} {:>10} {:>10}", "stage", "r2", "iops", "loss MiB", "migrations");
    for r in &rows {
        println!(
            "{:<6} {:>3} {:>10.0} {:>10.0} {:>10}",
            r.stage.to_string(),
            r.r2,
            r.iops,
            mib(r.capacity_loss_bytes),
            r.migrations
        );
    }
    println!("wrote {}", out.join("sensitivity.csv").display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { common, policy, stage } => cmd_run(&common, policy, stage),
        Command::Compare { common, stage } => cmd_compare(&common, stage),
        Command::Calibrate {
            common,
            young,
            middle,
            old,
            coverage,
            disturb_share,
            no_monotone,
        } => cmd_calibrate(
            &common,
            CalibrateArgs {
                ranges: PerStage { young, middle, old },
                coverage,
                disturb_share,
                no_monotone,
            },
        ),
        Command::Sensitivity {
            common,
            stage,
            r2,
            policy,
        } => cmd_sensitivity(&common, stage, r2, policy),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
