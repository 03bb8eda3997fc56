use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use kalpert::harness::{self, ExperimentConfig, RawConfig, SuiteReport};

#[derive(Parser)]
#[command(
    name = "kalpert",
    version,
    about = "Smooth Alpert frames, paraboloid extension and Kakeya functionals"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Vanishing moments of the smooth atoms for each kappa.
    Basis(Common),
    /// Frame reproduction residuals and the eta sweep of |I - T|.
    FrameVerify(Common),
    /// Gram decay, well-localization, scale concentration, factorization, translation.
    Decay(Common),
    /// Scale concentration of modulated father-wavelet coefficients.
    Scales(Common),
    /// Condition A: Fourier square-function trilinear norms across scales.
    ConditionA(Common),
    /// Condition B: Kakeya-type inputs, Khintchine expectation vs square function.
    ConditionB(Common),
    /// Tube-overlap norms and trilinear Kakeya functionals.
    Kakeya(Common),
}

#[derive(Args)]
struct Common {
    /// key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for CSV tables and report.txt.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut raw = match &self.config {
            Some(p) => RawConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RawConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("`--set {kv}`: expected key=value"))?;
            raw.set(k.trim(), v.trim());
        }
        if let Some(s) = self.seed {
            raw.set("seed", s);
        }
        Ok(ExperimentConfig::from_raw(&raw)?)
    }
}

fn run(cli: Cli) -> Result<bool> {
    let (common, suite): (
        &Common,
        fn(&ExperimentConfig) -> kalpert::Result<SuiteReport>,
    ) = match &cli.command {
        Command::Basis(c) => (c, harness::run_basis),
        Command::FrameVerify(c) => (c, harness::run_frame_verify),
        Command::Decay(c) => (c, harness::run_decay_suite),
        Command::Scales(c) => (c, harness::run_scales),
        Command::ConditionA(c) => (c, harness::run_condition_a),
        Command::ConditionB(c) => (c, harness::run_condition_b),
        Command::Kakeya(c) => (c, harness::run_kakeya_suite),
    };
    let cfg = common.config()?;
    let report = suite(&cfg)?;
    report
        .write(&common.out_dir)
        .with_context(|| format!("writing to {}", common.out_dir.display()))?;
    for g in &report.gates {
        println!(
            "{} {}: {}",
            if g.passed { "PASS" } else { "FAIL" },
            g.name,
            g.detail
        );
    }
    println!(
        "{}: {} ({})",
        report.suite,
        if report.passed() { "PASS" } else { "FAIL" },
        common.out_dir.display()
    );
    Ok(report.passed())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            log::error!("{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
