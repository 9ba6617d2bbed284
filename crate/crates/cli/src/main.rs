//! Command-line harness for ProCal experiments: config-driven
//! pretraining and adaptation, ablation and robustness suites, data
//! generation, feature export, and the verification oracles.
//!
//! Exit codes: 0 success, 1 oracle failure, 2 configuration error,
//! 3 numerical divergence.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use procal_cli::config::ExperimentConfig;
use procal_core::adaptation::{
    ablation_to_csv, adapt_observed, pretrain_source, run_ablation_suite,
};
use procal_core::data::save_feature_table;
use procal_core::math::ScoreVector;
use procal_core::metrics::evaluate;
use procal_core::model::ModelParams;
use procal_core::oracles;
use procal_core::theory::{fixed_point, stationarity_residual};
use procal_core::ProcalError;

const EXIT_ORACLE_FAILURE: u8 = 1;
const EXIT_CONFIG_ERROR: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
enum LogLevel {
    Quiet,
    Info,
    Debug,
}

fn log_level() -> LogLevel {
    match std::env::var("PROCAL_LOG").as_deref() {
        Ok("quiet") => LogLevel::Quiet,
        Ok("debug") => LogLevel::Debug,
        _ => LogLevel::Info,
    }
}

fn info(msg: &str) {
    if log_level() >= LogLevel::Info {
        eprintln!("[procal] {msg}");
    }
}

fn debug(msg: &str) {
    if log_level() >= LogLevel::Debug {
        eprintln!("[procal:debug] {msg}");
    }
}

#[derive(Parser)]
#[command(
    name = "procal",
    about = "Neighborhood-guided source-free domain adaptation with probability calibration",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to the experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override applied to the relevant stage.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model and write its checkpoint plus a
    /// source-domain evaluation report.
    Pretrain(ConfigArgs),
    /// Adapt a pretrained checkpoint to the target domain; writes the
    /// adapted checkpoint, the dynamics CSV, and the final report JSON.
    Adapt {
        #[command(flatten)]
        common: ConfigArgs,
        /// Source checkpoint produced by `pretrain`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also dump the final memory bank as CSV.
        #[arg(long)]
        dump_bank: bool,
    },
    /// Evaluate a checkpoint and emit the report as JSON on stdout.
    Eval {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which domain to evaluate on.
        #[arg(long, default_value = "target", value_parser = ["source", "target"])]
        domain: String,
    },
    /// Run the component ablation over the configured seeds and write
    /// `ablation.csv`.
    Ablate(ConfigArgs),
    /// Run the verification oracles; exits 1 if any fails.
    Oracles {
        /// Gradient-check instances per objective; the other suites
        /// scale proportionally.
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Sample the closed-form stationary point and emit residuals as CSV.
    FixedPointCheck {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the configured synthetic domain pair as feature tables.
    GenData(ConfigArgs),
    /// Export the checkpoint's feature-space embedding of a domain as a
    /// feature table.
    ExportFeatures {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "target", value_parser = ["source", "target"])]
        domain: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                ProcalError::Divergence { .. } => ExitCode::from(EXIT_DIVERGENCE),
                _ => ExitCode::from(EXIT_CONFIG_ERROR),
            }
        }
    }
}

fn run(command: Command) -> procal_core::Result<ExitCode> {
    match command {
        Command::Pretrain(args) => cmd_pretrain(&args),
        Command::Adapt {
            common,
            checkpoint,
            dump_bank,
        } => cmd_adapt(&common, &checkpoint, dump_bank),
        Command::Eval {
            common,
            checkpoint,
            domain,
        } => cmd_eval(&common, &checkpoint, &domain),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::Oracles { trials } => cmd_oracles(trials),
        Command::FixedPointCheck { trials, out } => cmd_fixed_point_check(trials, out.as_deref()),
        Command::GenData(args) => cmd_gen_data(&args),
        Command::ExportFeatures {
            common,
            checkpoint,
            domain,
        } => cmd_export_features(&common, &checkpoint, &domain),
    }
}

fn out_dir(config: &ExperimentConfig, args: &ConfigArgs) -> procal_core::Result<PathBuf> {
    let dir = args.out.clone().unwrap_or_else(|| config.out_dir.clone());
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_file(path: &Path, contents: &str) -> procal_core::Result<()> {
    std::fs::write(path, contents)?;
    debug(&format!("wrote {}", path.display()));
    Ok(())
}

fn cmd_pretrain(args: &ConfigArgs) -> procal_core::Result<ExitCode> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.pretrain.seed = seed;
    }
    let dir = out_dir(&config, args)?;
    let (source, _) = config.datasets()?;
    let model_cfg = config.model_config(&source);
    info(&format!(
        "pretraining on {} source samples ({} classes, {} epochs, seed {})",
        source.len(),
        source.classes(),
        config.pretrain.epochs,
        config.pretrain.seed
    ));
    let theta_s = pretrain_source(&source, &model_cfg, &config.pretrain)?;
    let report = evaluate(&theta_s, &source)?;
    let checkpoint_path = dir.join("checkpoint_source.json");
    theta_s.save(&checkpoint_path)?;
    write_file(
        &dir.join("source_eval.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    info(&format!(
        "source-domain accuracy {:.4}; checkpoint at {}",
        report.overall_accuracy,
        checkpoint_path.display()
    ));
    Ok(ExitCode::SUCCESS)
}

fn cmd_adapt(args: &ConfigArgs, checkpoint: &Path, dump_bank: bool) -> procal_core::Result<ExitCode> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.adaptation.seed = seed;
    }
    let dir = out_dir(&config, args)?;
    let (_, target) = config.datasets()?;
    let theta_s = ModelParams::load(checkpoint)?;
    info(&format!(
        "adapting to {} target samples (objective {}, {} epochs, seed {})",
        target.len(),
        config.adaptation.objective.as_str(),
        config.adaptation.epochs,
        config.adaptation.seed
    ));
    let mut last_good = None;
    let result = match adapt_observed(&theta_s, &target, &config.adaptation, &mut last_good) {
        Ok(result) => result,
        Err(e) => {
            if let Some((iteration, params)) = last_good {
                let rescue = dir.join("checkpoint_last_good.json");
                params.save(&rescue)?;
                eprintln!(
                    "adaptation diverged; last good checkpoint (iteration {iteration}) \
                     saved to {}",
                    rescue.display()
                );
            }
            return Err(e);
        }
    };
    result.theta_t.save(&dir.join("checkpoint_adapted.json"))?;
    write_file(&dir.join("dynamics.csv"), &result.log.to_csv())?;
    write_file(
        &dir.join("report.json"),
        &serde_json::to_string_pretty(&result.report)?,
    )?;
    if dump_bank {
        write_file(&dir.join("bank.csv"), &result.bank.dump_csv())?;
    }
    info(&format!(
        "target accuracy {:.4} (source-only {:.4}, priors {:.4}); artifacts in {}",
        result.report.final_accuracy,
        result.report.source_accuracy,
        result.report.prior_accuracy,
        dir.display()
    ));
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: &ConfigArgs, checkpoint: &Path, domain: &str) -> procal_core::Result<ExitCode> {
    let config = ExperimentConfig::load(&args.config)?;
    let (source, target) = config.datasets()?;
    let dataset = if domain == "source" { &source } else { &target };
    let model = ModelParams::load(checkpoint)?;
    let report = evaluate(&model, dataset)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        write_file(&out.join(format!("eval_{domain}.json")), &json)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(args: &ConfigArgs) -> procal_core::Result<ExitCode> {
    let config = ExperimentConfig::load(&args.config)?;
    let dir = out_dir(&config, args)?;
    let (source, target) = config.datasets()?;
    let model_cfg = config.model_config(&source);
    info(&format!(
        "ablation over seeds {:?} ({} target samples)",
        config.ablation_seeds,
        target.len()
    ));
    let rows = run_ablation_suite(
        &source,
        &target,
        &model_cfg,
        &config.pretrain,
        &config.adaptation,
        &config.ablation_seeds,
    )?;
    let csv = ablation_to_csv(&rows);
    write_file(&dir.join("ablation.csv"), &csv)?;
    if log_level() >= LogLevel::Info {
        eprint!("{csv}");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracles(trials: usize) -> procal_core::Result<ExitCode> {
    if trials == 0 {
        return Err(ProcalError::Parameter("--trials must be positive".into()));
    }
    let mut outcomes = oracles::gradient_suite(trials, 2024);
    outcomes.push(oracles::soft_gradient_equivalence(trials * 50, 2125));
    outcomes.push(oracles::fixed_point_suite(trials * 500, 2226));
    outcomes.push(oracles::knn_equivalence_suite(trials * 5, 2327));
    let mut all_passed = true;
    println!("{:<28} {:>8} {:>7} {:>12}  detail", "oracle", "status", "trials", "worst");
    for o in &outcomes {
        all_passed &= o.passed;
        println!(
            "{:<28} {:>8} {:>7} {:>12.3e}  {}",
            o.name,
            if o.passed { "PASS" } else { "FAIL" },
            o.trials,
            o.worst,
            o.detail
        );
    }
    if all_passed {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(EXIT_ORACLE_FAILURE))
    }
}

fn cmd_fixed_point_check(trials: usize, out: Option<&Path>) -> procal_core::Result<ExitCode> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(404);
    let mut csv = String::from("trial,C,gamma,simplex_residual,stationarity_residual,feasible\n");
    let mut all_ok = true;
    for trial in 0..trials {
        let classes = rng.gen_range(2..=10);
        let gamma: f64 = rng.gen_range(0.05..5.0);
        let q = ScoreVector::new((0..classes).map(|_| rng.gen_range(0.0..10.0)).collect())
            .expect("finite draws");
        let fp = fixed_point(&q, gamma, classes)?;
        let simplex = (fp.p_star.iter().sum::<f64>() - 1.0).abs();
        let (_, stationarity) = stationarity_residual(&fp.p_star, &q, gamma)?;
        all_ok &= simplex <= 1e-12 && stationarity <= 1e-10;
        let _ = writeln!(
            csv,
            "{trial},{classes},{gamma},{simplex},{stationarity},{}",
            fp.feasible
        );
    }
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            write_file(path, &csv)?;
        }
        None => print!("{csv}"),
    }
    if all_ok {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(EXIT_ORACLE_FAILURE))
    }
}

fn cmd_gen_data(args: &ConfigArgs) -> procal_core::Result<ExitCode> {
    let config = ExperimentConfig::load(&args.config)?;
    if config.dataset.gaussian.is_none() {
        return Err(ProcalError::Parameter(
            "gen-data needs a `gaussian` dataset section".into(),
        ));
    }
    let dir = out_dir(&config, args)?;
    let (source, target) = config.datasets()?;
    save_feature_table(&source, &dir.join("source.csv"))?;
    save_feature_table(&target, &dir.join("target.csv"))?;
    info(&format!(
        "wrote {} source and {} target samples to {}",
        source.len(),
        target.len(),
        dir.display()
    ));
    Ok(ExitCode::SUCCESS)
}

fn cmd_export_features(
    args: &ConfigArgs,
    checkpoint: &Path,
    domain: &str,
) -> procal_core::Result<ExitCode> {
    let config = ExperimentConfig::load(&args.config)?;
    let dir = out_dir(&config, args)?;
    let (source, target) = config.datasets()?;
    let dataset = if domain == "source" { &source } else { &target };
    let model = ModelParams::load(checkpoint)?;
    let mut features = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let (z, _, _) = model.forward(dataset.input(i))?;
        features.push(z.into_vec());
    }
    let table = procal_core::data::LabeledDataset::new(
        features,
        dataset.labels().to_vec(),
        dataset.classes(),
        format!("{domain}_features"),
        dataset.seed(),
    )?;
    let path = dir.join(format!("features_{domain}.csv"));
    save_feature_table(&table, &path)?;
    info(&format!(
        "exported {} feature vectors (h = {}) to {}",
        table.len(),
        model.feature_dim(),
        path.display()
    ));
    Ok(ExitCode::SUCCESS)
}
