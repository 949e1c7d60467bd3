//! Command-line runner: train, grid, diagnose, margin-check.
//!
//! Exit codes: 0 on success, 1 on configuration or IO errors, 2 on numeric
//! divergence or a failed numerical check.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use lawn::diagnostics::{
    escape_indicator, exact_hessian, flattening_detector, grad_covariance, l2_trajectory_check,
    lemma1_check, margin_report, EscapeInputs, Lemma1Options,
};
use lawn::harness::{
    build_dataset, build_model, grid_search, load_checkpoint, run_experiment, save_checkpoint,
    write_metrics, GridSpec, RunConfig, RunOutput,
};
use lawn::losses::LossKind;
use lawn::network::{build_network, Activation, LayerSpec};
use lawn::{LawnError, Result};

#[derive(Parser)]
#[command(
    name = "lawn",
    version,
    about = "Norm-constrained training experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training experiment and write a metrics CSV plus checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Extra `key=value` assignments applied after the config file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Metrics CSV path (defaults to train.out from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the Cartesian product of a grid file over a base config.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        /// Output directory for per-run CSVs and the summary.
        #[arg(long)]
        out: PathBuf,
    },
    /// Report margins (and optionally the escape indicator) for a checkpoint.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also compute the Hessian/covariance escape indicator.
        #[arg(long)]
        escape: bool,
        /// Learning rate for the escape condition (required with --escape).
        #[arg(long)]
        eta: Option<f64>,
        /// Batch size for the escape condition (required with --escape).
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Verify the two margin-maximization routes agree on the toy problem.
    MarginCheck,
}

fn main() {
    let code = match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                LawnError::Numeric(_) => 2,
                _ => 1,
            }
        }
    };
    std::process::exit(code);
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| LawnError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn load_config(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::parse(&read_to_string(path)?)?;
    for (i, item) in overrides.iter().enumerate() {
        let (key, value) = item.split_once('=').ok_or_else(|| {
            LawnError::Config(format!("override {} is not key=value: {item:?}", i + 1))
        })?;
        cfg.apply(key.trim(), value.trim(), 0)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    name.push(".ckpt");
    out.with_file_name(name)
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train {
            config,
            overrides,
            out,
            seed,
        } => {
            let cfg = load_config(&config, &overrides, seed)?;
            let out_path = out
                .or_else(|| cfg.out_path.clone())
                .unwrap_or_else(|| PathBuf::from("metrics.csv"));
            let RunOutput { rows, summary, net } = run_experiment(&cfg)?;
            write_metrics(&rows, &out_path)?;
            save_checkpoint(&net, &checkpoint_path(&out_path))?;
            println!("epochs: {}", summary.epochs_run);
            println!("train_loss: {}", summary.final_train_loss);
            println!("train_acc: {}", summary.final_train_acc);
            println!("test_metric: {}", summary.final_test_metric);
            println!("normalized_margin: {}", summary.final_normalized_margin);
            match summary.switch_step {
                Some(k) => println!("switch_step: {k}"),
                None => println!("switch_step: none"),
            }
            println!("metrics: {}", out_path.display());
            if summary.diverged {
                eprintln!("run diverged; metrics cover the valid prefix");
                return Ok(2);
            }
            Ok(0)
        }
        Command::Grid { config, grid, out } => {
            let cfg = RunConfig::parse(&read_to_string(&config)?)?;
            let spec = GridSpec::parse(&read_to_string(&grid)?)?;
            std::fs::create_dir_all(&out).map_err(|source| LawnError::Io {
                path: out.display().to_string(),
                source,
            })?;
            let result = grid_search(&cfg, &spec)?;
            let mut summary = String::from("index,assignments,final_test_metric,diverged\n");
            for run in &result.runs {
                write_metrics(&run.rows, &out.join(format!("run_{}.csv", run.index)))?;
                let assigned: Vec<String> = run
                    .assignments
                    .iter()
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect();
                summary.push_str(&format!(
                    "{},{},{},{}\n",
                    run.index,
                    assigned.join(";"),
                    run.final_test_metric,
                    run.diverged
                ));
            }
            let summary_path = out.join("summary.csv");
            std::fs::write(&summary_path, summary).map_err(|source| LawnError::Io {
                path: summary_path.display().to_string(),
                source,
            })?;
            let best = &result.runs[result.best_index];
            println!("runs: {}", result.runs.len());
            println!("best_index: {}", result.best_index);
            println!("best_test_metric: {}", best.final_test_metric);
            for (k, v) in &best.assignments {
                println!("best: {k} = {v}");
            }
            Ok(0)
        }
        Command::Diagnose {
            config,
            checkpoint,
            escape,
            eta,
            batch,
        } => {
            let cfg = load_config(&config, &[], None)?;
            let full = build_dataset(&cfg)?;
            let train = if cfg.dataset.test_frac > 0.0 {
                lawn::data::split(&full, cfg.dataset.test_frac, cfg.dataset.seed)?.0
            } else {
                full
            };
            let mut net = build_model(&cfg, train.dim(), train.nc)?;
            load_checkpoint(&mut net, &checkpoint)?;
            let kind = if cfg.reg.lsr_epsilon > 0.0 {
                LossKind::LabelSmoothing {
                    epsilon: cfg.reg.lsr_epsilon,
                }
            } else {
                LossKind::CrossEntropy
            };
            let report = margin_report(&net, &train)?;
            let flat =
                flattening_detector(&report.margins, cfg.flat_threshold, cfg.flat_flag_fraction);
            println!("examples: {}", train.len());
            println!("margin_min: {}", report.min_margin);
            println!("margin_p50: {}", report.p50_margin);
            println!("normalized_margin: {}", report.normalized_margin);
            println!("flat_fraction: {}", flat.fraction);
            println!("flattened: {}", flat.flagged);
            for (i, n) in report.per_group_norms.iter().enumerate() {
                println!("norm_g{i}: {n}");
            }
            if escape {
                let eta = eta.ok_or_else(|| LawnError::Config("--escape needs --eta".into()))?;
                let batch =
                    batch.ok_or_else(|| LawnError::Config("--escape needs --batch".into()))?;
                let hessian = exact_hessian(&net, &train, kind, 0.0)?;
                let sigma = grad_covariance(&net, &train, kind)?;
                let indicator = escape_indicator(&EscapeInputs {
                    hessian,
                    sigma,
                    eta,
                    batch_size: batch,
                    dataset_size: train.len(),
                })?;
                println!("escape_indicator: {indicator}");
                println!("escape_predicted: {}", indicator > 1.0);
            }
            Ok(0)
        }
        Command::MarginCheck => {
            let specs = [LayerSpec::new(2, 1, Activation::Identity, false)];
            let net = build_network(&specs, 12345)?;
            let result = lemma1_check(
                &net,
                &lawn::data::toy_dataset(),
                &[1.0],
                Lemma1Options::default(),
            )?;
            let mut ok = true;
            for (gid, cos) in result.per_group_cosine.iter().enumerate() {
                println!("group {gid}: cosine {cos}");
                ok &= *cos >= 0.9998;
            }
            for (gid, n) in result.constrained_final_norms.iter().enumerate() {
                println!("group {gid}: constrained_norm {n}");
                ok &= ((n - 1.0) / 1.0).abs() <= 1e-9;
            }
            let points = l2_trajectory_check(&[1e-3, 1e-2, 1e-1])?;
            for p in &points {
                println!(
                    "rho {}: angle_to_max_margin {} norm {}",
                    p.rho, p.angle_to_max_margin, p.weight_norm
                );
                ok &= p.angle_to_max_margin <= 1e-4;
            }
            if ok {
                println!("margin-check: pass");
                Ok(0)
            } else {
                println!("margin-check: fail");
                Ok(2)
            }
        }
    }
}
