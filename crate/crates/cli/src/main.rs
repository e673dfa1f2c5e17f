// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use uivim::accel::Schedule;
use uivim::flow::{self, RunConfig};
use uivim::ivim::Param;

/// Exit code of `eval` when the uncertainty requirement fails.
const EXIT_REQUIREMENT_FAILED: u8 = 2;

#[derive(Parser)]
#[command(
    name = "uivim",
    version,
    about = "Uncertainty-aware IVIM estimation: data, training, and accelerator modeling"
)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override the top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one synthetic dataset per SNR level.
    GenData {
        #[arg(long, short)]
        out: PathBuf,
        /// Override the voxel count per level.
        #[arg(long)]
        n_voxels: Option<usize>,
    },
    /// Train a single network.
    Train {
        #[arg(long, short)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Write the loss curve here.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Sweep drop rate and sample count; keep the best network.
    Grid {
        #[arg(long, short)]
        data: PathBuf,
        /// Separate validation set (default: hold out part of --data).
        #[arg(long)]
        val_data: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    /// SNR sweep and uncertainty requirement check. Exits 0 on pass, 2 on fail.
    Eval {
        #[arg(long, short)]
        model: Option<PathBuf>,
        /// Train a fresh network at every SNR level instead of using --model.
        #[arg(long)]
        per_snr_training: bool,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        json: PathBuf,
    },
    /// Fold, quantize and pack a trained network.
    Quantize {
        #[arg(long, short)]
        model: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Compare fixed-point and float predictions on this dataset.
        #[arg(long)]
        check_data: Option<PathBuf>,
    },
    /// Run the accelerator simulator on a dataset.
    Simulate {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, short)]
        data: PathBuf,
        #[arg(long, short)]
        out_dir: PathBuf,
        /// batch-level or sampling-level
        #[arg(long)]
        schedule: Option<Schedule>,
        /// Comma-separated PE counts, e.g. 4,8,16,32.
        #[arg(long, value_delimiter = ',')]
        pe_sweep: Option<Vec<usize>>,
    },
    /// Analytic timing and resource report.
    Report {
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.training.seed = cfg.training_seed();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::GenData { out, n_voxels } => {
            if let Some(n) = n_voxels {
                cfg.data.n_voxels = n;
            }
            let s = flow::cmd_gen_data(&cfg, &out).context("gen-data")?;
            println!(
                "wrote {} datasets, {} voxels x {} b-values each",
                s.files.len(),
                s.n_voxels,
                s.n_b
            );
            for f in &s.files {
                println!("  {}", f.display());
            }
        }
        Command::Train { data, out, curve } => {
            let s = flow::cmd_train(&cfg, &data, &out, curve.as_deref()).context("train")?;
            println!(
                "trained {} epochs (best {}), final train loss {:.3e}, best val loss {}",
                s.epochs_run,
                s.best_epoch,
                s.final_train_loss,
                s.best_val_loss.map_or("n/a".into(), |v| format!("{v:.3e}"))
            );
            println!("config hash {}, model {}", s.config_hash, out.display());
        }
        Command::Grid {
            data,
            val_data,
            out,
            csv,
        } => {
            let r = flow::cmd_grid(&cfg, &data, val_data.as_deref(), &out, &csv).context("grid")?;
            let failed = r.cells.iter().filter(|c| c.outcome.is_err()).count();
            println!("{} cells, {} failed", r.cells.len(), failed);
            if let Some(c) = r.best_cell() {
                println!("best: drop_rate {} N {}", c.drop_rate, c.n_samples);
            }
        }
        Command::Eval {
            model,
            per_snr_training,
            csv,
            json,
        } => {
            let out = flow::cmd_eval(&cfg, model.as_deref(), per_snr_training, &csv, &json)
                .context("eval")?;
            println!(
                "{:>6}  {:>10} {:>10} {:>10} {:>10}",
                "snr", "D", "Dstar", "f", "S0"
            );
            for row in &out.report.rows {
                let u: Vec<String> = Param::ALL
                    .iter()
                    .map(|p| format!("{:>10.4}", row.rel_uncertainty[p.index()]))
                    .collect();
                println!("{:>6}  {}", row.snr, u.join(" "));
            }
            let v = &out.verdict;
            println!(
                "uncertainty requirement (tau {}): {}",
                v.tau,
                if v.pass { "PASS" } else { "FAIL" }
            );
            if !v.pass {
                return Ok(ExitCode::from(EXIT_REQUIREMENT_FAILED));
            }
        }
        Command::Quantize {
            model,
            out,
            check_data,
        } => {
            let s = flow::cmd_quantize(&cfg, &model, &out, check_data.as_deref())
                .context("quantize")?;
            println!(
                "packed {} words ({:.1}% of dense), {} saturated",
                s.total_words,
                100.0 * s.total_words as f64 / s.dense_words as f64,
                s.saturated_weights
            );
            if let Some(a) = s.accuracy {
                println!(
                    "{:.2}% of {} voxels within {}% of range width",
                    100.0 * a.within_tolerance,
                    a.n_voxels,
                    100.0 * a.tolerance
                );
            }
        }
        Command::Simulate {
            store,
            data,
            out_dir,
            schedule,
            pe_sweep,
        } => {
            let s =
                flow::cmd_simulate(&cfg, &store, &data, schedule, pe_sweep.as_deref(), &out_dir)
                    .context("simulate")?;
            let t = &s.timing;
            println!(
                "functional simulation matches the fixed-point reference on {} voxels",
                s.n_voxels
            );
            println!(
                "{}: {} cycles/batch ({} event-driven), {:.4} ms/batch (published build: {} ms), {} weight loads/batch",
                t.schedule.name(),
                t.total_cycles,
                t.event_driven_cycles,
                t.wall_time_ms,
                t.reference_ms_per_batch,
                s.weight_loads_per_batch
            );
            println!(
                "dsp {}  bram words {} / {}{}",
                s.resources.dsp_used,
                s.resources.bram_words_used,
                s.resources.bram_words_capacity,
                if s.resources.over_capacity {
                    "  OVER CAPACITY"
                } else {
                    ""
                }
            );
        }
        Command::Report { store, json } => {
            let r = flow::cmd_report(&cfg, store.as_deref(), json.as_deref()).context("report")?;
            for t in [&r.batch_level, &r.sampling_level] {
                println!(
                    "{:>15}: {:>9} cycles, {:.4} ms/batch, {} weight loads",
                    t.schedule.name(),
                    t.total_cycles,
                    t.wall_time_ms,
                    t.weight_loads
                );
            }
            println!("load ratio {}", r.load_ratio);
            println!("published build: {} ms/batch", r.reference_ms_per_batch);
            println!(
                "dsp {}  bram words {}",
                r.resources.dsp_used, r.resources.bram_words_used
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
