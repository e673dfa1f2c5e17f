// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

//! Hyper-parameter sweep over (drop rate, sample count).

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{train, TrainingConfig, UIvimNet};
use crate::error::{Error, Result};
use crate::evaluation::{check_requirement, snr_sweep, SweepOptions};
use crate::ivim::{eval_signal, Dataset};
use crate::par;

/// Optional uncertainty-requirement probe run on every trained cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RequirementProbe {
    pub sweep: SweepOptions,
    pub tau: f64,
}

impl Default for RequirementProbe {
    fn default() -> Self {
        Self {
            sweep: SweepOptions {
                n_voxels: 500,
                ..SweepOptions::default()
            },
            tau: crate::evaluation::DEFAULT_TAU,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub drop_rates: Vec<f64>,
    pub n_samples: Vec<usize>,
    pub requirement: Option<RequirementProbe>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            drop_rates: (1..=9).map(|i| i as f64 / 10.0).collect(),
            n_samples: vec![4, 8, 16, 32, 64],
            requirement: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    /// RMSE between the measured validation signals and the signals rebuilt
    /// from the sample-mean prediction.
    pub val_recon_rmse: f64,
    pub requirement_pass: Option<bool>,
    pub epochs_run: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridCell {
    pub drop_rate: f64,
    pub n_samples: usize,
    pub outcome: std::result::Result<CellScore, String>,
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    /// Index into `cells` of the winner.
    pub best: Option<usize>,
    pub best_net: Option<UIvimNet>,
}

impl GridResult {
    pub fn best_cell(&self) -> Option<&GridCell> {
        self.best.map(|i| &self.cells[i])
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("drop_rate,n_samples,val_recon_rmse,requirement_pass,epochs_run,error\n");
        for c in &self.cells {
            match &c.outcome {
                Ok(s) => {
                    let req = s.requirement_pass.map_or(String::new(), |p| p.to_string());
                    let _ = writeln!(
                        out,
                        "{},{},{:e},{},{},",
                        c.drop_rate, c.n_samples, s.val_recon_rmse, req, s.epochs_run
                    );
                }
                Err(e) => {
                    let _ = writeln!(
                        out,
                        "{},{},,,,\"{}\"",
                        c.drop_rate,
                        c.n_samples,
                        e.replace('"', "'")
                    );
                }
            }
        }
        out
    }
}

fn val_recon_rmse(net: &UIvimNet, val: &Dataset) -> Result<f64> {
    let b = net.schedule.values();
    let per_voxel = par::map_range(val.n_voxels(), |i| -> Result<f64> {
        let m = net.predict_with_uncertainty(val.signal(i))?.mean_params();
        Ok(b.iter()
            .zip(val.signal(i))
            .map(|(&bv, &s)| (eval_signal(&m, bv) - s).powi(2))
            .sum())
    });
    let total: f64 = per_voxel
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .iter()
        .sum();
    Ok((total / (val.n_voxels() * b.len()) as f64).sqrt())
}

/// Ranking: lower RMSE, then requirement pass before fail, then smaller N,
/// then smaller drop rate.
fn rank(a: &GridCell, b: &GridCell) -> Ordering {
    let (sa, sb) = match (&a.outcome, &b.outcome) {
        (Ok(x), Ok(y)) => (x, y),
        (Ok(_), Err(_)) => return Ordering::Less,
        (Err(_), Ok(_)) => return Ordering::Greater,
        (Err(_), Err(_)) => return Ordering::Equal,
    };
    let fail = |s: &CellScore| s.requirement_pass == Some(false);
    sa.val_recon_rmse
        .total_cmp(&sb.val_recon_rmse)
        .then(fail(sa).cmp(&fail(sb)))
        .then(a.n_samples.cmp(&b.n_samples))
        .then(a.drop_rate.total_cmp(&b.drop_rate))
}

/// Train one network per grid cell and pick the best on validation data.
/// A cell that fails (infeasible masks, divergence) is recorded and skipped.
pub fn grid_search(
    train_ds: &Dataset,
    val_ds: &Dataset,
    base: &TrainingConfig,
    grid: &GridConfig,
) -> Result<GridResult> {
    if grid.drop_rates.is_empty() || grid.n_samples.is_empty() {
        return Err(Error::invalid("grid axes must be nonempty"));
    }
    if val_ds.schedule != train_ds.schedule {
        return Err(Error::invalid(
            "validation b-values differ from training b-values",
        ));
    }
    let mut axes = Vec::new();
    for &n in &grid.n_samples {
        for &p in &grid.drop_rates {
            axes.push((p, n));
        }
    }
    let runs = par::map_slice(&axes, |&(p, n)| -> Result<(CellScore, UIvimNet)> {
        let cfg = TrainingConfig {
            drop_rate: p,
            n_samples: n,
            ..base.clone()
        };
        let net = UIvimNet::from_config(&train_ds.schedule, &train_ds.ranges, &cfg)?;
        let out = train(net, train_ds, &cfg)?;
        let requirement_pass = match &grid.requirement {
            Some(probe) => {
                let rep = snr_sweep(&out.net, &train_ds.ranges, &probe.sweep)?;
                Some(check_requirement(&rep, probe.tau)?.pass)
            }
            None => None,
        };
        let score = CellScore {
            val_recon_rmse: val_recon_rmse(&out.net, val_ds)?,
            requirement_pass,
            epochs_run: out.net.meta.epochs_run,
        };
        Ok((score, out.net))
    });

    let mut cells = Vec::with_capacity(axes.len());
    let mut nets = Vec::with_capacity(axes.len());
    for (&(p, n), run) in axes.iter().zip(runs) {
        let (outcome, net) = match run {
            Ok((s, net)) => (Ok(s), Some(net)),
            Err(e) => {
                log::warn!("grid cell (p={p}, N={n}) failed: {e}");
                (Err(e.to_string()), None)
            }
        };
        cells.push(GridCell {
            drop_rate: p,
            n_samples: n,
            outcome,
        });
        nets.push(net);
    }
    let best = (0..cells.len())
        .filter(|&i| cells[i].outcome.is_ok())
        .min_by(|&a, &b| rank(&cells[a], &cells[b]));
    let best_net = best.and_then(|i| nets[i].take());
    Ok(GridResult {
        cells,
        best,
        best_net,
    })
}
