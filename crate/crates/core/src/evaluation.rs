// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

//! Accuracy and uncertainty across noise levels.
//!
//! Ground truth for the network is the *normalized* parameter tuple
//! `(D, Dstar, f, 1)`: inputs are divided by S(b=0), so the S0 head estimates
//! a quantity whose noiseless value is 1.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ivim::{
    eval_signal, generate_dataset, BValueSchedule, IvimParams, NoiseSpec, Param, ParamRanges,
};
use crate::network::{config_hash, train, PredictionWithUncertainty, TrainingConfig, UIvimNet};
use crate::par;
use crate::rng::derive_seed;

pub const DEFAULT_SNR_LEVELS: [f64; 5] = [5.0, 15.0, 20.0, 30.0, 50.0];
pub const DEFAULT_TAU: f64 = 0.05;

/// Threshold below which |mean| makes std/mean meaningless.
pub const MEAN_EPSILON: f64 = 1e-12;

pub fn rmse(pred: &[IvimParams], truth: &[IvimParams]) -> Result<[f64; 4]> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::invalid("rmse of an empty set"));
    }
    let n = pred.len() as f64;
    Ok(std::array::from_fn(|j| {
        let p = Param::ALL[j];
        (pred
            .iter()
            .zip(truth)
            .map(|(a, b)| (a.get(p) - b.get(p)).powi(2))
            .sum::<f64>()
            / n)
            .sqrt()
    }))
}

/// Per-parameter std/mean; `None` flags a mean too close to zero.
pub fn relative_uncertainty(pred: &PredictionWithUncertainty) -> [Option<f64>; 4] {
    std::array::from_fn(|j| {
        let m = pred.mean[j];
        (m.abs() >= MEAN_EPSILON).then(|| pred.std[j] / m)
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregator {
    #[default]
    Mean,
    Median,
}

impl Aggregator {
    fn apply(self, mut xs: Vec<f64>) -> f64 {
        if xs.is_empty() {
            return f64::NAN;
        }
        match self {
            Aggregator::Mean => xs.iter().sum::<f64>() / xs.len() as f64,
            Aggregator::Median => {
                xs.sort_by(f64::total_cmp);
                let n = xs.len();
                if n % 2 == 1 {
                    xs[n / 2]
                } else {
                    0.5 * (xs[n / 2 - 1] + xs[n / 2])
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    /// One network evaluated at every level.
    #[default]
    SingleNet,
    /// A fresh network trained on each level's noise before evaluating it.
    PerSnrTraining,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub snr: f64,
    /// Indexed by [`Param::index`].
    pub rmse: [f64; 4],
    pub recon_rmse: f64,
    pub rel_uncertainty: [f64; 4],
    /// Voxels excluded from the uncertainty aggregate per parameter.
    pub excluded: [usize; 4],
    pub n_voxels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub mode: SweepMode,
    pub aggregator: Aggregator,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepOptions {
    pub snr_levels: Vec<f64>,
    pub n_voxels: usize,
    pub seed: u64,
    pub aggregator: Aggregator,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            snr_levels: DEFAULT_SNR_LEVELS.to_vec(),
            n_voxels: 2000,
            seed: 0,
            aggregator: Aggregator::Mean,
        }
    }
}

impl SweepOptions {
    fn sorted_levels(&self) -> Result<Vec<f64>> {
        if self.snr_levels.is_empty() {
            return Err(Error::invalid("no SNR levels"));
        }
        if self.n_voxels == 0 {
            return Err(Error::invalid("n_voxels must be > 0"));
        }
        if let Some(s) = self.snr_levels.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::invalid(format!("snr must be > 0, got {s}")));
        }
        let mut levels = self.snr_levels.clone();
        levels.sort_by(f64::total_cmp);
        Ok(levels)
    }
}

/// Seed of the evaluation dataset at `snr`. Depends on the level's value, so
/// a repeated level reproduces its row exactly.
pub fn level_seed(seed: u64, snr: f64) -> u64 {
    derive_seed(seed, snr.to_bits())
}

fn evaluate_level(
    net: &UIvimNet,
    ranges: &ParamRanges,
    schedule: &BValueSchedule,
    snr: f64,
    opts: &SweepOptions,
) -> Result<SweepRow> {
    let ds = generate_dataset(
        ranges,
        schedule,
        opts.n_voxels,
        NoiseSpec::new(snr, level_seed(opts.seed, snr))?,
    )?;
    let preds = par::map_range(ds.n_voxels(), |i| {
        net.predict_with_uncertainty(ds.signal(i))
    });
    let preds = preds.into_iter().collect::<Result<Vec<_>>>()?;
    let truth: Vec<IvimParams> = ds
        .truth
        .iter()
        .map(|t| IvimParams { s0: 1.0, ..*t })
        .collect();
    let means: Vec<IvimParams> = preds.iter().map(|p| p.mean_params()).collect();
    let rmse = rmse(&means, &truth)?;

    let b = schedule.values();
    let mut sq = 0.0;
    for (m, t) in means.iter().zip(&truth) {
        for &bv in b {
            sq += (eval_signal(m, bv) - eval_signal(t, bv)).powi(2);
        }
    }
    let recon_rmse = (sq / (means.len() * b.len()) as f64).sqrt();

    let rel: Vec<[Option<f64>; 4]> = preds.iter().map(relative_uncertainty).collect();
    let mut rel_uncertainty = [0.0; 4];
    let mut excluded = [0usize; 4];
    for j in 0..4 {
        let vals: Vec<f64> = rel.iter().filter_map(|r| r[j]).collect();
        excluded[j] = rel.len() - vals.len();
        rel_uncertainty[j] = opts.aggregator.apply(vals);
    }
    Ok(SweepRow {
        snr,
        rmse,
        recon_rmse,
        rel_uncertainty,
        excluded,
        n_voxels: ds.n_voxels(),
    })
}

/// Evaluate `net` on a fresh synthetic dataset per SNR level.
pub fn snr_sweep(net: &UIvimNet, ranges: &ParamRanges, opts: &SweepOptions) -> Result<SweepReport> {
    let levels = opts.sorted_levels()?;
    let rows = levels
        .iter()
        .map(|&snr| evaluate_level(net, ranges, &net.schedule, snr, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        rows,
        mode: SweepMode::SingleNet,
        aggregator: opts.aggregator,
        seed: opts.seed,
        config_hash: config_hash(opts),
    })
}

/// Train one network per level on `n_train` voxels at that level, then
/// evaluate it there.
pub fn snr_sweep_per_snr_training(
    ranges: &ParamRanges,
    schedule: &BValueSchedule,
    train_cfg: &TrainingConfig,
    n_train: usize,
    opts: &SweepOptions,
) -> Result<SweepReport> {
    let levels = opts.sorted_levels()?;
    let rows = levels
        .iter()
        .map(|&snr| {
            let train_seed = derive_seed(level_seed(opts.seed, snr), crate::rng::tag("train-data"));
            let ds = generate_dataset(ranges, schedule, n_train, NoiseSpec::new(snr, train_seed)?)?;
            let net = UIvimNet::from_config(schedule, ranges, train_cfg)?;
            let trained = train(net, &ds, train_cfg)?.net;
            evaluate_level(&trained, ranges, schedule, snr, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        rows,
        mode: SweepMode::PerSnrTraining,
        aggregator: opts.aggregator,
        seed: opts.seed,
        config_hash: config_hash(&(opts, train_cfg, n_train)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequirementVerdict {
    pub pass: bool,
    /// Relative uncertainty nonincreasing in SNR, per parameter.
    pub uncertainty_monotone: [bool; 4],
    /// RMSE nonincreasing in SNR, per parameter (reported, not gating).
    pub rmse_monotone: [bool; 4],
    pub tau: f64,
    pub snr_levels: Vec<f64>,
}

/// `xs` (ordered by rising SNR) never rises by more than a factor `1 + tau`
/// between adjacent levels.
pub fn nonincreasing_within(xs: &[f64], tau: f64) -> bool {
    xs.windows(2).all(|w| w[1] <= w[0] * (1.0 + tau))
}

/// Passes iff every parameter's relative uncertainty shrinks (within slack
/// `tau`) as SNR rises.
pub fn check_requirement(report: &SweepReport, tau: f64) -> Result<RequirementVerdict> {
    if report.rows.len() < 2 {
        return Err(Error::invalid(
            "requirement check needs at least 2 SNR levels",
        ));
    }
    if !(tau >= 0.0) {
        return Err(Error::invalid("tau must be >= 0"));
    }
    let series = |f: &dyn Fn(&SweepRow) -> f64| report.rows.iter().map(f).collect::<Vec<f64>>();
    let uncertainty_monotone: [bool; 4] =
        std::array::from_fn(|j| nonincreasing_within(&series(&|r| r.rel_uncertainty[j]), tau));
    let rmse_monotone: [bool; 4] =
        std::array::from_fn(|j| nonincreasing_within(&series(&|r| r.rmse[j]), tau));
    Ok(RequirementVerdict {
        pass: uncertainty_monotone.iter().all(|&b| b),
        uncertainty_monotone,
        rmse_monotone,
        tau,
        snr_levels: report.rows.iter().map(|r| r.snr).collect(),
    })
}

pub const SWEEP_CSV_HEADER: &str =
    "snr,param,rmse,rel_uncertainty,excluded,recon_rmse,n_voxels,mode,config_hash";

/// One line per SNR level and parameter.
pub fn sweep_csv(report: &SweepReport) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    let mode = match report.mode {
        SweepMode::SingleNet => "single-net",
        SweepMode::PerSnrTraining => "per-snr-training",
    };
    for r in &report.rows {
        for p in Param::ALL {
            let j = p.index();
            let _ = writeln!(
                out,
                "{},{},{:e},{:e},{},{:e},{},{},{}",
                r.snr,
                p.name(),
                r.rmse[j],
                r.rel_uncertainty[j],
                r.excluded[j],
                r.recon_rmse,
                r.n_voxels,
                mode,
                report.config_hash
            );
        }
    }
    out
}
