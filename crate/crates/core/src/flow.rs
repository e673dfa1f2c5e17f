// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

//! End-to-end flow: synthesize data, train, evaluate against the uncertainty
//! requirement, quantize, and simulate the accelerator.
//!
//! Every command validates its inputs before touching the filesystem and
//! writes outputs atomically, so a failed run leaves no partial files.
//!
//! A run is described by one TOML file. Every key is optional:
//!
//! ```toml
//! seed = 0
//! train_snr = 15.0
//! schedule = "batch-level"        # or "sampling-level"
//!
//! [data]
//! b_values = [0, 5, 10, 20, 30, 40, 60, 150, 300, 500, 1000]
//! snr_levels = [5, 15, 20, 30, 50]
//! n_voxels = 10000
//! normalization = "measured"      # or "clean"
//!
//! [ranges]
//! d = { min = 0.0005, max = 0.005 }
//!
//! [training]                      # network::TrainingConfig, minus `seed`
//! drop_rate = 0.1
//!
//! [grid]
//! drop_rates = [0.1, 0.2]
//! n_samples = [4, 8]
//!
//! [eval]
//! n_voxels = 2000
//! tau = 0.05
//!
//! [accelerator]                   # accel::AcceleratorConfig
//! n_pe = 32
//! ```
//!
//! All seeds are derived from the top-level `seed`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accel::{
    count_weight_loads, estimate_resources, estimate_timing, pe_sweep, pe_sweep_csv,
    simulate_functional, timing_csv, verify_against_reference, AcceleratorConfig, PeSweepRow,
    ResourceReport, Schedule, TimingReport,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    check_requirement, snr_sweep, snr_sweep_per_snr_training, sweep_csv, Aggregator,
    RequirementVerdict, SweepOptions, SweepReport, DEFAULT_SNR_LEVELS, DEFAULT_TAU,
};
use crate::format::write_atomic;
use crate::ivim::{
    generate_dataset_with, read_ivds, write_ivds, BValueSchedule, Dataset, NoiseSpec,
    Normalization, ParamRanges,
};
use crate::masks::MaskConfig;
use crate::network::{
    fold_batchnorm, grid_search, read_uivm, train, write_uivm, GridConfig, GridResult,
    TrainingConfig, UIvimNet,
};
use crate::quant::{
    pack_weights, quantization_accuracy, quantize_slice, read_uivq, write_uivq, NetDims,
    PackedWeightStore, QuantAccuracy,
};
use crate::rng::{derive_seed, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub b_values: BValueSchedule,
    pub snr_levels: Vec<f64>,
    pub n_voxels: usize,
    pub normalization: Normalization,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            b_values: BValueSchedule::default(),
            snr_levels: DEFAULT_SNR_LEVELS.to_vec(),
            n_voxels: 10_000,
            normalization: Normalization::Measured,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub snr_levels: Vec<f64>,
    pub n_voxels: usize,
    pub tau: f64,
    pub aggregator: Aggregator,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            snr_levels: DEFAULT_SNR_LEVELS.to_vec(),
            n_voxels: 2000,
            tau: DEFAULT_TAU,
            aggregator: Aggregator::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// SNR of the dataset `train` and `grid` use by default.
    pub train_snr: f64,
    pub schedule: Schedule,
    pub data: DataConfig,
    pub ranges: ParamRanges,
    pub training: TrainingConfig,
    pub grid: GridConfig,
    pub eval: EvalConfig,
    pub accelerator: AcceleratorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            train_snr: 15.0,
            schedule: Schedule::BatchLevel,
            data: DataConfig::default(),
            ranges: ParamRanges::default(),
            training: TrainingConfig::default(),
            grid: GridConfig::default(),
            eval: EvalConfig::default(),
            accelerator: AcceleratorConfig::default(),
        };
        cfg.training.seed = cfg.training_seed();
        cfg
    }
}

/// 1-based line of the first `key =` assignment in `text`, for diagnostics.
fn line_of(text: &str, key: &str) -> Option<usize> {
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| i + 1)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        // seeds come from the top level only
        let raw: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if raw.get("training").and_then(|t| t.get("seed")).is_some() {
            let at = line_of(text, "seed").map_or(String::new(), |l| format!("line {l}: "));
            return Err(Error::Config(format!(
                "{at}training.seed is derived from the top-level `seed`; remove it"
            )));
        }
        cfg.training.seed = cfg.training_seed();
        cfg.validate().map_err(|e| match e {
            Error::Config(msg) => {
                let key = msg
                    .split_whitespace()
                    .find_map(|w| w.strip_prefix('`')?.strip_suffix('`'));
                match key.and_then(|k| line_of(text, k.rsplit('.').next().unwrap_or(k))) {
                    Some(l) => Error::Config(format!("line {l}: {msg}")),
                    None => Error::Config(msg),
                }
            }
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn training_seed(&self) -> u64 {
        derive_seed(self.seed, tag("train"))
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, tag("data"))
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, tag("eval"))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.ranges.validate().map_err(cfg_err)?;
        self.training.validate().map_err(cfg_err)?;
        self.accelerator.validate()?;
        if self.data.n_voxels == 0 {
            return Err(Error::Config("`data.n_voxels` must be positive".into()));
        }
        if self.data.snr_levels.is_empty() || self.data.snr_levels.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config(
                "`data.snr_levels` must be nonempty and positive".into(),
            ));
        }
        if !(self.train_snr > 0.0) {
            return Err(Error::Config("`train_snr` must be positive".into()));
        }
        if self.eval.snr_levels.len() < 2 || self.eval.snr_levels.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config(
                "`eval.snr_levels` needs at least two positive levels".into(),
            ));
        }
        if self.eval.n_voxels == 0 || !(self.eval.tau >= 0.0) {
            return Err(Error::Config(
                "`eval.n_voxels` must be positive and `eval.tau` nonnegative".into(),
            ));
        }
        let n_b = self.data.b_values.len();
        if n_b > self.accelerator.max_voxel_width {
            return Err(Error::Config(format!(
                "`max_voxel_width` {} is smaller than the {n_b} b-values",
                self.accelerator.max_voxel_width
            )));
        }
        if self.accelerator.n_samples != self.training.n_samples {
            return Err(Error::Config(format!(
                "`accelerator.n_samples` {} differs from `training.n_samples` {}",
                self.accelerator.n_samples, self.training.n_samples
            )));
        }
        MaskConfig::new(self.training.n_samples, n_b, self.training.drop_rate, 0)
            .validate()
            .map_err(cfg_err)?;
        Ok(())
    }

    pub fn sweep_options(&self) -> SweepOptions {
        SweepOptions {
            snr_levels: self.eval.snr_levels.clone(),
            n_voxels: self.eval.n_voxels,
            seed: self.eval_seed(),
            aggregator: self.eval.aggregator,
        }
    }
}

/// File name of the dataset at `snr` inside a `gen-data` output directory.
pub fn dataset_file_name(snr: f64) -> String {
    format!("snr_{snr}.ivds")
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    read_ivds(&fs::read(path)?)
}

fn read_model(path: &Path) -> Result<UIvimNet> {
    read_uivm(&fs::read(path)?)
}

fn read_store(path: &Path) -> Result<PackedWeightStore> {
    read_uivq(&fs::read(path)?)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}

pub fn generate_level(cfg: &RunConfig, snr: f64, n_voxels: usize) -> Result<Dataset> {
    let noise = if snr.is_infinite() {
        NoiseSpec::noiseless(derive_seed(cfg.data_seed(), snr.to_bits()))
    } else {
        NoiseSpec::new(snr, derive_seed(cfg.data_seed(), snr.to_bits()))?
    };
    generate_dataset_with(
        &cfg.ranges,
        &cfg.data.b_values,
        n_voxels,
        noise,
        cfg.data.normalization,
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct GenDataSummary {
    pub files: Vec<PathBuf>,
    pub n_voxels: usize,
    pub n_b: usize,
}

/// One IVDS file per configured SNR level.
pub fn cmd_gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<GenDataSummary> {
    cfg.validate()?;
    let mut blobs = Vec::new();
    for &snr in &cfg.data.snr_levels {
        let ds = generate_level(cfg, snr, cfg.data.n_voxels)?;
        blobs.push((out_dir.join(dataset_file_name(snr)), write_ivds(&ds)?));
    }
    ensure_dir(out_dir)?;
    for (path, bytes) in &blobs {
        write_atomic(path, bytes)?;
    }
    Ok(GenDataSummary {
        files: blobs.into_iter().map(|(p, _)| p).collect(),
        n_voxels: cfg.data.n_voxels,
        n_b: cfg.data.b_values.len(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub final_train_loss: f64,
    pub config_hash: String,
}

fn check_data_matches(cfg: &RunConfig, ds: &Dataset) {
    if ds.schedule != cfg.data.b_values {
        log::warn!("dataset b-values differ from the config; using the dataset's");
    }
    if ds.ranges != cfg.ranges {
        log::warn!("dataset parameter ranges differ from the config; using the dataset's");
    }
}

/// Train one network; optionally write the per-epoch loss curve as CSV.
pub fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    out_model: &Path,
    curve_csv: Option<&Path>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let ds = read_dataset(data)?;
    check_data_matches(cfg, &ds);
    let net = UIvimNet::from_config(&ds.schedule, &ds.ranges, &cfg.training)?;
    let out = train(net, &ds, &cfg.training)?;
    let bytes = write_uivm(&out.net)?;
    write_atomic(out_model, &bytes)?;
    if let Some(p) = curve_csv {
        let mut csv = String::from("epoch,train_loss,val_loss\n");
        for e in &out.curve {
            let _ = writeln!(csv, "{},{:e},{:e}", e.epoch, e.train_loss, e.val_loss);
        }
        write_atomic(p, csv.as_bytes())?;
    }
    Ok(TrainSummary {
        epochs_run: out.net.meta.epochs_run,
        best_epoch: out.best_epoch,
        best_val_loss: out.net.meta.best_val_loss,
        final_train_loss: out.final_train_loss,
        config_hash: out.net.meta.config_hash.clone(),
    })
}

/// Split off the last `fraction` of voxels as validation data.
fn holdout(ds: &Dataset, fraction: f64) -> Result<(Dataset, Dataset)> {
    let n = ds.n_voxels();
    let n_val = ((n as f64) * fraction).round().max(1.0) as usize;
    if n_val >= n {
        return Err(Error::invalid(
            "dataset too small to hold out validation voxels",
        ));
    }
    let train: Vec<usize> = (0..n - n_val).collect();
    let val: Vec<usize> = (n - n_val..n).collect();
    Ok((ds.select(&train), ds.select(&val)))
}

/// Grid search; writes the best model and the per-cell table.
pub fn cmd_grid(
    cfg: &RunConfig,
    data: &Path,
    val_data: Option<&Path>,
    out_model: &Path,
    out_csv: &Path,
) -> Result<GridResult> {
    cfg.validate()?;
    let ds = read_dataset(data)?;
    check_data_matches(cfg, &ds);
    let (train_ds, val_ds) = match val_data {
        Some(p) => (ds, read_dataset(p)?),
        None => holdout(&ds, cfg.training.val_fraction.max(0.1))?,
    };
    let result = grid_search(&train_ds, &val_ds, &cfg.training, &cfg.grid)?;
    let best = result
        .best_net
        .as_ref()
        .ok_or_else(|| Error::Infeasible("every grid cell failed".into()))?;
    let model = write_uivm(best)?;
    write_atomic(out_csv, result.to_csv().as_bytes())?;
    write_atomic(out_model, &model)?;
    Ok(result)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalOutput {
    pub report: SweepReport,
    pub verdict: RequirementVerdict,
}

/// SNR sweep plus requirement check. With `per_snr_training`, a fresh network
/// is trained at each level on `data.n_voxels` voxels instead of evaluating
/// `model`.
pub fn cmd_eval(
    cfg: &RunConfig,
    model: Option<&Path>,
    per_snr_training: bool,
    out_csv: &Path,
    out_json: &Path,
) -> Result<EvalOutput> {
    cfg.validate()?;
    let opts = cfg.sweep_options();
    let report = if per_snr_training {
        snr_sweep_per_snr_training(
            &cfg.ranges,
            &cfg.data.b_values,
            &cfg.training,
            cfg.data.n_voxels,
            &opts,
        )?
    } else {
        let path = model.ok_or_else(|| {
            Error::invalid("a model file is required unless per-SNR training is on")
        })?;
        let net = read_model(path)?;
        snr_sweep(&net, &net.ranges(), &opts)?
    };
    let verdict = check_requirement(&report, cfg.eval.tau)?;
    let out = EvalOutput { report, verdict };
    let json = to_json(&out)?;
    write_atomic(out_csv, sweep_csv(&out.report).as_bytes())?;
    write_atomic(out_json, &json)?;
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct QuantizeSummary {
    pub total_words: usize,
    pub dense_words: usize,
    pub saturated_weights: usize,
    pub accuracy: Option<QuantAccuracy>,
}

/// Fold batch norm, quantize, and pack. When `check_data` is given the
/// fixed-point predictions are compared against the float network on it.
pub fn cmd_quantize(
    cfg: &RunConfig,
    model: &Path,
    out_store: &Path,
    check_data: Option<&Path>,
) -> Result<QuantizeSummary> {
    cfg.validate()?;
    let net = read_model(model)?;
    let folded = fold_batchnorm(&net)?;
    let store = pack_weights(&folded)?;
    let accuracy = match check_data {
        Some(p) => Some(quantization_accuracy(
            &folded,
            &store,
            &read_dataset(p)?,
            0.01,
        )?),
        None => None,
    };
    let n_b = store.n_b;
    let dense_words = 4 * store.n_samples() * (2 * (n_b * n_b + n_b) + n_b + 1);
    write_atomic(out_store, &write_uivq(&store)?)?;
    Ok(QuantizeSummary {
        total_words: store.total_words(),
        dense_words,
        saturated_weights: store.saturated_weights,
        accuracy,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulateSummary {
    pub n_voxels: usize,
    pub batches: usize,
    pub weight_loads: u64,
    pub weight_loads_per_batch: u64,
    pub timing: TimingReport,
    pub resources: ResourceReport,
    pub pe_sweep: Option<Vec<PeSweepRow>>,
}

/// Run the functional simulator over a dataset, verify it against the
/// reference fixed-point forward, then write timing, resources, per-voxel
/// outputs and (optionally) a PE-count sweep into `out_dir`.
pub fn cmd_simulate(
    cfg: &RunConfig,
    store_path: &Path,
    data: &Path,
    schedule: Option<Schedule>,
    pes: Option<&[usize]>,
    out_dir: &Path,
) -> Result<SimulateSummary> {
    cfg.validate()?;
    let schedule = schedule.unwrap_or(cfg.schedule);
    let store = read_store(store_path)?;
    let ds = read_dataset(data)?;
    if ds.n_b() != store.n_b {
        return Err(Error::DimensionMismatch {
            expected: store.n_b,
            got: ds.n_b(),
        });
    }
    let acc = &cfg.accelerator;
    let dims = store.dims();
    acc.check_dims(&dims)?;
    let voxels = quantize_slice(&ds.signals);
    let run = simulate_functional(&store, &voxels, acc, schedule)?;
    verify_against_reference(&store, &voxels, &run)?;
    let timing = estimate_timing(&dims, acc, schedule)?;
    let resources = estimate_resources(&dims, acc)?;
    let sweep = pes.map(|p| pe_sweep(&dims, acc, schedule, p)).transpose()?;

    let mut outputs = String::from("voxel,sample,D,Dstar,f,S0\n");
    for (i, p) in run.params.iter().enumerate() {
        let _ = writeln!(
            outputs,
            "{},{},{:e},{:e},{:e},{:e}",
            i / run.n_samples,
            i % run.n_samples,
            p.d,
            p.dstar,
            p.f,
            p.s0
        );
    }
    let res_csv = format!(
        "n_pe,dsp_used,voxel_words,weight_words,cache_words,bram_words_used,bram_words_capacity,over_capacity,io_fixed\n{},{},{},{},{},{},{},{},{}\n",
        resources.n_pe,
        resources.dsp_used,
        resources.voxel_words,
        resources.weight_words,
        resources.cache_words,
        resources.bram_words_used,
        resources.bram_words_capacity,
        resources.over_capacity,
        resources.io_fixed
    );
    let summary = SimulateSummary {
        n_voxels: ds.n_voxels(),
        batches: run.batches,
        weight_loads: run.weight_loads,
        weight_loads_per_batch: count_weight_loads(acc, schedule),
        timing,
        resources,
        pe_sweep: sweep,
    };
    let mut files = vec![
        ("timing.json", to_json(&summary.timing)?),
        ("timing.csv", timing_csv(&summary.timing).into_bytes()),
        ("resources.json", to_json(&summary.resources)?),
        ("resources.csv", res_csv.into_bytes()),
        ("outputs.csv", outputs.into_bytes()),
        ("summary.json", to_json(&summary)?),
    ];
    if let Some(rows) = &summary.pe_sweep {
        files.push(("pe_sweep.csv", pe_sweep_csv(rows).into_bytes()));
    }
    ensure_dir(out_dir)?;
    for (name, bytes) in files {
        write_atomic(&out_dir.join(name), &bytes)?;
    }
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct HardwareReport {
    pub dims: NetDims,
    pub batch_level: TimingReport,
    pub sampling_level: TimingReport,
    pub load_ratio: f64,
    pub resources: ResourceReport,
    pub reference_ms_per_batch: f64,
}

/// Analytic report. Uses the packed store's dimensions when given, otherwise
/// the config's schedule, sample count and drop rate.
pub fn cmd_report(
    cfg: &RunConfig,
    store: Option<&Path>,
    out_json: Option<&Path>,
) -> Result<HardwareReport> {
    cfg.validate()?;
    let dims = match store {
        Some(p) => read_store(p)?.dims(),
        None => {
            let n_b = cfg.data.b_values.len();
            let k = MaskConfig::new(cfg.training.n_samples, n_b, cfg.training.drop_rate, 0)
                .keep_count();
            NetDims::uniform(n_b, cfg.training.n_samples, k, k)
        }
    };
    let acc = &cfg.accelerator;
    let batch_level = estimate_timing(&dims, acc, Schedule::BatchLevel)?;
    let sampling_level = estimate_timing(&dims, acc, Schedule::SamplingLevel)?;
    let report = HardwareReport {
        load_ratio: sampling_level.weight_loads as f64 / batch_level.weight_loads as f64,
        resources: estimate_resources(&dims, acc)?,
        reference_ms_per_batch: batch_level.reference_ms_per_batch,
        dims,
        batch_level,
        sampling_level,
    };
    if let Some(p) = out_json {
        write_atomic(p, &to_json(&report)?)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c.training.seed, RunConfig::default().training_seed());
        assert_eq!(c.data.snr_levels, vec![5.0, 15.0, 20.0, 30.0, 50.0]);
        assert_eq!(c.data.n_voxels, 10_000);
    }

    #[test]
    fn diagnostics_carry_lines() {
        let e = RunConfig::from_toml("seed = 1\n[data]\nb_values = [5, 10]\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 3"), "{e}");
        let e = RunConfig::from_toml("seed = 1\n\n[training]\nbogus = 3\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 4"), "{e}");
        let e = RunConfig::from_toml("[training]\nseed = 3\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 2"), "{e}");
        let e = RunConfig::from_toml("[accelerator]\nn_samples = 8\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("n_samples"), "{e}");
    }

    #[test]
    fn report_defaults() {
        let r = cmd_report(&RunConfig::default(), None, None).unwrap();
        assert_eq!(r.batch_level.weight_loads, 4);
        assert_eq!(r.sampling_level.weight_loads, 256);
        assert_eq!(r.load_ratio, 64.0);
    }
}
