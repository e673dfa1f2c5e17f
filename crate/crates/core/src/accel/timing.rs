// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{estimate_resources, plan, AcceleratorConfig, Schedule, Step, LAYER_NAMES};
use crate::error::{Error, Result};
use crate::ivim::Param;
use crate::quant::NetDims;

/// Published latency of the hardware build, for side-by-side printing.
pub const REFERENCE_MS_PER_BATCH: f64 = 0.28;

/// Latency of one PU computing a dot product of length `n_b`:
/// `R_M + R_A (L + 1) + ceil(n_b / mult_per_pu) - 1`.
pub fn pu_latency(cfg: &AcceleratorConfig, n_b: usize) -> Result<u64> {
    cfg.validate()?;
    if n_b == 0 {
        return Err(Error::invalid("dot product length must be positive"));
    }
    if n_b > cfg.max_voxel_width {
        return Err(Error::CapacityOverflow(format!(
            "{n_b} elements exceed the {}-element PE width",
            cfg.max_voxel_width
        )));
    }
    Ok(cfg.pipeline_depth() + n_b.div_ceil(cfg.mult_per_pu) as u64 - 1)
}

/// Cycle-stepped PU: a shift register of `depth` stages carrying chunk
/// tokens. `true` marks the last chunk of a dot product.
struct PuPipeline {
    stages: Vec<Option<bool>>,
    head: usize,
}

impl PuPipeline {
    fn new(depth: u64) -> Self {
        Self {
            stages: vec![None; depth as usize],
            head: 0,
        }
    }

    /// Advance one clock: `issue` enters stage 0 and whatever reaches the
    /// last stage this cycle retires.
    fn step(&mut self, issue: Option<bool>) -> Option<bool> {
        let d = self.stages.len();
        self.head = (self.head + d - 1) % d;
        self.stages[self.head] = issue;
        let tail = (self.head + d - 1) % d;
        self.stages[tail].take()
    }
}

/// Run `n_dots` dot products of `chunks` chunks each through one PU and
/// return the cycle on which the last result retires.
fn run_pu(depth: u64, chunks: usize, n_dots: usize) -> u64 {
    if n_dots == 0 {
        return 0;
    }
    let mut pu = PuPipeline::new(depth);
    let total = chunks * n_dots;
    let (mut issued, mut retired, mut cycle) = (0usize, 0usize, 0u64);
    while retired < n_dots {
        let issue = (issued < total).then(|| {
            issued += 1;
            issued % chunks == 0
        });
        cycle += 1;
        if pu.step(issue) == Some(true) {
            retired += 1;
        }
    }
    cycle
}

/// Event-driven latency of a single dot product of length `n_b`.
pub fn simulate_dot_product(cfg: &AcceleratorConfig, n_b: usize) -> Result<u64> {
    pu_latency(cfg, n_b)?;
    Ok(run_pu(
        cfg.pipeline_depth(),
        n_b.div_ceil(cfg.mult_per_pu),
        1,
    ))
}

/// Weight loads per batch implied by the schedule.
pub fn count_weight_loads(cfg: &AcceleratorConfig, schedule: Schedule) -> u64 {
    match schedule {
        Schedule::BatchLevel => cfg.n_samples as u64,
        Schedule::SamplingLevel => (cfg.n_samples * cfg.batch_size) as u64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTiming {
    pub subnet: String,
    pub layer: String,
    pub passes: u64,
    pub fill_cycles: u64,
    pub steady_cycles: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub schedule: Schedule,
    pub n_pe: usize,
    pub batch_size: usize,
    pub n_samples: usize,
    pub layers: Vec<LayerTiming>,
    pub fill_cycles: u64,
    pub steady_cycles: u64,
    /// Cycles spent moving weights in from off-chip.
    pub stall_cycles: u64,
    pub total_cycles: u64,
    pub wall_time_ms: f64,
    pub weight_loads: u64,
    pub event_driven_cycles: u64,
    /// `|event - analytic| / analytic`.
    pub model_gap: f64,
    pub reference_ms_per_batch: f64,
}

fn load_stall(cfg: &AcceleratorConfig, words: usize) -> u64 {
    words.div_ceil(cfg.loader_width) as u64
}

/// Event-driven count of one full batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleCount {
    pub compute_cycles: u64,
    pub stall_cycles: u64,
    pub weight_loads: u64,
}

impl CycleCount {
    pub fn total(&self) -> u64 {
        self.compute_cycles + self.stall_cycles
    }
}

/// Step the controller program through cycle-level PU pipelines. Each pass
/// ends when the slowest PE retires its last result plus one write-back
/// cycle into the layer cache; loads stream `loader_width` words a cycle.
pub fn count_cycles(
    dims: &NetDims,
    cfg: &AcceleratorConfig,
    schedule: Schedule,
) -> Result<CycleCount> {
    cfg.check_dims(dims)?;
    let depth = cfg.pipeline_depth();
    let mut out = CycleCount {
        compute_cycles: 0,
        stall_cycles: 0,
        weight_loads: 0,
    };
    for step in plan(schedule, cfg.batch_size, cfg.n_samples) {
        match step {
            Step::Load { sample } => {
                out.weight_loads += 1;
                let mut left = dims.sample_words(sample);
                while left > 0 {
                    left = left.saturating_sub(cfg.loader_width);
                    out.stall_cycles += 1;
                }
            }
            Step::Pass {
                sample,
                subnet,
                layer,
                voxels,
            } => {
                let (c_out, c_in) = dims.layer_shapes(subnet, sample)[layer];
                let chunks = c_in.div_ceil(cfg.mult_per_pu);
                // PEs differ only in how many neurons they get per voxel
                let most = c_out.div_ceil(cfg.n_pe);
                let slowest = run_pu(depth, chunks, most * voxels.len());
                out.compute_cycles += slowest + 1;
            }
        }
    }
    Ok(out)
}

/// Closed-form timing of one batch, cross-checked against [`count_cycles`].
pub fn estimate_timing(
    dims: &NetDims,
    cfg: &AcceleratorConfig,
    schedule: Schedule,
) -> Result<TimingReport> {
    cfg.check_dims(dims)?;
    let mut layers: Vec<LayerTiming> = Vec::with_capacity(12);
    for p in Param::ALL {
        for l in LAYER_NAMES {
            layers.push(LayerTiming {
                subnet: p.name().into(),
                layer: l.into(),
                passes: 0,
                fill_cycles: 0,
                steady_cycles: 0,
            });
        }
    }
    let mut stall = 0;
    let mut loads = 0;
    for step in plan(schedule, cfg.batch_size, cfg.n_samples) {
        match step {
            Step::Load { sample } => {
                loads += 1;
                stall += load_stall(cfg, dims.sample_words(sample));
            }
            Step::Pass {
                sample,
                subnet,
                layer,
                voxels,
            } => {
                let (c_out, c_in) = dims.layer_shapes(subnet, sample)[layer];
                let lt = &mut layers[subnet * 3 + layer];
                lt.passes += 1;
                lt.fill_cycles += pu_latency(cfg, c_in)?;
                lt.steady_cycles += (voxels.len()
                    * c_out.div_ceil(cfg.n_pe)
                    * c_in.div_ceil(cfg.mult_per_pu)) as u64;
            }
        }
    }
    let fill: u64 = layers.iter().map(|l| l.fill_cycles).sum();
    let steady: u64 = layers.iter().map(|l| l.steady_cycles).sum();
    let total = fill + steady + stall;
    let event = count_cycles(dims, cfg, schedule)?.total();
    Ok(TimingReport {
        schedule,
        n_pe: cfg.n_pe,
        batch_size: cfg.batch_size,
        n_samples: cfg.n_samples,
        layers,
        fill_cycles: fill,
        steady_cycles: steady,
        stall_cycles: stall,
        total_cycles: total,
        wall_time_ms: total as f64 / cfg.clock_hz * 1e3,
        weight_loads: loads,
        event_driven_cycles: event,
        model_gap: (event as f64 - total as f64).abs() / total as f64,
        reference_ms_per_batch: REFERENCE_MS_PER_BATCH,
    })
}

pub fn timing_csv(r: &TimingReport) -> String {
    let mut out = String::from("schedule,subnet,layer,passes,fill_cycles,steady_cycles\n");
    for l in &r.layers {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.schedule.name(),
            l.subnet,
            l.layer,
            l.passes,
            l.fill_cycles,
            l.steady_cycles
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeSweepRow {
    pub n_pe: usize,
    pub dsp_used: usize,
    pub bram_words_used: usize,
    pub io_fixed: usize,
    pub total_cycles: u64,
    pub event_driven_cycles: u64,
    pub wall_time_ms: f64,
    pub model_gap: f64,
}

/// Resources and speed as the PE count varies.
pub fn pe_sweep(
    dims: &NetDims,
    base: &AcceleratorConfig,
    schedule: Schedule,
    pes: &[usize],
) -> Result<Vec<PeSweepRow>> {
    pes.iter()
        .map(|&n_pe| {
            let cfg = AcceleratorConfig {
                n_pe,
                ..base.clone()
            };
            let t = estimate_timing(dims, &cfg, schedule)?;
            let r = estimate_resources(dims, &cfg)?;
            Ok(PeSweepRow {
                n_pe,
                dsp_used: r.dsp_used,
                bram_words_used: r.bram_words_used,
                io_fixed: r.io_fixed,
                total_cycles: t.total_cycles,
                event_driven_cycles: t.event_driven_cycles,
                wall_time_ms: t.wall_time_ms,
                model_gap: t.model_gap,
            })
        })
        .collect()
}

pub fn pe_sweep_csv(rows: &[PeSweepRow]) -> String {
    let mut out =
        String::from("n_pe,dsp_used,bram_words_used,io_fixed,total_cycles,event_driven_cycles,wall_time_ms,model_gap\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.6},{:.6}",
            r.n_pe,
            r.dsp_used,
            r.bram_words_used,
            r.io_fixed,
            r.total_cycles,
            r.event_driven_cycles,
            r.wall_time_ms,
            r.model_gap
        );
    }
    out
}
