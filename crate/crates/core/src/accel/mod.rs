// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

//! Functional and timing model of the inference accelerator.
//!
//! The array has `n_pe` processing elements. Each PE owns one processing unit
//! (PU): `mult_per_pu` parallel multipliers feeding a pipelined adder tree of
//! depth `L = log2(mult_per_pu)` and one accumulate stage. Output neurons of a
//! layer are dealt to PEs round-robin; layers and sub-networks run one after
//! another.

mod functional;
mod resources;
mod timing;

pub use functional::{simulate_functional, verify_against_reference, FunctionalRun};
pub use resources::{estimate_resources, ResourceReport};
pub use timing::{
    count_cycles, count_weight_loads, estimate_timing, pe_sweep, pe_sweep_csv, pu_latency,
    simulate_dot_product, timing_csv, CycleCount, LayerTiming, PeSweepRow, TimingReport,
    REFERENCE_MS_PER_BATCH,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::NetDims;

/// Controller ordering of work within one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// For each sample: load its weights once, then run every voxel.
    #[default]
    BatchLevel,
    /// For each voxel and sample: load weights, run that voxel.
    SamplingLevel,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::BatchLevel => "batch-level",
            Schedule::SamplingLevel => "sampling-level",
        }
    }
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch-level" => Ok(Schedule::BatchLevel),
            "sampling-level" => Ok(Schedule::SamplingLevel),
            _ => Err(Error::invalid(format!(
                "unknown schedule `{s}` (batch-level | sampling-level)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcceleratorConfig {
    pub n_pe: usize,
    pub mult_per_pu: usize,
    /// Multiplier pipeline registers.
    pub r_m: u64,
    /// Registers per adder stage.
    pub r_a: u64,
    pub clock_hz: f64,
    pub batch_size: usize,
    pub n_samples: usize,
    pub max_voxel_width: usize,
    /// On-chip memory in 16-bit words.
    pub bram_words: usize,
    pub dsp_per_pe: usize,
    /// Voxels the I/O manager holds on chip.
    pub io_voxel_capacity: usize,
    /// Words per cycle the weight loader moves.
    pub loader_width: usize,
    pub io_bus_bits: usize,
    /// Stream inputs through the I/O manager in capacity-sized chunks
    /// instead of failing when they do not fit.
    pub io_batching: bool,
}

impl Default for AcceleratorConfig {
    fn default() -> Self {
        Self {
            n_pe: 32,
            mult_per_pu: 32,
            r_m: 3,
            r_a: 2,
            clock_hz: 250e6,
            batch_size: 64,
            n_samples: 4,
            max_voxel_width: 128,
            bram_words: 2688 * 2048,
            dsp_per_pe: 32,
            io_voxel_capacity: 20_000,
            loader_width: 1024,
            io_bus_bits: 64,
            io_batching: true,
        }
    }
}

impl AcceleratorConfig {
    pub fn tree_depth(&self) -> u64 {
        self.mult_per_pu.trailing_zeros() as u64
    }

    /// Cycles a chunk spends in the PU: multiplier, tree, accumulate.
    pub fn pipeline_depth(&self) -> u64 {
        self.r_m + self.r_a * (self.tree_depth() + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_pe", self.n_pe),
            ("mult_per_pu", self.mult_per_pu),
            ("batch_size", self.batch_size),
            ("n_samples", self.n_samples),
            ("max_voxel_width", self.max_voxel_width),
            ("bram_words", self.bram_words),
            ("dsp_per_pe", self.dsp_per_pe),
            ("io_voxel_capacity", self.io_voxel_capacity),
            ("loader_width", self.loader_width),
            ("io_bus_bits", self.io_bus_bits),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!(
                    "accelerator {name} must be positive"
                )));
            }
        }
        if self.r_m == 0 || self.r_a == 0 {
            return Err(Error::Config(
                "accelerator r_m and r_a must be positive".into(),
            ));
        }
        if !self.mult_per_pu.is_power_of_two() {
            return Err(Error::Config(format!(
                "mult_per_pu {} is not a power of two",
                self.mult_per_pu
            )));
        }
        if !(self.clock_hz.is_finite() && self.clock_hz > 0.0) {
            return Err(Error::Config("clock_hz must be positive".into()));
        }
        Ok(())
    }

    /// Validate and check that a network fits.
    pub fn check_dims(&self, dims: &NetDims) -> Result<()> {
        self.validate()?;
        if dims.n_b > self.max_voxel_width {
            return Err(Error::CapacityOverflow(format!(
                "{} b-values exceed the {}-element PE width",
                dims.n_b, self.max_voxel_width
            )));
        }
        if dims.n_samples() != self.n_samples {
            return Err(Error::invalid(format!(
                "accelerator configured for N = {} but the network has N = {}",
                self.n_samples,
                dims.n_samples()
            )));
        }
        Ok(())
    }
}

/// One controller action.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) enum Step {
    Load {
        sample: usize,
    },
    Pass {
        sample: usize,
        subnet: usize,
        layer: usize,
        voxels: std::ops::Range<usize>,
    },
}

/// Controller program for one batch of `n_voxels`.
pub(crate) fn plan(schedule: Schedule, n_voxels: usize, n_samples: usize) -> Vec<Step> {
    let mut steps = Vec::new();
    let run = |sample: usize, voxels: std::ops::Range<usize>, steps: &mut Vec<Step>| {
        steps.push(Step::Load { sample });
        for subnet in 0..4 {
            for layer in 0..3 {
                steps.push(Step::Pass {
                    sample,
                    subnet,
                    layer,
                    voxels: voxels.clone(),
                });
            }
        }
    };
    match schedule {
        Schedule::BatchLevel => {
            for s in 0..n_samples {
                run(s, 0..n_voxels, &mut steps);
            }
        }
        Schedule::SamplingLevel => {
            for v in 0..n_voxels {
                for s in 0..n_samples {
                    run(s, v..v + 1, &mut steps);
                }
            }
        }
    }
    steps
}

pub const LAYER_NAMES: [&str; 3] = ["hidden1", "hidden2", "encoder"];
