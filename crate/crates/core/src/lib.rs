// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

//! Mask-based Bayesian IVIM parameter estimation and a model of its
//! fixed-point inference accelerator.
//!
//! The crate covers the whole co-design loop:
//!
//! * [`ivim`] - the bi-exponential signal model and synthetic datasets,
//! * [`masks`] - fixed binary masks that replace dropout,
//! * [`network`] - the four-head estimator, its training and uncertainty,
//! * [`evaluation`] - RMSE / relative uncertainty sweeps over SNR,
//! * [`quant`] - Q3.12 arithmetic and mask-zero-skipping weight packing,
//! * [`accel`] - functional and timing simulation of the accelerator,
//! * [`flow`] - the declarative run config and end-to-end commands.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise. Results are
//! identical either way.

// `!(x > 0.0)` rejects NaN on purpose; index loops mirror the math.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::type_complexity
)]

pub mod accel;
pub mod error;
pub mod evaluation;
pub mod flow;
pub mod format;
pub mod ivim;
pub mod masks;
pub mod network;
pub mod par;
pub mod quant;
pub mod rng;

pub use error::{Error, Result};
pub use ivim::{BValueSchedule, Dataset, IvimParams, NoiseSpec, Param, ParamRanges};
pub use masks::{MaskConfig, MaskSet};
pub use network::{PredictionWithUncertainty, TrainingConfig, UIvimNet};
