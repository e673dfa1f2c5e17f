// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

//! Fixed-point inference and the mask-zero-skipping weight store.
//!
//! Weights attached to channels a mask drops are never used by that sample,
//! so each sample keeps only its surviving rows and columns. Every sample
//! needs its own copy, so the store holds `N` copies per sub-network.

mod accuracy;
mod equalize;
mod fixed;
pub(crate) mod pack;

pub use accuracy::{quantization_accuracy, QuantAccuracy};
pub use equalize::equalize_ranges;
pub use fixed::{
    dequantize, dot_acc, finish_acc, fixed_mul_acc, quantize, quantize_slice, relu,
    FixedPointFormat, FRAC_BITS, MAX_VALUE, MIN_VALUE, SCALE,
};
pub use pack::{
    pack_weights, quantized_forward, quantized_logits, read_uivq, unpack_dense, write_uivq,
    DenseSample, NetDims, PackedLayer, PackedSample, PackedSubnet, PackedWeightStore, UIVQ_MAGIC,
    UIVQ_VERSION,
};
