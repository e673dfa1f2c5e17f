// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use super::AcceleratorConfig;
use crate::error::Result;
use crate::quant::NetDims;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub n_pe: usize,
    pub dsp_used: usize,
    /// Input signals held by the I/O manager.
    pub voxel_words: usize,
    /// Packed weights, all `N` copies.
    pub weight_words: usize,
    /// Two layer buffers of `n_b` words per in-flight voxel.
    pub cache_words: usize,
    pub bram_words_used: usize,
    pub bram_words_capacity: usize,
    pub over_capacity: bool,
    /// Input plus output bus width in bits.
    pub io_fixed: usize,
}

pub fn estimate_resources(dims: &NetDims, cfg: &AcceleratorConfig) -> Result<ResourceReport> {
    cfg.check_dims(dims)?;
    let voxel_words = cfg.io_voxel_capacity * dims.n_b;
    let weight_words = dims.total_words();
    let cache_words = 2 * dims.n_b * cfg.batch_size;
    let used = voxel_words + weight_words + cache_words;
    Ok(ResourceReport {
        n_pe: cfg.n_pe,
        dsp_used: cfg.n_pe * cfg.dsp_per_pe,
        voxel_words,
        weight_words,
        cache_words,
        bram_words_used: used,
        bram_words_capacity: cfg.bram_words,
        over_capacity: used > cfg.bram_words,
        io_fixed: 2 * cfg.io_bus_bits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn voxel_storage_example() {
        let r = estimate_resources(
            &NetDims::uniform(104, 4, 94, 94),
            &AcceleratorConfig::default(),
        )
        .unwrap();
        assert_eq!(r.voxel_words, 2_080_000);
        assert_eq!(r.dsp_used, 1024);
        assert!(!r.over_capacity);
    }

    #[test]
    fn overflow_flagged() {
        let cfg = AcceleratorConfig {
            bram_words: 1000,
            ..AcceleratorConfig::default()
        };
        assert!(
            estimate_resources(&NetDims::uniform(104, 4, 94, 94), &cfg)
                .unwrap()
                .over_capacity
        );
    }
}
