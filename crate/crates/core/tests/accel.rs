// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

use uivim::accel::{
    count_cycles, estimate_resources, estimate_timing, pe_sweep, pe_sweep_csv, AcceleratorConfig,
    Schedule,
};
use uivim::quant::NetDims;

fn reference_dims() -> NetDims {
    NetDims::uniform(104, 4, 94, 94)
}

#[test]
fn io_store_holds_twenty_thousand_voxels() {
    let r = estimate_resources(&reference_dims(), &AcceleratorConfig::default()).unwrap();
    assert_eq!(r.voxel_words, 2_080_000);
    assert_eq!(r.io_fixed, 128);
    assert!(!r.over_capacity);
}

#[test]
fn more_pes_never_slow_a_batch_down() {
    let rows = pe_sweep(
        &reference_dims(),
        &AcceleratorConfig::default(),
        Schedule::BatchLevel,
        &[1, 2, 4, 8, 16, 32, 64],
    )
    .unwrap();
    for w in rows.windows(2) {
        assert!(w[1].total_cycles <= w[0].total_cycles);
        assert_eq!(w[1].dsp_used, 2 * w[0].dsp_used);
        assert_eq!(w[1].bram_words_used, w[0].bram_words_used);
    }
    // one PE against two: the output neurons split in half
    let ratio = rows[0].total_cycles as f64 / rows[1].total_cycles as f64;
    assert!((ratio - 2.0).abs() < 0.05, "{ratio}");
    let csv = pe_sweep_csv(&rows);
    assert_eq!(csv.lines().count(), rows.len() + 1);
}

#[test]
fn sampling_level_costs_more_cycles_and_loads() {
    let cfg = AcceleratorConfig::default();
    let b = estimate_timing(&reference_dims(), &cfg, Schedule::BatchLevel).unwrap();
    let s = estimate_timing(&reference_dims(), &cfg, Schedule::SamplingLevel).unwrap();
    assert_eq!(s.weight_loads, 64 * b.weight_loads);
    assert!(s.total_cycles > b.total_cycles);
    assert!(s.stall_cycles == 64 * b.stall_cycles);
}

#[test]
fn event_count_splits_into_compute_and_stall() {
    let cfg = AcceleratorConfig::default();
    let c = count_cycles(&reference_dims(), &cfg, Schedule::BatchLevel).unwrap();
    let t = estimate_timing(&reference_dims(), &cfg, Schedule::BatchLevel).unwrap();
    assert_eq!(c.total(), c.compute_cycles + c.stall_cycles);
    assert_eq!(c.total(), t.event_driven_cycles);
    assert_eq!(c.weight_loads, 4);
}

#[test]
fn oversized_voxels_and_memory_are_reported() {
    let cfg = AcceleratorConfig::default();
    assert!(estimate_timing(
        &NetDims::uniform(129, 4, 100, 100),
        &cfg,
        Schedule::BatchLevel
    )
    .is_err());
    let tiny = AcceleratorConfig {
        bram_words: 1000,
        ..cfg
    };
    assert!(
        estimate_resources(&reference_dims(), &tiny)
            .unwrap()
            .over_capacity
    );
}
