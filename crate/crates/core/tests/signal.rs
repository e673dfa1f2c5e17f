// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

use proptest::prelude::*;
use uivim::ivim::{
    forward_signal, generate_dataset, generate_dataset_with, read_ivds, signal_gradient,
    write_ivds, BValueSchedule, NoiseSpec, Normalization, ParamRanges,
};
use uivim::{IvimParams, Param};

fn params() -> impl Strategy<Value = IvimParams> {
    let r = ParamRanges::default();
    (
        r.d.min..r.d.max,
        r.dstar.min..r.dstar.max,
        r.f.min..r.f.max,
        r.s0.min..r.s0.max,
    )
        .prop_map(|(d, ds, f, s0)| IvimParams::new(d, ds, f, s0))
}

proptest! {
    #[test]
    fn signal_decays_with_b(p in params(), b in 0.0..999.0f64, db in 0.5..500.0f64) {
        let s1 = forward_signal(&p, b).unwrap();
        let s2 = forward_signal(&p, b + db).unwrap();
        prop_assert!(s2 < s1);
        prop_assert!(s1 > 0.0 && s1 <= p.s0);
    }

    #[test]
    fn gradient_matches_central_differences(p in params(), b in 1.0..1000.0f64) {
        let g = signal_gradient(&p, b).unwrap();
        let a = p.to_array();
        for k in 0..4 {
            let h = 1e-6 * a[k];
            let (mut up, mut dn) = (a, a);
            up[k] += h;
            dn[k] -= h;
            let num = (forward_signal(&IvimParams::from_array(up), b).unwrap()
                - forward_signal(&IvimParams::from_array(dn), b).unwrap()) / (2.0 * h);
            prop_assert!((g[k] - num).abs() <= 1e-6 * g[k].abs().max(1e-3), "{k}: {} vs {num}", g[k]);
        }
    }
}

#[test]
fn negative_b_is_rejected() {
    let p = IvimParams::new(0.001, 0.05, 0.3, 1.0);
    assert!(forward_signal(&p, -1.0).is_err());
    assert!(signal_gradient(&p, f64::NAN).is_err());
}

#[test]
fn clean_normalized_signals_follow_the_model() {
    let sched = BValueSchedule::default();
    let ds = generate_dataset_with(
        &ParamRanges::default(),
        &sched,
        50,
        NoiseSpec::noiseless(4),
        Normalization::Clean,
    )
    .unwrap();
    for i in 0..ds.n_voxels() {
        let t = ds.truth[i];
        for (k, &b) in sched.values().iter().enumerate() {
            let want = forward_signal(&t, b).unwrap() / t.s0;
            assert!((ds.signal(i)[k] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn truth_lies_in_ranges_and_b0_is_one() {
    let r = ParamRanges::default();
    let ds = generate_dataset(
        &r,
        &BValueSchedule::default(),
        500,
        NoiseSpec::new(30.0, 1).unwrap(),
    )
    .unwrap();
    for (i, t) in ds.truth.iter().enumerate() {
        for p in Param::ALL {
            assert!(r.get(p).contains(t.get(p)), "voxel {i} {}", p.name());
        }
        assert_eq!(ds.signal(i)[0], 1.0);
    }
}

#[test]
fn noise_level_matches_snr() {
    // residual std at the b-values after normalization, measured against the
    // clean curve; sigma = 1 / SNR relative to S0
    let sched = BValueSchedule::new(vec![0.0, 1000.0, 1000.0, 1000.0]).unwrap();
    let r = ParamRanges::default();
    let clean = generate_dataset_with(
        &r,
        &sched,
        4000,
        NoiseSpec::noiseless(9),
        Normalization::Clean,
    )
    .unwrap();
    let noisy = generate_dataset_with(
        &r,
        &sched,
        4000,
        NoiseSpec::new(5.0, 9).unwrap(),
        Normalization::Clean,
    )
    .unwrap();
    let mut ss = 0.0;
    let mut n = 0.0;
    for i in 0..4000 {
        for k in 1..4 {
            let e = noisy.signal(i)[k] - clean.signal(i)[k];
            ss += e * e;
            n += 1.0;
        }
    }
    let std = (ss / n).sqrt();
    assert!((std - 0.2).abs() < 0.01, "measured {std}");
}

#[test]
fn prefix_stable_and_seeded() {
    let r = ParamRanges::default();
    let s = BValueSchedule::default();
    let a = generate_dataset(&r, &s, 100, NoiseSpec::new(15.0, 3).unwrap()).unwrap();
    let b = generate_dataset(&r, &s, 300, NoiseSpec::new(15.0, 3).unwrap()).unwrap();
    let c = generate_dataset(&r, &s, 100, NoiseSpec::new(15.0, 4).unwrap()).unwrap();
    assert_eq!(a.signals[..], b.signals[..a.signals.len()]);
    assert_ne!(a.signals, c.signals);
}

#[test]
fn ivds_file_round_trip() {
    let ds = generate_dataset(
        &ParamRanges::default(),
        &BValueSchedule::default(),
        64,
        NoiseSpec::new(20.0, 2).unwrap(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ivds");
    std::fs::write(&path, write_ivds(&ds).unwrap()).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = read_ivds(&bytes).unwrap();
    assert_eq!(back.n_voxels(), 64);
    assert_eq!(back.schedule, ds.schedule);
    assert_eq!(write_ivds(&back).unwrap(), bytes);
    for (a, b) in back.signals.iter().zip(&ds.signals) {
        assert_eq!(*a, *b as f32 as f64);
    }
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(read_ivds(&bad).is_err());
    assert!(read_ivds(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn schedule_without_b0_is_rejected() {
    assert!(BValueSchedule::new(vec![10.0, 100.0]).is_err());
    assert!(BValueSchedule::new(vec![0.0, -5.0]).is_err());
}
