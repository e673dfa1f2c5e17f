// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

use uivim::ivim::{generate_dataset, BValueSchedule, NoiseSpec, ParamRanges};
use uivim::network::{fold_batchnorm, read_uivm, train, write_uivm};
use uivim::quant::{pack_weights, quantization_accuracy, read_uivq, write_uivq};
use uivim::{TrainingConfig, UIvimNet};

fn trained(seed: u64) -> UIvimNet {
    let r = ParamRanges::default();
    let s = BValueSchedule::default();
    let ds = generate_dataset(&r, &s, 3000, NoiseSpec::new(15.0, seed).unwrap()).unwrap();
    let cfg = TrainingConfig {
        max_epochs: 6,
        steps_per_epoch: Some(150),
        seed,
        ..TrainingConfig::default()
    };
    let net = UIvimNet::from_config(&s, &r, &cfg).unwrap();
    train(net, &ds, &cfg).unwrap().net
}

#[test]
fn fixed_point_predictions_stay_within_one_percent() {
    for seed in [1, 2] {
        let net = fold_batchnorm(&trained(seed)).unwrap();
        let store = pack_weights(&net).unwrap();
        let check = generate_dataset(
            &ParamRanges::default(),
            &BValueSchedule::default(),
            1000,
            NoiseSpec::new(20.0, 77).unwrap(),
        )
        .unwrap();
        let acc = quantization_accuracy(&net, &store, &check, 0.01).unwrap();
        assert!(acc.within_tolerance >= 0.99, "seed {seed}: {acc:?}");
    }
}

#[test]
fn folding_preserves_predictions() {
    let net = trained(3);
    let folded = fold_batchnorm(&net).unwrap();
    assert!(folded.is_folded());
    let x: Vec<f64> = [
        1.0, 0.97, 0.95, 0.92, 0.9, 0.88, 0.84, 0.72, 0.6, 0.45, 0.22,
    ]
    .to_vec();
    for s in 0..4 {
        let a = net.forward(&x, s).unwrap().to_array();
        let b = folded.forward(&x, s).unwrap().to_array();
        for k in 0..4 {
            assert!(
                (a[k] - b[k]).abs() <= 1e-12 * a[k].abs().max(1e-6),
                "{a:?} vs {b:?}"
            );
        }
    }
}

#[test]
fn model_and_store_files_round_trip() {
    let net = trained(4);
    let bytes = write_uivm(&net).unwrap();
    let back = read_uivm(&bytes).unwrap();
    assert_eq!(back, net);
    let store = pack_weights(&fold_batchnorm(&net).unwrap()).unwrap();
    let q = write_uivq(&store).unwrap();
    assert_eq!(write_uivq(&read_uivq(&q).unwrap()).unwrap(), q);
    assert!(
        pack_weights(&net).is_err(),
        "unfolded nets must be rejected"
    );
}
