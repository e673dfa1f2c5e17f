// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use super::{quantize_slice, quantized_forward, PackedWeightStore};
use crate::error::{Error, Result};
use crate::ivim::{Dataset, Param};
use crate::network::UIvimNet;
use crate::par;

/// How far fixed-point predictions drift from the float network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantAccuracy {
    pub n_voxels: usize,
    /// Allowed error as a fraction of each parameter's range width.
    pub tolerance: f64,
    /// Fraction of voxels whose every (sample, parameter) error is within tolerance.
    pub within_tolerance: f64,
    /// Worst error per parameter, as a fraction of range width.
    pub max_error: [f64; 4],
}

pub fn quantization_accuracy(
    net: &UIvimNet,
    store: &PackedWeightStore,
    data: &Dataset,
    tolerance: f64,
) -> Result<QuantAccuracy> {
    if data.n_b() != store.n_b || net.n_b() != store.n_b {
        return Err(Error::DimensionMismatch {
            expected: store.n_b,
            got: data.n_b(),
        });
    }
    if data.n_voxels() == 0 {
        return Err(Error::invalid("empty dataset"));
    }
    let ranges = net.ranges();
    let per_voxel = par::map_range(data.n_voxels(), |i| -> Result<[f64; 4]> {
        let x = data.signal(i);
        let xq = quantize_slice(x);
        let mut worst = [0.0f64; 4];
        for s in 0..net.n_samples() {
            let pf = net.forward(x, s)?;
            let pq = quantized_forward(store, &xq, s)?;
            for p in Param::ALL {
                let e = (pf.get(p) - pq.get(p)).abs() / ranges.get(p).width();
                worst[p.index()] = worst[p.index()].max(e);
            }
        }
        Ok(worst)
    });
    let mut max_error = [0.0f64; 4];
    let mut ok = 0usize;
    for w in per_voxel {
        let w = w?;
        if w.iter().all(|&e| e <= tolerance) {
            ok += 1;
        }
        for k in 0..4 {
            max_error[k] = max_error[k].max(w[k]);
        }
    }
    Ok(QuantAccuracy {
        n_voxels: data.n_voxels(),
        tolerance,
        within_tolerance: ok as f64 / data.n_voxels() as f64,
        max_error,
    })
}
