// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

use super::{plan, AcceleratorConfig, Schedule, Step};
use crate::error::{Error, Result};
use crate::ivim::IvimParams;
use crate::par;
use crate::quant::{dot_acc, finish_acc, quantized_logits, relu, PackedWeightStore};

/// Outputs of a functional run, indexed `voxel * N + sample`.
#[derive(Clone, Debug, PartialEq)]
pub struct FunctionalRun {
    pub n_samples: usize,
    pub logits: Vec<[i16; 4]>,
    pub params: Vec<IvimParams>,
    /// Weight loads actually issued, summed over batches.
    pub weight_loads: u64,
    pub batches: usize,
    /// Refills of the on-chip voxel store.
    pub io_chunks: usize,
}

/// Two ping-pong layer buffers per in-flight voxel.
struct LayerCache {
    bufs: Vec<[Vec<i16>; 2]>,
}

/// Run one batch through the controller program.
fn run_batch(
    store: &PackedWeightStore,
    voxels: &[&[i16]],
    cfg: &AcceleratorConfig,
    schedule: Schedule,
) -> Result<(Vec<[i16; 4]>, u64)> {
    let n = store.n_samples();
    let m = cfg.mult_per_pu;
    let mut cache = LayerCache {
        bufs: vec![[vec![0; store.n_b], vec![0; store.n_b]]; voxels.len()],
    };
    let mut logits = vec![[0i16; 4]; voxels.len() * n];
    let mut loaded = None;
    let mut loads = 0;
    for step in plan(schedule, voxels.len(), n) {
        match step {
            Step::Load { sample } => {
                loaded = Some(sample);
                loads += 1;
            }
            Step::Pass {
                sample,
                subnet,
                layer,
                voxels: range,
            } => {
                if loaded != Some(sample) {
                    return Err(Error::EquivalenceViolation(format!(
                        "pass for sample {sample} ran with weights of {loaded:?}"
                    )));
                }
                let weights = &store.subnets[subnet].samples[sample].layers()[layer];
                let (c_out, c_in) = (weights.c_out(), weights.c_in());
                for v in range {
                    let [b0, b1] = &mut cache.bufs[v];
                    let (input, output): (&[i16], &mut [i16]) = match layer {
                        0 => (voxels[v], b0.as_mut_slice()),
                        1 => (&b0[..c_in], b1.as_mut_slice()),
                        _ => (&b1[..c_in], b0.as_mut_slice()),
                    };
                    // output neurons in PE-sized groups, inputs in PU-sized chunks
                    for group in (0..c_out).step_by(cfg.n_pe) {
                        for o in group..(group + cfg.n_pe).min(c_out) {
                            let row = weights.row(o);
                            let mut acc = 0i64;
                            for k in (0..c_in).step_by(m) {
                                let end = (k + m).min(c_in);
                                acc += dot_acc(&row[k..end], &input[k..end]);
                            }
                            let y = finish_acc(acc, weights.bias[o]);
                            output[o] = if layer < 2 { relu(y) } else { y };
                        }
                    }
                    if layer == 2 {
                        logits[v * n + sample][subnet] = output[0];
                    }
                }
            }
        }
    }
    Ok((logits, loads))
}

/// Push `voxels` (flattened, `n_b` words each) through the simulated array.
/// Voxels stream through the on-chip store in chunks of
/// `io_voxel_capacity`, and each chunk is cut into batches.
pub fn simulate_functional(
    store: &PackedWeightStore,
    voxels: &[i16],
    cfg: &AcceleratorConfig,
    schedule: Schedule,
) -> Result<FunctionalRun> {
    cfg.check_dims(&store.dims())?;
    let n_b = store.n_b;
    if !voxels.len().is_multiple_of(n_b) {
        return Err(Error::DimensionMismatch {
            expected: n_b,
            got: voxels.len() % n_b,
        });
    }
    let n_vox = voxels.len() / n_b;
    if n_vox > cfg.io_voxel_capacity && !cfg.io_batching {
        return Err(Error::CapacityOverflow(format!(
            "{n_vox} voxels exceed the I/O capacity of {}",
            cfg.io_voxel_capacity
        )));
    }
    let rows: Vec<&[i16]> = voxels.chunks(n_b).collect();
    // batches never straddle an I/O chunk
    let mut batches = Vec::new();
    let mut io_chunks = 0;
    for chunk_start in (0..n_vox).step_by(cfg.io_voxel_capacity) {
        io_chunks += 1;
        let chunk_end = (chunk_start + cfg.io_voxel_capacity).min(n_vox);
        for b in (chunk_start..chunk_end).step_by(cfg.batch_size) {
            batches.push(b..(b + cfg.batch_size).min(chunk_end));
        }
    }
    let results = par::map_slice(&batches, |r| {
        run_batch(store, &rows[r.clone()], cfg, schedule)
    });
    let mut logits = Vec::with_capacity(n_vox * store.n_samples());
    let mut loads = 0;
    for res in results {
        let (l, c) = res?;
        logits.extend(l);
        loads += c;
    }
    let params = logits
        .iter()
        .map(|&l| crate::quant::pack::logits_to_params(store, l))
        .collect();
    Ok(FunctionalRun {
        n_samples: store.n_samples(),
        logits,
        params,
        weight_loads: loads,
        batches: batches.len(),
        io_chunks,
    })
}

/// Compare every (voxel, sample) of a run against the reference fixed-point
/// forward; any difference is a simulator bug.
pub fn verify_against_reference(
    store: &PackedWeightStore,
    voxels: &[i16],
    run: &FunctionalRun,
) -> Result<()> {
    let n = store.n_samples();
    let n_vox = voxels.len() / store.n_b;
    if run.logits.len() != n_vox * n {
        return Err(Error::EquivalenceViolation(format!(
            "run has {} outputs, expected {}",
            run.logits.len(),
            n_vox * n
        )));
    }
    let bad = par::map_range(n_vox, |v| -> Result<Option<String>> {
        let x = &voxels[v * store.n_b..(v + 1) * store.n_b];
        for s in 0..n {
            let want = quantized_logits(store, x, s)?;
            let got = run.logits[v * n + s];
            if want != got {
                return Ok(Some(format!(
                    "voxel {v} sample {s}: simulator {got:?} vs reference {want:?}"
                )));
            }
        }
        Ok(None)
    });
    for b in bad {
        if let Some(msg) = b? {
            return Err(Error::EquivalenceViolation(msg));
        }
    }
    Ok(())
}
