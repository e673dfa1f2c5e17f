// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

//! Mini-batch forward pass with caches, the reconstruction loss and its
//! hand-written gradient.

use crate::error::{Error, Result};
use crate::ivim::{eval_gradient, eval_signal, IvimParams};
use crate::par;

use super::{dot, sigmoid, BatchNorm, SubNetwork, UIvimNet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated by the caller.
    Train,
    /// Frozen running statistics.
    Inference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Mean over voxels and b-values.
    Mean,
    /// Sum over voxels of the per-voxel mean over b-values.
    Sum,
}

/// Per-channel normalization state of one batch-norm layer for one batch.
struct BnState {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

/// Everything the backward pass needs from one sub-network's forward pass.
pub(crate) struct SubCache {
    x: Vec<f64>,
    bn1: BnState,
    /// relu output before masking
    r1: Vec<f64>,
    m1: Vec<f64>,
    bn2: BnState,
    r2: Vec<f64>,
    m2: Vec<f64>,
    pub(crate) logits: Vec<f64>,
}

/// Gradient of one sub-network, same layout as [`SubNetwork::trainable`].
#[derive(Clone, Debug, PartialEq)]
pub struct SubGrad {
    pub parts: [Vec<f64>; 10],
}

impl SubGrad {
    fn zeros_like(sub: &SubNetwork) -> Self {
        Self {
            parts: sub.trainable().map(|t| vec![0.0; t.len()]),
        }
    }
}

fn linear_batch(w: &[f64], bias: &[f64], in_dim: usize, x: &[f64], b: usize) -> Vec<f64> {
    let out_dim = bias.len();
    let mut h = vec![0.0; b * out_dim];
    for i in 0..b {
        let xi = &x[i * in_dim..(i + 1) * in_dim];
        for o in 0..out_dim {
            h[i * out_dim + o] = bias[o] + dot(&w[o * in_dim..(o + 1) * in_dim], xi);
        }
    }
    h
}

fn bn_forward(bn: &BatchNorm, h: &[f64], b: usize, mode: BnMode) -> (Vec<f64>, BnState) {
    let c = bn.width();
    let (mean, var) = match mode {
        BnMode::Inference => (bn.running_mean.clone(), bn.running_var.clone()),
        BnMode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for i in 0..b {
                for k in 0..c {
                    mean[k] += h[i * c + k];
                }
            }
            mean.iter_mut().for_each(|m| *m /= b as f64);
            for i in 0..b {
                for k in 0..c {
                    var[k] += (h[i * c + k] - mean[k]).powi(2);
                }
            }
            var.iter_mut().for_each(|v| *v /= b as f64);
            (mean, var)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    let mut xhat = vec![0.0; b * c];
    let mut y = vec![0.0; b * c];
    for i in 0..b {
        for k in 0..c {
            let xh = (h[i * c + k] - mean[k]) * inv_std[k];
            xhat[i * c + k] = xh;
            y[i * c + k] = bn.gamma[k] * xh + bn.beta[k];
        }
    }
    (
        y,
        BnState {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    )
}

/// Returns `(dh, dgamma, dbeta)`.
fn bn_backward(
    bn: &BatchNorm,
    st: &BnState,
    dy: &[f64],
    b: usize,
    mode: BnMode,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = bn.width();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for i in 0..b {
        for k in 0..c {
            dgamma[k] += dy[i * c + k] * st.xhat[i * c + k];
            dbeta[k] += dy[i * c + k];
        }
    }
    let mut dh = vec![0.0; b * c];
    match mode {
        BnMode::Inference => {
            for i in 0..b {
                for k in 0..c {
                    dh[i * c + k] = dy[i * c + k] * bn.gamma[k] * st.inv_std[k];
                }
            }
        }
        BnMode::Train => {
            let n = b as f64;
            for k in 0..c {
                // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                let s1 = bn.gamma[k] * dbeta[k];
                let s2 = bn.gamma[k] * dgamma[k];
                for i in 0..b {
                    let dxhat = dy[i * c + k] * bn.gamma[k];
                    dh[i * c + k] = st.inv_std[k] / n * (n * dxhat - s1 - st.xhat[i * c + k] * s2);
                }
            }
        }
    }
    (dh, dgamma, dbeta)
}

fn relu_mask(
    y: &[f64],
    sub_mask: &crate::masks::MaskSet,
    samples: &[usize],
    c: usize,
) -> (Vec<f64>, Vec<f64>) {
    let r: Vec<f64> = y.iter().map(|v| v.max(0.0)).collect();
    let mut m = r.clone();
    for (i, &s) in samples.iter().enumerate() {
        let row = sub_mask.row(s);
        for k in 0..c {
            if row[k] == 0 {
                m[i * c + k] = 0.0;
            }
        }
    }
    (r, m)
}

pub(crate) fn sub_forward(
    sub: &SubNetwork,
    x: &[f64],
    samples: &[usize],
    mode: BnMode,
) -> SubCache {
    let b = samples.len();
    let w = sub.width();
    let h1 = linear_batch(&sub.layer1.weight, &sub.layer1.bias, w, x, b);
    let (y1, bn1) = bn_forward(&sub.bn1, &h1, b, mode);
    let (r1, m1) = relu_mask(&y1, &sub.masks[0], samples, w);
    let h2 = linear_batch(&sub.layer2.weight, &sub.layer2.bias, w, &m1, b);
    let (y2, bn2) = bn_forward(&sub.bn2, &h2, b, mode);
    let (r2, m2) = relu_mask(&y2, &sub.masks[1], samples, w);
    let logits = linear_batch(&sub.encoder.weight, &sub.encoder.bias, w, &m2, b);
    SubCache {
        x: x.to_vec(),
        bn1,
        r1,
        m1,
        bn2,
        r2,
        m2,
        logits,
    }
}

/// Fold this batch's statistics into the running estimates (unbiased variance).
pub(crate) fn update_running_stats(sub: &mut SubNetwork, cache: &SubCache, b: usize) {
    let unbias = if b > 1 {
        b as f64 / (b as f64 - 1.0)
    } else {
        1.0
    };
    for (bn, st) in [(&mut sub.bn1, &cache.bn1), (&mut sub.bn2, &cache.bn2)] {
        let m = bn.momentum;
        for k in 0..bn.width() {
            bn.running_mean[k] = (1.0 - m) * bn.running_mean[k] + m * st.batch_mean[k];
            bn.running_var[k] = (1.0 - m) * bn.running_var[k] + m * st.batch_var[k] * unbias;
        }
    }
}

pub(crate) fn sub_backward(
    sub: &SubNetwork,
    cache: &SubCache,
    dz: &[f64],
    samples: &[usize],
    mode: BnMode,
) -> SubGrad {
    let b = samples.len();
    let w = sub.width();
    let mut g = SubGrad::zeros_like(sub);

    // encoder
    let mut dm2 = vec![0.0; b * w];
    for i in 0..b {
        g.parts[9][0] += dz[i];
        for k in 0..w {
            g.parts[8][k] += dz[i] * cache.m2[i * w + k];
            dm2[i * w + k] = dz[i] * sub.encoder.weight[k];
        }
    }
    // mask2 + relu2
    let dy2 = mask_relu_backward(&dm2, &cache.r2, &sub.masks[1], samples, w);
    let (dh2, dg2, db2) = bn_backward(&sub.bn2, &cache.bn2, &dy2, b, mode);
    g.parts[6] = dg2;
    g.parts[7] = db2;
    // layer2
    let mut dm1 = vec![0.0; b * w];
    for i in 0..b {
        for o in 0..w {
            let d = dh2[i * w + o];
            if d == 0.0 {
                continue;
            }
            g.parts[5][o] += d;
            let row = &sub.layer2.weight[o * w..(o + 1) * w];
            for k in 0..w {
                g.parts[4][o * w + k] += d * cache.m1[i * w + k];
                dm1[i * w + k] += d * row[k];
            }
        }
    }
    let dy1 = mask_relu_backward(&dm1, &cache.r1, &sub.masks[0], samples, w);
    let (dh1, dg1, db1) = bn_backward(&sub.bn1, &cache.bn1, &dy1, b, mode);
    g.parts[2] = dg1;
    g.parts[3] = db1;
    for i in 0..b {
        for o in 0..w {
            let d = dh1[i * w + o];
            if d == 0.0 {
                continue;
            }
            g.parts[1][o] += d;
            for k in 0..w {
                g.parts[0][o * w + k] += d * cache.x[i * w + k];
            }
        }
    }
    g
}

fn mask_relu_backward(
    dm: &[f64],
    r: &[f64],
    mask: &crate::masks::MaskSet,
    samples: &[usize],
    w: usize,
) -> Vec<f64> {
    let mut dy = vec![0.0; dm.len()];
    for (i, &s) in samples.iter().enumerate() {
        let row = mask.row(s);
        for k in 0..w {
            let idx = i * w + k;
            if row[k] == 1 && r[idx] > 0.0 {
                dy[idx] = dm[idx];
            }
        }
    }
    dy
}

/// Loss and `dL/dlogit` per sub-network and row, given the four heads' logits.
pub(crate) fn loss_from_logits(
    net: &UIvimNet,
    logits: [&[f64]; 4],
    signals: &[f64],
    reduction: Reduction,
) -> (f64, [Vec<f64>; 4]) {
    let nb = net.n_b();
    let b = logits[0].len();
    let bvals = net.schedule.values();
    let norm = match reduction {
        Reduction::Mean => (b * nb) as f64,
        Reduction::Sum => nb as f64,
    };
    let ranges: [_; 4] = std::array::from_fn(|j| net.subnets[j].range);
    let mut loss = 0.0;
    let mut dz: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; b]);
    for i in 0..b {
        let sig: [f64; 4] = std::array::from_fn(|j| sigmoid(logits[j][i]));
        let p = IvimParams::from_array(std::array::from_fn(|j| {
            ranges[j].min + sig[j] * ranges[j].width()
        }));
        let mut dp = [0.0; 4];
        for (k, &bv) in bvals.iter().enumerate() {
            let r = eval_signal(&p, bv) - signals[i * nb + k];
            loss += r * r;
            let g = eval_gradient(&p, bv);
            for j in 0..4 {
                dp[j] += 2.0 * r * g[j];
            }
        }
        for j in 0..4 {
            dz[j][i] = dp[j] / norm * ranges[j].width() * sig[j] * (1.0 - sig[j]);
        }
    }
    (loss / norm, dz)
}

fn check_batch(net: &UIvimNet, signals: &[f64], samples: &[usize]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::invalid("batch is empty"));
    }
    if signals.len() != samples.len() * net.n_b() {
        return Err(Error::DimensionMismatch {
            expected: samples.len() * net.n_b(),
            got: signals.len(),
        });
    }
    if let Some(&s) = samples.iter().find(|&&s| s >= net.n_samples()) {
        return Err(Error::invalid(format!("sample index {s} out of range")));
    }
    Ok(())
}

/// Reconstruction MSE of a batch (row-major `signals`), row `i` using mask
/// sample `samples[i]`.
pub fn reconstruction_loss(
    net: &UIvimNet,
    signals: &[f64],
    samples: &[usize],
    mode: BnMode,
) -> Result<f64> {
    check_batch(net, signals, samples)?;
    let caches: Vec<SubCache> = net
        .subnets
        .iter()
        .map(|s| sub_forward(s, signals, samples, mode))
        .collect();
    let logits = std::array::from_fn(|j| caches[j].logits.as_slice());
    Ok(loss_from_logits(net, logits, signals, Reduction::Mean).0)
}

/// Loss and gradient w.r.t. every trainable tensor of every sub-network.
pub fn loss_and_gradient(
    net: &UIvimNet,
    signals: &[f64],
    samples: &[usize],
    mode: BnMode,
    reduction: Reduction,
) -> Result<(f64, Vec<SubGrad>)> {
    check_batch(net, signals, samples)?;
    Ok(loss_and_gradient_unchecked(
        net, signals, samples, mode, reduction, false,
    ))
}

pub(crate) fn loss_and_gradient_unchecked(
    net: &UIvimNet,
    signals: &[f64],
    samples: &[usize],
    mode: BnMode,
    reduction: Reduction,
    parallel: bool,
) -> (f64, Vec<SubGrad>) {
    let forward = |s: &SubNetwork| sub_forward(s, signals, samples, mode);
    let caches: Vec<SubCache> = if parallel {
        par::map_slice(&net.subnets, forward)
    } else {
        net.subnets.iter().map(forward).collect()
    };
    let logits = std::array::from_fn(|j| caches[j].logits.as_slice());
    let (loss, dz) = loss_from_logits(net, logits, signals, reduction);
    let backward = |j: usize| sub_backward(&net.subnets[j], &caches[j], &dz[j], samples, mode);
    let grads = if parallel {
        par::map_range(4, backward)
    } else {
        (0..4).map(backward).collect()
    };
    (loss, grads)
}

pub(crate) fn forward_train_caches(
    net: &UIvimNet,
    signals: &[f64],
    samples: &[usize],
    parallel: bool,
) -> Vec<SubCache> {
    let forward = |s: &SubNetwork| sub_forward(s, signals, samples, BnMode::Train);
    if parallel {
        par::map_slice(&net.subnets, forward)
    } else {
        net.subnets.iter().map(forward).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub n_params: usize,
    /// `(sub-network, tensor, element)` of the worst entry.
    pub worst: (usize, usize, usize),
}

/// Compare the analytic gradient with central finite differences for every
/// trainable scalar, inference-mode batch norm.
///
/// The relative error of an entry is `|a - n| / max(|a|, |n|, floor)`, with
/// `floor = 1e-7` so entries whose true gradient is zero compare absolutely.
pub fn gradient_check(
    net: &UIvimNet,
    signals: &[f64],
    samples: &[usize],
    h: f64,
) -> Result<GradCheckReport> {
    const FLOOR: f64 = 1e-7;
    let (_, grads) = loss_and_gradient(net, signals, samples, BnMode::Inference, Reduction::Mean)?;
    let mut work = net.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        n_params: 0,
        worst: (0, 0, 0),
    };
    for j in 0..4 {
        for t in 0..10 {
            let len = grads[j].parts[t].len();
            for e in 0..len {
                let orig = work.subnets[j].trainable()[t][e];
                work.subnets[j].trainable_mut()[t][e] = orig + h;
                let up = reconstruction_loss(&work, signals, samples, BnMode::Inference)?;
                work.subnets[j].trainable_mut()[t][e] = orig - h;
                let down = reconstruction_loss(&work, signals, samples, BnMode::Inference)?;
                work.subnets[j].trainable_mut()[t][e] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads[j].parts[t][e];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = (j, t, e);
                }
                report.n_params += 1;
            }
        }
    }
    Ok(report)
}
