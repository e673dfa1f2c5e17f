// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::backprop::{
    forward_train_caches, loss_from_logits, reconstruction_loss, sub_backward,
    update_running_stats, BnMode, Reduction, SubGrad,
};
use super::{TrainingConfig, UIvimNet};
use crate::error::{Error, Result};
use crate::ivim::Dataset;
use crate::par;
use crate::rng::{derive_seed, stream_rng, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean of the mini-batch losses (training-mode batch norm).
    pub train_loss: f64,
    /// Inference-mode loss on the held-out split.
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights of the best validation epoch.
    pub net: UIvimNet,
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
    /// Inference-mode loss of `net` over the training split.
    pub final_train_loss: f64,
}

struct Adam {
    m: Vec<[Vec<f64>; 10]>,
    v: Vec<[Vec<f64>; 10]>,
    t: i32,
}

impl Adam {
    fn new(net: &UIvimNet) -> Self {
        let zeros = || {
            net.subnets
                .iter()
                .map(|s| s.trainable().map(|t| vec![0.0; t.len()]))
                .collect::<Vec<_>>()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

fn adam_update(
    sub: &mut super::SubNetwork,
    m: &mut [Vec<f64>; 10],
    v: &mut [Vec<f64>; 10],
    g: &SubGrad,
    cfg: &TrainingConfig,
    t: i32,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, p) in sub.trainable_mut().into_iter().enumerate() {
        for e in 0..p.len() {
            let gi = g.parts[k][e];
            m[k][e] = cfg.beta1 * m[k][e] + (1.0 - cfg.beta1) * gi;
            v[k][e] = cfg.beta2 * v[k][e] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[k][e] / bc1;
            let vhat = v[k][e] / bc2;
            p[e] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Endless sequence of reshuffled passes over the training split, cut into
/// mini-batches. Trailing batches of a single voxel are skipped since batch
/// statistics are undefined for them.
struct BatchStream {
    idx: Vec<usize>,
    pos: usize,
    pass: u64,
    seed: u64,
    batch: usize,
}

impl BatchStream {
    fn next_batch(&mut self) -> Vec<usize> {
        loop {
            if self.pos >= self.idx.len() {
                self.idx.sort_unstable();
                self.idx.shuffle(&mut stream_rng(self.seed, self.pass));
                self.pass += 1;
                self.pos = 0;
            }
            let end = (self.pos + self.batch).min(self.idx.len());
            let chunk = &self.idx[self.pos..end];
            self.pos = end;
            if chunk.len() >= 2 {
                return chunk.to_vec();
            }
        }
    }
}

fn samples_for(rows: usize, n: usize) -> Vec<usize> {
    (0..rows).map(|i| i % n).collect()
}

/// Inference-mode reconstruction loss over `indices` of `ds`, row `i` using
/// mask sample `i mod N`.
pub(crate) fn eval_loss(net: &UIvimNet, ds: &Dataset, indices: &[usize]) -> Result<f64> {
    let nb = ds.n_b();
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in indices.chunks(4096) {
        let mut x = Vec::with_capacity(chunk.len() * nb);
        for &i in chunk {
            x.extend_from_slice(ds.signal(i));
        }
        let samples = samples_for(chunk.len(), net.n_samples());
        total += reconstruction_loss(net, &x, &samples, BnMode::Inference)? * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count as f64)
}

/// Mini-batch Adam on the reconstruction loss with early stopping.
///
/// Within a mini-batch, row `i` uses mask sample `i mod N`, so every mask is
/// exercised at every step. The dataset is split once (seeded) into training
/// and validation parts; every pass over the training part reshuffles it from
/// its own seeded stream. An epoch is `steps_per_epoch` mini-batches (one pass
/// when unset), and validation runs after each epoch.
pub fn train(net: UIvimNet, ds: &Dataset, cfg: &TrainingConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.validate()?;
    if ds.schedule != net.schedule {
        return Err(Error::invalid("dataset b-values do not match the network"));
    }
    let n = ds.n_voxels();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(derive_seed(cfg.seed, tag("split")), 0));
    let n_val = ((n as f64) * cfg.val_fraction).round() as usize;
    let (val_idx, train_idx) = order.split_at(n_val.min(n.saturating_sub(2)));
    let val_idx: Vec<usize> = if val_idx.is_empty() {
        train_idx.to_vec()
    } else {
        val_idx.to_vec()
    };
    let mut train_idx = train_idx.to_vec();
    if train_idx.len() < 2 {
        return Err(Error::invalid("training split needs at least 2 voxels"));
    }

    let nb = ds.n_b();
    let n_samples = net.n_samples();
    let mut net = net;
    net.meta.config_hash = cfg.hash();
    net.meta.drop_rate = cfg.drop_rate;
    let mut adam = Adam::new(&net);
    let mut best = net.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut wait = 0;
    let mut curve = Vec::new();
    let epoch_seed = derive_seed(cfg.seed, tag("epoch"));

    let per_pass =
        train_idx.len() / cfg.batch_size + usize::from(train_idx.len() % cfg.batch_size >= 2);
    let steps = cfg.steps_per_epoch.unwrap_or(per_pass);
    let mut stream = BatchStream {
        idx: train_idx.clone(),
        pos: train_idx.len(),
        pass: 0,
        seed: epoch_seed,
        batch: cfg.batch_size,
    };

    for epoch in 0..cfg.max_epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for step in 0..steps {
            let chunk = stream.next_batch();
            let chunk = chunk.as_slice();
            let mut x = Vec::with_capacity(chunk.len() * nb);
            for &i in chunk {
                x.extend_from_slice(ds.signal(i));
            }
            let samples = samples_for(chunk.len(), n_samples);
            let caches = forward_train_caches(&net, &x, &samples, cfg.parallel_subnets);
            let logits = std::array::from_fn(|j| caches[j].logits.as_slice());
            let (loss, dz) = loss_from_logits(&net, logits, &x, Reduction::Mean);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            adam.t += 1;
            let t = adam.t;
            let mut work: Vec<_> = net
                .subnets
                .iter_mut()
                .zip(adam.m.iter_mut().zip(adam.v.iter_mut()))
                .zip(caches.iter().zip(dz.iter()))
                .collect();
            let step_one = |_: usize,
                            item: &mut (
                (
                    &mut super::SubNetwork,
                    (&mut [Vec<f64>; 10], &mut [Vec<f64>; 10]),
                ),
                (&super::backprop::SubCache, &Vec<f64>),
            )| {
                let ((sub, (m, v)), (cache, dzj)) = item;
                let g = sub_backward(sub, cache, dzj, &samples, BnMode::Train);
                adam_update(sub, m, v, &g, cfg, t);
                update_running_stats(sub, cache, samples.len());
            };
            if cfg.parallel_subnets {
                par::for_each_mut(&mut work, step_one);
            } else {
                work.iter_mut()
                    .enumerate()
                    .for_each(|(i, item)| step_one(i, item));
            }
            loss_sum += loss;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::invalid("no mini-batch with at least 2 voxels"));
        }
        let val_loss = eval_loss(&net, ds, &val_idx)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: batches,
                loss: val_loss,
            });
        }
        curve.push(EpochStats {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
        });
        log::debug!(
            "epoch {epoch}: train {:.3e} val {val_loss:.3e}",
            loss_sum / batches as f64
        );
        if val_loss < best_val {
            best_val = val_loss;
            best = net.clone();
            best_epoch = epoch;
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                break;
            }
        }
    }
    best.meta.epochs_run = curve.len();
    best.meta.best_val_loss = Some(best_val);
    train_idx.sort_unstable();
    let final_train_loss = eval_loss(&best, ds, &train_idx)?;
    Ok(TrainOutcome {
        net: best,
        curve,
        best_epoch,
        final_train_loss,
    })
}
