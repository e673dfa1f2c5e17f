// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

//! The four-head IVIM estimator with fixed-mask sampling.
//!
//! Each sub-network maps the normalized signal vector to one parameter:
//!
//! ```text
//! linear -> batchnorm -> relu -> mask1[s] -> linear -> batchnorm -> relu -> mask2[s]
//!        -> encoder (width -> 1) -> sigmoid -> min + sigmoid * (max - min)
//! ```
//!
//! All linear layers are `n_b` wide. Sub-networks are stored in the order
//! (D, Dstar, f, S0). A sample index `s` picks row `s` of every mask layer, so
//! `N` deterministic forward passes give the predictive mean and spread.

mod backprop;
mod grid;
mod io;
mod train;

pub use backprop::{
    gradient_check, loss_and_gradient, reconstruction_loss, BnMode, GradCheckReport, Reduction,
};
pub use grid::{grid_search, GridCell, GridConfig, GridResult, RequirementProbe};
pub use io::{read_uivm, write_uivm, UIVM_MAGIC, UIVM_VERSION};
pub use train::{train, EpochStats, TrainOutcome};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ivim::{BValueSchedule, Interval, IvimParams, Param, ParamRanges};
use crate::masks::{generate_masks, MaskConfig, MaskSet};
use crate::rng::{derive_seed, stream_rng, tag};

/// Dense layer, `weight` is row-major `out_dim x in_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases.
    fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = || bound * (2.0 * rng.random::<f64>() - 1.0);
        let weight = (0..in_dim * out_dim).map(|_| draw()).collect();
        let bias = (0..out_dim).map(|_| draw()).collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn row(&self, o: usize) -> &[f64] {
        &self.weight[o * self.in_dim..(o + 1) * self.in_dim]
    }

    #[inline]
    pub(crate) fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, y) in out.iter_mut().enumerate() {
            *y = self.bias[o] + dot(self.row(o), x);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(width: usize, eps: f64, momentum: f64) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            eps,
            momentum,
        }
    }

    /// Exact identity transform (what folding leaves behind).
    pub fn identity(width: usize) -> Self {
        Self::new(width, 0.0, 0.0)
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_identity(&self) -> bool {
        self.eps == 0.0
            && self.gamma.iter().all(|&g| g == 1.0)
            && self.beta.iter().all(|&b| b == 0.0)
            && self.running_mean.iter().all(|&m| m == 0.0)
            && self.running_var.iter().all(|&v| v == 1.0)
    }

    #[inline]
    fn apply_inference(&self, c: usize, h: f64) -> f64 {
        self.gamma[c] * (h - self.running_mean[c]) / (self.running_var[c] + self.eps).sqrt()
            + self.beta[c]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubNetwork {
    pub layer1: Linear,
    pub bn1: BatchNorm,
    pub layer2: Linear,
    pub bn2: BatchNorm,
    pub encoder: Linear,
    /// Masks after hidden layer 1 and hidden layer 2.
    pub masks: [MaskSet; 2],
    pub range: Interval,
}

impl SubNetwork {
    pub fn width(&self) -> usize {
        self.layer1.in_dim
    }

    pub fn n_samples(&self) -> usize {
        self.masks[0].n_samples()
    }

    /// Encoder output (pre-sigmoid) in inference mode.
    pub fn logit(&self, x: &[f64], sample: usize) -> f64 {
        let w = self.width();
        let mut h = vec![0.0; w];
        let mut a = vec![0.0; w];
        self.layer1.apply_into(x, &mut h);
        for c in 0..w {
            a[c] = if self.masks[0].is_kept(sample, c) {
                self.bn1.apply_inference(c, h[c]).max(0.0)
            } else {
                0.0
            };
        }
        self.layer2.apply_into(&a, &mut h);
        for c in 0..w {
            a[c] = if self.masks[1].is_kept(sample, c) {
                self.bn2.apply_inference(c, h[c]).max(0.0)
            } else {
                0.0
            };
        }
        self.encoder.bias[0] + dot(&self.encoder.weight, &a)
    }

    /// Trainable tensors in the fixed serialization/optimizer order.
    pub(crate) fn trainable(&self) -> [&Vec<f64>; 10] {
        [
            &self.layer1.weight,
            &self.layer1.bias,
            &self.bn1.gamma,
            &self.bn1.beta,
            &self.layer2.weight,
            &self.layer2.bias,
            &self.bn2.gamma,
            &self.bn2.beta,
            &self.encoder.weight,
            &self.encoder.bias,
        ]
    }

    pub(crate) fn trainable_mut(&mut self) -> [&mut Vec<f64>; 10] {
        [
            &mut self.layer1.weight,
            &mut self.layer1.bias,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.layer2.weight,
            &mut self.layer2.bias,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
            &mut self.encoder.weight,
            &mut self.encoder.bias,
        ]
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Map an encoder output into `(range.min, range.max)`.
pub fn convert(x: f64, range: Interval) -> f64 {
    // clamp guards the last ulp when sigmoid rounds to 1
    (range.min + sigmoid(x) * range.width()).clamp(range.min, range.max)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NetMeta {
    pub seed: u64,
    pub config_hash: String,
    pub drop_rate: f64,
    pub epochs_run: usize,
    pub best_val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UIvimNet {
    /// Exactly four, ordered (D, Dstar, f, S0).
    pub subnets: Vec<SubNetwork>,
    pub schedule: BValueSchedule,
    pub meta: NetMeta,
}

/// Hyper-parameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Mini-batches between validation checks; `None` means one pass over
    /// the training split.
    pub steps_per_epoch: Option<usize>,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub drop_rate: f64,
    pub n_samples: usize,
    pub max_mask_overlap: Option<f64>,
    pub val_fraction: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Run the four sub-networks' forward/backward passes concurrently.
    pub parallel_subnets: bool,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 128,
            max_epochs: 300,
            steps_per_epoch: Some(500),
            patience: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            drop_rate: 0.1,
            n_samples: 4,
            max_mask_overlap: None,
            val_fraction: 0.1,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            parallel_subnets: false,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            (
                "learning_rate",
                self.learning_rate >= 0.0 && self.learning_rate.is_finite(),
            ),
            ("batch_size", self.batch_size >= 2),
            ("max_epochs", self.max_epochs >= 1),
            ("steps_per_epoch", self.steps_per_epoch != Some(0)),
            ("patience", self.patience >= 1),
            ("beta1", (0.0..1.0).contains(&self.beta1)),
            ("beta2", (0.0..1.0).contains(&self.beta2)),
            ("adam_eps", self.adam_eps > 0.0),
            ("n_samples", self.n_samples >= 1),
            ("val_fraction", (0.0..1.0).contains(&self.val_fraction)),
            ("bn_eps", self.bn_eps > 0.0),
            ("bn_momentum", (0.0..=1.0).contains(&self.bn_momentum)),
            ("drop_rate", (0.0..1.0).contains(&self.drop_rate)),
        ];
        for (name, ok) in positive {
            if !ok {
                return Err(Error::invalid(format!(
                    "training config: {name} out of range"
                )));
            }
        }
        Ok(())
    }

    /// Short stable hash of the config, recorded in every artifact it produces.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Which dispersion `predict_with_uncertainty` reports.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StdKind {
    /// Divisor `N`.
    #[default]
    Population,
    /// Divisor `N - 1` (0 when `N = 1`).
    Sample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionWithUncertainty {
    /// Indexed by [`Param::index`].
    pub mean: [f64; 4],
    pub std: [f64; 4],
    pub samples: Vec<IvimParams>,
}

impl PredictionWithUncertainty {
    pub fn from_samples(samples: Vec<IvimParams>, kind: StdKind) -> Self {
        let n = samples.len() as f64;
        let mut mean = [0.0; 4];
        let mut std = [0.0; 4];
        for p in Param::ALL {
            let i = p.index();
            let m = samples.iter().map(|s| s.get(p)).sum::<f64>() / n;
            let ss = samples.iter().map(|s| (s.get(p) - m).powi(2)).sum::<f64>();
            let div = match kind {
                StdKind::Population => n,
                StdKind::Sample => n - 1.0,
            };
            mean[i] = m;
            std[i] = if div > 0.0 { (ss / div).sqrt() } else { 0.0 };
        }
        Self { mean, std, samples }
    }

    pub fn mean_params(&self) -> IvimParams {
        IvimParams::from_array(self.mean)
    }
}

impl UIvimNet {
    /// Freshly initialized network with its mask sets.
    pub fn new(
        schedule: &BValueSchedule,
        ranges: &ParamRanges,
        n_samples: usize,
        drop_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        Self::with_options(
            schedule, ranges, n_samples, drop_rate, None, 1e-5, 0.1, seed,
        )
    }

    pub fn from_config(
        schedule: &BValueSchedule,
        ranges: &ParamRanges,
        cfg: &TrainingConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut net = Self::with_options(
            schedule,
            ranges,
            cfg.n_samples,
            cfg.drop_rate,
            cfg.max_mask_overlap,
            cfg.bn_eps,
            cfg.bn_momentum,
            cfg.seed,
        )?;
        net.meta.config_hash = cfg.hash();
        Ok(net)
    }

    #[allow(clippy::too_many_arguments)]
    fn with_options(
        schedule: &BValueSchedule,
        ranges: &ParamRanges,
        n_samples: usize,
        drop_rate: f64,
        max_overlap: Option<f64>,
        bn_eps: f64,
        bn_momentum: f64,
        seed: u64,
    ) -> Result<Self> {
        ranges.validate()?;
        let w = schedule.len();
        let mask_seed = derive_seed(seed, tag("masks"));
        let init_seed = derive_seed(seed, tag("init"));
        let mut subnets = Vec::with_capacity(4);
        for p in Param::ALL {
            let j = p.index() as u64;
            let mk = |m: u64| -> Result<MaskSet> {
                let mut cfg =
                    MaskConfig::new(n_samples, w, drop_rate, derive_seed(mask_seed, 2 * j + m));
                cfg.max_overlap = max_overlap;
                generate_masks(&cfg)
            };
            let masks = [mk(0)?, mk(1)?];
            let mut rng = stream_rng(init_seed, j);
            subnets.push(SubNetwork {
                layer1: Linear::init(w, w, &mut rng),
                bn1: BatchNorm::new(w, bn_eps, bn_momentum),
                layer2: Linear::init(w, w, &mut rng),
                bn2: BatchNorm::new(w, bn_eps, bn_momentum),
                encoder: Linear::init(w, 1, &mut rng),
                masks,
                range: ranges.get(p),
            });
        }
        Ok(Self {
            subnets,
            schedule: schedule.clone(),
            meta: NetMeta {
                seed,
                drop_rate,
                ..NetMeta::default()
            },
        })
    }

    pub fn n_b(&self) -> usize {
        self.schedule.len()
    }

    pub fn n_samples(&self) -> usize {
        self.subnets[0].n_samples()
    }

    pub fn ranges(&self) -> ParamRanges {
        ParamRanges {
            d: self.subnets[0].range,
            dstar: self.subnets[1].range,
            f: self.subnets[2].range,
            s0: self.subnets[3].range,
        }
    }

    pub fn is_folded(&self) -> bool {
        self.subnets
            .iter()
            .all(|s| s.bn1.is_identity() && s.bn2.is_identity())
    }

    /// Structural invariants; checked on load and before training.
    pub fn validate(&self) -> Result<()> {
        if self.subnets.len() != 4 {
            return Err(Error::invalid(format!(
                "expected 4 sub-networks, got {}",
                self.subnets.len()
            )));
        }
        let w = self.n_b();
        let n = self.n_samples();
        for s in &self.subnets {
            let dims_ok = s.layer1.in_dim == w
                && s.layer1.out_dim == w
                && s.layer2.in_dim == w
                && s.layer2.out_dim == w
                && s.encoder.in_dim == w
                && s.encoder.out_dim == 1
                && s.bn1.width() == w
                && s.bn2.width() == w;
            if !dims_ok {
                return Err(Error::invalid(
                    "sub-network dimensions disagree with the b-value schedule",
                ));
            }
            if s.masks.iter().any(|m| m.width() != w || m.n_samples() != n) {
                return Err(Error::invalid(
                    "mask sets must have width n_b and a shared sample count",
                ));
            }
            if s.trainable()
                .iter()
                .any(|t| t.iter().any(|x| !x.is_finite()))
            {
                return Err(Error::invalid("non-finite weight"));
            }
            if s.bn1
                .running_var
                .iter()
                .chain(&s.bn2.running_var)
                .any(|&v| !(v >= 0.0))
            {
                return Err(Error::invalid("negative running variance"));
            }
        }
        Ok(())
    }

    fn check_input(&self, voxel: &[f64], sample: usize) -> Result<()> {
        if voxel.len() != self.n_b() {
            return Err(Error::DimensionMismatch {
                expected: self.n_b(),
                got: voxel.len(),
            });
        }
        if sample >= self.n_samples() {
            return Err(Error::invalid(format!(
                "sample index {sample} out of range for N = {}",
                self.n_samples()
            )));
        }
        Ok(())
    }

    /// Raw encoder outputs of the four heads.
    pub fn logits(&self, voxel: &[f64], sample: usize) -> Result<[f64; 4]> {
        self.check_input(voxel, sample)?;
        Ok(std::array::from_fn(|j| {
            self.subnets[j].logit(voxel, sample)
        }))
    }

    /// One deterministic forward pass (inference-mode batch norm).
    pub fn forward(&self, voxel: &[f64], sample: usize) -> Result<IvimParams> {
        let z = self.logits(voxel, sample)?;
        Ok(IvimParams::from_array(std::array::from_fn(|j| {
            convert(z[j], self.subnets[j].range)
        })))
    }

    pub fn predict_with_uncertainty(&self, voxel: &[f64]) -> Result<PredictionWithUncertainty> {
        self.predict_with_uncertainty_as(voxel, StdKind::Population)
    }

    pub fn predict_with_uncertainty_as(
        &self,
        voxel: &[f64],
        kind: StdKind,
    ) -> Result<PredictionWithUncertainty> {
        let samples = (0..self.n_samples())
            .map(|s| self.forward(voxel, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(PredictionWithUncertainty::from_samples(samples, kind))
    }
}

/// Fold every batch norm's inference-time affine map into the preceding
/// linear layer, leaving identity batch norms behind.
pub fn fold_batchnorm(net: &UIvimNet) -> Result<UIvimNet> {
    let mut out = net.clone();
    for sub in &mut out.subnets {
        fold_pair(&mut sub.layer1, &mut sub.bn1)?;
        fold_pair(&mut sub.layer2, &mut sub.bn2)?;
    }
    Ok(out)
}

fn fold_pair(lin: &mut Linear, bn: &mut BatchNorm) -> Result<()> {
    for o in 0..lin.out_dim {
        let denom = bn.running_var[o] + bn.eps;
        if !(denom > 0.0) {
            return Err(Error::invalid(format!(
                "cannot fold batch norm: running_var + eps = {denom} at channel {o}"
            )));
        }
        let scale = bn.gamma[o] / denom.sqrt();
        for w in &mut lin.weight[o * lin.in_dim..(o + 1) * lin.in_dim] {
            *w *= scale;
        }
        lin.bias[o] = (lin.bias[o] - bn.running_mean[o]) * scale + bn.beta[o];
    }
    *bn = BatchNorm::identity(lin.out_dim);
    Ok(())
}
