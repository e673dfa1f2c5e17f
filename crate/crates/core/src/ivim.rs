// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

//! Bi-exponential IVIM signal model and synthetic dataset generation.
//!
//! The normalized signal at diffusion weighting `b` is
//!
//! ```text
//! S(b) = S0 * (f * exp(-b * D*) + (1 - f) * exp(-b * D))
//! ```
//!
//! Datasets draw parameters uniformly from [`ParamRanges`], add i.i.d.
//! Gaussian noise with standard deviation `S0 / snr` at every b-value and
//! store the signals normalized by the measured `S(b = 0)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{self, LeReader};
use crate::par;
use crate::rng::stream_rng;

/// The four estimated quantities, in the fixed order used by every artifact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Param {
    D,
    Dstar,
    F,
    S0,
}

impl Param {
    pub const ALL: [Param; 4] = [Param::D, Param::Dstar, Param::F, Param::S0];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Param::D => "D",
            Param::Dstar => "Dstar",
            Param::F => "f",
            Param::S0 => "S0",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IvimParams {
    /// Diffusion coefficient, mm^2/s.
    pub d: f64,
    /// Pseudo-diffusion coefficient, mm^2/s.
    pub dstar: f64,
    /// Perfusion fraction.
    pub f: f64,
    /// Signal at b = 0.
    pub s0: f64,
}

impl IvimParams {
    pub fn new(d: f64, dstar: f64, f: f64, s0: f64) -> Self {
        Self { d, dstar, f, s0 }
    }

    pub fn get(&self, p: Param) -> f64 {
        self.to_array()[p.index()]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.d, self.dstar, self.f, self.s0]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.to_array().iter().all(|x| x.is_finite())
            && self.d >= 0.0
            && self.dstar >= 0.0
            && (0.0..=1.0).contains(&self.f)
            && self.s0 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "IVIM parameters out of domain: {self:?}"
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub min: f64,
    pub max: f64,
}

impl Interval {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.min && x <= self.max
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub d: Interval,
    pub dstar: Interval,
    pub f: Interval,
    pub s0: Interval,
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            d: Interval::new(0.0005, 0.005),
            dstar: Interval::new(0.01, 0.1),
            f: Interval::new(0.0, 0.7),
            s0: Interval::new(0.8, 1.2),
        }
    }
}

impl ParamRanges {
    pub fn get(&self, p: Param) -> Interval {
        match p {
            Param::D => self.d,
            Param::Dstar => self.dstar,
            Param::F => self.f,
            Param::S0 => self.s0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in Param::ALL {
            let r = self.get(p);
            if !(r.min.is_finite() && r.max.is_finite() && r.min < r.max) {
                return Err(Error::invalid(format!(
                    "range for {} must satisfy min < max, got [{}, {}]",
                    p.name(),
                    r.min,
                    r.max
                )));
            }
        }
        if self.d.min < 0.0 || self.dstar.min < 0.0 {
            return Err(Error::invalid("diffusion ranges must be non-negative"));
        }
        if self.f.min < 0.0 || self.f.max > 1.0 {
            return Err(Error::invalid(
                "perfusion fraction range must lie in [0, 1]",
            ));
        }
        if self.s0.min <= 0.0 {
            return Err(Error::invalid("S0 range must be strictly positive"));
        }
        if self.dstar.min <= self.d.max {
            return Err(Error::invalid(format!(
                "Dstar.min ({}) must exceed D.max ({})",
                self.dstar.min, self.d.max
            )));
        }
        Ok(())
    }
}

/// Ordered diffusion weightings of an acquisition, s/mm^2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BValueSchedule {
    b: Vec<f64>,
}

impl BValueSchedule {
    pub fn new(b: Vec<f64>) -> Result<Self> {
        if b.is_empty() {
            return Err(Error::invalid("b-value schedule is empty"));
        }
        if let Some(x) = b.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(Error::invalid(format!(
                "b-value {x} must be finite and >= 0"
            )));
        }
        if b.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("b-values must be nondecreasing"));
        }
        if !b.contains(&0.0) {
            return Err(Error::invalid("b-value schedule must contain b = 0"));
        }
        Ok(Self { b })
    }

    pub fn values(&self) -> &[f64] {
        &self.b
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    fn zero_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.b
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 0.0)
            .map(|(i, _)| i)
    }
}

impl Default for BValueSchedule {
    fn default() -> Self {
        Self {
            b: vec![
                0.0, 5.0, 10.0, 20.0, 30.0, 40.0, 60.0, 150.0, 300.0, 500.0, 1000.0,
            ],
        }
    }
}

impl TryFrom<Vec<f64>> for BValueSchedule {
    type Error = Error;
    fn try_from(b: Vec<f64>) -> Result<Self> {
        Self::new(b)
    }
}

impl From<BValueSchedule> for Vec<f64> {
    fn from(s: BValueSchedule) -> Self {
        s.b
    }
}

/// Noise level and seed. `snr = +inf` disables noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub snr: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(snr: f64, seed: u64) -> Result<Self> {
        if !(snr > 0.0) {
            return Err(Error::invalid(format!("snr must be > 0, got {snr}")));
        }
        Ok(Self { snr, seed })
    }

    pub fn noiseless(seed: u64) -> Self {
        Self {
            snr: f64::INFINITY,
            seed,
        }
    }

    pub fn is_noiseless(&self) -> bool {
        self.snr.is_infinite()
    }

    /// Standard deviation of the injected noise for a voxel with this `s0`.
    pub fn sigma(&self, s0: f64) -> f64 {
        if self.is_noiseless() {
            0.0
        } else {
            s0 / self.snr
        }
    }
}

/// What the stored signals are divided by.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// The noisy measured S(b = 0), as an acquisition would see it.
    #[default]
    Measured,
    /// The clean S0 (ablation).
    Clean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schedule: BValueSchedule,
    /// Row-major `n_voxels x n_b` normalized signals.
    pub signals: Vec<f64>,
    pub truth: Vec<IvimParams>,
    pub noise: NoiseSpec,
    pub ranges: ParamRanges,
    pub normalization: Normalization,
    /// Voxels whose noise had to be redrawn because the measured S(b=0) was <= 0.
    pub noise_redraws: u64,
}

impl Dataset {
    pub fn n_voxels(&self) -> usize {
        self.truth.len()
    }

    pub fn n_b(&self) -> usize {
        self.schedule.len()
    }

    pub fn signal(&self, i: usize) -> &[f64] {
        let nb = self.n_b();
        &self.signals[i * nb..(i + 1) * nb]
    }

    /// Keep only the voxels at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut signals = Vec::with_capacity(indices.len() * self.n_b());
        for &i in indices {
            signals.extend_from_slice(self.signal(i));
        }
        Dataset {
            signals,
            truth: indices.iter().map(|&i| self.truth[i]).collect(),
            ..self.clone()
        }
    }
}

/// Normalized IVIM signal without argument checks.
#[inline]
pub(crate) fn eval_signal(p: &IvimParams, b: f64) -> f64 {
    p.s0 * (p.f * (-b * p.dstar).exp() + (1.0 - p.f) * (-b * p.d).exp())
}

#[inline]
pub(crate) fn eval_gradient(p: &IvimParams, b: f64) -> [f64; 4] {
    let e_fast = (-b * p.dstar).exp();
    let e_slow = (-b * p.d).exp();
    [
        -b * p.s0 * (1.0 - p.f) * e_slow,
        -b * p.s0 * p.f * e_fast,
        p.s0 * (e_fast - e_slow),
        p.f * e_fast + (1.0 - p.f) * e_slow,
    ]
}

fn check_b(b: f64) -> Result<()> {
    if b.is_finite() && b >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "b-value must be finite and >= 0, got {b}"
        )))
    }
}

pub fn forward_signal(params: &IvimParams, b: f64) -> Result<f64> {
    check_b(b)?;
    Ok(eval_signal(params, b))
}

/// Partial derivatives `(dS/dD, dS/dDstar, dS/df, dS/dS0)`.
pub fn signal_gradient(params: &IvimParams, b: f64) -> Result<[f64; 4]> {
    check_b(b)?;
    Ok(eval_gradient(params, b))
}

const MAX_NOISE_REDRAWS: u32 = 10_000;

pub fn generate_dataset(
    ranges: &ParamRanges,
    schedule: &BValueSchedule,
    n_voxels: usize,
    noise: NoiseSpec,
) -> Result<Dataset> {
    generate_dataset_with(ranges, schedule, n_voxels, noise, Normalization::Measured)
}

/// Voxel `i` draws everything from stream `i` of `noise.seed`: four uniform
/// parameter draws, then one standard normal per b-value (repeated on redraw).
pub fn generate_dataset_with(
    ranges: &ParamRanges,
    schedule: &BValueSchedule,
    n_voxels: usize,
    noise: NoiseSpec,
    normalization: Normalization,
) -> Result<Dataset> {
    if n_voxels == 0 {
        return Err(Error::invalid("n_voxels must be > 0"));
    }
    ranges.validate()?;
    if !(noise.snr > 0.0) {
        return Err(Error::invalid(format!(
            "snr must be > 0, got {}",
            noise.snr
        )));
    }
    let zeros: Vec<usize> = schedule.zero_indices().collect();
    if zeros.is_empty() {
        return Err(Error::invalid("b-value schedule must contain b = 0"));
    }
    let nb = schedule.len();
    let b = schedule.values();

    let rows: Vec<Result<(Vec<f64>, IvimParams, u32)>> = par::map_range(n_voxels, |i| {
        let mut rng = stream_rng(noise.seed, i as u64);
        let mut draw = |r: Interval| r.min + r.width() * rng.random::<f64>();
        let p = IvimParams::new(
            draw(ranges.d),
            draw(ranges.dstar),
            draw(ranges.f),
            draw(ranges.s0),
        );
        let clean: Vec<f64> = b.iter().map(|&bv| eval_signal(&p, bv)).collect();
        let sigma = noise.sigma(p.s0);
        let mut redraws = 0u32;
        loop {
            let measured: Vec<f64> = if sigma == 0.0 {
                clean.clone()
            } else {
                clean
                    .iter()
                    .map(|&c| c + sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            };
            let s_b0 = zeros.iter().map(|&k| measured[k]).sum::<f64>() / zeros.len() as f64;
            if s_b0 > 0.0 {
                let denom = match normalization {
                    Normalization::Measured => s_b0,
                    Normalization::Clean => p.s0,
                };
                let row: Vec<f64> = measured.iter().map(|m| m / denom).collect();
                return Ok((row, p, redraws));
            }
            redraws += 1;
            if redraws >= MAX_NOISE_REDRAWS {
                return Err(Error::Infeasible(format!(
                    "voxel {i}: measured S(b=0) non-positive after {redraws} noise redraws (snr {})",
                    noise.snr
                )));
            }
        }
    });

    let mut signals = Vec::with_capacity(n_voxels * nb);
    let mut truth = Vec::with_capacity(n_voxels);
    let mut noise_redraws = 0u64;
    for r in rows {
        let (row, p, n) = r?;
        signals.extend_from_slice(&row);
        truth.push(p);
        noise_redraws += n as u64;
    }
    if signals.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("generated a non-finite signal"));
    }
    Ok(Dataset {
        schedule: schedule.clone(),
        signals,
        truth,
        noise,
        ranges: *ranges,
        normalization,
        noise_redraws,
    })
}

// ---------------------------------------------------------------------------
// IVDS v1 container

pub const IVDS_MAGIC: &str = "IVDS";
pub const IVDS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct IvdsHeader {
    magic: String,
    version: u32,
    n_voxels: usize,
    b_values: Vec<f64>,
    /// `null` when noise is disabled.
    snr: Option<f64>,
    seed: u64,
    ranges: ParamRanges,
    normalization: Normalization,
    noise_redraws: u64,
}

/// Encode as IVDS v1: JSON header line, then `f32` signals
/// `[n_voxels x n_b]`, then `f32` truth `[n_voxels x 4]` as (D, Dstar, f, S0).
pub fn write_ivds(ds: &Dataset) -> Result<Vec<u8>> {
    let header = IvdsHeader {
        magic: IVDS_MAGIC.into(),
        version: IVDS_VERSION,
        n_voxels: ds.n_voxels(),
        b_values: ds.schedule.values().to_vec(),
        snr: (!ds.noise.is_noiseless()).then_some(ds.noise.snr),
        seed: ds.noise.seed,
        ranges: ds.ranges,
        normalization: ds.normalization,
        noise_redraws: ds.noise_redraws,
    };
    let mut payload = Vec::with_capacity((ds.signals.len() + 4 * ds.n_voxels()) * 4);
    format::put_f32s(&mut payload, ds.signals.iter().map(|&x| x as f32));
    format::put_f32s(
        &mut payload,
        ds.truth.iter().flat_map(|p| p.to_array()).map(|x| x as f32),
    );
    format::frame(&header, &payload)
}

pub fn read_ivds(bytes: &[u8]) -> Result<Dataset> {
    let (h, payload): (IvdsHeader, _) = format::unframe(IVDS_MAGIC, bytes)?;
    format::check_magic(IVDS_MAGIC, &h.magic, h.version, IVDS_VERSION)?;
    let schedule = BValueSchedule::new(h.b_values)?;
    let nb = schedule.len();
    let mut r = LeReader::new(IVDS_MAGIC, payload);
    let signals: Vec<f64> = r
        .f32s(h.n_voxels * nb)?
        .into_iter()
        .map(f64::from)
        .collect();
    let truth = r
        .f32s(h.n_voxels * 4)?
        .chunks_exact(4)
        .map(|c| IvimParams::new(c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64))
        .collect();
    r.finish()?;
    if signals.iter().any(|s| !s.is_finite()) {
        return Err(Error::format(IVDS_MAGIC, "non-finite signal"));
    }
    let noise = match h.snr {
        Some(snr) => NoiseSpec::new(snr, h.seed)?,
        None => NoiseSpec::noiseless(h.seed),
    };
    Ok(Dataset {
        schedule,
        signals,
        truth,
        noise,
        ranges: h.ranges,
        normalization: h.normalization,
        noise_redraws: h.noise_redraws,
    })
}
