// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

//! Fixed binary masks standing in for dropout.
//!
//! A [`MaskSet`] holds `N` rows over `C` channels. Row `s` is the mask used by
//! sample `s`, both while training and at inference, so the network carries no
//! runtime randomness. Kept activations are passed through unscaled.
//!
//! Construction is stratified: the channels are shuffled and dealt round-robin
//! into `N` buckets that every row must keep (so no channel is dead in all
//! rows), then each row is topped up to exactly `k = round(C * (1 - p))`
//! channels by sampling the rest without replacement. Rows are re-sampled to
//! stay pairwise distinct and, optionally, under a Jaccard overlap cap.

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

const ROW_RETRY_BUDGET: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub n_samples: usize,
    pub width: usize,
    pub drop_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub max_overlap: Option<f64>,
}

impl MaskConfig {
    pub fn new(n_samples: usize, width: usize, drop_rate: f64, seed: u64) -> Self {
        Self {
            n_samples,
            width,
            drop_rate,
            seed,
            max_overlap: None,
        }
    }

    /// Channels kept per row.
    pub fn keep_count(&self) -> usize {
        (self.width as f64 * (1.0 - self.drop_rate)).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.width == 0 {
            return Err(Error::invalid(
                "mask set needs n_samples >= 1 and width >= 1",
            ));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::invalid(format!(
                "drop rate {} outside [0, 1)",
                self.drop_rate
            )));
        }
        if let Some(cap) = self.max_overlap {
            if !(0.0..=1.0).contains(&cap) {
                return Err(Error::invalid(format!("overlap cap {cap} outside [0, 1]")));
            }
        }
        let k = self.keep_count();
        if k == 0 {
            return Err(Error::Infeasible(format!(
                "drop rate {} keeps no channel of {}",
                self.drop_rate, self.width
            )));
        }
        if k * self.n_samples < self.width {
            return Err(Error::Infeasible(format!(
                "{} masks keeping {k} of {} channels cannot cover every channel",
                self.n_samples, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    config: MaskConfig,
    /// Row-major `N x C`, entries 0 or 1.
    bits: Vec<u8>,
    /// True when the overlap cap or row distinctness could not be met within
    /// the retry budget.
    constraint_warning: bool,
}

fn binomial_at_least(n: usize, k: usize, target: usize) -> bool {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc >= target as u128 {
            return true;
        }
    }
    acc >= target as u128
}

fn jaccard(a: &[u8], b: &[u8]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn generate_masks(config: &MaskConfig) -> Result<MaskSet> {
    config.validate()?;
    let (n, c, k) = (config.n_samples, config.width, config.keep_count());
    let mut rng = stream_rng(config.seed, 0);

    let mut perm: Vec<usize> = (0..c).collect();
    perm.shuffle(&mut rng);
    let mut guaranteed = vec![Vec::new(); n];
    for (j, &ch) in perm.iter().enumerate() {
        guaranteed[j % n].push(ch);
    }

    let want_distinct = binomial_at_least(c, k, n);
    let mut bits = vec![0u8; n * c];
    let mut warning = false;
    for r in 0..n {
        let base: Vec<u8> = {
            let mut row = vec![0u8; c];
            for &ch in &guaranteed[r] {
                row[ch] = 1;
            }
            row
        };
        let free: Vec<usize> = (0..c).filter(|&ch| base[ch] == 0).collect();
        let extra = k - guaranteed[r].len();

        let mut best: Option<(Vec<u8>, (usize, f64))> = None;
        for _ in 0..ROW_RETRY_BUDGET {
            let mut row = base.clone();
            for i in index::sample(&mut rng, free.len(), extra) {
                row[free[i]] = 1;
            }
            let prev = &bits[..r * c];
            let dups = if want_distinct {
                prev.chunks_exact(c)
                    .filter(|p| *p == row.as_slice())
                    .count()
            } else {
                0
            };
            let excess = match config.max_overlap {
                Some(cap) => prev
                    .chunks_exact(c)
                    .map(|p| (jaccard(p, &row) - cap).max(0.0))
                    .fold(0.0, f64::max),
                None => 0.0,
            };
            let score = (dups, excess);
            let better = best
                .as_ref()
                .is_none_or(|(_, s)| score.0 < s.0 || (score.0 == s.0 && score.1 < s.1));
            if better {
                best = Some((row, score));
            }
            if score == (0, 0.0) {
                break;
            }
        }
        let (row, score) = best.expect("retry budget is nonzero");
        if score != (0, 0.0) {
            warning = true;
        }
        bits[r * c..(r + 1) * c].copy_from_slice(&row);
    }
    if warning {
        log::warn!(
            "mask set (N={n}, C={c}, k={k}) did not meet distinctness/overlap constraints within budget"
        );
    }
    Ok(MaskSet {
        config: config.clone(),
        bits,
        constraint_warning: warning,
    })
}

impl MaskSet {
    /// Build from explicit rows, checking the ones-count and coverage invariants.
    pub fn from_rows(config: MaskConfig, rows: &[Vec<u8>]) -> Result<Self> {
        config.validate()?;
        let (n, c, k) = (config.n_samples, config.width, config.keep_count());
        if rows.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: rows.len(),
            });
        }
        let mut bits = Vec::with_capacity(n * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::DimensionMismatch {
                    expected: c,
                    got: row.len(),
                });
            }
            if row.iter().any(|&b| b > 1) {
                return Err(Error::invalid("mask entries must be 0 or 1"));
            }
            if row.iter().filter(|&&b| b == 1).count() != k {
                return Err(Error::invalid(format!(
                    "mask row must keep exactly {k} channels"
                )));
            }
            bits.extend_from_slice(row);
        }
        let set = MaskSet {
            config,
            bits,
            constraint_warning: false,
        };
        if !set.covers_all_channels() {
            return Err(Error::invalid("some channel is dropped by every mask"));
        }
        Ok(set)
    }

    pub fn config(&self) -> &MaskConfig {
        &self.config
    }

    pub fn n_samples(&self) -> usize {
        self.config.n_samples
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn keep_count(&self) -> usize {
        self.config.keep_count()
    }

    pub fn constraint_warning(&self) -> bool {
        self.constraint_warning
    }

    pub fn row(&self, sample: usize) -> &[u8] {
        let c = self.width();
        &self.bits[sample * c..(sample + 1) * c]
    }

    #[inline]
    pub fn is_kept(&self, sample: usize, channel: usize) -> bool {
        self.bits[sample * self.width() + channel] == 1
    }

    /// Strictly increasing indices of the channels row `sample` keeps.
    pub fn kept_indices(&self, sample: usize) -> Vec<usize> {
        self.row(sample)
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn covers_all_channels(&self) -> bool {
        let c = self.width();
        (0..c).all(|ch| (0..self.n_samples()).any(|s| self.bits[s * c + ch] == 1))
    }

    pub fn max_pairwise_overlap(&self) -> f64 {
        let n = self.n_samples();
        let mut m: f64 = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                m = m.max(jaccard(self.row(i), self.row(j)));
            }
        }
        m
    }

    /// Rows packed LSB-first, `ceil(C / 8)` bytes per row.
    pub fn to_packed(&self) -> Vec<u8> {
        let c = self.width();
        let stride = c.div_ceil(8);
        let mut out = vec![0u8; self.n_samples() * stride];
        for s in 0..self.n_samples() {
            for ch in 0..c {
                if self.is_kept(s, ch) {
                    out[s * stride + ch / 8] |= 1 << (ch % 8);
                }
            }
        }
        out
    }

    pub fn packed_len(config: &MaskConfig) -> usize {
        config.n_samples * config.width.div_ceil(8)
    }

    pub fn from_packed(
        config: MaskConfig,
        packed: &[u8],
        constraint_warning: bool,
    ) -> Result<Self> {
        let c = config.width;
        let stride = c.div_ceil(8);
        if packed.len() != config.n_samples * stride {
            return Err(Error::DimensionMismatch {
                expected: config.n_samples * stride,
                got: packed.len(),
            });
        }
        let rows: Vec<Vec<u8>> = packed
            .chunks_exact(stride)
            .map(|r| (0..c).map(|ch| (r[ch / 8] >> (ch % 8)) & 1).collect())
            .collect();
        let mut set = Self::from_rows(config, &rows)?;
        set.constraint_warning = constraint_warning;
        Ok(set)
    }
}

pub fn apply_mask(activations: &[f64], masks: &MaskSet, sample: usize) -> Result<Vec<f64>> {
    if activations.len() != masks.width() {
        return Err(Error::DimensionMismatch {
            expected: masks.width(),
            got: activations.len(),
        });
    }
    if sample >= masks.n_samples() {
        return Err(Error::invalid(format!(
            "sample index {sample} out of range for {} masks",
            masks.n_samples()
        )));
    }
    Ok(activations
        .iter()
        .zip(masks.row(sample))
        .map(|(&a, &m)| if m == 1 { a } else { 0.0 })
        .collect())
}
