// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

//! Signed Q3.12 words: 16 bits, 4 integer bits including the sign.

use serde::{Deserialize, Serialize};

pub const FRAC_BITS: u32 = 12;
pub const SCALE: f64 = (1u32 << FRAC_BITS) as f64;
/// Largest representable value, `8 - 2^-12`.
pub const MAX_VALUE: f64 = i16::MAX as f64 / SCALE;
pub const MIN_VALUE: f64 = i16::MIN as f64 / SCALE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointFormat {
    pub total_bits: u32,
    pub integer_bits: u32,
    pub fractional_bits: u32,
}

impl Default for FixedPointFormat {
    fn default() -> Self {
        Self {
            total_bits: 16,
            integer_bits: 4,
            fractional_bits: FRAC_BITS,
        }
    }
}

/// Round to the nearest multiple of 2^-12 (ties to even) and saturate.
/// NaN maps to zero.
pub fn quantize(x: f64) -> i16 {
    if x.is_nan() {
        return 0;
    }
    (x * SCALE)
        .round_ties_even()
        .clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn dequantize(w: i16) -> f64 {
    w as f64 / SCALE
}

pub fn quantize_slice(xs: &[f64]) -> Vec<i16> {
    xs.iter().map(|&x| quantize(x)).collect()
}

/// Exact sum of 32-bit products. Used directly by chunked datapaths that
/// accumulate partial sums before the single final rounding.
#[inline]
pub fn dot_acc(weights: &[i16], inputs: &[i16]) -> i64 {
    weights
        .iter()
        .zip(inputs)
        .map(|(&w, &x)| (w as i32 * x as i32) as i64)
        .sum()
}

/// Shift a Q*.24 accumulator back to Q3.12: bias add, one round-half-even,
/// saturate.
#[inline]
pub fn finish_acc(acc: i64, bias: i16) -> i16 {
    let acc = acc + ((bias as i64) << FRAC_BITS);
    let q = acc >> FRAC_BITS;
    let r = acc - (q << FRAC_BITS);
    let half = 1i64 << (FRAC_BITS - 1);
    let q = if r > half || (r == half && q & 1 == 1) {
        q + 1
    } else {
        q
    };
    q.clamp(i16::MIN as i64, i16::MAX as i64) as i16
}

/// Dot product plus bias with a single rounding point.
pub fn fixed_mul_acc(weights: &[i16], inputs: &[i16], bias: i16) -> i16 {
    debug_assert_eq!(weights.len(), inputs.len());
    finish_acc(dot_acc(weights, inputs), bias)
}

#[inline]
pub fn relu(w: i16) -> i16 {
    w.max(0)
}
