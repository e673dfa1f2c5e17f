// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

use proptest::prelude::*;
use uivim::quant::{dequantize, fixed_mul_acc, quantize, relu, MAX_VALUE, MIN_VALUE};

/// Exact sum in i128, then round half to even and saturate.
fn oracle(w: &[i16], x: &[i16], bias: i16) -> i16 {
    let acc: i128 = w
        .iter()
        .zip(x)
        .map(|(&a, &b)| a as i128 * b as i128)
        .sum::<i128>()
        + ((bias as i128) << 12);
    let q = acc.div_euclid(4096);
    let r = acc.rem_euclid(4096);
    let q = if r > 2048 || (r == 2048 && q % 2 != 0) {
        q + 1
    } else {
        q
    };
    q.clamp(i16::MIN as i128, i16::MAX as i128) as i16
}

fn pair() -> impl Strategy<Value = (Vec<i16>, Vec<i16>, i16)> {
    (1usize..160).prop_flat_map(|n| {
        (
            prop::collection::vec(-6000i16..6000, n),
            prop::collection::vec(-6000i16..6000, n),
            any::<i16>(),
        )
    })
}

proptest! {
    #[test]
    fn mul_acc_matches_wide_integer_oracle((w, x, b) in pair()) {
        prop_assert_eq!(fixed_mul_acc(&w, &x, b), oracle(&w, &x, b));
    }

    #[test]
    fn quantize_is_monotone(a in -10.0..10.0f64, b in -10.0..10.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(quantize(lo) <= quantize(hi));
    }

    #[test]
    fn quantize_error_is_half_a_step_in_range(x in -7.99..7.99f64) {
        prop_assert!((dequantize(quantize(x)) - x).abs() <= 0.5 / 4096.0);
    }
}

#[test]
fn format_limits() {
    assert_eq!(quantize(1.0), 4096);
    assert_eq!(quantize(100.0), i16::MAX);
    assert_eq!(quantize(-100.0), i16::MIN);
    assert_eq!(dequantize(i16::MIN), -8.0);
    assert_eq!(MIN_VALUE, -8.0);
    assert!((MAX_VALUE - (8.0 - 1.0 / 4096.0)).abs() < 1e-15);
    // half-way between two words goes to the even one
    assert_eq!(quantize(0.5 / 4096.0), 0);
    assert_eq!(quantize(1.5 / 4096.0), 2);
    assert_eq!(relu(-5), 0);
    assert_eq!(relu(5), 5);
}

#[test]
fn one_times_one_plus_bias() {
    // 1.0 * 1.0 + 0.5 = 1.5
    assert_eq!(fixed_mul_acc(&[4096], &[4096], 2048), 6144);
    // 2 * 4 saturates
    assert_eq!(fixed_mul_acc(&[8192], &[16384], 0), i16::MAX);
}
