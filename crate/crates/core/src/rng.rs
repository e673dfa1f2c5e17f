// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

//! Seed derivation and counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by a
//! 64-bit seed. Independent work items (voxels, mask layers, sub-networks,
//! epochs) select their own ChaCha *stream* instead of sharing one sequential
//! generator, so the values an item sees depend only on `(seed, stream)` and
//! never on evaluation order or thread count.
//!
//! Child seeds are derived with a SplitMix64 finalizer over `(parent, tag)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a tag.
pub fn derive_seed(parent: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ tag.rotate_left(17) ^ 0xD6E8_FEB8_6659_FD93)
}

/// Tag for a string label, for readable call sites (`derive_seed(s, tag("masks"))`).
pub const fn tag(label: &str) -> u64 {
    // FNV-1a
    let bytes = label.as_bytes();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut i = 0;
    while i < bytes.len() {
        h ^= bytes[i] as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
        i += 1;
    }
    h
}

/// Generator for stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
