// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

//! Range equalization before quantization.
//!
//! For a ReLU channel `c` between layers `k` and `k+1`, scaling row `c` (and
//! bias `c`) of layer `k` by `a > 0` and column `c` of layer `k+1` by `1/a`
//! leaves the network function unchanged, since `relu(a x) = a relu(x)`. With
//! `a` a power of two the rescaling is exact in floating point too. Picking
//! `a = sqrt(r_next / r_this)` (rounded to a power of two) balances the two
//! ranges so both fit the fixed-point format with the most headroom.

use crate::error::{Error, Result};
use crate::network::{Linear, UIvimNet};

fn row_range(l: &Linear, c: usize) -> f64 {
    l.row(c)
        .iter()
        .chain(std::iter::once(&l.bias[c]))
        .fold(0.0f64, |m, x| m.max(x.abs()))
}

fn col_range(l: &Linear, c: usize) -> f64 {
    (0..l.out_dim).fold(0.0f64, |m, o| m.max(l.weight[o * l.in_dim + c].abs()))
}

fn balance(this: &mut Linear, next: &mut Linear) {
    for c in 0..this.out_dim {
        let (r1, r2) = (row_range(this, c), col_range(next, c));
        if r1 == 0.0 || r2 == 0.0 {
            continue;
        }
        let e = (0.5 * (r2 / r1).log2()).round() as i32;
        if e == 0 {
            continue;
        }
        let a = 2f64.powi(e);
        for w in &mut this.weight[c * this.in_dim..(c + 1) * this.in_dim] {
            *w *= a;
        }
        this.bias[c] *= a;
        for o in 0..next.out_dim {
            next.weight[o * next.in_dim + c] /= a;
        }
    }
}

/// Balance per-channel weight ranges across each ReLU of a folded network.
pub fn equalize_ranges(net: &UIvimNet) -> Result<UIvimNet> {
    if !net.is_folded() {
        return Err(Error::invalid(
            "equalization needs a batch-norm-folded network",
        ));
    }
    let mut out = net.clone();
    for sub in &mut out.subnets {
        // a second sweep settles the middle layer, which both pairs touch
        for _ in 0..2 {
            balance(&mut sub.layer1, &mut sub.layer2);
            balance(&mut sub.layer2, &mut sub.encoder);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::fold_batchnorm;
    use crate::network::tests::{random_net, test_voxel};

    #[test]
    fn function_is_preserved_exactly() {
        let mut net = fold_batchnorm(&random_net(11, 4, 0.3, 2)).unwrap();
        // skew ranges so that equalization has work to do
        for (c, b) in net.subnets[0].layer1.bias.iter_mut().enumerate() {
            *b *= 1.0 + c as f64 * 3.0;
        }
        let eq = equalize_ranges(&net).unwrap();
        assert_ne!(eq, net);
        let x = test_voxel(11);
        for s in 0..4 {
            assert_eq!(eq.logits(&x, s).unwrap(), net.logits(&x, s).unwrap());
        }
    }

    #[test]
    fn ranges_balance() {
        let mut net = fold_batchnorm(&random_net(6, 2, 0.0, 3)).unwrap();
        let sub = &mut net.subnets[1];
        sub.layer1.weight.iter_mut().for_each(|w| *w *= 64.0);
        sub.layer1.bias.iter_mut().for_each(|w| *w *= 64.0);
        let eq = equalize_ranges(&net).unwrap();
        let l1 = &eq.subnets[1].layer1;
        let l2 = &eq.subnets[1].layer2;
        for c in 0..6 {
            let ratio = row_range(l1, c) / col_range(l2, c);
            assert!((0.25..=4.0).contains(&ratio), "{ratio}");
        }
    }
}
