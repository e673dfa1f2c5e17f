// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

//! UIVM v1 model file.
//!
//! Layout: one JSON header line, then for each sub-network in the order
//! (D, Dstar, f, S0) these little-endian `f64` blocks:
//!
//! | block | length |
//! |---|---|
//! | layer1 weight (row-major out x in) | `n_b * n_b` |
//! | layer1 bias | `n_b` |
//! | bn1 gamma, beta, running mean, running var | `4 * n_b` |
//! | layer2 weight | `n_b * n_b` |
//! | layer2 bias | `n_b` |
//! | bn2 gamma, beta, running mean, running var | `4 * n_b` |
//! | encoder weight | `n_b` |
//! | encoder bias | `1` |
//!
//! followed by the eight packed mask sets (sub-network major, mask1 then
//! mask2), each `N * ceil(n_b / 8)` bytes with bits LSB-first.

use serde::{Deserialize, Serialize};

use super::{BatchNorm, Linear, NetMeta, SubNetwork, UIvimNet};
use crate::error::{Error, Result};
use crate::format::{self, LeReader};
use crate::ivim::{BValueSchedule, Interval};
use crate::masks::{MaskConfig, MaskSet};

pub const UIVM_MAGIC: &str = "UIVM";
pub const UIVM_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BnHeader {
    eps: f64,
    momentum: f64,
}

#[derive(Serialize, Deserialize)]
struct MaskHeader {
    config: MaskConfig,
    constraint_warning: bool,
}

#[derive(Serialize, Deserialize)]
struct SubHeader {
    param: String,
    range: Interval,
    bn: [BnHeader; 2],
    masks: [MaskHeader; 2],
}

#[derive(Serialize, Deserialize)]
struct UivmHeader {
    magic: String,
    version: u32,
    n_b: usize,
    n_samples: usize,
    b_values: Vec<f64>,
    folded: bool,
    subnets: Vec<SubHeader>,
    meta: NetMeta,
}

pub fn write_uivm(net: &UIvimNet) -> Result<Vec<u8>> {
    net.validate()?;
    let header = UivmHeader {
        magic: UIVM_MAGIC.into(),
        version: UIVM_VERSION,
        n_b: net.n_b(),
        n_samples: net.n_samples(),
        b_values: net.schedule.values().to_vec(),
        folded: net.is_folded(),
        subnets: net
            .subnets
            .iter()
            .zip(crate::ivim::Param::ALL)
            .map(|(s, p)| SubHeader {
                param: p.name().into(),
                range: s.range,
                bn: [&s.bn1, &s.bn2].map(|b| BnHeader {
                    eps: b.eps,
                    momentum: b.momentum,
                }),
                masks: [&s.masks[0], &s.masks[1]].map(|m| MaskHeader {
                    config: m.config().clone(),
                    constraint_warning: m.constraint_warning(),
                }),
            })
            .collect(),
        meta: net.meta.clone(),
    };
    let mut payload = Vec::new();
    for s in &net.subnets {
        format::put_f64s(&mut payload, &s.layer1.weight);
        format::put_f64s(&mut payload, &s.layer1.bias);
        put_bn(&mut payload, &s.bn1);
        format::put_f64s(&mut payload, &s.layer2.weight);
        format::put_f64s(&mut payload, &s.layer2.bias);
        put_bn(&mut payload, &s.bn2);
        format::put_f64s(&mut payload, &s.encoder.weight);
        format::put_f64s(&mut payload, &s.encoder.bias);
    }
    for s in &net.subnets {
        for m in &s.masks {
            payload.extend_from_slice(&m.to_packed());
        }
    }
    format::frame(&header, &payload)
}

fn put_bn(out: &mut Vec<u8>, bn: &BatchNorm) {
    for v in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
        format::put_f64s(out, v);
    }
}

fn read_linear(r: &mut LeReader, in_dim: usize, out_dim: usize) -> Result<Linear> {
    Ok(Linear {
        in_dim,
        out_dim,
        weight: r.f64s(in_dim * out_dim)?,
        bias: r.f64s(out_dim)?,
    })
}

fn read_bn(r: &mut LeReader, w: usize, h: &BnHeader) -> Result<BatchNorm> {
    Ok(BatchNorm {
        gamma: r.f64s(w)?,
        beta: r.f64s(w)?,
        running_mean: r.f64s(w)?,
        running_var: r.f64s(w)?,
        eps: h.eps,
        momentum: h.momentum,
    })
}

pub fn read_uivm(bytes: &[u8]) -> Result<UIvimNet> {
    let (h, payload): (UivmHeader, _) = format::unframe(UIVM_MAGIC, bytes)?;
    format::check_magic(UIVM_MAGIC, &h.magic, h.version, UIVM_VERSION)?;
    if h.subnets.len() != 4 {
        return Err(Error::format(UIVM_MAGIC, "expected 4 sub-networks"));
    }
    let schedule = BValueSchedule::new(h.b_values)?;
    let w = h.n_b;
    if schedule.len() != w {
        return Err(Error::format(UIVM_MAGIC, "n_b disagrees with b_values"));
    }
    let mut r = LeReader::new(UIVM_MAGIC, payload);
    let mut parts = Vec::with_capacity(4);
    for sh in &h.subnets {
        let layer1 = read_linear(&mut r, w, w)?;
        let bn1 = read_bn(&mut r, w, &sh.bn[0])?;
        let layer2 = read_linear(&mut r, w, w)?;
        let bn2 = read_bn(&mut r, w, &sh.bn[1])?;
        let encoder = read_linear(&mut r, w, 1)?;
        parts.push((layer1, bn1, layer2, bn2, encoder));
    }
    let mut subnets = Vec::with_capacity(4);
    for (sh, (layer1, bn1, layer2, bn2, encoder)) in h.subnets.into_iter().zip(parts) {
        let [m0, m1] = sh.masks;
        let mut load = |mh: MaskHeader| -> Result<MaskSet> {
            let len = MaskSet::packed_len(&mh.config);
            MaskSet::from_packed(mh.config, r.bytes(len)?, mh.constraint_warning)
        };
        let masks = [load(m0)?, load(m1)?];
        subnets.push(SubNetwork {
            layer1,
            bn1,
            layer2,
            bn2,
            encoder,
            masks,
            range: sh.range,
        });
    }
    r.finish()?;
    let net = UIvimNet {
        subnets,
        schedule,
        meta: h.meta,
    };
    net.validate()?;
    if net.n_samples() != h.n_samples {
        return Err(Error::format(
            UIVM_MAGIC,
            "n_samples disagrees with mask sets",
        ));
    }
    Ok(net)
}
