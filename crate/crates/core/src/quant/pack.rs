// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use super::fixed::{dequantize, fixed_mul_acc, quantize, relu, FixedPointFormat};
use crate::error::{Error, Result};
use crate::format::{self, LeReader};
use crate::ivim::{Interval, IvimParams, Param};
use crate::network::{convert, Linear, UIvimNet};

/// One quantized layer restricted to kept rows and columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedLayer {
    /// Dense output indices of the stored rows, strictly increasing.
    pub rows: Vec<usize>,
    /// Dense input indices of the stored columns, strictly increasing.
    pub cols: Vec<usize>,
    /// Row-major `rows.len() x cols.len()`.
    pub weight: Vec<i16>,
    pub bias: Vec<i16>,
}

impl PackedLayer {
    fn gather(dense: &Linear, rows: Vec<usize>, cols: Vec<usize>, saturated: &mut usize) -> Self {
        let mut q = |x: f64| {
            let r = (x * super::SCALE).round_ties_even();
            if r > i16::MAX as f64 || r < i16::MIN as f64 {
                *saturated += 1;
            }
            quantize(x)
        };
        let mut weight = Vec::with_capacity(rows.len() * cols.len());
        for &r in &rows {
            let row = dense.row(r);
            weight.extend(cols.iter().map(|&c| q(row[c])));
        }
        let bias = rows.iter().map(|&r| q(dense.bias[r])).collect();
        Self {
            rows,
            cols,
            weight,
            bias,
        }
    }

    pub fn row(&self, i: usize) -> &[i16] {
        let n = self.cols.len();
        &self.weight[i * n..(i + 1) * n]
    }

    pub fn c_in(&self) -> usize {
        self.cols.len()
    }

    pub fn c_out(&self) -> usize {
        self.rows.len()
    }

    /// Stored 16-bit words, weights plus biases.
    pub fn words(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Fixed-point affine map over the stored rows, inputs given in `cols` order.
    pub fn apply(&self, x: &[i16], relu_out: bool) -> Vec<i16> {
        (0..self.rows.len())
            .map(|i| {
                let y = fixed_mul_acc(self.row(i), x, self.bias[i]);
                if relu_out {
                    relu(y)
                } else {
                    y
                }
            })
            .collect()
    }
}

/// Weights one sample uses in one sub-network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedSample {
    pub hidden1: PackedLayer,
    pub hidden2: PackedLayer,
    pub encoder: PackedLayer,
}

impl PackedSample {
    pub fn layers(&self) -> [&PackedLayer; 3] {
        [&self.hidden1, &self.hidden2, &self.encoder]
    }

    pub fn words(&self) -> usize {
        self.layers().iter().map(|l| l.words()).sum()
    }

    fn logit(&self, voxel: &[i16]) -> i16 {
        let a1 = self.hidden1.apply(voxel, true);
        let a2 = self.hidden2.apply(&a1, true);
        self.encoder.apply(&a2, false)[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedSubnet {
    pub range: Interval,
    pub samples: Vec<PackedSample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedWeightStore {
    pub format: FixedPointFormat,
    pub n_b: usize,
    pub b_values: Vec<f64>,
    /// Ordered (D, Dstar, f, S0).
    pub subnets: Vec<PackedSubnet>,
    /// Weights or biases that fell outside the representable range.
    pub saturated_weights: usize,
}

/// Per sub-network, per sample kept counts `(hidden1, hidden2)`. Enough to
/// drive the timing and resource models without weights.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetDims {
    pub n_b: usize,
    pub kept: Vec<Vec<(usize, usize)>>,
}

impl NetDims {
    pub fn uniform(n_b: usize, n_samples: usize, kept1: usize, kept2: usize) -> Self {
        Self {
            n_b,
            kept: vec![vec![(kept1, kept2); n_samples]; 4],
        }
    }

    pub fn n_samples(&self) -> usize {
        self.kept.first().map_or(0, |s| s.len())
    }

    /// `(c_out, c_in)` of each layer in execution order.
    pub fn layer_shapes(&self, subnet: usize, sample: usize) -> [(usize, usize); 3] {
        let (k1, k2) = self.kept[subnet][sample];
        [(k1, self.n_b), (k2, k1), (1, k2)]
    }

    /// Words one weight load moves: all four sub-networks for one sample.
    pub fn sample_words(&self, sample: usize) -> usize {
        (0..self.kept.len())
            .map(|j| {
                self.layer_shapes(j, sample)
                    .iter()
                    .map(|&(o, i)| o * i + o)
                    .sum::<usize>()
            })
            .sum()
    }

    pub fn total_words(&self) -> usize {
        (0..self.n_samples()).map(|s| self.sample_words(s)).sum()
    }
}

impl PackedWeightStore {
    pub fn n_samples(&self) -> usize {
        self.subnets[0].samples.len()
    }

    pub fn sample_words(&self, sample: usize) -> usize {
        self.subnets.iter().map(|s| s.samples[sample].words()).sum()
    }

    /// All stored words, `N` copies included.
    pub fn total_words(&self) -> usize {
        (0..self.n_samples()).map(|s| self.sample_words(s)).sum()
    }

    pub fn dims(&self) -> NetDims {
        NetDims {
            n_b: self.n_b,
            kept: self
                .subnets
                .iter()
                .map(|sub| {
                    sub.samples
                        .iter()
                        .map(|p| (p.hidden1.c_out(), p.hidden2.c_out()))
                        .collect()
                })
                .collect(),
        }
    }

    fn check_voxel(&self, voxel: &[i16], sample: usize) -> Result<()> {
        if voxel.len() != self.n_b {
            return Err(Error::DimensionMismatch {
                expected: self.n_b,
                got: voxel.len(),
            });
        }
        if sample >= self.n_samples() {
            return Err(Error::invalid(format!(
                "sample {sample} out of range (N = {})",
                self.n_samples()
            )));
        }
        Ok(())
    }
}

/// Head post-processing: dequantize the encoder output, sigmoid, convert.
pub(crate) fn logits_to_params(store: &PackedWeightStore, logits: [i16; 4]) -> IvimParams {
    let mut p = [0.0; 4];
    for (j, sub) in store.subnets.iter().enumerate() {
        p[j] = convert(dequantize(logits[j]), sub.range);
    }
    IvimParams::from_array(p)
}

/// Quantize a batch-norm-folded network into the packed store. Channel
/// ranges are equalized first (an exact rewrite of the float network).
pub fn pack_weights(net: &UIvimNet) -> Result<PackedWeightStore> {
    net.validate()?;
    if !net.is_folded() {
        return Err(Error::invalid(
            "pack_weights needs a batch-norm-folded network",
        ));
    }
    let net = &super::equalize_ranges(net)?;
    let n_b = net.n_b();
    let mut saturated = 0;
    let mut subnets = Vec::with_capacity(4);
    for sub in &net.subnets {
        let mut samples = Vec::with_capacity(net.n_samples());
        for s in 0..net.n_samples() {
            let kept1 = sub.masks[0].kept_indices(s);
            let kept2 = sub.masks[1].kept_indices(s);
            if kept1.is_empty() || kept2.is_empty() {
                return Err(Error::invalid(format!("sample {s} keeps no channels")));
            }
            samples.push(PackedSample {
                hidden1: PackedLayer::gather(
                    &sub.layer1,
                    kept1.clone(),
                    (0..n_b).collect(),
                    &mut saturated,
                ),
                hidden2: PackedLayer::gather(&sub.layer2, kept2.clone(), kept1, &mut saturated),
                encoder: PackedLayer::gather(&sub.encoder, vec![0], kept2, &mut saturated),
            });
        }
        subnets.push(PackedSubnet {
            range: sub.range,
            samples,
        });
    }
    if saturated > 0 {
        log::warn!("{saturated} weights saturated during quantization");
    }
    Ok(PackedWeightStore {
        format: FixedPointFormat::default(),
        n_b,
        b_values: net.schedule.values().to_vec(),
        subnets,
        saturated_weights: saturated,
    })
}

/// Raw encoder outputs of the four heads for one sample.
pub fn quantized_logits(
    store: &PackedWeightStore,
    voxel: &[i16],
    sample: usize,
) -> Result<[i16; 4]> {
    store.check_voxel(voxel, sample)?;
    let mut out = [0i16; 4];
    for (j, sub) in store.subnets.iter().enumerate() {
        out[j] = sub.samples[sample].logit(voxel);
    }
    Ok(out)
}

/// Reference fixed-point inference for one (voxel, sample).
pub fn quantized_forward(
    store: &PackedWeightStore,
    voxel: &[i16],
    sample: usize,
) -> Result<IvimParams> {
    Ok(logits_to_params(
        store,
        quantized_logits(store, voxel, sample)?,
    ))
}

/// One sample's weights scattered back to dense shape with zeros.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseSample {
    pub n_b: usize,
    /// Per sub-network: `[w1, b1, w2, b2, we, be]`.
    pub blocks: Vec<[Vec<i16>; 6]>,
}

impl DenseSample {
    /// Dense fixed-point forward (zeros everywhere a mask dropped a channel).
    pub fn logits(&self, voxel: &[i16]) -> [i16; 4] {
        let n = self.n_b;
        let mut out = [0i16; 4];
        for (j, [w1, b1, w2, b2, we, be]) in self.blocks.iter().enumerate() {
            let a1: Vec<i16> = (0..n)
                .map(|o| relu(fixed_mul_acc(&w1[o * n..(o + 1) * n], voxel, b1[o])))
                .collect();
            let a2: Vec<i16> = (0..n)
                .map(|o| relu(fixed_mul_acc(&w2[o * n..(o + 1) * n], &a1, b2[o])))
                .collect();
            out[j] = fixed_mul_acc(we, &a2, be[0]);
        }
        out
    }
}

pub fn unpack_dense(store: &PackedWeightStore, sample: usize) -> DenseSample {
    let n = store.n_b;
    let scatter = |l: &PackedLayer, out_dim: usize| {
        let mut w = vec![0i16; out_dim * n];
        let mut b = vec![0i16; out_dim];
        for (i, &r) in l.rows.iter().enumerate() {
            for (k, &c) in l.cols.iter().enumerate() {
                w[r * n + c] = l.row(i)[k];
            }
            b[r] = l.bias[i];
        }
        (w, b)
    };
    let blocks = store
        .subnets
        .iter()
        .map(|sub| {
            let p = &sub.samples[sample];
            let (w1, b1) = scatter(&p.hidden1, n);
            let (w2, b2) = scatter(&p.hidden2, n);
            let (we, be) = scatter(&p.encoder, 1);
            [w1, b1, w2, b2, we, be]
        })
        .collect();
    DenseSample { n_b: n, blocks }
}

pub const UIVQ_MAGIC: &str = "UIVQ";
pub const UIVQ_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SampleHeader {
    kept1: Vec<usize>,
    kept2: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SubHeader {
    param: String,
    range: Interval,
    samples: Vec<SampleHeader>,
}

#[derive(Serialize, Deserialize)]
struct UivqHeader {
    magic: String,
    version: u32,
    format: FixedPointFormat,
    n_b: usize,
    n_samples: usize,
    b_values: Vec<f64>,
    saturated_weights: usize,
    subnets: Vec<SubHeader>,
}

/// UIVQ v1: JSON header with index maps, then per sub-network (D, Dstar, f,
/// S0) and per sample the little-endian `i16` blocks: hidden1 weight (kept1 x
/// n_b), hidden1 bias, hidden2 weight (kept2 x kept1), hidden2 bias, encoder
/// weight (kept2), encoder bias (1).
pub fn write_uivq(store: &PackedWeightStore) -> Result<Vec<u8>> {
    let header = UivqHeader {
        magic: UIVQ_MAGIC.into(),
        version: UIVQ_VERSION,
        format: store.format,
        n_b: store.n_b,
        n_samples: store.n_samples(),
        b_values: store.b_values.clone(),
        saturated_weights: store.saturated_weights,
        subnets: store
            .subnets
            .iter()
            .zip(Param::ALL)
            .map(|(sub, p)| SubHeader {
                param: p.name().into(),
                range: sub.range,
                samples: sub
                    .samples
                    .iter()
                    .map(|s| SampleHeader {
                        kept1: s.hidden1.rows.clone(),
                        kept2: s.hidden2.rows.clone(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let mut payload = Vec::with_capacity(2 * store.total_words());
    for sub in &store.subnets {
        for s in &sub.samples {
            for l in s.layers() {
                format::put_i16s(&mut payload, &l.weight);
                format::put_i16s(&mut payload, &l.bias);
            }
        }
    }
    format::frame(&header, &payload)
}

fn check_index_map(idx: &[usize], n_b: usize) -> Result<()> {
    if idx.is_empty()
        || idx.windows(2).any(|w| w[0] >= w[1])
        || idx.last().is_some_and(|&l| l >= n_b)
    {
        return Err(Error::format(
            UIVQ_MAGIC,
            "index map must be nonempty, strictly increasing, and in range",
        ));
    }
    Ok(())
}

pub fn read_uivq(bytes: &[u8]) -> Result<PackedWeightStore> {
    let (h, payload): (UivqHeader, _) = format::unframe(UIVQ_MAGIC, bytes)?;
    format::check_magic(UIVQ_MAGIC, &h.magic, h.version, UIVQ_VERSION)?;
    if h.format != FixedPointFormat::default() {
        return Err(Error::format(UIVQ_MAGIC, "unsupported fixed-point format"));
    }
    if h.subnets.len() != 4 || h.b_values.len() != h.n_b || h.n_samples == 0 {
        return Err(Error::format(UIVQ_MAGIC, "inconsistent header dimensions"));
    }
    let n_b = h.n_b;
    let mut r = LeReader::new(UIVQ_MAGIC, payload);
    let mut layer = |rows: Vec<usize>, cols: Vec<usize>| -> Result<PackedLayer> {
        let weight = r.i16s(rows.len() * cols.len())?;
        let bias = r.i16s(rows.len())?;
        Ok(PackedLayer {
            rows,
            cols,
            weight,
            bias,
        })
    };
    let mut subnets = Vec::with_capacity(4);
    for sh in h.subnets {
        if sh.samples.len() != h.n_samples {
            return Err(Error::format(
                UIVQ_MAGIC,
                "sample count differs between sub-networks",
            ));
        }
        let mut samples = Vec::with_capacity(h.n_samples);
        for s in sh.samples {
            check_index_map(&s.kept1, n_b)?;
            check_index_map(&s.kept2, n_b)?;
            samples.push(PackedSample {
                hidden1: layer(s.kept1.clone(), (0..n_b).collect())?,
                hidden2: layer(s.kept2.clone(), s.kept1)?,
                encoder: layer(vec![0], s.kept2)?,
            });
        }
        subnets.push(PackedSubnet {
            range: sh.range,
            samples,
        });
    }
    r.finish()?;
    Ok(PackedWeightStore {
        format: h.format,
        n_b,
        b_values: h.b_values,
        subnets,
        saturated_weights: h.saturated_weights,
    })
}
