// Licensed under the Apache License, Version 2.0, see LICENSE for details.
// SPDX-License-Identifier: Apache-2.0

//! Shared framing for the binary artifact files.
//!
//! Every artifact (IVDS datasets, UIVM models, UIVQ packed stores) is laid out
//! as one line of compact JSON terminated by `0x0A`, followed immediately by
//! little-endian binary blocks. The JSON carries a `magic` and `version`
//! field; the block layout is fixed per file kind.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Serialize `header` as a single JSON line and append `payload`.
pub fn frame<H: Serialize>(header: &H, payload: &[u8]) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(header)?;
    debug_assert!(!out.contains(&b'\n'));
    out.push(b'\n');
    out.extend_from_slice(payload);
    Ok(out)
}

/// Split a framed file into its parsed header and the binary payload.
pub fn unframe<'a, H: DeserializeOwned>(
    kind: &'static str,
    bytes: &'a [u8],
) -> Result<(H, &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(kind, "missing header terminator"))?;
    let header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::format(kind, format!("header: {e}")))?;
    Ok((header, &bytes[nl + 1..]))
}

pub fn check_magic(
    kind: &'static str,
    magic: &str,
    version: u32,
    expected_version: u32,
) -> Result<()> {
    if magic != kind {
        return Err(Error::format(kind, format!("bad magic {magic:?}")));
    }
    if version != expected_version {
        return Err(Error::format(
            kind,
            format!("unsupported version {version}"),
        ));
    }
    Ok(())
}

/// Little-endian reader over a payload slice.
pub struct LeReader<'a> {
    kind: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> LeReader<'a> {
    pub fn new(kind: &'static str, buf: &'a [u8]) -> Self {
        Self { kind, buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format(self.kind, "truncated payload"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn i16s(&mut self, n: usize) -> Result<Vec<i16>> {
        Ok(self
            .take(n * 2)?
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.kind,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn put_f32s(out: &mut Vec<u8>, xs: impl IntoIterator<Item = f32>) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn put_i16s(out: &mut Vec<u8>, xs: &[i16]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Write via a sibling temp file and rename, so a failed run never leaves a
/// half-written artifact behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
