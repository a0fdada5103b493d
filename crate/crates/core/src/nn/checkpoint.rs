//! Binary checkpoint for a [`ParamSet`].
//!
//! ```text
//! "SFQL" | u16 version | u32 layer_count | (u32 in, u32 out) × layer_count
//! | online (weights, biases) per layer | ema copy | adam m | adam v | u64 step
//! ```
//!
//! All numbers little-endian, parameters as `f32`.

use std::io::{Read, Write};
use std::path::Path;

use super::mlp::{Dense, LayerSpec, Mlp};
use super::param_set::ParamSet;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SFQL";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.parameter_count() * 16);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.online.layers.len() as u32).to_le_bytes());
    for layer in &params.online.layers {
        out.extend_from_slice(&(layer.in_dim as u32).to_le_bytes());
        out.extend_from_slice(&(layer.out_dim as u32).to_le_bytes());
    }
    for net in [&params.online, &params.target, &params.adam_m, &params.adam_v] {
        for v in net.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&params.step.to_le_bytes());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Option<Vec<f32>> {
        let b = self.take(n * 4)?;
        Some(
            b.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<ParamSet> {
    let bad = |reason: &str| Error::format(origin, reason);
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(bad("missing SFQL magic"));
    }
    let version = cur.u16().ok_or_else(|| bad("truncated header"))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let n_layers = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
    if n_layers < 2 {
        return Err(bad("a checkpoint needs at least one hidden layer"));
    }
    let mut dims = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let i = cur.u32().ok_or_else(|| bad("truncated layer dims"))? as usize;
        let o = cur.u32().ok_or_else(|| bad("truncated layer dims"))? as usize;
        dims.push((i, o));
    }
    if dims.windows(2).any(|w| w[0].1 != w[1].0) {
        return Err(bad("layer dims do not chain"));
    }
    let spec = LayerSpec::new(
        dims[0].0,
        dims[..n_layers - 1].iter().map(|d| d.1).collect(),
        dims[n_layers - 1].1,
    );
    spec.validate()?;
    let mut read_net = || -> Result<Mlp> {
        let mut layers = Vec::with_capacity(n_layers);
        for &(i, o) in &dims {
            let weights = cur.f32s(i * o).ok_or_else(|| bad("truncated parameters"))?;
            let biases = cur.f32s(o).ok_or_else(|| bad("truncated parameters"))?;
            layers.push(Dense {
                in_dim: i,
                out_dim: o,
                weights,
                biases,
            });
        }
        Ok(Mlp { layers })
    };
    let online = read_net()?;
    let target = read_net()?;
    let adam_m = read_net()?;
    let adam_v = read_net()?;
    let step = cur.u64().ok_or_else(|| bad("truncated step count"))?;
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes after checkpoint"));
    }
    Ok(ParamSet {
        spec,
        online,
        target,
        adam_m,
        adam_v,
        step,
    })
}

pub fn save(params: &ParamSet, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
