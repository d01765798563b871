//! Versioned binary model container.
//!
//! All integers are little-endian `u32` unless noted; values are `f32`.
//!
//! ```text
//! "SSAC"  version:u32=1  model:u8 (0 = single branch, 1 = fused)
//! branch (once, or spectral then spatial when fused):
//!   kind:u8 (0 plain, 1 spectral, 2 spatial)  layers:u8 (bit l-1 = layer l)
//!   classes  bands  patch  param_count
//!   param_count x { name_len  name:utf8  rank  dims[rank]  values[prod(dims)] }
//!   block_count
//!   block_count x { initialized:u8  channels  mean[channels]  var[channels] }
//! fused only: spectral_logit:f32  spatial_logit:f32
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{BranchKind, BranchSpec, FusedModel, LayerMask, Model, SubNetwork};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SSAC";
pub const VERSION: u32 = 1;

fn bad(reason: impl Into<String>) -> Error {
    Error::Checkpoint(reason.into())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| bad(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s<T: Scalar>(out: &mut Vec<u8>, values: &[T]) {
    for &v in values {
        let f = v.to_f64() as f32;
        out.extend_from_slice(&f.to_le_bytes());
    }
}

fn encode_branch<T: Scalar>(out: &mut Vec<u8>, net: &SubNetwork<T>) -> Result<()> {
    let s = &net.spec;
    out.push(s.kind.code());
    out.push(s.layers.bits());
    put_u32(out, s.classes)?;
    put_u32(out, s.bands)?;
    put_u32(out, s.patch)?;
    put_u32(out, net.params.len())?;
    for p in net.params.iter() {
        put_u32(out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        put_u32(out, p.value.shape().len())?;
        for &d in p.value.shape() {
            put_u32(out, d)?;
        }
        put_f32s(out, p.value.data());
    }
    put_u32(out, net.blocks.len())?;
    for b in &net.blocks {
        out.push(u8::from(b.running.initialized));
        put_u32(out, b.running.mean.len())?;
        put_f32s(out, &b.running.mean);
        put_f32s(out, &b.running.var);
    }
    Ok(())
}

pub fn encode<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    match model {
        Model::Branch(net) => {
            out.push(0);
            encode_branch(&mut out, net)?;
        }
        Model::Fused(m) => {
            out.push(1);
            encode_branch(&mut out, &m.spectral)?;
            encode_branch(&mut out, &m.spatial)?;
            put_f32s(&mut out, m.fusion.get(m.logits).data());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            bad(format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.buf.len()))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| bad("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect())
    }
}

fn decode_branch<T: Scalar>(cur: &mut Cursor) -> Result<SubNetwork<T>> {
    let code = cur.u8()?;
    let kind = BranchKind::from_code(code).ok_or_else(|| bad(format!("unknown branch kind {code}")))?;
    let layers = LayerMask::from_bits(cur.u8()?)?;
    let (classes, bands, patch) = (cur.u32()?, cur.u32()?, cur.u32()?);
    let spec = BranchSpec::new(kind, layers, classes, bands, patch)?;
    let mut net = SubNetwork::<T>::new(spec, 0)?;

    let count = cur.u32()?;
    if count != net.params.len() {
        return Err(bad(format!(
            "{kind} branch expects {} parameters, file has {count}",
            net.params.len()
        )));
    }
    for _ in 0..count {
        let len = cur.u32()?;
        let name = std::str::from_utf8(cur.take(len)?).map_err(|_| bad("parameter name is not utf-8"))?;
        let rank = cur.u32()?;
        let dims = (0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        let id = net.params.find(name).ok_or_else(|| bad(format!("unexpected parameter '{name}'")))?;
        if net.params.get(id).shape() != dims.as_slice() {
            return Err(bad(format!(
                "parameter '{name}' has shape {dims:?}, expected {:?}",
                net.params.get(id).shape()
            )));
        }
        let values = cur.f32s(dims.iter().product())?;
        *net.params.get_mut(id) = Tensor::new(dims, values)?;
    }

    let blocks = cur.u32()?;
    if blocks != net.blocks.len() {
        return Err(bad(format!("expected {} blocks, file has {blocks}", net.blocks.len())));
    }
    for block in &mut net.blocks {
        let initialized = cur.u8()? != 0;
        let channels = cur.u32()?;
        if channels != block.out_channels {
            return Err(bad(format!(
                "running stats for {channels} channels, block has {}",
                block.out_channels
            )));
        }
        block.running.mean = cur.f32s(channels)?;
        block.running.var = cur.f32s(channels)?;
        block.running.initialized = initialized;
    }
    Ok(net)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(bad("missing SSAC magic"));
    }
    let version = cur.u32()?;
    if version != VERSION as usize {
        return Err(bad(format!("unsupported version {version}")));
    }
    let model = match cur.u8()? {
        0 => Model::Branch(decode_branch(&mut cur)?),
        1 => {
            let spe = decode_branch(&mut cur)?;
            let spa = decode_branch(&mut cur)?;
            let mut fused = FusedModel::from_branches(spe, spa)?;
            let logits = cur.f32s(2)?;
            fused.fusion.get_mut(fused.logits).data_mut().copy_from_slice(&logits);
            Model::Fused(fused)
        }
        other => return Err(bad(format!("unknown model type {other}"))),
    };
    if cur.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(model)
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
