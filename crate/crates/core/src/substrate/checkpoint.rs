//! Network checkpoint files.
//!
//! Layout (little-endian): magic `FDNT`, version `u16`, layer count `u32`,
//! then per layer the id (`u32` length + bytes), the shape (`u32` rank +
//! `u32` dims) and the raw 32-bit values. The config block before the
//! layers holds the architecture sizes and schedule as `u32` count plus
//! 64-bit values.

use std::path::Path;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{FadeError, Result};

use super::net::{DenoiserNet, NetConfig};
use super::tensor::{ParamStore, ParamTensor};

const MAGIC: &[u8; 4] = b"FDNT";
const VERSION: u16 = 2;

fn write_layer(w: &mut ByteWriter, id: &str, shape: &[usize], values: &[f32]) {
    w.str(id);
    w.u32(shape.len() as u32);
    for &d in shape {
        w.u32(d as u32);
    }
    w.f32s(values);
}

pub fn checkpoint_bytes(net: &DenoiserNet) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u16(VERSION);
    let meta = net.config().to_meta();
    w.u32(meta.len() as u32);
    for v in meta {
        w.f64(v);
    }
    w.u32(net.params().len() as u32);
    for p in net.params().iter() {
        write_layer(&mut w, &p.layer_id, &p.shape, &p.values);
    }
    w.finish()
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<DenoiserNet> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(FadeError::Format("not a network checkpoint (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(FadeError::Format(format!("unsupported checkpoint version {version}")));
    }
    let n_meta = r.u32()? as usize;
    if n_meta > 64 {
        return Err(FadeError::Format("implausible config block".into()));
    }
    let meta = (0..n_meta).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let cfg = NetConfig::from_meta(&meta)?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let id = r.str()?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(FadeError::Format(format!("layer {id}: implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().product();
        let values = r.f32s(n)?;
        store.insert(ParamTensor::new(id, shape, values)?)?;
    }
    if !r.is_empty() {
        return Err(FadeError::Format("trailing bytes after checkpoint layers".into()));
    }
    DenoiserNet::from_params(cfg, store)
}

pub fn save_checkpoint(net: &DenoiserNet, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(net))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DenoiserNet> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
