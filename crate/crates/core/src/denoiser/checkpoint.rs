//! Binary parameter checkpoints and resumable training state.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "MVDCKPT\0"
//! version      u32      1
//! arch hash    32 bytes SHA-256 of the architecture JSON
//! arch length  u32, then that many bytes of architecture JSON
//! count        u32      number of parameters
//! per parameter:
//!   name length u16, name bytes (UTF-8)
//!   partition   u8       0 base, 1 fba, 2 xa
//!   rank        u8, then rank x u32 dims
//!   data        prod(dims) x f32
//! ```
//!
//! The training-state file uses the same framing with magic
//! `"MVDSTATE"` and stores the parameters, Adam moments and loss history
//! as f64 so a resumed run continues bit-identically.

use std::io::{Read, Write};
use std::path::Path;

use super::params::{Architecture, DenoiserParams, ParamEntry, Partition};
use super::train::{LossRecord, Phase, TrainState};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CKPT_MAGIC: &[u8; 8] = b"MVDCKPT\0";
const STATE_MAGIC: &[u8; 8] = b"MVDSTATE";
const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn shape(&mut self, s: &[usize]) {
        self.u8(s.len() as u8);
        for &d in s {
            self.u32(d as u32);
        }
    }
    fn f64s(&mut self, t: &Tensor) {
        self.shape(t.shape());
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("file is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u8()? as usize;
        (0..rank).map(|_| Ok(self.u32()? as usize)).collect()
    }
    fn f64s(&mut self) -> Result<Tensor> {
        let shape = self.shape()?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::from_vec(&shape, data)
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format("trailing bytes".into()));
        }
        Ok(())
    }
}

fn write_header(w: &mut Writer, magic: &[u8; 8], arch: &Architecture) {
    w.bytes(magic);
    w.u32(VERSION);
    w.bytes(&arch.hash_bytes());
    let json = serde_json::to_vec(arch).expect("architecture serializes");
    w.u32(json.len() as u32);
    w.bytes(&json);
}

fn read_header(r: &mut Reader, magic: &[u8; 8]) -> Result<Architecture> {
    if r.take(8)? != magic {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let len = r.u32()? as usize;
    let arch: Architecture =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format(format!("architecture: {e}")))?;
    if arch.hash_bytes() != hash {
        return Err(Error::Format("architecture hash mismatch".into()));
    }
    Ok(arch)
}

fn write_entries(w: &mut Writer, params: &DenoiserParams, wide: bool) {
    w.u32(params.len() as u32);
    for e in params.entries() {
        w.u16(e.name.len() as u16);
        w.bytes(e.name.as_bytes());
        w.u8(e.partition.code());
        if wide {
            w.f64s(&e.value);
        } else {
            w.shape(e.value.shape());
            for &v in e.value.data() {
                w.bytes(&(v as f32).to_le_bytes());
            }
        }
    }
}

fn read_entries(r: &mut Reader, arch: Architecture, wide: bool) -> Result<DenoiserParams> {
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("parameter name".into()))?;
        let partition = Partition::from_code(r.u8()?)?;
        let value = if wide {
            r.f64s()?
        } else {
            let shape = r.shape()?;
            let n = shape.iter().product();
            let data = (0..n).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
            Tensor::from_vec(&shape, data)?
        };
        entries.push(ParamEntry { name, partition, value });
    }
    let params = DenoiserParams::from_entries(arch.clone(), entries)?;
    let reference = DenoiserParams::init(&arch, 0)?;
    if reference.len() != params.len()
        || reference
            .entries()
            .iter()
            .zip(params.entries())
            .any(|(a, b)| a.name != b.name || a.partition != b.partition || a.value.shape() != b.value.shape())
    {
        return Err(Error::Format("parameter list does not match the architecture".into()));
    }
    Ok(params)
}

pub fn encode_checkpoint(params: &DenoiserParams) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    write_header(&mut w, CKPT_MAGIC, &params.arch);
    write_entries(&mut w, params, false);
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<DenoiserParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let arch = read_header(&mut r, CKPT_MAGIC)?;
    let p = read_entries(&mut r, arch, false)?;
    r.done()?;
    Ok(p)
}

pub fn save_checkpoint(path: &Path, params: &DenoiserParams) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserParams> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_checkpoint(&buf)
}

pub fn encode_train_state(params: &DenoiserParams, state: &TrainState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    write_header(&mut w, STATE_MAGIC, &params.arch);
    write_entries(&mut w, params, true);
    w.u8(state.phase.code());
    w.u64(state.seed);
    w.u64(state.step as u64);
    w.u32(state.trainable.len() as u32);
    for ((&k, m), v) in state.trainable.iter().zip(&state.m).zip(&state.v) {
        w.u32(k as u32);
        w.f64s(m);
        w.f64s(v);
    }
    w.u32(state.history.len() as u32);
    for r in &state.history {
        w.f64(r.ldm);
        w.f64(r.xa);
        w.f64(r.total);
    }
    w.0
}

pub fn decode_train_state(bytes: &[u8]) -> Result<(DenoiserParams, TrainState)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let arch = read_header(&mut r, STATE_MAGIC)?;
    let params = read_entries(&mut r, arch, true)?;
    let phase = Phase::from_code(r.u8()?)?;
    let seed = r.u64()?;
    let step = r.u64()? as usize;
    let n = r.u32()? as usize;
    let (mut trainable, mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let k = r.u32()? as usize;
        if k >= params.len() {
            return Err(Error::Format(format!("trainable index {k} out of range")));
        }
        trainable.push(k);
        m.push(r.f64s()?);
        v.push(r.f64s()?);
    }
    let h = r.u32()? as usize;
    let history = (0..h)
        .map(|_| {
            Ok(LossRecord {
                ldm: r.f64()?,
                xa: r.f64()?,
                total: r.f64()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    r.done()?;
    Ok((
        params,
        TrainState {
            phase,
            seed,
            step,
            trainable,
            m,
            v,
            history,
        },
    ))
}

pub fn save_train_state(path: &Path, params: &DenoiserParams, state: &TrainState) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_train_state(params, state))?;
    Ok(())
}

pub fn load_train_state(path: &Path) -> Result<(DenoiserParams, TrainState)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_train_state(&buf)
}
