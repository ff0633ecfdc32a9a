//! Binary storage: model checkpoints and the ingested sequence cache.
//!
//! Both files are little-endian throughout.
//!
//! Checkpoint layout:
//! `"MBRC" | version:u32 | config_hash:u64 | step:u64 | count:u32`
//! then per entry
//! `name_len:u16 | name:utf8 | ndim:u8 | dims:u32* | values:f64*`.
//!
//! Sequence cache layout:
//! `"MBSQ" | version:u32 | config_hash:u64 | j:u32 | behaviors:u32 |
//!  vocab_len:u32 | vocab:u64* | frequency:u64* | excluded:u32`
//! then three split blocks (train, valid, test), each
//! `users:u32` followed per user by
//! `user:u64 | j x (tag:u8 | item:u32 | behavior:u8)`
//! with tag 0 = PAD, 1 = visible, 2 = masked.

use crate::data::{BehaviorSequence, DatasetStats, Slot, Splits};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const CKPT_MAGIC: &[u8; 4] = b"MBRC";
const CACHE_MAGIC: &[u8; 4] = b"MBSQ";
const VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        Self { buf }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
    fn finish(self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.buf).map_err(|e| Error::io(path, e))
    }
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn open(path: &Path, magic: &[u8; 4]) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut buf)
            .map_err(|e| Error::io(path, e))?;
        let mut r = Self { buf, pos: 0 };
        let got = r.take(4)?;
        if got != magic {
            return Err(Error::Checkpoint(format!(
                "bad magic in {}: expected {magic:?}",
                path.display()
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        Ok(r)
    }
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
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
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Serialize all named parameters plus the run identity.
pub fn save_checkpoint(model: &Model, config_hash: u64, step: u64, path: &Path) -> Result<()> {
    let params = model.params();
    let mut w = Writer::new(CKPT_MAGIC);
    w.u64(config_hash);
    w.u64(step);
    w.u32(params.len() as u32);
    for (name, tensor) in params {
        w.u16(name.len() as u16);
        w.bytes(name.as_bytes());
        w.u8(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            w.u32(d as u32);
        }
        for &v in tensor.data() {
            w.f64(v);
        }
    }
    w.finish(path)
}

pub struct LoadedCheckpoint {
    pub config_hash: u64,
    pub step: u64,
    pub entries: BTreeMap<String, Tensor>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut r = Reader::open(path, CKPT_MAGIC)?;
    let config_hash = r.u64()?;
    let step = r.u64()?;
    let count = r.u32()?;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        entries.insert(name, Tensor::new(shape, data)?);
    }
    Ok(LoadedCheckpoint { config_hash, step, entries })
}

impl Model {
    /// Replace parameter values from a loaded checkpoint. Every
    /// parameter must be present with a matching shape.
    pub fn load_params(&mut self, loaded: &LoadedCheckpoint) -> Result<()> {
        for (name, tensor) in self.params_mut() {
            let Some(saved) = loaded.entries.get(&name) else {
                return Err(Error::Checkpoint(format!("missing parameter '{name}'")));
            };
            if saved.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for '{name}': checkpoint {:?}, model {:?}",
                    saved.shape(),
                    tensor.shape()
                )));
            }
            tensor.data_mut().copy_from_slice(saved.data());
        }
        Ok(())
    }
}

fn write_split(w: &mut Writer, split: &BTreeMap<u64, BehaviorSequence>) {
    w.u32(split.len() as u32);
    for (&user, seq) in split {
        w.u64(user);
        for slot in seq.slots() {
            match slot {
                Slot::Pad => {
                    w.u8(0);
                    w.u32(0);
                    w.u8(0);
                }
                Slot::Item { item, behavior } => {
                    w.u8(1);
                    w.u32(*item);
                    w.u8(*behavior);
                }
                Slot::Masked { item, behavior } => {
                    w.u8(2);
                    w.u32(*item);
                    w.u8(*behavior);
                }
            }
        }
    }
}

fn read_split(r: &mut Reader, j: usize) -> Result<BTreeMap<u64, BehaviorSequence>> {
    let users = r.u32()? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..users {
        let user = r.u64()?;
        let mut slots = Vec::with_capacity(j);
        for _ in 0..j {
            let tag = r.u8()?;
            let item = r.u32()?;
            let behavior = r.u8()?;
            slots.push(match tag {
                0 => Slot::Pad,
                1 => Slot::Item { item, behavior },
                2 => Slot::Masked { item, behavior },
                other => {
                    return Err(Error::Checkpoint(format!("bad slot tag {other}")));
                }
            });
        }
        out.insert(user, BehaviorSequence::from_slots(slots)?);
    }
    Ok(out)
}

/// Ingested dataset keyed by config hash: catalog statistics plus the
/// three leave-one-out splits.
pub struct SequenceCache {
    pub config_hash: u64,
    pub j: usize,
    pub stats: DatasetStats,
    pub excluded_users: usize,
    pub splits: Splits,
}

pub fn save_cache(cache: &SequenceCache, path: &Path) -> Result<()> {
    let mut w = Writer::new(CACHE_MAGIC);
    w.u64(cache.config_hash);
    w.u32(cache.j as u32);
    w.u32(cache.stats.behavior_count as u32);
    w.u32(cache.stats.vocab.len() as u32);
    for &item in &cache.stats.vocab {
        w.u64(item);
    }
    for &f in &cache.stats.frequency {
        w.u64(f);
    }
    w.u32(cache.excluded_users as u32);
    write_split(&mut w, &cache.splits.train);
    write_split(&mut w, &cache.splits.valid);
    write_split(&mut w, &cache.splits.test);
    w.finish(path)
}

pub fn load_cache(path: &Path) -> Result<SequenceCache> {
    let mut r = Reader::open(path, CACHE_MAGIC)?;
    let config_hash = r.u64()?;
    let j = r.u32()? as usize;
    let behavior_count = r.u32()? as usize;
    let vocab_len = r.u32()? as usize;
    let mut vocab = Vec::with_capacity(vocab_len);
    for _ in 0..vocab_len {
        vocab.push(r.u64()?);
    }
    let mut frequency = Vec::with_capacity(vocab_len);
    for _ in 0..vocab_len {
        frequency.push(r.u64()?);
    }
    let excluded_users = r.u32()? as usize;
    let train = read_split(&mut r, j)?;
    let valid = read_split(&mut r, j)?;
    let test = read_split(&mut r, j)?;
    Ok(SequenceCache {
        config_hash,
        j,
        stats: DatasetStats { vocab, frequency, behavior_count },
        excluded_users,
        splits: Splits { train, valid, test },
    })
}
