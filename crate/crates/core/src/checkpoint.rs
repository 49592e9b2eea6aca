//! Binary checkpoints, all little-endian with a 4-byte magic and a `u16`
//! version.
//!
//! `SCST` stage-one state:
//! ```text
//! kind u8 (0 = ncc, 1 = ridge), K u32, d u32
//! ncc:   counts K×u64, prototypes K×d f64
//! ridge: lambda f64, seen u64, cov d×d f64, class_sums K×d f64
//! ```
//!
//! `SCBF` replay buffer:
//! ```text
//! strategy u8, capacity u64, seed u64, d u32, entries u32
//! per entry: class u32, observed u64, running sum d×f64,
//!            stored u32, indices stored×u64, vectors stored×d f32
//! ```
//!
//! `SCAD` adapted predictor:
//! ```text
//! init u8 (0 random, 1 ncc, 2 ridge), buffer snapshot u64, K u32, d u32,
//! h u32 (0 = no adapter), weights K×d f64, biases K f64,
//! down h×d f64, up d×h f64
//! ```
//! Matrices are row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::adapter::{AdaptedPredictor, AdapterParams, InitKind, Provenance, ResidualAdapter};
use crate::error::{Result, ScrollError};
use crate::online_learner::{LinearHead, NccState, RidgeState, StageOne};
use crate::replay_buffer::{BufferStrategy, ReplayBuffer, RunningClassMean, StoredSample};

pub const STATE_MAGIC: &[u8; 4] = b"SCST";
pub const BUFFER_MAGIC: &[u8; 4] = b"SCBF";
pub const ADAPTED_MAGIC: &[u8; 4] = b"SCAD";
pub const CHECKPOINT_VERSION: u16 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(magic);
        w.0.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        w
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn matrix(&mut self, m: &DMatrix<f64>) {
        for row in m.row_iter() {
            for &v in row.iter() {
                self.f64(v);
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != magic {
            return Err(ScrollError::format(
                "byte",
                0,
                format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
            ));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(ScrollError::format("byte", 4, format!("unsupported version {version}")));
        }
        Ok(r)
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(ScrollError::format("byte", self.pos as u64, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f64()?);
        }
        Ok(DMatrix::from_row_slice(rows, cols, &data))
    }
    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(ScrollError::format("byte", self.pos as u64, "trailing bytes"));
        }
        Ok(())
    }
}

pub fn encode_state(state: &StageOne) -> Vec<u8> {
    let mut w = Writer::new(STATE_MAGIC);
    match state {
        StageOne::Ncc(s) => {
            w.u8(0);
            w.u32(s.class_count());
            w.u32(s.dim());
            for &c in s.counts() {
                w.u64(c);
            }
            w.matrix(s.prototypes());
        }
        StageOne::Ridge(s) => {
            w.u8(1);
            w.u32(s.class_count());
            w.u32(s.dim());
            w.f64(s.lambda());
            w.u64(s.seen());
            w.matrix(s.cov());
            w.matrix(s.class_sums());
        }
    }
    w.0
}

pub fn decode_state(bytes: &[u8]) -> Result<StageOne> {
    let mut r = Reader::open(bytes, STATE_MAGIC)?;
    let kind = r.u8()?;
    let k = r.u32()?;
    let d = r.u32()?;
    let state = match kind {
        0 => {
            let counts = (0..k).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let prototypes = r.matrix(k, d)?;
            StageOne::Ncc(NccState::from_parts(prototypes, counts)?)
        }
        1 => {
            let lambda = r.f64()?;
            let seen = r.u64()?;
            let cov = r.matrix(d, d)?;
            let sums = r.matrix(k, d)?;
            StageOne::Ridge(RidgeState::from_parts(cov, sums, lambda, seen)?)
        }
        other => return Err(ScrollError::format("byte", 6, format!("unknown state kind {other}"))),
    };
    r.finish()?;
    Ok(state)
}

pub fn encode_buffer(buffer: &ReplayBuffer) -> Vec<u8> {
    let mut w = Writer::new(BUFFER_MAGIC);
    w.u8(buffer.strategy().tag());
    w.u64(buffer.capacity() as u64);
    w.u64(buffer.seed());
    let running = buffer.running_means();
    let classes: Vec<usize> = running.classes().collect();
    let dim = classes
        .first()
        .and_then(|&c| running.raw(c))
        .map_or(0, |(s, _)| s.len());
    w.u32(dim);
    w.u32(classes.len());
    for class in classes {
        let (sum, count) = running.raw(class).unwrap();
        w.u32(class);
        w.u64(count);
        for &v in sum {
            w.f64(v);
        }
        let stored = buffer.class_samples(class);
        w.u32(stored.len());
        for s in stored {
            w.u64(s.index as u64);
        }
        for s in stored {
            for &v in &s.vector {
                w.0.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    w.0
}

pub fn decode_buffer(bytes: &[u8]) -> Result<ReplayBuffer> {
    let mut r = Reader::open(bytes, BUFFER_MAGIC)?;
    let strategy = BufferStrategy::from_tag(r.u8()?)
        .ok_or_else(|| ScrollError::format("byte", 6, "unknown buffer strategy"))?;
    let capacity = r.u64()? as usize;
    let seed = r.u64()?;
    let dim = r.u32()?;
    let entries = r.u32()?;
    let mut running = RunningClassMean::default();
    let mut per_class = BTreeMap::new();
    for _ in 0..entries {
        let class = r.u32()?;
        let count = r.u64()?;
        let sum = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        running.insert_raw(class, sum, count);
        let stored = r.u32()?;
        let indices = (0..stored).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let mut samples = Vec::with_capacity(stored);
        for index in indices {
            let vector = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            samples.push(StoredSample {
                index: index as usize,
                vector,
            });
        }
        if !samples.is_empty() {
            per_class.insert(class, samples);
        }
    }
    r.finish()?;
    Ok(ReplayBuffer::from_parts(capacity, strategy, seed, per_class, running))
}

fn init_tag(kind: InitKind) -> u8 {
    match kind {
        InitKind::Random => 0,
        InitKind::Ncc => 1,
        InitKind::Ridge => 2,
    }
}

pub fn encode_adapted(pred: &AdaptedPredictor) -> Vec<u8> {
    let mut w = Writer::new(ADAPTED_MAGIC);
    let head = &pred.params.head;
    w.u8(init_tag(pred.provenance.init));
    w.u64(pred.provenance.buffer_snapshot);
    w.u32(head.class_count());
    w.u32(head.dim());
    w.u32(pred.params.adapter.as_ref().map_or(0, |a| a.width()));
    w.matrix(&head.weights);
    for &b in head.biases.iter() {
        w.f64(b);
    }
    if let Some(a) = &pred.params.adapter {
        w.matrix(&a.down);
        w.matrix(&a.up);
    }
    w.0
}

pub fn decode_adapted(bytes: &[u8]) -> Result<AdaptedPredictor> {
    let mut r = Reader::open(bytes, ADAPTED_MAGIC)?;
    let init = match r.u8()? {
        0 => InitKind::Random,
        1 => InitKind::Ncc,
        2 => InitKind::Ridge,
        other => return Err(ScrollError::format("byte", 6, format!("unknown init kind {other}"))),
    };
    let buffer_snapshot = r.u64()?;
    let k = r.u32()?;
    let d = r.u32()?;
    let h = r.u32()?;
    let weights = r.matrix(k, d)?;
    let biases = DVector::from_vec((0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
    let adapter = if h > 0 {
        Some(ResidualAdapter {
            down: r.matrix(h, d)?,
            up: r.matrix(d, h)?,
        })
    } else {
        None
    };
    r.finish()?;
    Ok(AdaptedPredictor {
        params: AdapterParams {
            adapter,
            head: LinearHead { weights, biases },
        },
        provenance: Provenance {
            init,
            buffer_snapshot,
        },
    })
}

pub fn save_state(state: &StageOne, path: impl AsRef<Path>) -> Result<()> {
    Ok(fs::write(path, encode_state(state))?)
}

pub fn load_state(path: impl AsRef<Path>) -> Result<StageOne> {
    decode_state(&fs::read(path)?)
}

pub fn save_buffer(buffer: &ReplayBuffer, path: impl AsRef<Path>) -> Result<()> {
    Ok(fs::write(path, encode_buffer(buffer))?)
}

pub fn load_buffer(path: impl AsRef<Path>) -> Result<ReplayBuffer> {
    decode_buffer(&fs::read(path)?)
}

pub fn save_adapted(pred: &AdaptedPredictor, path: impl AsRef<Path>) -> Result<()> {
    Ok(fs::write(path, encode_adapted(pred))?)
}

pub fn load_adapted(path: impl AsRef<Path>) -> Result<AdaptedPredictor> {
    decode_adapted(&fs::read(path)?)
}
