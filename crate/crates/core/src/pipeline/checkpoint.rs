// Copyright 2026 The PACE Authors.
// SPDX-License-Identifier: Apache-2.0

//! Versioned binary checkpoint container.
//!
//! Layout (little endian): magic `PACK`, u32 version, u8 stage tag, u64 step,
//! RNG state (32-byte seed, u64 stream, u128 word position), u32 count of
//! string metadata pairs, u32 count of named tensors (name, u32 rank, u64
//! dims, f64 values), u32 count of loss-history columns (name, u64 rows,
//! f64 values). Strings are u32 length + UTF-8.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PaceError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PACK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which training run produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum StageTag {
    Reference,
    Stage1,
    Stage2,
    Stage3,
}

impl StageTag {
    fn code(self) -> u8 {
        match self {
            StageTag::Reference => 0,
            StageTag::Stage1 => 1,
            StageTag::Stage2 => 2,
            StageTag::Stage3 => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => StageTag::Reference,
            1 => StageTag::Stage1,
            2 => StageTag::Stage2,
            3 => StageTag::Stage3,
            _ => return Err(PaceError::Format(format!("unknown stage tag {c}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            StageTag::Reference => "reference",
            StageTag::Stage1 => "stage 1",
            StageTag::Stage2 => "stage 2",
            StageTag::Stage3 => "stage 3",
        }
    }
}

/// Serializable ChaCha8 position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Per-step training log, one column per logged quantity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub columns: Vec<(String, Vec<f64>)>,
}

impl LossHistory {
    pub fn with_columns(names: &[&str]) -> Self {
        Self {
            columns: names.iter().map(|n| (n.to_string(), Vec::new())).collect(),
        }
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(PaceError::Dimension {
                op: "LossHistory::push_row",
                axis: 0,
                expected: self.columns.len(),
                found: row.len(),
            });
        }
        for ((_, col), v) in self.columns.iter_mut().zip(row) {
            col.push(*v);
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, |(_, c)| c.len())
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_slice())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.columns.iter().map(|(n, _)| n.as_str()))?;
        for r in 0..self.rows() {
            w.write_record(self.columns.iter().map(|(n, c)| {
                if n == "step" {
                    format!("{}", c[r] as u64)
                } else {
                    format!("{:.8e}", c[r])
                }
            }))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: StageTag,
    pub step: u64,
    pub rng: RngState,
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<NamedArray>,
    pub history: LossHistory,
}

impl Checkpoint {
    pub fn new(stage: StageTag, step: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            stage,
            step,
            rng: RngState::capture(rng),
            metadata: BTreeMap::new(),
            tensors: Vec::new(),
            history: LossHistory::default(),
        }
    }

    pub fn add_tensors(&mut self, named: &[(String, Tensor)]) {
        for (name, t) in named {
            self.tensors.push(NamedArray {
                name: name.clone(),
                shape: t.shape().to_vec(),
                values: t.to_vec(),
            });
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedArray> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Copies stored values into each named parameter.
    pub fn load_into(&self, named: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in named {
            let stored = self
                .tensor(name)
                .ok_or_else(|| PaceError::Format(format!("checkpoint lacks tensor {name}")))?;
            if stored.shape != t.shape() {
                return Err(PaceError::Format(format!(
                    "tensor {name} has shape {:?} in the checkpoint, {:?} in the model",
                    stored.shape,
                    t.shape()
                )));
            }
            t.set_values(&stored.values);
        }
        Ok(())
    }

    pub fn lookup(&self) -> impl Fn(&str) -> Option<Vec<f64>> + '_ {
        move |name| self.tensor(name).map(|t| t.values.clone())
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| PaceError::Format(format!("checkpoint lacks metadata {key}")))
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&[self.stage.code()])?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.rng.seed)?;
        w.write_all(&self.rng.stream.to_le_bytes())?;
        w.write_all(&self.rng.word_pos.to_le_bytes())?;
        write_u32(&mut w, self.metadata.len())?;
        for (k, v) in &self.metadata {
            write_str(&mut w, k)?;
            write_str(&mut w, v)?;
        }
        write_u32(&mut w, self.tensors.len())?;
        for t in &self.tensors {
            write_str(&mut w, &t.name)?;
            write_u32(&mut w, t.shape.len())?;
            for d in &t.shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            write_f64s(&mut w, &t.values)?;
        }
        write_u32(&mut w, self.history.columns.len())?;
        for (name, col) in &self.history.columns {
            write_str(&mut w, name)?;
            w.write_all(&(col.len() as u64).to_le_bytes())?;
            write_f64s(&mut w, col)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(PaceError::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(PaceError::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut tag = [0u8; 1];
        read_exact(&mut r, &mut tag)?;
        let stage = StageTag::from_code(tag[0])?;
        let step = read_u64(&mut r)?;
        let mut seed = [0u8; 32];
        read_exact(&mut r, &mut seed)?;
        let stream = read_u64(&mut r)?;
        let mut wp = [0u8; 16];
        read_exact(&mut r, &mut wp)?;
        let rng = RngState {
            seed,
            stream,
            word_pos: u128::from_le_bytes(wp),
        };
        let mut metadata = BTreeMap::new();
        for _ in 0..read_u32(&mut r)? {
            let k = read_str(&mut r)?;
            metadata.insert(k, read_str(&mut r)?);
        }
        let mut tensors = Vec::new();
        for _ in 0..read_u32(&mut r)? {
            let name = read_str(&mut r)?;
            let rank = read_u32(&mut r)?;
            let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.filter(|&n| n <= 1 << 32).ok_or_else(|| PaceError::Format(format!("tensor {name} is too large")))?;
            tensors.push(NamedArray {
                name,
                shape,
                values: read_f64s(&mut r, n)?,
            });
        }
        let mut history = LossHistory::default();
        for _ in 0..read_u32(&mut r)? {
            let name = read_str(&mut r)?;
            let rows = read_u64(&mut r)? as usize;
            if rows > 1 << 32 {
                return Err(PaceError::Format("loss history is too long".into()));
            }
            history.columns.push((name, read_f64s(&mut r, rows)?));
        }
        Ok(Self {
            stage,
            step,
            rng,
            metadata,
            tensors,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write then rename so an interrupted save never clobbers a good file.
        let tmp = path.with_extension("pack.tmp");
        {
            let f = std::fs::File::create(&tmp)?;
            self.write(std::io::BufWriter::new(f))?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| PaceError::Format(format!("count {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_f64s<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 8);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => PaceError::Format("truncated checkpoint".into()),
        _ => PaceError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| PaceError::Format("checkpoint string is not UTF-8".into()))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut b = vec![0u8; n * 8];
    read_exact(r, &mut b)?;
    Ok(b.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let _: f64 = rng.random();
        let mut c = Checkpoint::new(StageTag::Stage2, 17, &rng);
        c.metadata.insert("variant".into(), "full".into());
        c.add_tensors(&[("w".into(), Tensor::new(vec![1.5, -0.0, f64::MIN_POSITIVE, 3.0], &[2, 2]).unwrap())]);
        c.history = LossHistory::with_columns(&["step", "total"]);
        c.history.push_row(&[0.0, 2.5]).unwrap();
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let mut buf = Vec::new();
        c.write(&mut buf).unwrap();
        let back = Checkpoint::read(buf.as_slice()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.tensor("w").unwrap().values[1].to_bits(), (-0.0f64).to_bits());
        let mut a = c.rng.restore();
        let mut b = back.rng.restore();
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn corrupt_input_is_a_format_error() {
        let mut buf = Vec::new();
        sample().write(&mut buf).unwrap();
        assert!(matches!(Checkpoint::read(&buf[..buf.len() - 3]), Err(PaceError::Format(_))));
        buf[0] = b'X';
        assert!(matches!(Checkpoint::read(buf.as_slice()), Err(PaceError::Format(_))));
    }

    #[test]
    fn load_into_checks_shapes() {
        let c = sample();
        let t = Tensor::param(vec![0.0; 4], &[2, 2]).unwrap();
        c.load_into(&[("w".into(), t.clone())]).unwrap();
        assert_eq!(t.to_vec()[0], 1.5);
        let bad = Tensor::param(vec![0.0; 4], &[4]).unwrap();
        assert!(c.load_into(&[("w".into(), bad)]).is_err());
        assert!(c.load_into(&[("missing".into(), t)]).is_err());
    }
}
