//! Checkpoint averaging over the NTCK named-tensor format.
//!
//! Layout, all little-endian: magic `NTCK`, `u32` version (1), `u32` tensor
//! count, then per tensor in ascending name order: `u16` name length, UTF-8
//! name, `u8` dtype (0 = f32, 1 = f64), `u8` rank, `rank` × `u64` dims, and
//! the row-major element payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"NTCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SwaError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("shape of tensor {0:?} overflows")]
    ShapeOverflow(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("{0} trailing bytes after last tensor")]
    TrailingData(usize),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("no checkpoints given")]
    EmptyInput,
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<SwaError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> f64 {
        match self {
            TensorData::F32(v) => v[i] as f64,
            TensorData::F64(v) => v[i],
        }
    }

    /// Bitwise equality, so NaN payloads compare equal to themselves.
    pub fn bit_eq(&self, other: &TensorData) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<u64>, data: TensorData) -> Result<Self, SwaError> {
        let n = element_count(&shape).ok_or_else(|| SwaError::ShapeOverflow(format!("{shape:?}")))?;
        if shape.contains(&0) {
            return Err(SwaError::Malformed(format!("shape {shape:?} has a zero dimension")));
        }
        if n != data.len() {
            return Err(SwaError::Malformed(format!(
                "shape {shape:?} holds {n} elements but data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }
}

/// Named tensors; the map keeps names sorted for serialisation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((na, a), (nb, b))| {
                na == nb && a.shape == b.shape && a.data.bit_eq(&b.data)
            })
    }
}

fn element_count(shape: &[u64]) -> Option<usize> {
    shape
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .and_then(|n| usize::try_from(n).ok())
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>, SwaError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(ckpt.tensors.len())
        .map_err(|_| SwaError::Malformed("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in &ckpt.tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| SwaError::Malformed(format!("name of {} bytes is too long", name.len())))?;
        let rank = u8::try_from(t.shape.len())
            .map_err(|_| SwaError::Malformed(format!("tensor {name:?} has rank {}", t.shape.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dtype().code());
        out.push(rank);
        for d in &t.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &t.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], SwaError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            SwaError::TruncatedFile(format!(
                "{what} needs {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, SwaError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, SwaError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, SwaError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, SwaError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint, SwaError> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(SwaError::BadMagic);
    }
    let mut r = Reader { buf, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(SwaError::UnsupportedVersion(version));
    }
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    let mut last: Option<String> = None;
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| SwaError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        if last.as_ref().is_some_and(|l| *l >= name) {
            return Err(SwaError::Malformed(format!(
                "tensor {name:?} is out of order or duplicated"
            )));
        }
        let dtype = match r.u8("dtype")? {
            0 => DType::F32,
            1 => DType::F64,
            other => return Err(SwaError::Malformed(format!("unknown dtype {other} for {name:?}"))),
        };
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank).map(|_| r.u64("dims")).collect::<Result<Vec<_>, _>>()?;
        if shape.contains(&0) {
            return Err(SwaError::Malformed(format!("tensor {name:?} has a zero dimension")));
        }
        let n = element_count(&shape)
            .filter(|n| n.checked_mul(dtype.width()).is_some())
            .ok_or_else(|| SwaError::ShapeOverflow(name.clone()))?;
        let bytes = r.take(n * dtype.width(), &format!("payload of {name:?}"))?;
        let data = match dtype {
            DType::F32 => TensorData::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        };
        last = Some(name.clone());
        tensors.insert(name, Tensor { shape, data });
    }
    if r.pos != buf.len() {
        return Err(SwaError::TrailingData(buf.len() - r.pos));
    }
    Ok(Checkpoint { tensors })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, SwaError> {
    let buf = fs::read(path).map_err(|source| SwaError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&buf).map_err(|e| SwaError::InFile {
        path: path.to_path_buf(),
        source: Box::new(e),
    })
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), SwaError> {
    let bytes = encode(ckpt)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| SwaError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| SwaError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Sum of two floats as an unevaluated pair `(s, err)` with `s + err` exact.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Double-double accumulator. Rounding error is far below f64 resolution,
/// so the result does not depend on the order the terms arrive in.
#[derive(Clone, Copy)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    // -0.0 is the additive identity that keeps the sign of an all -0.0 sum
    const ZERO: Dd = Dd { hi: -0.0, lo: 0.0 };

    fn add(&mut self, x: f64) {
        if x == 0.0 {
            if x.is_sign_positive() {
                self.hi += 0.0;
            }
            return;
        }
        let (s, e) = two_sum(self.hi, x);
        let (hi, lo) = two_sum(s, self.lo + e);
        self.hi = hi;
        self.lo = lo;
    }

    fn add_product(&mut self, w: f64, x: f64) {
        let p = w * x;
        self.add(p);
        if p.is_finite() {
            let e = w.mul_add(x, -p);
            if e != 0.0 {
                self.add(e);
            }
        }
    }

    fn div(self, d: Dd) -> f64 {
        let q = self.hi / d.hi;
        if self.hi == 0.0 || !q.is_finite() {
            return q;
        }
        // exact residual of the leading quotient, then one correction step
        let r = (-q).mul_add(d.hi, self.hi) + self.lo - q * d.lo;
        let c = r / d.hi;
        if c == 0.0 {
            q
        } else {
            q + c
        }
    }
}

/// Weighted element sums, one checkpoint at a time.
struct Accumulator {
    template: Checkpoint,
    sums: BTreeMap<String, Vec<Dd>>,
    weight: Dd,
}

impl Accumulator {
    fn new(first: Checkpoint) -> Self {
        let sums = first
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), vec![Dd::ZERO; t.data.len()]))
            .collect();
        Accumulator {
            template: first,
            sums,
            weight: Dd::ZERO,
        }
    }

    fn check_schema(&self, other: &Checkpoint, label: &str) -> Result<(), SwaError> {
        let mismatch = |what: String| Err(SwaError::SchemaMismatch(format!("{label}: {what}")));
        for name in self.template.tensors.keys() {
            if !other.tensors.contains_key(name) {
                return mismatch(format!("missing tensor {name:?}"));
            }
        }
        for (name, t) in &other.tensors {
            let Some(expected) = self.template.tensors.get(name) else {
                return mismatch(format!("unexpected tensor {name:?}"));
            };
            if t.dtype() != expected.dtype() {
                return mismatch(format!(
                    "tensor {name:?} has dtype {:?}, expected {:?}",
                    t.dtype(),
                    expected.dtype()
                ));
            }
            if t.shape != expected.shape {
                return mismatch(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    t.shape, expected.shape
                ));
            }
        }
        Ok(())
    }

    fn add(&mut self, ckpt: &Checkpoint, weight: f64, label: &str) -> Result<(), SwaError> {
        self.check_schema(ckpt, label)?;
        if weight == 0.0 {
            return Ok(());
        }
        self.weight.add(weight);
        self.sums.par_iter_mut().for_each(|(name, sums)| {
            let data = &ckpt.tensors[name].data;
            for (i, s) in sums.iter_mut().enumerate() {
                s.add_product(weight, data.get(i));
            }
        });
        Ok(())
    }

    fn finish(self) -> Checkpoint {
        let mut out = self.template;
        let total = self.weight;
        for (name, t) in out.tensors.iter_mut() {
            let mean = self.sums[name].iter().map(|s| s.div(total));
            t.data = match t.data {
                TensorData::F32(_) => TensorData::F32(mean.map(|x| x as f32).collect()),
                TensorData::F64(_) => TensorData::F64(mean.collect()),
            };
        }
        out
    }
}

fn check_weights(weights: Option<&[f64]>, n: usize) -> Result<Vec<f64>, SwaError> {
    let Some(w) = weights else {
        return Ok(vec![1.0; n]);
    };
    if w.len() != n {
        return Err(SwaError::InvalidWeights(format!("{} weights for {n} checkpoints", w.len())));
    }
    if let Some(bad) = w.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(SwaError::InvalidWeights(format!("weight {bad} is not a finite non-negative number")));
    }
    if w.iter().sum::<f64>() <= 0.0 {
        return Err(SwaError::InvalidWeights("weights sum to zero".into()));
    }
    Ok(w.to_vec())
}

/// Element-wise (weighted) mean of in-memory checkpoints.
pub fn average(ckpts: &[Checkpoint], weights: Option<&[f64]>) -> Result<Checkpoint, SwaError> {
    let weights = check_weights(weights, ckpts.len())?;
    let (first, rest) = ckpts.split_first().ok_or(SwaError::EmptyInput)?;
    let mut acc = Accumulator::new(first.clone());
    acc.add(first, weights[0], "checkpoint 0")?;
    for (i, (c, &w)) in rest.iter().zip(&weights[1..]).enumerate() {
        acc.add(c, w, &format!("checkpoint {}", i + 1))?;
    }
    Ok(acc.finish())
}

/// Averages checkpoint files, reading one at a time.
pub fn average_checkpoints(paths: &[PathBuf], weights: Option<&[f64]>) -> Result<Checkpoint, SwaError> {
    let weights = check_weights(weights, paths.len())?;
    let (first, rest) = paths.split_first().ok_or(SwaError::EmptyInput)?;
    let first = read_checkpoint(first)?;
    let mut acc = Accumulator::new(first.clone());
    acc.add(&first, weights[0], "checkpoint 0")?;
    for (path, &w) in rest.iter().zip(&weights[1..]) {
        let ckpt = read_checkpoint(path)?;
        acc.add(&ckpt, w, &path.display().to_string())?;
    }
    Ok(acc.finish())
}
