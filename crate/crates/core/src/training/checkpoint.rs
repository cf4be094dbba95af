//! Binary checkpoint files.
//!
//! Little-endian layout:
//!
//! ```text
//! "LIFTCKPT"  u32 version (=1)  u32 tensor_count
//! per tensor: u16 name_len, name bytes, u8 rank, rank × u64 dims,
//!             u8 dtype (0 = f32, 1 = f64), raw values
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Optimizer state, when present, is stored as extra tensors named
//! `adam/m/<param>`, `adam/v/<param>` and a one-element f64 tensor `adam/step`.

use std::fs;
use std::path::Path;

use crate::error::{LiftError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::adam::AdamState;

pub const MAGIC: &[u8; 8] = b"LIFTCKPT";
pub const VERSION: u32 = 1;

const FIRST_MOMENT: &str = "adam/m/";
const SECOND_MOMENT: &str = "adam/v/";
const STEP: &str = "adam/step";

/// One tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: RawData,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RawData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl RawData {
    fn dtype(&self) -> u8 {
        match self {
            RawData::F32(_) => 0,
            RawData::F64(_) => 1,
        }
    }

    fn len(&self) -> usize {
        match self {
            RawData::F32(v) => v.len(),
            RawData::F64(v) => v.len(),
        }
    }
}

fn raw_from<T: Scalar>(name: &str, shape: &[usize], data: &[T]) -> RawTensor {
    let data = match T::DTYPE {
        0 => RawData::F32(data.iter().map(|v| v.to_f64_lossless() as f32).collect()),
        _ => RawData::F64(data.iter().map(|v| v.to_f64_lossless()).collect()),
    };
    RawTensor {
        name: name.to_string(),
        dims: shape.iter().map(|&d| d as u64).collect(),
        data,
    }
}

fn values_as<T: Scalar>(raw: &RawTensor) -> Result<Vec<T>> {
    if raw.data.dtype() != T::DTYPE {
        return Err(LiftError::DtypeMismatch {
            name: raw.name.clone(),
            found: raw.data.dtype(),
            expected: T::DTYPE,
        });
    }
    Ok(match &raw.data {
        RawData::F32(v) => v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect(),
        RawData::F64(v) => v.iter().map(|&x| T::from_f64_lossy(x)).collect(),
    })
}

pub fn encode(tensors: &[RawTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| LiftError::Malformed("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| LiftError::Malformed(format!("name too long: {}", t.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let rank = u8::try_from(t.dims.len()).map_err(|_| LiftError::Malformed("rank > 255".into()))?;
        out.push(rank);
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(t.data.dtype());
        match &t.data {
            RawData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RawData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| LiftError::Malformed(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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
}

pub fn decode(bytes: &[u8]) -> Result<Vec<RawTensor>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(LiftError::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 12 {
        return Err(LiftError::Checksum {
            stored: 0,
            computed: crc32fast::hash(bytes),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(LiftError::Checksum { stored, computed });
    }

    let mut r = Reader { bytes: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(LiftError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| LiftError::Malformed("tensor name is not utf-8".into()))?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1u64, |a, &d| a.checked_mul(d))
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| LiftError::Malformed(format!("`{name}` has oversized dims {dims:?}")))?;
        let data = match r.u8()? {
            0 => RawData::F32(
                r.take(numel.checked_mul(4).ok_or_else(|| LiftError::Malformed("size overflow".into()))?)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 => RawData::F64(
                r.take(numel.checked_mul(8).ok_or_else(|| LiftError::Malformed("size overflow".into()))?)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            other => return Err(LiftError::Malformed(format!("`{name}` has unknown dtype {other}"))),
        };
        debug_assert_eq!(data.len(), numel);
        out.push(RawTensor { name, dims, data });
    }
    if r.pos != body.len() {
        return Err(LiftError::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(out)
}

/// Serializes parameters (and optionally optimizer state) to bytes.
pub fn to_bytes<T: Scalar>(params: &ParamStore<T>, opt: Option<&AdamState<T>>) -> Result<Vec<u8>> {
    let mut raws: Vec<RawTensor> = params.iter().map(|(n, t)| raw_from(n, t.shape(), t.data())).collect();
    if let Some(opt) = opt {
        if !opt.matches(params) {
            return Err(LiftError::StructureMismatch("optimizer state does not match parameters".into()));
        }
        for (prefix, moments) in [(FIRST_MOMENT, &opt.first), (SECOND_MOMENT, &opt.second)] {
            for ((n, t), m) in params.iter().zip(moments) {
                raws.push(raw_from(&format!("{prefix}{n}"), t.shape(), m));
            }
        }
        raws.push(RawTensor {
            name: STEP.into(),
            dims: vec![1],
            data: RawData::F64(vec![opt.step as f64]),
        });
    }
    encode(&raws)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(ParamStore<T>, Option<AdamState<T>>)> {
    let raws = decode(bytes)?;
    let mut params = ParamStore::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    let mut step = None;
    for raw in &raws {
        let shape: Vec<usize> = raw.dims.iter().map(|&d| d as usize).collect();
        if raw.name == STEP {
            step = match &raw.data {
                RawData::F64(v) if v.len() == 1 => Some(v[0] as u64),
                _ => return Err(LiftError::Malformed("bad optimizer step tensor".into())),
            };
        } else if let Some(name) = raw.name.strip_prefix(FIRST_MOMENT) {
            first.push((name.to_string(), values_as::<T>(raw)?));
        } else if let Some(name) = raw.name.strip_prefix(SECOND_MOMENT) {
            second.push((name.to_string(), values_as::<T>(raw)?));
        } else {
            params.insert(raw.name.clone(), Tensor::from_vec(&shape, values_as::<T>(raw)?)?)?;
        }
    }
    let opt = match step {
        None if first.is_empty() && second.is_empty() => None,
        None => return Err(LiftError::Malformed("optimizer moments without a step counter".into())),
        Some(step) => {
            let names: Vec<&str> = params.iter().map(|(n, _)| n).collect();
            let order_ok = |moments: &[(String, Vec<T>)]| {
                moments.len() == names.len() && moments.iter().zip(&names).all(|((a, _), b)| a == b)
            };
            if !order_ok(&first) || !order_ok(&second) {
                return Err(LiftError::Malformed("optimizer moments do not match parameters".into()));
            }
            let mut st = AdamState::new(&params);
            st.first = first.into_iter().map(|(_, v)| v).collect();
            st.second = second.into_iter().map(|(_, v)| v).collect();
            st.step = step;
            if !st.matches(&params) {
                return Err(LiftError::Malformed("optimizer moment shapes do not match".into()));
            }
            Some(st)
        }
    };
    Ok((params, opt))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, params: &ParamStore<T>, opt: Option<&AdamState<T>>) -> Result<()> {
    fs::write(path, to_bytes(params, opt)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, Option<AdamState<T>>)> {
    from_bytes(&fs::read(path)?)
}
