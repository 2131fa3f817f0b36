//! Named parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "AEICW" | version u8 | config_id u8 |
//!   repeated: name_len u16 | name bytes | shape 4×u32 | f32 data
//! ```

use std::io::{Read, Write};

use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"AEICW";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered list of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
}

impl<S: Real> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|t| t.shape().numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Overwrite every value from `other`, which must have identical names
    /// and shapes.
    pub fn copy_from(&mut self, other: &ParamStore<S>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint("parameter lists differ".into()));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(Error::ShapeMismatch {
                    op: "copy_from",
                    lhs: dst.shape(),
                    rhs: src.shape(),
                });
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

pub fn write_checkpoint<W: Write>(store: &ParamStore<f32>, config_id: u8, mut out: W) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&[CHECKPOINT_VERSION, config_id])?;
    for (name, t) in store.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(bytes)?;
        for d in t.shape().0 {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dimension too large in {name}")))?;
            out.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.data().len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

/// Parse a checkpoint into its config id and parameter list.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(u8, ParamStore<f32>)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let bad = |msg: &str, at: usize| Error::Checkpoint(format!("{msg} at byte {at}"));
    if bytes.len() < 7 || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic", 0));
    }
    if bytes[5] != CHECKPOINT_VERSION {
        return Err(bad("unsupported version", 5));
    }
    let config_id = bytes[6];
    let mut pos = 7;
    let mut store = ParamStore::new();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let start = *pos;
        let end = start.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated record", start))?;
        *pos = end;
        Ok(&bytes[start..end])
    };
    while pos < bytes.len() {
        let len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name_at = pos;
        let name = std::str::from_utf8(take(&mut pos, len)?)
            .map_err(|_| bad("name is not utf-8", name_at))?
            .to_owned();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        }
        let shape = Shape(dims);
        let raw = take(&mut pos, shape.numel() * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        store.add(name, Tensor::from_vec(shape, data)?);
    }
    Ok((config_id, store))
}
