use std::collections::HashMap;
use std::io::{Read, Write};

use crate::error::format_err;
use crate::io::{read_f64, read_magic, read_u32};
use crate::{Error, Result, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PCCK";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvKernel,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Whether the optimizer updates this tensor.
    pub fn trainable(self) -> bool {
        matches!(self, Self::ConvKernel | Self::BnScale | Self::BnShift)
    }

    fn from_name(name: &str) -> Self {
        match name.rsplit('.').next() {
            Some("gamma") => Self::BnScale,
            Some("beta") => Self::BnShift,
            Some("running_mean") => Self::RunningMean,
            Some("running_var") => Self::RunningVar,
            _ => Self::ConvKernel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

/// Flat registry of named network tensors, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: PartialEq> PartialEq for ParameterSet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::ParamMismatch(format!("duplicate parameter name {name}")));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::ParamMismatch(format!("{name}: data length does not match dims {dims:?}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter"));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            kind: ParamKind::from_name(&name),
            name,
            dims,
            data,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].data
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.entries[id.0].data
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.trainable())
            .map(|e| e.data.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.data.iter().all(|v| v.is_finite()))
    }

    /// FNV-1a over names, shapes and value bits; changes whenever any value does.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for e in &self.entries {
            eat(e.name.as_bytes());
            for d in &e.dims {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in &e.data {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Writes every tensor as `(name length, name, rank, dims, f64 data)`.
    pub fn write_tensors<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&(e.dims.len() as u32).to_le_bytes())?;
            for d in &e.dims {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in &e.data {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_tensors<R: Read>(r: &mut R) -> Result<Self> {
        let count = read_u32(r)? as usize;
        let mut set = Self::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            if len > 4096 {
                return Err(format_err("checkpoint", "parameter name too long"));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)
                .map_err(|_| format_err("checkpoint", "truncated parameter name"))?;
            let name = String::from_utf8(name).map_err(|_| format_err("checkpoint", "name is not UTF-8"))?;
            let rank = read_u32(r)? as usize;
            if rank > 8 {
                return Err(format_err("checkpoint", format!("{name}: implausible rank {rank}")));
            }
            let dims = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            if n > 1 << 30 {
                return Err(format_err("checkpoint", format!("{name}: implausible size")));
            }
            let data = (0..n).map(|_| read_f64(r).map(T::lit)).collect::<Result<Vec<_>>>()?;
            set.register(name, dims, data)?;
        }
        Ok(set)
    }
}

/// Gradients aligned entry-for-entry with a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T> {
    grads: Vec<Vec<T>>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn zeros_like(params: &ParameterSet<T>) -> Self {
        Self {
            grads: params.entries.iter().map(|e| vec![T::zero(); e.data.len()]).collect(),
        }
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.grads[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.grads[id.0]
    }

    pub fn by_index(&self, i: usize) -> &[T] {
        &self.grads[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.grads[i]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn is_congruent(&self, params: &ParameterSet<T>) -> bool {
        self.grads.len() == params.len()
            && self
                .grads
                .iter()
                .zip(&params.entries)
                .all(|(g, e)| g.len() == e.data.len())
    }

    pub fn add_assign(&mut self, other: &GradientSet<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.grads {
            for v in g {
                *v *= s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }
}

pub(crate) fn write_magic<W: Write>(w: &mut W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    Ok(())
}

pub(crate) fn read_checkpoint_magic<R: Read>(r: &mut R) -> Result<()> {
    read_magic(r, CHECKPOINT_MAGIC, "checkpoint")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_rejects_duplicates_and_bad_shapes() {
        let mut p = ParameterSet::<f64>::new();
        p.register("a.weight", vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(p.register("a.weight", vec![1], vec![0.0]).is_err());
        assert!(p.register("b", vec![3], vec![0.0; 2]).is_err());
        assert!(p.register("c", vec![1], vec![f64::NAN]).is_err());
        assert_eq!(p.entry(p.id("a.weight").unwrap()).kind, ParamKind::ConvKernel);
    }

    #[test]
    fn kinds_follow_name_suffix() {
        let mut p = ParameterSet::<f32>::new();
        for n in ["x.gamma", "x.beta", "x.running_mean", "x.running_var"] {
            p.register(n, vec![1], vec![1.0]).unwrap();
        }
        let kinds: Vec<_> = p.entries().iter().map(|e| e.kind.trainable()).collect();
        assert_eq!(kinds, [true, true, false, false]);
        assert_eq!(p.trainable_count(), 2);
    }

    #[test]
    fn tensor_block_round_trip() {
        let mut p = ParameterSet::<f64>::new();
        p.register("conv", vec![2, 1, 3], vec![0.5, -1.0, 2.0, 1e-300, 3.25, -0.0]).unwrap();
        p.register("bn.gamma", vec![3], vec![1.0; 3]).unwrap();
        let mut buf = Vec::new();
        p.write_tensors(&mut buf).unwrap();
        let back = ParameterSet::<f64>::read_tensors(&mut buf.as_slice()).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.fingerprint(), p.fingerprint());
        assert!(ParameterSet::<f64>::read_tensors(&mut &buf[..buf.len() - 1]).is_err());
    }
}
