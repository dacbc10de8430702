//! Named parameter collections partitioned into shared and personal groups.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tensor, TensorError};

/// Whether a parameter travels to the server or stays on the client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Shared,
    Personal,
}

/// Trainable weights are updated by the optimizer; buffers (batch-norm
/// running statistics) are only written by forward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Weight,
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub tensor: Tensor,
    pub group: Group,
    pub kind: Kind,
}

/// Ordered map from parameter name to tensor plus group.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, kind: Kind) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(TensorError::Contract(format!("duplicate parameter name `{name}`")));
        }
        let tensor = match kind {
            Kind::Weight => tensor.with_grad(),
            Kind::Buffer => tensor,
        };
        self.entries.insert(
            name.to_string(),
            Param {
                tensor,
                group: Group::Personal,
                kind,
            },
        );
        Ok(())
    }

    /// Registers a weight initialized uniformly in `±1/√fan_in`.
    pub fn insert_uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape, data)?, Kind::Weight)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entry(name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn entry(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn set_group(&mut self, name: &str, group: Group) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|p| p.group = group)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn group_of(&self, name: &str) -> Result<Group> {
        self.entry(name).map(|p| p.group)
    }

    pub fn shared_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.group == Group::Shared)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if p.kind == Kind::Weight {
            p.tensor.accumulate_grad(grad)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Total scalar count of all entries.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    /// Copies of every SHARED tensor.
    pub fn shared_snapshot(&self) -> Snapshot {
        let mut snap = Snapshot::default();
        for (name, p) in &self.entries {
            if p.group == Group::Shared {
                snap.entries.insert(
                    name.clone(),
                    Tensor::new(p.tensor.shape(), p.tensor.data().to_vec()).expect("valid"),
                );
            }
        }
        snap
    }

    /// Overwrites the values of the named entries from `snapshot`.
    pub fn load(&mut self, snapshot: &Snapshot) -> Result<()> {
        for (name, t) in &snapshot.entries {
            let dst = self.get_mut(name)?;
            if dst.shape() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load",
                    left: dst.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Snapshot of every entry regardless of group (used for checkpoints).
    pub fn full_snapshot(&self) -> Snapshot {
        let mut snap = Snapshot::default();
        for (name, p) in &self.entries {
            snap.entries.insert(
                name.clone(),
                Tensor::new(p.tensor.shape(), p.tensor.data().to_vec()).expect("valid"),
            );
        }
        snap
    }
}

/// Plain name → tensor map without gradients; the unit exchanged between
/// server and clients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Snapshot {
    pub entries: BTreeMap<String, Tensor>,
}

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed record stream: {0}")]
    Malformed(String),
}

impl Snapshot {
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    /// Element-wise `self − other` over identical key sets.
    pub fn delta_from(&self, base: &Snapshot) -> Result<Snapshot> {
        let mut out = Snapshot::default();
        for (name, t) in &self.entries {
            let b = base
                .entries
                .get(name)
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            if b.shape() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "delta",
                    left: t.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let data = t.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
            out.entries.insert(name.clone(), Tensor::new(t.shape(), data)?);
        }
        Ok(out)
    }

    /// Serializes as: u64 record count, then per record u32 name length,
    /// UTF-8 name, u32 rank, rank × u64 dims, and the f64 values, all
    /// little-endian, in name order.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::result::Result<(), CodecError> {
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> std::result::Result<Self, CodecError> {
        fn u32_le<R: Read>(r: &mut R) -> io::Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        fn u64_le<R: Read>(r: &mut R) -> io::Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        }
        let count = u64_le(&mut r)?;
        let mut snap = Snapshot::default();
        for _ in 0..count {
            let len = u32_le(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name =
                String::from_utf8(name).map_err(|_| CodecError::Malformed("parameter name is not UTF-8".into()))?;
            let rank = u32_le(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64_le(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_bits(u64_le(&mut r)?));
            }
            let t = Tensor::new(&shape, data).map_err(|e| CodecError::Malformed(e.to_string()))?;
            if snap.entries.insert(name.clone(), t).is_some() {
                return Err(CodecError::Malformed(format!("duplicate record `{name}`")));
            }
        }
        Ok(snap)
    }
}
