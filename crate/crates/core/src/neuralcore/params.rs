use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    #[serde(rename = "encoder-group")]
    Encoder,
    #[serde(rename = "main-group")]
    Main,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamGroup::Encoder => "encoder-group",
            ParamGroup::Main => "main-group",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Non-trainable state saved alongside parameters (batch-norm running stats).
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

/// Owns every trainable parameter and buffer of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<Buffer>,
    names: HashMap<String, usize>,
    buffer_names: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        value: Tensor,
    ) -> Result<ParamId, NnError> {
        let name = name.into();
        if self.names.contains_key(&name) || self.buffer_names.contains_key(&name) {
            return Err(NnError::DuplicateName(name));
        }
        let id = self.params.len();
        self.names.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            group,
            value,
            grad,
        });
        Ok(ParamId(id))
    }

    pub fn register_buffer(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
    ) -> Result<BufferId, NnError> {
        let name = name.into();
        if self.names.contains_key(&name) || self.buffer_names.contains_key(&name) {
            return Err(NnError::DuplicateName(name));
        }
        let id = self.buffers.len();
        self.buffer_names.insert(name.clone(), id);
        self.buffers.push(Buffer { name, value });
        Ok(BufferId(id))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// `(name, shape)` for every parameter in registration order.
    pub fn signature(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect()
    }

    /// Copies values (not gradients) of every parameter and buffer from
    /// `other`, which must have an identical signature.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<(), NnError> {
        if self.signature() != other.signature() || self.buffers.len() != other.buffers.len() {
            return Err(NnError::Checkpoint("parameter layout differs".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value = src.value.clone();
        }
        for (dst, src) in self.buffers.iter_mut().zip(&other.buffers) {
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// Writes the binary checkpoint described in the README.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), NnError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let count = (self.params.len() + self.buffers.len()) as u32;
        w.write_all(&count.to_le_bytes())?;
        let entries = self
            .params
            .iter()
            .map(|p| {
                let tag = match p.group {
                    ParamGroup::Main => 0u8,
                    ParamGroup::Encoder => 1u8,
                };
                (p.name.as_str(), tag, &p.value)
            })
            .chain(self.buffers.iter().map(|b| (b.name.as_str(), 2u8, &b.value)));
        for (name, tag, value) in entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[tag])?;
            w.write_all(&(value.shape().len() as u32).to_le_bytes())?;
            for &d in value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Overwrites values from a checkpoint. Every entry must match an
    /// existing parameter or buffer by name, group and shape, and every
    /// parameter and buffer must be present.
    pub fn read_checkpoint<R: Read>(&mut self, r: R) -> Result<(), NnError> {
        let entries = read_checkpoint_entries(r)?;
        if entries.len() != self.params.len() + self.buffers.len() {
            return Err(NnError::Checkpoint(format!(
                "checkpoint has {} entries, model expects {}",
                entries.len(),
                self.params.len() + self.buffers.len()
            )));
        }
        for entry in entries {
            let target = match entry.group {
                Some(group) => {
                    let id = self.names.get(&entry.name).copied().ok_or_else(|| {
                        NnError::Checkpoint(format!("unknown parameter {}", entry.name))
                    })?;
                    let p = &mut self.params[id];
                    if p.group != group {
                        return Err(NnError::Checkpoint(format!(
                            "group mismatch for {}",
                            entry.name
                        )));
                    }
                    &mut p.value
                }
                None => {
                    let id = self.buffer_names.get(&entry.name).copied().ok_or_else(|| {
                        NnError::Checkpoint(format!("unknown buffer {}", entry.name))
                    })?;
                    &mut self.buffers[id].value
                }
            };
            if target.shape() != entry.value.shape() {
                return Err(NnError::Checkpoint(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    entry.name,
                    target.shape(),
                    entry.value.shape()
                )));
            }
            *target = entry.value;
        }
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ERCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One decoded checkpoint record; `group` is `None` for buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub group: Option<ParamGroup>,
    pub value: Tensor,
}

pub fn read_checkpoint_entries<R: Read>(mut r: R) -> Result<Vec<CheckpointEntry>, NnError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| NnError::Checkpoint("parameter name is not UTF-8".into()))?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let group = match tag[0] {
            0 => Some(ParamGroup::Main),
            1 => Some(ParamGroup::Encoder),
            2 => None,
            t => return Err(NnError::Checkpoint(format!("bad group tag {t}"))),
        };
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        entries.push(CheckpointEntry {
            name,
            group,
            value: Tensor::new(shape, data)?,
        });
    }
    Ok(entries)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
