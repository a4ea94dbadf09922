//! Versioned binary checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic "PSEGCKPT" | u32 version
//! u32 len, utf-8 config text
//! u8 phase | u64 epoch | f64 best validation mDice
//! u32 tensor count, then per tensor:
//!     u32 len, utf-8 name | u8 kind (0 trainable, 1 buffer)
//!     u32 rank | u64 dims... | f32 values...
//! u32 velocity count, then per slot:
//!     u32 len, utf-8 name | u64 len | f32 values...
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::Sgd;
use crate::params::{ParamKind, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PSEGCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: String,
    pub phase: u8,
    pub epoch: u64,
    pub best_mdice: f64,
    pub tensors: Vec<NamedTensor>,
    /// Optimizer momentum buffers by parameter name.
    pub velocities: Vec<(String, Vec<f32>)>,
}

impl Checkpoint {
    pub fn capture(config: &str, phase: u8, epoch: u64, best_mdice: f64, params: &ParamSet<f32>, opt: Option<&Sgd<f32>>) -> Self {
        let tensors = params
            .entries()
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                kind: e.kind,
                shape: e.tensor.shape().to_vec(),
                values: e.tensor.data().to_vec(),
            })
            .collect();
        let velocities = opt
            .map(|o| {
                o.registered()
                    .map(|id| (params.name(id).to_string(), o.velocity(id).expect("registered").to_vec()))
                    .collect()
            })
            .unwrap_or_default();
        Checkpoint { version: VERSION, config: config.to_string(), phase, epoch, best_mdice, tensors, velocities }
    }

    /// Copies the stored values into `params`, which must have exactly the
    /// same names, shapes and kinds; otherwise the error lists every
    /// difference.
    pub fn restore_params(&self, params: &mut ParamSet<f32>) -> Result<()> {
        let mut diff = Vec::new();
        for t in &self.tensors {
            match params.id(&t.name) {
                None => diff.push(format!("unexpected `{}` in checkpoint", t.name)),
                Some(id) if params.get(id).shape() != t.shape.as_slice() => {
                    diff.push(format!("`{}` shape {:?} in checkpoint vs {:?} in model", t.name, t.shape, params.get(id).shape()))
                }
                Some(id) if params.kind(id) != t.kind => diff.push(format!("`{}` kind differs", t.name)),
                _ => {}
            }
        }
        for e in params.entries() {
            if !self.tensors.iter().any(|t| t.name == e.name) {
                diff.push(format!("`{}` missing from checkpoint", e.name));
            }
        }
        if !diff.is_empty() {
            return Err(Error::Checkpoint(format!("parameter mismatch: {}", diff.join("; "))));
        }
        for t in &self.tensors {
            let id = params.id(&t.name).expect("checked");
            *params.get_mut(id) = Tensor::new(t.shape.clone(), t.values.clone())?;
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, params: &ParamSet<f32>, opt: &mut Sgd<f32>) -> Result<()> {
        for (name, v) in &self.velocities {
            let id = params.id(name).ok_or_else(|| Error::Checkpoint(format!("velocity for unknown `{name}`")))?;
            opt.set_velocity(id, v.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        let str_ = |b: &mut Vec<u8>, s: &str| {
            b.extend((s.len() as u32).to_le_bytes());
            b.extend(s.as_bytes());
        };
        let f32s = |b: &mut Vec<u8>, v: &[f32]| v.iter().for_each(|x| b.extend(x.to_le_bytes()));
        b.extend(MAGIC);
        b.extend(self.version.to_le_bytes());
        str_(&mut b, &self.config);
        b.push(self.phase);
        b.extend(self.epoch.to_le_bytes());
        b.extend(self.best_mdice.to_le_bytes());
        b.extend((self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            str_(&mut b, &t.name);
            b.push(match t.kind {
                ParamKind::Trainable => 0,
                ParamKind::Buffer => 1,
            });
            b.extend((t.shape.len() as u32).to_le_bytes());
            t.shape.iter().for_each(|&d| b.extend((d as u64).to_le_bytes()));
            f32s(&mut b, &t.values);
        }
        b.extend((self.velocities.len() as u32).to_le_bytes());
        for (name, v) in &self.velocities {
            str_(&mut b, name);
            b.extend((v.len() as u64).to_le_bytes());
            f32s(&mut b, v);
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let config = r.string()?;
        let phase = r.take(1)?[0];
        let epoch = r.u64()?;
        let best_mdice = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let kind = match r.take(1)?[0] {
                0 => ParamKind::Trainable,
                1 => ParamKind::Buffer,
                k => return Err(Error::Checkpoint(format!("`{name}`: unknown kind {k}"))),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().product();
            let values = r.f32s(len)?;
            tensors.push(NamedTensor { name, kind, shape, values });
        }
        let n = r.u32()? as usize;
        let mut velocities = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let len = r.u64()? as usize;
            velocities.push((name, r.f32s(len)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { version, config, phase, epoch, best_mdice, tensors, velocities })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Read { path: path.to_path_buf(), msg: e.to_string() })?;
        Checkpoint::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len()).ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not utf-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}
