//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CLSK" | u32 version | u32 len + key=value lines (model config echo)
//!        | u64 step | u32 blob count
//!        | blobs: u8 kind | u32 len + name | u32 rank | u64 extents | f64 values
//! ```
//!
//! Blob kinds are parameters, batch-norm statistics (`<layer>.mean` and
//! `<layer>.var`) and optimizer velocity keyed by parameter name. Loading
//! checks the config echo and every name and extent against the target model.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ClassMini, ModelConfig};
use crate::netpbm::write_bytes;
use crate::tensor::Tensor;
use crate::trainer::Velocity;

pub const MAGIC: &[u8; 4] = b"CLSK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlobKind {
    Param = 0,
    Buffer = 1,
    Velocity = 2,
}

impl BlobKind {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(BlobKind::Param),
            1 => Some(BlobKind::Buffer),
            2 => Some(BlobKind::Velocity),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub kind: BlobKind,
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub step: u64,
    pub blobs: Vec<Blob>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Parse {
            offset: self.pos,
            message: format!("truncated checkpoint while reading {what}"),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self, what: &str) -> Result<&'a str> {
        let at = self.pos;
        let n = self.u32(what)? as usize;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| Error::Parse {
            offset: at,
            message: format!("{what} is not UTF-8"),
        })
    }
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

impl Checkpoint {
    /// Snapshot of a model, optionally with optimizer velocity, at `step`.
    pub fn capture(model: &ClassMini, velocity: Option<&Velocity>, step: u64) -> Self {
        let mut blobs: Vec<Blob> = model
            .params
            .iter()
            .map(|(name, t)| Blob {
                kind: BlobKind::Param,
                name: name.to_string(),
                tensor: Tensor::new(t.shape(), t.data().to_vec()).expect("same shape"),
            })
            .collect();
        for (name, stats) in model.buffers.iter() {
            for (suffix, v) in [("mean", &stats.mean), ("var", &stats.var)] {
                blobs.push(Blob {
                    kind: BlobKind::Buffer,
                    name: format!("{name}.{suffix}"),
                    tensor: Tensor::new(&[v.len()], v.clone()).expect("vector"),
                });
            }
        }
        if let Some(vel) = velocity {
            for ((name, t), v) in model.params.iter().zip(vel.values()) {
                blobs.push(Blob {
                    kind: BlobKind::Velocity,
                    name: name.to_string(),
                    tensor: Tensor::new(t.shape(), v.clone()).expect("velocity matches parameter"),
                });
            }
        }
        Self {
            config: model.config.echo(),
            step,
            blobs,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        let config: String = self.config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_text(&mut out, &config);
        out.extend(self.step.to_le_bytes());
        out.extend((self.blobs.len() as u32).to_le_bytes());
        for b in &self.blobs {
            out.push(b.kind as u8);
            put_text(&mut out, &b.name);
            out.extend((b.tensor.ndim() as u32).to_le_bytes());
            for &d in b.tensor.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            for v in b.tensor.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let config_at = r.pos;
        let config = r
            .text("config")?
            .lines()
            .map(|l| {
                l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())).ok_or_else(|| Error::Parse {
                    offset: config_at,
                    message: format!("config line {l:?} is not key=value"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let step = r.u64("step")?;
        let count = r.u32("blob count")?;
        let mut blobs = Vec::new();
        for _ in 0..count {
            let at = r.pos;
            let kind = BlobKind::from_byte(r.u8("blob kind")?).ok_or_else(|| Error::Parse {
                offset: at,
                message: "unknown blob kind".into(),
            })?;
            let name = r.text("blob name")?.to_string();
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank).map(|_| r.u64("extent").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Parse {
                offset: at,
                message: format!("extents {shape:?} overflow"),
            })?;
            let raw = r.take(n.checked_mul(8).unwrap_or(usize::MAX), "blob values")?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            blobs.push(Blob {
                kind,
                name,
                tensor: Tensor::new(&shape, data)?,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse {
                offset: r.pos,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self { config, step, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Parse { offset, message } => Error::Parse {
                offset,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::from_echo(&self.config)
    }

    /// Builds the model described by the checkpoint and restores its state.
    pub fn build_model(&self) -> Result<ClassMini> {
        let mut model = ClassMini::build(self.model_config()?)?;
        self.restore(&mut model)?;
        Ok(model)
    }

    fn blobs(&self, kind: BlobKind) -> impl Iterator<Item = &Blob> {
        self.blobs.iter().filter(move |b| b.kind == kind)
    }

    /// Copies parameters and statistics into `model`, which must have the
    /// same configuration, names and extents.
    pub fn restore(&self, model: &mut ClassMini) -> Result<()> {
        if self.config != model.config.echo() {
            return Err(Error::Checkpoint(format!(
                "configuration mismatch: checkpoint has {:?}, model has {:?}",
                self.config,
                model.config.echo()
            )));
        }
        let params: Vec<&Blob> = self.blobs(BlobKind::Param).collect();
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters in checkpoint, {} in model",
                params.len(),
                model.params.len()
            )));
        }
        for (b, (name, t)) in params.iter().zip(model.params.iter_mut()) {
            if b.name != name || b.tensor.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match model {name} {:?}",
                    b.name,
                    b.tensor.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(b.tensor.data());
        }
        let buffers: Vec<&Blob> = self.blobs(BlobKind::Buffer).collect();
        if buffers.len() != 2 * model.buffers.len() {
            return Err(Error::Checkpoint(format!(
                "{} statistics blobs in checkpoint, model needs {}",
                buffers.len(),
                2 * model.buffers.len()
            )));
        }
        let names: Vec<String> = model.buffers.iter().map(|(n, _)| n.to_string()).collect();
        for (pair, name) in buffers.chunks(2).zip(names) {
            let stats = model.buffers.by_name_mut(&name).expect("listed buffer");
            for (b, suffix, dst) in [(pair[0], "mean", &mut stats.mean), (pair[1], "var", &mut stats.var)] {
                if b.name != format!("{name}.{suffix}") || b.tensor.numel() != dst.len() {
                    return Err(Error::Checkpoint(format!("statistics {} do not match model {name}.{suffix}", b.name)));
                }
                dst.copy_from_slice(b.tensor.data());
            }
        }
        Ok(())
    }

    /// Optimizer velocity for `model`, or `None` when the checkpoint has none.
    pub fn velocity(&self, model: &ClassMini) -> Result<Option<Velocity>> {
        let blobs: Vec<&Blob> = self.blobs(BlobKind::Velocity).collect();
        if blobs.is_empty() {
            return Ok(None);
        }
        if blobs.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} velocity blobs for {} parameters",
                blobs.len(),
                model.params.len()
            )));
        }
        let mut values = Vec::with_capacity(blobs.len());
        for (b, (name, t)) in blobs.iter().zip(model.params.iter()) {
            if b.name != name || b.tensor.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("velocity {} does not match parameter {name}", b.name)));
            }
            values.push(b.tensor.data().to_vec());
        }
        Ok(Some(Velocity::from_values(values)))
    }
}
