//! Versioned, sectioned checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! 4   magic "MICK"
//! 2   version (u16, currently 1)
//! 1   precision tag (4 = f32, 8 = f64) of every stored value
//! 4   section count (u32)
//! per section:
//!     2 + n   name (u16 length, UTF-8)
//!     8       payload length (u64)
//!     payload:
//!         1   kind (0 = text, 1 = tensors)
//!         text:    UTF-8 bytes
//!         tensors: u32 count, then per tensor
//!                  u16 name length, name, u8 rank, u32 dims, values
//! ```
//!
//! A training checkpoint holds the sections `config`, `encoder`, `gate`, the
//! context sections (`irnn1`/`irnn2`, `conv1`/`conv2`, or none), `head`,
//! `optimizer` and `trainer`.

use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Precision, Real, Tensor};
use crate::train::TrainerState;

pub const MAGIC: [u8; 4] = *b"MICK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Exact for either stored precision.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Text(String),
    Tensors(Vec<NamedTensor>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointFile {
    pub precision: Precision,
    pub sections: Vec<(String, Payload)>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                needed: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            });
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

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn malformed(&self, msg: impl Into<String>) -> Error {
        Error::Malformed {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn string(&mut self, len: usize) -> Result<String> {
        let b = self.take(len)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.malformed("name is not UTF-8"))
    }
}

impl CheckpointFile {
    pub fn section(&self, name: &str) -> Option<&Payload> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn text(&self, path: &Path, name: &str) -> Result<&str> {
        match self.section(name) {
            Some(Payload::Text(t)) => Ok(t),
            _ => Err(Error::Malformed {
                path: path.to_path_buf(),
                msg: format!("missing text section {name:?}"),
            }),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.precision.tag());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, payload) in &self.sections {
            put_str(&mut out, name);
            let mut body = Vec::new();
            match payload {
                Payload::Text(t) => {
                    body.push(0);
                    body.extend_from_slice(t.as_bytes());
                }
                Payload::Tensors(ts) => {
                    body.push(1);
                    body.extend_from_slice(&(ts.len() as u32).to_le_bytes());
                    for t in ts {
                        put_str(&mut body, &t.name);
                        body.push(t.shape.len() as u8);
                        for &d in &t.shape {
                            body.extend_from_slice(&(d as u32).to_le_bytes());
                        }
                        for &v in &t.values {
                            match self.precision {
                                Precision::F32 => (v as f32).put_le(&mut body),
                                Precision::F64 => v.put_le(&mut body),
                            }
                        }
                    }
                }
            }
            out.extend_from_slice(&(body.len() as u64).to_le_bytes());
            out.extend_from_slice(&body);
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { path, bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: MAGIC,
                found: magic,
            });
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                expected: VERSION,
                found: version,
            });
        }
        let tag = r.u8()?;
        let precision = Precision::from_tag(tag).ok_or_else(|| r.malformed(format!("unknown precision tag {tag}")))?;
        let count = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = r.string(len)?;
            let body_len = r.u64()? as usize;
            let end = r.pos.checked_add(body_len).ok_or_else(|| r.malformed("section too long"))?;
            let kind = r.u8()?;
            let payload = match kind {
                0 => Payload::Text(r.string(body_len - 1)?),
                1 => {
                    let n = r.u32()?;
                    let mut ts = Vec::new();
                    for _ in 0..n {
                        let len = r.u16()? as usize;
                        let tname = r.string(len)?;
                        let rank = r.u8()? as usize;
                        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                        let numel: usize = shape.iter().product();
                        let w = precision.width();
                        let raw = r.take(numel * w)?;
                        let values = match precision {
                            Precision::F32 => raw.chunks_exact(4).map(|c| f32::get_le(c) as f64).collect(),
                            Precision::F64 => raw.chunks_exact(8).map(f64::get_le).collect(),
                        };
                        ts.push(NamedTensor { name: tname, shape, values });
                    }
                    Payload::Tensors(ts)
                }
                k => return Err(r.malformed(format!("section {name:?} has unknown kind {k}"))),
            };
            if r.pos != end {
                return Err(r.malformed(format!("section {name:?} length mismatch")));
            }
            sections.push((name, payload));
        }
        if r.pos != bytes.len() {
            return Err(r.malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(CheckpointFile { precision, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write then rename, so an interrupted save never clobbers a good file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}

fn named<T: Real>(name: &str, t: &Tensor<T>) -> NamedTensor {
    NamedTensor {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        values: t.data().iter().map(|v| v.as_f64()).collect(),
    }
}

/// Parameter sections of a model, one per group.
pub fn model_sections<T: Real>(model: &Model<T>) -> Vec<(String, Payload)> {
    model
        .groups()
        .into_iter()
        .map(|(sec, ts)| (sec, Payload::Tensors(ts.iter().map(|(n, t)| named(n, t)).collect())))
        .collect()
}

/// Builds a model for `config` and fills it from the file, checking every
/// section, name and shape.
pub fn restore_model<T: Real>(path: &Path, config: ModelConfig, file: &CheckpointFile) -> Result<Model<T>> {
    let mut model = Model::<T>::init(config, 0)?;
    let mut values: Vec<Tensor<T>> = Vec::new();
    for (sec, ts) in model.groups() {
        let Some(Payload::Tensors(stored)) = file.section(&sec) else {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                msg: format!("checkpoint has no parameter section {sec:?} required by the configuration"),
            });
        };
        if stored.len() != ts.len() {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                msg: format!("section {sec:?} holds {} tensors, configuration expects {}", stored.len(), ts.len()),
            });
        }
        for ((name, t), s) in ts.iter().zip(stored) {
            if s.name != *name {
                return Err(Error::Malformed {
                    path: path.to_path_buf(),
                    msg: format!("section {sec:?}: expected tensor {name:?}, found {:?}", s.name),
                });
            }
            if s.shape != t.shape() {
                return Err(Error::shape("checkpoint restore", &s.shape, t.shape()));
            }
            values.push(Tensor::new(s.shape.clone(), s.values.iter().map(|&v| T::of(v)).collect())?);
        }
    }
    for (dst, v) in model.tensors_mut().into_iter().zip(values) {
        *dst = v;
    }
    Ok(model)
}

/// Everything needed to evaluate or resume a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: Config,
    pub model: Model<T>,
    /// Momentum buffers in [`Model::tensors_mut`] order.
    pub velocity: Vec<Tensor<T>>,
    pub state: TrainerState,
}

impl<T: Real> Checkpoint<T> {
    pub fn to_file(&self) -> CheckpointFile {
        let mut sections = vec![("config".to_string(), Payload::Text(self.config.to_toml()))];
        sections.extend(model_sections(&self.model));
        let velocity = self.velocity.iter().enumerate().map(|(i, v)| named(&format!("v{i}"), v)).collect();
        sections.push(("optimizer".to_string(), Payload::Tensors(velocity)));
        sections.push(("trainer".to_string(), Payload::Text(self.state.to_toml())));
        CheckpointFile {
            precision: T::PRECISION,
            sections,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().save(path)
    }

    /// Loads a checkpoint; with `model_config` the parameters must fit that
    /// configuration instead of the stored one.
    pub fn load(path: &Path, model_config: Option<ModelConfig>) -> Result<Self> {
        let file = CheckpointFile::load(path)?;
        let mut config = Config::parse(file.text(path, "config")?)?;
        if let Some(m) = model_config {
            config.set_model(m);
        }
        let model = restore_model::<T>(path, config.model(), &file)?;
        let velocity = match file.section("optimizer") {
            Some(Payload::Tensors(ts)) => ts
                .iter()
                .map(|t| Tensor::new(t.shape.clone(), t.values.iter().map(|&v| T::of(v)).collect()))
                .collect::<Result<Vec<_>>>()?,
            _ => vec![],
        };
        let state = TrainerState::parse(file.text(path, "trainer")?)?;
        Ok(Checkpoint {
            config,
            model,
            velocity,
            state,
        })
    }
}

/// Precision of the values stored in a checkpoint file.
pub fn stored_precision(path: &Path) -> Result<Precision> {
    Ok(CheckpointFile::load(path)?.precision)
}
