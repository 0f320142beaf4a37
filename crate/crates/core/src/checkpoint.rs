//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "ADSR" | version u16 = 1 | config fingerprint u64 | parameter count u32
//! per parameter: name length u16 | UTF-8 name | 4 x u32 dims | f32 values
//! ```
//!
//! Training checkpoints append an optimizer section with the same conventions:
//!
//! ```text
//! "ADAM" | step u64 | entry count u32
//! per entry: name length u16 | name | 4 x u32 dims | f32 first moments | f32 second moments
//! ```

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParameterSet};
use crate::tensor::{Shape, Tensor};
use crate::train::OptimizerState;

pub const MAGIC: &[u8; 4] = b"ADSR";
pub const OPTIMIZER_MAGIC: &[u8; 4] = b"ADAM";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: u64,
    pub params: ParameterSet<f32>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>) -> Self {
        Self { fingerprint: model.config.fingerprint(), params: model.params.clone(), optimizer: None }
    }

    pub fn with_optimizer(mut self, state: OptimizerState) -> Self {
        self.optimizer = Some(state);
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.params.numel() * 4 + 1024);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            write_header(&mut out, name, t.shape());
            write_values(&mut out, t.data());
        }
        if let Some(opt) = &self.optimizer {
            out.extend_from_slice(OPTIMIZER_MAGIC);
            out.extend_from_slice(&opt.step.to_le_bytes());
            out.extend_from_slice(&(opt.moments.len() as u32).to_le_bytes());
            for m in &opt.moments {
                write_header(&mut out, &m.name, m.shape);
                write_values(&mut out, &m.first);
                write_values(&mut out, &m.second);
            }
        }
        out
    }

    /// Parses a checkpoint without checking the fingerprint.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u16(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let fingerprint = read_u64(&mut r)?;
        let count = read_u32(&mut r)?;
        let mut params = ParameterSet::new();
        for _ in 0..count {
            let (name, shape) = read_header(&mut r)?;
            let data = read_values(&mut r, shape.numel())?;
            params.insert(name, Tensor::from_vec(shape, data)?)?;
        }
        let mut optimizer = None;
        if (r.position() as usize) < bytes.len() {
            read_exact(&mut r, &mut magic)?;
            if &magic != OPTIMIZER_MAGIC {
                return Err(Error::Checkpoint(format!("unknown trailing section {magic:?}")));
            }
            let step = read_u64(&mut r)?;
            let n = read_u32(&mut r)?;
            let mut moments = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let (name, shape) = read_header(&mut r)?;
                let first = read_values(&mut r, shape.numel())?;
                let second = read_values(&mut r, shape.numel())?;
                moments.push(crate::train::Moments { name, shape, first, second });
            }
            optimizer = Some(OptimizerState { step, moments });
            if (r.position() as usize) != bytes.len() {
                return Err(Error::Checkpoint("trailing bytes after optimizer section".into()));
            }
        }
        Ok(Self { fingerprint, params, optimizer })
    }

    /// Parses and validates against the expected configuration.
    pub fn from_bytes_for(bytes: &[u8], config: &ModelConfig) -> Result<Self> {
        let ck = Self::from_bytes(bytes)?;
        ck.expect_config(config)?;
        Ok(ck)
    }

    pub fn expect_config(&self, config: &ModelConfig) -> Result<()> {
        if self.fingerprint != config.fingerprint() {
            return Err(Error::Checkpoint(format!(
                "config fingerprint {:016x} does not match expected {:016x} ({})",
                self.fingerprint,
                config.fingerprint(),
                config.canonical_text().trim().replace('\n', ", ")
            )));
        }
        self.params.check_against(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Rebuilds the model, recovering the configuration from the fingerprint
    /// when `config` is `None`.
    pub fn into_model(self, config: Option<&ModelConfig>) -> Result<Model<f32>> {
        let config = match config {
            Some(c) => *c,
            None => ModelConfig::identify(self.fingerprint, 16).ok_or_else(|| {
                Error::Checkpoint(format!("fingerprint {:016x} matches no known configuration", self.fingerprint))
            })?,
        };
        self.expect_config(&config)?;
        Model::from_params(config, self.params)
    }
}

fn write_header(out: &mut Vec<u8>, name: &str, shape: Shape) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    for d in shape.0 {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

fn write_values(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Checkpoint("unexpected end of data".into()))
}

fn read_u16(r: &mut Cursor<&[u8]>) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut Cursor<&[u8]>) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_header(r: &mut Cursor<&[u8]>) -> Result<(String, Shape)> {
    let len = read_u16(r)? as usize;
    let mut name = vec![0u8; len];
    read_exact(r, &mut name)?;
    let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = read_u32(r)? as usize;
    }
    Ok((name, Shape(dims)))
}

fn read_values(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<f32>> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if n * 4 > remaining {
        return Err(Error::Checkpoint("unexpected end of data".into()));
    }
    let mut buf = vec![0u8; n * 4];
    read_exact(r, &mut buf)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}
