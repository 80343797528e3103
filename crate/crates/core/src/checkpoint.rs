//! Versioned binary weight container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "RCYOLOW\0" | u32 version | u32 len, JSON config
//! u32 entry count | per entry: u32 len, UTF-8 name, 4 x u64 dims, f64 data
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::detector::{Detector, DetectorConfig, DetectorError};
use crate::params::Parameters;
use crate::tensor::Dims;

pub const MAGIC: &[u8; 8] = b"RCYOLOW\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a weight file (bad magic)")]
    Magic,
    #[error("unsupported weight file version {0}")]
    Version(u32),
    #[error("config: {0}")]
    Config(#[from] serde_json::Error),
    #[error("entry name is not UTF-8")]
    Name,
    #[error("parameter {0} missing from weight file")]
    Missing(String),
    #[error("weight file has parameter {0} the model lacks")]
    Unexpected(String),
    #[error("parameter {name}: model expects {expected:?}, file has {found:?}")]
    Geometry {
        name: String,
        expected: Dims,
        found: Dims,
    },
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub dims: Dims,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    /// JSON text describing the model that produced the weights.
    pub config: String,
    pub entries: Vec<WeightEntry>,
}

impl WeightFile {
    pub fn capture(config: String, model: &impl Parameters) -> Self {
        let mut entries = Vec::new();
        model.visit_params("", &mut |name, dims, data| {
            entries.push(WeightEntry {
                name: name.to_string(),
                dims,
                data: data.to_vec(),
            })
        });
        Self { config, entries }
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_bytes(w, self.config.as_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            write_bytes(w, e.name.as_bytes())?;
            for d in [e.dims.n, e.dims.c, e.dims.h, e.dims.w] {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in &e.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let config = String::from_utf8(read_bytes(r)?).map_err(|_| CheckpointError::Name)?;
        let count = read_u32(r)?;
        let mut entries = Vec::with_capacity(count.min(4096) as usize);
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(r)?).map_err(|_| CheckpointError::Name)?;
            let mut d = [0usize; 4];
            for slot in &mut d {
                *slot = read_u64(r)? as usize;
            }
            let dims = Dims::new(d[0], d[1], d[2], d[3]);
            let mut data = Vec::with_capacity(dims.len().min(1 << 24));
            for _ in 0..dims.len() {
                data.push(f64::from_le_bytes(read_array(r)?));
            }
            entries.push(WeightEntry { name, dims, data });
        }
        Ok(Self { config, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Copies every entry into `model`. With `exact`, the two name sets must
    /// coincide; otherwise parameters absent on either side are skipped.
    /// Shared names must always agree on dims.
    pub fn apply_to(&self, model: &mut impl Parameters, exact: bool) -> Result<usize> {
        let mut error = None;
        let mut copied = 0;
        let mut seen = vec![false; self.entries.len()];
        model.visit_params_mut("", &mut |name, dims, data| {
            if error.is_some() {
                return;
            }
            match self.entries.iter().position(|e| e.name == name) {
                Some(i) if self.entries[i].dims != dims => {
                    error = Some(CheckpointError::Geometry {
                        name: name.to_string(),
                        expected: dims,
                        found: self.entries[i].dims,
                    })
                }
                Some(i) => {
                    data.copy_from_slice(&self.entries[i].data);
                    seen[i] = true;
                    copied += 1;
                }
                None if exact => error = Some(CheckpointError::Missing(name.to_string())),
                None => {}
            }
        });
        if let Some(e) = error {
            return Err(e);
        }
        if exact {
            if let Some(i) = seen.iter().position(|s| !s) {
                return Err(CheckpointError::Unexpected(self.entries[i].name.clone()));
            }
        }
        Ok(copied)
    }
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> io::Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)
}

fn read_array<const N: usize>(r: &mut impl Read) -> io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    read_array(r).map(u32::from_le_bytes)
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    read_array(r).map(u64::from_le_bytes)
}

fn read_bytes(r: &mut impl Read) -> io::Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    let mut b = Vec::with_capacity(n.min(1 << 20));
    r.take(n as u64).read_to_end(&mut b)?;
    if b.len() != n {
        return Err(io::ErrorKind::UnexpectedEof.into());
    }
    Ok(b)
}

pub fn save_detector(model: &Detector, path: &Path) -> Result<()> {
    let config = serde_json::to_string(model.config())?;
    WeightFile::capture(config, model).save(path)
}

/// Rebuilds a detector from the configuration stored alongside its weights.
pub fn load_detector(path: &Path) -> Result<Detector> {
    let file = WeightFile::load(path)?;
    let config: DetectorConfig = serde_json::from_str(&file.config)?;
    let mut model = Detector::zeros(config)?;
    file.apply_to(&mut model, true)?;
    Ok(model)
}
