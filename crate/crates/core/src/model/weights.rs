//! Binary tensor container used for weights, checkpoints and heatmap dumps.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LAPX" | u32 version = 1 | u32 count
//! per tensor: u16 name_len | name (UTF-8) | u8 dtype = 0 (f32) | u8 rank | u32 dims[rank] | f32 data
//! ```

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::Model;

pub const MAGIC: &[u8; 4] = b"LAPX";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const MAX_RANK: usize = 8;

/// Name prefixes of tensors that may share a file with model weights.
const SIDECAR_PREFIXES: [&str; 2] = ["adam.", "heatmap/"];

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed tensor file at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("unexpected tensor `{0}`")]
    UnexpectedTensor(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: Vec<NamedTensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], WeightsError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(WeightsError::Format {
                offset: self.pos,
                detail: format!("truncated {what}"),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, WeightsError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, WeightsError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn fail(&self, detail: impl Into<String>) -> WeightsError {
        WeightsError::Format {
            offset: self.pos,
            detail: detail.into(),
        }
    }
}

impl TensorFile {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Parses and fully validates a container.
    pub fn parse(bytes: &[u8]) -> Result<Self, WeightsError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(WeightsError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(WeightsError::UnsupportedVersion(version));
        }
        let count = r.u32("tensor count")? as usize;
        // Each record needs at least 4 bytes, which bounds allocation on hostile input.
        let mut tensors = Vec::with_capacity(count.min(bytes.len() / 4));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| r.fail("name is not UTF-8"))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(r.fail(format!("duplicate tensor `{name}`")));
            }
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(r.fail(format!("unsupported dtype tag {dtype}")));
            }
            let rank = r.u8("rank")? as usize;
            if rank > MAX_RANK {
                return Err(r.fail(format!("rank {rank} exceeds {MAX_RANK}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dims")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4).map(|_| n))
                .ok_or_else(|| r.fail(format!("`{name}` dims {shape:?} overflow")))?;
            let raw = r.take(numel * 4, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { tensors })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self, WeightsError> {
        Self::parse(&std::fs::read(path)?)
    }

    /// Writes through a temporary file in the target directory, then renames.
    pub fn write(&self, path: &Path) -> Result<(), WeightsError> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }
}

/// Replaces `path` with `bytes` so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut builder = tempfile::Builder::new();
    // Temp files default to 0600; the result should read like any other output file.
    #[cfg(unix)]
    builder.permissions(std::os::unix::fs::PermissionsExt::from_mode(0o644));
    let mut tmp = builder.tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

impl Model {
    /// Every parameter and buffer, in registration order.
    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile::default();
        for (_, p) in self.params.iter() {
            f.push(p.name.clone(), p.shape.clone(), p.tensor.data().to_vec());
        }
        f
    }

    /// Copies weights from `file`. Nothing is modified unless every tensor
    /// matches by name and shape.
    pub fn load_tensor_file(&mut self, file: &TensorFile) -> Result<(), WeightsError> {
        let by_name: HashMap<&str, &NamedTensor> = file.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for (_, p) in self.params.iter() {
            let t = by_name
                .get(p.name.as_str())
                .ok_or_else(|| WeightsError::MissingTensor(p.name.clone()))?;
            if t.shape != p.shape {
                return Err(WeightsError::ShapeMismatch {
                    name: p.name.clone(),
                    expected: p.shape.clone(),
                    actual: t.shape.clone(),
                });
            }
        }
        for t in &file.tensors {
            let sidecar = SIDECAR_PREFIXES.iter().any(|p| t.name.starts_with(p));
            if !sidecar && self.params.find(&t.name).is_none() {
                return Err(WeightsError::UnexpectedTensor(t.name.clone()));
            }
        }
        for (_, p) in self.params.iter_mut() {
            let t = by_name[p.name.as_str()];
            p.tensor.data_mut().copy_from_slice(&t.data);
        }
        Ok(())
    }

    pub fn save_weights(&self, path: &Path) -> Result<(), WeightsError> {
        self.to_tensor_file().write(path)
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<(), WeightsError> {
        let file = TensorFile::read(path)?;
        self.load_tensor_file(&file)
    }
}
