//! `FEAT1` feature files.
//!
//! Layout (little-endian): magic `FEAT1`, `u32` rows N, `u32` dim D,
//! `u8` backbone code, 32-byte preprocessing hash, N*D `f32` row-major,
//! then N row ids each as `u32` byte length + UTF-8.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::{BackboneError, BackboneKind};

const MAGIC: &[u8; 5] = b"FEAT1";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f32>,
    dim: usize,
    row_ids: Vec<String>,
    backbone: BackboneKind,
    preprocessing_hash: [u8; 32],
}

impl FeatureMatrix {
    pub fn new(
        data: Vec<f32>,
        dim: usize,
        row_ids: Vec<String>,
        backbone: BackboneKind,
        preprocessing_hash: [u8; 32],
    ) -> Result<Self, BackboneError> {
        if dim == 0 {
            return Err(BackboneError::Format("feature dimension must be positive".into()));
        }
        if data.len() != row_ids.len() * dim {
            return Err(BackboneError::Format(format!(
                "{} values for {} rows of dimension {dim}",
                data.len(),
                row_ids.len()
            )));
        }
        if let Some(expected) = backbone.feature_dim() {
            if expected != dim {
                return Err(BackboneError::ShapeMismatch {
                    backbone,
                    expected,
                    actual: vec![row_ids.len(), dim],
                });
            }
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(BackboneError::NonFinite(row_ids[i / dim].clone()));
        }
        Ok(Self {
            data,
            dim,
            row_ids,
            backbone,
            preprocessing_hash,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn backbone(&self) -> BackboneKind {
        self.backbone
    }

    pub fn preprocessing_hash(&self) -> &[u8; 32] {
        &self.preprocessing_hash
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.n_rows() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&[self.backbone.code()])?;
        w.write_all(&self.preprocessing_hash)?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        for id in &self.row_ids {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(42 + self.data.len() * 4);
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, BackboneError> {
        let fmt = |e: io::Error| BackboneError::Format(e.to_string());
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(BackboneError::Format("bad magic, expected FEAT1".into()));
        }
        let n = read_u32(r).map_err(fmt)? as usize;
        let dim = read_u32(r).map_err(fmt)? as usize;
        let mut code = [0u8; 1];
        r.read_exact(&mut code).map_err(fmt)?;
        let backbone = BackboneKind::from_code(code[0])
            .ok_or_else(|| BackboneError::Format(format!("unknown backbone code {}", code[0])))?;
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash).map_err(fmt)?;
        let len = n.checked_mul(dim).ok_or_else(|| BackboneError::Format("size overflow".into()))?;
        let mut raw = Vec::new();
        r.take(len as u64 * 4).read_to_end(&mut raw).map_err(fmt)?;
        if raw.len() != len * 4 {
            return Err(BackboneError::Format("truncated feature data".into()));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        let mut row_ids = Vec::with_capacity(n);
        for _ in 0..n {
            let l = read_u32(r).map_err(fmt)? as usize;
            let mut buf = Vec::new();
            r.take(l as u64).read_to_end(&mut buf).map_err(fmt)?;
            if buf.len() != l {
                return Err(BackboneError::Format("truncated row id".into()));
            }
            row_ids.push(
                String::from_utf8(buf).map_err(|_| BackboneError::Format("row id is not UTF-8".into()))?,
            );
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(fmt)? != 0 {
            return Err(BackboneError::Format("trailing bytes after row ids".into()));
        }
        Self::new(data, dim, row_ids, backbone, hash)
    }

    pub fn save(&self, path: &Path) -> Result<(), BackboneError> {
        let io_err = |source| BackboneError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        fs::write(path, self.to_bytes()).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, BackboneError> {
        let bytes = fs::read(path).map_err(|source| BackboneError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
