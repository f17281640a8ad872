//! Checkpoint files.
//!
//! Layout: ASCII `TOYM`, little-endian `u32` version (1), `u32` byte length
//! of a key=value config block, the block itself, `u32` tensor count, then
//! per tensor `u32` rows, `u32` cols and `rows·cols` little-endian `f32`.

use std::path::Path;

use ndarray::Array2;

use voxmatch_core::config::{Config, ToyConfig};

use crate::error::{Result, ToyError};
use crate::model::ToyModel;

pub const TOYM_MAGIC: &[u8; 4] = b"TOYM";
pub const TOYM_VERSION: u32 = 1;

pub fn encode(model: &ToyModel) -> Vec<u8> {
    let block = Config {
        toy: model.config().clone(),
        ..Config::default()
    }
    .to_text();
    let mut out = Vec::new();
    out.extend_from_slice(TOYM_MAGIC);
    out.extend_from_slice(&TOYM_VERSION.to_le_bytes());
    out.extend_from_slice(&(block.len() as u32).to_le_bytes());
    out.extend_from_slice(block.as_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&(p.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.ncols() as u32).to_le_bytes());
        for v in p.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(ToyError::Malformed {
                path: self.path.to_path_buf(),
                reason: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ToyModel> {
    let malformed = |reason: String| ToyError::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 4 || &bytes[..4] != TOYM_MAGIC {
        return Err(ToyError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let mut r = Reader { bytes, pos: 4, path };
    let version = r.u32()?;
    if version != TOYM_VERSION {
        return Err(ToyError::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let len = r.u32()? as usize;
    let block = std::str::from_utf8(r.take(len)?).map_err(|e| malformed(e.to_string()))?;
    let cfg: ToyConfig = Config::parse_str(block)?.toy;
    let mut model = ToyModel::new(&cfg, cfg.seed)?;
    let count = r.u32()? as usize;
    if count != model.params().len() {
        return Err(malformed(format!(
            "{count} tensors, model has {}",
            model.params().len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for expected in model.params() {
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        if (rows, cols) != expected.dim() {
            return Err(malformed(format!(
                "tensor {rows}×{cols}, expected {:?}",
                expected.dim()
            )));
        }
        let raw = r.take(rows * cols * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        params.push(Array2::from_shape_vec((rows, cols), values).expect("length checked"));
    }
    if r.pos != bytes.len() {
        return Err(malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    model.set_params(params)?;
    Ok(model)
}

pub fn save(path: impl AsRef<Path>, model: &ToyModel) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)).map_err(|source| ToyError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<ToyModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ToyError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes, path)
}
