//! File formats: VOXF volumes, pose and proposal JSON.
//!
//! A VOXF file is the ASCII magic `VOXF`, then little-endian `u32` version
//! (1), `C′`, `D`, `H`, `W`, then `C′·D·H·W` little-endian `f32` values in
//! `(c, d, h, w)` order. Objectness maps and 2D masks use `C′ = 1` (masks
//! also `D = 1`).

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::detect::{Descriptor, Proposal, ProposalSet};
use crate::error::{Error, Result};
use crate::so3::RotationMatrix;

pub const VOXF_MAGIC: &[u8; 4] = b"VOXF";
pub const VOXF_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// Serializes a volume; values are narrowed to `f32`.
pub fn encode_voxf(volume: &Array4<f64>) -> Vec<u8> {
    let (c, d, h, w) = volume.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * volume.len());
    out.extend_from_slice(VOXF_MAGIC);
    for v in [VOXF_VERSION, c as u32, d as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in volume.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_voxf(bytes: &[u8], path: &Path) -> Result<Array4<f64>> {
    let truncated = |reason: String| Error::TruncatedFile {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 4 || &bytes[..4] != VOXF_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(format!(
            "header needs {HEADER_LEN} bytes, found {}",
            bytes.len()
        )));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes"));
    let version = word(0);
    if version != VOXF_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let dims = [word(1), word(2), word(3), word(4)].map(|v| v as usize);
    let count = dims.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
    let expected = count
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| truncated("dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(truncated(format!(
            "payload needs {expected} bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(truncated(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), values).expect("length checked"))
}

pub fn write_voxf(path: impl AsRef<Path>, volume: &Array4<f64>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_voxf(volume)).map_err(|e| Error::io(path, e))
}

pub fn read_voxf(path: impl AsRef<Path>) -> Result<Array4<f64>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_voxf(&bytes, path)
}

/// Reads a single-channel, single-slice VOXF as an `H×W` mask.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let v = read_voxf(path)?;
    let (c, d, h, w) = v.dim();
    if c != 1 || d != 1 {
        return Err(Error::ShapeMismatch(format!(
            "{}: mask must have one channel and one slice, found {c}×{d}",
            path.display()
        )));
    }
    Ok(v.into_shape_with_order((h, w)).expect("one channel, one slice"))
}

/// Rotation, translation and intrinsics, all row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    #[serde(rename = "R")]
    pub r: [f64; 9],
    #[serde(rename = "T")]
    pub t: [f64; 3],
    #[serde(rename = "K")]
    pub k: [f64; 9],
}

impl PoseFile {
    pub fn new(r: &RotationMatrix, t: &Vector3<f64>, k: &Matrix3<f64>) -> Self {
        PoseFile {
            r: r.to_row_major(),
            t: [t.x, t.y, t.z],
            k: row_major(k),
        }
    }

    pub fn rotation(&self) -> Result<RotationMatrix> {
        RotationMatrix::from_row_major(&self.r)
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from_row_slice(&self.t)
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.k)
    }
}

pub fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = m[(r, c)];
        }
    }
    out
}

/// Intrinsics file: `{"K": [9 row-major]}`; other keys are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsFile {
    #[serde(rename = "K")]
    pub k: [f64; 9],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalFile {
    pub query: String,
    #[serde(rename = "C_d")]
    pub c_d: usize,
    pub reference_descriptor: Vec<f64>,
    pub proposals: Vec<Proposal>,
}

impl ProposalFile {
    pub fn into_parts(self) -> Result<(Descriptor, ProposalSet)> {
        if self.reference_descriptor.len() != self.c_d {
            return Err(Error::DimensionMismatch {
                expected: self.c_d,
                actual: self.reference_descriptor.len(),
            });
        }
        Ok((
            Descriptor::new(self.reference_descriptor)?,
            ProposalSet::new(self.c_d, self.proposals)?,
        ))
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
