//! Lifting 2D feature maps into voxel volumes, plus the fixed coordinate grid
//! and depth-replicated masks.
//!
//! Voxels are linearly indexed as `n = d·H·W + h·W + w` (width fastest).

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, Axis};

use crate::error::{Error, Result};

/// A `C×H×W` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap2D {
    data: Array3<f64>,
}

impl FeatureMap2D {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput("feature map has non-finite entries".into()));
        }
        Ok(FeatureMap2D { data })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }
}

/// Per-voxel feature vectors, shape `C′×D×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    data: Array4<f64>,
}

impl FeatureVolume {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (c, d, h, w) = data.dim();
        if c == 0 || d == 0 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "volume extents must be ≥ 1, got {c}×{d}×{h}×{w}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput("volume has non-finite entries".into()));
        }
        Ok(FeatureVolume { data })
    }

    /// Builds a volume from a voxel-major `N×C′` matrix.
    pub fn from_voxel_matrix(m: &Array2<f64>, d: usize, h: usize, w: usize) -> Result<Self> {
        let (n, c) = m.dim();
        if n != d * h * w {
            return Err(Error::ShapeMismatch(format!("{n} voxel rows for a {d}×{h}×{w} grid")));
        }
        let data = m
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, d, h, w))
            .expect("row count checked above");
        Self::new(data)
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    /// `(C′, D, H, W)`.
    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn n_voxels(&self) -> usize {
        let (_, d, h, w) = self.data.dim();
        d * h * w
    }

    /// Voxel-major view: row `n` is the feature vector of voxel `n`.
    pub fn voxel_matrix(&self) -> Array2<f64> {
        let c = self.channels();
        let n = self.n_voxels();
        self.data
            .view()
            .into_shape_with_order((c, n))
            .expect("contiguous standard layout")
            .t()
            .to_owned()
    }
}

/// Per-voxel objectness in `[0, 1]`, shape `1×D×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectnessMap {
    data: Array4<f64>,
}

impl ObjectnessMap {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        check_unit_interval(data.iter(), "objectness")?;
        if data.dim().0 != 1 {
            return Err(Error::ShapeMismatch("objectness must have one channel".into()));
        }
        Ok(ObjectnessMap { data })
    }

    pub fn from_flat(values: Array1<f64>, d: usize, h: usize, w: usize) -> Result<Self> {
        if values.len() != d * h * w {
            return Err(Error::ShapeMismatch(format!(
                "{} objectness values for a {d}×{h}×{w} grid",
                values.len()
            )));
        }
        Self::new(values.into_shape_with_order((1, d, h, w)).expect("length checked"))
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn flatten(&self) -> Array1<f64> {
        self.data.iter().copied().collect()
    }
}

/// Depth-replicated 2D mask, shape `1×D×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoMask3D {
    data: Array4<f64>,
}

impl PseudoMask3D {
    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn flatten(&self) -> Array1<f64> {
        self.data.iter().copied().collect()
    }
}

/// Voxel centre coordinates, `N×3`, each axis normalized to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelCoords {
    coords: Array2<f64>,
    dims: (usize, usize, usize),
}

impl VoxelCoords {
    pub fn coords(&self) -> &Array2<f64> {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.nrows() == 0
    }

    /// `(D, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn point(&self, i: usize) -> nalgebra::Vector3<f64> {
        let r = self.coords.row(i);
        nalgebra::Vector3::new(r[0], r[1], r[2])
    }
}

/// Splits the channel axis into `c_prime + 1` groups of `d` channels.
///
/// Groups `0..c_prime` become the feature volume; the last group, passed
/// through the logistic function, becomes the objectness map.
pub fn voxelize(f: &FeatureMap2D, c_prime: usize, d: usize) -> Result<(FeatureVolume, ObjectnessMap)> {
    let (c, h, w) = f.data.dim();
    if c_prime == 0 || d == 0 || c != (c_prime + 1) * d {
        return Err(Error::ShapeMismatch(format!(
            "{c} channels cannot be split as ({c_prime}+1)×{d}"
        )));
    }
    let lifted = f
        .data
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c_prime + 1, d, h, w))
        .expect("channel count checked above");
    let volume = lifted.slice(ndarray::s![..c_prime, .., .., ..]).to_owned();
    let objectness = lifted.slice(ndarray::s![c_prime.., .., .., ..]).mapv(logistic);
    Ok((FeatureVolume::new(volume)?, ObjectnessMap::new(objectness)?))
}

/// Inverse of the feature half of [`voxelize`]: `C′×D×H×W → (C′·D)×H×W`.
pub fn aggregate_depth(v: &FeatureVolume) -> Array3<f64> {
    let (c, d, h, w) = v.dim();
    v.data
        .clone()
        .into_shape_with_order((c * d, h, w))
        .expect("standard layout")
}

pub fn make_coords(d: usize, h: usize, w: usize) -> VoxelCoords {
    let axis = |i: usize, extent: usize| {
        if extent <= 1 {
            0.0
        } else {
            2.0 * i as f64 / (extent - 1) as f64 - 1.0
        }
    };
    let n = d * h * w;
    let mut coords = Array2::zeros((n, 3));
    for di in 0..d {
        for hi in 0..h {
            for wi in 0..w {
                let i = di * h * w + hi * w + wi;
                coords[[i, 0]] = axis(wi, w);
                coords[[i, 1]] = axis(hi, h);
                coords[[i, 2]] = axis(di, d);
            }
        }
    }
    VoxelCoords {
        coords,
        dims: (d, h, w),
    }
}

/// Replicates an `H×W` mask `d` times along depth.
pub fn replicate_mask(m: &Array2<f64>, d: usize) -> Result<PseudoMask3D> {
    check_unit_interval(m.iter(), "mask")?;
    let (h, w) = m.dim();
    let data = m
        .view()
        .insert_axis(Axis(0))
        .broadcast((d, h, w))
        .expect("broadcast along a new axis")
        .to_owned()
        .insert_axis(Axis(0));
    Ok(PseudoMask3D { data })
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_unit_interval<'a>(values: impl Iterator<Item = &'a f64>, what: &str) -> Result<()> {
    for v in values {
        if !(0.0..=1.0).contains(v) {
            return Err(Error::DegenerateInput(format!("{what} entry {v} outside [0, 1]")));
        }
    }
    Ok(())
}

/// Sums a length-`D·H·W` per-voxel vector over depth, giving `H·W` values.
pub fn sum_over_depth(values: ArrayView1<f64>, d: usize, hw: usize) -> Array1<f64> {
    let mut out = Array1::zeros(hw);
    for di in 0..d {
        for t in 0..hw {
            out[t] += values[di * hw + t];
        }
    }
    out
}
