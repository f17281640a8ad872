//! Hypothesis-grid baseline: score a fixed set of sampled rotations on the
//! matched voxels and keep the best one. Also the multiply-accumulate model
//! used to compare its cost with the single-pass solver.

use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::par;
use crate::so3::{sample_uniform_rotation, RotationMatrix};

/// MACs per voxel and hypothesis: 9 for the 3×3 apply, 3 for the norm.
pub const MACS_PER_VOXEL_HYPOTHESIS: u64 = 12;
/// MACs per voxel for one covariance build.
pub const MACS_PER_VOXEL_COVARIANCE: u64 = 9;
/// Fixed budget charged for one 3×3 SVD.
pub const SVD_MAC_BUDGET: u64 = 500;

#[derive(Debug, Clone)]
pub struct HypothesisGrid {
    rotations: Vec<RotationMatrix>,
    seed: u64,
}

impl HypothesisGrid {
    pub fn from_rotations(rotations: Vec<RotationMatrix>) -> Result<Self> {
        if rotations.is_empty() {
            return Err(Error::ConfigInvalid("hypothesis grid must be non-empty".into()));
        }
        Ok(HypothesisGrid { rotations, seed: 0 })
    }

    pub fn rotations(&self) -> &[RotationMatrix] {
        &self.rotations
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// `n` Haar-uniform rotations, deterministic per seed.
pub fn build_grid(n: usize, seed: u64) -> Result<HypothesisGrid> {
    if n == 0 {
        return Err(Error::ConfigInvalid("hypothesis grid size must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rotations = (0..n).map(|_| sample_uniform_rotation(&mut rng)).collect();
    Ok(HypothesisGrid { rotations, seed })
}

#[derive(Debug, Clone)]
pub struct HypothesisResult {
    pub best_index: usize,
    pub best: RotationMatrix,
    pub best_score: f64,
    pub scores: Vec<f64>,
}

/// Scores `f(R) = −Σ ω ‖R x_r − x_q‖` for every grid member.
///
/// Ties resolve to the lowest index, independent of how the work is split.
pub fn score_hypotheses(
    grid: &HypothesisGrid,
    xr: ArrayView2<f64>,
    xq_aligned: ArrayView2<f64>,
    w: &[f64],
) -> Result<HypothesisResult> {
    if xr.nrows() != xq_aligned.nrows() || xr.nrows() != w.len() || xr.ncols() != 3 || xq_aligned.ncols() != 3 {
        return Err(Error::ShapeMismatch("hypothesis scoring inputs disagree".into()));
    }
    let pairs: Vec<([f64; 3], [f64; 3], f64)> = (0..w.len())
        .map(|i| {
            (
                [xr[[i, 0]], xr[[i, 1]], xr[[i, 2]]],
                [xq_aligned[[i, 0]], xq_aligned[[i, 1]], xq_aligned[[i, 2]]],
                w[i],
            )
        })
        .collect();
    let scores = par::map_slice(grid.rotations(), |r| score_one(r, &pairs));
    let mut best_index = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best_index] {
            best_index = i;
        }
    }
    Ok(HypothesisResult {
        best_index,
        best: grid.rotations[best_index],
        best_score: scores[best_index],
        scores,
    })
}

fn score_one(r: &RotationMatrix, pairs: &[([f64; 3], [f64; 3], f64)]) -> f64 {
    let m = r.matrix();
    let (m00, m01, m02) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
    let (m10, m11, m12) = (m[(1, 0)], m[(1, 1)], m[(1, 2)]);
    let (m20, m21, m22) = (m[(2, 0)], m[(2, 1)], m[(2, 2)]);
    let mut total = 0.0;
    for (x, y, w) in pairs {
        let dx = m00 * x[0] + m01 * x[1] + m02 * x[2] - y[0];
        let dy = m10 * x[0] + m11 * x[1] + m12 * x[2] - y[1];
        let dz = m20 * x[0] + m21 * x[1] + m22 * x[2] - y[2];
        total += w * (dx * dx + dy * dy + dz * dz).sqrt();
    }
    -total
}

/// `(1/N) Σ ω ‖R x_r − x_q‖²` for every grid member, through the expansion
/// `(Σ ω (‖x_r‖² + ‖x_q‖²) − 2 tr(R H)) / N` with `H = Σ ω x_r x_qᵀ`.
pub fn grid_energies(grid: &HypothesisGrid, xr: ArrayView2<f64>, xq: ArrayView2<f64>, w: &[f64]) -> Result<Vec<f64>> {
    if xr.nrows() != xq.nrows() || xr.nrows() != w.len() || xr.ncols() != 3 || xq.ncols() != 3 || w.is_empty() {
        return Err(Error::ShapeMismatch("energy inputs disagree".into()));
    }
    let mut h = [[0.0; 3]; 3];
    let mut sq = 0.0;
    for (i, &wi) in w.iter().enumerate() {
        for a in 0..3 {
            sq += wi * (xr[[i, a]] * xr[[i, a]] + xq[[i, a]] * xq[[i, a]]);
            for b in 0..3 {
                h[a][b] += wi * xr[[i, a]] * xq[[i, b]];
            }
        }
    }
    let n = w.len() as f64;
    Ok(par::map_slice(grid.rotations(), |r| {
        let m = r.matrix();
        let mut trace = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                trace += m[(b, a)] * h[a][b];
            }
        }
        (sq - 2.0 * trace) / n
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub grid_size: u64,
    pub per_hypothesis_macs: u64,
    pub mac_count: u64,
    /// One covariance build plus the fixed SVD budget.
    pub wcv_macs: u64,
}

pub fn cost_model(n: u64, voxels: u64) -> Result<CostReport> {
    if n == 0 || voxels == 0 {
        return Err(Error::ConfigInvalid("cost model needs positive arguments".into()));
    }
    let per_hypothesis_macs = MACS_PER_VOXEL_HYPOTHESIS * voxels;
    Ok(CostReport {
        grid_size: n,
        per_hypothesis_macs,
        mac_count: n * per_hypothesis_macs,
        wcv_macs: wcv_macs(voxels),
    })
}

pub fn wcv_macs(voxels: u64) -> u64 {
    MACS_PER_VOXEL_COVARIANCE * voxels + SVD_MAC_BUDGET
}
