//! Weighted closest voxel (WCV) rotation solver.
//!
//! Given reference coordinates `x_r`, soft-aligned query coordinates `x_q`
//! and per-pair weights `ω`, the solver builds `H = Σ ω x_r x_qᵀ`, takes its
//! SVD `H = UΣVᵀ` and returns `R = V diag(1, 1, det(VUᵀ)) Uᵀ`, the rotation
//! minimizing `Σ ω ‖R x_r − x_q‖²` with `x_q ≈ R x_r`.

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::matching::SoftAssignment;
use crate::so3::{rot_to_6d, RotationMatrix};
use crate::svd3::{svd3, Svd3};
use crate::voxelgrid::{logistic, ObjectnessMap, PseudoMask3D};

/// Relative singular value floor below which `H` counts as rank deficient.
pub const RANK_TOL: f64 = 1e-10;
/// Relative singular value gap below which the SVD gradient is refused.
pub const GAP_TOL: f64 = 1e-8;

/// Per-pair confidence weights, each in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentWeights(Array1<f64>);

impl AlignmentWeights {
    pub fn new(w: Array1<f64>) -> Result<Self> {
        if let Some(v) = w.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::DegenerateInput(format!("weight {v} outside (0, 1)")));
        }
        Ok(AlignmentWeights(w))
    }

    /// Constant weights; the rotation is invariant to their common value.
    pub fn uniform(n: usize) -> Self {
        AlignmentWeights(Array1::from_elem(n, 0.5))
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("owned 1D array")
    }
}

/// Which cues enter the pair weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightMode {
    /// Constant weights (closest voxel without weighting).
    Uniform,
    /// `W_m` from the depth-replicated masks.
    MaskOnly,
    /// `W_o` from the objectness maps.
    ObjectnessOnly,
    /// `W_m ⊙ W_o`.
    Full,
}

/// The two logistic weight factors before combination.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightParts {
    pub mask: Array1<f64>,
    pub objectness: Array1<f64>,
}

impl WeightParts {
    pub fn combine(&self, mode: WeightMode) -> Array1<f64> {
        match mode {
            WeightMode::Uniform => Array1::from_elem(self.mask.len(), 0.5),
            WeightMode::MaskOnly => self.mask.clone(),
            WeightMode::ObjectnessOnly => self.objectness.clone(),
            WeightMode::Full => &self.mask * &self.objectness,
        }
    }
}

/// Flattened per-voxel cues feeding the weights.
#[derive(Debug, Clone, Copy)]
pub struct WeightCues<'a> {
    pub mask_q: ArrayView1<'a, f64>,
    pub mask_r: ArrayView1<'a, f64>,
    pub obj_q: ArrayView1<'a, f64>,
    pub obj_r: ArrayView1<'a, f64>,
}

/// `W_m = σ((P·M_q + M_r) / 2λ)` and the analogous `W_o`.
pub fn weight_parts(p: &SoftAssignment, cues: &WeightCues<'_>, lambda: f64) -> Result<WeightParts> {
    if !(lambda > 0.0) {
        return Err(Error::DegenerateInput(format!("lambda {lambda} must be positive")));
    }
    let (nr, nq) = p.0.dim();
    if cues.mask_q.len() != nq || cues.obj_q.len() != nq || cues.mask_r.len() != nr || cues.obj_r.len() != nr {
        return Err(Error::ShapeMismatch(format!(
            "cues do not match a {nr}×{nq} assignment"
        )));
    }
    let term = |q: ArrayView1<f64>, r: ArrayView1<f64>| -> Array1<f64> {
        let mut a = p.0.dot(&q);
        a.zip_mut_with(&r, |v, &rv| *v = logistic((*v + rv) / (2.0 * lambda)));
        a
    };
    Ok(WeightParts {
        mask: term(cues.mask_q, cues.mask_r),
        objectness: term(cues.obj_q, cues.obj_r),
    })
}

pub fn compute_weights(
    assign: &SoftAssignment,
    mq: &PseudoMask3D,
    mr: &PseudoMask3D,
    oq: &ObjectnessMap,
    or_: &ObjectnessMap,
    lambda: f64,
) -> Result<AlignmentWeights> {
    let (mqf, mrf, oqf, orf) = (mq.flatten(), mr.flatten(), oq.flatten(), or_.flatten());
    let cues = WeightCues {
        mask_q: mqf.view(),
        mask_r: mrf.view(),
        obj_q: oqf.view(),
        obj_r: orf.view(),
    };
    let parts = weight_parts(assign, &cues, lambda)?;
    Ok(AlignmentWeights(parts.combine(WeightMode::Full)))
}

/// Gradients of the combined weights w.r.t. the assignment and the cues.
#[derive(Debug, Clone)]
pub struct WeightGrads {
    pub assign: Array2<f64>,
    pub mask_q: Array1<f64>,
    pub mask_r: Array1<f64>,
    pub obj_q: Array1<f64>,
    pub obj_r: Array1<f64>,
}

pub fn weights_backward(
    p: &SoftAssignment,
    cues: &WeightCues<'_>,
    lambda: f64,
    parts: &WeightParts,
    mode: WeightMode,
    d_w: ArrayView1<f64>,
) -> WeightGrads {
    let (nr, nq) = p.0.dim();
    let zeros_r = Array1::<f64>::zeros(nr);
    let (d_wm, d_wo) = match mode {
        WeightMode::Uniform => (zeros_r.clone(), zeros_r),
        WeightMode::MaskOnly => (d_w.to_owned(), zeros_r),
        WeightMode::ObjectnessOnly => (zeros_r, d_w.to_owned()),
        WeightMode::Full => (&d_w * &parts.objectness, &d_w * &parts.mask),
    };
    // Gradient w.r.t. the logistic pre-activation, divided by 2λ.
    let pre = |d: &Array1<f64>, w: &Array1<f64>| -> Array1<f64> {
        d.iter()
            .zip(w.iter())
            .map(|(g, v)| g * v * (1.0 - v) / (2.0 * lambda))
            .collect()
    };
    let da_m = pre(&d_wm, &parts.mask);
    let da_o = pre(&d_wo, &parts.objectness);
    let mut assign = Array2::<f64>::zeros((nr, nq));
    for j in 0..nr {
        let (gm, go) = (da_m[j], da_o[j]);
        if gm == 0.0 && go == 0.0 {
            continue;
        }
        for i in 0..nq {
            assign[[j, i]] = gm * cues.mask_q[i] + go * cues.obj_q[i];
        }
    }
    WeightGrads {
        assign,
        mask_q: p.0.t().dot(&da_m),
        mask_r: da_m,
        obj_q: p.0.t().dot(&da_o),
        obj_r: da_o,
    }
}

/// Result of a WCV solve.
#[derive(Debug, Clone)]
pub struct WcvSolution {
    pub rotation: RotationMatrix,
    /// Mean unsquared residual `(1/N) Σ ‖R x_r − x_q‖`.
    pub residual: f64,
    pub covariance: Matrix3<f64>,
    pub svd: Svd3,
    /// `det(VUᵀ)` sign used in the correction, ±1.
    pub det_sign: f64,
    pub centroid_r: Vector3<f64>,
    pub centroid_q: Vector3<f64>,
}

fn row3(x: &ArrayView2<f64>, i: usize) -> Vector3<f64> {
    Vector3::new(x[[i, 0]], x[[i, 1]], x[[i, 2]])
}

fn check_inputs(xr: &ArrayView2<f64>, xq: &ArrayView2<f64>, w: &[f64]) -> Result<()> {
    if xr.ncols() != 3 || xq.ncols() != 3 {
        return Err(Error::ShapeMismatch("point sets must be N×3".into()));
    }
    if xr.nrows() != xq.nrows() || xr.nrows() != w.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} reference points, {} query points, {} weights",
            xr.nrows(),
            xq.nrows(),
            w.len()
        )));
    }
    if xr.nrows() < 3 {
        return Err(Error::DegenerateInput("need at least 3 point pairs".into()));
    }
    if w.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::DegenerateInput("weights must be positive and finite".into()));
    }
    if xr.iter().chain(xq.iter()).any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("non-finite coordinates".into()));
    }
    Ok(())
}

fn weighted_centroid(x: &ArrayView2<f64>, w: &[f64]) -> Vector3<f64> {
    let mut acc = Vector3::zeros();
    let mut total = 0.0;
    for (i, &wi) in w.iter().enumerate() {
        acc += row3(x, i) * wi;
        total += wi;
    }
    acc / total
}

/// Closed-form weighted rotation between `xr` and `xq_aligned` (`x_q ≈ R x_r`).
pub fn solve_rotation(
    xr: ArrayView2<f64>,
    xq_aligned: ArrayView2<f64>,
    w: &[f64],
    center: bool,
) -> Result<WcvSolution> {
    check_inputs(&xr, &xq_aligned, w)?;
    let (cr, cq) = if center {
        (weighted_centroid(&xr, w), weighted_centroid(&xq_aligned, w))
    } else {
        (Vector3::zeros(), Vector3::zeros())
    };
    let mut h = Matrix3::zeros();
    for (i, &wi) in w.iter().enumerate() {
        h += (row3(&xr, i) - cr) * (row3(&xq_aligned, i) - cq).transpose() * wi;
    }
    let svd = svd3(&h);
    let sigma = svd.sigma;
    if !(sigma[0] > 0.0) || (sigma[1] < RANK_TOL * sigma[0] && sigma[2] < RANK_TOL * sigma[0]) {
        return Err(Error::RankDeficient {
            sigma: svd.sigma_array(),
        });
    }
    let det_sign = if svd.v.determinant() * svd.u.determinant() < 0.0 {
        -1.0
    } else {
        1.0
    };
    let r = svd.v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det_sign)) * svd.u.transpose();
    let rotation = RotationMatrix::from_matrix_unchecked(r);
    let n = w.len();
    let residual = (0..n)
        .map(|i| (r * (row3(&xr, i) - cr) - (row3(&xq_aligned, i) - cq)).norm())
        .sum::<f64>()
        / n as f64;
    Ok(WcvSolution {
        rotation,
        residual,
        covariance: h,
        svd,
        det_sign,
        centroid_r: cr,
        centroid_q: cq,
    })
}

/// The objective minimized by [`solve_rotation`] (uncentered):
/// `(1/N) Σ ω ‖R x_r − x_q‖²`.
pub fn weighted_energy(r: &RotationMatrix, xr: ArrayView2<f64>, xq: ArrayView2<f64>, w: &[f64]) -> f64 {
    let m = r.matrix();
    let n = w.len();
    let mut total = 0.0;
    for (i, &wi) in w.iter().enumerate() {
        total += wi * (m * row3(&xr, i) - row3(&xq, i)).norm_squared();
    }
    total / n as f64
}

/// Gradients of a scalar loss w.r.t. the solver inputs.
#[derive(Debug, Clone)]
pub struct WcvGrads {
    pub xr: Array2<f64>,
    pub xq_aligned: Array2<f64>,
    pub w: Array1<f64>,
    pub covariance: Matrix3<f64>,
}

/// Pulls `∂L/∂R` back to `∂L/∂H`.
pub fn rotation_grad_to_covariance(sol: &WcvSolution, d_r: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let s = sol.svd.sigma;
    let sigma_max = s[0];
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        if (s[i] - s[j]).abs() <= GAP_TOL * sigma_max {
            return Err(Error::NearDegenerateSvd {
                sigma: sol.svd.sigma_array(),
            });
        }
    }
    let d = [1.0, 1.0, sol.det_sign];
    let signed = [s[0], s[1], s[2] * sol.det_sign];
    let g = sol.svd.v.transpose() * d_r * sol.svd.u;
    let floor = GAP_TOL * sigma_max;
    let mut k = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            if i == j {
                continue;
            }
            let mut denom = signed[i] + signed[j];
            if denom.abs() < floor {
                denom = floor.copysign(denom);
            }
            k[(i, j)] = (g[(j, i)] - d[i] * d[j] * g[(i, j)]) / denom;
        }
    }
    Ok(sol.svd.u * k * sol.svd.v.transpose())
}

/// Reverse-mode gradient of [`solve_rotation`] given `∂L/∂R`.
pub fn solve_rotation_backward(
    xr: ArrayView2<f64>,
    xq_aligned: ArrayView2<f64>,
    w: &[f64],
    sol: &WcvSolution,
    d_rotation: &Matrix3<f64>,
) -> Result<WcvGrads> {
    check_inputs(&xr, &xq_aligned, w)?;
    let gh = rotation_grad_to_covariance(sol, d_rotation)?;
    let n = w.len();
    let mut gxr = Array2::zeros((n, 3));
    let mut gxq = Array2::zeros((n, 3));
    let mut gw = Array1::zeros(n);
    let ght = gh.transpose();
    for i in 0..n {
        let a = row3(&xr, i) - sol.centroid_r;
        let b = row3(&xq_aligned, i) - sol.centroid_q;
        let dxr = gh * b * w[i];
        let dxq = ght * a * w[i];
        for k in 0..3 {
            gxr[[i, k]] = dxr[k];
            gxq[[i, k]] = dxq[k];
        }
        gw[i] = a.dot(&(gh * b));
    }
    Ok(WcvGrads {
        xr: gxr,
        xq_aligned: gxq,
        w: gw,
        covariance: gh,
    })
}

/// `‖q(R̂) − q(R_gt)‖` with `q` the 6D encoding.
pub fn pose_loss(r_hat: &RotationMatrix, r_gt: &RotationMatrix) -> f64 {
    let a = rot_to_6d(r_hat).0;
    let b = rot_to_6d(r_gt).0;
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `∂ pose_loss / ∂R̂` as a 3×3 matrix (zero third column; zero at the optimum).
pub fn pose_loss_grad(r_hat: &RotationMatrix, r_gt: &RotationMatrix) -> Matrix3<f64> {
    let loss = pose_loss(r_hat, r_gt);
    let mut g = Matrix3::zeros();
    if loss == 0.0 {
        return g;
    }
    for c in 0..2 {
        for r in 0..3 {
            g[(r, c)] = (r_hat.matrix()[(r, c)] - r_gt.matrix()[(r, c)]) / loss;
        }
    }
    g
}
