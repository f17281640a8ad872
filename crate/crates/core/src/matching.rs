//! Voxel similarity scores and temperature-softmax soft alignment.
//!
//! Score matrices are laid out `N_r×N_q`: row `j` is a reference voxel,
//! column `i` a query voxel. The softmax normalizes each row over the query
//! voxels, so `p(S/τ)·X_q` yields one aligned query coordinate per reference
//! voxel.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::par;
use crate::voxelgrid::FeatureVolume;

/// Minimum admissible voxel feature norm.
pub const MIN_FEATURE_NORM: f64 = 1e-12;

/// Pairwise cosine similarities, `N_r×N_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix(pub Array2<f64>);

/// Row-stochastic soft assignment, `N_r×N_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment(pub Array2<f64>);

impl SoftAssignment {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }
}

pub fn score_matrix(vq: &FeatureVolume, vr: &FeatureVolume) -> Result<ScoreMatrix> {
    if vq.channels() != vr.channels() || vq.n_voxels() != vr.n_voxels() {
        return Err(Error::ShapeMismatch(format!(
            "query volume {:?} vs reference volume {:?}",
            vq.dim(),
            vr.dim()
        )));
    }
    score_matrix_from_voxels(vq.voxel_matrix().view(), vr.voxel_matrix().view())
}

/// Cosine scores from voxel-major feature matrices (`N_q×C′`, `N_r×C′`).
pub fn score_matrix_from_voxels(q: ArrayView2<f64>, r: ArrayView2<f64>) -> Result<ScoreMatrix> {
    if q.ncols() != r.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "feature widths {} and {} differ",
            q.ncols(),
            r.ncols()
        )));
    }
    let qn = normalize_rows(q)?;
    let rn = normalize_rows(r)?;
    let nq = qn.nrows();
    let mut s = Array2::<f64>::zeros((rn.nrows(), nq));
    let slice = s.as_slice_mut().expect("fresh standard layout");
    par::for_each_row_mut(slice, nq, |j, row| {
        let rj = rn.row(j);
        for (i, out) in row.iter_mut().enumerate() {
            *out = rj.dot(&qn.row(i));
        }
    });
    Ok(ScoreMatrix(s))
}

/// Gradients of the cosine score matrix w.r.t. the raw voxel features.
pub fn score_matrix_backward(
    q: ArrayView2<f64>,
    r: ArrayView2<f64>,
    d_s: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let qn = normalize_rows(q)?;
    let rn = normalize_rows(r)?;
    // ∂L/∂q̂ = dSᵀ r̂, ∂L/∂r̂ = dS q̂
    let dqn = d_s.t().dot(&rn);
    let drn = d_s.dot(&qn);
    Ok((unnormalize_grad(q, &qn, &dqn), unnormalize_grad(r, &rn, &drn)))
}

fn normalize_rows(x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut out = x.to_owned();
    for (index, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm >= MIN_FEATURE_NORM) {
            return Err(Error::ZeroFeature { index });
        }
        row /= norm;
    }
    Ok(out)
}

/// Pulls a gradient on unit rows back through `x ↦ x/‖x‖`.
fn unnormalize_grad(x: ArrayView2<f64>, xn: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut out = g.clone();
    for ((mut o, xr), xnr) in out.axis_iter_mut(Axis(0)).zip(x.rows()).zip(xn.rows()) {
        let norm = xr.dot(&xr).sqrt();
        let radial = o.dot(&xnr);
        o.zip_mut_with(&xnr, |gv, &u| *gv = (*gv - radial * u) / norm);
    }
    out
}

/// Row softmax of `S/τ` with max subtraction.
pub fn softmax_rows(s: &ScoreMatrix, tau: f64) -> SoftAssignment {
    assert!(tau > 0.0, "temperature must be positive");
    let mut p = s.0.as_standard_layout().into_owned();
    let cols = p.ncols();
    par::for_each_row_mut(p.as_slice_mut().expect("standard layout"), cols, |_, row| {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / tau).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    });
    SoftAssignment(p)
}

/// Aligns per-query-voxel attributes `x` (`N_q×K`) to the reference voxels.
pub fn apply_assignment(p: &SoftAssignment, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if p.0.ncols() != x.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "assignment has {} query columns, attributes have {} rows",
            p.0.ncols(),
            x.nrows()
        )));
    }
    Ok(p.0.dot(&x))
}

/// `p(S/τ)·x`.
pub fn soft_align(s: &ScoreMatrix, tau: f64, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if !(tau > 0.0) {
        return Err(Error::DegenerateInput(format!("temperature {tau} must be positive")));
    }
    apply_assignment(&softmax_rows(s, tau), x)
}

/// Pulls a gradient on the assignment back to the scores.
pub fn softmax_rows_backward(p: &SoftAssignment, d_p: ArrayView2<f64>, tau: f64) -> Array2<f64> {
    let mut out = Array2::zeros(p.0.raw_dim());
    for ((mut o, pr), gr) in out.axis_iter_mut(Axis(0)).zip(p.0.rows()).zip(d_p.rows()) {
        let inner = pr.dot(&gr);
        for ((ov, &pv), &gv) in o.iter_mut().zip(pr.iter()).zip(gr.iter()) {
            *ov = pv * (gv - inner) / tau;
        }
    }
    out
}

/// Reverse-mode gradient of [`soft_align`]: returns `(∂L/∂S, ∂L/∂x)`.
pub fn soft_align_backward(
    s: &ScoreMatrix,
    tau: f64,
    x: ArrayView2<f64>,
    d_out: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let p = softmax_rows(s, tau);
    let d_p = d_out.dot(&x.t());
    let d_x = p.0.t().dot(&d_out);
    (softmax_rows_backward(&p, d_p.view(), tau), d_x)
}
