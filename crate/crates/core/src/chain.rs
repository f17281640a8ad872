//! The differentiable rotation head: cosine scores, soft alignment of query
//! coordinates and cues, pair weights and the WCV solve, with a matching
//! reverse pass.

use nalgebra::Matrix3;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::Result;
use crate::matching::{self, ScoreMatrix, SoftAssignment};
use crate::so3::RotationMatrix;
use crate::wcv::{self, WcvSolution, WeightCues, WeightMode, WeightParts};

/// Hyperparameters of the head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadParams {
    pub tau: f64,
    pub lambda: f64,
    pub mode: WeightMode,
    pub center: bool,
}

impl Default for HeadParams {
    fn default() -> Self {
        HeadParams {
            tau: 0.1,
            lambda: 1.0,
            mode: WeightMode::Full,
            center: false,
        }
    }
}

/// Inputs in voxel-major layout. Query and reference share the same grid.
#[derive(Debug, Clone, Copy)]
pub struct HeadInputs<'a> {
    /// `N×C′` query voxel features.
    pub vq: ArrayView2<'a, f64>,
    /// `N×C′` reference voxel features.
    pub vr: ArrayView2<'a, f64>,
    /// Depth-replicated query mask, length `N`.
    pub mask_q: ArrayView1<'a, f64>,
    pub mask_r: ArrayView1<'a, f64>,
    /// Objectness, length `N`.
    pub obj_q: ArrayView1<'a, f64>,
    pub obj_r: ArrayView1<'a, f64>,
    /// `N×3` voxel coordinates shared by both volumes.
    pub coords: ArrayView2<'a, f64>,
}

impl<'a> HeadInputs<'a> {
    fn cues(&self) -> WeightCues<'a> {
        WeightCues {
            mask_q: self.mask_q,
            mask_r: self.mask_r,
            obj_q: self.obj_q,
            obj_r: self.obj_r,
        }
    }
}

/// Intermediate values of a forward pass, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct HeadForward {
    pub scores: ScoreMatrix,
    pub assign: SoftAssignment,
    pub aligned: Array2<f64>,
    pub parts: WeightParts,
    pub weights: Array1<f64>,
    pub solution: WcvSolution,
}

impl HeadForward {
    pub fn rotation(&self) -> RotationMatrix {
        self.solution.rotation
    }
}

pub fn forward(inputs: &HeadInputs<'_>, params: &HeadParams) -> Result<HeadForward> {
    let scores = matching::score_matrix_from_voxels(inputs.vq, inputs.vr)?;
    let assign = matching::softmax_rows(&scores, params.tau);
    let aligned = matching::apply_assignment(&assign, inputs.coords)?;
    let parts = wcv::weight_parts(&assign, &inputs.cues(), params.lambda)?;
    let weights = parts.combine(params.mode);
    let solution = wcv::solve_rotation(
        inputs.coords,
        aligned.view(),
        weights.as_slice().expect("owned"),
        params.center,
    )?;
    Ok(HeadForward {
        scores,
        assign,
        aligned,
        parts,
        weights,
        solution,
    })
}

/// Gradients of a scalar loss w.r.t. the head inputs (coordinates excluded).
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub vq: Array2<f64>,
    pub vr: Array2<f64>,
    pub mask_q: Array1<f64>,
    pub mask_r: Array1<f64>,
    pub obj_q: Array1<f64>,
    pub obj_r: Array1<f64>,
}

pub fn backward(
    inputs: &HeadInputs<'_>,
    params: &HeadParams,
    fwd: &HeadForward,
    d_rotation: &Matrix3<f64>,
) -> Result<HeadGrads> {
    let w = fwd.weights.as_slice().expect("owned");
    let g = wcv::solve_rotation_backward(inputs.coords, fwd.aligned.view(), w, &fwd.solution, d_rotation)?;

    // The assignment feeds the aligned coordinates and both weight factors.
    let mut d_assign = g.xq_aligned.dot(&inputs.coords.t());
    let wg = wcv::weights_backward(
        &fwd.assign,
        &inputs.cues(),
        params.lambda,
        &fwd.parts,
        params.mode,
        g.w.view(),
    );
    d_assign += &wg.assign;

    let d_scores = matching::softmax_rows_backward(&fwd.assign, d_assign.view(), params.tau);
    let (vq, vr) = matching::score_matrix_backward(inputs.vq, inputs.vr, d_scores.view())?;
    Ok(HeadGrads {
        vq,
        vr,
        mask_q: wg.mask_q,
        mask_r: wg.mask_r,
        obj_q: wg.obj_q,
        obj_r: wg.obj_r,
    })
}

/// Forward pass followed by the pose loss against `r_gt` and its gradients.
pub fn pose_loss_and_grads(
    inputs: &HeadInputs<'_>,
    params: &HeadParams,
    r_gt: &RotationMatrix,
) -> Result<(f64, HeadForward, HeadGrads)> {
    let fwd = forward(inputs, params)?;
    let loss = wcv::pose_loss(&fwd.rotation(), r_gt);
    let d_r = wcv::pose_loss_grad(&fwd.rotation(), r_gt);
    let grads = backward(inputs, params, &fwd, &d_r)?;
    Ok((loss, fwd, grads))
}

/// Replicates an `H·W` mask over `d` depth slices (flattened, width fastest).
pub fn replicate_flat(mask: ArrayView1<f64>, d: usize) -> Array1<f64> {
    let hw = mask.len();
    Array1::from_shape_fn(d * hw, |n| mask[n % hw])
}

/// Adjoint of [`replicate_flat`].
pub fn replicate_flat_backward(grad: ArrayView1<f64>, d: usize) -> Array1<f64> {
    let hw = grad.len() / d;
    grad.to_owned()
        .into_shape_with_order((d, hw))
        .expect("length is a multiple of depth")
        .sum_axis(Axis(0))
}
