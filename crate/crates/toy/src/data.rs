//! Toy two-view "images" built from the synthetic scene generator.
//!
//! A view is an `H·W × (c·D)` matrix: pixel `p` holds the content features of
//! its `D` voxels, channel `k·D + d` carrying feature `k` of depth slice `d`.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

use voxmatch_core::config::ToyConfig;
use voxmatch_core::so3::{sample_uniform_rotation, RotationMatrix};
use voxmatch_core::synth::{generate_scene, instance_rng, SynthConfig};
use voxmatch_core::Result;

#[derive(Debug, Clone)]
pub struct ToyPair {
    pub img_q: Array2<f64>,
    pub img_r: Array2<f64>,
    /// Ground-truth `H·W` masks.
    pub mask_q: Array1<f64>,
    pub mask_r: Array1<f64>,
    /// `x_q ≈ gt_rotation · x_r`.
    pub gt_rotation: RotationMatrix,
}

pub fn synth_config(cfg: &ToyConfig) -> SynthConfig {
    SynthConfig {
        d: cfg.depth,
        h: cfg.height,
        w: cfg.width,
        feat_dim: cfg.content_dim,
        sigma: cfg.sigma,
        outlier_fraction: cfg.outlier_fraction,
    }
}

/// Rearranges `N×c` voxel-major content into an `H·W × (c·D)` image.
pub fn voxels_to_image(content: &Array2<f64>, d: usize, hw: usize) -> Array2<f64> {
    let c = content.ncols();
    Array2::from_shape_fn((hw, c * d), |(p, ch)| content[[(ch % d) * hw + p, ch / d]])
}

pub fn generate_pair(cfg: &ToyConfig, rng: &mut ChaCha8Rng) -> Result<ToyPair> {
    let synth = synth_config(cfg);
    let scene = generate_scene(&synth, rng)?;
    let gt = sample_uniform_rotation(rng);
    let vr = scene.render(&RotationMatrix::identity(), rng);
    let vq = scene.render(&gt, rng);
    let hw = cfg.height * cfg.width;
    Ok(ToyPair {
        img_q: voxels_to_image(&vq, cfg.depth, hw),
        img_r: voxels_to_image(&vr, cfg.depth, hw),
        mask_q: scene.mask.clone(),
        mask_r: scene.mask.clone(),
        gt_rotation: gt,
    })
}

/// Pair `id` of the stream keyed by `seed`.
pub fn pair(cfg: &ToyConfig, seed: u64, id: u64) -> Result<ToyPair> {
    generate_pair(cfg, &mut instance_rng(seed, id))
}
