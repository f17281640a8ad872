//! Seeded synthetic two-view instances.
//!
//! An object is a canonical field of random unit features on the voxel grid.
//! A view under rotation `R` shows at grid position `x` the canonical feature
//! of the voxel nearest to `Rᵀx`, plus Gaussian noise. Outliers model a static
//! background: whole pixel columns (the last one partial) carry fresh random
//! features that are identical, up to noise, at the same grid index in every
//! view. Ground-truth masks give the inlier share of each column and
//! ground-truth objectness marks inlier voxels.

use nalgebra::Vector3;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::so3::{sample_uniform_rotation, RotationMatrix};
use crate::voxelgrid::{make_coords, VoxelCoords};

/// Generator settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub feat_dim: usize,
    pub sigma: f64,
    pub outlier_fraction: f64,
}

impl SynthConfig {
    pub fn from_config(cfg: &Config) -> Self {
        SynthConfig {
            d: cfg.grid_d,
            h: cfg.grid_h,
            w: cfg.grid_w,
            feat_dim: cfg.feat_dim,
            sigma: cfg.sigma,
            outlier_fraction: cfg.outlier_fraction,
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn n_outliers(&self) -> usize {
        (self.outlier_fraction * self.n_voxels() as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.h < 2 || self.w < 2 {
            return Err(Error::ConfigInvalid("grid extents must be at least 2".into()));
        }
        if self.feat_dim == 0 {
            return Err(Error::ConfigInvalid("feature width must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::ConfigInvalid("outlier fraction must lie in [0, 1)".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::ConfigInvalid("noise level must be non-negative".into()));
        }
        Ok(())
    }
}

/// An object with its background, shared by all views drawn from it.
#[derive(Debug, Clone)]
pub struct Scene {
    pub config: SynthConfig,
    pub coords: VoxelCoords,
    /// `N×C′` canonical object features.
    pub canonical: Array2<f64>,
    /// Sorted outlier voxel indices.
    pub outliers: Vec<usize>,
    /// `N×C′` background features (rows outside `outliers` are unused).
    pub background: Array2<f64>,
    /// `1` on inlier voxels, `0` on outliers.
    pub objectness: Array1<f64>,
    /// `H·W` share of inlier voxels per pixel column.
    pub mask: Array1<f64>,
}

fn unit_rows<R: Rng + ?Sized>(n: usize, c: usize, rng: &mut R) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((n, c));
    for mut row in m.rows_mut() {
        loop {
            row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let norm = row.dot(&row).sqrt();
            if norm > 1e-6 {
                row /= norm;
                break;
            }
        }
    }
    m
}

/// Random scene: canonical features, outlier columns and ground-truth cues.
pub fn generate_scene<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<Scene> {
    cfg.validate()?;
    let (d, h, w) = (cfg.d, cfg.h, cfg.w);
    let n = cfg.n_voxels();
    let hw = h * w;
    let canonical = unit_rows(n, cfg.feat_dim, rng);

    let n_out = cfg.n_outliers();
    let mut columns: Vec<usize> = (0..hw).collect();
    columns.shuffle(rng);
    let mut depths: Vec<usize> = (0..d).collect();
    let mut outliers = Vec::with_capacity(n_out);
    for &col in &columns {
        if outliers.len() == n_out {
            break;
        }
        let take = (n_out - outliers.len()).min(d);
        if take < d {
            depths.shuffle(rng);
        }
        for &di in depths.iter().take(take) {
            outliers.push(di * hw + col);
        }
        depths.sort_unstable();
    }
    outliers.sort_unstable();

    let background = unit_rows(n, cfg.feat_dim, rng);
    let mut objectness = Array1::<f64>::ones(n);
    let mut mask = Array1::<f64>::ones(hw);
    for &k in &outliers {
        objectness[k] = 0.0;
        mask[k % hw] -= 1.0 / d as f64;
    }
    mask.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(Scene {
        config: *cfg,
        coords: make_coords(d, h, w),
        canonical,
        outliers,
        background,
        objectness,
        mask,
    })
}

/// Index of the grid voxel nearest to `p` (clamped to the grid).
pub fn nearest_voxel(p: &Vector3<f64>, dims: (usize, usize, usize)) -> usize {
    let (d, h, w) = dims;
    let idx = |v: f64, extent: usize| -> usize {
        if extent <= 1 {
            return 0;
        }
        let t = ((v + 1.0) * 0.5 * (extent - 1) as f64).round();
        t.clamp(0.0, (extent - 1) as f64) as usize
    };
    idx(p.z, d) * h * w + idx(p.y, h) * w + idx(p.x, w)
}

impl Scene {
    /// `N×C′` features of the view under rotation `r`.
    pub fn render<R: Rng + ?Sized>(&self, r: &RotationMatrix, rng: &mut R) -> Array2<f64> {
        let n = self.coords.len();
        let c = self.config.feat_dim;
        let rt = r.transpose();
        let dims = self.coords.dims();
        let mut out = Array2::<f64>::zeros((n, c));
        let mut next_outlier = self.outliers.iter().peekable();
        for i in 0..n {
            let source = if next_outlier.peek() == Some(&&i) {
                next_outlier.next();
                self.background.row(i)
            } else {
                self.canonical
                    .row(nearest_voxel(&rt.apply(&self.coords.point(i)), dims))
            };
            out.row_mut(i).assign(&source);
        }
        if self.config.sigma > 0.0 {
            let sigma = self.config.sigma;
            out.iter_mut()
                .for_each(|v| *v += sigma * rng.sample::<f64, _>(StandardNormal));
        }
        out
    }

    /// Flattened `D·H·W` mask replicated along depth.
    pub fn mask_3d(&self) -> Array1<f64> {
        crate::chain::replicate_flat(self.mask.view(), self.config.d)
    }
}

/// A query/reference pair with ground truth. The reference is rendered at the
/// identity, the query at `gt_rotation`, so `x_q ≈ gt_rotation · x_r`.
#[derive(Debug, Clone)]
pub struct SynthInstance {
    pub id: u64,
    pub seed: u64,
    pub scene: Scene,
    pub gt_rotation: RotationMatrix,
    /// `N×C′` query voxel features.
    pub vq: Array2<f64>,
    /// `N×C′` reference voxel features.
    pub vr: Array2<f64>,
}

impl SynthInstance {
    pub fn coords(&self) -> &Array2<f64> {
        self.scene.coords.coords()
    }

    pub fn n_voxels(&self) -> usize {
        self.scene.coords.len()
    }

    /// Query coordinates exactly matched to each reference voxel: `ΔR·x_r`.
    pub fn gt_matched_coords(&self) -> Array2<f64> {
        let x = self.coords();
        let mut out = x.clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let p = self.gt_rotation.apply(&self.scene.coords.point(i));
            row[0] = p.x;
            row[1] = p.y;
            row[2] = p.z;
        }
        out
    }
}

/// Independent generator stream for item `id` under `seed`.
pub fn instance_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn generate_with_rng<R: Rng + ?Sized>(
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<(Scene, RotationMatrix, Array2<f64>, Array2<f64>)> {
    let scene = generate_scene(cfg, rng)?;
    let gt = sample_uniform_rotation(rng);
    let vr = scene.render(&RotationMatrix::identity(), rng);
    let vq = scene.render(&gt, rng);
    Ok((scene, gt, vq, vr))
}

/// Instance `id` of the suite defined by `(cfg, seed)`.
pub fn generate_indexed(cfg: &SynthConfig, seed: u64, id: u64) -> Result<SynthInstance> {
    let mut rng = instance_rng(seed, id);
    let (scene, gt_rotation, vq, vr) = generate_with_rng(cfg, &mut rng)?;
    Ok(SynthInstance {
        id,
        seed,
        scene,
        gt_rotation,
        vq,
        vr,
    })
}

pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<SynthInstance> {
    generate_indexed(cfg, seed, 0)
}
