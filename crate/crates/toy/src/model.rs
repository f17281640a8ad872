//! Two-stream encoder, voxel head and image/mask decoder.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxmatch_core::chain::{self, replicate_flat, replicate_flat_backward, HeadInputs, HeadParams};
use voxmatch_core::config::ToyConfig;
use voxmatch_core::losses::{bce_grad, bce_loss, mse_grad, mse_loss, LossValue};
use voxmatch_core::so3::RotationMatrix;
use voxmatch_core::voxelgrid::{make_coords, FeatureVolume, ObjectnessMap};

use crate::data::ToyPair;
use crate::error::{Result, ToyError};
use crate::tape::{Tape, Var};

const FFN_EXPANSION: usize = 2;

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: usize,
    k: usize,
    v: usize,
    out: Linear,
}

#[derive(Debug, Clone, Copy)]
struct Ffn {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderBlock {
    ln_sa: Norm,
    sa: Attention,
    ln_ca: Norm,
    ln_kv: Norm,
    ca: Attention,
    ln_ffn: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone, Copy)]
struct DecoderBlock {
    ln_sa: Norm,
    sa: Attention,
    ln_ffn: Norm,
    ffn: Ffn,
}

struct Builder {
    params: Vec<Array2<f64>>,
    names: Vec<String>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, name: String, value: Array2<f64>) -> usize {
        self.params.push(value);
        self.names.push(name);
        self.params.len() - 1
    }

    /// Uniform in `±1/√fan_in`.
    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
        self.push(name, w)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.weight(format!("{name}.w"), fan_in, fan_out),
            b: self.push(format!("{name}.b"), Array2::zeros((1, fan_out))),
        }
    }

    fn norm(&mut self, name: &str, width: usize) -> Norm {
        Norm {
            g: self.push(format!("{name}.g"), Array2::ones((1, width))),
            b: self.push(format!("{name}.b"), Array2::zeros((1, width))),
        }
    }

    fn attention(&mut self, name: &str, width: usize) -> Attention {
        Attention {
            q: self.weight(format!("{name}.q"), width, width),
            k: self.weight(format!("{name}.k"), width, width),
            v: self.weight(format!("{name}.v"), width, width),
            out: self.linear(&format!("{name}.out"), width, width),
        }
    }

    fn ffn(&mut self, name: &str, width: usize) -> Ffn {
        Ffn {
            up: self.linear(&format!("{name}.up"), width, FFN_EXPANSION * width),
            down: self.linear(&format!("{name}.down"), FFN_EXPANSION * width, width),
        }
    }
}

/// Per-view encoder output on the tape: `N×C′` features, `N×1` objectness.
#[derive(Debug, Clone, Copy)]
pub struct VoxelVars {
    pub features: Var,
    pub objectness: Var,
}

/// Decoder output on the tape: `H·W × (c·D)` image, `H·W × 1` mask.
#[derive(Debug, Clone, Copy)]
pub struct DecodedVars {
    pub image: Var,
    pub mask: Var,
}

/// Forward values of one pair, as plain arrays.
#[derive(Debug, Clone)]
pub struct PairOutput {
    pub volume_q: FeatureVolume,
    pub volume_r: FeatureVolume,
    pub objectness_q: ObjectnessMap,
    pub objectness_r: ObjectnessMap,
    pub image_q: Array2<f64>,
    pub image_r: Array2<f64>,
    pub mask_q: Array1<f64>,
    pub mask_r: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    cfg: ToyConfig,
    params: Vec<Array2<f64>>,
    names: Vec<String>,
    embed: Linear,
    encoder: Vec<EncoderBlock>,
    head: Linear,
    aggregate: Linear,
    decoder: Vec<DecoderBlock>,
    ln_out: Norm,
    image_head: Linear,
    mask_head: Linear,
}

impl ToyModel {
    pub fn new(cfg: &ToyConfig, seed: u64) -> Result<Self> {
        if cfg.depth == 0
            || cfg.height == 0
            || cfg.width == 0
            || cfg.feat_dim == 0
            || cfg.model_dim == 0
            || cfg.content_dim == 0
        {
            return Err(ToyError::Config("toy dimensions must be positive".into()));
        }
        let d = cfg.model_dim;
        let input = cfg.content_dim * cfg.depth;
        let voxel_channels = (cfg.feat_dim + 1) * cfg.depth;
        let mut b = Builder {
            params: Vec::new(),
            names: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let embed = b.linear("embed", input, d);
        let encoder = (0..cfg.blocks)
            .map(|l| EncoderBlock {
                ln_sa: b.norm(&format!("enc{l}.ln_sa"), d),
                sa: b.attention(&format!("enc{l}.sa"), d),
                ln_ca: b.norm(&format!("enc{l}.ln_ca"), d),
                ln_kv: b.norm(&format!("enc{l}.ln_kv"), d),
                ca: b.attention(&format!("enc{l}.ca"), d),
                ln_ffn: b.norm(&format!("enc{l}.ln_ffn"), d),
                ffn: b.ffn(&format!("enc{l}.ffn"), d),
            })
            .collect();
        let head = b.linear("head", d, voxel_channels);
        let aggregate = b.linear("aggregate", cfg.feat_dim * cfg.depth, d);
        let decoder = (0..cfg.decoder_blocks)
            .map(|l| DecoderBlock {
                ln_sa: b.norm(&format!("dec{l}.ln_sa"), d),
                sa: b.attention(&format!("dec{l}.sa"), d),
                ln_ffn: b.norm(&format!("dec{l}.ln_ffn"), d),
                ffn: b.ffn(&format!("dec{l}.ffn"), d),
            })
            .collect();
        let ln_out = b.norm("ln_out", d);
        let image_head = b.linear("image_head", d, input);
        let mask_head = b.linear("mask_head", d, 1);
        Ok(ToyModel {
            cfg: cfg.clone(),
            params: b.params,
            names: b.names,
            embed,
            encoder,
            head,
            aggregate,
            decoder,
            ln_out,
            image_head,
            mask_head,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    /// Parameter tensors in declaration order.
    pub fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Replaces all parameters; shapes must match.
    pub fn set_params(&mut self, params: Vec<Array2<f64>>) -> Result<()> {
        if params.len() != self.params.len() || params.iter().zip(&self.params).any(|(a, b)| a.dim() != b.dim()) {
            return Err(ToyError::Config("parameter shapes do not match the model".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Zeroes the output projections of every attention and feed-forward
    /// branch, leaving only the residual path.
    pub fn zero_branch_outputs(&mut self) {
        let mut targets = Vec::new();
        for blk in &self.encoder {
            targets.extend([blk.sa.out, blk.ca.out, blk.ffn.down]);
        }
        for blk in &self.decoder {
            targets.extend([blk.sa.out, blk.ffn.down]);
        }
        for lin in targets {
            self.params[lin.w].fill(0.0);
            self.params[lin.b].fill(0.0);
        }
    }

    pub fn n_pixels(&self) -> usize {
        self.cfg.height * self.cfg.width
    }

    pub fn n_voxels(&self) -> usize {
        self.cfg.depth * self.n_pixels()
    }

    fn check_image(&self, img: &Array2<f64>) -> Result<()> {
        let expected = (self.n_pixels(), self.cfg.content_dim * self.cfg.depth);
        if img.dim() != expected {
            return Err(ToyError::Core(voxmatch_core::Error::ShapeMismatch(format!(
                "image is {:?}, model expects {:?}",
                img.dim(),
                expected
            ))));
        }
        Ok(())
    }

    /// Records every parameter as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    fn linear(&self, t: &mut Tape, p: &[Var], lin: Linear, x: Var) -> Var {
        let y = t.matmul(x, p[lin.w]);
        t.add_row(y, p[lin.b])
    }

    fn norm(&self, t: &mut Tape, p: &[Var], n: Norm, x: Var) -> Var {
        let y = t.layer_norm(x);
        let y = t.mul_row(y, p[n.g]);
        t.add_row(y, p[n.b])
    }

    /// Single-head scaled dot-product attention of `x` over `kv`.
    fn attention(&self, t: &mut Tape, p: &[Var], a: Attention, x: Var, kv: Var) -> Var {
        let q = t.matmul(x, p[a.q]);
        let k = t.matmul(kv, p[a.k]);
        let v = t.matmul(kv, p[a.v]);
        let logits = t.matmul_nt(q, k);
        let logits = t.scale(logits, 1.0 / (self.cfg.model_dim as f64).sqrt());
        let weights = t.softmax_rows(logits);
        let mixed = t.matmul(weights, v);
        self.linear(t, p, a.out, mixed)
    }

    fn ffn(&self, t: &mut Tape, p: &[Var], f: Ffn, x: Var) -> Var {
        let h = self.linear(t, p, f.up, x);
        let h = t.gelu(h);
        self.linear(t, p, f.down, h)
    }

    /// Symmetric two-stream encoding followed by the voxel head.
    pub fn encode_pair_on(&self, t: &mut Tape, p: &[Var], img_q: Var, img_r: Var) -> (VoxelVars, VoxelVars) {
        let mut xq = self.linear(t, p, self.embed, img_q);
        let mut xr = self.linear(t, p, self.embed, img_r);
        for blk in &self.encoder {
            let (prev_q, prev_r) = (xq, xr);
            let step = |t: &mut Tape, x: Var| -> Var {
                let n = self.norm(t, p, blk.ln_sa, x);
                let s = self.attention(t, p, blk.sa, n, n);
                t.add(x, s)
            };
            xq = step(t, xq);
            xr = step(t, xr);
            let kv_r = self.norm(t, p, blk.ln_kv, prev_r);
            let kv_q = self.norm(t, p, blk.ln_kv, prev_q);
            let cross = |t: &mut Tape, x: Var, kv: Var| -> Var {
                let n = self.norm(t, p, blk.ln_ca, x);
                let c = self.attention(t, p, blk.ca, n, kv);
                t.add(x, c)
            };
            xq = cross(t, xq, kv_r);
            xr = cross(t, xr, kv_q);
            let ff = |t: &mut Tape, x: Var| -> Var {
                let n = self.norm(t, p, blk.ln_ffn, x);
                let f = self.ffn(t, p, blk.ffn, n);
                t.add(x, f)
            };
            xq = ff(t, xq);
            xr = ff(t, xr);
        }
        let hq = self.linear(t, p, self.head, xq);
        let hr = self.linear(t, p, self.head, xr);
        (self.voxelize_on(t, hq), self.voxelize_on(t, hr))
    }

    /// Splits `H·W × (C′+1)·D` head channels into voxel features and
    /// logistic objectness, matching `voxelgrid::voxelize`.
    fn voxelize_on(&self, t: &mut Tape, head: Var) -> VoxelVars {
        let (d, hw, c) = (self.cfg.depth, self.n_pixels(), self.cfg.feat_dim);
        let width = (c + 1) * d;
        let n = d * hw;
        let mut feat_idx = Vec::with_capacity(n * c);
        for voxel in 0..n {
            let (di, px) = (voxel / hw, voxel % hw);
            for ch in 0..c {
                feat_idx.push(px * width + ch * d + di);
            }
        }
        let obj_idx: Vec<usize> = (0..n).map(|voxel| (voxel % hw) * width + c * d + voxel / hw).collect();
        let features = t.gather(head, feat_idx, (n, c));
        let logits = t.gather(head, obj_idx, (n, 1));
        VoxelVars {
            features,
            objectness: t.sigmoid(logits),
        }
    }

    /// Depth aggregation, self-attention blocks and the two output heads.
    pub fn decode_on(&self, t: &mut Tape, p: &[Var], features: Var) -> DecodedVars {
        let (d, hw, c) = (self.cfg.depth, self.n_pixels(), self.cfg.feat_dim);
        let mut idx = Vec::with_capacity(hw * c * d);
        for px in 0..hw {
            for ch in 0..c * d {
                idx.push(((ch % d) * hw + px) * c + ch / d);
            }
        }
        let flat = t.gather(features, idx, (hw, c * d));
        let mut x = self.linear(t, p, self.aggregate, flat);
        for blk in &self.decoder {
            let n = self.norm(t, p, blk.ln_sa, x);
            let s = self.attention(t, p, blk.sa, n, n);
            x = t.add(x, s);
            let n = self.norm(t, p, blk.ln_ffn, x);
            let f = self.ffn(t, p, blk.ffn, n);
            x = t.add(x, f);
        }
        let x = self.norm(t, p, self.ln_out, x);
        let image = self.linear(t, p, self.image_head, x);
        let logits = self.linear(t, p, self.mask_head, x);
        DecodedVars {
            image,
            mask: t.sigmoid(logits),
        }
    }

    fn volume(&self, values: &Array2<f64>) -> Result<FeatureVolume> {
        let (d, h, w) = (self.cfg.depth, self.cfg.height, self.cfg.width);
        Ok(FeatureVolume::from_voxel_matrix(values, d, h, w)?)
    }

    fn objectness(&self, values: &Array2<f64>) -> Result<ObjectnessMap> {
        let (d, h, w) = (self.cfg.depth, self.cfg.height, self.cfg.width);
        Ok(ObjectnessMap::from_flat(values.column(0).to_owned(), d, h, w)?)
    }

    pub fn encode_pair(
        &self,
        img_q: &Array2<f64>,
        img_r: &Array2<f64>,
    ) -> Result<((FeatureVolume, ObjectnessMap), (FeatureVolume, ObjectnessMap))> {
        self.check_image(img_q)?;
        self.check_image(img_r)?;
        let mut t = Tape::new();
        let p = self.bind(&mut t);
        let (iq, ir) = (t.leaf(img_q.clone()), t.leaf(img_r.clone()));
        let (q, r) = self.encode_pair_on(&mut t, &p, iq, ir);
        Ok((
            (
                self.volume(t.value(q.features))?,
                self.objectness(t.value(q.objectness))?,
            ),
            (
                self.volume(t.value(r.features))?,
                self.objectness(t.value(r.objectness))?,
            ),
        ))
    }

    /// Reconstructed `H·W × (c·D)` image and `H·W` mask.
    pub fn decode(&self, v: &FeatureVolume) -> Result<(Array2<f64>, Array1<f64>)> {
        let expected = (self.cfg.feat_dim, self.cfg.depth, self.cfg.height, self.cfg.width);
        if v.dim() != expected {
            return Err(ToyError::Core(voxmatch_core::Error::ShapeMismatch(format!(
                "volume is {:?}, model expects {:?}",
                v.dim(),
                expected
            ))));
        }
        let mut t = Tape::new();
        let p = self.bind(&mut t);
        let f = t.leaf(v.voxel_matrix());
        let out = self.decode_on(&mut t, &p, f);
        Ok((t.value(out.image).clone(), t.value(out.mask).column(0).to_owned()))
    }

    pub fn forward(&self, pair: &ToyPair) -> Result<PairOutput> {
        let mut t = Tape::new();
        let vars = self.record(&mut t, pair)?;
        self.collect(&t, &vars)
    }

    fn record(&self, t: &mut Tape, pair: &ToyPair) -> Result<Recorded> {
        self.check_image(&pair.img_q)?;
        self.check_image(&pair.img_r)?;
        let params = self.bind(t);
        let (iq, ir) = (t.leaf(pair.img_q.clone()), t.leaf(pair.img_r.clone()));
        let (q, r) = self.encode_pair_on(t, &params, iq, ir);
        let dq = self.decode_on(t, &params, q.features);
        let dr = self.decode_on(t, &params, r.features);
        Ok(Recorded { params, q, r, dq, dr })
    }

    fn collect(&self, t: &Tape, v: &Recorded) -> Result<PairOutput> {
        Ok(PairOutput {
            volume_q: self.volume(t.value(v.q.features))?,
            volume_r: self.volume(t.value(v.r.features))?,
            objectness_q: self.objectness(t.value(v.q.objectness))?,
            objectness_r: self.objectness(t.value(v.r.objectness))?,
            image_q: t.value(v.dq.image).clone(),
            image_r: t.value(v.dr.image).clone(),
            mask_q: t.value(v.dq.mask).column(0).to_owned(),
            mask_r: t.value(v.dr.mask).column(0).to_owned(),
        })
    }

    /// Rotation predicted for a pair by the full head.
    pub fn predict_rotation(&self, pair: &ToyPair, head: &HeadParams) -> Result<RotationMatrix> {
        let mut t = Tape::new();
        let v = self.record(&mut t, pair)?;
        let coords = make_coords(self.cfg.depth, self.cfg.height, self.cfg.width);
        let (mq, mr) = (self.replicated(&t, v.dq.mask), self.replicated(&t, v.dr.mask));
        let inputs = HeadInputs {
            vq: t.value(v.q.features).view(),
            vr: t.value(v.r.features).view(),
            mask_q: mq.view(),
            mask_r: mr.view(),
            obj_q: t.value(v.q.objectness).column(0),
            obj_r: t.value(v.r.objectness).column(0),
            coords: coords.coords().view(),
        };
        Ok(chain::forward(&inputs, head)?.rotation())
    }

    fn replicated(&self, t: &Tape, mask: Var) -> Array1<f64> {
        replicate_flat(t.value(mask).column(0), self.cfg.depth)
    }

    /// Total loss of one pair and its gradient for every parameter.
    pub fn loss_and_grads(&self, pair: &ToyPair, head: &HeadParams) -> Result<(LossValue, Vec<Array2<f64>>)> {
        let mut t = Tape::new();
        let v = self.record(&mut t, pair)?;
        let (total, value) = self.loss_on(&mut t, &v, pair, head)?;
        let mut grads = t.backward(total);
        let out = v
            .params
            .iter()
            .zip(&self.params)
            .map(|(var, p)| grads.take_or_zeros(*var, p.dim()))
            .collect();
        Ok((value, out))
    }

    /// Total loss of one pair without gradients.
    pub fn loss(&self, pair: &ToyPair, head: &HeadParams) -> Result<LossValue> {
        let mut t = Tape::new();
        let v = self.record(&mut t, pair)?;
        Ok(self.loss_on(&mut t, &v, pair, head)?.1)
    }

    fn loss_on(&self, t: &mut Tape, v: &Recorded, pair: &ToyPair, head: &HeadParams) -> Result<(Var, LossValue)> {
        let d = self.cfg.depth;
        let mut parts = Vec::new();
        let mut img_total = 0.0;
        let mut mask_total = 0.0;
        for (dec, img, mask) in [(v.dq, &pair.img_q, &pair.mask_q), (v.dr, &pair.img_r, &pair.mask_r)] {
            let target: Array2<f64> = img * &mask.view().insert_axis(ndarray::Axis(1));
            let pred = t.value(dec.image).as_standard_layout().into_owned();
            let (ps, ts) = (pred.as_slice().expect("standard"), target.as_slice().expect("standard"));
            img_total += mse_loss(ps, ts)?;
            let g = Array2::from_shape_vec(pred.raw_dim(), mse_grad(ps, ts)?).expect("same shape");
            parts.push((dec.image, g));

            let m_pred: Vec<f64> = t.value(dec.mask).iter().copied().collect();
            let m_gt = mask.as_slice().expect("contiguous mask");
            mask_total += bce_loss(&m_pred, m_gt)?;
            let g = Array2::from_shape_vec((m_pred.len(), 1), bce_grad(&m_pred, m_gt)?).expect("column");
            parts.push((dec.mask, g));
        }

        let coords = make_coords(d, self.cfg.height, self.cfg.width);
        let (mq, mr) = (self.replicated(t, v.dq.mask), self.replicated(t, v.dr.mask));
        let inputs = HeadInputs {
            vq: t.value(v.q.features).view(),
            vr: t.value(v.r.features).view(),
            mask_q: mq.view(),
            mask_r: mr.view(),
            obj_q: t.value(v.q.objectness).column(0),
            obj_r: t.value(v.r.objectness).column(0),
            coords: coords.coords().view(),
        };
        let (pose, _, g) = chain::pose_loss_and_grads(&inputs, head, &pair.gt_rotation)?;
        let column = |a: Array1<f64>| a.insert_axis(ndarray::Axis(1));
        parts.push((v.q.features, g.vq));
        parts.push((v.r.features, g.vr));
        parts.push((v.q.objectness, column(g.obj_q)));
        parts.push((v.r.objectness, column(g.obj_r)));
        parts.push((v.dq.mask, column(replicate_flat_backward(g.mask_q.view(), d))));
        parts.push((v.dr.mask, column(replicate_flat_backward(g.mask_r.view(), d))));

        let value = LossValue::from_parts(img_total, mask_total, pose);
        if !value.value.is_finite() {
            return Err(ToyError::NonFiniteLoss { step: None });
        }
        Ok((t.custom_scalar(value.value, parts), value))
    }
}

struct Recorded {
    params: Vec<Var>,
    q: VoxelVars,
    r: VoxelVars,
    dq: DecodedVars,
    dr: DecodedVars,
}

/// Geodesic error of the predicted rotation, 180° when the head fails.
pub fn rotation_error_deg(model: &ToyModel, pair: &ToyPair, head: &HeadParams) -> f64 {
    match model.predict_rotation(pair, head) {
        Ok(r) => voxmatch_core::so3::geodesic_error_deg(&r, &pair.gt_rotation),
        Err(_) => 180.0,
    }
}
