//! AdamW training over a seeded stream of synthetic pairs.

use ndarray::Array2;

use voxmatch_core::chain::HeadParams;
use voxmatch_core::config::ToyConfig;
use voxmatch_core::losses::LossValue;
use voxmatch_core::par;

use crate::data::{pair, ToyPair};
use crate::error::{Result, ToyError};
use crate::model::{rotation_error_deg, ToyModel};

const TRAIN_SALT: u64 = 0x7472_6169_6e00_0001;
const HOLDOUT_SALT: u64 = 0x686f_6c64_6f75_7402;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Parameters plus optimizer moments.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ToyModel,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(cfg: &ToyConfig) -> Result<Self> {
        let model = ToyModel::new(cfg, cfg.seed)?;
        Ok(Self::from_model(model, cfg.seed))
    }

    pub fn from_model(model: ToyModel, seed: u64) -> Self {
        let zeros: Vec<Array2<f64>> = model.params().iter().map(|p| Array2::zeros(p.dim())).collect();
        TrainState {
            model,
            m: zeros.clone(),
            v: zeros,
            step: 0,
            seed,
        }
    }

    /// Pairs consumed by step `step`.
    pub fn batch(&self, step: usize) -> Result<Vec<ToyPair>> {
        let cfg = self.model.config();
        (0..cfg.batch)
            .map(|i| Ok(pair(cfg, self.seed ^ TRAIN_SALT, (step * cfg.batch + i) as u64)?))
            .collect()
    }

    /// One optimizer step. Returns the mean batch loss and the number of
    /// items skipped for a degenerate solve.
    pub fn step(&mut self, head: &HeadParams) -> Result<(Option<LossValue>, usize)> {
        let step = self.step;
        let batch = self.batch(step)?;
        let results = par::map_slice(&batch, |p| self.model.loss_and_grads(p, head));

        let mut total: Option<(LossValue, Vec<Array2<f64>>)> = None;
        let mut used = 0usize;
        let mut skipped = 0usize;
        for r in results {
            match r {
                Ok((loss, grads)) => {
                    used += 1;
                    total = Some(match total {
                        None => (loss, grads),
                        Some((acc, mut acc_g)) => {
                            for (a, g) in acc_g.iter_mut().zip(&grads) {
                                *a += g;
                            }
                            (
                                LossValue::from_parts(acc.img + loss.img, acc.mask + loss.mask, acc.pose + loss.pose),
                                acc_g,
                            )
                        }
                    });
                }
                Err(ToyError::NonFiniteLoss { .. }) => return Err(ToyError::NonFiniteLoss { step: Some(step) }),
                Err(ToyError::Core(e)) if e.is_numerical() => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        self.step += 1;
        let Some((sum, mut grads)) = total else {
            return Ok((None, skipped));
        };
        let scale = 1.0 / used as f64;
        for g in grads.iter_mut() {
            *g *= scale;
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(ToyError::NonFiniteLoss { step: Some(step) });
        }
        self.apply(&mut grads);
        Ok((
            Some(LossValue::from_parts(
                sum.img * scale,
                sum.mask * scale,
                sum.pose * scale,
            )),
            skipped,
        ))
    }

    fn apply(&mut self, grads: &mut [Array2<f64>]) {
        let cfg = self.model.config().clone();
        let norm = grads
            .iter()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            for g in grads.iter_mut() {
                *g *= s;
            }
        }
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let (lr, wd) = (cfg.lr, cfg.weight_decay);
        for (((p, m), v), g) in self
            .model
            .params_mut()
            .iter_mut()
            .zip(&mut self.m)
            .zip(&mut self.v)
            .zip(grads.iter())
        {
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                *p -= lr * (update + wd * *p);
            });
        }
    }
}

/// One row of the metric trace, measured on the held-out split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: LossValue,
    pub holdout_geodesic_deg: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub state: TrainState,
    pub trace: Vec<TraceRow>,
    /// Batch items skipped for a degenerate solve.
    pub skipped: usize,
}

impl TrainReport {
    pub fn initial_error(&self) -> f64 {
        self.trace.first().map_or(f64::NAN, |r| r.holdout_geodesic_deg)
    }

    pub fn final_error(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |r| r.holdout_geodesic_deg)
    }
}

pub fn holdout(cfg: &ToyConfig) -> Result<Vec<ToyPair>> {
    (0..cfg.holdout)
        .map(|i| Ok(pair(cfg, cfg.seed ^ HOLDOUT_SALT, i as u64)?))
        .collect()
}

/// Mean loss (over pairs the head can solve) and mean geodesic error, with
/// failures counted as 180°.
pub fn evaluate(model: &ToyModel, pairs: &[ToyPair], head: &HeadParams) -> (LossValue, f64) {
    let rows = par::map_slice(pairs, |p| {
        (model.loss(p, head).ok(), rotation_error_deg(model, p, head))
    });
    let mut sum = LossValue::default();
    let mut solved = 0usize;
    let mut err = 0.0;
    for (loss, e) in &rows {
        if let Some(l) = loss {
            sum = LossValue::from_parts(sum.img + l.img, sum.mask + l.mask, sum.pose + l.pose);
            solved += 1;
        }
        err += e;
    }
    let k = solved.max(1) as f64;
    let mean = LossValue::from_parts(sum.img / k, sum.mask / k, sum.pose / k);
    (mean, err / pairs.len().max(1) as f64)
}

/// Trains from a fresh seeded model for `cfg.steps` steps.
pub fn train_toy(cfg: &ToyConfig, head: &HeadParams) -> Result<TrainReport> {
    train_from(TrainState::new(cfg)?, cfg.steps, head)
}

pub fn train_from(mut state: TrainState, steps: usize, head: &HeadParams) -> Result<TrainReport> {
    let cfg = state.model.config().clone();
    let held = holdout(&cfg)?;
    let mut trace = Vec::new();
    let mut record = |state: &TrainState| {
        let (loss, err) = evaluate(&state.model, &held, head);
        trace.push(TraceRow {
            step: state.step,
            loss,
            holdout_geodesic_deg: err,
        });
    };
    record(&state);
    let mut skipped = 0;
    let start = state.step;
    for done in 1..=steps {
        skipped += state.step(head)?.1;
        if done == steps || (cfg.eval_every > 0 && done % cfg.eval_every == 0) {
            record(&state);
        }
    }
    debug_assert_eq!(state.step, start + steps);
    Ok(TrainReport { state, trace, skipped })
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,loss,loss_img,loss_mask,loss_pose,holdout_geodesic_deg\n");
    for r in rows {
        out += &format!(
            "{},{},{},{},{},{}\n",
            r.step, r.loss.value, r.loss.img, r.loss.mask, r.loss.pose, r.holdout_geodesic_deg
        );
    }
    out
}
