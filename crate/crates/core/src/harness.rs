//! Benchmark engine: per-method evaluation over seeded synthetic suites,
//! summary statistics, sparse-reference averaging, the cost curve and the
//! detection re-ranking Monte Carlo. All aggregation runs in instance order,
//! so reports are identical for any thread count.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::chain::HeadParams;
use crate::detect::{rank_by_confidence, rank_proposals, Descriptor, Proposal, ProposalSet};
use crate::error::{Error, Result};
use crate::hypo::{build_grid, cost_model, score_hypotheses, wcv_macs, HypothesisGrid};
use crate::matching;
use crate::par;
use crate::so3::{average_rotations, geodesic_error_deg, sample_uniform_rotation, RotationMatrix};
use crate::synth::{generate_indexed, generate_scene, instance_rng, SynthConfig, SynthInstance};
use crate::wcv::{self, WeightCues, WeightMode, WeightParts};

/// Error recorded for a failed estimate.
pub const FAILURE_ERROR_DEG: f64 = 180.0;
pub const HISTOGRAM_BINS: usize = 18;
pub const HISTOGRAM_BIN_DEG: f64 = 10.0;
pub const ACC_THRESHOLD_DEG: f64 = 30.0;

const GRID_SEED_SALT: u64 = 0x6879_706f_6772_6964;
const SPARSE_SEED_SALT: u64 = 0x7370_6172_7365_7265;
const BOOTSTRAP_SEED_SALT: u64 = 0x626f_6f74_7374_7261;
const MAX_REDRAWS: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Wcv(WeightMode),
    Hypo(usize),
}

impl Method {
    pub fn parse(s: &str) -> Result<Method> {
        Ok(match s {
            "wcv" => Method::Wcv(WeightMode::Full),
            "no-weights" => Method::Wcv(WeightMode::Uniform),
            "mask-only" => Method::Wcv(WeightMode::MaskOnly),
            "objectness-only" => Method::Wcv(WeightMode::ObjectnessOnly),
            _ => {
                let n = s
                    .strip_prefix("hypo-")
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|n| *n > 0)
                    .ok_or_else(|| Error::ConfigInvalid(format!("unknown method `{s}`")))?;
                Method::Hypo(n)
            }
        })
    }

    pub fn name(&self) -> String {
        match self {
            Method::Wcv(WeightMode::Full) => "wcv".into(),
            Method::Wcv(WeightMode::Uniform) => "no-weights".into(),
            Method::Wcv(WeightMode::MaskOnly) => "mask-only".into(),
            Method::Wcv(WeightMode::ObjectnessOnly) => "objectness-only".into(),
            Method::Hypo(n) => format!("hypo-{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRecord {
    pub instance: u64,
    pub method: String,
    pub rotation_error_deg: f64,
    pub translation_error_deg: Option<f64>,
    pub mac_count: Option<u64>,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub count: usize,
    pub failures: usize,
    pub mean_error_deg: f64,
    pub median_error_deg: f64,
    /// 95% bootstrap interval of the mean error.
    pub mean_ci95: [f64; 2],
    pub acc30: f64,
    pub histogram: Vec<u64>,
    pub mac_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub method: String,
    pub n: usize,
    pub median_error_deg: f64,
    pub mac_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub instances: usize,
    pub voxels: usize,
    pub methods: Vec<MethodSummary>,
    pub cost: Vec<CostRow>,
}

impl RunReport {
    pub fn summary(&self, method: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }
}

#[derive(Debug, Clone)]
pub struct BenchOutput {
    pub report: RunReport,
    pub records: Vec<PairRecord>,
}

/// Matching and weight factors shared by every method on one instance.
struct Matched {
    aligned: Array2<f64>,
    parts: WeightParts,
}

fn match_instance(inst: &SynthInstance, params: &HeadParams) -> Result<Matched> {
    let scores = matching::score_matrix_from_voxels(inst.vq.view(), inst.vr.view())?;
    let assign = matching::softmax_rows(&scores, params.tau);
    let aligned = matching::apply_assignment(&assign, inst.coords().view())?;
    let mask = inst.scene.mask_3d();
    let obj = &inst.scene.objectness;
    let cues = WeightCues {
        mask_q: mask.view(),
        mask_r: mask.view(),
        obj_q: obj.view(),
        obj_r: obj.view(),
    };
    let parts = wcv::weight_parts(&assign, &cues, params.lambda)?;
    Ok(Matched { aligned, parts })
}

fn estimate(
    inst: &SynthInstance,
    matched: &Matched,
    method: Method,
    params: &HeadParams,
    grid: Option<&HypothesisGrid>,
) -> Result<RotationMatrix> {
    match method {
        Method::Wcv(mode) => {
            let w = matched.parts.combine(mode);
            let sol = wcv::solve_rotation(
                inst.coords().view(),
                matched.aligned.view(),
                w.as_slice().expect("owned"),
                params.center,
            )?;
            Ok(sol.rotation)
        }
        Method::Hypo(n) => {
            let grid = grid.ok_or_else(|| Error::ConfigInvalid(format!("no grid of size {n}")))?;
            let w = matched.parts.combine(WeightMode::Full);
            let res = score_hypotheses(
                grid,
                inst.coords().view(),
                matched.aligned.view(),
                w.as_slice().expect("owned"),
            )?;
            Ok(res.best)
        }
    }
}

fn method_macs(method: Method, voxels: usize) -> u64 {
    match method {
        Method::Wcv(_) => wcv_macs(voxels as u64),
        Method::Hypo(n) => cost_model(n as u64, voxels as u64).map(|c| c.mac_count).unwrap_or(0),
    }
}

/// Nested hypothesis grids: every size is a prefix of one seeded stream.
fn build_grids(methods: &[Method], seed: u64) -> Result<Vec<(usize, HypothesisGrid)>> {
    let max = methods
        .iter()
        .filter_map(|m| match m {
            Method::Hypo(n) => Some(*n),
            _ => None,
        })
        .max();
    let Some(max) = max else {
        return Ok(Vec::new());
    };
    let full = build_grid(max, seed ^ GRID_SEED_SALT)?;
    let mut out = Vec::new();
    for m in methods {
        if let Method::Hypo(n) = *m {
            out.push((n, HypothesisGrid::from_rotations(full.rotations()[..n].to_vec())?));
        }
    }
    Ok(out)
}

fn evaluate_instance(
    inst: &SynthInstance,
    methods: &[Method],
    params: &HeadParams,
    grids: &[(usize, HypothesisGrid)],
) -> Vec<PairRecord> {
    let matched = match_instance(inst, params);
    methods
        .iter()
        .map(|&method| {
            let grid = match method {
                Method::Hypo(n) => grids.iter().find(|(k, _)| *k == n).map(|(_, g)| g),
                _ => None,
            };
            let result = matched
                .as_ref()
                .map_err(|e| Error::DegenerateInput(e.to_string()))
                .and_then(|m| estimate(inst, m, method, params, grid));
            let (err, failed) = match result {
                Ok(r) => (geodesic_error_deg(&r, &inst.gt_rotation), false),
                Err(_) => (FAILURE_ERROR_DEG, true),
            };
            PairRecord {
                instance: inst.id,
                method: method.name(),
                rotation_error_deg: err,
                translation_error_deg: None,
                mac_count: Some(method_macs(method, inst.n_voxels())),
                failed,
            }
        })
        .collect()
}

/// Evaluates every method on the same `n_instances` seeded instances.
pub fn run_benchmark(
    methods: &[Method],
    n_instances: usize,
    synth: &SynthConfig,
    params: &HeadParams,
    seed: u64,
    bootstrap_samples: usize,
) -> Result<BenchOutput> {
    if methods.is_empty() {
        return Err(Error::ConfigInvalid("no methods selected".into()));
    }
    if n_instances == 0 {
        return Err(Error::ConfigInvalid("instance count must be at least 1".into()));
    }
    synth.validate()?;
    let grids = build_grids(methods, seed)?;
    let per_instance = par::map_range(n_instances, |i| {
        let inst = generate_indexed(synth, seed, i as u64)?;
        Ok(evaluate_instance(&inst, methods, params, &grids))
    });
    let mut records = Vec::with_capacity(n_instances * methods.len());
    for r in per_instance {
        records.extend(r?);
    }
    let voxels = synth.n_voxels();
    let summaries: Vec<MethodSummary> = methods
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let errors: Vec<f64> = records
                .iter()
                .filter(|r| r.method == m.name())
                .map(|r| r.rotation_error_deg)
                .collect();
            let failures = records.iter().filter(|r| r.method == m.name() && r.failed).count();
            summarize(
                &m.name(),
                &errors,
                failures,
                method_macs(*m, voxels),
                bootstrap_samples,
                seed ^ (k as u64),
            )
        })
        .collect();
    let cost = methods
        .iter()
        .zip(&summaries)
        .map(|(m, s)| CostRow {
            method: match m {
                Method::Hypo(_) => "hypo".into(),
                _ => m.name(),
            },
            n: match m {
                Method::Hypo(n) => *n,
                _ => 1,
            },
            median_error_deg: s.median_error_deg,
            mac_count: s.mac_count,
        })
        .collect();
    Ok(BenchOutput {
        report: RunReport {
            seed,
            instances: n_instances,
            voxels,
            methods: summaries,
            cost,
        },
        records,
    })
}

pub fn summarize(
    method: &str,
    errors: &[f64],
    failures: usize,
    mac_count: u64,
    bootstrap_samples: usize,
    seed: u64,
) -> MethodSummary {
    let ci = bootstrap_mean_ci(errors, bootstrap_samples, seed);
    MethodSummary {
        method: method.to_string(),
        count: errors.len(),
        failures,
        mean_error_deg: mean(errors),
        median_error_deg: median(errors),
        mean_ci95: [ci.0, ci.1],
        acc30: accuracy_at(errors, ACC_THRESHOLD_DEG),
        histogram: histogram(errors),
        mac_count,
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Counts in 10° bins over `[0, 180]`; 180° falls into the last bin.
pub fn histogram(errors: &[f64]) -> Vec<u64> {
    let mut bins = vec![0u64; HISTOGRAM_BINS];
    for &e in errors {
        let b = ((e / HISTOGRAM_BIN_DEG).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
        bins[b] += 1;
    }
    bins
}

/// Fraction of errors strictly below `threshold`.
pub fn accuracy_at(errors: &[f64], threshold: f64) -> f64 {
    if errors.is_empty() {
        return f64::NAN;
    }
    errors.iter().filter(|e| **e < threshold).count() as f64 / errors.len() as f64
}

/// Percentile bootstrap interval (2.5%, 97.5%) of the mean.
pub fn bootstrap_mean_ci(values: &[f64], samples: usize, seed: u64) -> (f64, f64) {
    if values.is_empty() || samples == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ BOOTSTRAP_SEED_SALT);
    let n = values.len();
    let mut means: Vec<f64> = (0..samples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let lo = ((0.025 * samples as f64).floor() as usize).min(samples - 1);
    let hi = ((0.975 * samples as f64).ceil() as usize).clamp(1, samples) - 1;
    (means[lo], means[hi])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparseRow {
    pub n_refs: usize,
    pub mean_error_deg: f64,
    pub median_error_deg: f64,
    pub mean_ci95: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparseReport {
    pub trials: usize,
    pub redrawn: u64,
    pub rows: Vec<SparseRow>,
}

/// Errors for `n = 1..=max_refs` references on one trial, or `None` when a
/// solve was degenerate.
fn sparse_trial(
    synth: &SynthConfig,
    params: &HeadParams,
    max_refs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Vec<f64>>> {
    let scene = generate_scene(synth, rng)?;
    let r_q = sample_uniform_rotation(rng);
    let vq = scene.render(&r_q, rng);
    let mask = scene.mask_3d();
    let cues = WeightCues {
        mask_q: mask.view(),
        mask_r: mask.view(),
        obj_q: scene.objectness.view(),
        obj_r: scene.objectness.view(),
    };
    let coords = scene.coords.coords();
    let mut estimates = Vec::with_capacity(max_refs);
    for _ in 0..max_refs {
        let r_r = sample_uniform_rotation(rng);
        let vr = scene.render(&r_r, rng);
        let solved = (|| -> Result<RotationMatrix> {
            let scores = matching::score_matrix_from_voxels(vq.view(), vr.view())?;
            let assign = matching::softmax_rows(&scores, params.tau);
            let aligned = matching::apply_assignment(&assign, coords.view())?;
            let w = wcv::weight_parts(&assign, &cues, params.lambda)?.combine(params.mode);
            let sol = wcv::solve_rotation(
                coords.view(),
                aligned.view(),
                w.as_slice().expect("owned"),
                params.center,
            )?;
            Ok(sol.rotation)
        })();
        match solved {
            Ok(delta) => estimates.push(delta * r_r),
            Err(e) if e.is_numerical() || matches!(e, Error::DegenerateInput(_) | Error::ZeroFeature { .. }) => {
                return Ok(None)
            }
            Err(e) => return Err(e),
        }
    }
    let mut errors = Vec::with_capacity(max_refs);
    for n in 1..=max_refs {
        match average_rotations(&estimates[..n]) {
            Ok(avg) => errors.push(geodesic_error_deg(&avg, &r_q)),
            Err(_) => return Ok(None),
        }
    }
    Ok(Some(errors))
}

/// Query rotation error when averaging `1..=max_refs` per-reference estimates.
pub fn run_sparse_refs(
    max_refs: usize,
    trials: usize,
    synth: &SynthConfig,
    params: &HeadParams,
    seed: u64,
    bootstrap_samples: usize,
) -> Result<SparseReport> {
    if max_refs == 0 || trials == 0 {
        return Err(Error::ConfigInvalid(
            "reference and trial counts must be at least 1".into(),
        ));
    }
    synth.validate()?;
    let per_trial = par::map_range(trials, |t| -> Result<(Vec<f64>, u64)> {
        for attempt in 0..MAX_REDRAWS {
            let mut rng = instance_rng(seed ^ SPARSE_SEED_SALT, ((t as u64) << 20) | attempt);
            if let Some(errors) = sparse_trial(synth, params, max_refs, &mut rng)? {
                return Ok((errors, attempt));
            }
        }
        Err(Error::DegenerateInput(format!(
            "trial {t} stayed degenerate after {MAX_REDRAWS} draws"
        )))
    });
    let mut table = vec![Vec::with_capacity(trials); max_refs];
    let mut redrawn = 0;
    for r in per_trial {
        let (errors, attempts) = r?;
        redrawn += attempts;
        for (k, e) in errors.into_iter().enumerate() {
            table[k].push(e);
        }
    }
    let rows = table
        .iter()
        .enumerate()
        .map(|(k, errs)| {
            let ci = bootstrap_mean_ci(errs, bootstrap_samples, seed ^ (k as u64));
            SparseRow {
                n_refs: k + 1,
                mean_error_deg: mean(errs),
                median_error_deg: median(errs),
                mean_ci95: [ci.0, ci.1],
            }
        })
        .collect();
    Ok(SparseReport { trials, redrawn, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostCurve {
    pub rows: Vec<CostRow>,
    /// Whether the baseline median errors are non-increasing in `n`.
    pub non_increasing: bool,
}

/// Baseline median error and MACs per grid size, followed by the WCV row.
pub fn run_cost_curve(
    sizes: &[usize],
    n_instances: usize,
    synth: &SynthConfig,
    params: &HeadParams,
    seed: u64,
) -> Result<CostCurve> {
    if sizes.is_empty() {
        return Err(Error::ConfigInvalid("no grid sizes given".into()));
    }
    let mut methods: Vec<Method> = sizes.iter().map(|&n| Method::Hypo(n)).collect();
    methods.push(Method::Wcv(params.mode));
    let out = run_benchmark(&methods, n_instances, synth, params, seed, 1)?;
    let mut rows = out.report.cost;
    if let Some(last) = rows.last_mut() {
        last.method = "wcv".into();
    }
    let baseline: Vec<&CostRow> = rows.iter().filter(|r| r.method == "hypo").collect();
    let mut order: Vec<&CostRow> = baseline.clone();
    order.sort_by_key(|r| r.n);
    let non_increasing = order.windows(2).all(|w| w[1].median_error_deg <= w[0].median_error_deg);
    Ok(CostCurve { rows, non_increasing })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionSuite {
    pub trials: usize,
    pub dim: usize,
    pub distractors: usize,
    /// Noise norm relative to the reference descriptor norm.
    pub noise: f64,
}

impl Default for DetectionSuite {
    fn default() -> Self {
        DetectionSuite {
            trials: 10_000,
            dim: 64,
            distractors: 9,
            noise: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectionReport {
    pub trials: usize,
    pub cosine_correct: usize,
    pub confidence_correct: usize,
}

impl DetectionReport {
    pub fn cosine_accuracy(&self) -> f64 {
        self.cosine_correct as f64 / self.trials as f64
    }

    pub fn confidence_accuracy(&self) -> f64 {
        self.confidence_correct as f64 / self.trials as f64
    }
}

fn gaussian(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// One proposal is a noisy, rescaled copy of the reference; the rest are
/// random. Detector confidences are uniform noise.
pub fn run_detection_trials(suite: &DetectionSuite, seed: u64) -> Result<DetectionReport> {
    if suite.trials == 0 || suite.dim == 0 {
        return Err(Error::ConfigInvalid(
            "detection suite needs trials and a descriptor width".into(),
        ));
    }
    let outcomes = par::map_range(suite.trials, |t| -> Result<(bool, bool)> {
        let mut rng = instance_rng(seed, t as u64);
        let reference = gaussian(suite.dim, &mut rng);
        let ref_norm = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
        let noise = gaussian(suite.dim, &mut rng);
        let noise_norm = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = rng.random_range(0.5..2.0);
        let copy: Vec<f64> = reference
            .iter()
            .zip(&noise)
            .map(|(r, n)| scale * (r + suite.noise * ref_norm * n / noise_norm))
            .collect();
        let mut descriptors: Vec<Vec<f64>> = (0..suite.distractors).map(|_| gaussian(suite.dim, &mut rng)).collect();
        let target = rng.random_range(0..=suite.distractors);
        descriptors.insert(target, copy);
        let mut scores: Vec<f64> = (0..descriptors.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        scores.shuffle(&mut rng);
        let proposals = descriptors
            .into_iter()
            .zip(scores)
            .map(|(descriptor, score)| Proposal {
                cx: 0.0,
                cy: 0.0,
                w: 1.0,
                h: 1.0,
                score,
                descriptor,
            })
            .collect();
        let set = ProposalSet::new(suite.dim, proposals)?;
        let (by_cos, _) = rank_proposals(&Descriptor::new(reference)?, &set)?;
        let by_conf = rank_by_confidence(&set)?;
        Ok((by_cos == target, by_conf == target))
    });
    let mut report = DetectionReport {
        trials: suite.trials,
        cosine_correct: 0,
        confidence_correct: 0,
    };
    for o in outcomes {
        let (a, b) = o?;
        report.cosine_correct += a as usize;
        report.confidence_correct += b as usize;
    }
    Ok(report)
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

pub fn records_csv(records: &[PairRecord]) -> String {
    let mut out = String::from("instance,method,rotation_error_deg,translation_error_deg,mac_count,failed\n");
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.instance,
            r.method,
            r.rotation_error_deg,
            opt(&r.translation_error_deg),
            opt(&r.mac_count),
            r.failed
        )
        .expect("writing to a String");
    }
    out
}

pub fn histogram_csv(report: &RunReport) -> String {
    let mut out = String::from("method,bin_start_deg,bin_end_deg,count\n");
    for m in &report.methods {
        for (b, c) in m.histogram.iter().enumerate() {
            let lo = b as f64 * HISTOGRAM_BIN_DEG;
            writeln!(out, "{},{},{},{}", m.method, lo, lo + HISTOGRAM_BIN_DEG, c).expect("writing to a String");
        }
    }
    out
}

pub fn cost_csv(rows: &[CostRow]) -> String {
    let mut out = String::from("method,n,median_error_deg,mac_count\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.method, r.n, r.median_error_deg, r.mac_count).expect("writing to a String");
    }
    out
}

pub fn sparse_csv(report: &SparseReport) -> String {
    let mut out = String::from("n_refs,mean_error_deg,median_error_deg,ci_low,ci_high\n");
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.n_refs, r.mean_error_deg, r.median_error_deg, r.mean_ci95[0], r.mean_ci95[1]
        )
        .expect("writing to a String");
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `records.csv` and `histogram.csv` under `dir`.
pub fn write_benchmark(dir: &Path, out: &BenchOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(&out.report).map_err(|e| Error::Json {
        path: dir.join("report.json"),
        reason: e.to_string(),
    })?;
    write_file(&dir.join("report.json"), &(json + "\n"))?;
    write_file(&dir.join("records.csv"), &records_csv(&out.records))?;
    write_file(&dir.join("histogram.csv"), &histogram_csv(&out.report))
}
