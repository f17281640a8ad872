//! `voxmatch`: benchmark, solve and train from the command line.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::{Matrix3, Vector3};

use voxmatch_core::chain::{self, replicate_flat, HeadInputs, HeadParams};
use voxmatch_core::config::{load_config, Config};
use voxmatch_core::detect::{rank_proposals, translation_angular_error_deg, translation_from_box};
use voxmatch_core::harness::{self, Method};
use voxmatch_core::io::{read_json, read_mask, read_voxf, write_json, IntrinsicsFile, PoseFile, ProposalFile};
use voxmatch_core::synth::SynthConfig;
use voxmatch_core::voxelgrid::{make_coords, FeatureVolume, ObjectnessMap};
use voxmatch_core::wcv::WeightMode;
use voxmatch_toy::{checkpoint, train};

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<voxmatch_core::Error> for CliError {
    fn from(e: voxmatch_core::Error) -> Self {
        use voxmatch_core::Error as E;
        match e {
            E::UnknownKey { .. } | E::InvalidValue { .. } | E::ConfigInvalid(_) => CliError::Usage(e.to_string()),
            e if e.is_numerical() => CliError::Numerical(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<voxmatch_toy::ToyError> for CliError {
    fn from(e: voxmatch_toy::ToyError) -> Self {
        match e {
            voxmatch_toy::ToyError::Core(inner) => inner.into(),
            voxmatch_toy::ToyError::Config(m) => CliError::Usage(m),
            e if e.is_numerical() => CliError::Numerical(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "voxmatch",
    version,
    about = "Relative rotation by weighted closest-voxel matching"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat key=value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => Config::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every configured method on the synthetic suite.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Output directory for report.json, records.csv and histogram.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Solve the relative rotation between two VOXF volumes.
    Solve {
        #[arg(long)]
        vq: PathBuf,
        #[arg(long)]
        vr: PathBuf,
        /// Query and reference H×W masks (VOXF, one channel, one slice).
        #[arg(long, num_args = 2, required = true, value_names = ["MQ", "MR"])]
        masks: Vec<PathBuf>,
        /// Query and reference objectness (VOXF, one channel). Constant 1 when omitted.
        #[arg(long, num_args = 2, value_names = ["OQ", "OR"])]
        objectness: Option<Vec<PathBuf>>,
        /// wcv, no-weights, mask-only or objectness-only.
        #[arg(long, default_value = "wcv")]
        weights: String,
        /// Subtract weighted centroids before the solve.
        #[arg(long)]
        center: bool,
        /// Intrinsics JSON for the translation; identity when omitted.
        #[arg(long)]
        intrinsics: Option<PathBuf>,
        /// Query box centre in pixels, `CX,CY`. Translation is zero when omitted.
        #[arg(long, value_delimiter = ',')]
        box_center: Option<Vec<f64>>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hypothesis-grid baseline cost curve as CSV.
    Hypo {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        instances: Option<usize>,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Error against the number of averaged references, as CSV.
    Sparse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        max_refs: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the toy encoder/decoder; writes trace.csv and model.toym.
    TrainToy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pick the proposal matching the reference and back-project its centre.
    DetectSelect {
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        /// Pose JSON whose `T` is the ground-truth translation.
        #[arg(long)]
        gt_pose: Option<PathBuf>,
    },
}

fn head_params(cfg: &Config, mode: WeightMode, center: bool) -> HeadParams {
    HeadParams {
        tau: cfg.tau,
        lambda: cfg.lambda,
        mode,
        center,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn bench(common: &Common, out: Option<PathBuf>, instances: Option<usize>) -> Result<()> {
    let cfg = common.load()?;
    let methods = cfg
        .methods
        .iter()
        .map(|m| Method::parse(m))
        .collect::<voxmatch_core::Result<Vec<_>>>()?;
    let n = instances.unwrap_or(cfg.instances);
    let params = head_params(&cfg, WeightMode::Full, false);
    let result = harness::run_benchmark(
        &methods,
        n,
        &SynthConfig::from_config(&cfg),
        &params,
        cfg.seed,
        cfg.bootstrap,
    )?;
    let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    harness::write_benchmark(&dir, &result)?;
    for m in &result.report.methods {
        println!(
            "{:<16} mean {:>8.3}  median {:>8.3}  acc30 {:.3}  failures {}",
            m.method, m.mean_error_deg, m.median_error_deg, m.acc30, m.failures
        );
    }
    Ok(())
}

fn parse_weights(name: &str) -> Result<WeightMode> {
    match Method::parse(name) {
        Ok(Method::Wcv(mode)) => Ok(mode),
        _ => Err(CliError::Usage(format!("unknown weight mode `{name}`"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn solve(
    vq: &Path,
    vr: &Path,
    masks: &[PathBuf],
    objectness: Option<&[PathBuf]>,
    weights: &str,
    center: bool,
    intrinsics: Option<&Path>,
    box_center: Option<&[f64]>,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => Config::default(),
    };
    let params = head_params(&cfg, parse_weights(weights)?, center);
    let vq = FeatureVolume::new(read_voxf(vq)?)?;
    let vr = FeatureVolume::new(read_voxf(vr)?)?;
    let (c, d, h, w) = vq.dim();
    if vr.dim() != (c, d, h, w) {
        return Err(CliError::Data(format!(
            "volume shapes differ: {:?} vs {:?}",
            vq.dim(),
            vr.dim()
        )));
    }
    let mask = |p: &Path| -> Result<ndarray::Array1<f64>> {
        let m = read_mask(p)?;
        if m.dim() != (h, w) {
            return Err(CliError::Data(format!(
                "{}: mask is {:?}, volume grid is {h}×{w}",
                p.display(),
                m.dim()
            )));
        }
        Ok(replicate_flat(
            m.iter().copied().collect::<ndarray::Array1<f64>>().view(),
            d,
        ))
    };
    let (mq, mr) = (mask(&masks[0])?, mask(&masks[1])?);
    let (oq, or) = match objectness {
        Some(paths) => {
            let read = |p: &Path| -> Result<ndarray::Array1<f64>> {
                let o = ObjectnessMap::new(read_voxf(p)?)?;
                if o.data().dim() != (1, d, h, w) {
                    return Err(CliError::Data(format!(
                        "{}: objectness shape {:?}",
                        p.display(),
                        o.data().dim()
                    )));
                }
                Ok(o.flatten())
            };
            (read(&paths[0])?, read(&paths[1])?)
        }
        None => (ndarray::Array1::ones(d * h * w), ndarray::Array1::ones(d * h * w)),
    };
    let coords = make_coords(d, h, w);
    let (xq, xr) = (vq.voxel_matrix(), vr.voxel_matrix());
    let inputs = HeadInputs {
        vq: xq.view(),
        vr: xr.view(),
        mask_q: mq.view(),
        mask_r: mr.view(),
        obj_q: oq.view(),
        obj_r: or.view(),
        coords: coords.coords().view(),
    };
    let fwd = chain::forward(&inputs, &params)?;
    let k = match intrinsics {
        Some(p) => Matrix3::from_row_slice(&read_json::<IntrinsicsFile>(p)?.k),
        None => Matrix3::identity(),
    };
    let t = match box_center {
        Some(&[cx, cy]) => translation_from_box(cx, cy, &k)?,
        Some(_) => return Err(CliError::Usage("--box-center takes CX,CY".into())),
        None => Vector3::zeros(),
    };
    write_json(out, &PoseFile::new(&fwd.rotation(), &t, &k))?;
    println!("residual {:.6e}", fwd.solution.residual);
    Ok(())
}

fn hypo(common: &Common, sizes: Option<Vec<usize>>, instances: Option<usize>, out: Option<&Path>) -> Result<()> {
    let cfg = common.load()?;
    let sizes = sizes.unwrap_or_else(|| cfg.hypo_sizes.clone());
    let n = instances.unwrap_or(cfg.instances);
    let params = head_params(&cfg, WeightMode::Full, false);
    let curve = harness::run_cost_curve(&sizes, n, &SynthConfig::from_config(&cfg), &params, cfg.seed)?;
    emit(out, &harness::cost_csv(&curve.rows))
}

fn sparse(common: &Common, max_refs: Option<usize>, trials: Option<usize>, out: Option<&Path>) -> Result<()> {
    let cfg = common.load()?;
    let params = head_params(&cfg, WeightMode::Full, false);
    let report = harness::run_sparse_refs(
        max_refs.unwrap_or(cfg.max_refs),
        trials.unwrap_or(cfg.sparse_trials),
        &SynthConfig::from_config(&cfg),
        &params,
        cfg.seed,
        cfg.bootstrap,
    )?;
    emit(out, &harness::sparse_csv(&report))
}

fn train_toy(common: &Common, steps: Option<usize>, out: Option<PathBuf>) -> Result<()> {
    let cfg = common.load()?;
    let mut toy = cfg.toy.clone();
    if let Some(s) = common.seed {
        toy.seed = s;
    }
    if let Some(s) = steps {
        toy.steps = s;
    }
    let params = head_params(&cfg, WeightMode::Full, false);
    let report = train::train_toy(&toy, &params)?;
    let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    write_text(&dir.join("trace.csv"), &train::trace_csv(&report.trace))?;
    checkpoint::save(dir.join("model.toym"), &report.state.model)?;
    println!(
        "holdout error {:.3} -> {:.3} deg over {} steps ({} items skipped)",
        report.initial_error(),
        report.final_error(),
        toy.steps,
        report.skipped
    );
    Ok(())
}

fn detect_select(proposals: &Path, intrinsics: &Path, gt_pose: Option<&Path>) -> Result<()> {
    let file: ProposalFile = read_json(proposals)?;
    let query = file.query.clone();
    let (reference, set) = file.into_parts()?;
    let k = Matrix3::from_row_slice(&read_json::<IntrinsicsFile>(intrinsics)?.k);
    let (index, cosine) = rank_proposals(&reference, &set)?;
    let p = &set.proposals()[index];
    let t = translation_from_box(p.cx, p.cy, &k)?;
    let error = match gt_pose {
        Some(path) => Some(translation_angular_error_deg(
            &t,
            &read_json::<PoseFile>(path)?.translation(),
        )?),
        None => None,
    };
    let report = serde_json::json!({
        "query": query,
        "selected": index,
        "cosine": cosine,
        "box": { "cx": p.cx, "cy": p.cy, "w": p.w, "h": p.h },
        "translation": [t.x, t.y, t.z],
        "translation_error_deg": error,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("JSON values serialize")
    );
    Ok(())
}

/// Applies `VOXMATCH_THREADS` (0 or unset: all cores).
fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("VOXMATCH_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("VOXMATCH_THREADS must be a non-negative integer, got `{raw}`")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot configure threads: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Bench { common, out, instances } => bench(&common, out, instances),
        Command::Solve {
            vq,
            vr,
            masks,
            objectness,
            weights,
            center,
            intrinsics,
            box_center,
            config,
            out,
        } => solve(
            &vq,
            &vr,
            &masks,
            objectness.as_deref(),
            &weights,
            center,
            intrinsics.as_deref(),
            box_center.as_deref(),
            config.as_deref(),
            &out,
        ),
        Command::Hypo {
            common,
            sizes,
            instances,
            out,
        } => hypo(&common, sizes, instances, out.as_deref()),
        Command::Sparse {
            common,
            max_refs,
            trials,
            out,
        } => sparse(&common, max_refs, trials, out.as_deref()),
        Command::TrainToy { common, steps, out } => train_toy(&common, steps, out),
        Command::DetectSelect {
            proposals,
            intrinsics,
            gt_pose,
        } => detect_select(&proposals, &intrinsics, gt_pose.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
