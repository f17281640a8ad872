//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! per criterion and exits non-zero if any criterion fails. Built without the
//! libtest harness so the lines are never captured.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3};
use ndarray::Array1;

use voxmatch_core::chain::{self, HeadInputs, HeadParams};
use voxmatch_core::config::{Config, ToyConfig};
use voxmatch_core::detect::{translation_angular_error_deg, translation_from_box};
use voxmatch_core::harness::{
    run_benchmark, run_cost_curve, run_detection_trials, run_sparse_refs, DetectionSuite, Method,
};
use voxmatch_core::hypo::{build_grid, cost_model, grid_energies, wcv_macs};
use voxmatch_core::io::{write_json, write_voxf, IntrinsicsFile};
use voxmatch_core::so3::{geodesic_error_deg, rot_to_6d, sample_uniform_rotation, six_d_to_rot, RotationMatrix};
use voxmatch_core::synth::{generate_indexed, instance_rng, SynthConfig};
use voxmatch_core::voxelgrid::FeatureVolume;
use voxmatch_core::wcv::{pose_loss, solve_rotation, weighted_energy};
use voxmatch_core::Error;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Runs `f` on one worker thread.
fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .expect("pool")
            .install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        f()
    }
}

fn default_suite(outliers: f64) -> SynthConfig {
    SynthConfig {
        d: 8,
        h: 8,
        w: 8,
        feat_dim: 16,
        sigma: 0.1,
        outlier_fraction: outliers,
    }
}

fn inputs<'a>(inst: &'a voxmatch_core::synth::SynthInstance, mask: &'a Array1<f64>) -> HeadInputs<'a> {
    HeadInputs {
        vq: inst.vq.view(),
        vr: inst.vr.view(),
        mask_q: mask.view(),
        mask_r: mask.view(),
        obj_q: inst.scene.objectness.view(),
        obj_r: inst.scene.objectness.view(),
        coords: inst.coords().view(),
    }
}

fn exact_recovery() -> Outcome {
    let cfg = SynthConfig {
        sigma: 0.0,
        outlier_fraction: 0.0,
        ..default_suite(0.0)
    };
    let start = Instant::now();
    let worst = single_threaded(|| {
        let mut worst: f64 = 0.0;
        for id in 0..500 {
            let inst = generate_indexed(&cfg, 1, id).expect("instance");
            let xq = inst.gt_matched_coords();
            let w = vec![0.5; inst.n_voxels()];
            let sol = solve_rotation(inst.coords().view(), xq.view(), &w, false).expect("solve");
            worst = worst.max(geodesic_error_deg(&sol.rotation, &inst.gt_rotation));
        }
        worst
    });
    let elapsed = start.elapsed();
    check(
        worst < 1e-6 && elapsed < Duration::from_secs(5),
        format!(
            "500 instances, max error {worst:.3e} deg, {:.2} s single-threaded",
            elapsed.as_secs_f64()
        ),
    )
}

fn oracle_optimality() -> Outcome {
    let start = Instant::now();
    let cfg = default_suite(0.3);
    let grid = build_grid(100_000, 0x0c1e).expect("grid");
    let params = HeadParams::default();
    let mut worst_gap = f64::NEG_INFINITY;
    let mut spot_gap = f64::NEG_INFINITY;
    for id in 0..100 {
        let inst = generate_indexed(&cfg, 2, id).expect("instance");
        assert!(inst.n_voxels() <= 512);
        let mask = inst.scene.mask_3d();
        let fwd = chain::forward(&inputs(&inst, &mask), &params).expect("forward");
        let w = fwd.weights.as_slice().expect("owned");
        let (xr, xq) = (inst.coords().view(), fwd.aligned.view());
        let e = weighted_energy(&fwd.solution.rotation, xr, xq, w);
        let energies = grid_energies(&grid, xr, xq, w).expect("energies");
        let best = energies.iter().copied().fold(f64::INFINITY, f64::min);
        worst_gap = worst_gap.max(e - best);
        // Direct sums on a slice of the grid guard the expanded form.
        for r in grid.rotations().iter().step_by(997) {
            spot_gap = spot_gap.max(e - weighted_energy(r, xr, xq, w));
        }
    }
    let elapsed = start.elapsed();
    check(
        worst_gap <= 1e-9 && spot_gap <= 1e-9 && elapsed < Duration::from_secs(120),
        format!(
            "100 instances x 1e5 rotations, max E(wcv) - min E(grid) = {worst_gap:.3e}, {:.1} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn gradient_suite() -> Outcome {
    use rand::Rng;
    let params = HeadParams::default();
    let cfg = SynthConfig {
        d: 2,
        h: 3,
        w: 3,
        feat_dim: 6,
        sigma: 0.3,
        outlier_fraction: 0.3,
    };
    let rel = |a: &[f64], b: &[f64]| {
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-12)
    };
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    let mut id = 0;
    while checked < 60 {
        let inst = generate_indexed(&cfg, 3, id).expect("instance");
        let mut rng = instance_rng(33, id);
        id += 1;
        let n = inst.n_voxels();
        let mut vq = inst.vq.clone();
        let mut vr = inst.vr.clone();
        let mut cues: Vec<Array1<f64>> = (0..4)
            .map(|_| Array1::from_shape_fn(n, |_| rng.random_range(0.05..0.95)))
            .collect();
        let target = sample_uniform_rotation(&mut rng);
        let coords = inst.coords().clone();
        let loss = |vq: &ndarray::Array2<f64>, vr: &ndarray::Array2<f64>, c: &[Array1<f64>]| -> f64 {
            let inp = HeadInputs {
                vq: vq.view(),
                vr: vr.view(),
                mask_q: c[0].view(),
                mask_r: c[1].view(),
                obj_q: c[2].view(),
                obj_r: c[3].view(),
                coords: coords.view(),
            };
            pose_loss(&chain::forward(&inp, &params).expect("forward").rotation(), &target)
        };
        let inp = HeadInputs {
            vq: vq.view(),
            vr: vr.view(),
            mask_q: cues[0].view(),
            mask_r: cues[1].view(),
            obj_q: cues[2].view(),
            obj_r: cues[3].view(),
            coords: coords.view(),
        };
        let g = match chain::pose_loss_and_grads(&inp, &params, &target) {
            Ok((_, _, g)) => g,
            Err(Error::NearDegenerateSvd { .. }) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(format!("instance {id}: {e}")),
        };
        let h = 1e-6;
        let mut fd_vq = Vec::new();
        for k in 0..vq.len() {
            let orig = vq.as_slice().unwrap()[k];
            vq.as_slice_mut().unwrap()[k] = orig + h;
            let up = loss(&vq, &vr, &cues);
            vq.as_slice_mut().unwrap()[k] = orig - h;
            let down = loss(&vq, &vr, &cues);
            vq.as_slice_mut().unwrap()[k] = orig;
            fd_vq.push((up - down) / (2.0 * h));
        }
        let mut fd_vr = Vec::new();
        for k in 0..vr.len() {
            let orig = vr.as_slice().unwrap()[k];
            vr.as_slice_mut().unwrap()[k] = orig + h;
            let up = loss(&vq, &vr, &cues);
            vr.as_slice_mut().unwrap()[k] = orig - h;
            let down = loss(&vq, &vr, &cues);
            vr.as_slice_mut().unwrap()[k] = orig;
            fd_vr.push((up - down) / (2.0 * h));
        }
        let mut fd_cues = vec![Vec::new(); 4];
        for (c, out) in fd_cues.iter_mut().enumerate() {
            for k in 0..n {
                let orig = cues[c][k];
                cues[c][k] = orig + h;
                let up = loss(&vq, &vr, &cues);
                cues[c][k] = orig - h;
                let down = loss(&vq, &vr, &cues);
                cues[c][k] = orig;
                out.push((up - down) / (2.0 * h));
            }
        }
        let analytic = [
            g.vq.iter().copied().collect::<Vec<_>>(),
            g.vr.iter().copied().collect(),
            g.mask_q.to_vec(),
            g.mask_r.to_vec(),
            g.obj_q.to_vec(),
            g.obj_r.to_vec(),
        ];
        let numeric = [&fd_vq, &fd_vr, &fd_cues[0], &fd_cues[1], &fd_cues[2], &fd_cues[3]];
        for (a, f) in analytic.iter().zip(numeric) {
            worst = worst.max(rel(a, f));
        }
        checked += 1;
    }
    check(
        worst < 1e-3,
        format!("{checked} instances, max relative error {worst:.2e}, {skipped} near-degenerate skipped"),
    )
}

fn ablation_ordering() -> Outcome {
    let methods = ["no-weights", "mask-only", "objectness-only", "wcv"].map(|m| Method::parse(m).unwrap());
    let out = run_benchmark(&methods, 500, &default_suite(0.3), &HeadParams::default(), 0, 1000).expect("bench");
    let s = |m: &str| out.report.summary(m).expect("method present").clone();
    let (none, mask, obj, full) = (s("no-weights"), s("mask-only"), s("objectness-only"), s("wcv"));
    let ordered = none.mean_error_deg > mask.mean_error_deg
        && none.mean_error_deg > obj.mean_error_deg
        && mask.mean_error_deg >= full.mean_error_deg
        && obj.mean_error_deg >= full.mean_error_deg;
    let separated = [&mask, &obj, &full].iter().all(|m| none.mean_ci95[0] > m.mean_ci95[1]);
    let fmt = |m: &voxmatch_core::harness::MethodSummary| {
        format!(
            "{} {:.2} [{:.2}, {:.2}]",
            m.method, m.mean_error_deg, m.mean_ci95[0], m.mean_ci95[1]
        )
    };
    check(
        ordered && separated,
        format!(
            "500 instances: {}; {}; {}; {}",
            fmt(&none),
            fmt(&mask),
            fmt(&obj),
            fmt(&full)
        ),
    )
}

fn sparse_trend() -> Outcome {
    let report = run_sparse_refs(7, 100, &default_suite(0.3), &HeadParams::default(), 0, 1000).expect("sparse");
    let m: Vec<f64> = report.rows.iter().map(|r| r.mean_error_deg).collect();
    let strict = m[..5].windows(2).all(|w| w[1] < w[0]);
    let within_noise = report.rows.windows(2).all(|w| w[1].mean_error_deg <= w[0].mean_ci95[1]);
    let means: Vec<String> = m.iter().map(|v| format!("{v:.2}")).collect();
    check(
        strict && within_noise,
        format!(
            "100 trials, mean error for 1..7 refs: {} (redrawn {})",
            means.join(" > "),
            report.redrawn
        ),
    )
}

fn cost_tradeoff() -> Outcome {
    let sizes = [1000, 10_000, 100_000];
    let params = HeadParams::default();
    let describe = |rows: &[voxmatch_core::harness::CostRow]| {
        rows.iter()
            .map(|r| format!("{}-{} {:.2}", r.method, r.n, r.median_error_deg))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let curve = run_cost_curve(&sizes, 40, &default_suite(0.0), &params, 0).expect("curve");
    let med = |n: usize| {
        curve
            .rows
            .iter()
            .find(|r| r.method == "hypo" && r.n == n)
            .unwrap()
            .median_error_deg
    };
    let wcv = curve.rows.iter().find(|r| r.method == "wcv").unwrap();
    let voxels = 512;
    let macs_1k = cost_model(1000, voxels).unwrap().mac_count;
    let ok = med(100_000) < med(10_000)
        && med(10_000) < med(1000)
        && wcv_macs(voxels) * 100 < macs_1k
        && wcv.mac_count == wcv_macs(voxels)
        && wcv.median_error_deg <= med(10_000);
    let outliers = run_cost_curve(&sizes, 40, &default_suite(0.3), &params, 0).expect("curve");
    check(
        ok,
        format!(
            "outlier-free suite, 40 instances: {}; WCV {} MACs vs {} at n=1000 (30%-outlier suite, informational: {})",
            describe(&curve.rows),
            wcv_macs(voxels),
            macs_1k,
            describe(&outliers.rows)
        ),
    )
}

fn rotation_math() -> Outcome {
    let mut rng = instance_rng(7, 0);
    let mut roundtrip: f64 = 0.0;
    for _ in 0..10_000 {
        let r = sample_uniform_rotation(&mut rng);
        roundtrip = roundtrip.max(geodesic_error_deg(&six_d_to_rot(&rot_to_6d(&r)).unwrap(), &r));
    }
    let mut identity_err: f64 = 0.0;
    let mut ninety_err: f64 = 0.0;
    let mut half_err: f64 = 0.0;
    for _ in 0..1000 {
        let r = sample_uniform_rotation(&mut rng);
        let axis = sample_uniform_rotation(&mut rng).apply(&Vector3::x());
        identity_err = identity_err.max(geodesic_error_deg(&r, &r));
        let q90 = r * RotationMatrix::from_axis_angle(&axis, std::f64::consts::FRAC_PI_2);
        ninety_err = ninety_err.max((geodesic_error_deg(&r, &q90) - 90.0).abs());
        let q180 = RotationMatrix::from_axis_angle(&axis, std::f64::consts::PI) * r;
        half_err = half_err.max((geodesic_error_deg(&r, &q180) - 180.0).abs());
    }
    let mut angles: Vec<f64> = (0..100_000)
        .map(|_| geodesic_error_deg(&sample_uniform_rotation(&mut rng), &RotationMatrix::identity()).to_radians())
        .collect();
    angles.sort_by(f64::total_cmp);
    let n = angles.len() as f64;
    let ks = angles
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let f = (t - t.sin()) / std::f64::consts::PI;
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    check(
        roundtrip < 1e-8 && identity_err <= 1e-9 && ninety_err <= 1e-9 && half_err <= 1e-9 && ks < 0.01,
        format!(
            "6D roundtrip {roundtrip:.1e} deg; identity/90/180 errors {identity_err:.1e}/{ninety_err:.1e}/{half_err:.1e}; Haar KS distance {ks:.4}"
        ),
    )
}

fn detection() -> Outcome {
    use rand::Rng;
    let report = run_detection_trials(&DetectionSuite::default(), 0).expect("trials");
    let mut rng = instance_rng(8, 0);
    let mut loop_err: f64 = 0.0;
    let mut sym_err: f64 = 0.0;
    let mut scale_err: f64 = 0.0;
    for _ in 0..10_000 {
        let f = rng.random_range(200.0..1500.0);
        let k = Matrix3::new(
            f,
            rng.random_range(-2.0..2.0),
            rng.random_range(100.0..700.0),
            0.0,
            f * rng.random_range(0.8..1.2),
            rng.random_range(100.0..500.0),
            0.0,
            0.0,
            1.0,
        );
        let x = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(0.5..10.0),
        );
        let p = k * x / x.z;
        let t = translation_from_box(p.x, p.y, &k).unwrap();
        loop_err = loop_err.max(t.normalize().dot(&x.normalize()).clamp(-1.0, 1.0).acos());
        let y = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        let e = translation_angular_error_deg(&x, &y).unwrap();
        sym_err = sym_err.max((e - translation_angular_error_deg(&y, &x).unwrap()).abs());
        let (a, b) = (rng.random_range(1e-3..1e3), rng.random_range(1e-3..1e3));
        scale_err = scale_err.max((e - translation_angular_error_deg(&(x * a), &(y * b)).unwrap()).abs());
    }
    check(
        report.cosine_accuracy() >= 0.99 && loop_err < 1e-6 && sym_err <= 1e-9 && scale_err <= 1e-9,
        format!(
            "re-ranking {:.4} over {} trials (confidence only {:.4}); projection loop {loop_err:.1e} rad; symmetry {sym_err:.1e}, scale {scale_err:.1e} deg",
            report.cosine_accuracy(),
            report.trials,
            report.confidence_accuracy()
        ),
    )
}

fn toy_training() -> Outcome {
    let cfg = ToyConfig::default();
    let head = HeadParams::default();
    let start = Instant::now();
    let first = single_threaded(|| voxmatch_toy::train_toy(&cfg, &head)).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let second = single_threaded(|| voxmatch_toy::train_toy(&cfg, &head)).map_err(|e| e.to_string())?;
    let (a, b) = (first.initial_error(), first.final_error());
    let same = first.trace == second.trace && first.state.model.params() == second.state.model.params();
    check(
        b < 0.5 * a && same && cfg.steps <= 2000 && elapsed < Duration::from_secs(600),
        format!(
            "held-out error {a:.2} -> {b:.2} deg in {} steps, {:.1} s single-threaded, rerun identical: {same}",
            cfg.steps,
            elapsed.as_secs_f64()
        ),
    )
}

fn run_cli(args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_voxmatch"))
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let d = dir.path();
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();
    let cfg = Config {
        instances: 40,
        bootstrap: 200,
        sparse_trials: 10,
        toy: ToyConfig {
            steps: 30,
            holdout: 4,
            eval_every: 10,
            ..ToyConfig::default()
        },
        ..Config::default()
    };
    std::fs::write(d.join("cfg.txt"), cfg.to_text()).unwrap();

    let inst = generate_indexed(&default_suite(0.3), 5, 0).unwrap();
    let vol = |m| FeatureVolume::from_voxel_matrix(m, 8, 8, 8).unwrap().data().clone();
    write_voxf(d.join("vq.voxf"), &vol(&inst.vq)).unwrap();
    write_voxf(d.join("vr.voxf"), &vol(&inst.vr)).unwrap();
    write_voxf(
        d.join("m.voxf"),
        &inst.scene.mask.clone().into_shape_with_order((1, 1, 8, 8)).unwrap(),
    )
    .unwrap();
    let obj = inst
        .scene
        .objectness
        .clone()
        .into_shape_with_order((1, 8, 8, 8))
        .unwrap();
    write_voxf(d.join("o.voxf"), &obj).unwrap();
    write_json(
        d.join("k.json"),
        &IntrinsicsFile {
            k: [500.0, 0.0, 320.0, 0.0, 500.0, 240.0, 0.0, 0.0, 1.0],
        },
    )
    .unwrap();
    std::fs::write(
        d.join("props.json"),
        r#"{"query":"q","C_d":3,"reference_descriptor":[1,0.2,0],"proposals":[
            {"cx":10,"cy":20,"w":5,"h":5,"score":0.9,"descriptor":[0,1,0]},
            {"cx":300,"cy":200,"w":8,"h":9,"score":0.4,"descriptor":[1,0.1,0.1]}]}"#,
    )
    .unwrap();

    let mut compared = 0;
    let mut mismatched = Vec::new();
    for run in ["a", "b"] {
        let out = |name: &str| p(&format!("{run}_{name}"));
        let stdout = [
            run_cli(&[
                "bench",
                "--config",
                &p("cfg.txt"),
                "--seed",
                "3",
                "--out",
                &out("bench"),
            ]),
            run_cli(&[
                "hypo",
                "--config",
                &p("cfg.txt"),
                "--seed",
                "3",
                "--sizes",
                "100,1000",
                "--instances",
                "10",
                "--out",
                &out("hypo.csv"),
            ]),
            run_cli(&[
                "sparse",
                "--config",
                &p("cfg.txt"),
                "--seed",
                "3",
                "--max-refs",
                "4",
                "--out",
                &out("sparse.csv"),
            ]),
            run_cli(&[
                "train-toy",
                "--config",
                &p("cfg.txt"),
                "--seed",
                "3",
                "--out",
                &out("toy"),
            ]),
            run_cli(&[
                "solve",
                "--vq",
                &p("vq.voxf"),
                "--vr",
                &p("vr.voxf"),
                "--masks",
                &p("m.voxf"),
                &p("m.voxf"),
                "--objectness",
                &p("o.voxf"),
                &p("o.voxf"),
                "--config",
                &p("cfg.txt"),
                "--out",
                &out("pose.json"),
            ]),
            run_cli(&[
                "detect-select",
                "--proposals",
                &p("props.json"),
                "--intrinsics",
                &p("k.json"),
            ]),
        ];
        std::fs::write(out("stdout.txt"), stdout.concat()).unwrap();
    }
    let files = [
        "bench/report.json",
        "bench/records.csv",
        "bench/histogram.csv",
        "hypo.csv",
        "sparse.csv",
        "toy/trace.csv",
        "toy/model.toym",
        "pose.json",
        "stdout.txt",
    ];
    for f in files {
        let a = std::fs::read(d.join(format!("a_{f}"))).unwrap();
        let b = std::fs::read(d.join(format!("b_{f}"))).unwrap();
        compared += 1;
        if a != b || a.is_empty() {
            mismatched.push(f);
        }
    }
    check(
        mismatched.is_empty(),
        format!("{compared} outputs of 6 subcommands compared over two invocations, mismatched: {mismatched:?}"),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("exact recovery", exact_recovery),
        ("oracle optimality", oracle_optimality),
        ("gradient suite", gradient_suite),
        ("ablation ordering", ablation_ordering),
        ("sparse-reference trend", sparse_trend),
        ("cost/accuracy tradeoff", cost_tradeoff),
        ("rotation math", rotation_math),
        ("detection re-ranking", detection),
        ("toy training", toy_training),
        ("reproducibility", reproducibility),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                println!("FAIL {:>2} {name}: {detail}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
