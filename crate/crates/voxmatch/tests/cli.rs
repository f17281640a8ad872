use std::path::Path;
use std::process::{Command, Output};

use ndarray::Array4;

use voxmatch_core::io::{read_json, write_json, write_voxf, IntrinsicsFile, PoseFile};
use voxmatch_core::so3::{geodesic_error_deg, RotationMatrix};
use voxmatch_core::synth::{generate_indexed, SynthConfig};
use voxmatch_core::voxelgrid::FeatureVolume;

fn voxmatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxmatch"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes query/reference volumes and masks for one synthetic instance.
fn write_instance(dir: &Path, sigma: f64, outliers: f64) -> RotationMatrix {
    let cfg = SynthConfig {
        d: 6,
        h: 6,
        w: 6,
        feat_dim: 16,
        sigma,
        outlier_fraction: outliers,
    };
    let inst = generate_indexed(&cfg, 4, 2).unwrap();
    let volume = |m| FeatureVolume::from_voxel_matrix(m, 6, 6, 6).unwrap().data().clone();
    write_voxf(dir.join("vq.voxf"), &volume(&inst.vq)).unwrap();
    write_voxf(dir.join("vr.voxf"), &volume(&inst.vr)).unwrap();
    let mask = inst.scene.mask.clone().into_shape_with_order((1, 1, 6, 6)).unwrap();
    write_voxf(dir.join("m.voxf"), &mask).unwrap();
    inst.gt_rotation
}

#[test]
fn solve_writes_a_pose_close_to_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gt = write_instance(d, 0.0, 0.0);
    let k = IntrinsicsFile {
        k: [500.0, 0.0, 320.0, 0.0, 500.0, 240.0, 0.0, 0.0, 1.0],
    };
    write_json(d.join("k.json"), &k).unwrap();
    let out = voxmatch(&[
        "solve",
        "--vq",
        p(&d.join("vq.voxf")),
        "--vr",
        p(&d.join("vr.voxf")),
        "--masks",
        p(&d.join("m.voxf")),
        p(&d.join("m.voxf")),
        "--intrinsics",
        p(&d.join("k.json")),
        "--box-center",
        "420,240",
        "--out",
        p(&d.join("pose.json")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let pose: PoseFile = read_json(d.join("pose.json")).unwrap();
    let err = geodesic_error_deg(&pose.rotation().unwrap(), &gt);
    assert!(err < 10.0, "error {err}");
    assert!((pose.t[0] - 0.2).abs() < 1e-12 && pose.t[1].abs() < 1e-12 && pose.t[2] == 1.0);
    assert_eq!(pose.k, k.k);
}

#[test]
fn solve_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_instance(d, 0.05, 0.3);
    let (vq, vr, m, pose) = (
        d.join("vq.voxf"),
        d.join("vr.voxf"),
        d.join("m.voxf"),
        d.join("pose.json"),
    );

    let missing_masks = voxmatch(&["solve", "--vq", p(&vq), "--vr", p(&vr), "--out", p(&pose)]);
    assert_eq!(code(&missing_masks), 2);

    let bad_mode = voxmatch(&[
        "solve",
        "--vq",
        p(&vq),
        "--vr",
        p(&vr),
        "--masks",
        p(&m),
        p(&m),
        "--weights",
        "hypo-10",
        "--out",
        p(&pose),
    ]);
    assert_eq!(code(&bad_mode), 2);

    std::fs::write(d.join("junk.voxf"), b"NOPE....").unwrap();
    let bad_magic = voxmatch(&[
        "solve",
        "--vq",
        p(&d.join("junk.voxf")),
        "--vr",
        p(&vr),
        "--masks",
        p(&m),
        p(&m),
        "--out",
        p(&pose),
    ]);
    assert_eq!(code(&bad_magic), 3);

    write_voxf(d.join("zero.voxf"), &Array4::zeros((16, 6, 6, 6))).unwrap();
    let zero = voxmatch(&[
        "solve",
        "--vq",
        p(&d.join("zero.voxf")),
        "--vr",
        p(&vr),
        "--masks",
        p(&m),
        p(&m),
        "--out",
        p(&pose),
    ]);
    assert_eq!(code(&zero), 4, "{}", String::from_utf8_lossy(&zero.stderr));
    assert!(!pose.exists());
}

fn write_proposals(dir: &Path, c_d: usize) {
    let json = format!(
        r#"{{"query":"q.png","C_d":{c_d},"reference_descriptor":[1,0,0],
        "proposals":[
          {{"cx":100,"cy":50,"w":20,"h":30,"score":0.9,"descriptor":[0,1,0]}},
          {{"cx":420,"cy":240,"w":40,"h":40,"score":0.2,"descriptor":[0.9,0.1,0]}}]}}"#
    );
    std::fs::write(dir.join("props.json"), json).unwrap();
}

#[test]
fn detect_select_picks_by_descriptor() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_proposals(d, 3);
    let k = [500.0, 0.0, 320.0, 0.0, 500.0, 240.0, 0.0, 0.0, 1.0];
    write_json(d.join("k.json"), &IntrinsicsFile { k }).unwrap();
    let gt = PoseFile {
        r: RotationMatrix::identity().to_row_major(),
        t: [0.0, 0.0, 3.0],
        k,
    };
    write_json(d.join("gt.json"), &gt).unwrap();
    let out = voxmatch(&[
        "detect-select",
        "--proposals",
        p(&d.join("props.json")),
        "--intrinsics",
        p(&d.join("k.json")),
        "--gt-pose",
        p(&d.join("gt.json")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["selected"], 1);
    assert!((v["translation"][0].as_f64().unwrap() - 0.2).abs() < 1e-12);
    let expected = (0.2f64 / (0.04f64 + 1.0).sqrt()).asin().to_degrees();
    assert!((v["translation_error_deg"].as_f64().unwrap() - expected).abs() < 1e-9);

    write_json(d.join("singular.json"), &IntrinsicsFile { k: [0.0; 9] }).unwrap();
    let singular = voxmatch(&[
        "detect-select",
        "--proposals",
        p(&d.join("props.json")),
        "--intrinsics",
        p(&d.join("singular.json")),
    ]);
    assert_eq!(code(&singular), 4);

    write_proposals(d, 4);
    let mismatch = voxmatch(&[
        "detect-select",
        "--proposals",
        p(&d.join("props.json")),
        "--intrinsics",
        p(&d.join("k.json")),
    ]);
    assert_eq!(code(&mismatch), 3);
}

#[test]
fn config_errors_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    std::fs::write(&cfg, "tau=0.1\nmystery=3\n").unwrap();
    let out = voxmatch(&["bench", "--config", p(&cfg)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    std::fs::write(&cfg, "tau=-1\n").unwrap();
    assert_eq!(code(&voxmatch(&["hypo", "--config", p(&cfg)])), 2);
    assert_eq!(
        code(&voxmatch(&["bench", "--config", p(&dir.path().join("absent.txt"))])),
        3
    );
}

#[test]
fn thread_cap_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    std::fs::write(&cfg, "instances=12\nbootstrap=50\ngrid_d=6\ngrid_h=6\ngrid_w=6\n").unwrap();
    let run = |threads: &str, out: &Path| {
        let status = Command::new(env!("CARGO_BIN_EXE_voxmatch"))
            .env("VOXMATCH_THREADS", threads)
            .args(["bench", "--config", p(&cfg), "--seed", "9", "--out", p(out)])
            .output()
            .unwrap();
        assert_eq!(code(&status), 0);
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run("1", &a);
    run("0", &b);
    for f in ["report.json", "records.csv", "histogram.csv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let bad = Command::new(env!("CARGO_BIN_EXE_voxmatch"))
        .env("VOXMATCH_THREADS", "-3")
        .args(["hypo"])
        .output()
        .unwrap();
    assert_eq!(code(&bad), 2);
}

#[test]
fn hypo_sparse_and_train_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("c.txt");
    std::fs::write(
        &cfg,
        "grid_d=4\ngrid_h=4\ngrid_w=4\nbootstrap=20\ntoy_holdout=2\ntoy_batch=2\n",
    )
    .unwrap();

    let out = voxmatch(&["hypo", "--config", p(&cfg), "--sizes", "50,200", "--instances", "3"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,n,median_error_deg,mac_count");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("hypo,50,") && lines[3].starts_with("wcv,1,"));

    let sparse = d.join("sparse.csv");
    let out = voxmatch(&[
        "sparse",
        "--config",
        p(&cfg),
        "--max-refs",
        "3",
        "--trials",
        "4",
        "--out",
        p(&sparse),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read_to_string(&sparse).unwrap().lines().count(), 4);

    let out = voxmatch(&[
        "train-toy",
        "--config",
        p(&cfg),
        "--steps",
        "2",
        "--out",
        p(&d.join("toy")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let trace = std::fs::read_to_string(d.join("toy/trace.csv")).unwrap();
    assert!(trace.starts_with("step,loss,loss_img,loss_mask,loss_pose,holdout_geodesic_deg"));
    let model = voxmatch_toy::checkpoint::load(d.join("toy/model.toym")).unwrap();
    assert_eq!(model.config().batch, 2);
}

#[test]
fn help_exits_zero() {
    assert_eq!(code(&voxmatch(&["--help"])), 0);
    assert_eq!(code(&voxmatch(&[])), 2);
}
