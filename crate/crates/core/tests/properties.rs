use nalgebra::Vector3;
use ndarray::{Array2, Array4};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use voxmatch_core::chain::HeadParams;
use voxmatch_core::config::Config;
use voxmatch_core::harness::{run_benchmark, Method};
use voxmatch_core::hypo::{build_grid, grid_energies, score_hypotheses};
use voxmatch_core::io::{decode_voxf, encode_voxf};
use voxmatch_core::matching::{score_matrix_from_voxels, softmax_rows};
use voxmatch_core::so3::{
    average_rotations, geodesic_error_deg, rot_to_6d, sample_uniform_rotation, six_d_to_rot, RotationMatrix,
};
use voxmatch_core::synth::SynthConfig;
use voxmatch_core::wcv::{solve_rotation, weighted_energy, WeightMode};

fn quat() -> impl Strategy<Value = RotationMatrix> {
    (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
        .prop_filter("non-zero quaternion", |(w, x, y, z)| {
            w * w + x * x + y * y + z * z > 1e-3
        })
        .prop_map(|(w, x, y, z)| RotationMatrix::from_quaternion(w, x, y, z))
}

fn cloud(n: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(-2.0f64..2.0, n * 3).prop_map(move |v| Array2::from_shape_vec((n, 3), v).unwrap())
}

fn rotate(r: &RotationMatrix, x: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn(x.dim(), |(i, k)| {
        r.apply(&Vector3::new(x[[i, 0]], x[[i, 1]], x[[i, 2]]))[k]
    })
}

/// Point cloud, ground-truth rotation, noisy rotated copy and positive weights.
fn problem() -> impl Strategy<Value = (Array2<f64>, RotationMatrix, Array2<f64>, Vec<f64>)> {
    (6usize..30).prop_flat_map(|n| {
        (
            cloud(n),
            quat(),
            cloud(n),
            proptest::collection::vec(0.05f64..1.0, n),
            0.0f64..0.3,
        )
            .prop_map(|(xr, r, noise, w, scale)| {
                let xq = rotate(&r, &xr) + &(noise * scale);
                (xr, r, xq, w)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn solution_beats_every_sampled_rotation((xr, r, xq, w) in problem(), seed in 0u64..1000) {
        let sol = solve_rotation(xr.view(), xq.view(), &w, false).unwrap();
        let e = weighted_energy(&sol.rotation, xr.view(), xq.view(), &w);
        prop_assert!(e <= weighted_energy(&r, xr.view(), xq.view(), &w) + 1e-9);
        let grid = build_grid(200, seed).unwrap();
        let energies = grid_energies(&grid, xr.view(), xq.view(), &w).unwrap();
        prop_assert!(energies.iter().all(|g| e <= g + 1e-9));
    }

    #[test]
    fn solution_is_left_equivariant((xr, _r, xq, w) in problem(), q in quat()) {
        let a = solve_rotation(xr.view(), xq.view(), &w, false).unwrap();
        let b = solve_rotation(xr.view(), rotate(&q, &xq).view(), &w, false).unwrap();
        prop_assert!(geodesic_error_deg(&(q * a.rotation), &b.rotation) < 1e-6);
    }

    #[test]
    fn swapping_the_clouds_inverts_the_solution((xr, _r, xq, w) in problem()) {
        let a = solve_rotation(xr.view(), xq.view(), &w, true).unwrap();
        let b = solve_rotation(xq.view(), xr.view(), &w, true).unwrap();
        prop_assert!(geodesic_error_deg(&a.rotation.transpose(), &b.rotation) < 1e-6);
    }

    #[test]
    fn noiseless_problems_are_solved_exactly(xr in cloud(12), r in quat(), w in proptest::collection::vec(0.1f64..1.0, 12)) {
        let xq = rotate(&r, &xr);
        let sol = solve_rotation(xr.view(), xq.view(), &w, false).unwrap();
        prop_assert!(geodesic_error_deg(&sol.rotation, &r) < 1e-6);
    }

    #[test]
    fn six_d_roundtrip(r in quat()) {
        let back = six_d_to_rot(&rot_to_6d(&r)).unwrap();
        prop_assert!(geodesic_error_deg(&back, &r) < 1e-8);
    }

    #[test]
    fn geodesic_is_a_bi_invariant_metric(a in quat(), b in quat(), c in quat(), q in quat()) {
        let ab = geodesic_error_deg(&a, &b);
        prop_assert!((ab - geodesic_error_deg(&b, &a)).abs() < 1e-9);
        prop_assert!((ab - geodesic_error_deg(&(q * a), &(q * b))).abs() < 1e-7);
        prop_assert!((ab - geodesic_error_deg(&(a * q), &(b * q))).abs() < 1e-7);
        prop_assert!(ab <= geodesic_error_deg(&a, &c) + geodesic_error_deg(&c, &b) + 1e-7);
        prop_assert!((0.0..=180.0).contains(&ab));
    }

    #[test]
    fn averaging_commutes_with_left_rotation(seed in 0u64..500, q in quat(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = sample_uniform_rotation(&mut rng);
        let rs: Vec<RotationMatrix> = (0..k)
            .map(|i| base * RotationMatrix::from_axis_angle(&Vector3::new(1.0, i as f64, 0.5), 0.1 * i as f64))
            .collect();
        let avg = average_rotations(&rs).unwrap();
        let moved: Vec<RotationMatrix> = rs.iter().map(|r| q * *r).collect();
        prop_assert!(geodesic_error_deg(&(q * avg), &average_rotations(&moved).unwrap()) < 1e-6);
    }

    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-1.0f64..1.0, 12 * 8), tau in 0.01f64..2.0) {
        let q = Array2::from_shape_vec((12, 8), vals[..96].to_vec()).unwrap();
        let r = Array2::from_shape_fn((7, 8), |(i, j)| q[[i + 2, j]] + 0.5);
        let s = score_matrix_from_voxels(q.view(), r.view());
        prop_assume!(s.is_ok());
        let s = s.unwrap();
        prop_assert_eq!(s.0.dim(), (7, 12));
        prop_assert!(s.0.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
        let p = softmax_rows(&s, tau);
        for row in p.0.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn voxf_roundtrip(dims in (1usize..4, 1usize..4, 1usize..4, 1usize..4), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Array4::from_shape_fn(dims, |_| rand::Rng::random_range(&mut rng, -5.0f32..5.0) as f64);
        let bytes = encode_voxf(&v);
        let back = decode_voxf(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(&back, &v);
        prop_assert_eq!(encode_voxf(&back), bytes);
    }

    #[test]
    fn config_roundtrip(tau in 0.001f64..5.0, lambda in 0.01f64..5.0, sigma in 0.0f64..1.0,
                        sizes in proptest::collection::vec(1usize..100_000, 1..5), seed in any::<u64>(),
                        lr in 1e-6f64..1e-1) {
        let mut cfg = Config { tau, lambda, sigma, hypo_sizes: sizes, seed, ..Config::default() };
        cfg.toy.lr = lr;
        prop_assert_eq!(Config::parse_str(&cfg.to_text()).unwrap(), cfg);
    }
}

#[test]
fn grids_are_nested_prefixes() {
    let small = build_grid(100, 77).unwrap();
    let large = build_grid(1000, 77).unwrap();
    assert_eq!(small.rotations(), &large.rotations()[..100]);
}

#[test]
fn hypothesis_energy_and_score_agree_on_exact_member() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xr = Array2::from_shape_fn((40, 3), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
    let grid = build_grid(500, 13).unwrap();
    let target = grid.rotations()[321];
    let xq = rotate(&target, &xr);
    let w = vec![1.0; 40];
    let res = score_hypotheses(&grid, xr.view(), xq.view(), &w).unwrap();
    assert_eq!(res.best_index, 321);
    let e = grid_energies(&grid, xr.view(), xq.view(), &w).unwrap();
    let argmin = e.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert_eq!(argmin, 321);
}

#[test]
fn benchmark_is_deterministic() {
    let synth = SynthConfig {
        d: 4,
        h: 4,
        w: 4,
        feat_dim: 8,
        sigma: 0.1,
        outlier_fraction: 0.3,
    };
    let methods = [
        Method::Wcv(WeightMode::Full),
        Method::Wcv(WeightMode::Uniform),
        Method::Hypo(50),
    ];
    let a = run_benchmark(&methods, 16, &synth, &HeadParams::default(), 3, 50).unwrap();
    let b = run_benchmark(&methods, 16, &synth, &HeadParams::default(), 3, 50).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.report, b.report);
    assert_eq!(a.records.len(), 48);
    let c = run_benchmark(&methods, 16, &synth, &HeadParams::default(), 4, 50).unwrap();
    assert_ne!(a.records, c.records);
}

#[test]
fn rank_deficient_clouds_are_rejected() {
    let xr = Array2::from_shape_fn((10, 3), |(i, k)| if k == 0 { i as f64 } else { 0.0 });
    let err = solve_rotation(xr.view(), xr.view(), &[1.0; 10], false).unwrap_err();
    assert!(err.is_numerical());
}
