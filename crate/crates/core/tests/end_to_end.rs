use hsfuse_core::degrade::{
    simulate_pair, synthetic_scene, upsample_nearest, BandSelector, Kernel, NoiseSpec,
    SpatialOperator,
};
use hsfuse_core::io::{read_cube, write_cube, Dtype};
use hsfuse_core::metrics::{report, ReportOptions};
use hsfuse_core::solver::{fuse, SolverConfig, StopReason};

fn config() -> SolverConfig {
    SolverConfig {
        subspace_dim: 3,
        mu_ms_weight: Some(3.0),
        outer_iters: 8,
        inner_iters: 15,
        ..SolverConfig::default()
    }
}

#[test]
fn fused_image_beats_upsampled_hs() {
    let truth = synthetic_scene(32, 32, 8, 3, 11).unwrap();
    let op = SpatialOperator::new(Kernel::gaussian(3, 0.8).unwrap(), 2, 32, 32).unwrap();
    let sel = BandSelector::evenly_spaced(8, 4, 8).unwrap();
    let pair = simulate_pair(
        &truth,
        &op,
        &sel,
        &NoiseSpec::gaussian(10.0, 1),
        &NoiseSpec::gaussian(50.0, 2),
    )
    .unwrap();

    let out = fuse(
        &pair.hs,
        &pair.ms,
        &op,
        &sel,
        &pair.hs_variances,
        &pair.ms_variances,
        &config(),
    )
    .unwrap();

    let opts = ReportOptions {
        resolution_ratio: 0.25,
        ..ReportOptions::default()
    };
    let fused = report(&truth, &out.fused, &opts).unwrap();
    let nearest = report(&truth, &upsample_nearest(&pair.hs, 2).unwrap(), &opts).unwrap();
    assert!(
        fused.psnr_db >= nearest.psnr_db + 5.0,
        "fused {} dB vs nearest {} dB",
        fused.psnr_db,
        nearest.psnr_db
    );
    assert!(fused.sam_deg < nearest.sam_deg);

    let h = &out.state.objective_history;
    assert!(h.windows(2).all(|w| w[1] <= w[0] + 1e-6 * h[0].abs()));
    assert_eq!(out.diagnostics.len() + 1, h.len());
}

#[test]
fn fusion_is_deterministic() {
    let truth = synthetic_scene(16, 16, 6, 2, 3).unwrap();
    let op = SpatialOperator::new(Kernel::gaussian(3, 0.8).unwrap(), 2, 16, 16).unwrap();
    let sel = BandSelector::select(6, vec![0, 2, 5]).unwrap();
    let pair = simulate_pair(
        &truth,
        &op,
        &sel,
        &NoiseSpec::gaussian(15.0, 5),
        &NoiseSpec::gaussian(40.0, 6),
    )
    .unwrap();
    let cfg = SolverConfig {
        subspace_dim: 2,
        ..config()
    };
    let run = || {
        fuse(
            &pair.hs,
            &pair.ms,
            &op,
            &sel,
            &pair.hs_variances,
            &pair.ms_variances,
            &cfg,
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.fused.data(), b.fused.data());
    assert_eq!(a.state.objective_history, b.state.objective_history);
    assert_eq!(a.stop_reason, StopReason::IterationBudget);
}

#[test]
fn fused_cube_survives_a_file_round_trip() {
    let truth = synthetic_scene(8, 8, 5, 2, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("F.cube");
    write_cube(
        &path,
        &truth,
        Dtype::F64,
        serde_json::json!({"stage": "test"}),
    )
    .unwrap();
    let (back, header) = read_cube(&path).unwrap();
    assert_eq!(back, truth);
    assert_eq!((header.rows, header.cols, header.bands), (8, 8, 5));
    assert_eq!(header.provenance["stage"], "test");

    write_cube(&path, &truth, Dtype::F32, serde_json::Value::Null).unwrap();
    let (narrow, _) = read_cube(&path).unwrap();
    for (a, b) in narrow.data().iter().zip(truth.data()) {
        assert!((a - b).abs() <= 1e-7 * b.abs());
    }
}
