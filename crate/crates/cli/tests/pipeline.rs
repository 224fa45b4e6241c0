//! End-to-end pipeline over serialized artifacts: train a family, observe a
//! state, estimate, refine.

use std::path::PathBuf;

use pbdw_cli::config::{
    FamilyConfig, MeasurementConfig, ModelConfig, TrainConfig, TrainingConfig,
};
use pbdw_cli::pipeline::{cmd_estimate, cmd_solve, cmd_train, EstimateOptions};
use pbdw_core::artifact::{read_state_dump, FamilyArtifact};
use pbdw_core::family::{AdmissibilityMode, SplitRule};
use pbdw_core::measurement::Placement;
use pbdw_core::model::Partition;

fn work_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir()
        .join(format!("pbdw_pipeline_{}", std::process::id()))
        .join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn desk_train_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            partition: Partition::Grid2x2,
            a_bar: 1.0,
            c: vec![0.9, 0.45, 0.3, 0.225],
            n_per_side: 16,
        },
        measurement: MeasurementConfig {
            placement: Placement::EvenlySpaced,
            m: 4,
            box_width_in_h: 2.0,
        },
        training: TrainingConfig { n: 200, seed: 5 },
        family: FamilyConfig {
            mode: AdmissibilityMode::Sigma { sigma: 0.0 },
            rule: SplitRule::TauProbe,
            k_max: 6,
            min_samples: 5,
        },
    }
}

#[test]
fn train_solve_estimate_round_trip() {
    let dir = work_dir("round_trip");
    let cfg = desk_train_config();
    let summary = cmd_train(&cfg, &dir).unwrap();
    assert_eq!(summary.k, 6);
    let family_path = dir.join("family.json");

    // Observe an on-manifold state and estimate it back.
    let y = vec![0.3, -0.5, 0.7, 0.1];
    let solve = cmd_solve(&family_path, &y, None, 0, &dir).unwrap();
    let report = cmd_estimate(
        &family_path,
        &PathBuf::from(&solve.observation_file),
        &EstimateOptions::default(),
        &dir,
    )
    .unwrap();

    // On-manifold draw: the reconstruction error obeys the oracle bound
    // err <= sigma_K (the estimate report carries the per-cell oracle
    // errors because the observation records the true parameter).
    let best_err = report
        .cells
        .iter()
        .filter_map(|c| c.oracle_error)
        .fold(f64::INFINITY, f64::min);
    assert!(
        best_err <= summary.sigma_achieved + 1e-8,
        "oracle error {best_err:.3e} above sigma {:.3e}",
        summary.sigma_achieved
    );
    // The state-gap diagnostic respects its r^-1 residual bound.
    assert!(report.state_gap <= report.state_gap_bound + 1e-9);
    assert!(report.coefficient_l2.is_some());
    // The selected cell is plausible for on-manifold data.
    assert!(report.plausible.iter().any(|p| p.cell_idx == report.k_star));
    // The dumped state matches the report's resolution.
    let (n_per_side, u) = read_state_dump(&PathBuf::from(&report.u_star_file)).unwrap();
    assert_eq!(n_per_side, 16);
    assert_eq!(u.len(), 15 * 15);
}

#[test]
fn altmin_flag_never_increases_residual() {
    let dir = work_dir("altmin");
    let cfg = desk_train_config();
    cmd_train(&cfg, &dir).unwrap();
    let family_path = dir.join("family.json");
    let solve = cmd_solve(&family_path, &[0.9, -0.9, 0.2, -0.4], None, 0, &dir).unwrap();
    let opts = EstimateOptions {
        altmin: true,
        ..Default::default()
    };
    let report = cmd_estimate(
        &family_path,
        &PathBuf::from(&solve.observation_file),
        &opts,
        &dir,
    )
    .unwrap();
    let trace = report.altmin.expect("altmin trace present");
    assert!(trace.final_residual() <= trace.initial_residual() + 1e-10);
    for w in trace.residual_history.windows(2) {
        assert!(w[1] <= w[0] + 1e-10);
    }
}

#[test]
fn noise_flag_reports_remark_bound() {
    let dir = work_dir("noise");
    let cfg = desk_train_config();
    cmd_train(&cfg, &dir).unwrap();
    let family_path = dir.join("family.json");
    // Noisy observation path: the solve records the noise bound, and an
    // explicit claimed bound threads into the per-cell estimates.
    let solve = cmd_solve(&family_path, &[0.0, 0.0, 0.0, 0.0], Some(1e-3), 3, &dir).unwrap();
    let opts = EstimateOptions {
        noise_bound: Some(2e-3),
        ..Default::default()
    };
    let report = cmd_estimate(
        &family_path,
        &PathBuf::from(&solve.observation_file),
        &opts,
        &dir,
    )
    .unwrap();
    let artifact = FamilyArtifact::load(&family_path).unwrap();
    let (_, ms, _) = artifact.restore().unwrap();
    let expected = ms.transform_norm * 2e-3;
    assert!((report.eps_noise.unwrap() - expected).abs() < 1e-15);
    for cell in &report.cells {
        let bound = cell.noisy_bound.unwrap();
        assert!(bound >= cell.mu * cell.eps);
        assert!((bound - cell.mu * (cell.eps + expected)).abs() < 1e-12);
    }
}

#[test]
fn estimate_rejects_mismatched_observation() {
    let dir = work_dir("mismatch");
    let cfg = desk_train_config();
    cmd_train(&cfg, &dir).unwrap();
    let family_path = dir.join("family.json");
    // Observation with the wrong measurement count.
    let bad = serde_json::json!({
        "format_version": 1,
        "m": 3,
        "w": [0.0, 0.0, 0.0],
        "raw_z": null,
        "noise_eps": null,
        "truth_y": null,
    });
    let obs_path = dir.join("bad_obs.json");
    std::fs::write(&obs_path, serde_json::to_string(&bad).unwrap()).unwrap();
    let err = cmd_estimate(&family_path, &obs_path, &EstimateOptions::default(), &dir);
    assert!(err.is_err());
}
