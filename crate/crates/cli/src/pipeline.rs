//! The train / solve / estimate pipeline over serialized artifacts.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use serde::Serialize;

use pbdw_core::altmin::{run_altmin, AltMinInit, AltMinState};
use pbdw_core::artifact::{
    write_state_dump, FamilyArtifact, ObservationArtifact,
};
use pbdw_core::estimation::{
    attach_oracle_errors, estimate_parameter, parameter_diagnostics, plausible_set, select_state,
    PlausibleMember, SurrogateDomain,
};
use pbdw_core::family::build_family;
use pbdw_core::fem::DiscreteSpace;
use pbdw_core::measurement::build_measurements;
use pbdw_core::model::{build_model, sample_snapshots};
use pbdw_core::{CoreError, Result};

use crate::config::{config_hash, TrainConfig};

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub k: usize,
    pub sigma_achieved: f64,
    pub converged: bool,
    pub data_starved_cells: usize,
    pub elapsed_s: f64,
}

/// Builds the model, measurements, training set, and family; writes
/// `family.json` and `train_summary.json` into `out`.
pub fn cmd_train(cfg: &TrainConfig, out: &Path) -> Result<TrainSummary> {
    let start = Instant::now();
    std::fs::create_dir_all(out)?;
    let space = Arc::new(DiscreteSpace::new(cfg.model.n_per_side)?);
    let model = build_model(
        Arc::clone(&space),
        cfg.model.partition,
        cfg.model.a_bar,
        &cfg.model.c,
    )?;
    let ms = build_measurements(
        &space,
        cfg.measurement.placement,
        cfg.measurement.m,
        cfg.measurement.box_width_in_h * space.grid.h,
    )?;
    let training = sample_snapshots(&model, cfg.training.n, cfg.training.seed)?;
    let family = build_family(
        &model,
        &training,
        &ms,
        cfg.family.mode,
        cfg.family.rule,
        cfg.family.k_max,
        cfg.family.min_samples,
    )?;
    let artifact =
        FamilyArtifact::from_family(&family, &model, &ms, cfg.training.seed, cfg.training.n);
    artifact.save(&out.join("family.json"))?;
    let summary = TrainSummary {
        config_hash: config_hash(cfg),
        k: family.k(),
        sigma_achieved: family.sigma_achieved,
        converged: family.converged,
        data_starved_cells: family.cells.iter().filter(|c| c.data_starved).count(),
        elapsed_s: start.elapsed().as_secs_f64(),
    };
    std::fs::write(
        out.join("train_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct SolveSummary {
    pub y: Vec<f64>,
    pub state_norm: f64,
    pub observation_file: String,
    pub state_file: String,
}

/// Solves the family's model at a given parameter and writes the state dump
/// plus an observation file (optionally noisy).
pub fn cmd_solve(
    family_path: &Path,
    y: &[f64],
    noise: Option<f64>,
    noise_seed: u64,
    out: &Path,
) -> Result<SolveSummary> {
    std::fs::create_dir_all(out)?;
    let artifact = FamilyArtifact::load(family_path)?;
    let (model, ms, _family) = artifact.restore()?;
    let y = DVector::from_vec(y.to_vec());
    let u = model.solve_state(&y)?;
    let obs = match noise {
        Some(level) => ms.observe_noisy(&u, level, noise_seed),
        None => ms.project(&u),
    };
    let state_file = out.join("solution.state");
    write_state_dump(&state_file, &model.space, &u)?;
    let obs_file = out.join("observation.json");
    ObservationArtifact::from_observation(&obs, Some(&y)).save(&obs_file)?;
    Ok(SolveSummary {
        y: y.iter().copied().collect(),
        state_norm: model.space.v_norm(&u),
        observation_file: obs_file.display().to_string(),
        state_file: state_file.display().to_string(),
    })
}

#[derive(Debug, Serialize)]
pub struct EstimateOptions {
    pub altmin: bool,
    pub altmin_max_iters: usize,
    pub altmin_tol: f64,
    /// Claimed l2 bound on the raw measurement noise, for the reported
    /// noise-aware error bounds.
    pub noise_bound: Option<f64>,
    /// Minimize each cell's surrogate over the full box instead of the cell.
    pub global_surrogate: bool,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            altmin: false,
            altmin_max_iters: 50,
            altmin_tol: 1e-10,
            noise_bound: None,
            global_surrogate: false,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct CellReport {
    pub cell_idx: usize,
    pub n: usize,
    pub eps: f64,
    pub mu: f64,
    pub s_value: f64,
    pub oracle_error: Option<f64>,
    /// mu_k (eps_k + eps_noise) when a noise bound is supplied.
    pub noisy_bound: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct EstimateReport {
    pub k_star: usize,
    pub cells: Vec<CellReport>,
    pub skipped: Vec<(usize, String)>,
    pub plausible: Vec<PlausibleMember>,
    pub y_star: Vec<f64>,
    pub residual_norm: f64,
    pub state_gap: f64,
    pub state_gap_bound: f64,
    pub coefficient_l2: Option<f64>,
    /// ||M|| * noise_bound per the representer-to-orthonormal transform.
    pub eps_noise: Option<f64>,
    pub altmin: Option<AltMinState>,
    pub u_star_file: String,
    pub timings_ms: Timings,
}

#[derive(Debug, Serialize)]
pub struct Timings {
    pub selection: f64,
    pub parameter: f64,
    pub altmin: f64,
}

/// Loads a trained family and an observation, runs selection, the parameter
/// estimate, the plausible set, and optionally the alternating refinement.
pub fn cmd_estimate(
    family_path: &Path,
    observation_path: &Path,
    opts: &EstimateOptions,
    out: &Path,
) -> Result<EstimateReport> {
    std::fs::create_dir_all(out)?;
    let artifact = FamilyArtifact::load(family_path)?;
    let (model, ms, family) = artifact.restore()?;
    let obs_artifact = ObservationArtifact::load(observation_path)?;
    if obs_artifact.m != ms.m() {
        return Err(CoreError::Artifact(format!(
            "observation has {} measurements, family expects {}",
            obs_artifact.m,
            ms.m()
        )));
    }
    let obs = obs_artifact.to_observation();
    let truth_y = obs_artifact.truth_y.clone().map(DVector::from_vec);

    let domain = if opts.global_surrogate {
        SurrogateDomain::FullBox
    } else {
        SurrogateDomain::Cell
    };
    let t0 = Instant::now();
    let mut selection = select_state(&family, &model, &ms, &obs, domain)?;
    if let Some(y) = &truth_y {
        if let Ok(u_true) = model.solve_state(y) {
            attach_oracle_errors(&model, &mut selection, &u_true);
        }
    }
    let selection_ms = t0.elapsed().as_secs_f64() * 1e3;

    let (_, big_r) = model.ellipticity_bounds()?;
    let plausible = plausible_set(&family, &selection, big_r);

    let t1 = Instant::now();
    let estimate = estimate_parameter(&model, selection.u_star(), &model.box_y)?;
    let diag = parameter_diagnostics(&model, selection.u_star(), &estimate, truth_y.as_ref())?;
    let parameter_ms = t1.elapsed().as_secs_f64() * 1e3;

    let t2 = Instant::now();
    let altmin = if opts.altmin {
        Some(run_altmin(
            &model,
            &ms,
            &obs,
            AltMinInit::FromSelection(&selection),
            opts.altmin_max_iters,
            opts.altmin_tol,
        )?)
    } else {
        None
    };
    let altmin_ms = t2.elapsed().as_secs_f64() * 1e3;

    let eps_noise = opts
        .noise_bound
        .map(|b| ms.transform_norm * b)
        .or(obs_artifact.noise_eps);
    let cells = selection
        .records
        .iter()
        .map(|rec| {
            let cell = &family.cells[rec.cell_idx];
            CellReport {
                cell_idx: rec.cell_idx,
                n: cell.space.n(),
                eps: cell.space.eps,
                mu: cell.space.mu,
                s_value: rec.s_value,
                oracle_error: rec.oracle_error,
                noisy_bound: eps_noise.map(|e| cell.space.mu * (cell.space.eps + e)),
            }
        })
        .collect();

    let final_state = altmin
        .as_ref()
        .map(|a| &a.state)
        .unwrap_or_else(|| selection.u_star());
    let u_star_file = out.join("u_star.state");
    write_state_dump(&u_star_file, &model.space, final_state)?;

    let report = EstimateReport {
        k_star: selection.selected().cell_idx,
        cells,
        skipped: selection.skipped.clone(),
        plausible,
        y_star: estimate.y.iter().copied().collect(),
        residual_norm: estimate.residual_norm,
        state_gap: diag.state_gap,
        state_gap_bound: diag.bound,
        coefficient_l2: diag.coefficient_l2,
        eps_noise,
        altmin,
        u_star_file: u_star_file.display().to_string(),
        timings_ms: Timings {
            selection: selection_ms,
            parameter: parameter_ms,
            altmin: altmin_ms,
        },
    };
    std::fs::write(
        out.join("estimate.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}
