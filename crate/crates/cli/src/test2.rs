//! Splitting-scheme study: builds sigma-admissible families by greedy dyadic
//! splitting across dimension/measurement/coefficient regimes and tracks the
//! bound sigma_K against surrogate- and oracle-selected errors at every K.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use pbdw_core::family::{AdmissibilityMode, Cell, FamilyBuilder, ReducedFamily, SplitRule};
use pbdw_core::fem::{DiscreteSpace, StateVector};
use pbdw_core::measurement::{build_measurements, MeasurementSpace, Observation, Placement};
use pbdw_core::model::{sample_snapshots, AffineModel, SnapshotSet};
use pbdw_core::pbdw::reconstruct;
use pbdw_core::residual::{build_quadratic, minimize_box, QP_TOL};
use pbdw_core::{CoreError, Result};

use crate::config::{config_hash, Test2Config};
use crate::report::{fmt_float, CsvTable};

/// One CSV row: the family state at K cells for one configuration.
#[derive(Debug, Clone)]
pub struct KRow {
    pub d: usize,
    pub m: usize,
    pub c_mode: &'static str,
    pub k: usize,
    pub sigma_k: f64,
    pub err_surrogate_avg: f64,
    pub err_oracle_avg: f64,
    /// Envelope of the oracle-selected error over the test set.
    pub err_max: f64,
    pub err_min: f64,
    pub converged: bool,
}

#[derive(Debug)]
pub struct Test2Report {
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<KRow>,
}

/// Per-draw, per-cell cache of reconstruction error and surrogate value;
/// cells keep their identity across splits, so only fresh cells are
/// evaluated at each K.
struct DrawCache {
    obs: Observation,
    truth: StateVector,
    by_cell: HashMap<usize, (f64, f64)>,
}

pub fn run_test2(cfg: &Test2Config) -> Result<Test2Report> {
    let hash = config_hash(cfg);
    let mut rows = Vec::new();
    for &d in &cfg.dims {
        let partition = Test2Config::partition_for(d).ok_or_else(|| {
            CoreError::InvalidMeasurement(format!("unsupported parameter dimension {d}"))
        })?;
        let space = Arc::new(DiscreteSpace::new(cfg.n_per_side)?);
        for &m in &cfg.ms {
            for &c_mode in &cfg.c_modes {
                let c = c_mode.coefficients(d);
                let model =
                    pbdw_core::model::build_model(Arc::clone(&space), partition, 1.0, &c)?;
                let ms = build_measurements(
                    &space,
                    Placement::EvenlySpaced,
                    m,
                    cfg.box_width_in_h * space.grid.h,
                )?;
                let training = sample_snapshots(&model, cfg.n_train, cfg.seed)?;
                let test = sample_snapshots(&model, cfg.n_test, cfg.seed.wrapping_add(1))?;
                let combo = run_combination(cfg, &model, &ms, &training, &test, c_mode.token())?;
                rows.extend(combo);
            }
        }
    }
    Ok(Test2Report {
        config_hash: hash,
        seed: cfg.seed,
        rows,
    })
}

fn run_combination(
    cfg: &Test2Config,
    model: &AffineModel,
    ms: &MeasurementSpace,
    training: &SnapshotSet,
    test: &SnapshotSet,
    c_mode: &'static str,
) -> Result<Vec<KRow>> {
    let mut builder = FamilyBuilder::new(
        model,
        training,
        ms,
        AdmissibilityMode::Sigma { sigma: 0.0 },
        SplitRule::TauProbe,
        cfg.min_samples,
    )?;
    let mut caches: Vec<DrawCache> = test
        .states
        .iter()
        .map(|u| DrawCache {
            obs: ms.project(u),
            truth: u.clone(),
            by_cell: HashMap::new(),
        })
        .collect();

    let mut rows = Vec::new();
    loop {
        let k = builder.cells.len();
        let sigma_k = ReducedFamily::sigma_of(&builder.cells);
        let converged = builder.all_pass();
        rows.push(evaluate_k(
            model,
            ms,
            &builder.cells,
            &mut caches,
            c_mode,
            k,
            sigma_k,
            converged,
        )?);
        if k >= cfg.k_max || !builder.step()? {
            break;
        }
    }
    if !rows.last().map(|r| r.converged).unwrap_or(false) {
        log::warn!(
            "family for d = {}, m = {}, c = {} not converged within K_max = {} (sigma = {:.3e})",
            model.dim(),
            ms.m(),
            c_mode,
            cfg.k_max,
            rows.last().map(|r| r.sigma_k).unwrap_or(f64::NAN)
        );
    }
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
fn evaluate_k(
    model: &AffineModel,
    ms: &MeasurementSpace,
    cells: &[Cell],
    caches: &mut [DrawCache],
    c_mode: &'static str,
    k: usize,
    sigma_k: f64,
    converged: bool,
) -> Result<KRow> {
    let results: Vec<Result<(f64, f64)>> = caches
        .par_iter_mut()
        .map(|cache| -> Result<(f64, f64)> {
            // Evaluate any cell not seen by this draw yet.
            for cell in cells {
                if cache.by_cell.contains_key(&cell.id) {
                    continue;
                }
                let rec = reconstruct(&cell.space, ms, &cache.obs)?;
                let err = model.space.v_norm(&(&rec.u_star - &cache.truth));
                let q = build_quadratic(model, &rec.u_star)?;
                let s = minimize_box(&q, &cell.box_y, QP_TOL).value.max(0.0).sqrt();
                cache.by_cell.insert(cell.id, (err, s));
            }
            // Surrogate selection: argmin S over cells (ties to the first).
            let mut best_s = f64::INFINITY;
            let mut err_surrogate = f64::NAN;
            let mut err_oracle = f64::INFINITY;
            for cell in cells {
                let (err, s) = cache.by_cell[&cell.id];
                if s < best_s {
                    best_s = s;
                    err_surrogate = err;
                }
                err_oracle = err_oracle.min(err);
            }
            Ok((err_surrogate, err_oracle))
        })
        .collect();
    let mut sur_sum = 0.0;
    let mut ora_sum = 0.0;
    let mut err_max = f64::NEG_INFINITY;
    let mut err_min = f64::INFINITY;
    let n = caches.len() as f64;
    for r in results {
        let (sur, ora) = r?;
        sur_sum += sur;
        ora_sum += ora;
        err_max = err_max.max(ora);
        err_min = err_min.min(ora);
    }
    Ok(KRow {
        d: model.dim(),
        m: ms.m(),
        c_mode,
        k,
        sigma_k,
        err_surrogate_avg: sur_sum / n,
        err_oracle_avg: ora_sum / n,
        err_max,
        err_min,
        converged,
    })
}

impl Test2Report {
    pub fn write_outputs(&self, out: &Path) -> Result<()> {
        std::fs::create_dir_all(out)?;
        let mut table = CsvTable::new(&[
            "config_hash",
            "seed",
            "d",
            "m",
            "c_mode",
            "K",
            "sigma_K",
            "err_surrogate_avg",
            "err_oracle_avg",
            "err_max",
            "err_min",
        ]);
        for r in &self.rows {
            table.row(&[
                self.config_hash.clone(),
                self.seed.to_string(),
                r.d.to_string(),
                r.m.to_string(),
                r.c_mode.to_string(),
                r.k.to_string(),
                fmt_float(r.sigma_k),
                fmt_float(r.err_surrogate_avg),
                fmt_float(r.err_oracle_avg),
                fmt_float(r.err_max),
                fmt_float(r.err_min),
            ]);
        }
        table.write(&out.join("families.csv"))?;
        Ok(())
    }

    /// Rows of one configuration, ordered by K.
    pub fn rows_for(&self, d: usize, m: usize, c_mode: &str) -> Vec<&KRow> {
        self.rows
            .iter()
            .filter(|r| r.d == d && r.m == m && r.c_mode == c_mode)
            .collect()
    }
}
