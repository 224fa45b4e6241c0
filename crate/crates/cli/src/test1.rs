//! Pre-determined splitting study: two mirror-image diffusivity models, an
//! affine estimator trained on the union of both manifolds, and per-model
//! estimators with residual-surrogate model selection.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use pbdw_core::fem::{DiscreteSpace, StateVector};
use pbdw_core::measurement::{build_measurements, MeasurementSpace, Placement};
use pbdw_core::model::{sample_parameters, solve_states, AffineModel, Partition};
use pbdw_core::pbdw::reconstruct;
use pbdw_core::rb::{best_dimension, greedy_hierarchy, AffineReducedSpace, DimensionCriterion};
use pbdw_core::residual::{build_quadratic, minimize_box, QP_TOL};
use pbdw_core::Result;

use crate::config::{config_hash, Test1Config};
use crate::report::{fmt_float, CsvTable};

/// Outcome for one test function.
#[derive(Debug, Clone)]
pub struct DrawOutcome {
    /// 1-based true model index.
    pub truth_model: usize,
    pub picked_surrogate: usize,
    pub picked_oracle: usize,
    pub err_affine: f64,
    pub err_surrogate: f64,
    pub err_oracle: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionCounts {
    pub test_set: usize,
    pub picked_1: usize,
    pub picked_2: usize,
    pub success_rate: f64,
}

#[derive(Debug)]
pub struct Test1Report {
    pub config_hash: String,
    pub seed: u64,
    /// Chosen dimensions n* for the affine space and the two local spaces.
    pub n_star: [usize; 3],
    pub surrogate_counts: [SelectionCounts; 2],
    pub oracle_counts: [SelectionCounts; 2],
    /// avg/worst V-error per (method, test set); methods are
    /// affine / nonlinear-oracle / nonlinear-surrogate.
    pub avg_errors: [[f64; 2]; 3],
    pub worst_errors: [[f64; 2]; 3],
    /// (model k in 0..=2, n, eps, mu) curves.
    pub curves: Vec<(usize, usize, f64, f64)>,
    pub outcomes: Vec<DrawOutcome>,
}

struct Candidate<'a> {
    model: &'a AffineModel,
    space: AffineReducedSpace,
}

pub fn run_test1(cfg: &Test1Config) -> Result<Test1Report> {
    let hash = config_hash(cfg);
    let space = Arc::new(DiscreteSpace::new(cfg.n_per_side)?);
    let c = vec![0.9; 4];
    let model1 = pbdw_core::model::build_model(
        Arc::clone(&space),
        Partition::Test1Partition1,
        1.0,
        &c,
    )?;
    let model2 = pbdw_core::model::build_model(
        Arc::clone(&space),
        Partition::Test1Partition2,
        1.0,
        &c,
    )?;

    // The two manifolds share training parameters; test parameters are a
    // fresh stream.
    let train_params = sample_parameters(&model1.box_y, cfg.n_train, cfg.seed);
    let test_params = sample_parameters(&model1.box_y, cfg.n_test, cfg.seed.wrapping_add(1));
    let train1 = solve_states(&model1, &train_params)?;
    let train2 = solve_states(&model2, &train_params)?;
    let test1 = solve_states(&model1, &test_params)?;
    let test2 = solve_states(&model2, &test_params)?;

    let ms = build_measurements(
        &space,
        Placement::Random {
            seed: cfg.seed.wrapping_add(2),
        },
        cfg.m,
        cfg.box_width_in_h * space.grid.h,
    )?;

    // Shared offset u(0): the two models agree at y = 0.
    let offset = model1.solve_state(&DVector::zeros(4))?;

    // Affine method: greedy over the union manifold.
    let union: Vec<StateVector> = train1.iter().chain(train2.iter()).cloned().collect();
    let h0 = greedy_hierarchy(&space, &union, &offset, cfg.m)?.with_stability(&ms);
    let h1 = greedy_hierarchy(&space, &train1, &offset, cfg.m)?.with_stability(&ms);
    let h2 = greedy_hierarchy(&space, &train2, &offset, cfg.m)?.with_stability(&ms);
    // Dimension choice over n = 1..m.
    let (n0, _) = best_dimension(&h0, DimensionCriterion::Sigma, 1);
    let (n1, _) = best_dimension(&h1, DimensionCriterion::Sigma, 1);
    let (n2, _) = best_dimension(&h2, DimensionCriterion::Sigma, 1);
    let affine = Candidate {
        model: &model1,
        space: h0.affine_space(n0, &ms, 0),
    };
    let candidates = [
        Candidate {
            model: &model1,
            space: h1.affine_space(n1, &ms, 1),
        },
        Candidate {
            model: &model2,
            space: h2.affine_space(n2, &ms, 2),
        },
    ];

    let mut outcomes: Vec<DrawOutcome> = Vec::with_capacity(2 * cfg.n_test);
    for (set_idx, tests) in [&test1, &test2].into_iter().enumerate() {
        let batch: Vec<DrawOutcome> = tests
            .par_iter()
            .map(|u| evaluate_draw(&space, &ms, &affine, &candidates, u, set_idx + 1))
            .collect::<Result<_>>()?;
        outcomes.extend(batch);
    }

    let counts = |selector: &dyn Fn(&DrawOutcome) -> usize, set: usize| -> SelectionCounts {
        let draws: Vec<&DrawOutcome> =
            outcomes.iter().filter(|o| o.truth_model == set).collect();
        let picked_1 = draws.iter().filter(|o| selector(o) == 1).count();
        let picked_2 = draws.len() - picked_1;
        let correct = draws.iter().filter(|o| selector(o) == set).count();
        SelectionCounts {
            test_set: set,
            picked_1,
            picked_2,
            success_rate: correct as f64 / draws.len() as f64,
        }
    };
    let surrogate_counts = [
        counts(&|o| o.picked_surrogate, 1),
        counts(&|o| o.picked_surrogate, 2),
    ];
    let oracle_counts = [counts(&|o| o.picked_oracle, 1), counts(&|o| o.picked_oracle, 2)];

    let mut avg_errors = [[0.0; 2]; 3];
    let mut worst_errors = [[0.0; 2]; 3];
    for set in 0..2 {
        let draws: Vec<&DrawOutcome> = outcomes
            .iter()
            .filter(|o| o.truth_model == set + 1)
            .collect();
        let n = draws.len() as f64;
        for (mi, err) in [
            |o: &DrawOutcome| o.err_affine,
            |o: &DrawOutcome| o.err_oracle,
            |o: &DrawOutcome| o.err_surrogate,
        ]
        .into_iter()
        .enumerate()
        {
            avg_errors[mi][set] = draws.iter().map(|o| err(o)).sum::<f64>() / n;
            worst_errors[mi][set] = draws.iter().map(|o| err(o)).fold(0.0, f64::max);
        }
    }

    let mut curves = Vec::new();
    for (k, h) in [&h0, &h1, &h2].into_iter().enumerate() {
        for n in 0..=h.depth() {
            curves.push((k, n, h.eps[n], h.mu[n]));
        }
    }

    Ok(Test1Report {
        config_hash: hash,
        seed: cfg.seed,
        n_star: [n0, n1, n2],
        surrogate_counts,
        oracle_counts,
        avg_errors,
        worst_errors,
        curves,
        outcomes,
    })
}

fn evaluate_draw(
    space: &DiscreteSpace,
    ms: &MeasurementSpace,
    affine: &Candidate,
    candidates: &[Candidate; 2],
    u: &StateVector,
    truth_model: usize,
) -> Result<DrawOutcome> {
    let obs = ms.project(u);
    let rec0 = reconstruct(&affine.space, ms, &obs)?;
    let err_affine = space.v_norm(&(&rec0.u_star - u));

    let mut errs = [0.0f64; 2];
    let mut surrogates = [0.0f64; 2];
    for (k, cand) in candidates.iter().enumerate() {
        let rec = reconstruct(&cand.space, ms, &obs)?;
        errs[k] = space.v_norm(&(&rec.u_star - u));
        // Surrogate distance of this estimator to its own manifold,
        // minimized over the full parameter box.
        let q = build_quadratic(cand.model, &rec.u_star)?;
        surrogates[k] = minimize_box(&q, &cand.model.box_y, QP_TOL).value.max(0.0).sqrt();
    }
    let picked_surrogate = if surrogates[0] <= surrogates[1] { 1 } else { 2 };
    let picked_oracle = if errs[0] <= errs[1] { 1 } else { 2 };
    Ok(DrawOutcome {
        truth_model,
        picked_surrogate,
        picked_oracle,
        err_affine,
        err_surrogate: errs[picked_surrogate - 1],
        err_oracle: errs[picked_oracle - 1],
    })
}

impl Test1Report {
    pub fn write_outputs(&self, out: &Path) -> Result<()> {
        std::fs::create_dir_all(out)?;
        let mut counts = CsvTable::new(&[
            "config_hash",
            "seed",
            "selector",
            "test_set",
            "picked_1",
            "picked_2",
            "success_rate",
        ]);
        for (name, rows) in [
            ("surrogate", &self.surrogate_counts),
            ("oracle", &self.oracle_counts),
        ] {
            for c in rows.iter() {
                counts.row(&[
                    self.config_hash.clone(),
                    self.seed.to_string(),
                    name.to_string(),
                    c.test_set.to_string(),
                    c.picked_1.to_string(),
                    c.picked_2.to_string(),
                    fmt_float(c.success_rate),
                ]);
            }
        }
        counts.write(&out.join("selection_counts.csv"))?;

        let mut errors = CsvTable::new(&[
            "config_hash",
            "seed",
            "method",
            "test_set",
            "avg_error",
            "worst_error",
        ]);
        let methods = ["affine", "nonlinear_oracle", "nonlinear_surrogate"];
        for (mi, name) in methods.iter().enumerate() {
            for set in 0..2 {
                errors.row(&[
                    self.config_hash.clone(),
                    self.seed.to_string(),
                    name.to_string(),
                    (set + 1).to_string(),
                    fmt_float(self.avg_errors[mi][set]),
                    fmt_float(self.worst_errors[mi][set]),
                ]);
            }
        }
        errors.write(&out.join("errors.csv"))?;

        let mut curves = CsvTable::new(&[
            "config_hash",
            "seed",
            "model_k",
            "n",
            "eps",
            "mu",
            "mu_eps",
        ]);
        for &(k, n, eps, mu) in &self.curves {
            curves.row(&[
                self.config_hash.clone(),
                self.seed.to_string(),
                k.to_string(),
                n.to_string(),
                fmt_float(eps),
                fmt_float(mu),
                fmt_float(if mu.is_finite() { mu * eps } else { f64::INFINITY }),
            ]);
        }
        curves.write(&out.join("mu_eps_curves.csv"))?;
        Ok(())
    }
}
