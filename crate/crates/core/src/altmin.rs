//! Alternating residual minimization over (v, y) in (w + W-perp) x Y.
//!
//! The y-step is the box QP of the residual quadratic. The v-step minimizes
//! the residual over the data slice exactly, through the inner-product
//! preserving maps T = K^{-1} A(y) and S = A(y)^{-1} K realized with m+3
//! SPD solves (symmetric elliptic case, trial = test space).

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::estimation::SelectionResult;
use crate::fem::{BandedCholesky, StateVector};
use crate::measurement::{MeasurementSpace, Observation};
use crate::model::AffineModel;
use crate::residual::{build_quadratic, minimize_box, QP_TOL};

/// Why the loop stopped.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum StopReason {
    /// Residual decrease fell below tol * (1 + residual).
    Converged,
    MaxIterations,
    /// A v-step failed; the state carries the partial history.
    SolverFailure(String),
}

/// Iterate trace of one run.
#[derive(Debug, Clone, Serialize)]
pub struct AltMinState {
    #[serde(skip)]
    pub state: StateVector,
    pub y: Vec<f64>,
    /// Squared residuals after every half-step, non-increasing:
    /// [R(u0,y1), R(u1,y1), R(u1,y2), R(u2,y2), ...].
    pub residual_history: Vec<f64>,
    pub iterations: usize,
    pub stop: StopReason,
    /// SPD solve count of the last v-step (m + 3 by construction).
    pub solves_per_v_step: u64,
}

impl AltMinState {
    pub fn final_residual(&self) -> f64 {
        *self.residual_history.last().expect("non-empty history")
    }

    pub fn initial_residual(&self) -> f64 {
        self.residual_history[0]
    }
}

/// Initial iterate for the loop.
pub enum AltMinInit<'a> {
    FromSelection(&'a SelectionResult),
    FromState(StateVector),
}

/// One y-step: minimize R(u, .) over the full parameter box.
pub fn y_step(model: &AffineModel, u: &StateVector) -> Result<(DVector<f64>, f64)> {
    let q = build_quadratic(model, u)?;
    let min = minimize_box(&q, &model.box_y, QP_TOL);
    Ok((min.y, min.value))
}

/// Result of a v-step with its instrumentation.
#[derive(Debug)]
pub struct VStep {
    pub v: StateVector,
    pub spd_solves: u64,
}

/// One v-step: the exact minimizer of R(., y) over the affine slice
/// { v : P_W v = w }.
///
/// With w_lift the W-element of the data, the steps are: (i) Tw from
/// K (Tw) = A(y) w_lift; (ii) the lift g of f(y) from K g = f(y); (iii) the
/// transformed basis S w_i from A(y) (S w_i) = K psi_i; then the projection
/// of g - Tw onto span{S w_i} in the V-inner product gives
/// z* = g - P_{S(W)}(g - Tw), and (iv) v* solves A(y) v* = K z*. Exactly
/// m + 3 SPD solves, all counted.
pub fn v_step(
    model: &AffineModel,
    mspace: &MeasurementSpace,
    obs: &Observation,
    y: &DVector<f64>,
) -> Result<VStep> {
    let space = &model.space;
    let m = mspace.m();
    let a = model.operator_at(y);
    let a_chol = BandedCholesky::factor(&a)?;
    let k_before = space.k_factor().solve_count();

    // (i) T w: K (Tw) = A(y) w_lift.
    let w_lift = mspace.lift_coords(&obs.w);
    let t_w = space.riesz_lift(&a.matvec(&w_lift))?;
    // (ii) Riesz lift of f(y).
    let f_y = model.rhs_at(y);
    let g = space.riesz_lift(&f_y)?;
    // (iii) transformed basis S w_i: A(y) (S w_i) = K psi_i.
    let sw: Vec<StateVector> = (0..m)
        .map(|i| a_chol.solve(&mspace.k_psi[i]))
        .collect();
    // V-Gram of the S w_i; K (S w_i) needs one matvec each (no solve).
    let k_sw: Vec<DVector<f64>> = sw.iter().map(|s| space.k().matvec(s)).collect();
    let gram = DMatrix::from_fn(m, m, |i, j| k_sw[i].dot(&sw[j]));
    let sym = (&gram + gram.transpose()) * 0.5;
    let eig = sym.symmetric_eigenvalues();
    let (lmin, lmax) = (eig.min(), eig.max());
    if lmin <= 0.0 || lmax / lmin > 1e12 {
        return Err(CoreError::IllConditionedVStep {
            cond: if lmin > 0.0 { lmax / lmin } else { f64::INFINITY },
        });
    }
    let gram_chol = sym
        .cholesky()
        .ok_or(CoreError::IllConditionedVStep { cond: f64::INFINITY })?;

    // Projection of g - Tw onto S(W), using <S w_i, g - Tw>_V = (K S w_i)' (g - Tw).
    let target = &g - &t_w;
    let rhs = DVector::from_fn(m, |i, _| k_sw[i].dot(&target));
    let alpha = gram_chol.solve(&rhs);
    // z* = g - P_{S(W)}(g - Tw).
    let mut z_star = g.clone();
    for i in 0..m {
        z_star.axpy(-alpha[i], &sw[i], 1.0);
    }
    // (iv) v*: A(y) v* = K z*.
    let v = a_chol.solve(&space.k().matvec(&z_star));

    let spd_solves = a_chol.solve_count() + (space.k_factor().solve_count() - k_before);
    Ok(VStep { v, spd_solves })
}

/// Runs the alternating loop from an initial state (corrected onto the data
/// slice first), stopping when the residual decrease per full iteration
/// drops below `tol * (1 + residual)` or after `max_iters` iterations.
/// Residuals after every half-step are recorded and non-increasing.
pub fn run_altmin(
    model: &AffineModel,
    mspace: &MeasurementSpace,
    obs: &Observation,
    init: AltMinInit,
    max_iters: usize,
    tol: f64,
) -> Result<AltMinState> {
    let mut u = match init {
        AltMinInit::FromSelection(sel) => sel.u_star().clone(),
        AltMinInit::FromState(u0) => u0,
    };
    // Force feasibility: add the W-correction so P_W u = w.
    let proj = mspace.project_coords(&u);
    for j in 0..mspace.m() {
        u.axpy(obs.w[j] - proj[j], &mspace.psi[j], 1.0);
    }

    let mut history = Vec::with_capacity(2 * max_iters + 1);
    let mut y = model.box_y.center();
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;
    let mut solves_per_v_step = 0;
    let mut prev_full: Option<f64> = None;

    for _ in 0..max_iters {
        iterations += 1;
        let (y_new, val_y) = y_step(model, &u)?;
        y = y_new;
        history.push(val_y);

        let step = match v_step(model, mspace, obs, &y) {
            Ok(s) => s,
            Err(e) => {
                stop = StopReason::SolverFailure(e.to_string());
                break;
            }
        };
        solves_per_v_step = step.spd_solves;
        u = step.v;
        // Fresh evaluation of R(u, y) through the lifted residual.
        let raw = model.residual_functional(&u, &y);
        let lift = model.space.riesz_lift(&raw)?;
        let val_v = lift.dot(&raw);
        history.push(val_v);

        if let Some(prev) = prev_full {
            if prev - val_v <= tol * (1.0 + val_v.abs()) {
                stop = StopReason::Converged;
                break;
            }
        } else if val_y - val_v <= tol * (1.0 + val_v.abs()) && val_y <= tol {
            // Already at a residual floor on the first iteration.
            stop = StopReason::Converged;
            break;
        }
        prev_full = Some(val_v);
    }

    Ok(AltMinState {
        state: u,
        y: y.iter().copied().collect(),
        residual_history: history,
        iterations,
        stop,
        solves_per_v_step,
    })
}
