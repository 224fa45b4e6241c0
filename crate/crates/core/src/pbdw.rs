//! The PBDW one-space estimator for an affine reduced model:
//! u*(w) = argmin { ||v - P_V v|| : P_W v = w }.

use crate::error::{CoreError, Result};
use crate::fem::StateVector;
use crate::measurement::{MeasurementSpace, Observation};
use crate::rb::AffineReducedSpace;

/// Result of a PBDW reconstruction: the estimator u* and its reduced-space
/// component v* (u* = v* + correction in W).
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub u_star: StateVector,
    pub v_star: StateVector,
}

/// Reconstructs a state from an observation with the given affine space.
///
/// Solved through the reduced m x n least-squares problem over the
/// cross-Gramian: v* is the space element whose W-projection best matches w,
/// and u* adds the data-consistent W-correction, so that P_W u* = w and
/// u* - w_lift is W-orthogonal. Requires n <= m and a finite stability
/// constant; a near-singular Gramian is refused so callers can fall back to
/// a smaller dimension.
pub fn reconstruct(
    rs: &AffineReducedSpace,
    mspace: &MeasurementSpace,
    obs: &Observation,
) -> Result<Reconstruction> {
    let n = rs.n();
    let m = mspace.m();
    if n > m {
        return Err(CoreError::BasisExceedsMeasurements { n, m });
    }
    if !rs.mu.is_finite() {
        return Err(CoreError::SingularCrossGramian {
            sigma_min: 0.0,
            sigma_max: f64::NAN,
        });
    }
    let w = &obs.w;
    assert_eq!(w.len(), m, "observation does not match the measurement space");

    let mut v_star = rs.offset.clone();
    if n > 0 {
        // min_c || (w - P_W offset) - G^T c ||_2
        let gt = rs.cross_gram.transpose();
        let svd = gt.svd(true, true);
        let sigma_max = svd.singular_values.max();
        let sigma_min = svd.singular_values.min();
        if sigma_min < 1e-10 * sigma_max {
            return Err(CoreError::SingularCrossGramian { sigma_min, sigma_max });
        }
        let rhs = w - &rs.pw_offset;
        let c = svd
            .solve(&rhs, 0.0)
            .map_err(|e| CoreError::AllCellsFailed(e.to_string()))?;
        for i in 0..n {
            v_star.axpy(c[i], &rs.basis[i], 1.0);
        }
    }
    // W-correction: u* = v* + sum_j (w_j - <psi_j, v*>) psi_j.
    let proj = mspace.project_coords(&v_star);
    let mut u_star = v_star.clone();
    for j in 0..m {
        u_star.axpy(w[j] - proj[j], &mspace.psi[j], 1.0);
    }
    Ok(Reconstruction { u_star, v_star })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::DiscreteSpace;
    use crate::measurement::{build_measurements, Placement};
    use crate::model::{build_model, sample_snapshots, Partition};
    use crate::rb::{dist_to_space, greedy_hierarchy};
    use nalgebra::DVector;
    use rand::prelude::*;
    use rand_xoshiro::Xoshiro256PlusPlus;
    use std::sync::Arc;

    struct Setup {
        space: Arc<DiscreteSpace>,
        ms: MeasurementSpace,
        rs: AffineReducedSpace,
        model: crate::model::AffineModel,
    }

    fn setup(n: usize) -> Setup {
        let space = Arc::new(DiscreteSpace::new(16).unwrap());
        let ms = build_measurements(&space, Placement::Random { seed: 21 }, 8, 2.0 * space.grid.h)
            .unwrap();
        let model = build_model(Arc::clone(&space), Partition::Grid2x2, 1.0, &[0.9; 4]).unwrap();
        let snaps = sample_snapshots(&model, 60, 17).unwrap();
        let offset = model.solve_state(&model.box_y.center()).unwrap();
        let h = greedy_hierarchy(&space, &snaps.states, &offset, n)
            .unwrap()
            .with_stability(&ms);
        let rs = h.affine_space(n.min(h.depth()), &ms, 0);
        Setup { space, ms, rs, model }
    }

    #[test]
    fn exact_on_the_reduced_space() {
        let s = setup(4);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        // Synthesize u = offset + Phi c0.
        let mut u = s.rs.offset.clone();
        for phi in &s.rs.basis {
            u.axpy(rng.random::<f64>() - 0.5, phi, 1.0);
        }
        let rec = reconstruct(&s.rs, &s.ms, &s.ms.project(&u)).unwrap();
        assert!(s.space.v_norm(&(&rec.u_star - &u)) <= 1e-8 * s.space.v_norm(&u));
    }

    #[test]
    fn zero_dimension_returns_corrected_offset() {
        let s = setup(0);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        let u = DVector::from_fn(s.space.n_dof(), |_, _| rng.random::<f64>() - 0.5);
        let obs = s.ms.project(&u);
        let rec = reconstruct(&s.rs, &s.ms, &obs).unwrap();
        assert_eq!(rec.v_star, s.rs.offset);
        // u* = offset + lift(w - P_W offset).
        let expected = {
            let proj = s.ms.project_coords(&s.rs.offset);
            let mut v = s.rs.offset.clone();
            for j in 0..s.ms.m() {
                v.axpy(obs.w[j] - proj[j], &s.ms.psi[j], 1.0);
            }
            v
        };
        assert!(s.space.v_norm(&(&rec.u_star - &expected)) < 1e-12);
    }

    #[test]
    fn data_consistency_and_error_bound() {
        let s = setup(4);
        let snaps = sample_snapshots(&s.model, 30, 99).unwrap();
        for u in &snaps.states {
            let obs = s.ms.project(u);
            let rec = reconstruct(&s.rs, &s.ms, &obs).unwrap();
            // P_W u* = w.
            let w_err = (s.ms.project_coords(&rec.u_star) - &obs.w).norm();
            assert!(w_err <= 1e-9);
            // u* - w_lift is W-orthogonal.
            let residual = &rec.u_star - &s.ms.lift_coords(&obs.w);
            assert!(s.ms.project_coords(&residual).norm() <= 1e-9);
            // Pointwise PBDW bound.
            let err = s.space.v_norm(&(&rec.u_star - u));
            let bound = s.rs.mu * dist_to_space(&s.space, &s.rs, u);
            assert!(err <= bound + 1e-8);
        }
    }

    #[test]
    fn estimation_map_is_affine() {
        let s = setup(3);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        let m = s.ms.m();
        let w0 = Observation {
            w: DVector::zeros(m),
            raw_z: None,
            noise: None,
        };
        let base = reconstruct(&s.rs, &s.ms, &w0).unwrap().u_star;
        let mk = |w: DVector<f64>| Observation { w, raw_z: None, noise: None };
        let w1 = DVector::from_fn(m, |_, _| rng.random::<f64>() - 0.5);
        let w2 = DVector::from_fn(m, |_, _| rng.random::<f64>() - 0.5);
        let (alpha, beta) = (0.7, -1.3);
        let lhs = reconstruct(&s.rs, &s.ms, &mk(alpha * &w1 + beta * &w2))
            .unwrap()
            .u_star;
        let r1 = reconstruct(&s.rs, &s.ms, &mk(w1)).unwrap().u_star;
        let r2 = reconstruct(&s.rs, &s.ms, &mk(w2)).unwrap().u_star;
        // The map minus its value at zero is linear.
        let rhs = &base + alpha * (&r1 - &base) + beta * (&r2 - &base);
        assert!(s.space.v_norm(&(&lhs - &rhs)) <= 1e-9 * s.space.v_norm(&rhs).max(1.0));
    }
}
