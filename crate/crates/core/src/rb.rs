//! Greedy reduced-basis hierarchies on portions of the solution manifold,
//! affine reduced spaces, training accuracy bounds eps_n and stability
//! constants mu_n = mu(V_n, W).

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};
use crate::fem::{DiscreteSpace, StateVector};
use crate::measurement::MeasurementSpace;

/// Threshold below which a greedy direction is considered exhausted.
const DIRECTION_TOL: f64 = 1e-12;

/// Nested reduced bases for one manifold portion: offset plus V-orthonormal
/// directions, with the training accuracy eps[n] and stability mu[n] for
/// every depth n. eps is non-increasing and mu non-decreasing in n.
#[derive(Debug, Clone)]
pub struct RbHierarchy {
    pub offset: StateVector,
    pub basis: Vec<StateVector>,
    /// eps[n] = max over training snapshots of dist(u_i - offset, V_n);
    /// eps[0] is the raw spread around the offset. This is the training-set
    /// maximum, the standard empirical surrogate for a certified bound.
    pub eps: Vec<f64>,
    /// mu[n] = 1 / sigma_min of the n x m cross-Gramian; mu[0] = 1.
    /// Infinite entries mark unusable depths (never selected).
    pub mu: Vec<f64>,
    /// Cross-Gramian rows <phi_i, psi_j>, one row per basis direction.
    pub cross_gram: DMatrix<f64>,
    /// Training indices picked by the greedy loop.
    pub picks: Vec<usize>,
}

impl RbHierarchy {
    pub fn depth(&self) -> usize {
        self.basis.len()
    }
}

/// Greedy reduced-basis construction over centered snapshots.
///
/// Starting from the empty space, step n picks the snapshot farthest in
/// V-norm from the current span (ties to the lowest index), appends its
/// normalized residual direction, and records the new training maximum as
/// eps[n]. Stops at `m_max`, or early once the maximum residual drops below
/// 1e-12.
pub fn greedy_hierarchy(
    space: &DiscreteSpace,
    states: &[StateVector],
    offset: &StateVector,
    m_max: usize,
) -> Result<RbHierarchy> {
    if states.is_empty() {
        return Err(CoreError::EmptySnapshotSet);
    }
    let n = states.len();
    // Residuals of centered snapshots and their K-images, updated in place
    // as directions are added.
    let mut res: Vec<StateVector> = states.iter().map(|u| u - offset).collect();
    let mut k_res: Vec<DVector<f64>> = res.iter().map(|r| space.k().matvec(r)).collect();
    let mut norms2: Vec<f64> = res.iter().zip(&k_res).map(|(r, kr)| r.dot(kr)).collect();

    let max_norm = |norms2: &[f64]| -> (usize, f64) {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, &v) in norms2.iter().enumerate() {
            if v > best.1 {
                best = (i, v);
            }
        }
        (best.0, best.1.max(0.0).sqrt())
    };

    let (_, eps0) = max_norm(&norms2);
    let mut eps = vec![eps0];
    let mut basis: Vec<StateVector> = Vec::new();
    let mut picks = Vec::new();

    while basis.len() < m_max {
        let (pick, worst) = max_norm(&norms2);
        if worst < DIRECTION_TOL {
            break;
        }
        // Orthonormalize the picked residual (one reorthogonalization pass).
        let mut dir = res[pick].clone();
        for _ in 0..2 {
            for phi in &basis {
                let c = space.v_inner(phi, &dir);
                dir.axpy(-c, phi, 1.0);
            }
        }
        let norm = space.v_norm(&dir);
        if norm < DIRECTION_TOL {
            break;
        }
        dir /= norm;
        let k_dir = space.k().matvec(&dir);
        // Deflate all residuals by the new direction.
        for i in 0..n {
            let c = k_dir.dot(&res[i]);
            res[i].axpy(-c, &dir, 1.0);
            k_res[i].axpy(-c, &k_dir, 1.0);
            norms2[i] = res[i].dot(&k_res[i]);
        }
        basis.push(dir);
        picks.push(pick);
        let (_, e) = max_norm(&norms2);
        eps.push(e);
    }

    Ok(RbHierarchy {
        offset: offset.clone(),
        basis,
        eps,
        mu: Vec::new(),
        cross_gram: DMatrix::zeros(0, 0),
        picks,
    })
}

/// Stability constant mu(V_n, W) of a V-orthonormal basis against the
/// measurement space: the inverse of the smallest singular value of the
/// n x m cross-Gramian. Returns 1 for n = 0 and the infinity sentinel when
/// the Gramian is numerically rank-deficient.
pub fn stability_mu(basis: &[StateVector], mspace: &MeasurementSpace) -> Result<f64> {
    let n = basis.len();
    let m = mspace.m();
    if n > m {
        return Err(CoreError::BasisExceedsMeasurements { n, m });
    }
    if n == 0 {
        return Ok(1.0);
    }
    let g = cross_gramian(basis, mspace);
    Ok(mu_from_gram(&g))
}

fn mu_from_gram(g: &DMatrix<f64>) -> f64 {
    let sigma_min = g.clone().svd(false, false).singular_values.min();
    if sigma_min < 1e-14 {
        f64::INFINITY
    } else {
        1.0 / sigma_min
    }
}

/// Cross-Gramian G with G[(i, j)] = <phi_i, psi_j>_V.
pub fn cross_gramian(basis: &[StateVector], mspace: &MeasurementSpace) -> DMatrix<f64> {
    DMatrix::from_fn(basis.len(), mspace.m(), |i, j| mspace.k_psi[j].dot(&basis[i]))
}

impl RbHierarchy {
    /// Fills the stability column: mu[n] for n = 0..=depth, using
    /// incrementally grown cross-Gramians. Depths beyond m are marked with
    /// the infinity sentinel.
    pub fn with_stability(mut self, mspace: &MeasurementSpace) -> Self {
        let m = mspace.m();
        let depth = self.depth();
        self.cross_gram = cross_gramian(&self.basis, mspace);
        let mut mu = Vec::with_capacity(depth + 1);
        mu.push(1.0);
        for n in 1..=depth {
            if n > m {
                mu.push(f64::INFINITY);
                continue;
            }
            let g = self.cross_gram.rows(0, n).into_owned();
            mu.push(mu_from_gram(&g));
        }
        self.mu = mu;
        self
    }

    /// Extracts the affine reduced space of dimension `n`.
    pub fn affine_space(&self, n: usize, mspace: &MeasurementSpace, cell_id: usize) -> AffineReducedSpace {
        assert!(n <= self.depth());
        assert!(!self.mu.is_empty(), "hierarchy is missing stability data");
        AffineReducedSpace {
            offset: self.offset.clone(),
            basis: self.basis[..n].to_vec(),
            eps: self.eps[n],
            mu: self.mu[n],
            cross_gram: self.cross_gram.rows(0, n).into_owned(),
            pw_offset: mspace.project_coords(&self.offset),
            cell_id,
            picks: self.picks[..n].to_vec(),
        }
    }
}

/// A selected affine reduced model: offset + V-orthonormal basis with its
/// certified pair (eps, mu) and cached measurement couplings.
#[derive(Debug, Clone)]
pub struct AffineReducedSpace {
    pub offset: StateVector,
    pub basis: Vec<StateVector>,
    pub eps: f64,
    pub mu: f64,
    /// n x m cross-Gramian against the measurement basis.
    pub cross_gram: DMatrix<f64>,
    /// psi-coordinates of P_W offset.
    pub pw_offset: DVector<f64>,
    pub cell_id: usize,
    pub picks: Vec<usize>,
}

impl AffineReducedSpace {
    pub fn n(&self) -> usize {
        self.basis.len()
    }

    /// Worst-case PBDW bound contribution mu * eps of this space.
    pub fn mu_eps(&self) -> f64 {
        if self.mu.is_finite() {
            self.mu * self.eps
        } else {
            f64::INFINITY
        }
    }
}

/// V-distance of a state to the affine space: the norm of u - offset after
/// removing its projection onto the basis.
pub fn dist_to_space(space: &DiscreteSpace, rs: &AffineReducedSpace, u: &StateVector) -> f64 {
    let mut r = u - &rs.offset;
    for phi in &rs.basis {
        let c = space.v_inner(phi, &r);
        r.axpy(-c, phi, 1.0);
    }
    space.v_norm(&r)
}

/// Criterion for picking the reduced dimension inside a hierarchy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DimensionCriterion {
    /// Minimize the worst-case product mu_n * eps_n.
    Sigma,
    /// Minimize max(mu_n / mu, eps_n / eps) for target levels (eps, mu).
    EpsMu { eps: f64, mu: f64 },
}

/// Picks the dimension minimizing the criterion over n in [n_min, depth],
/// ties to the smaller n. Infinite mu poisons a depth entirely.
pub fn best_dimension(
    h: &RbHierarchy,
    criterion: DimensionCriterion,
    n_min: usize,
) -> (usize, f64) {
    assert!(!h.mu.is_empty(), "hierarchy is missing stability data");
    let score = |n: usize| -> f64 {
        let (eps, mu) = (h.eps[n], h.mu[n]);
        if !mu.is_finite() {
            return f64::INFINITY;
        }
        match criterion {
            DimensionCriterion::Sigma => {
                if eps == 0.0 {
                    0.0
                } else {
                    mu * eps
                }
            }
            DimensionCriterion::EpsMu { eps: te, mu: tm } => (mu / tm).max(eps / te),
        }
    };
    let lo = n_min.min(h.depth());
    let mut best = (lo, score(lo));
    for n in (lo + 1)..=h.depth() {
        let s = score(n);
        if s < best.1 {
            best = (n, s);
        }
    }
    best
}
