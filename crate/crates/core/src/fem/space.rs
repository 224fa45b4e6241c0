use std::sync::Arc;

use nalgebra::DVector;

use super::grid::{build_grid, Element, Grid};
use super::sparse::{solve_spd_with, BandedCholesky, SparseMatrix, SparsityPattern};
use crate::error::Result;

/// Nodal coefficient vector of a P1 function (interior DOFs only).
pub type StateVector = DVector<f64>;

/// The discrete working space: P1 functions on the unit square with zero
/// boundary values, equipped with the H^1_0 inner product <u,v> = u' K v.
/// Immutable after construction; solves on the shared factorization are
/// read-only and may run in parallel.
#[derive(Debug)]
pub struct DiscreteSpace {
    pub grid: Grid,
    pattern: Arc<SparsityPattern>,
    k: SparseMatrix,
    k_chol: BandedCholesky,
}

impl DiscreteSpace {
    pub fn new(n_per_side: usize) -> Result<Self> {
        let grid = build_grid(n_per_side)?;
        let pattern = build_pattern(&grid);
        let k = assemble_weighted_stiffness_on(&grid, &pattern, |_| 1.0);
        let k_chol = BandedCholesky::factor(&k)?;
        Ok(DiscreteSpace {
            grid,
            pattern,
            k,
            k_chol,
        })
    }

    pub fn n_dof(&self) -> usize {
        self.grid.n_dof
    }

    /// The V-inner-product (stiffness) matrix.
    pub fn k(&self) -> &SparseMatrix {
        &self.k
    }

    pub fn k_factor(&self) -> &BandedCholesky {
        &self.k_chol
    }

    pub fn pattern(&self) -> &Arc<SparsityPattern> {
        &self.pattern
    }

    /// Stiffness contribution with a per-element scalar weight,
    /// sum_T w(T) |T| grad(phi_i) . grad(phi_j).
    pub fn assemble_weighted_stiffness(&self, weight: impl Fn(&Element) -> f64) -> SparseMatrix {
        assemble_weighted_stiffness_on(&self.grid, &self.pattern, weight)
    }

    /// Load vector for a constant source: entry i = constant * integral(phi_i).
    pub fn assemble_load(&self, constant: f64) -> StateVector {
        let mut f = DVector::zeros(self.n_dof());
        if constant == 0.0 {
            return f;
        }
        for el in self.grid.elements() {
            let contrib = constant * el.area / 3.0;
            for &node in &el.nodes {
                if let Some(dof) = self.grid.node_dof(node) {
                    f[dof] += contrib;
                }
            }
        }
        f
    }

    /// Riesz lift of a dual vector: solves K g = functional, so that
    /// <g, v> = functional(v) for all v and ||g||_V equals the dual norm.
    pub fn riesz_lift(&self, functional: &DVector<f64>) -> Result<StateVector> {
        solve_spd_with(&self.k, &self.k_chol, functional)
    }

    pub fn v_inner(&self, u: &StateVector, v: &StateVector) -> f64 {
        assert_eq!(u.len(), self.n_dof());
        assert_eq!(v.len(), self.n_dof());
        u.dot(&self.k.matvec(v))
    }

    pub fn v_norm(&self, u: &StateVector) -> f64 {
        self.v_inner(u, u).max(0.0).sqrt()
    }
}

fn build_pattern(grid: &Grid) -> Arc<SparsityPattern> {
    let mut pairs = Vec::with_capacity(grid.elements().len() * 9);
    for el in grid.elements() {
        for &a in &el.nodes {
            let Some(da) = grid.node_dof(a) else { continue };
            for &b in &el.nodes {
                if let Some(db) = grid.node_dof(b) {
                    pairs.push((da, db));
                }
            }
        }
    }
    Arc::new(SparsityPattern::from_pairs(grid.n_dof, &mut pairs))
}

fn assemble_weighted_stiffness_on(
    grid: &Grid,
    pattern: &Arc<SparsityPattern>,
    weight: impl Fn(&Element) -> f64,
) -> SparseMatrix {
    let mut m = SparseMatrix::zeros(Arc::clone(pattern));
    for el in grid.elements() {
        let w = weight(el);
        if w == 0.0 {
            continue;
        }
        let local = local_stiffness(grid, el);
        for (a, &na) in el.nodes.iter().enumerate() {
            let Some(da) = grid.node_dof(na) else { continue };
            for (b, &nb) in el.nodes.iter().enumerate() {
                if let Some(db) = grid.node_dof(nb) {
                    m.add_at(da, db, w * local[a][b]);
                }
            }
        }
    }
    m
}

/// Unweighted local stiffness |T| grad(phi_a) . grad(phi_b) for a P1 triangle.
fn local_stiffness(grid: &Grid, el: &Element) -> [[f64; 3]; 3] {
    let p: Vec<(f64, f64)> = el.nodes.iter().map(|&n| grid.node_coord(n)).collect();
    let two_a = 2.0 * el.area;
    let mut grads = [[0.0f64; 2]; 3];
    for (a, g) in grads.iter_mut().enumerate() {
        let (j, k) = ((a + 1) % 3, (a + 2) % 3);
        g[0] = (p[j].1 - p[k].1) / two_a;
        g[1] = (p[k].0 - p[j].0) / two_a;
    }
    let mut local = [[0.0f64; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            local[a][b] = el.area * (grads[a][0] * grads[b][0] + grads[a][1] * grads[b][1]);
        }
    }
    local
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::sparse::solve_spd;
    use rand::prelude::*;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random_state(space: &DiscreteSpace, rng: &mut impl Rng) -> StateVector {
        DVector::from_fn(space.n_dof(), |_, _| rng.random::<f64>() - 0.5)
    }

    #[test]
    fn unit_weight_reproduces_k() {
        let space = DiscreteSpace::new(8).unwrap();
        let a = space.assemble_weighted_stiffness(|_| 1.0);
        let diff: f64 = a
            .values
            .iter()
            .zip(space.k().values.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-14);
        assert!(space.k().symmetry_defect() < 1e-14);
    }

    #[test]
    fn zero_weight_gives_zero_matrix() {
        let space = DiscreteSpace::new(8).unwrap();
        let a = space.assemble_weighted_stiffness(|_| 0.0);
        assert!(a.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quarter_partition_sums_to_k() {
        let space = DiscreteSpace::new(8).unwrap();
        let quads = [
            (0.0, 0.0),
            (0.5, 0.0),
            (0.0, 0.5),
            (0.5, 0.5),
        ];
        let parts: Vec<SparseMatrix> = quads
            .iter()
            .map(|&(x0, y0)| {
                space.assemble_weighted_stiffness(|el| {
                    let (x, y) = el.barycenter;
                    if x >= x0 && x < x0 + 0.5 && y >= y0 && y < y0 + 0.5 {
                        1.0
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        let sum = SparseMatrix::linear_combination(&[
            (1.0, &parts[0]),
            (1.0, &parts[1]),
            (1.0, &parts[2]),
            (1.0, &parts[3]),
        ]);
        let diff: f64 = sum
            .values
            .iter()
            .zip(space.k().values.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-13);
    }

    #[test]
    fn constant_load_entries() {
        // h = 2^-2: each interior node collects 6 triangles of area h^2/2,
        // so the exact entry is h^2 = 2^-4.
        let space = DiscreteSpace::new(4).unwrap();
        let f = space.assemble_load(1.0);
        for i in 0..f.len() {
            assert!((f[i] - 0.0625).abs() < 1e-15);
        }
        let f0 = space.assemble_load(0.0);
        assert_eq!(f0.norm(), 0.0);
        let f3 = space.assemble_load(3.0);
        assert!((&f3 - &(3.0 * &f)).norm() < 1e-15);
    }

    #[test]
    fn riesz_lift_inverts_k() {
        let space = DiscreteSpace::new(8).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        for _ in 0..5 {
            let v = random_state(&space, &mut rng);
            let g = space.riesz_lift(&space.k().matvec(&v)).unwrap();
            assert!((&g - &v).norm() <= 1e-10 * v.norm());
        }
        // Riesz identity: ||lift(l)||_V^2 = l . lift(l).
        let ell = random_state(&space, &mut rng);
        let g = space.riesz_lift(&ell).unwrap();
        let lhs = space.v_inner(&g, &g);
        let rhs = ell.dot(&g);
        assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs());
        assert_eq!(space.riesz_lift(&DVector::zeros(space.n_dof())).unwrap().norm(), 0.0);
    }

    #[test]
    fn v_inner_is_symmetric_and_positive() {
        let space = DiscreteSpace::new(8).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        for _ in 0..10 {
            let u = random_state(&space, &mut rng);
            let v = random_state(&space, &mut rng);
            let uv = space.v_inner(&u, &v);
            let vu = space.v_inner(&v, &u);
            assert!((uv - vu).abs() < 1e-12 * uv.abs().max(1.0));
            assert!(uv.abs() <= space.v_norm(&u) * space.v_norm(&v) * (1.0 + 1e-12));
            assert!(space.v_inner(&u, &u) > 0.0);
        }
        let zero = DVector::zeros(space.n_dof());
        let v = random_state(&space, &mut rng);
        assert_eq!(space.v_inner(&zero, &v), 0.0);
    }

    #[test]
    fn spd_probe_on_weighted_assemblies() {
        let space = DiscreteSpace::new(8).unwrap();
        let a = space.assemble_weighted_stiffness(|el| if el.barycenter.0 < 0.5 { 2.0 } else { 0.3 });
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
        for _ in 0..20 {
            let v = random_state(&space, &mut rng);
            assert!(v.dot(&a.matvec(&v)) > 0.0);
        }
    }

    #[test]
    fn mesh_convergence_smoke() {
        // Energy norm of the a=1 solution changes below 1% from n=32 to 64.
        let norms: Vec<f64> = [32usize, 64]
            .iter()
            .map(|&n| {
                let space = DiscreteSpace::new(n).unwrap();
                let f = space.assemble_load(1.0);
                let u = solve_spd(space.k(), &f).unwrap();
                space.v_norm(&u)
            })
            .collect();
        assert!((norms[1] - norms[0]).abs() / norms[1] < 0.01);
    }
}
