//! The affine-in-parameter operator family A(y) = A0 + sum y_j A_j with its
//! right-hand side, the solution map y -> u(y), ellipticity constants, and
//! snapshot-set generation.

use std::sync::Arc;

use nalgebra::DVector;
use rand::prelude::*;
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fem::sparse::solve_spd_with;
use crate::fem::{BandedCholesky, DiscreteSpace, SparseMatrix, StateVector};

/// Axis-aligned rectangle of admissible parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ParameterBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() || lo.iter().zip(&hi).any(|(a, b)| a >= b) {
            return Err(CoreError::InvalidBox);
        }
        Ok(ParameterBox { lo, hi })
    }

    /// The symmetric box [-1, 1]^d.
    pub fn symmetric_unit(d: usize) -> Self {
        ParameterBox {
            lo: vec![-1.0; d],
            hi: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn center(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| 0.5 * (self.lo[i] + self.hi[i]))
    }

    /// Closed-box membership test.
    pub fn contains(&self, y: &DVector<f64>) -> bool {
        y.len() == self.dim()
            && (0..self.dim()).all(|i| y[i] >= self.lo[i] && y[i] <= self.hi[i])
    }

    /// Splits at the midpoint of coordinate `i`.
    pub fn split(&self, i: usize) -> (ParameterBox, ParameterBox) {
        let mid = 0.5 * (self.lo[i] + self.hi[i]);
        let mut left = self.clone();
        let mut right = self.clone();
        left.hi[i] = mid;
        right.lo[i] = mid;
        (left, right)
    }

    pub fn sample_uniform(&self, rng: &mut impl Rng) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| {
            self.lo[i] + (self.hi[i] - self.lo[i]) * rng.random::<f64>()
        })
    }
}

/// Named partitions of the unit square into diffusivity subdomains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// 2x2 uniform grid, cells in row-major order.
    Grid2x2,
    /// 4x4 uniform grid, cells in row-major order.
    Grid4x4,
    /// Quarter-corner partition split at 3/4.
    Test1Partition1,
    /// Mirror image of `Test1Partition1` across x + y = 1, split at 1/4.
    Test1Partition2,
}

/// Half-open rectangle [x0, x1) x [y0, y1) used for subdomain membership;
/// barycenters of a power-of-two grid never hit the boundaries, so the
/// half-open convention is immaterial for assembly.
#[derive(Debug, Clone, Copy)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, p: (f64, f64)) -> bool {
        p.0 >= self.x0 && p.0 < self.x1 && p.1 >= self.y0 && p.1 < self.y1
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

impl Partition {
    pub fn cells(&self) -> Vec<Rect> {
        let rect = |x0: f64, x1: f64, y0: f64, y1: f64| Rect { x0, x1, y0, y1 };
        match self {
            Partition::Grid2x2 => grid_cells(2),
            Partition::Grid4x4 => grid_cells(4),
            Partition::Test1Partition1 => vec![
                rect(0.0, 0.75, 0.0, 0.75),
                rect(0.0, 0.75, 0.75, 1.0),
                rect(0.75, 1.0, 0.0, 0.75),
                rect(0.75, 1.0, 0.75, 1.0),
            ],
            Partition::Test1Partition2 => vec![
                rect(0.25, 1.0, 0.25, 1.0),
                rect(0.25, 1.0, 0.0, 0.25),
                rect(0.0, 0.25, 0.25, 1.0),
                rect(0.0, 0.25, 0.0, 0.25),
            ],
        }
    }

    pub fn dim(&self) -> usize {
        self.cells().len()
    }
}

fn grid_cells(k: usize) -> Vec<Rect> {
    let w = 1.0 / k as f64;
    let mut cells = Vec::with_capacity(k * k);
    for j in 0..k {
        for i in 0..k {
            cells.push(Rect {
                x0: i as f64 * w,
                x1: (i + 1) as f64 * w,
                y0: j as f64 * w,
                y1: (j + 1) as f64 * w,
            });
        }
    }
    cells
}

/// Serializable description of an affine diffusion model, sufficient to
/// rebuild it deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub partition: Partition,
    pub a_bar: f64,
    pub c: Vec<f64>,
    pub n_per_side: usize,
    /// Constant source term.
    #[serde(default = "default_source")]
    pub source: f64,
}

fn default_source() -> f64 {
    1.0
}

/// Affine operator family over a parameter box: A(y) = A0 + sum y_j A_j and
/// f(y) = f0 + sum y_j f_j. For the diffusion models built here A0 = a_bar K,
/// f0 is the constant load and f_j = 0 for j >= 1, but all code paths accept
/// general affine right-hand sides.
#[derive(Debug)]
pub struct AffineModel {
    pub space: Arc<DiscreteSpace>,
    /// a[0] = A0, a[j] = A_j.
    pub a: Vec<SparseMatrix>,
    /// f[0] = f0, f[j] = f_j.
    pub f: Vec<StateVector>,
    pub box_y: ParameterBox,
    pub spec: ModelSpec,
}

/// Assembles the diffusion model a(y) = a_bar + sum_l c_l X_{D_l} y_l over
/// Y = [-1,1]^d with constant source f = 1.
pub fn build_model(
    space: Arc<DiscreteSpace>,
    partition: Partition,
    a_bar: f64,
    c: &[f64],
) -> Result<AffineModel> {
    build_model_with_source(space, partition, a_bar, c, 1.0)
}

pub fn build_model_with_source(
    space: Arc<DiscreteSpace>,
    partition: Partition,
    a_bar: f64,
    c: &[f64],
    source: f64,
) -> Result<AffineModel> {
    let cells = partition.cells();
    if c.len() != cells.len() {
        return Err(CoreError::PartitionMismatch {
            expected: cells.len(),
            got: c.len(),
        });
    }
    let worst = a_bar - c.iter().fold(0.0f64, |m, &cl| m.max(cl.abs()));
    if worst <= 0.0 {
        log::warn!(
            "coefficient range reaches {:.3e} <= 0; ellipticity may be lost on the box",
            worst
        );
    }
    let mut a = Vec::with_capacity(c.len() + 1);
    a.push(space.assemble_weighted_stiffness(|_| a_bar));
    for (cell, &cl) in cells.iter().zip(c) {
        a.push(space.assemble_weighted_stiffness(|el| {
            if cell.contains(el.barycenter) {
                cl
            } else {
                0.0
            }
        }));
    }
    let mut f = vec![space.assemble_load(source)];
    f.extend((0..c.len()).map(|_| DVector::zeros(space.n_dof())));
    let spec = ModelSpec {
        partition,
        a_bar,
        c: c.to_vec(),
        n_per_side: space.grid.n_per_side,
        source,
    };
    Ok(AffineModel {
        space,
        a,
        f,
        box_y: ParameterBox::symmetric_unit(c.len()),
        spec,
    })
}

impl AffineModel {
    pub fn dim(&self) -> usize {
        self.a.len() - 1
    }

    /// Rebuilds a model from its serialized description.
    pub fn from_spec(spec: &ModelSpec) -> Result<AffineModel> {
        let space = Arc::new(DiscreteSpace::new(spec.n_per_side)?);
        build_model_with_source(space, spec.partition, spec.a_bar, &spec.c, spec.source)
    }

    /// Operator-norm framing constants (r, R) of the coefficient field over
    /// the parameter box: the range of a_bar + c_l y_l across cells and
    /// parameter endpoints. Errors when ellipticity is lost (r <= 0).
    pub fn ellipticity_bounds(&self) -> Result<(f64, f64)> {
        let mut r = f64::INFINITY;
        let mut big_r = f64::NEG_INFINITY;
        for (l, &cl) in self.spec.c.iter().enumerate() {
            let at_lo = self.spec.a_bar + cl * self.box_y.lo[l];
            let at_hi = self.spec.a_bar + cl * self.box_y.hi[l];
            r = r.min(at_lo.min(at_hi));
            big_r = big_r.max(at_lo.max(at_hi));
        }
        if r <= 0.0 {
            return Err(CoreError::EllipticityLost(r));
        }
        Ok((r, big_r))
    }

    /// A(y) = A0 + sum y_j A_j on the shared sparsity pattern.
    pub fn operator_at(&self, y: &DVector<f64>) -> SparseMatrix {
        let mut terms: Vec<(f64, &SparseMatrix)> = vec![(1.0, &self.a[0])];
        for j in 0..self.dim() {
            terms.push((y[j], &self.a[j + 1]));
        }
        SparseMatrix::linear_combination(&terms)
    }

    /// f(y) = f0 + sum y_j f_j.
    pub fn rhs_at(&self, y: &DVector<f64>) -> StateVector {
        let mut f = self.f[0].clone();
        for j in 0..self.dim() {
            if self.f[j + 1].norm() != 0.0 {
                f.axpy(y[j], &self.f[j + 1], 1.0);
            }
        }
        f
    }

    /// Solves A(y) u = f(y). Parameters outside the box are rejected rather
    /// than clamped: clamping would corrupt admissibility statistics.
    pub fn solve_state(&self, y: &DVector<f64>) -> Result<StateVector> {
        if !self.box_y.contains(y) {
            return Err(CoreError::ParameterOutOfBox(y.iter().copied().collect()));
        }
        let a = self.operator_at(y);
        let chol = BandedCholesky::factor(&a)?;
        solve_spd_with(&a, &chol, &self.rhs_at(y))
    }

    /// Residual functional A(y)v - f(y) as a dual vector.
    pub fn residual_functional(&self, v: &StateVector, y: &DVector<f64>) -> DVector<f64> {
        self.operator_at(y).matvec(v) - self.rhs_at(y)
    }

    /// L2 distance between the coefficient fields a(y1) and a(y2), computed
    /// exactly from the per-cell areas of the piecewise-constant expansion.
    pub fn coefficient_l2_distance(&self, y1: &DVector<f64>, y2: &DVector<f64>) -> f64 {
        let cells = self.spec.partition.cells();
        let mut acc = 0.0;
        for (l, cell) in cells.iter().enumerate() {
            let d = self.spec.c[l] * (y1[l] - y2[l]);
            acc += cell.area() * d * d;
        }
        acc.sqrt()
    }
}

/// Training or test snapshots: parameters with their solved states.
#[derive(Debug, Clone)]
pub struct SnapshotSet {
    pub parameters: Vec<DVector<f64>>,
    pub states: Vec<StateVector>,
    pub seed: u64,
}

impl SnapshotSet {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Draws `n` parameters i.i.d. uniform on the box from a seeded
/// xoshiro256++ stream and solves the corresponding states in parallel.
/// Reproducible for a fixed seed.
pub fn sample_snapshots(model: &AffineModel, n: usize, seed: u64) -> Result<SnapshotSet> {
    if n == 0 {
        return Err(CoreError::EmptySnapshotSet);
    }
    let parameters = sample_parameters(&model.box_y, n, seed);
    let states = solve_states(model, &parameters)?;
    Ok(SnapshotSet {
        parameters,
        states,
        seed,
    })
}

/// The parameter stream of [`sample_snapshots`] without the solves.
pub fn sample_parameters(box_y: &ParameterBox, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    (0..n).map(|_| box_y.sample_uniform(&mut rng)).collect()
}

/// Solves the given parameters in parallel, preserving order.
pub fn solve_states(model: &AffineModel, parameters: &[DVector<f64>]) -> Result<Vec<StateVector>> {
    parameters
        .par_iter()
        .map(|y| model.solve_state(y))
        .collect()
}
