//! P1 finite elements on the unit square with homogeneous Dirichlet
//! conditions: grid, sparse assembly, banded SPD factorization, Riesz lifts.

pub mod grid;
pub mod sparse;
pub mod space;

pub use grid::{build_grid, Element, Grid};
pub use sparse::{solve_spd, solve_spd_with, BandedCholesky, SparseMatrix, SparsityPattern};
pub use space::{DiscreteSpace, StateVector};
