use crate::error::{CoreError, Result};

/// A triangle of the mesh, stored with global node ids and precomputed geometry.
#[derive(Debug, Clone)]
pub struct Element {
    /// Global grid-node ids of the three vertices (counter-clockwise).
    pub nodes: [usize; 3],
    /// Barycenter, used for subdomain assignment.
    pub barycenter: (f64, f64),
    pub area: f64,
}

/// Uniform P1 triangulation of the unit square.
///
/// Each of the `n_per_side x n_per_side` square cells is split along the
/// (1,1)-diagonal into two triangles. Grid nodes are numbered row-major over
/// the `(n_per_side+1)^2` lattice points; degrees of freedom are the interior
/// nodes only (homogeneous Dirichlet), also row-major.
#[derive(Debug, Clone)]
pub struct Grid {
    pub n_per_side: usize,
    pub h: f64,
    /// Interior nodes per row/column: `n_per_side - 1`.
    pub nx: usize,
    pub n_dof: usize,
    elements: Vec<Element>,
}

/// Builds the uniform triangulation.
///
/// `n_per_side` must be a power of two >= 4 so that all quarter-aligned
/// subdomain boundaries fall on mesh lines.
pub fn build_grid(n_per_side: usize) -> Result<Grid> {
    if n_per_side < 4 || !n_per_side.is_power_of_two() {
        return Err(CoreError::InvalidGrid(n_per_side));
    }
    let n = n_per_side;
    let h = 1.0 / n as f64;
    let nx = n - 1;
    let mut elements = Vec::with_capacity(2 * n * n);
    let node = |i: usize, j: usize| j * (n + 1) + i;
    for cj in 0..n {
        for ci in 0..n {
            let p00 = node(ci, cj);
            let p10 = node(ci + 1, cj);
            let p01 = node(ci, cj + 1);
            let p11 = node(ci + 1, cj + 1);
            let (x0, y0) = (ci as f64 * h, cj as f64 * h);
            // Lower triangle (p00, p10, p11), upper triangle (p00, p11, p01).
            elements.push(Element {
                nodes: [p00, p10, p11],
                barycenter: (x0 + 2.0 * h / 3.0, y0 + h / 3.0),
                area: 0.5 * h * h,
            });
            elements.push(Element {
                nodes: [p00, p11, p01],
                barycenter: (x0 + h / 3.0, y0 + 2.0 * h / 3.0),
                area: 0.5 * h * h,
            });
        }
    }
    Ok(Grid {
        n_per_side: n,
        h,
        nx,
        n_dof: nx * nx,
        elements,
    })
}

impl Grid {
    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    /// Coordinates of a global grid node.
    pub fn node_coord(&self, node: usize) -> (f64, f64) {
        let w = self.n_per_side + 1;
        let i = node % w;
        let j = node / w;
        (i as f64 * self.h, j as f64 * self.h)
    }

    /// Interior DOF index of a grid node, or `None` on the boundary.
    pub fn node_dof(&self, node: usize) -> Option<usize> {
        let w = self.n_per_side + 1;
        let i = node % w;
        let j = node / w;
        if i == 0 || j == 0 || i == self.n_per_side || j == self.n_per_side {
            None
        } else {
            Some((j - 1) * self.nx + (i - 1))
        }
    }

    /// Grid node id of an interior DOF.
    pub fn dof_node(&self, dof: usize) -> usize {
        let i = dof % self.nx + 1;
        let j = dof / self.nx + 1;
        j * (self.n_per_side + 1) + i
    }

    /// Coordinates of an interior DOF.
    pub fn dof_coord(&self, dof: usize) -> (f64, f64) {
        self.node_coord(self.dof_node(dof))
    }

    /// DOF permutation realizing the reflection across the line x + y = 1.
    ///
    /// The triangulation maps to itself under this reflection (the element
    /// diagonals run along (1,1), which the reflection preserves up to sign),
    /// so `perm[d]` is the DOF at the mirrored node of DOF `d`.
    pub fn mirror_permutation(&self) -> Vec<usize> {
        (0..self.n_dof)
            .map(|d| {
                let i = d % self.nx + 1;
                let j = d / self.nx + 1;
                let (mi, mj) = (self.n_per_side - j, self.n_per_side - i);
                (mj - 1) * self.nx + (mi - 1)
            })
            .collect()
    }
}
