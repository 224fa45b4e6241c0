//! Local-average measurement functionals, the measurement space W with its
//! Riesz representers and orthonormal basis, projections onto W, and noisy
//! observations.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fem::{DiscreteSpace, StateVector};

/// Axis-aligned measurement box (center, width).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasBox {
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
}

/// How measurement boxes are placed in the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Placement {
    /// Centers uniform over positions keeping the box inside the square;
    /// collisions allowed.
    Random { seed: u64 },
    /// Centers on the k x k sub-grid of cell midpoints, m = k^2.
    EvenlySpaced,
}

/// Serializable description of a measurement setup (replayable).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementLayout {
    pub m: usize,
    pub box_width: f64,
    pub placement: Placement,
    pub boxes: Vec<MeasBox>,
}

/// The measurement space W spanned by the Riesz representers of the
/// local-average functionals, with a V-orthonormal basis and the transform
/// matrix between the two. Immutable after construction.
#[derive(Debug)]
pub struct MeasurementSpace {
    pub layout: MeasurementLayout,
    /// Dual vectors of the functionals l_i.
    pub ell: Vec<DVector<f64>>,
    /// Riesz representers omega_i = K^{-1} l_i.
    pub omega: Vec<StateVector>,
    /// V-orthonormal basis psi_j of W.
    pub psi: Vec<StateVector>,
    /// K * psi_j, cached for fast inner products against psi.
    pub k_psi: Vec<DVector<f64>>,
    /// Transform with psi_j = sum_i transform[(j, i)] * omega_i.
    pub transform: DMatrix<f64>,
    /// Spectral norm of `transform`.
    pub transform_norm: f64,
}

/// An observation: coordinates of the W-component in the psi basis, with the
/// raw functional values and a noise record when applicable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Observation {
    pub w: DVector<f64>,
    pub raw_z: Option<DVector<f64>>,
    pub noise: Option<NoiseRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub noise_level: f64,
    pub seed: u64,
    pub eta: Vec<f64>,
    /// Certified V-norm bound ||M|| * ||eta||_2 on the W-space perturbation.
    pub eps_noise: f64,
}

/// Builds the measurement space for `m` box averages of the given width.
///
/// Functionals are l_i(u) = |B_i|^{-1} integral of u over B_i, assembled by
/// exact per-element quadrature (triangle-box clipping); representers by
/// Riesz lift; the orthonormal basis by modified Gram-Schmidt in the V-inner
/// product with one reorthogonalization pass.
pub fn build_measurements(
    space: &DiscreteSpace,
    placement: Placement,
    m: usize,
    box_width: f64,
) -> Result<MeasurementSpace> {
    if m == 0 {
        return Err(CoreError::InvalidMeasurement(
            "at least one functional is required".into(),
        ));
    }
    if m > space.n_dof() {
        return Err(CoreError::InvalidMeasurement(format!(
            "m = {} exceeds the number of degrees of freedom {}",
            m,
            space.n_dof()
        )));
    }
    let h = space.grid.h;
    let ratio = box_width / h;
    if box_width <= 0.0 || box_width > 1.0 || (ratio - ratio.round()).abs() > 1e-9 {
        return Err(CoreError::InvalidMeasurement(format!(
            "box width {} must be a positive multiple of h = {} inside the square",
            box_width, h
        )));
    }
    let boxes = place_boxes(placement, m, box_width)?;
    build_from_boxes(space, MeasurementLayout {
        m,
        box_width,
        placement,
        boxes,
    })
}

/// Rebuilds a measurement space from a stored layout (exact replay).
pub fn build_from_layout(
    space: &DiscreteSpace,
    layout: &MeasurementLayout,
) -> Result<MeasurementSpace> {
    build_from_boxes(space, layout.clone())
}

fn place_boxes(placement: Placement, m: usize, width: f64) -> Result<Vec<MeasBox>> {
    match placement {
        Placement::Random { seed } => {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            let half = width / 2.0;
            Ok((0..m)
                .map(|_| {
                    let cx = half + (1.0 - width) * rng.random::<f64>();
                    let cy = half + (1.0 - width) * rng.random::<f64>();
                    MeasBox { cx, cy, width }
                })
                .collect())
        }
        Placement::EvenlySpaced => {
            let k = (m as f64).sqrt().round() as usize;
            if k * k != m {
                return Err(CoreError::InvalidMeasurement(format!(
                    "evenly spaced placement requires a square m, got {}",
                    m
                )));
            }
            let mut boxes = Vec::with_capacity(m);
            for j in 0..k {
                for i in 0..k {
                    boxes.push(MeasBox {
                        cx: (2 * i + 1) as f64 / (2 * k) as f64,
                        cy: (2 * j + 1) as f64 / (2 * k) as f64,
                        width,
                    });
                }
            }
            Ok(boxes)
        }
    }
}

fn build_from_boxes(space: &DiscreteSpace, layout: MeasurementLayout) -> Result<MeasurementSpace> {
    let m = layout.m;
    let ell: Vec<DVector<f64>> = layout
        .boxes
        .iter()
        .map(|b| assemble_box_average(space, b))
        .collect();
    let omega: Vec<StateVector> = ell
        .iter()
        .map(|l| space.riesz_lift(l))
        .collect::<Result<_>>()?;

    // Gram condition guard against numerically dependent functionals.
    let gram = DMatrix::from_fn(m, m, |i, j| ell[i].dot(&omega[j]));
    let sym = (&gram + gram.transpose()) * 0.5;
    let eig = sym.symmetric_eigenvalues();
    let (lmin, lmax) = (eig.min(), eig.max());
    if lmin <= 0.0 || lmax / lmin > 1e12 {
        return Err(CoreError::DependentFunctionals {
            cond: if lmin > 0.0 { lmax / lmin } else { f64::INFINITY },
        });
    }

    // Modified Gram-Schmidt in <.,.>_V with one reorthogonalization pass,
    // tracking the representer-to-orthonormal transform M.
    let mut psi: Vec<StateVector> = Vec::with_capacity(m);
    let mut k_psi: Vec<DVector<f64>> = Vec::with_capacity(m);
    let mut transform = DMatrix::zeros(m, m);
    for j in 0..m {
        let mut v = omega[j].clone();
        let mut coeffs = DVector::zeros(m);
        coeffs[j] = 1.0;
        for _pass in 0..2 {
            for (l, p) in psi.iter().enumerate() {
                let proj = k_psi[l].dot(&v);
                v.axpy(-proj, p, 1.0);
                let row = transform.row(l).transpose();
                coeffs.axpy(-proj, &row, 1.0);
            }
        }
        let norm = space.v_norm(&v);
        if norm < 1e-12 {
            return Err(CoreError::DependentFunctionals { cond: f64::INFINITY });
        }
        v /= norm;
        coeffs /= norm;
        k_psi.push(space.k().matvec(&v));
        psi.push(v);
        transform.row_mut(j).copy_from(&coeffs.transpose());
    }
    let transform_norm = transform
        .clone()
        .svd(false, false)
        .singular_values
        .max();

    Ok(MeasurementSpace {
        layout,
        ell,
        omega,
        psi,
        k_psi,
        transform,
        transform_norm,
    })
}

/// Exact dual vector of u -> |B|^{-1} integral of u over B for P1 functions:
/// each triangle is clipped against the box and the affine integrand is
/// integrated as |P| * phi_a(centroid(P)).
fn assemble_box_average(space: &DiscreteSpace, b: &MeasBox) -> DVector<f64> {
    let grid = &space.grid;
    let half = b.width / 2.0;
    let (bx0, bx1) = (b.cx - half, b.cx + half);
    let (by0, by1) = (b.cy - half, b.cy + half);
    let inv_area = 1.0 / (b.width * b.width);
    let mut ell = DVector::zeros(space.n_dof());
    for el in grid.elements() {
        let verts: Vec<(f64, f64)> = el.nodes.iter().map(|&n| grid.node_coord(n)).collect();
        // Cheap reject: triangle bounding box vs measurement box.
        let (tx0, tx1) = verts
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.0), hi.max(p.0))
            });
        let (ty0, ty1) = verts
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.1), hi.max(p.1))
            });
        if tx1 <= bx0 || tx0 >= bx1 || ty1 <= by0 || ty0 >= by1 {
            continue;
        }
        let poly = clip_to_box(&verts, bx0, bx1, by0, by1);
        if poly.len() < 3 {
            continue;
        }
        let (area, centroid) = polygon_area_centroid(&poly);
        if area <= 0.0 {
            continue;
        }
        let bary = barycentric(&verts, centroid);
        for (a, &node) in el.nodes.iter().enumerate() {
            if let Some(dof) = grid.node_dof(node) {
                ell[dof] += inv_area * area * bary[a];
            }
        }
    }
    ell
}

/// Sutherland-Hodgman clipping of a convex polygon against an axis box.
fn clip_to_box(
    poly: &[(f64, f64)],
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
) -> Vec<(f64, f64)> {
    type Pt = (f64, f64);
    fn clip(poly: Vec<Pt>, inside: impl Fn(Pt) -> bool, intersect: impl Fn(Pt, Pt) -> Pt) -> Vec<Pt> {
        let mut out = Vec::with_capacity(poly.len() + 2);
        for i in 0..poly.len() {
            let cur = poly[i];
            let prev = poly[(i + poly.len() - 1) % poly.len()];
            match (inside(prev), inside(cur)) {
                (true, true) => out.push(cur),
                (true, false) => out.push(intersect(prev, cur)),
                (false, true) => {
                    out.push(intersect(prev, cur));
                    out.push(cur);
                }
                (false, false) => {}
            }
        }
        out
    }
    let at_x = |x: f64| move |a: Pt, b: Pt| -> Pt {
        let t = (x - a.0) / (b.0 - a.0);
        (x, a.1 + t * (b.1 - a.1))
    };
    let at_y = |y: f64| move |a: Pt, b: Pt| -> Pt {
        let t = (y - a.1) / (b.1 - a.1);
        (a.0 + t * (b.0 - a.0), y)
    };
    let mut p = poly.to_vec();
    p = clip(p, |q| q.0 >= x0, at_x(x0));
    if p.is_empty() {
        return p;
    }
    p = clip(p, |q| q.0 <= x1, at_x(x1));
    if p.is_empty() {
        return p;
    }
    p = clip(p, |q| q.1 >= y0, at_y(y0));
    if p.is_empty() {
        return p;
    }
    clip(p, |q| q.1 <= y1, at_y(y1))
}

fn polygon_area_centroid(poly: &[(f64, f64)]) -> (f64, (f64, f64)) {
    let mut twice_area = 0.0;
    let (mut cx, mut cy) = (0.0, 0.0);
    for i in 0..poly.len() {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % poly.len()];
        let cross = x0 * y1 - x1 * y0;
        twice_area += cross;
        cx += (x0 + x1) * cross;
        cy += (y0 + y1) * cross;
    }
    let area = 0.5 * twice_area;
    if area.abs() < 1e-300 {
        return (0.0, (0.0, 0.0));
    }
    (area.abs(), (cx / (6.0 * area), cy / (6.0 * area)))
}

/// Barycentric coordinates of a point in a triangle.
fn barycentric(verts: &[(f64, f64)], p: (f64, f64)) -> [f64; 3] {
    let (a, b, c) = (verts[0], verts[1], verts[2]);
    let det = (b.0 - a.0) * (c.1 - a.1) - (c.0 - a.0) * (b.1 - a.1);
    let l1 = ((b.0 - p.0) * (c.1 - p.1) - (c.0 - p.0) * (b.1 - p.1)) / det;
    let l2 = ((c.0 - p.0) * (a.1 - p.1) - (a.0 - p.0) * (c.1 - p.1)) / det;
    [l1, l2, 1.0 - l1 - l2]
}

impl MeasurementSpace {
    pub fn m(&self) -> usize {
        self.layout.m
    }

    /// Raw functional values z_i = l_i(u).
    pub fn apply_functionals(&self, u: &StateVector) -> DVector<f64> {
        DVector::from_fn(self.m(), |i, _| self.ell[i].dot(u))
    }

    /// psi-basis coordinates of the W-element determined by raw values z.
    pub fn w_from_raw(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.transform * z
    }

    /// Projection coordinates w_j = <psi_j, u>_V.
    pub fn project_coords(&self, u: &StateVector) -> DVector<f64> {
        DVector::from_fn(self.m(), |j, _| self.k_psi[j].dot(u))
    }

    /// Orthogonal projection P_W u as an observation.
    pub fn project(&self, u: &StateVector) -> Observation {
        Observation {
            w: self.project_coords(u),
            raw_z: Some(self.apply_functionals(u)),
            noise: None,
        }
    }

    /// The W-element with the given psi coordinates.
    pub fn lift_coords(&self, w: &DVector<f64>) -> StateVector {
        let mut v = DVector::zeros(self.psi[0].len());
        for j in 0..self.m() {
            v.axpy(w[j], &self.psi[j], 1.0);
        }
        v
    }

    /// Noisy observation: z = l(u) + eta with eta i.i.d. uniform on
    /// [-noise_level, noise_level]^m, plus the certified W-norm noise bound
    /// ||M|| * ||eta||_2.
    pub fn observe_noisy(
        &self,
        u: &StateVector,
        noise_level: f64,
        seed: u64,
    ) -> Observation {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let eta = DVector::from_fn(self.m(), |_, _| {
            noise_level * (2.0 * rng.random::<f64>() - 1.0)
        });
        let z = self.apply_functionals(u) + &eta;
        Observation {
            w: self.w_from_raw(&z),
            raw_z: Some(z),
            noise: Some(NoiseRecord {
                noise_level,
                seed,
                eta: eta.iter().copied().collect(),
                eps_noise: self.transform_norm * eta.norm(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> DiscreteSpace {
        DiscreteSpace::new(16).unwrap()
    }

    fn random_state(space: &DiscreteSpace, rng: &mut impl Rng) -> StateVector {
        DVector::from_fn(space.n_dof(), |_, _| rng.random::<f64>() - 0.5)
    }

    #[test]
    fn representer_property_holds() {
        let sp = space();
        let ms = build_measurements(&sp, Placement::Random { seed: 5 }, 8, 2.0 * sp.grid.h).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let v = random_state(&sp, &mut rng);
            for i in 0..ms.m() {
                let lhs = ms.ell[i].dot(&v);
                let rhs = sp.v_inner(&ms.omega[i], &v);
                worst = worst.max((lhs - rhs).abs());
            }
        }
        assert!(worst < 1e-9);
    }

    #[test]
    fn psi_is_orthonormal_and_spans_omega() {
        let sp = space();
        let ms = build_measurements(&sp, Placement::Random { seed: 5 }, 8, 2.0 * sp.grid.h).unwrap();
        for i in 0..ms.m() {
            for j in 0..ms.m() {
                let g = sp.v_inner(&ms.psi[i], &ms.psi[j]);
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((g - expect).abs() < 1e-10);
            }
        }
        // Mutual projection residuals: each omega lies in span(psi) and the
        // transform reproduces psi from omega.
        for i in 0..ms.m() {
            let coords = ms.project_coords(&ms.omega[i]);
            let recon = ms.lift_coords(&coords);
            assert!(sp.v_norm(&(&recon - &ms.omega[i])) < 1e-9);

            let mut from_omega = DVector::zeros(sp.n_dof());
            for l in 0..ms.m() {
                from_omega.axpy(ms.transform[(i, l)], &ms.omega[l], 1.0);
            }
            assert!(sp.v_norm(&(&from_omega - &ms.psi[i])) < 1e-9);
        }
    }

    #[test]
    fn single_functional_normalizes() {
        let sp = space();
        let ms = build_measurements(&sp, Placement::EvenlySpaced, 1, 2.0 * sp.grid.h).unwrap();
        let norm = sp.v_norm(&ms.omega[0]);
        assert!((sp.v_norm(&ms.psi[0]) - 1.0).abs() < 1e-12);
        assert!((ms.transform[(0, 0)] - 1.0 / norm).abs() < 1e-12 / norm);
        assert!((ms.transform_norm - 1.0 / norm).abs() < 1e-12 / norm);
    }

    #[test]
    fn evenly_spaced_grid_and_errors() {
        let sp = space();
        let ms = build_measurements(&sp, Placement::EvenlySpaced, 4, 2.0 * sp.grid.h).unwrap();
        assert_eq!(ms.layout.boxes[0], MeasBox { cx: 0.25, cy: 0.25, width: 0.125 });
        assert_eq!(ms.layout.boxes[3], MeasBox { cx: 0.75, cy: 0.75, width: 0.125 });
        assert!(build_measurements(&sp, Placement::EvenlySpaced, 3, 2.0 * sp.grid.h).is_err());
        assert!(build_measurements(&sp, Placement::EvenlySpaced, 4, 1.7 * sp.grid.h).is_err());
        assert!(build_measurements(&sp, Placement::EvenlySpaced, 9999, 2.0 * sp.grid.h).is_err());
    }

    #[test]
    fn box_average_of_linear_hat_combination_is_exact() {
        // The functional of the constant-1 function is not testable in V_h
        // (boundary values are zero), but we can integrate an arbitrary P1
        // function directly with a subdivided quadrature as an oracle.
        let sp = space();
        let b = MeasBox { cx: 0.53, cy: 0.41, width: 4.0 * sp.grid.h };
        let ell = assemble_box_average(&sp, &b);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        let u = random_state(&sp, &mut rng);
        // Oracle: midpoint-rule refinement over a fine sub-grid of the box.
        // The rule is exact away from element edges, so the error comes from
        // the O(n_sub) crossing cells and decays like n_sub^-2.
        let oracle_at = |n_sub: usize| {
            let dw = b.width / n_sub as f64;
            let mut acc = 0.0;
            for j in 0..n_sub {
                for i in 0..n_sub {
                    let x = b.cx - b.width / 2.0 + (i as f64 + 0.5) * dw;
                    let y = b.cy - b.width / 2.0 + (j as f64 + 0.5) * dw;
                    acc += eval_p1(&sp, &u, x, y) * dw * dw;
                }
            }
            acc / (b.width * b.width)
        };
        let coarse = oracle_at(500);
        let fine = oracle_at(1500);
        // Require agreement with the fine oracle within the oracle's own
        // observed convergence gap plus a safety factor.
        let gap = (fine - coarse).abs().max(1e-12);
        assert!((ell.dot(&u) - fine).abs() < 10.0 * gap);
    }

    fn eval_p1(sp: &DiscreteSpace, u: &StateVector, x: f64, y: f64) -> f64 {
        let grid = &sp.grid;
        let n = grid.n_per_side;
        let ci = ((x * n as f64).floor() as usize).min(n - 1);
        let cj = ((y * n as f64).floor() as usize).min(n - 1);
        let h = grid.h;
        let (lx, ly) = ((x - ci as f64 * h) / h, (y - cj as f64 * h) / h);
        let node = |i: usize, j: usize| j * (n + 1) + i;
        let val = |nid: usize| grid.node_dof(nid).map(|d| u[d]).unwrap_or(0.0);
        if lx >= ly {
            // Lower triangle (p00, p10, p11).
            let (v0, v1, v2) = (val(node(ci, cj)), val(node(ci + 1, cj)), val(node(ci + 1, cj + 1)));
            v0 * (1.0 - lx) + v1 * (lx - ly) + v2 * ly
        } else {
            let (v0, v1, v2) = (val(node(ci, cj)), val(node(ci + 1, cj + 1)), val(node(ci, cj + 1)));
            v0 * (1.0 - ly) + v1 * lx + v2 * (ly - lx)
        }
    }

    #[test]
    fn projection_properties() {
        let sp = space();
        let ms = build_measurements(&sp, Placement::Random { seed: 9 }, 6, 2.0 * sp.grid.h).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let u = random_state(&sp, &mut rng);
        let w = ms.project_coords(&u);
        // Pythagoras.
        let pw = ms.lift_coords(&w);
        let resid = &u - &pw;
        let lhs = sp.v_norm(&u).powi(2);
        let rhs = sp.v_norm(&pw).powi(2) + sp.v_norm(&resid).powi(2);
        assert!((lhs - rhs).abs() < 1e-9 * lhs);
        // Idempotence on coordinates.
        let w2 = ms.project_coords(&pw);
        assert!((&w2 - &w).norm() < 1e-10);
        // Element of the orthogonal complement projects to zero.
        assert!(ms.project_coords(&resid).norm() < 1e-10);
        // u = psi_1 gives the first unit vector.
        let e1 = ms.project_coords(&ms.psi[0]);
        assert!((e1[0] - 1.0).abs() < 1e-10 && e1.norm_squared() - e1[0] * e1[0] < 1e-18);
        // Self-adjointness of P_W.
        let a = random_state(&sp, &mut rng);
        let b = random_state(&sp, &mut rng);
        let pa = ms.lift_coords(&ms.project_coords(&a));
        let pb = ms.lift_coords(&ms.project_coords(&b));
        assert!((sp.v_inner(&pa, &b) - sp.v_inner(&a, &pb)).abs() < 1e-9);
    }

    #[test]
    fn noisy_observation_contract() {
        let sp = space();
        let ms = build_measurements(&sp, Placement::Random { seed: 9 }, 6, 2.0 * sp.grid.h).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
        let u = random_state(&sp, &mut rng);
        let clean = ms.observe_noisy(&u, 0.0, 1);
        assert!((clean.w.clone() - ms.project_coords(&u)).norm() < 1e-10);
        assert_eq!(clean.noise.as_ref().unwrap().eps_noise, 0.0);

        let n1 = ms.observe_noisy(&u, 1e-2, 1);
        let n2 = ms.observe_noisy(&u, 1e-2, 2);
        assert_ne!(n1.w, n2.w);
        let rec = n1.noise.unwrap();
        let eta = DVector::from_vec(rec.eta.clone());
        assert!((rec.eps_noise - ms.transform_norm * eta.norm()).abs() < 1e-15);
        // The noise actually lands in W with norm <= eps_noise:
        // the W-element of z differs from P_W u by lift(M eta).
        let w_eta = ms.lift_coords(&(&ms.transform * &eta));
        assert!(sp.v_norm(&w_eta) <= rec.eps_noise * (1.0 + 1e-12));
    }
}
