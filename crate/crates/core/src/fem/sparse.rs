use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};

/// Shared CSR sparsity pattern. All stiffness-type matrices assembled on the
/// same grid use one pattern, so linear combinations act on the value arrays
/// alone.
#[derive(Debug)]
pub struct SparsityPattern {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
}

impl SparsityPattern {
    /// Builds a pattern from (row, col) pairs; duplicates are merged.
    pub fn from_pairs(n: usize, pairs: &mut Vec<(usize, usize)>) -> Self {
        pairs.sort_unstable();
        pairs.dedup();
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(pairs.len());
        for &(r, c) in pairs.iter() {
            row_ptr[r + 1] += 1;
            col_idx.push(c);
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        SparsityPattern { n, row_ptr, col_idx }
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// Position of entry (row, col) in the value array.
    pub fn index_of(&self, row: usize, col: usize) -> Option<usize> {
        let lo = self.row_ptr[row];
        let hi = self.row_ptr[row + 1];
        self.col_idx[lo..hi]
            .binary_search(&col)
            .ok()
            .map(|k| lo + k)
    }

    /// Maximum |i - j| over stored entries.
    pub fn bandwidth(&self) -> usize {
        let mut bw = 0;
        for r in 0..self.n {
            for &c in &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]] {
                bw = bw.max(r.abs_diff(c));
            }
        }
        bw
    }
}

/// Symmetric sparse matrix over a shared pattern (full storage).
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    pub pattern: Arc<SparsityPattern>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(pattern: Arc<SparsityPattern>) -> Self {
        let values = vec![0.0; pattern.nnz()];
        SparseMatrix { pattern, values }
    }

    pub fn n(&self) -> usize {
        self.pattern.n
    }

    pub fn add_at(&mut self, row: usize, col: usize, v: f64) {
        let idx = self
            .pattern
            .index_of(row, col)
            .expect("entry outside the assembled pattern");
        self.values[idx] += v;
    }

    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.n());
        let mut y = DVector::zeros(self.n());
        let p = &*self.pattern;
        for r in 0..p.n {
            let mut acc = 0.0;
            for k in p.row_ptr[r]..p.row_ptr[r + 1] {
                acc += self.values[k] * x[p.col_idx[k]];
            }
            y[r] = acc;
        }
        y
    }

    /// Forms `sum_i coeffs_i * mats_i`; all matrices must share one pattern.
    pub fn linear_combination(terms: &[(f64, &SparseMatrix)]) -> SparseMatrix {
        let first = terms.first().expect("at least one term");
        let pattern = Arc::clone(&first.1.pattern);
        let mut values = vec![0.0; pattern.nnz()];
        for &(c, m) in terms {
            assert!(
                Arc::ptr_eq(&pattern, &m.pattern),
                "linear combination requires a shared sparsity pattern"
            );
            for (v, &mv) in values.iter_mut().zip(m.values.iter()) {
                *v += c * mv;
            }
        }
        SparseMatrix { pattern, values }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let p = &*self.pattern;
        let mut d = DMatrix::zeros(p.n, p.n);
        for r in 0..p.n {
            for k in p.row_ptr[r]..p.row_ptr[r + 1] {
                d[(r, p.col_idx[k])] = self.values[k];
            }
        }
        d
    }

    pub fn symmetry_defect(&self) -> f64 {
        let p = &*self.pattern;
        let mut defect: f64 = 0.0;
        for r in 0..p.n {
            for k in p.row_ptr[r]..p.row_ptr[r + 1] {
                let c = p.col_idx[k];
                let vt = p.index_of(c, r).map(|i| self.values[i]).unwrap_or(0.0);
                defect = defect.max((self.values[k] - vt).abs());
            }
        }
        defect
    }
}

/// Cholesky factorization of a banded SPD matrix, L stored by rows within the
/// band. Solves are instrumented with an atomic counter so callers can audit
/// how many SPD solves an algorithm performs.
#[derive(Debug)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    /// l[i * (bw+1) + (i - j)] = L[i][j] for j in [i-bw, i].
    l: Vec<f64>,
    solves: AtomicU64,
}

impl BandedCholesky {
    pub fn factor(mat: &SparseMatrix) -> Result<Self> {
        let n = mat.n();
        let bw = mat.pattern.bandwidth();
        let w = bw + 1;
        let mut band = vec![0.0f64; n * w];
        let p = &*mat.pattern;
        for r in 0..n {
            for k in p.row_ptr[r]..p.row_ptr[r + 1] {
                let c = p.col_idx[k];
                if c <= r {
                    band[r * w + (r - c)] = mat.values[k];
                }
            }
        }
        // In-place banded Cholesky (lower).
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let mut sum = band[i * w + (i - j)];
                let k0 = j0.max(j.saturating_sub(bw));
                for k in k0..j {
                    sum -= band[i * w + (i - k)] * band[j * w + (j - k)];
                }
                if j < i {
                    band[i * w + (i - j)] = sum / band[j * w];
                } else {
                    if sum <= 0.0 || !sum.is_finite() {
                        return Err(CoreError::NotPositiveDefinite { row: i, pivot: sum });
                    }
                    band[i * w] = sum.sqrt();
                }
            }
        }
        Ok(BandedCholesky {
            n,
            bw,
            l: band,
            solves: AtomicU64::new(0),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Total solves performed with this factorization.
    pub fn solve_count(&self) -> u64 {
        self.solves.load(Ordering::Relaxed)
    }

    /// Solves A x = b by forward/back substitution.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        assert_eq!(b.len(), self.n);
        self.solves.fetch_add(1, Ordering::Relaxed);
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        let mut x = b.clone();
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            let mut sum = x[i];
            for j in j0..i {
                sum -= self.l[i * w + (i - j)] * x[j];
            }
            x[i] = sum / self.l[i * w];
        }
        for i in (0..n).rev() {
            let jmax = (i + bw).min(n - 1);
            let mut sum = x[i];
            for j in (i + 1)..=jmax {
                sum -= self.l[j * w + (j - i)] * x[j];
            }
            x[i] = sum / self.l[i * w];
        }
        x
    }
}

/// Direct solve with a residual-accuracy contract of 1e-10 relative.
pub fn solve_spd(mat: &SparseMatrix, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = BandedCholesky::factor(mat)?;
    solve_spd_with(mat, &chol, b)
}

/// Same contract as [`solve_spd`], reusing an existing factorization.
pub fn solve_spd_with(
    mat: &SparseMatrix,
    chol: &BandedCholesky,
    b: &DVector<f64>,
) -> Result<DVector<f64>> {
    let b_norm = b.norm();
    if b_norm == 0.0 {
        return Ok(DVector::zeros(mat.n()));
    }
    let x = chol.solve(b);
    let residual = (mat.matvec(&x) - b).norm() / b_norm;
    if residual > 1e-10 {
        return Err(CoreError::SolveTolerance { residual });
    }
    Ok(x)
}
