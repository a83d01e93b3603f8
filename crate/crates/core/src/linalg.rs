//! Sparse complex matrices, a preconditioned BiCGStab solver, and a dense
//! Hermitian eigensolver wrapper.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;

use crate::error::{KvnError, Result};

/// Anything that can be applied to a complex vector.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[C64], y: &mut [C64]);
    /// Main diagonal, when cheaply available (used for preconditioning).
    fn diagonal(&self) -> Option<Vec<C64>> {
        None
    }
}

/// Compressed sparse row matrix with sorted, unique column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<C64>,
}

impl CsrMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            row_ptr: vec![0; n + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from per-row `(column, value)` lists. Duplicate columns are
    /// summed in list order; exact zeros are kept.
    pub fn from_rows(n: usize, rows: Vec<Vec<(usize, C64)>>) -> Self {
        assert_eq!(rows.len(), n);
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                assert!(c < n, "column {c} out of range");
                if last == Some(c) {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn from_diagonal(diag: &[C64]) -> Self {
        let n = diag.len();
        Self {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: diag.to_vec(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, C64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()]
            .iter()
            .copied()
            .zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[r.clone()].binary_search(&j) {
            Ok(k) => self.values[r.start + k],
            Err(_) => C64::new(0.0, 0.0),
        }
    }

    /// Largest number of stored entries in any row.
    pub fn max_row_nnz(&self) -> usize {
        (0..self.n)
            .map(|i| self.row_ptr[i + 1] - self.row_ptr[i])
            .max()
            .unwrap_or(0)
    }

    pub fn matvec(&self, x: &[C64], y: &mut [C64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = C64::new(0.0, 0.0);
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yi = acc;
        }
    }

    pub fn conjugate_transpose(&self) -> Self {
        let mut rows: Vec<Vec<(usize, C64)>> = vec![Vec::new(); self.n];
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                rows[j].push((i, v.conj()));
            }
        }
        Self::from_rows(self.n, rows)
    }

    /// Entry-wise sum; stored patterns are merged.
    pub fn add(&self, other: &CsrMatrix) -> Self {
        assert_eq!(self.n, other.n);
        let rows = (0..self.n)
            .map(|i| self.row(i).chain(other.row(i)).collect())
            .collect();
        Self::from_rows(self.n, rows)
    }

    pub fn sub(&self, other: &CsrMatrix) -> Self {
        assert_eq!(self.n, other.n);
        let rows = (0..self.n)
            .map(|i| self.row(i).chain(other.row(i).map(|(c, v)| (c, -v))).collect())
            .collect();
        Self::from_rows(self.n, rows)
    }

    pub fn matmul(&self, other: &CsrMatrix) -> Self {
        assert_eq!(self.n, other.n);
        let rows = (0..self.n)
            .map(|i| {
                let mut acc: Vec<(usize, C64)> = Vec::new();
                for (k, a) in self.row(i) {
                    for (j, b) in other.row(k) {
                        acc.push((j, a * b));
                    }
                }
                acc
            })
            .collect();
        Self::from_rows(self.n, rows)
    }

    /// `max |A_ij − B_ij|` over the union of stored patterns.
    pub fn max_abs_diff(&self, other: &CsrMatrix) -> f64 {
        self.sub(other)
            .values
            .iter()
            .map(|v| v.norm())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// `max |A − A†|`.
    pub fn hermiticity_defect(&self) -> f64 {
        self.max_abs_diff(&self.conjugate_transpose())
    }

    pub fn diagonal_entries(&self) -> Vec<C64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m[(i, j)] += v;
            }
        }
        m
    }
}

impl LinearOperator for CsrMatrix {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[C64], y: &mut [C64]) {
        self.matvec(x, y)
    }

    fn diagonal(&self) -> Option<Vec<C64>> {
        Some(self.diagonal_entries())
    }
}

/// Materializes any operator by applying it to basis vectors.
pub fn materialize(op: &dyn LinearOperator) -> DMatrix<C64> {
    let n = op.dim();
    let mut m = DMatrix::zeros(n, n);
    let mut e = vec![C64::new(0.0, 0.0); n];
    let mut col = vec![C64::new(0.0, 0.0); n];
    for j in 0..n {
        e[j] = C64::new(1.0, 0.0);
        op.apply(&e, &mut col);
        for i in 0..n {
            m[(i, j)] = col[i];
        }
        e[j] = C64::new(0.0, 0.0);
    }
    m
}

pub fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm2(a: &[C64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone, Copy)]
pub struct SolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Right-preconditioned BiCGStab for `A x = b` with Jacobi preconditioning.
/// `x` holds the initial guess on entry.
pub fn bicgstab(
    a: &dyn LinearOperator,
    b: &[C64],
    x: &mut [C64],
    tol: f64,
    max_iter: usize,
) -> Result<SolveStats> {
    let n = a.dim();
    let zero = C64::new(0.0, 0.0);
    let inv_diag: Vec<C64> = match a.diagonal() {
        Some(d) => d
            .into_iter()
            .map(|v| if v.norm() > 0.0 { v.inv() } else { C64::new(1.0, 0.0) })
            .collect(),
        None => vec![C64::new(1.0, 0.0); n],
    };
    let precond = |v: &[C64], out: &mut [C64]| {
        for i in 0..n {
            out[i] = inv_diag[i] * v[i];
        }
    };

    let b_norm = norm2(b);
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = zero);
        return Ok(SolveStats {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut r = vec![zero; n];
    a.apply(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut res = norm2(&r) / b_norm;
    if res <= tol {
        return Ok(SolveStats {
            iterations: 0,
            relative_residual: res,
        });
    }
    let r_hat = r.clone();
    let mut rho_old = C64::new(1.0, 0.0);
    let mut alpha = C64::new(1.0, 0.0);
    let mut omega = C64::new(1.0, 0.0);
    let mut v = vec![zero; n];
    let mut p = vec![zero; n];
    let mut p_hat = vec![zero; n];
    let mut s = vec![zero; n];
    let mut s_hat = vec![zero; n];
    let mut t = vec![zero; n];

    for it in 1..=max_iter {
        let rho = dot(&r_hat, &r);
        if rho.norm() == 0.0 {
            break;
        }
        let beta = (rho / rho_old) * (alpha / omega);
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        precond(&p, &mut p_hat);
        a.apply(&p_hat, &mut v);
        alpha = rho / dot(&r_hat, &v);
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm2(&s) / b_norm <= tol {
            for i in 0..n {
                x[i] += alpha * p_hat[i];
            }
            res = true_residual(a, b, x) / b_norm;
            if res <= tol {
                return Ok(SolveStats {
                    iterations: it,
                    relative_residual: res,
                });
            }
            // Recurrence drifted; restart from the true residual.
            a.apply(x, &mut r);
            for i in 0..n {
                r[i] = b[i] - r[i];
            }
            continue;
        }
        precond(&s, &mut s_hat);
        a.apply(&s_hat, &mut t);
        let tt = dot(&t, &t);
        omega = if tt.norm() > 0.0 { dot(&t, &s) / tt } else { zero };
        for i in 0..n {
            x[i] += alpha * p_hat[i] + omega * s_hat[i];
            r[i] = s[i] - omega * t[i];
        }
        res = norm2(&r) / b_norm;
        if res <= tol {
            let true_res = true_residual(a, b, x) / b_norm;
            if true_res <= tol {
                return Ok(SolveStats {
                    iterations: it,
                    relative_residual: true_res,
                });
            }
            a.apply(x, &mut r);
            for i in 0..n {
                r[i] = b[i] - r[i];
            }
        }
        rho_old = rho;
        if omega.norm() == 0.0 {
            break;
        }
    }
    Err(KvnError::SolverDivergence {
        iterations: max_iter,
        residual: true_residual(a, b, x) / b_norm,
    })
}

fn true_residual(a: &dyn LinearOperator, b: &[C64], x: &[C64]) -> f64 {
    let mut ax = vec![C64::new(0.0, 0.0); b.len()];
    a.apply(x, &mut ax);
    ax.iter()
        .zip(b)
        .map(|(u, v)| (v - u).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// Eigen-decomposition `H = V Λ V†` of a Hermitian matrix.
#[derive(Debug, Clone)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<C64>,
}

pub fn hermitian_eigen(h: DMatrix<C64>) -> Result<HermitianEigen> {
    let n = h.nrows();
    if n != h.ncols() {
        return Err(KvnError::Eigensolver("matrix is not square".into()));
    }
    let eig = h
        .try_symmetric_eigen(f64::EPSILON, 0)
        .ok_or_else(|| KvnError::Eigensolver("symmetric eigensolver did not converge".into()))?;
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(KvnError::Eigensolver("non-finite eigenvalue".into()));
    }
    Ok(HermitianEigen {
        values: eig.eigenvalues.iter().copied().collect(),
        vectors: eig.eigenvectors,
    })
}

impl HermitianEigen {
    /// `V f(Λ) V† x`.
    pub fn apply_function(&self, x: &[C64], f: impl Fn(f64) -> C64) -> Vec<C64> {
        let n = self.values.len();
        let xv = nalgebra::DVector::from_column_slice(x);
        let mut c = self.vectors.ad_mul(&xv);
        for i in 0..n {
            c[i] *= f(self.values[i]);
        }
        let y = &self.vectors * c;
        y.iter().copied().collect()
    }
}
