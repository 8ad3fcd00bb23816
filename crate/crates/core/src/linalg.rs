//! Dense LU factorization with partial (row) pivoting and a compressed
//! scalar sparse matrix used for collocation and mass operators.

use std::io::{self, Write};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Pivots smaller than this fraction of the largest entry of their original
/// row are treated as singular.
pub const PIVOT_TOLERANCE: f64 = 1e-14;

/// Row-pivoted LU factors `P A = L U`, stored row-major.
#[derive(Clone, Debug)]
pub struct DenseLu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    norm1: f64,
}

impl DenseLu {
    pub fn factor(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "LU needs a square matrix");
        let mut lu = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                lu[i * n + j] = a[(i, j)];
            }
        }
        let row_max: Vec<f64> = (0..n)
            .map(|i| lu[i * n..(i + 1) * n].iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .collect();
        let norm1 = (0..n)
            .map(|j| (0..n).map(|i| a[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |best, c| if c.1 > best.1 { c } else { best });
            if !(pmax > PIVOT_TOLERANCE * row_max[perm[p]]) || pmax == 0.0 {
                return Err(Error::SingularMatrix(perm[p]));
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * n + k];
            let (upper, lower) = lu.split_at_mut((k + 1) * n);
            let row_k = &upper[k * n..(k + 1) * n];
            for row in lower.chunks_exact_mut(n) {
                let l = row[k] / pivot;
                row[k] = l;
                if l != 0.0 {
                    for j in k + 1..n {
                        row[j] -= l * row_k[j];
                    }
                }
            }
        }
        Ok(Self { n, lu, perm, norm1 })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Original row index placed at position `k` by pivoting.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = &self.lu[i * n..i * n + i];
            let s: f64 = row.iter().zip(&x[..i]).map(|(l, v)| l * v).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let row = &self.lu[i * n..(i + 1) * n];
            let s: f64 = row[i + 1..].iter().zip(&x[i + 1..]).map(|(u, v)| u * v).sum();
            x[i] = (x[i] - s) / row[i];
        }
        x
    }

    /// Solve `A^T x = b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let s: f64 = (0..i).map(|k| self.lu[k * n + i] * y[k]).sum();
            y[i] = (y[i] - s) / self.lu[i * n + i];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| self.lu[k * n + i] * y[k]).sum();
            y[i] -= s;
        }
        let mut x = vec![0.0; n];
        for (k, &p) in self.perm.iter().enumerate() {
            x[p] = y[k];
        }
        x
    }

    /// Solve for every column of `b`.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n;
        let m = b.ncols();
        // Work on rows of the permuted right-hand side so the inner loops are
        // contiguous.
        let mut x = vec![0.0; n * m];
        for (k, &p) in self.perm.iter().enumerate() {
            for j in 0..m {
                x[k * m + j] = b[(p, j)];
            }
        }
        for i in 0..n {
            let (done, rest) = x.split_at_mut(i * m);
            let xi = &mut rest[..m];
            for k in 0..i {
                let l = self.lu[i * n + k];
                if l != 0.0 {
                    let xk = &done[k * m..(k + 1) * m];
                    for j in 0..m {
                        xi[j] -= l * xk[j];
                    }
                }
            }
        }
        for i in (0..n).rev() {
            let (head, tail) = x.split_at_mut((i + 1) * m);
            let xi = &mut head[i * m..];
            for k in i + 1..n {
                let u = self.lu[i * n + k];
                if u != 0.0 {
                    let xk = &tail[(k - i - 1) * m..(k - i) * m];
                    for j in 0..m {
                        xi[j] -= u * xk[j];
                    }
                }
            }
            let d = self.lu[i * n + i];
            for v in xi.iter_mut() {
                *v /= d;
            }
        }
        DMatrix::from_row_slice(n, m, &x)
    }

    /// Estimate of the reciprocal 1-norm condition number (Hager's method).
    pub fn rcond(&self) -> f64 {
        let n = self.n;
        if n == 0 {
            return 1.0;
        }
        let mut x = vec![1.0 / n as f64; n];
        let mut est = 0.0f64;
        for _ in 0..5 {
            let y = self.solve(&x);
            est = est.max(y.iter().map(|v| v.abs()).sum());
            let sign: Vec<f64> = y.iter().map(|v| if *v >= 0.0 { 1.0 } else { -1.0 }).collect();
            let z = self.solve_transpose(&sign);
            let (jmax, zmax) = z
                .iter()
                .enumerate()
                .fold((0, 0.0), |b, (j, v)| if v.abs() > b.1 { (j, v.abs()) } else { b });
            let ztx: f64 = z.iter().zip(&x).map(|(a, b)| a * b).sum();
            if zmax <= ztx {
                break;
            }
            x = vec![0.0; n];
            x[jmax] = 1.0;
        }
        if est == 0.0 || self.norm1 == 0.0 {
            0.0
        } else {
            1.0 / (est * self.norm1)
        }
    }
}

/// Scalar sparse matrix in compressed-row form. Acts on interleaved
/// three-component vectors as `A (x) I_3`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarCsr {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl ScalarCsr {
    /// Build from per-row `(column, value)` lists; duplicate columns are summed.
    pub fn from_rows(n_cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for mut r in rows {
            r.sort_by_key(|e| e.0);
            let start = cols.len();
            for (c, v) in r {
                if cols.len() > start && *cols.last().unwrap() == c {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Self {
            n_rows: row_ptr.len() - 1,
            n_cols,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|e| e.0 == j).map_or(0.0, |e| e.1)
    }

    /// `(A (x) I_3) x` for an interleaved vector.
    pub fn apply3(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; 3 * self.n_rows];
        for i in 0..self.n_rows {
            for (j, a) in self.row(i) {
                for c in 0..3 {
                    y[3 * i + c] += a * x[3 * j + c];
                }
            }
        }
        y
    }

    /// Dense scalar form.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_rows, self.n_cols);
        for i in 0..self.n_rows {
            for (j, a) in self.row(i) {
                m[(i, j)] += a;
            }
        }
        m
    }

    /// Dense `A (x) I_3`.
    pub fn to_dense3(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(3 * self.n_rows, 3 * self.n_cols);
        for i in 0..self.n_rows {
            for (j, a) in self.row(i) {
                for c in 0..3 {
                    m[(3 * i + c, 3 * j + c)] += a;
                }
            }
        }
        m
    }
}

/// Write a coordinate-format matrix-market block (1-based indices) headed by
/// a `% name` comment line.
pub fn write_matrix_market<W: Write>(
    w: &mut W,
    name: &str,
    rows: usize,
    cols: usize,
    entries: impl IntoIterator<Item = (usize, usize, f64)>,
) -> io::Result<()> {
    let entries: Vec<_> = entries.into_iter().filter(|e| e.2 != 0.0).collect();
    writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(w, "% {name}")?;
    writeln!(w, "{rows} {cols} {}", entries.len())?;
    for (i, j, v) in entries {
        writeln!(w, "{} {} {v:.17e}", i + 1, j + 1)?;
    }
    Ok(())
}

/// Entries of a dense matrix for [`write_matrix_market`].
pub fn dense_entries(m: &DMatrix<f64>) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| (i, j, m[(i, j)])))
}
