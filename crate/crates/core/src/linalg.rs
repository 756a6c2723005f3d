//! Small dense linear-algebra helpers: symmetric eigendecomposition (cyclic
//! Jacobi), random semi-orthogonal initialisation, and principal angles
//! between subspaces.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Eigendecomposition of a symmetric matrix via cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors as columns, so
/// `a * v_col ≈ lambda * v_col`. No ordering is imposed; callers sort.
pub fn symmetric_eigen(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::shape("symmetric_eigen", "square", format!("{}x{}", n, a.ncols())));
    }
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    if n <= 1 {
        return Ok((m.diag().to_owned(), v));
    }

    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off.sqrt() <= 1e-14 * (1.0 + frobenius_norm(&m)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    Ok((m.diag().to_owned(), v))
}

pub fn frobenius_norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Random matrix with orthonormal rows inside each `cols`-sized row block.
///
/// For `rows <= cols` the full matrix is row-orthonormal. For `rows > cols`
/// each consecutive block of `cols` rows is orthonormalised independently
/// (full row-orthonormality is impossible beyond rank `cols`).
pub fn random_semi_orthogonal<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((rows, cols));
    for x in out.iter_mut() {
        *x = rng.sample(StandardNormal);
    }
    let mut start = 0;
    while start < rows {
        let end = (start + cols).min(rows);
        orthonormalize_rows_in_place(&mut out, start, end, rng);
        start = end;
    }
    out
}

fn orthonormalize_rows_in_place<R: Rng>(m: &mut Array2<f64>, start: usize, end: usize, rng: &mut R) {
    let cols = m.ncols();
    for i in start..end {
        // two rounds of modified Gram-Schmidt for stability
        for _round in 0..2 {
            for j in start..i {
                let dot: f64 = (0..cols).map(|k| m[[i, k]] * m[[j, k]]).sum();
                for k in 0..cols {
                    m[[i, k]] -= dot * m[[j, k]];
                }
            }
        }
        let mut norm: f64 = (0..cols).map(|k| m[[i, k]] * m[[i, k]]).sum::<f64>().sqrt();
        if norm < 1e-12 {
            // degenerate draw; resample the row and retry the projection once
            for k in 0..cols {
                m[[i, k]] = rng.sample(StandardNormal);
            }
            for j in start..i {
                let dot: f64 = (0..cols).map(|k| m[[i, k]] * m[[j, k]]).sum();
                for k in 0..cols {
                    m[[i, k]] -= dot * m[[j, k]];
                }
            }
            norm = (0..cols).map(|k| m[[i, k]] * m[[i, k]]).sum::<f64>().sqrt();
        }
        for k in 0..cols {
            m[[i, k]] /= norm;
        }
    }
}

/// Principal angles (radians, ascending) between the column spans of two
/// matrices with orthonormal columns.
pub fn principal_angles(a: &Array2<f64>, b: &Array2<f64>) -> Result<Vec<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::shape("principal_angles", a.nrows(), b.nrows()));
    }
    let m = a.t().dot(b);
    let gram = m.t().dot(&m);
    let (vals, _) = symmetric_eigen(&gram)?;
    let mut cosines: Vec<f64> = vals.iter().map(|v| v.max(0.0).sqrt().min(1.0)).collect();
    cosines.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Ok(cosines.into_iter().map(|c| c.acos()).collect())
}

/// Orthonormal basis for the column span of `a` (modified Gram-Schmidt,
/// rank-revealing: near-zero directions are dropped).
pub fn orthonormal_columns(a: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = a.dim();
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for j in 0..cols {
        let mut v = a.index_axis(Axis(1), j).to_owned();
        for _round in 0..2 {
            for b in &basis {
                let dot = v.dot(b);
                v.scaled_add(-dot, b);
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-10 {
            basis.push(v / norm);
        }
    }
    let mut out = Array2::<f64>::zeros((rows, basis.len()));
    for (j, b) in basis.iter().enumerate() {
        out.column_mut(j).assign(b);
    }
    out
}
