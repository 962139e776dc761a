//! Small dense linear-algebra kernels.
//!
//! Everything here operates on the tiny systems this crate deals with
//! (|S| <= 8, feature dimension <= a few dozen), so plain partial-pivot
//! LU and cyclic Jacobi sweeps are entirely adequate.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Solve `a x = b` by LU decomposition with partial pivoting.
pub fn lu_solve(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let n = square_dim(a)?;
    if b.len() != n {
        return Err(Error::config(format!(
            "rhs length {} does not match matrix dimension {}",
            b.len(),
            n
        )));
    }
    let mut lu = a.clone();
    let mut x = b.clone();

    for col in 0..n {
        let mut pivot = col;
        let mut best = lu[[col, col]].abs();
        for row in col + 1..n {
            let v = lu[[row, col]].abs();
            if v > best {
                best = v;
                pivot = row;
            }
        }
        if best < 1e-300 {
            return Err(Error::analysis("singular matrix in lu_solve"));
        }
        if pivot != col {
            for k in 0..n {
                lu.swap([col, k], [pivot, k]);
            }
            x.swap(col, pivot);
        }
        for row in col + 1..n {
            let factor = lu[[row, col]] / lu[[col, col]];
            lu[[row, col]] = 0.0;
            for k in col + 1..n {
                lu[[row, k]] -= factor * lu[[col, k]];
            }
            x[row] -= factor * x[col];
        }
    }
    for row in (0..n).rev() {
        let mut acc = x[row];
        for k in row + 1..n {
            acc -= lu[[row, k]] * x[k];
        }
        x[row] = acc / lu[[row, row]];
    }
    Ok(x)
}

/// Dense inverse via LU solves against identity columns.
pub fn lu_inverse(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = square_dim(a)?;
    let mut inv = Array2::zeros((n, n));
    for col in 0..n {
        let mut e = Array1::zeros(n);
        e[col] = 1.0;
        let x = lu_solve(a, &e)?;
        for row in 0..n {
            inv[[row, col]] = x[row];
        }
    }
    Ok(inv)
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method.
///
/// Returns the eigenvalues sorted ascending. The input must be symmetric;
/// symmetry of the upper/lower triangle is trusted (callers symmetrize).
pub fn jacobi_eigenvalues(m: &Array2<f64>) -> Result<Vec<f64>> {
    let n = square_dim(m)?;
    let mut a = m.clone();
    let scale: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[[i, j]] * a[[i, j]];
            }
        }
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                // Stable tangent of the rotation angle.
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
            }
        }
    }

    let mut eigs: Vec<f64> = (0..n).map(|i| a[[i, i]]).collect();
    eigs.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(eigs)
}

/// `(m + m^T) / 2`.
pub fn symmetric_part(m: &Array2<f64>) -> Array2<f64> {
    0.5 * (m + &m.t().to_owned())
}

fn square_dim(a: &Array2<f64>) -> Result<usize> {
    let (r, c) = a.dim();
    if r != c {
        return Err(Error::config(format!("matrix is {r}x{c}, expected square")));
    }
    Ok(r)
}
