use super::{Matrix, NumericsError};

/// Pivots smaller than this are treated as exact zeros.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Log-determinant, determinant sign and inverse of a square matrix.
#[derive(Debug, Clone)]
pub struct LogDetInverse {
    pub log_abs_det: f64,
    pub sign: f64,
    pub inverse: Matrix,
}

/// LU factorization with partial pivoting, followed by inversion.
pub fn lu_logdet_inverse(a: &Matrix) -> Result<LogDetInverse, NumericsError> {
    let n = a.rows();
    if a.cols() != n {
        return Err(NumericsError::Shape(format!("expected a square matrix, got {}x{}", n, a.cols())));
    }
    let mut lu = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut sign = 1.0;
    let mut log_abs_det = 0.0;

    for k in 0..n {
        let (pivot_row, pivot_abs) = (k..n)
            .map(|r| (r, lu[(r, k)].abs()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if !(pivot_abs >= PIVOT_TOLERANCE) {
            return Err(NumericsError::Singular { pivot: k });
        }
        if pivot_row != k {
            for c in 0..n {
                let tmp = lu[(k, c)];
                lu[(k, c)] = lu[(pivot_row, c)];
                lu[(pivot_row, c)] = tmp;
            }
            perm.swap(k, pivot_row);
            sign = -sign;
        }
        let pivot = lu[(k, k)];
        if pivot < 0.0 {
            sign = -sign;
        }
        log_abs_det += pivot.abs().ln();
        for r in k + 1..n {
            let factor = lu[(r, k)] / pivot;
            lu[(r, k)] = factor;
            if factor == 0.0 {
                continue;
            }
            for c in k + 1..n {
                let v = lu[(k, c)];
                lu[(r, c)] -= factor * v;
            }
        }
    }

    // Solve L U x = P e_col for every column of the identity.
    let mut inverse = Matrix::zeros(n, n);
    let mut x = vec![0.0; n];
    for col in 0..n {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = if perm[i] == col { 1.0 } else { 0.0 };
        }
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= lu[(i, j)] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= lu[(i, j)] * x[j];
            }
            x[i] = s / lu[(i, i)];
        }
        for i in 0..n {
            inverse[(i, col)] = x[i];
        }
    }

    Ok(LogDetInverse { log_abs_det, sign, inverse })
}
