use super::matrix::dot;
use super::{Matrix, NumericsError};

const POWER_TOLERANCE: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 10_000;
/// Eigenvalues below this fraction of the trace count as zero variance.
const ZERO_VARIANCE: f64 = 1e-12;

/// Two-component principal component analysis result.
#[derive(Debug, Clone)]
pub struct Pca2d {
    pub projections: Vec<[f64; 2]>,
    pub components: [Vec<f64>; 2],
    pub explained_variance: [f64; 2],
    pub mean: Vec<f64>,
}

/// Top-two principal components via deflated power iteration on the sample
/// covariance (`n - 1` normalization).
///
/// Components are unit-norm, orthogonal, and signed so that their
/// largest-magnitude coordinate is positive. A rank-one dataset yields a zero
/// second variance rather than an error.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Pca2d, NumericsError> {
    if rows.len() < 3 {
        return Err(NumericsError::Degenerate(format!("PCA needs at least 3 rows, got {}", rows.len())));
    }
    let dim = rows[0].len();
    if dim == 0 || rows.iter().any(|r| r.len() != dim) {
        return Err(NumericsError::Degenerate("PCA rows must share a non-zero dimension".into()));
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(NumericsError::NonFinite("PCA input".into()));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n;
        }
    }
    let centered: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
    let mut cov = Matrix::zeros(dim, dim);
    for r in &centered {
        cov.add_outer(r, r);
    }
    let cov = cov.scale(1.0 / (n - 1.0));
    let trace: f64 = (0..dim).map(|i| cov[(i, i)]).sum();
    if !(trace > 0.0) {
        return Err(NumericsError::Degenerate("zero variance".into()));
    }

    let (first, var1) = dominant_eigenvector(&cov, None);
    if var1 <= ZERO_VARIANCE * trace {
        return Err(NumericsError::Degenerate("zero variance".into()));
    }
    let mut deflated = cov.clone();
    deflated.add_outer(&first.iter().map(|x| -var1 * x).collect::<Vec<_>>(), &first);
    let (mut second, mut var2) = dominant_eigenvector(&deflated, Some(&first));
    if var2 <= ZERO_VARIANCE * trace || dim == 1 {
        var2 = 0.0;
        second = orthogonal_unit(&first);
    }
    let first = fix_sign(first);
    let second = fix_sign(second);

    let projections = centered.iter().map(|r| [dot(r, &first), dot(r, &second)]).collect();
    Ok(Pca2d { projections, components: [first, second], explained_variance: [var1, var2], mean })
}

/// Power iteration from a few deterministic starting vectors, keeping the
/// result with the largest Rayleigh quotient.
fn dominant_eigenvector(a: &Matrix, orthogonal_to: Option<&[f64]>) -> (Vec<f64>, f64) {
    let dim = a.rows();
    let mut starts = vec![vec![1.0; dim], (0..dim).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect()];
    let heaviest = (0..dim).max_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)])).unwrap_or(0);
    let mut e = vec![0.0; dim];
    e[heaviest] = 1.0;
    starts.push(e);
    starts.push((0..dim).map(|i| 1.0 + i as f64 / dim as f64).collect());

    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in starts {
        let Some(v) = normalize(project_out(start, orthogonal_to)) else { continue };
        let v = iterate(a, v, orthogonal_to);
        let av = a.matmul(&Matrix::column(&v));
        let rq = dot(&v, av.data());
        if best.as_ref().is_none_or(|(_, b)| rq > *b) {
            best = Some((v, rq));
        }
    }
    best.unwrap_or_else(|| (orthogonal_to.map_or_else(|| unit(dim, 0), orthogonal_unit), 0.0))
}

fn iterate(a: &Matrix, mut v: Vec<f64>, orthogonal_to: Option<&[f64]>) -> Vec<f64> {
    for _ in 0..POWER_MAX_ITERS {
        let next = project_out(a.matmul(&Matrix::column(&v)).into_vec(), orthogonal_to);
        let Some(mut next) = normalize(next) else { return v };
        if dot(&next, &v) < 0.0 {
            next.iter_mut().for_each(|x| *x = -*x);
        }
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        v = next;
        if delta < POWER_TOLERANCE {
            break;
        }
    }
    v
}

fn project_out(mut v: Vec<f64>, direction: Option<&[f64]>) -> Vec<f64> {
    if let Some(d) = direction {
        let p = dot(&v, d);
        for (x, di) in v.iter_mut().zip(d) {
            *x -= p * di;
        }
    }
    v
}

fn normalize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let norm = dot(&v, &v).sqrt();
    if !(norm > 1e-300) {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

fn unit(dim: usize, k: usize) -> Vec<f64> {
    let mut e = vec![0.0; dim];
    e[k] = 1.0;
    e
}

/// Gram-Schmidt of the basis vector least aligned with `v`.
fn orthogonal_unit(v: &[f64]) -> Vec<f64> {
    let dim = v.len();
    if dim < 2 {
        return vec![0.0; dim];
    }
    let k = (0..dim).min_by(|&i, &j| v[i].abs().total_cmp(&v[j].abs())).unwrap_or(0);
    normalize(project_out(unit(dim, k), Some(v))).unwrap_or_else(|| vec![0.0; dim])
}

fn fix_sign(mut v: Vec<f64>) -> Vec<f64> {
    let pivot = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}
