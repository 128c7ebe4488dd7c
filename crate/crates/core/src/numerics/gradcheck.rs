use super::{Matrix, NumericsError};

pub const DEFAULT_STEP: f64 = 1e-4;

/// Compares the analytic gradient of `f` against central differences.
///
/// `f` returns its value and one gradient matrix per parameter. The result is
/// the largest `|g_a - g_n| / max(1, |g_a|, |g_n|)` over every coordinate.
pub fn grad_check<F>(mut f: F, params: &[Matrix], h: f64) -> Result<f64, NumericsError>
where
    F: FnMut(&[Matrix]) -> (f64, Vec<Matrix>),
{
    let (value, analytic) = f(params);
    if !value.is_finite() {
        return Err(NumericsError::NonFinite("objective at the base point".into()));
    }
    if analytic.len() != params.len() {
        return Err(NumericsError::Shape(format!(
            "{} gradients returned for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    for (i, (g, p)) in analytic.iter().zip(params).enumerate() {
        if g.shape() != p.shape() {
            return Err(NumericsError::Shape(format!(
                "gradient {i} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }

    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        for k in 0..params[pi].len() {
            let base = params[pi].data()[k];
            work[pi].data_mut()[k] = base + h;
            let (up, _) = f(&work);
            work[pi].data_mut()[k] = base - h;
            let (down, _) = f(&work);
            work[pi].data_mut()[k] = base;
            if !up.is_finite() || !down.is_finite() {
                return Err(NumericsError::NonFinite(format!("objective near parameter {pi}, coordinate {k}")));
            }
            let numeric = (up - down) / (2.0 * h);
            let ga = grad.data()[k];
            let rel = (ga - numeric).abs() / 1f64.max(ga.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
