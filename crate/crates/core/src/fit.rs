//! Least-squares line fits on log-scaled error curves.

/// Result of fitting `log(y) = intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Number of points that survived the floor filter.
    pub points: usize,
}

/// Fits `ln(values[i])` against `xs[i]`, keeping only points with `values[i] > floor`.
///
/// Returns `None` when fewer than two points remain.
pub fn log_linear_fit(xs: &[f64], values: &[f64], floor: f64) -> Option<LogLinearFit> {
    assert_eq!(xs.len(), values.len());
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(values)
        .filter(|(_, &v)| v > floor && v.is_finite())
        .map(|(&x, &v)| (x, v.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LogLinearFit {
        slope,
        intercept,
        r_squared,
        points: pts.len(),
    })
}

/// Same as [`log_linear_fit`] with `x = 0, 1, 2, ...`.
pub fn log_linear_fit_indexed(values: &[f64], floor: f64) -> Option<LogLinearFit> {
    let xs: Vec<f64> = (0..values.len()).map(|i| i as f64).collect();
    log_linear_fit(&xs, values, floor)
}
