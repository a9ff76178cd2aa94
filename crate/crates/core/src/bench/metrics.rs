use super::BenchError;

/// Coefficient of determination `1 − SSE/SST`; may be negative.
pub fn r2(pred: &[f64], target: &[f64]) -> Result<f64, BenchError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(BenchError::Metric(format!("r2 needs equal nonempty lengths, got {} and {}", pred.len(), target.len())));
    }
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let sst: f64 = target.iter().map(|y| (y - mean).powi(2)).sum();
    if sst == 0.0 {
        return Err(BenchError::Metric("r2 is undefined for a constant target".into()));
    }
    let sse: f64 = pred.iter().zip(target).map(|(p, y)| (p - y).powi(2)).sum();
    Ok(1.0 - sse / sst)
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    (m, v.sqrt())
}
