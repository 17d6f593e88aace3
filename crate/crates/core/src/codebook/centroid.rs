//! Centroids of explicit `(x, w)` sample lists, where `x` is a normalized
//! weight and `w` the absolute maximum of its block.

use crate::error::{Error, Result};

use super::Metric;

fn nonempty(samples: &[(f64, f64)]) -> Result<()> {
    if samples.is_empty() {
        Err(Error::EmptyRegion { lo: f64::NAN, hi: f64::NAN })
    } else {
        Ok(())
    }
}

/// `Σ w² x / Σ w²`, the minimizer of `Σ w² (x - c)²`.
pub fn centroid_mse_empirical(samples: &[(f64, f64)]) -> Result<f64> {
    nonempty(samples)?;
    let (num, den) = samples
        .iter()
        .fold((0.0, 0.0), |(n, d), &(x, w)| (n + w * w * x, d + w * w));
    if den > 0.0 {
        Ok(num / den)
    } else {
        centroid_normalized_only(samples, Metric::Mse)
    }
}

/// Weighted median: after a stable sort by `x`, the first `x_k` whose
/// inclusive prefix weight exceeds half of the total weight. It minimizes
/// `Σ w |x - c|`.
pub fn centroid_mae_empirical(samples: &[(f64, f64)]) -> Result<f64> {
    nonempty(samples)?;
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = sorted.iter().map(|s| s.1).sum();
    if !(total > 0.0) {
        return centroid_normalized_only(samples, Metric::Mae);
    }
    let half = 0.5 * total;
    let mut acc = 0.0;
    for &(x, w) in &sorted {
        acc += w;
        if acc > half {
            return Ok(x);
        }
    }
    Ok(sorted[sorted.len() - 1].0)
}

/// Unweighted mean (MSE) or median (MAE) of the normalized values; block
/// maxima are ignored.
pub fn centroid_normalized_only(samples: &[(f64, f64)], metric: Metric) -> Result<f64> {
    nonempty(samples)?;
    match metric {
        Metric::Mse => Ok(samples.iter().map(|s| s.0).sum::<f64>() / samples.len() as f64),
        Metric::Mae => {
            let mut xs: Vec<f64> = samples.iter().map(|s| s.0).collect();
            xs.sort_by(f64::total_cmp);
            Ok(xs[(xs.len() - 1) / 2])
        }
    }
}
