use rand::Rng;

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation over mean; zero for fewer than two samples.
pub fn coefficient_of_variation(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    if m == 0.0 {
        0.0
    } else {
        var.sqrt() / m.abs()
    }
}

/// Percentile bootstrap of the mean: `(low, mean, high)` at `level`.
pub fn bootstrap_ci(samples: &[f64], level: f64, resamples: usize, rng: &mut impl Rng) -> Result<(f64, f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Contract("bootstrap needs at least one sample".into()));
    }
    if !(level > 0.0 && level < 1.0) || resamples == 0 {
        return Err(Error::Contract(format!(
            "bootstrap needs level in (0, 1) and resamples > 0, got {level} / {resamples}"
        )));
    }
    let m = mean(samples);
    let n = samples.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| samples[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let pick = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    // the resampled means can straddle the sample mean only up to rounding
    let lo = pick(alpha).min(m);
    let hi = pick(1.0 - alpha).max(m);
    Ok((lo, m, hi))
}

/// Least-squares slope of `ln(measure)` against `ln(length)`.
pub fn fit_exponent(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::Contract(format!(
            "exponent fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    if let Some(p) = points.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0)) {
        return Err(Error::Contract(format!(
            "exponent fit needs positive values, got {p:?}"
        )));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Contract("exponent fit needs distinct lengths".into()));
    }
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(bootstrap_ci(&[5.0; 4], 0.95, 1000, &mut rng).unwrap(), (5.0, 5.0, 5.0));
        assert_eq!(bootstrap_ci(&[2.5], 0.95, 1000, &mut rng).unwrap(), (2.5, 2.5, 2.5));
        assert!(bootstrap_ci(&[], 0.95, 1000, &mut rng).is_err());
    }

    #[test]
    fn exact_power_laws() {
        let q = fit_exponent(&[(100.0, 1.0), (200.0, 4.0), (400.0, 16.0)]).unwrap();
        assert!((q - 2.0).abs() < 1e-12);
        let l = fit_exponent(&[(100.0, 1.0), (200.0, 2.0), (400.0, 4.0)]).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        assert!(fit_exponent(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]).is_err());
        assert!(fit_exponent(&[(1.0, 1.0), (2.0, 2.0)]).is_err());
    }

    #[test]
    fn variation() {
        assert_eq!(coefficient_of_variation(&[3.0, 3.0]), 0.0);
        assert!((coefficient_of_variation(&[1.0, 3.0]) - 2f64.sqrt() / 2.0).abs() < 1e-12);
    }
}
