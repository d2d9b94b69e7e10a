//! Small statistics helpers shared by the estimators.

use serde::{Deserialize, Serialize};

/// Mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

impl MeanSe {
    pub fn of(xs: &[f64]) -> MeanSe {
        let count = xs.len();
        if count == 0 {
            return MeanSe { mean: f64::NAN, se: f64::NAN, count };
        }
        let mean = xs.iter().sum::<f64>() / count as f64;
        let se = if count > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64;
            (var / count as f64).sqrt()
        } else {
            0.0
        };
        MeanSe { mean, se, count }
    }

    /// `|mean - target| <= k * se`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.se
    }
}

/// Sample covariance with a delta-method standard error.
pub fn covariance(xs: &[f64], ys: &[f64]) -> MeanSe {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return MeanSe { mean: f64::NAN, se: f64::NAN, count: n };
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let z: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect();
    let cov = z.iter().sum::<f64>() / (n - 1) as f64;
    let mz = z.iter().sum::<f64>() / n as f64;
    let var = z.iter().map(|v| (v - mz).powi(2)).sum::<f64>() / (n - 1) as f64;
    MeanSe { mean: cov, se: (var / n as f64).sqrt(), count: n }
}

/// Ordinary least squares `y = a + b x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    LinearFit { intercept, slope, r_squared }
}

/// Least-squares slope of `y = b x` (no intercept).
pub fn slope_through_origin(xs: &[f64], ys: &[f64]) -> f64 {
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_se_basics() {
        let m = MeanSe::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-12);
        assert_eq!(MeanSe::of(&[3.0]).se, 0.0);
    }

    #[test]
    fn exact_line_fit() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 0.5 - 2.0 * x).collect();
        let f = linear_fit(&xs, &ys);
        assert!((f.slope + 2.0).abs() < 1e-12);
        assert!((f.intercept - 0.5).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert!((slope_through_origin(&xs, &[2.0, 4.0, 6.0, 8.0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn covariance_of_identical_series_is_variance() {
        let xs = [1.0, 3.0, 2.0, 6.0, 4.0];
        let c = covariance(&xs, &xs);
        let m = 16.0 / 5.0;
        let var = xs.iter().map(|x: &f64| (x - m).powi(2)).sum::<f64>() / 4.0;
        assert!((c.mean - var).abs() < 1e-12);
    }
}
