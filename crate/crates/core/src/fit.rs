//! Log-log power-law fits with bootstrap bands.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{GaussianStream, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignPolicy {
    /// Non-positive values are an error.
    Strict,
    /// Fit `|v|` and report how many values were non-positive.
    Absolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Inclusive radius window.
    pub range: (f64, f64),
    pub policy: SignPolicy,
    pub resamples: usize,
    pub seed: u64,
    /// Two-sided coverage of the band.
    pub coverage: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            range: (0.0, f64::INFINITY),
            policy: SignPolicy::Strict,
            resamples: 1000,
            seed: 0,
            coverage: 0.95,
        }
    }
}

impl FitOptions {
    pub fn within(range: (f64, f64)) -> Self {
        Self {
            range,
            ..Self::default()
        }
    }

    pub fn absolute(mut self) -> Self {
        self.policy = SignPolicy::Absolute;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub exponent: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Bootstrap band for the exponent.
    pub band: (f64, f64),
    pub points: usize,
    pub non_positive: usize,
}

impl DecayFit {
    /// Half-width of the band, a one-sigma-like spread for pass bands.
    pub fn spread(&self) -> f64 {
        0.5 * (self.band.1 - self.band.0)
    }
}

struct Line {
    slope: f64,
    intercept: f64,
    r_squared: f64,
}

fn least_squares(xs: &[f64], ys: &[f64]) -> Option<Line> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 1e-300 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r_squared = if ss_tot <= 1e-28 * (1.0 + my * my) {
        if ss_res <= 1e-28 * (1.0 + my * my) {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    Some(Line {
        slope,
        intercept,
        r_squared,
    })
}

fn prepare(radii: &[f64], values: &[f64], options: &FitOptions) -> Result<(Vec<f64>, Vec<f64>, usize, Vec<usize>)> {
    if radii.len() != values.len() {
        return Err(Error::LengthMismatch {
            expected: radii.len(),
            found: values.len(),
        });
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut kept = Vec::new();
    let mut non_positive = 0;
    for (i, (&r, &v)) in radii.iter().zip(values).enumerate() {
        if r < options.range.0 || r > options.range.1 {
            continue;
        }
        if !(r > 0.0) || !v.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        if v <= 0.0 {
            non_positive += 1;
            if options.policy == SignPolicy::Strict {
                return Err(Error::InvalidParameter(format!("value {v} at radius {r} is not positive")));
            }
            if v == 0.0 {
                continue;
            }
        }
        xs.push(r.ln());
        ys.push(v.abs().ln());
        kept.push(i);
    }
    if xs.len() < 4 {
        return Err(Error::InsufficientData(format!("{} radii in range, need 4", xs.len())));
    }
    Ok((xs, ys, non_positive, kept))
}

fn percentile_band(mut slopes: Vec<f64>, coverage: f64, center: f64) -> (f64, f64) {
    if slopes.is_empty() {
        return (center, center);
    }
    slopes.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - coverage);
    let pick = |q: f64| slopes[((q * (slopes.len() - 1) as f64).round() as usize).min(slopes.len() - 1)];
    (pick(tail).min(center), pick(1.0 - tail).max(center))
}

/// Fit `log |v| = intercept + exponent log r`; the band resamples (r, v) pairs.
pub fn decay_fit(radii: &[f64], values: &[f64], options: &FitOptions) -> Result<DecayFit> {
    let (xs, ys, non_positive, _) = prepare(radii, values, options)?;
    let line = least_squares(&xs, &ys).ok_or_else(|| Error::InsufficientData("all radii coincide".into()))?;
    let mut rng = GaussianStream::new(options.seed, 0, Purpose::Bootstrap);
    let n = xs.len();
    let mut slopes = Vec::with_capacity(options.resamples);
    let (mut bx, mut by) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..options.resamples {
        for k in 0..n {
            let i = ((rng.next_uniform() * n as f64) as usize).min(n - 1);
            bx[k] = xs[i];
            by[k] = ys[i];
        }
        if let Some(l) = least_squares(&bx, &by) {
            slopes.push(l.slope);
        }
    }
    Ok(DecayFit {
        exponent: line.slope,
        intercept: line.intercept,
        r_squared: line.r_squared,
        band: percentile_band(slopes, options.coverage, line.slope),
        points: n,
        non_positive,
    })
}

/// Like [`decay_fit`], with the band from Gaussian perturbation of each value by its error bar.
pub fn decay_fit_with_errors(radii: &[f64], values: &[f64], errors: &[f64], options: &FitOptions) -> Result<DecayFit> {
    if errors.len() != values.len() {
        return Err(Error::LengthMismatch {
            expected: values.len(),
            found: errors.len(),
        });
    }
    let (xs, ys, non_positive, kept) = prepare(radii, values, options)?;
    let line = least_squares(&xs, &ys).ok_or_else(|| Error::InsufficientData("all radii coincide".into()))?;
    let mut rng = GaussianStream::new(options.seed, 0, Purpose::Bootstrap);
    let mut slopes = Vec::with_capacity(options.resamples);
    let mut by = vec![0.0; xs.len()];
    for _ in 0..options.resamples {
        let mut usable = true;
        for (k, &i) in kept.iter().enumerate() {
            let v = values[i].abs() + errors[i] * rng.next_normal();
            if v <= 0.0 {
                usable = false;
            }
            by[k] = v.abs().max(f64::MIN_POSITIVE).ln();
        }
        if !usable {
            continue;
        }
        if let Some(l) = least_squares(&xs, &by) {
            slopes.push(l.slope);
        }
    }
    Ok(DecayFit {
        exponent: line.slope,
        intercept: line.intercept,
        r_squared: line.r_squared,
        band: percentile_band(slopes, options.coverage, line.slope),
        points: xs.len(),
        non_positive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_power() {
        let r: Vec<f64> = (1..=10).map(|k| k as f64).collect();
        let v: Vec<f64> = r.iter().map(|x| 1.0 / x).collect();
        let fit = decay_fit(&r, &v, &FitOptions::default()).unwrap();
        assert!((fit.exponent + 1.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert!(fit.intercept.abs() < 1e-12);
        assert!(fit.spread() < 1e-10);
    }

    #[test]
    fn logarithmic_correction() {
        let r: Vec<f64> = (4..=64).map(|k| k as f64).collect();
        let v: Vec<f64> = r.iter().map(|x| x.powi(-2) * x.ln()).collect();
        let fit = decay_fit(&r, &v, &FitOptions::default()).unwrap();
        // The local slope is -2 + 1 / log r, so the fit lies between its values at the ends.
        let (lo, hi) = (-2.0 + 1.0 / 64f64.ln(), -2.0 + 1.0 / 4f64.ln());
        assert!(fit.exponent > lo && fit.exponent < hi, "{}", fit.exponent);
    }

    #[test]
    fn constant_sequence() {
        let r = [1.0, 2.0, 3.0, 5.0, 8.0];
        let fit = decay_fit(&r, &[0.7; 5], &FitOptions::default()).unwrap();
        assert!(fit.exponent.abs() < 1e-14);
        assert_eq!(fit.r_squared, 1.0);
    }

    #[test]
    fn sign_policies() {
        let r = [1.0, 2.0, 3.0, 4.0, 5.0];
        let v = [1.0, -0.5, 0.33, 0.25, 0.2];
        assert!(decay_fit(&r, &v, &FitOptions::default()).is_err());
        let fit = decay_fit(&r, &v, &FitOptions::default().absolute()).unwrap();
        assert_eq!(fit.non_positive, 1);
        assert!(decay_fit(&r[..3], &v[..3], &FitOptions::default().absolute()).is_err());
    }

    #[test]
    fn window_and_determinism() {
        let r: Vec<f64> = (1..=40).map(|k| k as f64).collect();
        let v: Vec<f64> = r.iter().map(|x| x.powf(-3.0) * (1.0 + 0.1 * (x * 1.7).sin())).collect();
        let opts = FitOptions::within((4.0, 32.0));
        let a = decay_fit(&r, &v, &opts).unwrap();
        let b = decay_fit(&r, &v, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.points, 29);
        assert!(a.band.0 <= a.exponent && a.exponent <= a.band.1);
        let errs: Vec<f64> = v.iter().map(|x| 0.05 * x).collect();
        let c = decay_fit_with_errors(&r, &v, &errs, &opts).unwrap();
        assert_eq!(c.exponent, a.exponent);
        assert!(c.spread() > 0.0);
    }

    proptest! {
        #[test]
        fn recovers_any_power(p in -4.0f64..1.0, c in 0.1f64..10.0) {
            let r: Vec<f64> = (2..12).map(|k| k as f64 * 1.5).collect();
            let v: Vec<f64> = r.iter().map(|x| c * x.powf(p)).collect();
            let fit = decay_fit(&r, &v, &FitOptions { resamples: 20, ..FitOptions::default() }).unwrap();
            prop_assert!((fit.exponent - p).abs() < 1e-10);
            prop_assert!((fit.intercept - c.ln()).abs() < 1e-9);
        }
    }
}
