//! Streaming moments and Monte Carlo estimates.

use serde::{Deserialize, Serialize};

/// Welford accumulator; [`RunningStats::merge`] combines partial results in a fixed order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &RunningStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero for fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate {
            value: self.mean,
            std_error: self.std_error(),
        }
    }
}

impl FromIterator<f64> for RunningStats {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::new();
        iter.into_iter().for_each(|x| s.push(x));
        s
    }
}

/// A value with its one-sigma standard error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, std_error: 0.0 }
    }

    /// `|value - target| <= k * std_error`, with a small absolute floor for exact estimates.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.std_error + 1e-12 * (1.0 + target.abs())
    }
}

/// Mean and standard error of each coordinate of a vector-valued sample.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorStats {
    parts: Vec<RunningStats>,
}

impl VectorStats {
    pub fn new(len: usize) -> Self {
        Self {
            parts: vec![RunningStats::new(); len],
        }
    }

    pub fn push(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.parts.len());
        self.parts.iter_mut().zip(values).for_each(|(s, &v)| s.push(v));
    }

    pub fn merge(&mut self, other: &VectorStats) {
        self.parts.iter_mut().zip(&other.parts).for_each(|(a, b)| a.merge(b));
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn count(&self) -> u64 {
        self.parts.first().map_or(0, |s| s.count())
    }

    pub fn means(&self) -> Vec<f64> {
        self.parts.iter().map(|s| s.mean()).collect()
    }

    pub fn std_errors(&self) -> Vec<f64> {
        self.parts.iter().map(|s| s.std_error()).collect()
    }

    pub fn get(&self, k: usize) -> &RunningStats {
        &self.parts[k]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welford_matches_two_pass() {
        let xs: Vec<f64> = (0..100).map(|k| ((k * 37) % 11) as f64 * 0.3 - 1.0).collect();
        let s: RunningStats = xs.iter().copied().collect();
        let m = xs.iter().sum::<f64>() / 100.0;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 99.0;
        assert!((s.mean() - m).abs() < 1e-14);
        assert!((s.variance() - v).abs() < 1e-13);
        let mut a: RunningStats = xs[..37].iter().copied().collect();
        let b: RunningStats = xs[37..].iter().copied().collect();
        a.merge(&b);
        assert!((a.mean() - m).abs() < 1e-14);
        assert!((a.variance() - v).abs() < 1e-13);
        assert_eq!(a.count(), 100);
    }
}
