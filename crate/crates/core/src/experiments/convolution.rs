use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `|x|_* = |x| + 2`.
pub fn shifted_norm(r: f64) -> f64 {
    r + 2.0
}

/// One of the bounded convolution regimes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub name: String,
    pub alpha: f64,
    pub beta: f64,
    /// Multiply the `|y|_*^{-alpha}` factor by `log |y|_*`.
    pub log_numerator: bool,
    /// Power of `log |x|_*` dividing the scaled sum.
    pub log_power: i32,
}

impl Regime {
    pub fn standard(d: usize) -> Vec<Regime> {
        let d = d as f64;
        vec![
            Regime {
                name: "supercritical".into(),
                alpha: d + 1.0,
                beta: 2.0,
                log_numerator: false,
                log_power: 0,
            },
            Regime {
                name: "critical".into(),
                alpha: d,
                beta: 2.0,
                log_numerator: false,
                log_power: 1,
            },
            Regime {
                name: "critical-log".into(),
                alpha: d,
                beta: 2.0,
                log_numerator: true,
                log_power: 2,
            },
        ]
    }
}

/// Partial sums of `sum_y w(y) / |y - x|_*^beta` over the boxes `|y|_inf <= R, R/2, R/4`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSums {
    pub full: f64,
    pub half: f64,
    pub quarter: f64,
}

/// Direct summation for `x = n e_1`, folding the reflections `y_j -> -y_j` for `j >= 1`.
pub fn convolution_sums(regime: &Regime, dim: usize, n: i64, cutoff: i64) -> Result<BoxSums> {
    if dim < 1 || cutoff < 4 {
        return Err(Error::InvalidParameter(format!("dimension {dim} and cutoff {cutoff}")));
    }
    let max_r2 = dim as i64 * (cutoff + n.abs()).pow(2);
    // Both factors depend on an integer squared radius only.
    let near: Vec<f64> = (0..=max_r2)
        .map(|r2| {
            let s = shifted_norm((r2 as f64).sqrt());
            let w = s.powf(-regime.alpha);
            if regime.log_numerator {
                w * s.ln()
            } else {
                w
            }
        })
        .collect();
    let far: Vec<f64> = (0..=max_r2).map(|r2| shifted_norm((r2 as f64).sqrt()).powf(-regime.beta)).collect();
    let rest = dim - 1;
    let side = (cutoff + 1) as usize;
    let combos = side.pow(rest as u32);
    let (h, q) = (cutoff / 2, cutoff / 4);
    let parts: Vec<[f64; 3]> = (0..combos)
        .into_par_iter()
        .map(|mut code| {
            let mut r2_rest = 0i64;
            let mut weight = 1.0;
            let mut linf = 0i64;
            for _ in 0..rest {
                let v = (code % side) as i64;
                code /= side;
                r2_rest += v * v;
                linf = linf.max(v);
                if v > 0 {
                    weight *= 2.0;
                }
            }
            let mut acc = [0.0; 3];
            for y0 in -cutoff..=cutoff {
                let t = near[(y0 * y0 + r2_rest) as usize] * far[((y0 - n) * (y0 - n) + r2_rest) as usize];
                let m = linf.max(y0.abs());
                acc[0] += t;
                if m <= h {
                    acc[1] += t;
                }
                if m <= q {
                    acc[2] += t;
                }
            }
            acc.map(|v| v * weight)
        })
        .collect();
    let sum = |k: usize| parts.iter().map(|p| p[k]).sum::<f64>();
    Ok(BoxSums {
        full: sum(0),
        half: sum(1),
        quarter: sum(2),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvolutionRow {
    pub radius: i64,
    pub shifted: f64,
    pub box_sum: f64,
    /// Geometric tail estimate beyond the cutoff box.
    pub tail: f64,
    /// Relative change of the tail-corrected sum between cutoffs `R/2` and `R`.
    pub sensitivity: f64,
    pub scaled: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvolutionReport {
    pub regime: Regime,
    pub dim: usize,
    pub cutoff: i64,
    pub rows: Vec<ConvolutionRow>,
    /// Max over min of the scaled sums.
    pub ratio: f64,
}

/// Largest admissible max/min ratio of the scaled sums.
pub const RATIO_BOUND: f64 = 20.0;
pub const SENSITIVITY_THRESHOLD: f64 = 0.01;

impl ConvolutionReport {
    pub fn flagged(&self) -> usize {
        self.rows.iter().filter(|r| r.flagged).count()
    }

    pub fn passes(&self) -> bool {
        self.ratio < RATIO_BOUND && self.flagged() == 0
    }
}

pub fn convolution_bound_check(regime: &Regime, dim: usize, radii: &[i64], cutoff: i64) -> Result<ConvolutionReport> {
    let d = dim as f64;
    if !(regime.alpha >= d) || !(regime.beta > 0.0 && regime.beta <= regime.alpha) {
        return Err(Error::InvalidParameter(format!(
            "alpha = {} must be at least {dim} and beta = {} in (0, alpha]",
            regime.alpha, regime.beta
        )));
    }
    let largest = radii.iter().map(|r| r.abs()).max().unwrap_or(0);
    if radii.is_empty() || cutoff < 4 * largest {
        return Err(Error::InvalidParameter(format!("cutoff {cutoff} is below 4 max|x| = {}", 4 * largest)));
    }
    // The summand beyond radius R decays like R^{-(alpha + beta)}, so the tail like R^{-p}.
    let p = regime.alpha + regime.beta - d;
    let factor = 2f64.powf(p) - 1.0;
    let rows: Vec<ConvolutionRow> = radii
        .iter()
        .map(|&n| {
            let s = convolution_sums(regime, dim, n, cutoff)?;
            let tail = (s.full - s.half) / factor;
            let coarse = s.half + (s.half - s.quarter) / factor;
            let total = s.full + tail;
            let shifted = shifted_norm(n.abs() as f64);
            let sensitivity = (total - coarse).abs() / total;
            Ok(ConvolutionRow {
                radius: n,
                shifted,
                box_sum: s.full,
                tail,
                sensitivity,
                scaled: total * shifted.powf(regime.beta) / shifted.ln().powi(regime.log_power),
                flagged: sensitivity > SENSITIVITY_THRESHOLD,
            })
        })
        .collect::<Result<_>>()?;
    let max = rows.iter().map(|r| r.scaled).fold(f64::MIN, f64::max);
    let min = rows.iter().map(|r| r.scaled).fold(f64::MAX, f64::min);
    Ok(ConvolutionReport {
        regime: regime.clone(),
        dim,
        cutoff,
        rows,
        ratio: max / min,
    })
}

pub fn convolution_csv(reports: &[ConvolutionReport]) -> String {
    let mut out = String::from("regime,alpha,beta,log_power,radius,shifted,box_sum,tail,sensitivity,scaled,flagged\n");
    for rep in reports {
        for r in &rep.rows {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}\n",
                rep.regime.name,
                rep.regime.alpha,
                rep.regime.beta,
                rep.regime.log_power,
                r.radius,
                r.shifted,
                r.box_sum,
                r.tail,
                r.sensitivity,
                r.scaled,
                r.flagged
            ));
        }
    }
    out
}

pub const DYADIC_RADII: [i64; 6] = [1, 2, 4, 8, 16, 32];

/// The three standard regimes over `DYADIC_RADII` with cutoff `4 max|x|`.
pub fn standard_bounds(dim: usize) -> Result<Vec<ConvolutionReport>> {
    Regime::standard(dim)
        .iter()
        .map(|r| convolution_bound_check(r, dim, &DYADIC_RADII, 4 * 32))
        .collect()
}
