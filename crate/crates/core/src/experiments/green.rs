use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::correlation::{Status, Verdict};
use crate::elliptic::{correctors, green_column};
use crate::error::{Error, Result};
use crate::fit::{decay_fit_with_errors, FitOptions};
use crate::homogenize::{estimate_ah, EXCLUSION_FRACTION};
use crate::kernels::torus_grad_gh;
use crate::environment::sample_environment;
use crate::lattice::TorusGeometry;
use crate::stats::VectorStats;

/// Lower end of the radius window for the annealed decay fits.
pub const GREEN_FIT_MIN_RADIUS: f64 = 3.0;
/// Environments used for `A_h` in the mean-gradient comparison.
pub const HOMOGENIZED_SAMPLES: usize = 200;

/// One axis site `y = sign * n * e_axis`; gradients are centered differences at `y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreenDecayRow {
    pub axis: usize,
    pub sign: i8,
    pub radius: f64,
    /// `E[|grad G(0, .)(y)|^2]^{1/2}`.
    pub gradient: f64,
    pub gradient_error: f64,
    /// Distance from `e_1 / 2` to `y`.
    pub mixed_radius: f64,
    /// Same for `grad (G(e_1, .) - G(0, .))(y)`.
    pub mixed: f64,
    pub mixed_error: f64,
    /// `|E[grad G(0, .)(y)] - grad G_h(y)|`.
    pub mean_deviation: f64,
    pub mean_deviation_error: f64,
    pub homogenized_gradient: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreenDecayReport {
    pub dim: usize,
    pub side: usize,
    pub samples: usize,
    pub excluded: usize,
    pub homogenized: Vec<f64>,
    pub rows: Vec<GreenDecayRow>,
    pub verdicts: Vec<Verdict>,
}

impl GreenDecayReport {
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "axis,sign,radius,gradient,gradient_error,mixed_radius,mixed,mixed_error,mean_deviation,mean_deviation_error,homogenized_gradient\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                r.axis,
                r.sign,
                r.radius,
                r.gradient,
                r.gradient_error,
                r.mixed_radius,
                r.mixed,
                r.mixed_error,
                r.mean_deviation,
                r.mean_deviation_error,
                r.homogenized_gradient
            ));
        }
        out
    }
}

struct AxisSite {
    axis: usize,
    sign: i8,
    radius: f64,
    mixed_radius: f64,
    /// Forward and backward edge index per direction.
    edges: Vec<(usize, usize)>,
}

impl AxisSite {
    fn centered<'a>(&'a self, gradient: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        self.edges.iter().map(move |&(f, b)| 0.5 * (gradient[f] + gradient[b]))
    }
}

/// Sites `+-n e_i` for `n = 1..=L/4`.
fn axis_sites(g: &TorusGeometry) -> Vec<AxisSite> {
    let d = g.dim();
    let mut sites = Vec::new();
    for n in 1..=(g.side() / 4) as i64 {
        for axis in 0..d {
            for sign in [1i8, -1] {
                let mut y = vec![0i64; d];
                y[axis] = sign as i64 * n;
                let site = g.site(&y);
                let edges = (0..d)
                    .map(|j| {
                        let mut back = y.clone();
                        back[j] -= 1;
                        (site * d + j, g.site(&back) * d + j)
                    })
                    .collect();
                let along = y[0] as f64 - 0.5;
                let mixed_radius = (y.iter().skip(1).map(|&v| (v * v) as f64).sum::<f64>() + along * along).sqrt();
                sites.push(AxisSite {
                    axis,
                    sign,
                    radius: n as f64,
                    mixed_radius,
                    edges,
                });
            }
        }
    }
    sites
}

fn sqrt_estimate(mean: f64, error: f64) -> (f64, f64) {
    let m = mean.max(0.0).sqrt();
    (m, if m > 0.0 { error / (2.0 * m) } else { 0.0 })
}

fn exponent_verdict(name: &str, radii: &[f64], values: &[f64], errors: &[f64], bound: Bound, opts: &FitOptions) -> Verdict {
    let label = bound.label();
    match decay_fit_with_errors(radii, values, errors, opts) {
        Ok(fit) => Verdict {
            name: name.into(),
            statistic: fit.exponent,
            band: label,
            status: if bound.holds(fit.exponent) { Status::Pass } else { Status::Fail },
            detail: format!("{} sites; bootstrap band [{:.3}, {:.3}]", fit.points, fit.band.0, fit.band.1),
        },
        Err(e) => Verdict {
            name: name.into(),
            statistic: f64::NAN,
            band: label,
            status: Status::Inconclusive,
            detail: e.to_string(),
        },
    }
}

#[derive(Clone, Copy)]
enum Bound {
    Within(f64, f64),
    AtMost(f64),
}

impl Bound {
    fn holds(self, v: f64) -> bool {
        match self {
            Bound::Within(t, b) => (v - t).abs() <= b,
            Bound::AtMost(t) => v <= t,
        }
    }

    fn label(self) -> String {
        match self {
            Bound::Within(t, b) => format!("[{:.2}, {:.2}]", t - b, t + b),
            Bound::AtMost(t) => format!("<= {t:.2}"),
        }
    }
}

/// Annealed decay of the Green function gradients at `mu = 0` on the axis sites, and the distance
/// of the mean gradient to the torus `grad G_h`.
pub fn green_decay(config: &RunConfig) -> Result<GreenDecayReport> {
    config.validate()?;
    let g = config.geometry()?;
    let d = g.dim();
    let sites = axis_sites(&g);
    if sites.is_empty() {
        return Err(Error::InvalidParameter(format!("side {} leaves no radii", g.side())));
    }
    let mut e1 = vec![0i64; d];
    e1[0] = 1;
    let shifted_source = g.site(&e1);
    let ns = sites.len();
    let width = 2 * ns + ns * d;
    let results: Vec<Option<Vec<f64>>> = (0..config.samples as u64)
        .into_par_iter()
        .map(|k| {
            let env = sample_environment(&g, &config.map, config.seed, k).ok()?;
            let g0 = green_column(&env.a, 0.0, 0, &config.solver).ok()?.gradient();
            let g1 = green_column(&env.a, 0.0, shifted_source, &config.solver).ok()?.gradient();
            let mut row = vec![0.0; width];
            for (p, y) in sites.iter().enumerate() {
                for (j, (a, b)) in y.centered(g0.values()).zip(y.centered(g1.values())).enumerate() {
                    row[p] += a * a;
                    row[ns + p] += (b - a) * (b - a);
                    row[2 * ns + p * d + j] = a;
                }
            }
            Some(row)
        })
        .collect();
    let excluded = results.iter().filter(|r| r.is_none()).count();
    let budget = (EXCLUSION_FRACTION * config.samples as f64).floor() as usize;
    if excluded > budget {
        return Err(Error::ExclusionBudget {
            excluded,
            total: config.samples,
            budget,
        });
    }
    let mut stats = VectorStats::new(width);
    results.iter().flatten().for_each(|r| stats.push(r));
    let ah = estimate_ah(&g, &config.map, config.seed, config.samples.clamp(2, HOMOGENIZED_SAMPLES), 0.0, &config.solver)?;
    let homogenized = ah.matrix.diagonal();
    let gh = torus_grad_gh(&homogenized, &g)?;
    let rows: Vec<GreenDecayRow> = sites
        .iter()
        .enumerate()
        .map(|(p, y)| {
            let (gradient, gradient_error) = sqrt_estimate(stats.get(p).mean(), stats.get(p).std_error());
            let (mixed, mixed_error) = sqrt_estimate(stats.get(ns + p).mean(), stats.get(ns + p).std_error());
            let mut dev2 = 0.0;
            let mut var = 0.0;
            let mut h2 = 0.0;
            for (j, h) in y.centered(gh.values()).enumerate() {
                let m = stats.get(2 * ns + p * d + j);
                let diff = m.mean() - h;
                dev2 += diff * diff;
                var += (diff * m.std_error()).powi(2);
                h2 += h * h;
            }
            let dev = dev2.sqrt();
            GreenDecayRow {
                axis: y.axis,
                sign: y.sign,
                radius: y.radius,
                gradient,
                gradient_error,
                mixed_radius: y.mixed_radius,
                mixed,
                mixed_error,
                mean_deviation: dev,
                mean_deviation_error: if dev > 0.0 { var.sqrt() / dev } else { 0.0 },
                homogenized_gradient: h2.sqrt(),
            }
        })
        .collect();
    let dd = d as f64;
    let col = |f: fn(&GreenDecayRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let opts = FitOptions {
        resamples: config.analysis.bootstrap,
        ..FitOptions::within((GREEN_FIT_MIN_RADIUS, g.side() as f64 / 4.0))
    };
    let radii = col(|x| x.radius);
    let verdicts = vec![
        exponent_verdict(
            "gradient_exponent",
            &radii,
            &col(|x| x.gradient),
            &col(|x| x.gradient_error),
            Bound::Within(-(dd - 1.0), 0.3),
            &opts,
        ),
        exponent_verdict(
            "mixed_exponent",
            &col(|x| x.mixed_radius),
            &col(|x| x.mixed),
            &col(|x| x.mixed_error),
            Bound::Within(-dd, 0.4),
            &opts,
        ),
        exponent_verdict(
            "mean_gradient_deviation_exponent",
            &radii,
            &col(|x| x.mean_deviation),
            &col(|x| x.mean_deviation_error),
            Bound::AtMost(-(dd - 0.5)),
            &opts,
        ),
    ];
    Ok(GreenDecayReport {
        dim: d,
        side: g.side(),
        samples: config.samples - excluded,
        excluded,
        homogenized,
        rows,
        verdicts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub mu: f64,
    pub p: u32,
    /// `E|phi_xi(x)|^p`, averaged over sites.
    pub phi: f64,
    pub phi_error: f64,
    /// `E|grad phi_xi(e)|^p`, averaged over edges.
    pub gradient: f64,
    pub gradient_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentTable {
    pub rows: Vec<MomentRow>,
    /// Largest relative change of any moment against the first mass.
    pub variation: f64,
}

pub const MOMENT_MASSES: [f64; 2] = [0.0, 1e-2];
pub const MOMENT_POWERS: [u32; 3] = [2, 4, 8];
pub const MOMENT_VARIATION_BOUND: f64 = 0.2;

impl MomentTable {
    pub fn csv(&self) -> String {
        let mut out = String::from("mu,p,phi,phi_error,gradient,gradient_error\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:.17e},{},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                r.mu, r.p, r.phi, r.phi_error, r.gradient, r.gradient_error
            ));
        }
        out
    }
}

/// Corrector moments for each mass in [`MOMENT_MASSES`] on the same environments.
pub fn corrector_moments(config: &RunConfig) -> Result<MomentTable> {
    config.validate()?;
    let g = config.geometry()?;
    let np = MOMENT_POWERS.len();
    let results: Vec<Option<Vec<f64>>> = (0..config.samples as u64)
        .into_par_iter()
        .map(|k| {
            let env = sample_environment(&g, &config.map, config.seed, k).ok()?;
            let mut row = Vec::with_capacity(MOMENT_MASSES.len() * 2 * np);
            for &mu in &MOMENT_MASSES {
                let set = correctors(&env.a, mu, &config.solver).ok()?;
                let phi = set.combine(&config.xi).ok()?;
                let grad = set.combined_gradient(&config.xi).ok()?;
                for &p in &MOMENT_POWERS {
                    row.push(phi.values().iter().map(|v| v.abs().powi(p as i32)).sum::<f64>() / phi.len() as f64);
                    row.push(grad.values().iter().map(|v| v.abs().powi(p as i32)).sum::<f64>() / grad.len() as f64);
                }
            }
            Some(row)
        })
        .collect();
    let excluded = results.iter().filter(|r| r.is_none()).count();
    let budget = (EXCLUSION_FRACTION * config.samples as f64).floor() as usize;
    if excluded > budget {
        return Err(Error::ExclusionBudget {
            excluded,
            total: config.samples,
            budget,
        });
    }
    let mut stats = VectorStats::new(MOMENT_MASSES.len() * 2 * np);
    results.iter().flatten().for_each(|r| stats.push(r));
    let mut rows = Vec::new();
    for (m, &mu) in MOMENT_MASSES.iter().enumerate() {
        for (k, &p) in MOMENT_POWERS.iter().enumerate() {
            let base = (m * np + k) * 2;
            rows.push(MomentRow {
                mu,
                p,
                phi: stats.get(base).mean(),
                phi_error: stats.get(base).std_error(),
                gradient: stats.get(base + 1).mean(),
                gradient_error: stats.get(base + 1).std_error(),
            });
        }
    }
    let mut variation: f64 = 0.0;
    for (i, r) in rows[np..].iter().enumerate() {
        let reference = &rows[i % np];
        for (a, b) in [(r.phi, reference.phi), (r.gradient, reference.gradient)] {
            if b > 0.0 {
                variation = variation.max((a - b).abs() / b);
            }
        }
    }
    Ok(MomentTable { rows, variation })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn green_decay_small_run() {
        let config = RunConfig {
            side: 16,
            samples: 4,
            analysis: super::super::config::AnalysisConfig {
                bootstrap: 50,
                ..Default::default()
            },
            ..RunConfig::default()
        };
        let rep = green_decay(&config).unwrap();
        assert_eq!(rep.rows.len(), 4 * 6);
        let outward = |axis: usize, sign: i8| -> Vec<f64> {
            rep.rows.iter().filter(|r| r.axis == axis && r.sign == sign).map(|r| r.gradient).collect()
        };
        for axis in 0..3 {
            for sign in [1, -1] {
                assert!(outward(axis, sign).windows(2).all(|w| w[1] < w[0]));
            }
        }
        assert!(rep.rows.iter().filter(|r| r.axis != 0).all(|r| r.mixed < r.gradient));
        assert_eq!(rep.verdicts.len(), 3);
        assert!(rep.verdicts[0].statistic < 0.0, "{:?}", rep.verdicts);
        assert_eq!(rep.csv(), green_decay(&config).unwrap().csv());
    }

    #[test]
    fn constant_medium_mean_gradient_is_homogenized() {
        let config = RunConfig {
            side: 12,
            samples: 2,
            map: crate::environment::CoefficientMap::Constant { value: 1.0 },
            solver: crate::elliptic::SolveConfig::with_tolerance(1e-12),
            ..RunConfig::default()
        };
        let rep = green_decay(&config).unwrap();
        assert!(rep.rows.iter().all(|r| r.mean_deviation.abs() < 1e-9 * r.homogenized_gradient.abs().max(1.0)), "{:?}", rep.rows);
    }

    #[test]
    fn moments_stable_in_mass() {
        let config = RunConfig {
            side: 8,
            samples: 4,
            ..RunConfig::default()
        };
        let table = corrector_moments(&config).unwrap();
        assert_eq!(table.rows.len(), 6);
        assert!(table.rows.iter().all(|r| r.phi > 0.0 && r.gradient > 0.0));
        assert!(table.variation < MOMENT_VARIATION_BOUND, "{}", table.variation);
    }
}
