use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{AnalysisConfig, RunConfig};
use crate::elliptic::{correctors, SolveConfig};
use crate::environment::{sample_environment, CoefficientMap};
use crate::error::{Error, Result};
use crate::fit::{decay_fit, decay_fit_with_errors, DecayFit, FitOptions};
use crate::homogenize::{estimate_q, flux_average, MatrixEstimate, EXCLUSION_FRACTION};
use crate::kernels;
use crate::lattice::TorusGeometry;
use crate::spectral::autocorrelation;
use crate::stats::{Estimate, VectorStats};

pub const SHIFTED_NORM_NOTE: &str = "|x|_* = |x| + 2";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPoint {
    pub coords: Vec<i64>,
    pub radius: f64,
    pub c: f64,
    pub c_error: f64,
    pub k: f64,
    /// `K_T - K` at this point.
    pub periodization: f64,
}

/// Averages over the `2d` axis points `+-n e_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub radius: f64,
    pub c_raw: f64,
    pub c_raw_error: f64,
    /// `C - (K_T - K)`.
    pub c: f64,
    pub c_error: f64,
    pub k: f64,
}

impl ProfileRow {
    pub fn ratio(&self) -> Estimate {
        Estimate {
            value: self.c / self.k,
            std_error: self.c_error / self.k.abs(),
        }
    }
}

/// Shell amplitudes `a(r)` of the fit `C(x) ~ a(|x|) Theta(x)`, where `Theta(x) = K(x) |x|^{d-2}` is the angular profile of `K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShellRow {
    pub radius: f64,
    pub points: usize,
    pub normalized: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub dim: usize,
    pub side: usize,
    pub xi: Vec<f64>,
    pub samples: usize,
    pub excluded: usize,
    pub homogenized: MatrixEstimate,
    pub q: MatrixEstimate,
    pub analysis: AnalysisConfig,
    pub points: Vec<CorrelationPoint>,
    pub profile: Vec<ProfileRow>,
    pub shells: Vec<ShellRow>,
    pub note: String,
}

impl CorrelationReport {
    pub fn c_origin(&self) -> Estimate {
        self.points
            .iter()
            .find(|p| p.radius == 0.0)
            .map_or(Estimate::default(), |p| Estimate {
                value: p.c,
                std_error: p.c_error,
            })
    }

    /// Builds a report from a prescribed correlation function with zero error bars.
    pub fn synthetic(
        side: usize,
        q: &DMatrix<f64>,
        homogenized: &[f64],
        analysis: &AnalysisConfig,
        c: impl Fn(&[f64]) -> f64,
    ) -> Result<Self> {
        let g = TorusGeometry::new(homogenized.len(), side)?;
        let ball = ball_sites(&g);
        let layout = Layout::new(&g, &ball, q, homogenized, false)?;
        let values: Vec<f64> = layout.coords.iter().map(|x| c(&to_f64(x))).collect();
        let samples = vec![values];
        let d = g.dim();
        let mut q_est = MatrixEstimate::zeros(d);
        q_est.values = q.iter().copied().collect();
        let mut ah = MatrixEstimate::zeros(d);
        for i in 0..d {
            ah.values[i * d + i] = homogenized[i];
        }
        Ok(layout.assemble(&g, &samples, 0, vec![0.0; d], ah, q_est, analysis))
    }

    pub fn points_csv(&self) -> String {
        let mut out = String::new();
        for j in 0..self.dim {
            out.push_str(&format!("x{j},"));
        }
        out.push_str("radius,c,c_error,k,periodization\n");
        for p in &self.points {
            for c in &p.coords {
                out.push_str(&format!("{c},"));
            }
            out.push_str(&format!(
                "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                p.radius, p.c, p.c_error, p.k, p.periodization
            ));
        }
        out
    }

    pub fn profile_csv(&self) -> String {
        let mut out = String::from("radius,c_raw,c_raw_error,c,c_error,k,ratio,ratio_error\n");
        for r in &self.profile {
            let ratio = r.ratio();
            out.push_str(&format!(
                "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                r.radius, r.c_raw, r.c_raw_error, r.c, r.c_error, r.k, ratio.value, ratio.std_error
            ));
        }
        out
    }

    pub fn shells_csv(&self) -> String {
        let mut out = String::from("radius,points,normalized,error\n");
        for s in &self.shells {
            out.push_str(&format!("{:.17e},{},{:.17e},{:.17e}\n", s.radius, s.points, s.normalized, s.error));
        }
        out
    }
}

fn to_f64(x: &[i64]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

fn norm(x: &[i64]) -> f64 {
    x.iter().map(|&v| (v * v) as f64).sum::<f64>().sqrt()
}

/// Largest radius analysed; beyond it the periodization dominates.
pub fn analysis_radius(side: usize) -> f64 {
    (side / 4) as f64
}

/// Sites whose centered position lies within [`analysis_radius`].
pub fn ball_sites(g: &TorusGeometry) -> Vec<usize> {
    let r = analysis_radius(g.side());
    (0..g.site_count())
        .filter(|&s| norm(&g.centered_coords(s)) <= r + 1e-9)
        .collect()
}

/// Index bookkeeping and kernel values on the analysis ball.
struct Layout {
    sites: Vec<usize>,
    coords: Vec<Vec<i64>>,
    k: Vec<f64>,
    periodization: Vec<f64>,
    /// Per radius `n`, ball indices of `+-n e_i`.
    axes: Vec<(f64, Vec<usize>)>,
    /// Per squared radius, ball indices and projection weights `Theta / |Theta|^2`.
    shells: Vec<(f64, Vec<(usize, f64)>)>,
}

impl Layout {
    fn new(g: &TorusGeometry, ball: &[usize], q: &DMatrix<f64>, homogenized: &[f64], periodize: bool) -> Result<Self> {
        let d = g.dim();
        let coords: Vec<Vec<i64>> = ball.iter().map(|&s| g.centered_coords(s)).collect();
        let periodization = if periodize && d == 3 && q.amax() > 0.0 {
            let p = kernels::periodized_kernel(q, homogenized, g, ball)?;
            p.correction
        } else {
            vec![0.0; ball.len()]
        };
        let k: Vec<f64> = coords
            .iter()
            .map(|x| {
                if x.iter().all(|&v| v == 0) || q.amax() == 0.0 {
                    Ok(0.0)
                } else {
                    kernels::kernel_k_closed_form(q, homogenized, &to_f64(x))
                }
            })
            .collect::<Result<_>>()?;
        let index: BTreeMap<usize, usize> = ball.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let rmax = analysis_radius(g.side()) as i64;
        let axes = (1..=rmax)
            .map(|n| {
                let mut idx = Vec::new();
                for i in 0..d {
                    for sign in [1, -1] {
                        let mut x = vec![0i64; d];
                        x[i] = sign * n;
                        idx.push(index[&g.site(&x)]);
                    }
                }
                (n as f64, idx)
            })
            .collect();
        let mut by_shell: BTreeMap<i64, Vec<(usize, f64)>> = BTreeMap::new();
        for (i, x) in coords.iter().enumerate() {
            let r2: i64 = x.iter().map(|v| v * v).sum();
            if r2 == 0 {
                continue;
            }
            let theta = k[i] * (r2 as f64).sqrt().powi(d as i32 - 2);
            by_shell.entry(r2).or_default().push((i, theta));
        }
        // Least-squares amplitude of C against Theta on each shell; Theta may vanish on axes.
        let shells = by_shell
            .into_iter()
            .map(|(r2, v)| {
                let norm: f64 = v.iter().map(|(_, t)| t * t).sum();
                let w = v.into_iter().map(|(i, t)| (i, if norm > 0.0 { t / norm } else { 0.0 })).collect();
                ((r2 as f64).sqrt(), w)
            })
            .collect();
        Ok(Self {
            sites: ball.to_vec(),
            coords,
            k,
            periodization,
            axes,
            shells,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        &self,
        g: &TorusGeometry,
        samples: &[Vec<f64>],
        excluded: usize,
        xi: Vec<f64>,
        homogenized: MatrixEstimate,
        q: MatrixEstimate,
        analysis: &AnalysisConfig,
    ) -> CorrelationReport {
        let n = self.sites.len();
        let mut raw = VectorStats::new(n);
        let mut axis_raw = VectorStats::new(self.axes.len());
        let mut axis = VectorStats::new(self.axes.len());
        let mut shell = VectorStats::new(self.shells.len());
        for values in samples {
            raw.push(values);
            let corrected: Vec<f64> = values.iter().zip(&self.periodization).map(|(c, b)| c - b).collect();
            let avg = |v: &[f64], idx: &[usize]| idx.iter().map(|&i| v[i]).sum::<f64>() / idx.len() as f64;
            axis_raw.push(&self.axes.iter().map(|(_, idx)| avg(values, idx)).collect::<Vec<_>>());
            axis.push(&self.axes.iter().map(|(_, idx)| avg(&corrected, idx)).collect::<Vec<_>>());
            shell.push(
                &self
                    .shells
                    .iter()
                    .map(|(_, pts)| pts.iter().map(|&(i, w)| corrected[i] * w).sum::<f64>())
                    .collect::<Vec<_>>(),
            );
        }
        let (means, errs) = (raw.means(), raw.std_errors());
        let points = (0..n)
            .map(|i| CorrelationPoint {
                coords: self.coords[i].clone(),
                radius: norm(&self.coords[i]),
                c: means[i],
                c_error: errs[i],
                k: self.k[i],
                periodization: self.periodization[i],
            })
            .collect();
        let profile = self
            .axes
            .iter()
            .enumerate()
            .map(|(j, (r, idx))| ProfileRow {
                radius: *r,
                c_raw: axis_raw.get(j).mean(),
                c_raw_error: axis_raw.get(j).std_error(),
                c: axis.get(j).mean(),
                c_error: axis.get(j).std_error(),
                k: idx.iter().map(|&i| self.k[i]).sum::<f64>() / idx.len() as f64,
            })
            .collect();
        let shells = self
            .shells
            .iter()
            .enumerate()
            .map(|(j, (r, pts))| ShellRow {
                radius: *r,
                points: pts.len(),
                normalized: shell.get(j).mean(),
                error: shell.get(j).std_error(),
            })
            .collect();
        CorrelationReport {
            dim: g.dim(),
            side: g.side(),
            xi,
            samples: samples.len(),
            excluded,
            homogenized,
            q,
            analysis: analysis.clone(),
            points,
            profile,
            shells,
            note: SHIFTED_NORM_NOTE.into(),
        }
    }
}

/// Translation-averaged `phi_xi(y) phi_xi(y + x)` on the analysis ball for one environment,
/// together with the per-sample homogenized diagonal.
fn environment_correlation(
    g: &TorusGeometry,
    ball: &[usize],
    map: &CoefficientMap,
    seed: u64,
    index: u64,
    mu: f64,
    xi: &[f64],
    solver: &SolveConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let env = sample_environment(g, map, seed, index)?;
    let set = correctors(&env.a, mu, solver)?;
    let phi = set.combine(xi)?.centered();
    let c = autocorrelation(phi.values(), g.dim(), g.side());
    let values = ball
        .iter()
        .map(|&s| {
            let neg: Vec<i64> = g.centered_coords(s).iter().map(|v| -v).collect();
            0.5 * (c[s] + c[g.site(&neg)])
        })
        .collect();
    let flux = flux_average(&env.a, &set);
    let d = g.dim();
    Ok((values, (0..d).map(|i| flux[i * d + i]).collect()))
}

/// Empirical corrector correlations against `K` built from the same run's `A_h` and `Q`.
pub fn correlation_map(config: &RunConfig) -> Result<CorrelationReport> {
    correlation_map_with(config, None)
}

/// As [`correlation_map`], reusing a `Q` estimate for `config.xi` when one is given.
pub fn correlation_map_with(config: &RunConfig, q: Option<&MatrixEstimate>) -> Result<CorrelationReport> {
    config.validate()?;
    let g = config.geometry()?;
    if g.dim() < 3 {
        return Err(Error::UnsupportedDimension(g.dim()));
    }
    let ball = ball_sites(&g);
    let results: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..config.samples as u64)
        .into_par_iter()
        .map(|k| environment_correlation(&g, &ball, &config.map, config.seed, k, config.mu, &config.xi, &config.solver).ok())
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
    let kept: Vec<(Vec<f64>, Vec<f64>)> = results.into_iter().flatten().collect();
    let d = g.dim();
    let mut ah_stats = VectorStats::new(d);
    kept.iter().for_each(|(_, a)| ah_stats.push(a));
    let mut ah = MatrixEstimate::zeros(d);
    for i in 0..d {
        ah.values[i * d + i] = ah_stats.get(i).mean();
        ah.errors[i * d + i] = ah_stats.get(i).std_error();
    }
    let homogenized = ah.diagonal();
    let q = if let Some(q) = q {
        q.clone()
    } else if config.map.is_constant() {
        MatrixEstimate::zeros(d)
    } else {
        estimate_q(&config.xi, &g, &config.map, &config.q_spec()?, &config.solver)?.matrix
    };
    let qm = q.to_matrix();
    let qs = (&qm + qm.transpose()) * 0.5;
    let layout = Layout::new(&g, &ball, &qs, &homogenized, config.analysis.periodization)?;
    let samples: Vec<Vec<f64>> = kept.into_iter().map(|(c, _)| c).collect();
    Ok(layout.assemble(&g, &samples, excluded, config.xi.clone(), ah, q, &config.analysis))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub statistic: f64,
    pub band: String,
    pub status: Status,
    pub detail: String,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremVerdicts {
    pub exponent: Verdict,
    pub ratio_trend: Verdict,
    pub difference_gap: Verdict,
}

impl TheoremVerdicts {
    pub fn all(&self) -> [&Verdict; 3] {
        [&self.exponent, &self.ratio_trend, &self.difference_gap]
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("name,statistic,band,status,detail\n");
        for v in self.all() {
            out.push_str(&format!(
                "{},{:.17e},{},{:?},{}\n",
                v.name,
                v.statistic,
                v.band,
                v.status,
                v.detail.replace(',', ";")
            ));
        }
        out
    }
}

fn inconclusive(name: &str, band: &str, detail: String) -> Verdict {
    Verdict {
        name: name.into(),
        statistic: f64::NAN,
        band: band.into(),
        status: Status::Inconclusive,
        detail,
    }
}

/// Tolerance on the decay exponent of `C`.
pub const EXPONENT_BAND: f64 = 0.3;
/// Required steepening of `|C - K|` relative to `K`.
pub const REQUIRED_GAP: f64 = 0.5;

fn fit_options(analysis: &AnalysisConfig, lo: f64, side: usize) -> FitOptions {
    FitOptions {
        resamples: analysis.bootstrap,
        ..FitOptions::within((lo, analysis_radius(side)))
    }
}

pub fn exponent_verdict(report: &CorrelationReport) -> Verdict {
    let name = "c_decay_exponent";
    let target = -(report.dim as f64 - 2.0);
    let band = format!("[{:.2}, {:.2}]", target - EXPONENT_BAND, target + EXPONENT_BAND);
    let (r, v, e): (Vec<f64>, Vec<f64>, Vec<f64>) = report.shells.iter().map(|s| (s.radius, s.normalized, s.error)).fold(
        (vec![], vec![], vec![]),
        |mut acc, (a, b, c)| {
            acc.0.push(a);
            acc.1.push(b);
            acc.2.push(c);
            acc
        },
    );
    let opts = fit_options(&report.analysis, report.analysis.fit_min_radius, report.side);
    match decay_fit_with_errors(&r, &v, &e, &opts) {
        Ok(fit) => Verdict {
            name: name.into(),
            statistic: fit.exponent,
            band,
            status: if (fit.exponent - target).abs() <= EXPONENT_BAND {
                Status::Pass
            } else {
                Status::Fail
            },
            detail: format!(
                "{} shells in [{}, {}]; bootstrap band [{:.3}, {:.3}]; R^2 {:.4}",
                fit.points,
                report.analysis.fit_min_radius,
                analysis_radius(report.side),
                fit.band.0,
                fit.band.1,
                fit.r_squared
            ),
        },
        Err(e) => inconclusive(name, &band, e.to_string()),
    }
}

pub fn ratio_trend_verdict(report: &CorrelationReport) -> Verdict {
    let name = "c_over_k_trend";
    let band = "|C/K - 1| non-increasing within 2 sigma and improving by more than 2 sigma".to_string();
    let rows: Vec<&ProfileRow> = report
        .profile
        .iter()
        .filter(|r| {
            let n = r.radius as u64;
            n.is_power_of_two() && r.k != 0.0
        })
        .collect();
    if rows.len() < 3 {
        return inconclusive(name, &band, format!("{} dyadic radii", rows.len()));
    }
    let ratios: Vec<Estimate> = rows.iter().map(|r| r.ratio()).collect();
    let dev: Vec<f64> = ratios.iter().map(|r| (r.value - 1.0).abs()).collect();
    let detail = ratios
        .iter()
        .zip(&rows)
        .map(|(q, r)| format!("{}: {:.4}+-{:.4}", r.radius, q.value, q.std_error))
        .collect::<Vec<_>>()
        .join(" ");
    let consistent = dev.iter().zip(&ratios).all(|(d, r)| *d <= 2.0 * r.std_error + 1e-12);
    let monotone = (1..dev.len()).all(|k| dev[k] <= dev[k - 1] + 2.0 * ratios[k].std_error.hypot(ratios[k - 1].std_error));
    let last = dev.len() - 1;
    let improvement = dev[0] - dev[last];
    let improving = improvement > 2.0 * ratios[0].std_error.hypot(ratios[last].std_error);
    Verdict {
        name: name.into(),
        statistic: improvement,
        band,
        status: if consistent || (monotone && improving) {
            Status::Pass
        } else {
            Status::Fail
        },
        detail,
    }
}

pub fn difference_verdict(report: &CorrelationReport) -> Verdict {
    let name = "difference_gap";
    let band = format!(">= {REQUIRED_GAP} (one-sided, less the bootstrap half-width)");
    let lo = report.analysis.difference_min_radius;
    let rows: Vec<&ProfileRow> = report
        .profile
        .iter()
        .filter(|r| r.radius >= lo && r.radius <= analysis_radius(report.side))
        .collect();
    if rows.len() < 4 {
        return inconclusive(name, &band, format!("{} radii", rows.len()));
    }
    let r: Vec<f64> = rows.iter().map(|r| r.radius).collect();
    let diff: Vec<f64> = rows.iter().map(|r| (r.c - r.k).abs()).collect();
    let errs: Vec<f64> = rows.iter().map(|r| r.c_error).collect();
    let k: Vec<f64> = rows.iter().map(|r| r.k).collect();
    if diff.iter().all(|&v| v == 0.0) {
        return Verdict {
            name: name.into(),
            statistic: f64::INFINITY,
            band,
            status: Status::Pass,
            detail: "C equals K on the window".into(),
        };
    }
    let opts = fit_options(&report.analysis, lo, report.side).absolute();
    let fits: Result<(DecayFit, DecayFit)> =
        decay_fit(&r, &k, &opts).and_then(|kf| Ok((kf, decay_fit_with_errors(&r, &diff, &errs, &opts)?)));
    match fits {
        Ok((kf, df)) => {
            let gap = kf.exponent - df.exponent;
            let half = 0.5 * (df.band.1 - df.band.0);
            Verdict {
                name: name.into(),
                statistic: gap,
                band,
                status: if gap >= REQUIRED_GAP - half {
                    Status::Pass
                } else {
                    Status::Fail
                },
                detail: format!(
                    "K exponent {:.3}; |C-K| exponent {:.3} band [{:.3}, {:.3}]",
                    kf.exponent, df.exponent, df.band.0, df.band.1
                ),
            }
        }
        Err(e) => inconclusive(name, &band, e.to_string()),
    }
}

pub fn theorem_comparison(report: &CorrelationReport) -> TheoremVerdicts {
    TheoremVerdicts {
        exponent: exponent_verdict(report),
        ratio_trend: ratio_trend_verdict(report),
        difference_gap: difference_verdict(report),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(c: impl Fn(f64, f64) -> f64) -> CorrelationReport {
        let q = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&[1.3, 1.0, 1.0]));
        let ah = [1.0, 1.0, 1.0];
        let qc = q.clone();
        let analysis = AnalysisConfig {
            bootstrap: 200,
            ..AnalysisConfig::default()
        };
        CorrelationReport::synthetic(32, &q, &ah, &analysis, move |x| {
            let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if r == 0.0 {
                return 1.0;
            }
            let k = kernels::kernel_k_closed_form(&qc, &ah, x).unwrap();
            c(k, r)
        })
        .unwrap()
    }

    #[test]
    fn exact_kernel_passes() {
        let v = theorem_comparison(&synthetic(|k, _| k));
        assert!(v.all().iter().all(|x| x.passed()), "{v:?}");
        assert!((v.exponent.statistic + 1.0).abs() < 1e-10);
    }

    #[test]
    fn first_order_correction_gap() {
        let v = theorem_comparison(&synthetic(|k, r| k * (1.0 + 1.0 / r)));
        assert!(v.difference_gap.passed());
        assert!((v.difference_gap.statistic - 1.0).abs() < 1e-10, "{v:?}");
        assert!(v.ratio_trend.passed());
    }

    #[test]
    fn doubled_kernel_fails_trend() {
        let v = theorem_comparison(&synthetic(|k, _| 2.0 * k));
        assert_eq!(v.ratio_trend.status, Status::Fail);
        assert!(v.exponent.passed());
    }

    #[test]
    fn small_correlation_run() {
        let config = RunConfig {
            side: 8,
            samples: 6,
            quadrature: super::super::config::QConfig { nodes: 2, samples: 4 },
            ..RunConfig::default()
        };
        let a = correlation_map(&config).unwrap();
        assert!(a.c_origin().value > 0.0);
        let g = TorusGeometry::new(3, 8).unwrap();
        // Reflection symmetry is exact.
        for n in 1..=2i64 {
            let p = a.points.iter().find(|p| p.coords == vec![n, 0, 0]).unwrap();
            let m = a.points.iter().find(|p| p.coords == vec![-n, 0, 0]).unwrap();
            assert_eq!(p.c, m.c);
        }
        assert_eq!(a.points.len(), ball_sites(&g).len());
        let b = correlation_map(&config).unwrap();
        assert_eq!(a.points_csv(), b.points_csv());
        let constant = RunConfig {
            map: CoefficientMap::Constant { value: 1.0 },
            ..config
        };
        let c = correlation_map(&constant).unwrap();
        assert!(c.points.iter().all(|p| p.c.abs() < 1e-20 && p.k == 0.0));
    }
}
