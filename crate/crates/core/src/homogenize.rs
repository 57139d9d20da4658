//! Monte Carlo estimates of the homogenized matrix and of the correlation matrix `Q`.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::elliptic::{correctors, CorrectorSet, SolveConfig};
use crate::environment::{couple_fields, fresh_field, sample_environment, CoefficientMap};
use crate::error::{Error, Result};
use crate::lattice::{EdgeField, TorusGeometry};
use crate::quadrature::gauss_hermite;
use crate::resolvent::QuadratureSpec;
use crate::stats::VectorStats;

/// Square matrix with entrywise standard errors, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixEstimate {
    pub dim: usize,
    pub values: Vec<f64>,
    pub errors: Vec<f64>,
}

impl MatrixEstimate {
    fn from_stats(dim: usize, stats: &VectorStats) -> Self {
        Self {
            dim,
            values: stats.means(),
            errors: stats.std_errors(),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            values: vec![0.0; dim * dim],
            errors: vec![0.0; dim * dim],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim + j]
    }

    pub fn error(&self, i: usize, j: usize) -> f64 {
        self.errors[i * self.dim + j]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.values)
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.dim).map(|r| r.to_vec()).collect()
    }

    /// Largest `|M_ij - M_ji|` in units of the combined error.
    pub fn asymmetry_sigmas(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.dim {
            for j in 0..i {
                let s = self.error(i, j).hypot(self.error(j, i));
                let diff = (self.get(i, j) - self.get(j, i)).abs();
                worst = worst.max(if s > 0.0 { diff / s } else if diff > 1e-12 { f64::INFINITY } else { 0.0 });
            }
        }
        worst
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AhEstimate {
    pub matrix: MatrixEstimate,
    /// Trace over `d`, averaged per sample.
    pub scalar: f64,
    pub scalar_error: f64,
    pub samples: usize,
    pub excluded: usize,
    pub mean_iterations: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QEstimate {
    pub xi: Vec<f64>,
    pub matrix: MatrixEstimate,
    pub samples: usize,
    pub excluded: usize,
    pub nodes: usize,
}

/// Everything persisted from one homogenization run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomogenizedData {
    pub dim: usize,
    pub side: usize,
    pub mu: f64,
    pub map: CoefficientMap,
    pub seed: u64,
    pub ah: Option<AhEstimate>,
    pub q: Vec<QEstimate>,
    pub quadrature: Option<QuadratureSpec>,
}

impl HomogenizedData {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn budget_check(excluded: usize, total: usize, fraction: f64) -> Result<()> {
    let budget = (fraction * total as f64).floor() as usize;
    if excluded > budget {
        return Err(Error::ExclusionBudget { excluded, total, budget });
    }
    Ok(())
}

/// Fraction of environments that may fail to solve before an estimate is abandoned.
pub const EXCLUSION_FRACTION: f64 = 0.01;

/// Per-sample homogenized matrix: `(1/n) sum_x a_i(x) (delta_ij + grad_i phi_j(x))`.
pub fn flux_average(a: &EdgeField, set: &CorrectorSet) -> Vec<f64> {
    let g = a.geometry();
    let d = g.dim();
    let n = g.site_count();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let grad = &set.gradients[j];
            let delta = if i == j { 1.0 } else { 0.0 };
            // Running mean, exact for constant integrands.
            let mut mean = 0.0;
            for x in 0..n {
                mean += (a[x * d + i] * (delta + grad[x * d + i]) - mean) / (x + 1) as f64;
            }
            out[i * d + j] = mean;
        }
    }
    out
}

pub fn estimate_ah(
    geometry: &TorusGeometry,
    map: &CoefficientMap,
    seed: u64,
    samples: usize,
    mu: f64,
    config: &SolveConfig,
) -> Result<AhEstimate> {
    if samples < 2 {
        return Err(Error::InvalidParameter("at least two environments are needed".into()));
    }
    let d = geometry.dim();
    let results: Vec<Option<(Vec<f64>, f64)>> = (0..samples as u64)
        .into_par_iter()
        .map(|k| {
            let env = sample_environment(geometry, map, seed, k).ok()?;
            let set = correctors(&env.a, mu, config).ok()?;
            let iters = set.diagnostics.iter().map(|s| s.iterations as f64).sum::<f64>() / d as f64;
            Some((flux_average(&env.a, &set), iters))
        })
        .collect();
    let mut stats = VectorStats::new(d * d + 1);
    let mut excluded = 0;
    let mut iterations = 0.0;
    for r in &results {
        match r {
            Some((m, it)) => {
                let mut row = m.clone();
                row.push((0..d).map(|i| m[i * d + i]).sum::<f64>() / d as f64);
                stats.push(&row);
                iterations += it;
            }
            None => excluded += 1,
        }
    }
    budget_check(excluded, samples, EXCLUSION_FRACTION)?;
    let kept = samples - excluded;
    let means = stats.means();
    let errors = stats.std_errors();
    Ok(AhEstimate {
        matrix: MatrixEstimate {
            dim: d,
            values: means[..d * d].to_vec(),
            errors: errors[..d * d].to_vec(),
        },
        scalar: means[d * d],
        scalar_error: errors[d * d],
        samples: kept,
        excluded,
        mean_iterations: iterations / kept.max(1) as f64,
    })
}

/// `(harmonic mean, arithmetic mean)` of `a(Z)` for a standard normal `Z`.
pub fn voigt_reuss_bounds(map: &CoefficientMap) -> (f64, f64) {
    let rule = gauss_hermite(80);
    let arithmetic = rule.integrate(|t| map.value(t));
    let harmonic = 1.0 / rule.integrate(|t| 1.0 / map.value(t));
    (harmonic, arithmetic)
}

/// `a'(zeta_e) (e_j + grad phi_j)(e) (xi + grad phi_xi)(e)` for each `j`.
fn flux_sensitivities(zeta: &EdgeField, map: &CoefficientMap, set: &CorrectorSet, xi: &[f64]) -> Result<Vec<Vec<f64>>> {
    let d = set.dim();
    let corrected = set.corrected_gradient(xi)?;
    Ok((0..d)
        .map(|j| {
            let grad = &set.gradients[j];
            (0..zeta.len())
                .map(|e| {
                    let unit = if e % d == j { 1.0 } else { 0.0 };
                    map.derivative(zeta[e]) * (unit + grad[e]) * corrected[e]
                })
                .collect()
        })
        .collect())
}

fn check_xi(geometry: &TorusGeometry, xi: &[f64]) -> Result<()> {
    if xi.len() != geometry.dim() {
        return Err(Error::LengthMismatch {
            expected: geometry.dim(),
            found: xi.len(),
        });
    }
    if xi.iter().all(|&v| v == 0.0) || xi.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("direction xi must be finite and non-zero".into()));
    }
    Ok(())
}

/// Per-sample contributions to `Q` for every direction in `xis`, sharing the corrector solves.
fn q_sample(
    geometry: &TorusGeometry,
    map: &CoefficientMap,
    xis: &[Vec<f64>],
    quad: &QuadratureSpec,
    config: &SolveConfig,
    index: u64,
) -> Result<Vec<Vec<f64>>> {
    let d = geometry.dim();
    let n = geometry.site_count() as f64;
    let rule = quad.rule();
    let env = sample_environment(geometry, map, quad.seed, index)?;
    let fresh = fresh_field(geometry, quad.seed, index);
    let base = correctors(&env.a, 0.0, config)?;
    let primary: Vec<Vec<Vec<f64>>> = xis
        .iter()
        .map(|xi| flux_sensitivities(&env.zeta, map, &base, xi))
        .collect::<Result<_>>()?;
    let mut out = vec![vec![0.0; d * d]; xis.len()];
    for (&s, &w) in rule.nodes.iter().zip(&rule.weights) {
        let zeta_s = couple_fields(&env.zeta, &fresh, s)?;
        let set = correctors(&map.apply(&zeta_s), 0.0, config)?;
        for (q, (xi, f)) in out.iter_mut().zip(xis.iter().zip(&primary)) {
            let fs = flux_sensitivities(&zeta_s, map, &set, xi)?;
            for j in 0..d {
                for k in j..d {
                    let cross: f64 = f[j].iter().zip(&fs[k]).map(|(a, b)| a * b).sum::<f64>()
                        + f[k].iter().zip(&fs[j]).map(|(a, b)| a * b).sum::<f64>();
                    let v = w * 0.5 * cross / n;
                    q[j * d + k] += v;
                    if k != j {
                        q[k * d + j] += v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Estimates `Q` for each direction in `xis` from the same environments and couplings.
pub fn estimate_q_many(
    xis: &[Vec<f64>],
    geometry: &TorusGeometry,
    map: &CoefficientMap,
    quad: &QuadratureSpec,
    config: &SolveConfig,
) -> Result<Vec<QEstimate>> {
    quad.validate()?;
    for xi in xis {
        check_xi(geometry, xi)?;
    }
    let d = geometry.dim();
    let results: Vec<Option<Vec<Vec<f64>>>> = (0..quad.samples as u64)
        .into_par_iter()
        .map(|k| q_sample(geometry, map, xis, quad, config, k).ok())
        .collect();
    let mut stats = vec![VectorStats::new(d * d); xis.len()];
    let mut excluded = 0;
    for r in &results {
        match r {
            Some(per_xi) => stats.iter_mut().zip(per_xi).for_each(|(s, v)| s.push(v)),
            None => excluded += 1,
        }
    }
    budget_check(excluded, quad.samples, quad.exclusion_budget)?;
    Ok(xis
        .iter()
        .zip(&stats)
        .map(|(xi, s)| QEstimate {
            xi: xi.clone(),
            matrix: MatrixEstimate::from_stats(d, s),
            samples: quad.samples - excluded,
            excluded,
            nodes: quad.nodes,
        })
        .collect())
}

pub fn estimate_q(
    xi: &[f64],
    geometry: &TorusGeometry,
    map: &CoefficientMap,
    quad: &QuadratureSpec,
    config: &SolveConfig,
) -> Result<QEstimate> {
    Ok(estimate_q_many(&[xi.to_vec()], geometry, map, quad, config)?.remove(0))
}

/// Direct estimate of `xi' . Q^(xi) xi'` from the product of the contracted sensitivities.
pub fn estimate_q_form(
    xi: &[f64],
    xi_prime: &[f64],
    geometry: &TorusGeometry,
    map: &CoefficientMap,
    quad: &QuadratureSpec,
    config: &SolveConfig,
) -> Result<(f64, f64)> {
    check_xi(geometry, xi)?;
    check_xi(geometry, xi_prime)?;
    let rule = quad.rule();
    let n = geometry.site_count() as f64;
    let sensitivity = |zeta: &EdgeField, set: &CorrectorSet| -> Result<Vec<f64>> {
        let a = set.corrected_gradient(xi)?;
        let b = set.corrected_gradient(xi_prime)?;
        Ok((0..zeta.len()).map(|e| map.derivative(zeta[e]) * a[e] * b[e]).collect())
    };
    let values: Vec<Option<f64>> = (0..quad.samples as u64)
        .into_par_iter()
        .map(|k| -> Option<f64> {
            let env = sample_environment(geometry, map, quad.seed, k).ok()?;
            let fresh = fresh_field(geometry, quad.seed, k);
            let f = sensitivity(&env.zeta, &correctors(&env.a, 0.0, config).ok()?).ok()?;
            let mut acc = 0.0;
            for (&s, &w) in rule.nodes.iter().zip(&rule.weights) {
                let zeta_s = couple_fields(&env.zeta, &fresh, s).ok()?;
                let set = correctors(&map.apply(&zeta_s), 0.0, config).ok()?;
                let fs = sensitivity(&zeta_s, &set).ok()?;
                acc += w * f.iter().zip(&fs).map(|(a, b)| a * b).sum::<f64>() / n;
            }
            Some(acc)
        })
        .collect();
    let kept: crate::stats::RunningStats = values.iter().flatten().copied().collect();
    budget_check(quad.samples - kept.count() as usize, quad.samples, quad.exclusion_budget)?;
    Ok((kept.mean(), kept.std_error()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositivityReport {
    pub eigenvalues: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Some eigenvalue lies below `-3 sigma`.
    pub flagged: bool,
}

/// Eigenvalues of the symmetrized estimate with first-order propagated errors.
pub fn q_positivity_report(q: &MatrixEstimate) -> PositivityReport {
    let d = q.dim;
    let m = q.to_matrix();
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut pairs: Vec<(f64, f64)> = (0..d)
        .map(|k| {
            let v = eig.eigenvectors.column(k);
            let var: f64 = (0..d)
                .flat_map(|i| (0..d).map(move |j| (i, j)))
                .map(|(i, j)| (v[i] * v[j] * q.error(i, j)).powi(2))
                .sum();
            (eig.eigenvalues[k], var.sqrt())
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite eigenvalues"));
    let flagged = pairs.iter().any(|&(l, s)| l < -3.0 * s - 1e-14);
    PositivityReport {
        eigenvalues: pairs.iter().map(|p| p.0).collect(),
        sigmas: pairs.iter().map(|p| p.1).collect(),
        flagged,
    }
}
