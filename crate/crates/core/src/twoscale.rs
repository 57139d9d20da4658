//! The two-scale defect `z = G(0, .) - G_h - sum_j phi_j grad_j G_h`, the exact equation it
//! satisfies on the torus, its Green representation, and vertical derivatives of correctors and
//! Green functions.
//!
//! Difference operators: `grad_i u(x) = u(x + e_i) - u(x)` and its adjoint
//! `grad*_i u(x) = u(x - e_i) - u(x)`, so that `div* F(x) = sum_i F_i(x - e_i) - F_i(x)`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::elliptic::{self, CorrectorSet, GreenColumn, SolveConfig};
use crate::environment::{perturb_edge, sample_environment, CoefficientMap, EnvironmentSample};
use crate::error::{Error, Result};
use crate::fit::{decay_fit, FitOptions};
use crate::kernels;
use crate::lattice::{self, EdgeField, ScalarField, TorusGeometry};

#[derive(Clone, Debug)]
pub struct TwoScaleBundle {
    pub a: EdgeField,
    pub homogenized: Vec<f64>,
    /// `G(0, .)` with source `1_0 - L^{-d}`.
    pub green: ScalarField,
    /// Torus `G_h` with the same source.
    pub green_h: ScalarField,
    pub correctors: Vec<ScalarField>,
    pub z: ScalarField,
    /// `R_ij(x)` at `x * d * d + i * d + j`.
    pub r: Vec<f64>,
    pub h: EdgeField,
    /// Torus mean of `z`, removed before every comparison.
    pub z_mean: f64,
}

impl TwoScaleBundle {
    pub fn geometry(&self) -> &TorusGeometry {
        self.a.geometry()
    }

    pub fn r_at(&self, site: usize, i: usize, j: usize) -> f64 {
        let d = self.geometry().dim();
        self.r[site * d * d + i * d + j]
    }

    /// Torus average of `R_ij`.
    pub fn r_average(&self) -> Vec<f64> {
        let d = self.geometry().dim();
        let n = self.geometry().site_count();
        (0..d * d)
            .map(|k| (0..n).map(|x| self.r[x * d * d + k]).sum::<f64>() / n as f64)
            .collect()
    }
}

/// Second differences of `G_h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HessianStencil {
    /// `grad*_i grad_j`, the stencil for which the identity is exact.
    Adjoint,
    /// `grad_i grad_j`, kept as a negative control.
    Forward,
}

fn grad_gh(gh: &ScalarField) -> EdgeField {
    lattice::gradient(gh)
}

pub fn build_bundle(
    a: &EdgeField,
    correctors: &CorrectorSet,
    green0: &GreenColumn,
    green_h: &ScalarField,
    homogenized: &[f64],
) -> Result<TwoScaleBundle> {
    let g = a.geometry();
    let d = g.dim();
    g.check_same(correctors.geometry())?;
    g.check_same(green0.values.geometry())?;
    g.check_same(green_h.geometry())?;
    if homogenized.len() != d {
        return Err(Error::LengthMismatch { expected: d, found: homogenized.len() });
    }
    if green0.source != 0 || green0.mu != 0.0 {
        return Err(Error::InvalidParameter("the bundle needs the massless Green column at the origin".into()));
    }
    let n = g.site_count();
    let dgh = grad_gh(green_h);
    let z = ScalarField::from_fn(g, |x| {
        green0.values[x] - green_h[x] - (0..d).map(|j| correctors.fields[j][x] * dgh[x * d + j]).sum::<f64>()
    });
    let mut r = vec![0.0; n * d * d];
    for x in 0..n {
        for i in 0..d {
            let back = g.back_neighbor(x, i);
            for j in 0..d {
                let delta = if i == j { 1.0 } else { 0.0 };
                r[x * d * d + i * d + j] =
                    homogenized[i] * delta - a[back * d + i] * (delta + correctors.gradients[j][back * d + i]);
            }
        }
    }
    let h = EdgeField::from_fn(g, |e| {
        let (x, i) = (e / d, e % d);
        let y = g.neighbor(x, i);
        -a[e]
            * (0..d)
                .map(|j| correctors.fields[j][y] * (dgh[y * d + j] - dgh[x * d + j]))
                .sum::<f64>()
    });
    let z_mean = z.mean();
    Ok(TwoScaleBundle {
        a: a.clone(),
        homogenized: homogenized.to_vec(),
        green: green0.values.clone(),
        green_h: green_h.clone(),
        correctors: correctors.fields.clone(),
        z,
        r,
        h,
        z_mean,
    })
}

/// `(R : grad^2 G_h)(x)` with the chosen stencil.
pub fn r_contraction(bundle: &TwoScaleBundle, stencil: HessianStencil) -> ScalarField {
    let g = bundle.geometry();
    let d = g.dim();
    let dgh = grad_gh(&bundle.green_h);
    ScalarField::from_fn(g, |x| {
        let mut acc = 0.0;
        for i in 0..d {
            let shifted = match stencil {
                HessianStencil::Adjoint => g.back_neighbor(x, i),
                HessianStencil::Forward => g.neighbor(x, i),
            };
            for j in 0..d {
                acc += bundle.r_at(x, i, j) * (dgh[shifted * d + j] - dgh[x * d + j]);
            }
        }
        acc
    })
}

/// `div*(a grad z) - R : grad^2 G_h - div* h`.
pub fn residual_z(bundle: &TwoScaleBundle) -> Result<ScalarField> {
    residual_with(bundle, HessianStencil::Adjoint)
}

pub fn residual_with(bundle: &TwoScaleBundle, stencil: HessianStencil) -> Result<ScalarField> {
    let lhs = lattice::apply_elliptic(0.0, &bundle.a, &bundle.z)?;
    let rc = r_contraction(bundle, stencil);
    let dh = lattice::divergence(&bundle.h);
    Ok(ScalarField::from_fn(bundle.geometry(), |x| lhs[x] - rc[x] - dh[x]))
}

/// Largest deviation of a field from its torus mean.
pub fn aligned_max(f: &ScalarField) -> f64 {
    let m = f.mean();
    f.values().iter().fold(0.0, |acc, v| acc.max((v - m).abs()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentationReport {
    pub max_deviation: f64,
    /// Same comparison with the `div* h` term dropped.
    pub without_h: f64,
    /// Scale of `z` after alignment.
    pub z_scale: f64,
}

/// Compares `z` with `sum_y G(x, y)(R : grad^2 G_h)(y) + sum_b grad G(x, b) h(b)` after mean alignment,
/// using the dense Green matrix.
pub fn representation_z_check(bundle: &TwoScaleBundle, green: &DMatrix<f64>) -> Result<RepresentationReport> {
    let g = bundle.geometry();
    let n = g.site_count();
    if green.nrows() != n || green.ncols() != n {
        return Err(Error::LengthMismatch { expected: n, found: green.nrows() });
    }
    let rc = r_contraction(bundle, HessianStencil::Adjoint);
    let dh = lattice::divergence(&bundle.h);
    // sum_b grad_y G(x, b) h(b) = sum_y G(x, y) (div* h)(y).
    let apply = |f: &ScalarField| -> ScalarField {
        let v = nalgebra::DVector::from_column_slice(f.values());
        let out = green * v;
        ScalarField::from_fn(g, |x| out[x])
    };
    let full = apply(&ScalarField::from_fn(g, |x| rc[x] + dh[x]));
    let partial = apply(&rc);
    let z = bundle.z.centered();
    let dev = |f: &ScalarField| f.centered().max_abs_diff(&z);
    Ok(RepresentationReport {
        max_deviation: dev(&full),
        without_h: dev(&partial),
        z_scale: z.max_abs(),
    })
}

/// Everything needed for one environment: correctors, the Green column at 0 and torus `G_h`.
pub fn bundle_for_environment(env: &EnvironmentSample, homogenized: &[f64], config: &SolveConfig) -> Result<TwoScaleBundle> {
    let set = elliptic::correctors(&env.a, 0.0, config)?;
    let column = elliptic::green_column(&env.a, 0.0, 0, config)?;
    let gh = kernels::torus_gh(homogenized, env.geometry())?;
    build_bundle(&env.a, &set, &column, &gh, homogenized)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub sample: u64,
    pub max_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Acceptance level for the aligned residual.
pub const RESIDUAL_THRESHOLD: f64 = 1e-8;

/// Residual identity on `samples` environments; `G_h` uses `homogenized`.
pub fn residual_battery(
    geometry: &TorusGeometry,
    map: &CoefficientMap,
    seed: u64,
    samples: u64,
    homogenized: &[f64],
    config: &SolveConfig,
) -> Result<Vec<ResidualRow>> {
    (0..samples)
        .into_par_iter()
        .map(|k| {
            let env = sample_environment(geometry, map, seed, k)?;
            let bundle = bundle_for_environment(&env, homogenized, config)?;
            let res = aligned_max(&residual_z(&bundle)?);
            Ok(ResidualRow {
                sample: k,
                max_residual: res,
                tolerance: config.tolerance,
                pass: res < RESIDUAL_THRESHOLD,
            })
        })
        .collect()
}

pub fn residual_csv(rows: &[ResidualRow]) -> String {
    let mut out = String::from("sample,max_residual,tolerance,pass\n");
    for r in rows {
        out.push_str(&format!("{},{:.17e},{:.17e},{}\n", r.sample, r.max_residual, r.tolerance, r.pass));
    }
    out
}

fn green_gradient_on_edge(column: &GreenColumn, edge: usize) -> f64 {
    let g = column.values.geometry();
    column.values[g.edge_end(edge)] - column.values[edge / g.dim()]
}

/// `d/dzeta_e phi_{xi,mu}(x) = -a'(zeta_e) grad G_mu(x, e) (xi + grad phi_{xi,mu})(e)`.
pub fn vertical_derivative_corrector(
    env: &EnvironmentSample,
    mu: f64,
    xi: &[f64],
    edge: usize,
    x: usize,
    config: &SolveConfig,
) -> Result<f64> {
    let set = elliptic::correctors(&env.a, mu, config)?;
    let column = elliptic::green_column(&env.a, mu, x, config)?;
    let corrected = set.corrected_gradient(xi)?;
    Ok(-env.map.derivative(env.zeta[edge]) * green_gradient_on_edge(&column, edge) * corrected[edge])
}

/// `d/dzeta_e G_mu(x, y) = -a'(zeta_e) grad G_mu(x, e) grad G_mu(y, e)`.
pub fn vertical_derivative_green(
    env: &EnvironmentSample,
    mu: f64,
    edge: usize,
    x: usize,
    y: usize,
    config: &SolveConfig,
) -> Result<f64> {
    let cx = elliptic::green_column(&env.a, mu, x, config)?;
    let gx = green_gradient_on_edge(&cx, edge);
    let gy = if y == x {
        gx
    } else {
        green_gradient_on_edge(&elliptic::green_column(&env.a, mu, y, config)?, edge)
    };
    Ok(-env.map.derivative(env.zeta[edge]) * gx * gy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifferenceStudy {
    pub formula: f64,
    pub steps: Vec<f64>,
    pub estimates: Vec<f64>,
    pub errors: Vec<f64>,
    /// Slope of `log error` against `log step`.
    pub observed_order: f64,
}

/// Central differences of `quantity(zeta_e + h)` for each step, compared with `formula`.
pub fn difference_study(
    env: &EnvironmentSample,
    edge: usize,
    steps: &[f64],
    formula: f64,
    quantity: impl Fn(&EnvironmentSample) -> Result<f64> + Sync,
) -> Result<DifferenceStudy> {
    let estimates: Vec<f64> = steps
        .par_iter()
        .map(|&h| Ok((quantity(&perturb_edge(env, edge, h)?)? - quantity(&perturb_edge(env, edge, -h)?)?) / (2.0 * h)))
        .collect::<Result<_>>()?;
    let errors: Vec<f64> = estimates.iter().map(|v| (v - formula).abs()).collect();
    let observed_order = if steps.len() >= 4 && errors.iter().all(|&e| e > 0.0) {
        decay_fit(steps, &errors, &FitOptions { resamples: 0, ..FitOptions::default() })?.exponent
    } else {
        f64::NAN
    };
    Ok(DifferenceStudy {
        formula,
        steps: steps.to_vec(),
        estimates,
        errors,
        observed_order,
    })
}

/// Steps `2^-3 .. 2^-6`.
pub const DIFFERENCE_STEPS: [f64; 4] = [0.125, 0.0625, 0.03125, 0.015625];

pub fn corrector_difference_study(
    env: &EnvironmentSample,
    mu: f64,
    xi: &[f64],
    edge: usize,
    x: usize,
    config: &SolveConfig,
) -> Result<DifferenceStudy> {
    let formula = vertical_derivative_corrector(env, mu, xi, edge, x, config)?;
    difference_study(env, edge, &DIFFERENCE_STEPS, formula, |e| {
        Ok(elliptic::correctors(&e.a, mu, config)?.combine(xi)?[x])
    })
}

pub fn green_difference_study(
    env: &EnvironmentSample,
    mu: f64,
    edge: usize,
    x: usize,
    y: usize,
    config: &SolveConfig,
) -> Result<DifferenceStudy> {
    let formula = vertical_derivative_green(env, mu, edge, x, y, config)?;
    difference_study(env, edge, &DIFFERENCE_STEPS, formula, |e| {
        Ok(elliptic::green_column(&e.a, mu, x, config)?.at(y))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::homogenize::flux_average;

    fn env(side: usize, seed: u64) -> EnvironmentSample {
        let g = TorusGeometry::new(3, side).unwrap();
        sample_environment(&g, &CoefficientMap::tanh(0.5, 1.5, 1.0).unwrap(), seed, 0).unwrap()
    }

    fn tight() -> SolveConfig {
        SolveConfig::with_tolerance(1e-12)
    }

    #[test]
    fn constant_environment_is_trivial() {
        let g = TorusGeometry::new(3, 6).unwrap();
        let map = CoefficientMap::Constant { value: 1.3 };
        let e = sample_environment(&g, &map, 1, 0).unwrap();
        let b = bundle_for_environment(&e, &[1.3; 3], &tight()).unwrap();
        assert!(b.z.max_abs() < 1e-10);
        assert!(b.r.iter().all(|v| v.abs() < 1e-12));
        assert!(b.h.max_abs() < 1e-12);
        assert!(aligned_max(&residual_z(&b).unwrap()) < 1e-10);
        let rep = representation_z_check(&b, &elliptic::dense_green_matrix(&e.a, 0.0).unwrap()).unwrap();
        assert!(rep.max_deviation < 1e-10);
    }

    #[test]
    fn r_reads_the_back_edge() {
        let e = env(4, 3);
        let b = bundle_for_environment(&e, &[1.0; 3], &tight()).unwrap();
        let g = e.geometry();
        let set = elliptic::correctors(&e.a, 0.0, &tight()).unwrap();
        let x = g.site(&[1, 2, 3]);
        let back = g.site(&[1, 1, 3]);
        let expected = -e.a[g.edge(back, 1)] * set.gradients[2][g.edge(back, 1)];
        assert!((b.r_at(x, 1, 2) - expected).abs() < 1e-14);
    }

    #[test]
    fn r_average_matches_flux_average() {
        let e = env(8, 5);
        let ah = [0.95, 0.95, 0.95];
        let b = bundle_for_environment(&e, &ah, &tight()).unwrap();
        let set = elliptic::correctors(&e.a, 0.0, &tight()).unwrap();
        let flux = flux_average(&e.a, &set);
        let avg = b.r_average();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { ah[i] } else { 0.0 } - flux[i * 3 + j];
                assert!((avg[i * 3 + j] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn residual_identity_is_exact() {
        let e = env(8, 7);
        let b = bundle_for_environment(&e, &[0.97; 3], &tight()).unwrap();
        let res = aligned_max(&residual_z(&b).unwrap());
        assert!(res < 1e-8, "{res}");
        let forward = aligned_max(&residual_with(&b, HessianStencil::Forward).unwrap());
        assert!(forward > 1e3 * res.max(1e-12), "{forward}");
        let loose = bundle_for_environment(&e, &[0.97; 3], &SolveConfig::with_tolerance(1e-6)).unwrap();
        assert!(aligned_max(&residual_z(&loose).unwrap()) > res);
    }

    #[test]
    fn representation_with_dense_green() {
        let e = env(6, 11);
        let b = bundle_for_environment(&e, &[0.97; 3], &tight()).unwrap();
        let rep = representation_z_check(&b, &elliptic::dense_green_matrix(&e.a, 0.0).unwrap()).unwrap();
        assert!(rep.max_deviation < 1e-8, "{rep:?}");
        assert!(rep.without_h > 10.0 * 1e-8, "{rep:?}");
    }

    #[test]
    fn rejects_mismatched_geometry() {
        let e = env(4, 1);
        let other = TorusGeometry::new(3, 5).unwrap();
        let set = elliptic::correctors(&e.a, 0.0, &tight()).unwrap();
        let column = elliptic::green_column(&e.a, 0.0, 0, &tight()).unwrap();
        let gh = kernels::torus_gh(&[1.0; 3], &other).unwrap();
        assert!(matches!(build_bundle(&e.a, &set, &column, &gh, &[1.0; 3]), Err(Error::GeometryMismatch { .. })));
    }

    #[test]
    fn vertical_derivatives_match_differences() {
        let e = env(8, 13);
        let g = e.geometry().clone();
        let edge = g.edge(g.site(&[1, 0, 0]), 0);
        let x = g.site(&[2, 1, 0]);
        let s = corrector_difference_study(&e, 0.1, &[1.0, 0.0, 0.0], edge, x, &tight()).unwrap();
        assert!((s.observed_order - 2.0).abs() < 0.2, "{s:?}");
        for w in s.errors.windows(2) {
            assert!((w[0] / w[1] - 4.0).abs() < 0.8, "{s:?}");
        }
        let y = g.site(&[0, 2, 1]);
        let t = green_difference_study(&e, 0.1, edge, x, y, &tight()).unwrap();
        assert!((t.observed_order - 2.0).abs() < 0.2, "{t:?}");
    }

    #[test]
    fn vertical_derivative_signs_and_symmetry() {
        let e = env(6, 17);
        let g = e.geometry().clone();
        let edge = g.edge(g.site(&[0, 0, 0]), 1);
        let x = g.site(&[1, 0, 0]);
        let y = g.site(&[0, 3, 2]);
        let cfg = tight();
        let diag = vertical_derivative_green(&e, 0.1, edge, x, x, &cfg).unwrap();
        assert!(diag <= 0.0);
        let a = vertical_derivative_green(&e, 0.1, edge, x, y, &cfg).unwrap();
        let b = vertical_derivative_green(&e, 0.1, edge, y, x, &cfg).unwrap();
        assert!((a - b).abs() < 1e-10 * a.abs().max(1e-12));
        // a' > 0: the sign is opposite to grad G_mu(x, e) (xi + grad phi)(e).
        let xi = [0.0, 1.0, 0.0];
        let set = elliptic::correctors(&e.a, 0.1, &cfg).unwrap();
        let col = elliptic::green_column(&e.a, 0.1, x, &cfg).unwrap();
        let product = green_gradient_on_edge(&col, edge) * set.corrected_gradient(&xi).unwrap()[edge];
        let v = vertical_derivative_corrector(&e, 0.1, &xi, edge, x, &cfg).unwrap();
        assert_eq!(v.signum(), -product.signum());
        let c = sample_environment(&g, &CoefficientMap::Constant { value: 1.0 }, 1, 0).unwrap();
        assert_eq!(vertical_derivative_corrector(&c, 0.1, &xi, edge, x, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn massless_limit_is_cauchy() {
        let e = env(6, 19);
        let g = e.geometry().clone();
        let edge = g.edge(g.site(&[0, 0, 0]), 0);
        let x = g.site(&[1, 1, 0]);
        let y = g.site(&[2, 0, 1]);
        let cfg = tight();
        let values: Vec<f64> = [1e-1, 1e-2, 1e-3, 0.0]
            .iter()
            .map(|&mu| vertical_derivative_green(&e, mu, edge, x, y, &cfg).unwrap())
            .collect();
        let d1 = (values[0] - values[1]).abs();
        let d2 = (values[1] - values[2]).abs();
        assert!(d2 < d1, "{values:?}");
        // Massive Green functions carry the zero mode 1/(mu n); gradients do not, so the limit is finite.
        assert!((values[2] - values[3]).abs() < 0.2 * d1.max(1e-12), "{values:?}");
    }
}
