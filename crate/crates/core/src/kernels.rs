//! Deterministic kernels of the homogenized problem: lattice and continuum Green
//! functions, the correlation kernel `K` with multiplier `(p.Qp) / (p.Ap)^2`, its
//! torus periodization, and the Gaussian-free-field defect.
//!
//! Homogenized matrices are diagonal and passed as their diagonal entries.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{self, EdgeField, ScalarField, TorusGeometry};
use crate::quadrature::{gauss_legendre, Rule};
use crate::rng::{GaussianStream, Purpose};
use crate::spectral::fft_nd;

/// `s(p) = 2 sum_j A_j (1 - cos p_j)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Symbol {
    pub diagonal: Vec<f64>,
}

impl Symbol {
    pub fn new(diagonal: &[f64]) -> Result<Self> {
        check_diagonal(diagonal)?;
        Ok(Self {
            diagonal: diagonal.to_vec(),
        })
    }

    pub fn eval(&self, p: &[f64]) -> f64 {
        self.diagonal
            .iter()
            .zip(p)
            .map(|(a, &q)| 4.0 * a * (0.5 * q).sin().powi(2))
            .sum()
    }
}

fn check_diagonal(diagonal: &[f64]) -> Result<()> {
    if diagonal.len() < 2 {
        return Err(Error::UnsupportedDimension(diagonal.len()));
    }
    if diagonal.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::InvalidParameter(format!("homogenized diagonal {diagonal:?} must be positive")));
    }
    Ok(())
}

fn check_three(diagonal: &[f64]) -> Result<()> {
    check_diagonal(diagonal)?;
    if diagonal.len() != 3 {
        return Err(Error::UnsupportedDimension(diagonal.len()));
    }
    Ok(())
}

/// Accuracy requested from the lattice Green function quadrature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeQuadrature {
    /// Gauss–Legendre nodes per angular half-quadrant.
    pub angular: usize,
    /// Gauss–Legendre nodes per radial panel.
    pub radial: usize,
    /// Number of dyadic radial panels.
    pub panels: usize,
    pub tolerance: f64,
}

impl Default for LatticeQuadrature {
    fn default() -> Self {
        Self {
            angular: 48,
            radial: 20,
            panels: 14,
            tolerance: 1e-11,
        }
    }
}

impl LatticeQuadrature {
    fn refined(&self) -> Self {
        Self {
            angular: 2 * self.angular,
            radial: 2 * self.radial,
            panels: self.panels + 4,
            tolerance: self.tolerance,
        }
    }
}

/// `G_h(x) = (2 pi)^{-3} int cos(p.x) / s(p) dp` on `Z^3`.
///
/// The integral along the axis with the largest `|x_m|` is done in closed form,
/// `(2 pi)^{-1} int cos(n t) / (b - 2a cos t) dt = r^n / sqrt(b^2 - 4a^2)`, and the
/// remaining two-dimensional integral in polar coordinates, where it is smooth.
pub fn discrete_gh(diagonal: &[f64], x: &[i64]) -> Result<f64> {
    discrete_gh_with(diagonal, x, &LatticeQuadrature::default())
}

pub fn discrete_gh_with(diagonal: &[f64], x: &[i64], quad: &LatticeQuadrature) -> Result<f64> {
    check_three(diagonal)?;
    if x.len() != 3 {
        return Err(Error::LengthMismatch { expected: 3, found: x.len() });
    }
    let coarse = reduced_integral(diagonal, x, quad);
    let fine = reduced_integral(diagonal, x, &quad.refined());
    if (coarse - fine).abs() > quad.tolerance * fine.abs().max(1e-3) {
        return Err(Error::QuadratureNotConverged { coarse, fine });
    }
    Ok(fine)
}

/// `grad_j G_h(x) = G_h(x + e_j) - G_h(x)`.
pub fn discrete_grad_gh(diagonal: &[f64], x: &[i64], j: usize) -> Result<f64> {
    let mut y = x.to_vec();
    y[j] += 1;
    Ok(discrete_gh(diagonal, &y)? - discrete_gh(diagonal, x)?)
}

fn reduced_integral(diagonal: &[f64], x: &[i64], quad: &LatticeQuadrature) -> f64 {
    let m = (0..3).max_by_key(|&j| (x[j].abs(), 3 - j)).expect("three axes");
    let others: Vec<usize> = (0..3).filter(|&j| j != m).collect();
    let a = diagonal[m];
    let n = x[m].unsigned_abs() as f64;
    let (n1, n2) = (x[others[0]].unsigned_abs() as f64, x[others[1]].unsigned_abs() as f64);
    let (c1, c2) = (diagonal[others[0]], diagonal[others[1]]);
    let integrand = |q1: f64, q2: f64| -> f64 {
        let t = 4.0 * c1 * (0.5 * q1).sin().powi(2) + 4.0 * c2 * (0.5 * q2).sin().powi(2);
        let root = (t * (4.0 * a + t)).sqrt();
        let decay = if n == 0.0 {
            1.0
        } else {
            (n * ((t - root) / (2.0 * a)).ln_1p()).exp()
        };
        (n1 * q1).cos() * (n2 * q2).cos() * decay / root
    };
    let angular = gauss_legendre(quad.angular);
    let radial = gauss_legendre(quad.radial);
    let mut total = 0.0;
    for (lo, hi, along_first) in [(0.0, PI / 4.0, true), (PI / 4.0, PI / 2.0, false)] {
        for (&theta, &wt) in angular.mapped(lo, hi).nodes.iter().zip(&angular.mapped(lo, hi).weights) {
            let (c, s) = (theta.cos(), theta.sin());
            let rmax = if along_first { PI / c } else { PI / s };
            let mut inner = 0.0;
            let mut upper = rmax;
            for k in 0..=quad.panels {
                let lower = if k == quad.panels { 0.0 } else { 0.5 * upper };
                let panel = radial.mapped(lower, upper);
                for (&rho, &wr) in panel.nodes.iter().zip(&panel.weights) {
                    inner += wr * rho * integrand(rho * c, rho * s);
                }
                upper = lower;
            }
            total += wt * inner;
        }
    }
    // Four quadrants of [-pi, pi]^2 and the (2 pi)^{-2} prefactor.
    total / (PI * PI)
}

/// Homogenized Green function on the torus: `div(A_h grad G) = 1_0 - L^{-d}` with zero mean.
pub fn torus_gh(diagonal: &[f64], geometry: &TorusGeometry) -> Result<ScalarField> {
    check_diagonal(diagonal)?;
    if diagonal.len() != geometry.dim() {
        return Err(Error::LengthMismatch {
            expected: geometry.dim(),
            found: diagonal.len(),
        });
    }
    let symbol = Symbol::new(diagonal)?;
    let (d, side) = (geometry.dim(), geometry.side());
    let n = geometry.site_count();
    let mut spec: Vec<Complex64> = (0..n)
        .map(|k| {
            if k == 0 {
                return Complex64::new(0.0, 0.0);
            }
            let p: Vec<f64> = geometry
                .coords(k)
                .iter()
                .map(|&c| 2.0 * PI * c as f64 / side as f64)
                .collect();
            Complex64::new(1.0 / symbol.eval(&p), 0.0)
        })
        .collect();
    fft_nd(&mut spec, d, side, true);
    let values: Vec<f64> = spec.iter().map(|z| z.re / n as f64).collect();
    ScalarField::new(geometry, values)
}

/// `grad G_h` of [`torus_gh`] on every edge.
pub fn torus_grad_gh(diagonal: &[f64], geometry: &TorusGeometry) -> Result<EdgeField> {
    Ok(lattice::gradient(&torus_gh(diagonal, geometry)?))
}

/// Surface area of the unit sphere in `R^d`.
pub fn sphere_area(d: usize) -> f64 {
    // Gamma(d / 2) by the half-integer recursion.
    let mut gamma = if d % 2 == 0 { 1.0 } else { PI.sqrt() };
    let mut k = if d % 2 == 0 { 1.0 } else { 0.5 };
    while k < d as f64 / 2.0 - 1e-12 {
        gamma *= k;
        k += 1.0;
    }
    2.0 * PI.powf(d as f64 / 2.0) / gamma
}

fn quadratic_inverse(diagonal: &[f64], x: &[f64]) -> f64 {
    diagonal.iter().zip(x).map(|(a, v)| v * v / a).sum()
}

fn continuum_prefactor(diagonal: &[f64]) -> f64 {
    let d = diagonal.len() as f64;
    let det: f64 = diagonal.iter().product();
    1.0 / ((d - 2.0) * sphere_area(diagonal.len()) * det.sqrt())
}

/// `1 / ((d - 2) |S^{d-1}| sqrt(det A) (x.A^{-1}x)^{(d-2)/2})`.
pub fn continuum_gh(diagonal: &[f64], x: &[f64]) -> Result<f64> {
    check_point(diagonal, x)?;
    let d = diagonal.len() as f64;
    Ok(continuum_prefactor(diagonal) * quadratic_inverse(diagonal, x).powf(-(d - 2.0) / 2.0))
}

pub fn continuum_grad_gh(diagonal: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    check_point(diagonal, x)?;
    let d = diagonal.len() as f64;
    let c = continuum_prefactor(diagonal) * (d - 2.0) * quadratic_inverse(diagonal, x).powf(-d / 2.0);
    Ok(diagonal.iter().zip(x).map(|(a, v)| -c * v / a).collect())
}

fn check_point(diagonal: &[f64], x: &[f64]) -> Result<()> {
    check_diagonal(diagonal)?;
    if diagonal.len() < 3 {
        return Err(Error::UnsupportedDimension(diagonal.len()));
    }
    if x.len() != diagonal.len() {
        return Err(Error::LengthMismatch {
            expected: diagonal.len(),
            found: x.len(),
        });
    }
    if x.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidParameter("continuum kernels are singular at the origin".into()));
    }
    Ok(())
}

/// Fourier multiplier of `K`: `(p.Qp) / (p.Ap)^2`.
pub fn kernel_multiplier(q: &DMatrix<f64>, diagonal: &[f64], p: &[f64]) -> f64 {
    let d = diagonal.len();
    let mut pqp = 0.0;
    for j in 0..d {
        for k in 0..d {
            pqp += p[j] * q[(j, k)] * p[k];
        }
    }
    let pap: f64 = diagonal.iter().zip(p).map(|(a, v)| a * v * v).sum();
    pqp / (pap * pap)
}

fn check_kernel_inputs(q: &DMatrix<f64>, diagonal: &[f64]) -> Result<()> {
    check_diagonal(diagonal)?;
    let d = diagonal.len();
    if q.nrows() != d || q.ncols() != d {
        return Err(Error::LengthMismatch { expected: d, found: q.nrows() });
    }
    if (q - q.transpose()).amax() > 1e-12 * q.amax().max(1.0) {
        return Err(Error::InvalidParameter("Q must be symmetric".into()));
    }
    Ok(())
}

/// Closed form of `K(x)` for diagonal `A`: after `x' = A^{-1/2} x`, `Q' = A^{-1/2} Q A^{-1/2}`,
/// `K(x) = det(A)^{-1/2} sum_jk Q'_jk c/2 (delta_jk |x'|^{2-d} + (2 - d) x'_j x'_k |x'|^{-d})`
/// with `c = 1 / ((d - 2) |S^{d-1}|)`.
pub fn kernel_k_closed_form(q: &DMatrix<f64>, diagonal: &[f64], x: &[f64]) -> Result<f64> {
    check_kernel_inputs(q, diagonal)?;
    check_point(diagonal, x)?;
    let d = diagonal.len();
    let df = d as f64;
    let scale: Vec<f64> = diagonal.iter().map(|a| a.sqrt()).collect();
    let xp: Vec<f64> = x.iter().zip(&scale).map(|(v, s)| v / s).collect();
    let r2: f64 = xp.iter().map(|v| v * v).sum();
    let r = r2.sqrt();
    let c = 1.0 / ((df - 2.0) * sphere_area(d));
    let mut total = 0.0;
    for j in 0..d {
        for k in 0..d {
            let qp = q[(j, k)] / (scale[j] * scale[k]);
            let delta = if j == k { 1.0 } else { 0.0 };
            total += qp * 0.5 * c * (delta * r.powf(2.0 - df) + (2.0 - df) * xp[j] * xp[k] * r.powf(-df));
        }
    }
    let det: f64 = diagonal.iter().product();
    Ok(total / det.sqrt())
}

/// Regularized synthesis `(2 pi)^{-3} int e^{-ip.x} m(p) e^{-eps |p|^2} dp` in three dimensions.
///
/// The radial integral is done exactly, leaving
/// `(2 pi)^{-3} int_{S^2} m(w) sqrt(pi / eps) / 2 exp(-(w.x)^2 / (4 eps)) dw`,
/// integrated in coordinates whose pole is along `x`.
pub fn kernel_k_regularized(q: &DMatrix<f64>, diagonal: &[f64], x: &[f64], eps: f64) -> Result<f64> {
    check_kernel_inputs(q, diagonal)?;
    check_three(diagonal)?;
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("regularization {eps} must be positive")));
    }
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let azimuth = 160;
    let frame = orthonormal_frame(x);
    let weight = |u: f64| -> f64 {
        let z = r * u;
        0.5 * (PI / eps).sqrt() * (-(z * z) / (4.0 * eps)).exp()
    };
    let ring = |u: f64| -> f64 {
        let c = (1.0 - u * u).max(0.0).sqrt();
        let mut acc = 0.0;
        for k in 0..azimuth {
            let psi = 2.0 * PI * (k as f64 + 0.5) / azimuth as f64;
            let (cp, sp) = (psi.cos(), psi.sin());
            let w: Vec<f64> = (0..3).map(|i| u * frame[0][i] + c * (cp * frame[1][i] + sp * frame[2][i])).collect();
            acc += kernel_multiplier(q, diagonal, &w);
        }
        acc * 2.0 * PI / azimuth as f64
    };
    let rule = |lo: f64, hi: f64, n: usize| -> Rule { gauss_legendre(n).mapped(lo, hi) };
    let mut panels = Vec::new();
    if r == 0.0 {
        panels.push(rule(-1.0, 1.0, 64));
    } else {
        let width = (12.0 * (2.0 * eps).sqrt() / r).min(1.0);
        panels.push(rule(-width, width, 96));
        if width < 1.0 {
            panels.push(rule(width, 1.0, 48));
            panels.push(rule(-1.0, -width, 48));
        }
    }
    let integral: f64 = panels
        .iter()
        .map(|p| p.integrate(|u| ring(u) * weight(u)))
        .sum();
    Ok(integral / (2.0 * PI).powi(3))
}

/// Unit vector along `x` (or `e_1` at the origin) and two completing directions.
fn orthonormal_frame(x: &[f64]) -> [[f64; 3]; 3] {
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let e0 = if r == 0.0 {
        [1.0, 0.0, 0.0]
    } else {
        [x[0] / r, x[1] / r, x[2] / r]
    };
    let helper = if e0[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let dot = helper[0] * e0[0] + helper[1] * e0[1] + helper[2] * e0[2];
    let mut e1 = [helper[0] - dot * e0[0], helper[1] - dot * e0[1], helper[2] - dot * e0[2]];
    let n1 = (e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]).sqrt();
    e1.iter_mut().for_each(|v| *v /= n1);
    let e2 = [
        e0[1] * e1[2] - e0[2] * e1[1],
        e0[2] * e1[0] - e0[0] * e1[2],
        e0[0] * e1[1] - e0[1] * e1[0],
    ];
    [e0, e1, e2]
}

/// Regularizations used by the synthesis route.
pub const SYNTHESIS_EPSILONS: [f64; 3] = [1e-2, 1e-3, 1e-4];

/// Quadratic extrapolation to zero of values sampled at `eps`.
pub fn extrapolate_to_zero(eps: &[f64], values: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..eps.len() {
        let mut w = 1.0;
        for j in 0..eps.len() {
            if i != j {
                w *= eps[j] / (eps[j] - eps[i]);
            }
        }
        total += w * values[i];
    }
    total
}

/// Fourier synthesis of `K(x)` with the regularization extrapolated away.
pub fn kernel_k_fourier(q: &DMatrix<f64>, diagonal: &[f64], x: &[f64]) -> Result<f64> {
    check_point(diagonal, x)?;
    let values: Vec<f64> = SYNTHESIS_EPSILONS
        .iter()
        .map(|&e| kernel_k_regularized(q, diagonal, x, e))
        .collect::<Result<_>>()?;
    Ok(extrapolate_to_zero(&SYNTHESIS_EPSILONS, &values))
}

/// Relative agreement required between the two evaluation routes of `K`.
pub const METHOD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelValue {
    pub closed_form: f64,
    /// Synthesis value when the dimension supports it.
    pub fourier: Option<f64>,
}

impl KernelValue {
    pub fn value(&self) -> f64 {
        self.closed_form
    }

    pub fn relative_gap(&self) -> f64 {
        self.fourier
            .map_or(0.0, |f| (f - self.closed_form).abs() / self.closed_form.abs().max(f64::MIN_POSITIVE))
    }
}

/// `K(x)` by the closed form, cross-checked against Fourier synthesis in three dimensions.
pub fn kernel_k(q: &DMatrix<f64>, diagonal: &[f64], x: &[f64]) -> Result<KernelValue> {
    let closed_form = kernel_k_closed_form(q, diagonal, x)?;
    let fourier = if diagonal.len() == 3 {
        Some(kernel_k_fourier(q, diagonal, x)?)
    } else {
        None
    };
    let value = KernelValue { closed_form, fourier };
    let scale = q.amax() * x.iter().map(|v| v * v).sum::<f64>().sqrt().powi(2 - diagonal.len() as i32);
    if let Some(f) = fourier {
        if (f - closed_form).abs() > METHOD_TOLERANCE * closed_form.abs().max(1e-6 * scale) {
            return Err(Error::MethodDisagreement {
                first: closed_form,
                second: f,
            });
        }
    }
    Ok(value)
}

/// Torus version of `K` at selected sites, zero mode removed: the continuum kernel plus a
/// periodization correction that is smooth on the scale of the torus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodizedKernel {
    pub sites: Vec<usize>,
    /// `K(x)` on `Z^3` at the centered coordinates of each site; zero at the origin.
    pub infinite: Vec<f64>,
    /// `K_T - K`.
    pub correction: Vec<f64>,
}

impl PeriodizedKernel {
    pub fn total(&self, k: usize) -> f64 {
        self.infinite[k] + self.correction[k]
    }
}

/// Regularizations for the periodization correction, as fractions of `L^2`.
pub const PERIODIZATION_FRACTIONS: [f64; 2] = [1.0 / 256.0, 1.0 / 512.0];

/// `L^{-d} sum_{k != 0} m(2 pi k / L) e^{-eps |p|^2} cos(p.x)` at every torus site.
pub fn torus_kernel_regularized(q: &DMatrix<f64>, diagonal: &[f64], geometry: &TorusGeometry, eps: f64) -> Result<ScalarField> {
    check_kernel_inputs(q, diagonal)?;
    let (d, side) = (geometry.dim(), geometry.side());
    if diagonal.len() != d {
        return Err(Error::LengthMismatch { expected: d, found: diagonal.len() });
    }
    let base = 2.0 * PI / side as f64;
    // e^{-eps |p|^2} below 1e-17 beyond |p| = sqrt(40 / eps).
    let kmax = ((40.0 / eps).sqrt() / base).ceil() as i64;
    let width = (2 * kmax + 1) as usize;
    let mut folded = vec![0.0; geometry.site_count()];
    let total = width.pow(d as u32);
    let mut k = vec![0i64; d];
    for flat in 0..total {
        let mut rest = flat;
        for slot in k.iter_mut().rev() {
            *slot = (rest % width) as i64 - kmax;
            rest /= width;
        }
        if k.iter().all(|&v| v == 0) {
            continue;
        }
        let p: Vec<f64> = k.iter().map(|&v| v as f64 * base).collect();
        let p2: f64 = p.iter().map(|v| v * v).sum();
        let damp = (-eps * p2).exp();
        if damp < 1e-17 {
            continue;
        }
        let idx = geometry.site(&k);
        folded[idx] += kernel_multiplier(q, diagonal, &p) * damp;
    }
    let mut spec: Vec<Complex64> = folded.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_nd(&mut spec, d, side, true);
    let n = geometry.site_count() as f64;
    ScalarField::new(geometry, spec.iter().map(|z| z.re / n).collect())
}

pub fn periodized_kernel(
    q: &DMatrix<f64>,
    diagonal: &[f64],
    geometry: &TorusGeometry,
    sites: &[usize],
) -> Result<PeriodizedKernel> {
    check_three(diagonal)?;
    if geometry.dim() != 3 {
        return Err(Error::UnsupportedDimension(geometry.dim()));
    }
    if let Some(&s) = sites.iter().find(|&&s| s >= geometry.site_count()) {
        return Err(Error::InvalidParameter(format!("site {s} out of range")));
    }
    let points: Vec<Vec<f64>> = sites
        .iter()
        .map(|&s| geometry.centered_coords(s).iter().map(|&c| c as f64).collect())
        .collect();
    let side2 = (geometry.side() * geometry.side()) as f64;
    let epsilons: Vec<f64> = PERIODIZATION_FRACTIONS.iter().map(|f| f * side2).collect();
    let corrections: Vec<Vec<f64>> = epsilons
        .iter()
        .map(|&eps| -> Result<Vec<f64>> {
            let torus = torus_kernel_regularized(q, diagonal, geometry, eps)?;
            let free: Vec<f64> = points
                .par_iter()
                .map(|x| kernel_k_regularized(q, diagonal, x, eps))
                .collect::<Result<_>>()?;
            Ok(sites.iter().zip(&free).map(|(&s, f)| torus[s] - f).collect())
        })
        .collect::<Result<_>>()?;
    let correction = (0..sites.len())
        .map(|k| {
            let v: Vec<f64> = corrections.iter().map(|c| c[k]).collect();
            extrapolate_to_zero(&epsilons, &v)
        })
        .collect();
    let infinite = points
        .iter()
        .map(|x| {
            if x.iter().all(|&v| v == 0.0) {
                Ok(0.0)
            } else {
                kernel_k_closed_form(q, diagonal, x)
            }
        })
        .collect::<Result<_>>()?;
    Ok(PeriodizedKernel {
        sites: sites.to_vec(),
        infinite,
        correction,
    })
}

/// Evaluation points with values and provenance, written as CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelGrid {
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub method: String,
    pub regularization: Option<f64>,
    pub errors: Vec<f64>,
}

impl KernelGrid {
    pub fn to_csv(&self) -> String {
        let d = self.points.first().map_or(0, |p| p.len());
        let mut out = String::new();
        for j in 0..d {
            out.push_str(&format!("x{j},"));
        }
        out.push_str("value,method,regularization,error\n");
        let reg = self.regularization.map_or("0".to_string(), |e| format!("{e:.17e}"));
        for ((p, v), e) in self.points.iter().zip(&self.values).zip(&self.errors) {
            for c in p {
                out.push_str(&format!("{c:.17e},"));
            }
            out.push_str(&format!("{v:.17e},{},{reg},{e:.17e}\n", self.method));
        }
        out
    }
}

/// `K` on the given points by both routes; the error column is the gap between them.
pub fn kernel_grid(q: &DMatrix<f64>, diagonal: &[f64], points: &[Vec<f64>]) -> Result<KernelGrid> {
    let values: Vec<KernelValue> = points
        .par_iter()
        .map(|x| kernel_k(q, diagonal, x))
        .collect::<Result<_>>()?;
    Ok(KernelGrid {
        points: points.to_vec(),
        values: values.iter().map(|v| v.closed_form).collect(),
        method: if diagonal.len() == 3 { "closed-form+fourier-synthesis" } else { "closed-form" }.into(),
        regularization: None,
        errors: values.iter().map(|v| v.fourier.map_or(0.0, |f| (f - v.closed_form).abs())).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientComparisonRow {
    pub radius: f64,
    pub discrete: f64,
    pub continuum: f64,
    pub difference: f64,
    /// `|difference| |x|^d`.
    pub scaled: f64,
}

/// `|grad_k G_h(x) - d_k G_h(x)|` along `x = n * direction` for `n` in `radii`.
pub fn discrete_vs_continuum_table(diagonal: &[f64], direction: &[i64], k: usize, radii: &[i64]) -> Result<Vec<GradientComparisonRow>> {
    check_three(diagonal)?;
    let dnorm = direction.iter().map(|&v| (v * v) as f64).sum::<f64>().sqrt();
    radii
        .par_iter()
        .map(|&n| {
            let x: Vec<i64> = direction.iter().map(|&v| v * n).collect();
            let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            let discrete = discrete_grad_gh(diagonal, &x, k)?;
            let continuum = continuum_grad_gh(diagonal, &xf)?[k];
            let difference = discrete - continuum;
            let radius = n as f64 * dnorm;
            Ok(GradientComparisonRow {
                radius,
                discrete,
                continuum,
                difference,
                scaled: difference.abs() * radius.powi(3),
            })
        })
        .collect()
}

/// Points on the unit sphere: a Fibonacci lattice in three dimensions, normalized Gaussians otherwise.
pub fn sphere_grid(d: usize, count: usize) -> Vec<Vec<f64>> {
    if d == 3 {
        let golden = PI * (3.0 - 5f64.sqrt());
        return (0..count)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = golden * i as f64;
                vec![r * phi.cos(), r * phi.sin(), z]
            })
            .collect();
    }
    let raw = GaussianStream::normals(0, d as u64, Purpose::Bootstrap, d * count);
    raw.chunks(d)
        .map(|c| {
            let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            c.iter().map(|v| v / n).collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GffDefect {
    pub defect: f64,
    /// Best `B`, row-major.
    pub b: Vec<f64>,
    pub evaluations: usize,
}

/// `min_B max_p |(p.Qp)(p.Bp) / (p.Ap)^2 - 1|` over symmetric positive definite `B`.
pub fn gff_defect(q: &DMatrix<f64>, diagonal: &[f64]) -> Result<GffDefect> {
    check_kernel_inputs(q, diagonal)?;
    let d = diagonal.len();
    if q.amax() == 0.0 {
        return Err(Error::InvalidParameter("Q must be non-zero".into()));
    }
    let grid = sphere_grid(d, if d == 3 { 2000 } else { 4000 });
    // ratio(p) = c(p) . b, affine in the upper-triangular entries b of B.
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).collect();
    let rows: Vec<Vec<f64>> = grid
        .iter()
        .map(|p| {
            let m = kernel_multiplier(q, diagonal, p);
            pairs
                .iter()
                .map(|&(i, j)| m * p[i] * p[j] * if i == j { 1.0 } else { 2.0 })
                .collect()
        })
        .collect();
    let objective = |b: &[f64]| -> f64 {
        rows.iter()
            .map(|c| (c.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    };
    // Least-squares start.
    let a = DMatrix::from_fn(rows.len(), pairs.len(), |r, c| rows[r][c]);
    let ones = nalgebra::DVector::from_element(rows.len(), 1.0);
    let start = a
        .clone()
        .svd(true, true)
        .solve(&ones, 1e-14)
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut best: Vec<f64> = start.iter().copied().collect();
    let mut best_value = objective(&best);
    let mut evaluations = 0;
    let mut step = 0.1 * best.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-3);
    for _restart in 0..40 {
        let (point, value, evals) = nelder_mead(&objective, &best, step, 4000);
        evaluations += evals;
        let improved = best_value - value;
        if value <= best_value {
            best = point;
            best_value = value;
        }
        if improved.abs() < 1e-12 && step < 1e-6 {
            break;
        }
        step *= 0.3;
    }
    let mut b = vec![0.0; d * d];
    for (&(i, j), v) in pairs.iter().zip(&best) {
        b[i * d + j] = *v;
        b[j * d + i] = *v;
    }
    let bm = DMatrix::from_row_slice(d, d, &b);
    if best_value < 1.0 && bm.symmetric_eigenvalues().min() <= 0.0 {
        return Err(Error::OptimizerNotConverged {
            best: best_value,
            best_point: b,
        });
    }
    Ok(GffDefect {
        defect: best_value,
        b,
        evaluations,
    })
}

/// Nelder–Mead simplex search; returns the best point, its value and the evaluation count.
fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, start: &[f64], step: f64, max_evals: usize) -> (Vec<f64>, f64, usize) {
    let n = start.len();
    let mut simplex: Vec<Vec<f64>> = vec![start.to_vec()];
    for i in 0..n {
        let mut p = start.to_vec();
        p[i] += step;
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| f(p)).collect();
    let mut evals = n + 1;
    while evals < max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        if (values[n] - values[0]).abs() <= 1e-15 * (1.0 + values[0].abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|k| simplex[..n].iter().map(|p| p[k]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|k| centroid[k] + t * (simplex[n][k] - centroid[k])).collect() };
        let reflected = along(-1.0);
        let fr = f(&reflected);
        evals += 1;
        if fr < values[0] {
            let expanded = along(-2.0);
            let fe = f(&expanded);
            evals += 1;
            if fe < fr {
                simplex[n] = expanded;
                values[n] = fe;
            } else {
                simplex[n] = reflected;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = reflected;
            values[n] = fr;
        } else {
            let contracted = if fr < values[n] { along(-0.5) } else { along(0.5) };
            let fc = f(&contracted);
            evals += 1;
            if fc < values[n].min(fr) {
                simplex[n] = contracted;
                values[n] = fc;
            } else {
                for i in 1..=n {
                    simplex[i] = (0..n).map(|k| simplex[0][k] + 0.5 * (simplex[i][k] - simplex[0][k])).collect();
                    values[i] = f(&simplex[i]);
                }
                evals += n;
            }
        }
    }
    let i = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).expect("non-empty simplex");
    (simplex[i].clone(), values[i], evals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ID: [f64; 3] = [1.0, 1.0, 1.0];

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(v))
    }

    /// `G(0) = int_0^inf (e^{-2t} I_0(2t))^3 dt` with `I_0` from its integral form; the
    /// substitution `t = (1 - w^2) / w^2` removes the slow tail.
    fn bessel_oracle() -> f64 {
        let rule = gauss_legendre(32);
        let scaled_i0 = |t: f64| -> f64 {
            let z = 2.0 * t;
            if z > 400.0 {
                let series = 1.0 + 1.0 / (8.0 * z) + 9.0 / (128.0 * z * z) + 225.0 / (3072.0 * z.powi(3));
                return series / (2.0 * PI * z).sqrt();
            }
            let mut acc = 0.0;
            let mut hi = PI;
            for _ in 0..20 {
                let lo = 0.5 * hi;
                acc += rule.mapped(lo, hi).integrate(|th| (-z * 2.0 * (0.5 * th).sin().powi(2)).exp());
                hi = lo;
            }
            acc += rule.mapped(0.0, hi).integrate(|th| (-z * 2.0 * (0.5 * th).sin().powi(2)).exp());
            acc / PI
        };
        let mut total = 0.0;
        let mut hi = 1.0;
        for _ in 0..40 {
            let lo = 0.5 * hi;
            total += gauss_legendre(40).mapped(lo, hi).integrate(|w| {
                let t = (1.0 - w * w) / (w * w);
                scaled_i0(t).powi(3) * 2.0 / w.powi(3)
            });
            hi = lo;
        }
        total
    }

    #[test]
    fn lattice_green_at_origin() {
        let g0 = discrete_gh(&ID, &[0, 0, 0]).unwrap();
        let oracle = bessel_oracle();
        assert!((g0 - oracle).abs() < 1e-9, "{g0} vs {oracle}");
        assert!((g0 - 0.2527).abs() / 0.2527 < 5e-3);
    }

    #[test]
    fn lattice_green_matches_torus_fft_at_large_side() {
        // The torus value differs from the lattice one by a constant of order 1 / L; compare differences.
        let g = TorusGeometry::new(3, 48).unwrap();
        let t = torus_gh(&[1.0, 1.3, 0.8], &g).unwrap();
        let a = discrete_gh(&[1.0, 1.3, 0.8], &[1, 2, 0]).unwrap() - discrete_gh(&[1.0, 1.3, 0.8], &[0, 0, 0]).unwrap();
        let b = t[g.site(&[1, 2, 0])] - t[0];
        assert!((a - b).abs() < 2e-3, "{a} {b}");
    }

    #[test]
    fn torus_green_solves_the_equation() {
        let g = TorusGeometry::new(3, 6).unwrap();
        let diagonal = [1.0, 2.0, 0.5];
        let gh = torus_gh(&diagonal, &g).unwrap();
        let a = EdgeField::from_fn(&g, |e| diagonal[e % 3]);
        let lhs = lattice::apply_elliptic(0.0, &a, &gh).unwrap();
        let mut rhs = ScalarField::indicator(&g, 0);
        rhs.center();
        assert!(lhs.max_abs_diff(&rhs) < 1e-13);
        assert!(gh.mean().abs() < 1e-15);
    }

    #[test]
    fn symbol_values() {
        let s = Symbol::new(&[1.5, 1.0, 2.0]).unwrap();
        assert!((s.eval(&[PI, 0.0, 0.0]) - 6.0).abs() < 1e-14);
        assert_eq!(s.eval(&[0.0; 3]), 0.0);
    }

    #[test]
    fn discrete_gradient_parity() {
        for x in [[2, 1, 0], [5, -3, 2], [0, 4, 1]] {
            let reflected = [-x[0] - 1, x[1], x[2]];
            let a = discrete_grad_gh(&ID, &x, 0).unwrap();
            let b = discrete_grad_gh(&ID, &reflected, 0).unwrap();
            assert!((a + b).abs() < 1e-13, "{a} {b}");
        }
    }

    #[test]
    fn lattice_green_approaches_continuum() {
        for n in [16, 24] {
            let d = discrete_gh(&ID, &[n, 0, 0]).unwrap();
            let c = continuum_gh(&ID, &[n as f64, 0.0, 0.0]).unwrap();
            assert!((d / c - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn continuum_values() {
        let g = continuum_gh(&ID, &[1.0, 0.0, 0.0]).unwrap();
        assert!((g - 1.0 / (4.0 * PI)).abs() < 1e-15);
        assert!((g - 0.079577).abs() < 1e-6);
        let grad = continuum_grad_gh(&ID, &[1.0, 0.0, 0.0]).unwrap();
        assert!((grad[0] + 1.0 / (4.0 * PI)).abs() < 1e-15);
        assert!(grad[1] == 0.0 && grad[2] == 0.0);
        let g2 = continuum_gh(&[2.0; 3], &[0.0, 0.6, 0.8]).unwrap();
        assert!((g2 - 1.0 / (8.0 * PI)).abs() < 1e-15);
        assert!(continuum_gh(&ID, &[0.0; 3]).is_err());
    }

    #[test]
    fn continuum_green_is_fundamental_solution() {
        // Outward flux of A grad G through a sphere is -1, and div(A grad G) = 0 away from 0.
        let diagonal = [0.7, 1.3, 2.1];
        let grid = sphere_grid(3, 20_000);
        let flux: f64 = grid
            .iter()
            .map(|w| {
                let grad = continuum_grad_gh(&diagonal, w).unwrap();
                (0..3).map(|k| diagonal[k] * grad[k] * w[k]).sum::<f64>()
            })
            .sum::<f64>()
            * 4.0 * PI
            / grid.len() as f64;
        assert!((flux + 1.0).abs() < 1e-3, "flux {flux}");
        let x = [0.4, -0.9, 1.2];
        let h = 1e-4;
        let lap: f64 = (0..3)
            .map(|k| {
                let mut p = x;
                let mut m = x;
                p[k] += h;
                m[k] -= h;
                diagonal[k]
                    * (continuum_gh(&diagonal, &p).unwrap() - 2.0 * continuum_gh(&diagonal, &x).unwrap()
                        + continuum_gh(&diagonal, &m).unwrap())
                    / (h * h)
            })
            .sum();
        assert!(lap.abs() < 1e-5);
    }

    #[test]
    fn kernel_identity_case() {
        let q = diag(&ID);
        for r in [1.0, 2.0, 4.0, 8.0] {
            let v = kernel_k(&q, &ID, &[0.0, r, 0.0]).unwrap();
            let exact = 1.0 / (4.0 * PI * r);
            assert!((v.closed_form - exact).abs() < 1e-4 * exact);
            assert!((v.fourier.unwrap() - exact).abs() < 1e-4 * exact);
        }
    }

    #[test]
    fn kernel_anisotropic_q() {
        let q = diag(&[2.0, 1.0, 1.0]);
        let a = kernel_k(&q, &ID, &[1.0, 0.0, 0.0]).unwrap();
        assert!((a.closed_form - 1.0 / (4.0 * PI)).abs() < 1e-15);
        let b = kernel_k(&q, &ID, &[0.0, 1.0, 0.0]).unwrap();
        assert!((b.closed_form - 3.0 / (8.0 * PI)).abs() < 1e-15);
        assert!(b.relative_gap() < 1e-4);
    }

    #[test]
    fn kernel_routes_agree_for_general_inputs() {
        let q = DMatrix::from_row_slice(3, 3, &[1.2, 0.3, -0.1, 0.3, 0.8, 0.2, -0.1, 0.2, 0.5]);
        let diagonal = [1.1, 0.9, 1.4];
        for x in [[1.0, 0.0, 0.0], [0.5, 2.0, -1.0], [3.0, 3.0, 3.0]] {
            let v = kernel_k(&q, &diagonal, &x).unwrap();
            assert!(v.relative_gap() < 1e-4, "{x:?} {v:?}");
            let x2: Vec<f64> = x.iter().map(|c| 2.0 * c).collect();
            let v2 = kernel_k_closed_form(&q, &diagonal, &x2).unwrap();
            assert!((v2 - v.closed_form / 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn extrapolation_is_exact_on_quadratics() {
        let e = [1e-2, 1e-3, 1e-4];
        let v: Vec<f64> = e.iter().map(|x| 3.0 - 2.0 * x + 7.0 * x * x).collect();
        assert!((extrapolate_to_zero(&e, &v) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn periodized_kernel_is_consistent() {
        let g = TorusGeometry::new(3, 8).unwrap();
        let q = diag(&[1.4, 1.0, 1.0]);
        let diagonal = [1.1, 1.1, 1.1];
        let sites: Vec<usize> = (0..g.site_count()).collect();
        let k = periodized_kernel(&q, &diagonal, &g, &sites).unwrap();
        for (s, t) in [(g.site(&[1, 0, 0]), g.site(&[-1, 0, 0])), (g.site(&[2, 1, 0]), g.site(&[-2, -1, 0]))] {
            assert!((k.total(s) - k.total(t)).abs() < 1e-12);
        }
        // Away from the origin the torus kernel is the plain lattice sum, which the FFT evaluates directly.
        let direct = torus_kernel_regularized(&q, &diagonal, &g, 1e-3).unwrap();
        for x in [[2, 1, 0], [3, 3, 1], [4, 0, 0]] {
            let s = g.site(&x);
            assert!((k.total(s) - direct[s]).abs() < 5e-4 * k.infinite[s].abs(), "{x:?} {} {}", k.total(s), direct[s]);
        }
        // The correction is smooth on the scale of the torus.
        let c = &k.correction;
        let x = g.site(&[2, 0, 0]);
        let lap = c[g.site(&[3, 0, 0])] - 2.0 * c[x] + c[g.site(&[1, 0, 0])];
        assert!(lap.abs() < 0.1 * k.infinite[x].abs());
        // The zero mode is removed: the torus kernel has zero site sum, up to the singular origin term.
        assert!(periodized_kernel(&q, &diagonal, &g, &[g.site_count()]).is_err());
    }

    #[test]
    fn gff_defect_cases() {
        let iso = gff_defect(&diag(&[2.0; 3]), &[1.5; 3]).unwrap();
        assert!(iso.defect < 1e-8, "{iso:?}");
        assert!((iso.b[0] - 1.125).abs() < 1e-6);
        let aniso = gff_defect(&diag(&[2.0, 1.0, 1.0]), &ID).unwrap();
        // One-dimensional reduction: min over (b0, b1) of max_t |(b0 + b1 t)(1 + t) - 1| = 1/17.
        assert!(aniso.defect > 0.05);
        assert!((aniso.defect - 1.0 / 17.0).abs() < 2e-3, "{}", aniso.defect);
        let scaled = gff_defect(&diag(&[6.0, 3.0, 3.0]), &ID).unwrap();
        assert!((scaled.defect - aniso.defect).abs() < 1e-6);
    }

    #[test]
    fn discrete_to_continuum_slope() {
        let rows = discrete_vs_continuum_table(&ID, &[1, 0, 0], 0, &[4, 8, 16, 32]).unwrap();
        let (xs, ys): (Vec<f64>, Vec<f64>) = rows.iter().map(|r| (r.radius.ln(), r.difference.abs().ln())).unzip();
        let mx = xs.iter().sum::<f64>() / 4.0;
        let my = ys.iter().sum::<f64>() / 4.0;
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!((slope + 3.0).abs() < 0.5, "slope {slope}");
        let scaled: Vec<f64> = rows.iter().map(|r| r.scaled).collect();
        let ratio = scaled.iter().cloned().fold(0.0, f64::max) / scaled.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(ratio < 10.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn multiplier_is_non_negative(
            l in proptest::collection::vec(-2.0f64..2.0, 9),
            p in proptest::collection::vec(-3.0f64..3.0, 3),
            a in proptest::collection::vec(0.2f64..3.0, 3),
        ) {
            let m = DMatrix::from_row_slice(3, 3, &l);
            let q = &m * m.transpose();
            prop_assume!(p.iter().any(|v| v.abs() > 1e-3));
            prop_assert!(kernel_multiplier(&q, &a, &p) >= 0.0);
        }

        #[test]
        fn kernel_is_even_and_homogeneous(
            x in proptest::collection::vec(-5.0f64..5.0, 3),
            a in proptest::collection::vec(0.3f64..3.0, 3),
        ) {
            prop_assume!(x.iter().map(|v| v * v).sum::<f64>() > 0.01);
            let q = DMatrix::from_row_slice(3, 3, &[2.0, 0.1, 0.0, 0.1, 1.0, 0.3, 0.0, 0.3, 1.5]);
            let k = kernel_k_closed_form(&q, &a, &x).unwrap();
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            prop_assert_eq!(k, kernel_k_closed_form(&q, &a, &neg).unwrap());
            let dbl: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            prop_assert!((kernel_k_closed_form(&q, &a, &dbl).unwrap() - k / 2.0).abs() <= 1e-12 * k.abs().max(1e-300));
        }
    }
}
