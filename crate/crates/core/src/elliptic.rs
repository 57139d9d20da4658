//! Preconditioned conjugate gradients for `(mu + div(a grad)) u = f` on the torus,
//! plus correctors, Green columns and a dense LU oracle for small tori.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{self, EdgeField, ScalarField, TorusGeometry};

/// Largest site count accepted by the dense oracle.
pub const DENSE_LIMIT: usize = 4096;

/// Relative size of the torus mean above which a massless right-hand side is rejected.
const SOLVABILITY_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preconditioner {
    None,
    Diagonal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub preconditioner: Preconditioner,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 20_000,
            preconditioner: Preconditioner::Diagonal,
        }
    }
}

impl SolveConfig {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::InvalidParameter(format!("tolerance {} must be positive", self.tolerance)));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidParameter("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    /// Final true relative residual `|f - Au| / |f|`.
    pub residual: f64,
}

fn check_mass(mu: f64) -> Result<()> {
    if mu >= 0.0 && mu.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("mass {mu} must be finite and non-negative")))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project_mean(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

/// Subtracts the torus mean of a massless right-hand side, rejecting it if that mean is not negligible.
fn massless_rhs(f: &ScalarField) -> Result<Vec<f64>> {
    let mut v = f.values().to_vec();
    let scale: f64 = v.iter().map(|x| x.abs()).sum();
    let total: f64 = v.iter().sum();
    if total.abs() > SOLVABILITY_TOLERANCE * scale {
        return Err(Error::Unsolvable { mean: f.mean() });
    }
    project_mean(&mut v);
    Ok(v)
}

/// Solves `(mu + div(a grad)) u = f`; for `mu = 0` the right-hand side must have zero torus mean
/// and the returned solution has exact zero mean.
pub fn solve(a: &EdgeField, mu: f64, f: &ScalarField, config: &SolveConfig) -> Result<ScalarField> {
    solve_with_diagnostics(a, mu, f, config).map(|(u, _)| u)
}

pub fn solve_with_diagnostics(
    a: &EdgeField,
    mu: f64,
    f: &ScalarField,
    config: &SolveConfig,
) -> Result<(ScalarField, SolveDiagnostics)> {
    config.validate()?;
    check_mass(mu)?;
    a.geometry().check_same(f.geometry())?;
    lattice::check_positive(a)?;
    let g = a.geometry();
    let massless = mu == 0.0;
    let rhs = if massless { massless_rhs(f)? } else { f.values().to_vec() };
    let (mut u, diagnostics) = pcg(a.values(), mu, &rhs, g, config)?;
    if massless {
        project_mean(&mut u);
    }
    Ok((ScalarField::new(g, u)?, diagnostics))
}

fn pcg(a: &[f64], mu: f64, rhs: &[f64], g: &TorusGeometry, config: &SolveConfig) -> Result<(Vec<f64>, SolveDiagnostics)> {
    let n = rhs.len();
    let massless = mu == 0.0;
    let rhs_norm = dot(rhs, rhs).sqrt();
    if rhs_norm == 0.0 {
        return Ok((vec![0.0; n], SolveDiagnostics::default()));
    }
    let inv_diag: Vec<f64> = match config.preconditioner {
        Preconditioner::Diagonal => lattice::operator_diagonal(mu, a, g).iter().map(|d| 1.0 / d).collect(),
        Preconditioner::None => vec![1.0; n],
    };
    let mut u = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, m)| r * m).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut history = Vec::new();
    let target = config.tolerance * rhs_norm;
    for it in 1..=config.max_iterations {
        lattice::apply_into(mu, a, &p, g, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for k in 0..n {
            u[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        if massless {
            project_mean(&mut r);
        }
        let rn = dot(&r, &r).sqrt();
        history.push(rn / rhs_norm);
        if rn <= target {
            let residual = true_residual(a, mu, &u, rhs, g) / rhs_norm;
            if residual <= config.tolerance {
                return Ok((u, SolveDiagnostics { iterations: it, residual }));
            }
            // Recurrence drifted from the true residual; restart from the current iterate.
            lattice::apply_into(mu, a, &u, g, &mut ap);
            for k in 0..n {
                r[k] = rhs[k] - ap[k];
            }
            if massless {
                project_mean(&mut r);
            }
        }
        for k in 0..n {
            z[k] = r[k] * inv_diag[k];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    let residual = true_residual(a, mu, &u, rhs, g) / rhs_norm;
    Err(Error::NotConverged {
        iterations: history.len(),
        residual,
        history,
    })
}

fn true_residual(a: &[f64], mu: f64, u: &[f64], rhs: &[f64], g: &TorusGeometry) -> f64 {
    let mut au = vec![0.0; u.len()];
    lattice::apply_into(mu, a, u, g, &mut au);
    rhs.iter().zip(&au).map(|(f, v)| (f - v) * (f - v)).sum::<f64>().sqrt()
}

/// The `d` coordinate correctors of one environment.
#[derive(Clone, Debug)]
pub struct CorrectorSet {
    pub mu: f64,
    /// `phi_j` for `j = 0..d`; torus-mean zero when `mu = 0`.
    pub fields: Vec<ScalarField>,
    pub gradients: Vec<EdgeField>,
    pub diagnostics: Vec<SolveDiagnostics>,
}

impl CorrectorSet {
    pub fn geometry(&self) -> &TorusGeometry {
        self.fields[0].geometry()
    }

    pub fn dim(&self) -> usize {
        self.fields.len()
    }

    /// `phi_xi = sum_j xi_j phi_j`.
    pub fn combine(&self, xi: &[f64]) -> Result<ScalarField> {
        self.check_direction(xi)?;
        let g = self.geometry();
        Ok(ScalarField::from_fn(g, |x| xi.iter().zip(&self.fields).map(|(c, f)| c * f[x]).sum()))
    }

    pub fn combined_gradient(&self, xi: &[f64]) -> Result<EdgeField> {
        self.check_direction(xi)?;
        let g = self.geometry();
        Ok(EdgeField::from_fn(g, |e| xi.iter().zip(&self.gradients).map(|(c, f)| c * f[e]).sum()))
    }

    /// `xi + grad phi_xi` on every edge.
    pub fn corrected_gradient(&self, xi: &[f64]) -> Result<EdgeField> {
        let grad = self.combined_gradient(xi)?;
        let d = self.dim();
        Ok(EdgeField::from_fn(self.geometry(), |e| xi[e % d] + grad[e]))
    }

    fn check_direction(&self, xi: &[f64]) -> Result<()> {
        if xi.len() != self.dim() {
            return Err(Error::LengthMismatch {
                expected: self.dim(),
                found: xi.len(),
            });
        }
        Ok(())
    }
}

/// `-div(a e_j)` restricted to the edges in direction `j`.
pub fn corrector_rhs(a: &EdgeField, j: usize) -> ScalarField {
    let g = a.geometry();
    let d = g.dim();
    ScalarField::from_fn(g, |x| a[x * d + j] - a[g.back_neighbor(x, j) * d + j])
}

/// Solves `mu phi + div(a (e_j + grad phi)) = 0` for each coordinate direction.
pub fn correctors(a: &EdgeField, mu: f64, config: &SolveConfig) -> Result<CorrectorSet> {
    let d = a.geometry().dim();
    let mut fields = Vec::with_capacity(d);
    let mut gradients = Vec::with_capacity(d);
    let mut diagnostics = Vec::with_capacity(d);
    for j in 0..d {
        let (phi, diag) = solve_with_diagnostics(a, mu, &corrector_rhs(a, j), config)?;
        gradients.push(lattice::gradient(&phi));
        fields.push(phi);
        diagnostics.push(diag);
    }
    Ok(CorrectorSet {
        mu,
        fields,
        gradients,
        diagnostics,
    })
}

#[derive(Clone, Debug)]
pub struct GreenColumn {
    pub mu: f64,
    pub source: usize,
    pub values: ScalarField,
    pub diagnostics: SolveDiagnostics,
}

impl GreenColumn {
    /// `G(source, y)`.
    pub fn at(&self, y: usize) -> f64 {
        self.values[y]
    }

    /// `grad_y G(source, e)` on every edge.
    pub fn gradient(&self) -> EdgeField {
        lattice::gradient(&self.values)
    }
}

/// Source `1_{x0}`, made mean-zero when `mu = 0`.
pub fn green_source(g: &TorusGeometry, mu: f64, source: usize) -> ScalarField {
    let mut f = ScalarField::indicator(g, source);
    if mu == 0.0 {
        f.center();
    }
    f
}

pub fn green_column(a: &EdgeField, mu: f64, source: usize, config: &SolveConfig) -> Result<GreenColumn> {
    let g = a.geometry();
    if source >= g.site_count() {
        return Err(Error::InvalidParameter(format!("source site {source} out of range")));
    }
    check_mass(mu)?;
    let (values, diagnostics) = solve_with_diagnostics(a, mu, &green_source(g, mu, source), config)?;
    Ok(GreenColumn {
        mu,
        source,
        values,
        diagnostics,
    })
}

fn size_guard(g: &TorusGeometry) -> Result<()> {
    if g.site_count() > DENSE_LIMIT {
        return Err(Error::SizeGuard {
            size: g.site_count(),
            limit: DENSE_LIMIT,
        });
    }
    Ok(())
}

/// Full matrix of `mu + div(a grad)`.
pub fn dense_operator(a: &EdgeField, mu: f64) -> Result<DMatrix<f64>> {
    let g = a.geometry();
    size_guard(g)?;
    check_mass(mu)?;
    lattice::check_positive(a)?;
    let n = g.site_count();
    let d = g.dim();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for x in 0..n {
        m[(x, x)] += mu;
        for i in 0..d {
            let y = g.neighbor(x, i);
            let w = a[x * d + i];
            m[(x, x)] += w;
            m[(y, y)] += w;
            m[(x, y)] -= w;
            m[(y, x)] -= w;
        }
    }
    Ok(m)
}

/// Operator plus `J / n` for `mu = 0`, which is invertible and maps mean-zero data to mean-zero solutions.
fn regularized_operator(a: &EdgeField, mu: f64) -> Result<DMatrix<f64>> {
    let mut m = dense_operator(a, mu)?;
    if mu == 0.0 {
        let n = m.nrows();
        m.add_scalar_mut(1.0 / n as f64);
    }
    Ok(m)
}

/// Direct LU solve with the same normalization rules as [`solve`].
pub fn dense_oracle_solve(a: &EdgeField, mu: f64, f: &ScalarField) -> Result<ScalarField> {
    a.geometry().check_same(f.geometry())?;
    let m = regularized_operator(a, mu)?;
    let rhs = if mu == 0.0 { massless_rhs(f)? } else { f.values().to_vec() };
    let lu = m.lu();
    let u = lu
        .solve(&DVector::from_vec(rhs))
        .ok_or_else(|| Error::InvalidParameter("dense operator is singular".into()))?;
    let mut u: Vec<f64> = u.iter().copied().collect();
    if mu == 0.0 {
        project_mean(&mut u);
    }
    ScalarField::new(a.geometry(), u)
}

/// Green matrix `G(x, y)`; for `mu = 0` the mean-zero pseudo-inverse.
pub fn dense_green_matrix(a: &EdgeField, mu: f64) -> Result<DMatrix<f64>> {
    let m = regularized_operator(a, mu)?;
    let n = m.nrows();
    let mut inv = m
        .try_inverse()
        .ok_or_else(|| Error::InvalidParameter("dense operator is singular".into()))?;
    if mu == 0.0 {
        inv.add_scalar_mut(-1.0 / n as f64);
    }
    // Symmetrize away the rounding of the inverse.
    let t = inv.transpose();
    Ok((inv + t) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{sample_environment, CoefficientMap};

    fn env_a(side: usize, seed: u64, index: u64) -> EdgeField {
        let g = TorusGeometry::new(3, side).unwrap();
        sample_environment(&g, &CoefficientMap::default(), seed, index).unwrap().a
    }

    #[test]
    fn massive_point_source_matches_dense() {
        let g = TorusGeometry::new(3, 4).unwrap();
        let a = EdgeField::constant(&g, 1.0);
        let f = ScalarField::indicator(&g, 0);
        let cfg = SolveConfig::with_tolerance(1e-13);
        let u = solve(&a, 1.0, &f, &cfg).unwrap();
        let v = dense_oracle_solve(&a, 1.0, &f).unwrap();
        assert!(u.max_abs_diff(&v) < 1e-10);
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let a = env_a(4, 1, 0);
        let f = ScalarField::zeros(a.geometry());
        let u = solve(&a, 0.0, &f, &SolveConfig::default()).unwrap();
        assert!(u.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn massless_constant_rhs_rejected() {
        let a = env_a(4, 1, 0);
        let f = ScalarField::constant(a.geometry(), 1.0);
        assert!(matches!(solve(&a, 0.0, &f, &SolveConfig::default()), Err(Error::Unsolvable { .. })));
        assert!(matches!(dense_oracle_solve(&a, 0.0, &f), Err(Error::Unsolvable { .. })));
    }

    #[test]
    fn non_convergence_reports_history() {
        let a = env_a(6, 2, 0);
        let g = a.geometry();
        let f = green_source(g, 0.0, 0);
        let cfg = SolveConfig {
            tolerance: 1e-14,
            max_iterations: 3,
            preconditioner: Preconditioner::None,
        };
        match solve(&a, 0.0, &f, &cfg) {
            Err(Error::NotConverged { iterations, history, .. }) => {
                assert_eq!(iterations, 3);
                assert_eq!(history.len(), 3);
            }
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn constant_coefficients_have_zero_corrector() {
        let g = TorusGeometry::new(3, 5).unwrap();
        let a = EdgeField::constant(&g, 1.7);
        let set = correctors(&a, 0.0, &SolveConfig::default()).unwrap();
        for phi in &set.fields {
            assert!(phi.max_abs() == 0.0);
        }
    }

    #[test]
    fn massive_corrector_matches_dense() {
        let a = env_a(4, 3, 1);
        let set = correctors(&a, 0.1, &SolveConfig::with_tolerance(1e-13)).unwrap();
        for j in 0..3 {
            let oracle = dense_oracle_solve(&a, 0.1, &corrector_rhs(&a, j)).unwrap();
            assert!(set.fields[j].max_abs_diff(&oracle) < 1e-9);
        }
    }

    #[test]
    fn massless_corrector_properties() {
        let a = env_a(6, 4, 0);
        let set = correctors(&a, 0.0, &SolveConfig::with_tolerance(1e-12)).unwrap();
        let g = a.geometry();
        for j in 0..3 {
            assert!(set.fields[j].mean().abs() < 1e-15);
            // Residual of the corrector equation.
            let lhs = apply_elliptic_checked(&a, &set.fields[j]);
            let rhs = corrector_rhs(&a, j);
            let scale = rhs.dot(&rhs).sqrt();
            let res = lhs.add_scaled(-1.0, &rhs);
            assert!(res.dot(&res).sqrt() <= 1e-11 * scale);
            for i in 0..3 {
                let s: f64 = (0..g.site_count()).map(|x| set.gradients[j].at(x, i)).sum();
                assert!(s.abs() < 1e-12);
            }
        }
        let xi = [0.3, -1.0, 2.0];
        let phi = set.combine(&xi).unwrap();
        let direct = {
            let rhs = ScalarField::from_fn(g, |x| (0..3).map(|j| xi[j] * corrector_rhs(&a, j)[x]).sum());
            solve(&a, 0.0, &rhs, &SolveConfig::with_tolerance(1e-12)).unwrap()
        };
        assert!(phi.max_abs_diff(&direct) < 1e-9);
    }

    fn apply_elliptic_checked(a: &EdgeField, u: &ScalarField) -> ScalarField {
        lattice::apply_elliptic(0.0, a, u).unwrap()
    }

    #[test]
    fn mean_corrector_gradient_vanishes() {
        let g = TorusGeometry::new(3, 4).unwrap();
        let map = CoefficientMap::default();
        let cfg = SolveConfig::default();
        let n = 200;
        for j in 0..3 {
            let samples: Vec<f64> = (0..n)
                .map(|k| {
                    let env = sample_environment(&g, &map, 77, k).unwrap();
                    // A single edge per sample keeps samples independent.
                    correctors(&env.a, 0.0, &cfg).unwrap().gradients[j][j]
                })
                .collect();
            let m = samples.iter().sum::<f64>() / n as f64;
            let var = samples.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!(m.abs() < 3.5 * (var / n as f64).sqrt(), "direction {j}: mean {m}");
        }
    }

    #[test]
    fn laplacian_green_at_origin() {
        let g = TorusGeometry::new(3, 64).unwrap();
        let a = EdgeField::constant(&g, 1.0);
        let col = green_column(&a, 0.0, 0, &SolveConfig::with_tolerance(1e-8)).unwrap();
        assert!(col.values.mean().abs() < 1e-15);
        // Torus offset is about -1 / L^(d-2) relative to the lattice value; 2% covers L = 64.
        assert!((col.at(0) - 0.252731).abs() / 0.252731 < 0.02, "G(0,0) = {}", col.at(0));
    }

    #[test]
    fn green_symmetry() {
        let a = env_a(8, 5, 0);
        let cfg = SolveConfig::with_tolerance(1e-12);
        let (x, y) = (3, 200);
        let gx = green_column(&a, 0.0, x, &cfg).unwrap();
        let gy = green_column(&a, 0.0, y, &cfg).unwrap();
        assert!((gx.at(y) - gy.at(x)).abs() < 1e-8);
        let small = env_a(4, 5, 1);
        let m = dense_green_matrix(&small, 0.0).unwrap();
        let col = green_column(&small, 0.0, 7, &cfg).unwrap();
        for z in 0..64 {
            assert!((m[(z, 7)] - col.at(z)).abs() < 1e-9);
        }
    }

    #[test]
    fn massive_green_decays_exponentially() {
        let g = TorusGeometry::new(3, 32).unwrap();
        let a = EdgeField::constant(&g, 1.0);
        let col = green_column(&a, 0.25, 0, &SolveConfig::with_tolerance(1e-12)).unwrap();
        let pts: Vec<(f64, f64)> = (4..=8).map(|n| (n as f64, col.at(g.site(&[n, 0, 0])).ln())).collect();
        let m = pts.len() as f64;
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
        let (mx, my) = (sx / m, sy / m);
        let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
        let syy: f64 = pts.iter().map(|(_, y)| (y - my).powi(2)).sum();
        let slope = sxy / sxx;
        let r2 = sxy * sxy / (sxx * syy);
        assert!(slope < 0.0);
        assert!(r2 > 0.99, "R^2 = {r2}");
    }

    #[test]
    fn dense_operator_structure() {
        let g = TorusGeometry::new(3, 4).unwrap();
        let a = EdgeField::constant(&g, 1.0);
        let m = dense_operator(&a, 1.0).unwrap();
        assert_eq!(m, m.transpose());
        for x in 0..64 {
            assert_eq!(m[(x, x)], 7.0);
            let row: f64 = m.row(x).iter().sum();
            assert!((row - 1.0).abs() < 1e-15);
            for i in 0..3 {
                assert_eq!(m[(x, g.neighbor(x, i))], -1.0);
            }
        }
        let big = TorusGeometry::new(3, 17).unwrap();
        assert!(matches!(
            dense_operator(&EdgeField::constant(&big, 1.0), 1.0),
            Err(Error::SizeGuard { .. })
        ));
    }

    #[test]
    fn random_operator_is_symmetric() {
        let a = env_a(4, 8, 0);
        let m = dense_operator(&a, 0.0).unwrap();
        assert_eq!(m, m.transpose());
    }
}
