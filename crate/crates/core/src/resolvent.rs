//! Bilinear forms `E[f (L + 1)^{-1} g]` for the Ornstein–Uhlenbeck number operator `L`.
//!
//! Two independent routes are provided. The Monte Carlo route uses the Mehler
//! coupling `E[f (L + 1)^{-1} g] = int_0^1 E[f(z) g(s z + sqrt(1 - s^2) z')] ds`
//! with Gauss–Legendre nodes in `s`. The oracle route expands both functionals
//! in products of Hermite polynomials, on which `L` acts diagonally with
//! eigenvalue equal to the total degree.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{gauss_hermite, gauss_legendre_unit, hermite_he, normalized_hermite, Rule};
use crate::rng::{GaussianStream, Purpose};
use crate::stats::{Estimate, RunningStats};

type Evaluator = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type PartialEvaluator = Arc<dyn Fn(&[f64], usize) -> f64 + Send + Sync>;

/// Real function of `arity` standard Gaussian coordinates.
#[derive(Clone)]
pub struct Functional {
    name: String,
    arity: usize,
    eval: Evaluator,
    partial: Option<PartialEvaluator>,
}

impl fmt::Debug for Functional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Functional")
            .field("name", &self.name)
            .field("arity", &self.arity)
            .field("analytic_partial", &self.partial.is_some())
            .finish()
    }
}

impl Functional {
    pub fn new(name: impl Into<String>, arity: usize, eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            arity,
            eval: Arc::new(eval),
            partial: None,
        }
    }

    /// Attaches the analytic vertical derivative `(z, k) -> d f / d z_k`.
    pub fn with_partial(mut self, partial: impl Fn(&[f64], usize) -> f64 + Send + Sync + 'static) -> Self {
        self.partial = Some(Arc::new(partial));
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn evaluate(&self, z: &[f64]) -> f64 {
        (self.eval)(z)
    }

    pub fn has_analytic_partial(&self) -> bool {
        self.partial.is_some()
    }

    /// Vertical derivative in coordinate `k`; fourth-order central differences when no analytic form is attached.
    pub fn partial(&self, z: &[f64], k: usize) -> f64 {
        if let Some(p) = &self.partial {
            return p(z, k);
        }
        let h = 1e-3;
        let mut w = z.to_vec();
        let mut at = |t: f64| {
            w[k] = z[k] + t;
            (self.eval)(&w)
        };
        (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
    }

    pub fn constant(arity: usize, c: f64) -> Self {
        Self::new(format!("{c}"), arity, move |_| c).with_partial(|_, _| 0.0)
    }

    /// `z_k`.
    pub fn coordinate(arity: usize, k: usize) -> Self {
        Self::new(format!("z{k}"), arity, move |z| z[k]).with_partial(move |_, j| if j == k { 1.0 } else { 0.0 })
    }

    /// `He_n(z_k)`.
    pub fn hermite(arity: usize, k: usize, n: usize) -> Self {
        Self::hermite_product(arity, &single(arity, k, n))
    }

    /// `prod_k He_{degrees[k]}(z_k)`.
    pub fn hermite_product(arity: usize, degrees: &[usize]) -> Self {
        assert_eq!(degrees.len(), arity);
        let deg = degrees.to_vec();
        let deg2 = deg.clone();
        let name = format!("He{deg:?}");
        Self::new(name, arity, move |z| {
            deg.iter().zip(z).map(|(&n, &x)| hermite_he(n, x)[n]).product()
        })
        .with_partial(move |z, j| {
            let n = deg2[j];
            if n == 0 {
                return 0.0;
            }
            let mut v = n as f64 * hermite_he(n - 1, z[j])[n - 1];
            for (k, (&m, &x)) in deg2.iter().zip(z).enumerate() {
                if k != j {
                    v *= hermite_he(m, x)[m];
                }
            }
            v
        })
    }

    /// `phi(z_k)` with derivative `dphi(z_k)`.
    pub fn scalar(
        name: impl Into<String>,
        arity: usize,
        k: usize,
        phi: impl Fn(f64) -> f64 + Send + Sync + 'static,
        dphi: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::new(name, arity, move |z| phi(z[k])).with_partial(move |z, j| if j == k { dphi(z[k]) } else { 0.0 })
    }
}

fn single(arity: usize, k: usize, n: usize) -> Vec<usize> {
    let mut d = vec![0; arity];
    d[k] = n;
    d
}

/// Gauss–Legendre nodes in the coupling parameter plus the Monte Carlo budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub nodes: usize,
    pub samples: usize,
    pub seed: u64,
    /// Largest fraction of samples that may be discarded as non-finite.
    pub exclusion_budget: f64,
    #[serde(skip)]
    rule: Option<Rule>,
}

impl QuadratureSpec {
    pub fn new(nodes: usize, samples: usize, seed: u64) -> Result<Self> {
        let spec = Self {
            nodes,
            samples,
            seed,
            exclusion_budget: 0.01,
            rule: None,
        };
        spec.validate()?;
        Ok(spec.with_rule())
    }

    fn with_rule(mut self) -> Self {
        self.rule = Some(gauss_legendre_unit(self.nodes));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 || self.samples == 0 {
            return Err(Error::InvalidParameter("quadrature needs at least one node and one sample".into()));
        }
        if !(0.0..1.0).contains(&self.exclusion_budget) {
            return Err(Error::InvalidParameter("exclusion budget must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn rule(&self) -> Rule {
        self.rule.clone().unwrap_or_else(|| gauss_legendre_unit(self.nodes))
    }

    pub fn budget(&self) -> usize {
        (self.exclusion_budget * self.samples as f64).floor() as usize
    }
}

/// Monte Carlo estimate with its sample accounting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: Estimate,
    pub samples: usize,
    pub excluded: usize,
    pub nodes: usize,
}

impl McEstimate {
    pub fn value(&self) -> f64 {
        self.estimate.value
    }

    pub fn std_error(&self) -> f64 {
        self.estimate.std_error
    }
}

const BLOCK: usize = 512;

struct Draw {
    zeta: Vec<f64>,
    fresh: Vec<f64>,
}

fn draw(seed: u64, index: u64, arity: usize) -> Draw {
    Draw {
        zeta: GaussianStream::normals(seed, index, Purpose::Scalar, arity),
        fresh: GaussianStream::normals(seed, index, Purpose::ScalarFresh, arity),
    }
}

fn couple_into(out: &mut [f64], zeta: &[f64], fresh: &[f64], s: f64) {
    let c = (1.0 - s * s).max(0.0).sqrt();
    for ((o, z), f) in out.iter_mut().zip(zeta).zip(fresh) {
        *o = s * z + c * f;
    }
}

/// Runs `statistic(zeta, fresh, scratch)` over all samples in fixed blocks and merges them in order.
fn mehler_mc<S>(arity: usize, quad: &QuadratureSpec, statistic: S) -> Result<McEstimate>
where
    S: Fn(&Draw, &Rule, &mut [f64]) -> f64 + Sync,
{
    quad.validate()?;
    let rule = quad.rule();
    let blocks = quad.samples.div_ceil(BLOCK);
    let partial: Vec<(RunningStats, usize)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut stats = RunningStats::new();
            let mut excluded = 0;
            let mut scratch = vec![0.0; arity];
            for i in b * BLOCK..((b + 1) * BLOCK).min(quad.samples) {
                let y = statistic(&draw(quad.seed, i as u64, arity), &rule, &mut scratch);
                if y.is_finite() {
                    stats.push(y);
                } else {
                    excluded += 1;
                }
            }
            (stats, excluded)
        })
        .collect();
    let mut stats = RunningStats::new();
    let mut excluded = 0;
    for (s, e) in &partial {
        stats.merge(s);
        excluded += e;
    }
    if excluded > quad.budget() {
        return Err(Error::ExclusionBudget {
            excluded,
            total: quad.samples,
            budget: quad.budget(),
        });
    }
    Ok(McEstimate {
        estimate: stats.estimate(),
        samples: quad.samples - excluded,
        excluded,
        nodes: rule.len(),
    })
}

fn same_arity(f: &Functional, g: &Functional) -> Result<usize> {
    if f.arity() != g.arity() {
        return Err(Error::LengthMismatch {
            expected: f.arity(),
            found: g.arity(),
        });
    }
    Ok(f.arity())
}

/// Mehler-quadrature estimate of `E[f (L + 1)^{-1} g]`.
pub fn resolvent_bilinear_mc(f: &Functional, g: &Functional, quad: &QuadratureSpec) -> Result<McEstimate> {
    let arity = same_arity(f, g)?;
    mehler_mc(arity, quad, |d, rule, coupled| {
        let fz = f.evaluate(&d.zeta);
        let mut acc = 0.0;
        for (&s, &w) in rule.nodes.iter().zip(&rule.weights) {
            couple_into(coupled, &d.zeta, &d.fresh, s);
            acc += w * g.evaluate(coupled);
        }
        fz * acc
    })
}

/// `E[f (L + 1)^{-1} f] / E[f^2]` on shared draws with a delta-method error; the common
/// heavy tails of numerator and denominator cancel.
pub fn resolvent_ratio_mc(f: &Functional, quad: &QuadratureSpec) -> Result<Estimate> {
    quad.validate()?;
    let arity = f.arity();
    let rule = quad.rule();
    let pairs: Vec<(f64, f64)> = (0..quad.samples)
        .into_par_iter()
        .map_init(
            || vec![0.0; arity],
            |coupled, i| {
                let d = draw(quad.seed, i as u64, arity);
                let fz = f.evaluate(&d.zeta);
                let mut acc = 0.0;
                for (&s, &w) in rule.nodes.iter().zip(&rule.weights) {
                    couple_into(coupled, &d.zeta, &d.fresh, s);
                    acc += w * f.evaluate(coupled);
                }
                (fz * acc, fz * fz)
            },
        )
        .collect();
    let n = pairs.len() as f64;
    let num = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let den = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    if !(den > 0.0) || !num.is_finite() {
        return Err(Error::InsufficientData("functional has vanishing or infinite norm".into()));
    }
    let ratio = num / den;
    let resid: RunningStats = pairs.iter().map(|(y, x)| y - ratio * x).collect();
    Ok(Estimate {
        value: ratio,
        std_error: resid.std_error() / den,
    })
}

/// Both sides of the covariance identity `Cov(f, g) = sum_k E[d_k f (L + 1)^{-1} d_k g]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    /// Derivative side.
    pub representation: McEstimate,
    /// Plug-in sample covariance on the same draws.
    pub direct: Estimate,
}

impl CovarianceReport {
    /// Difference in units of the combined standard error.
    pub fn discrepancy_sigmas(&self) -> f64 {
        let s = self.representation.std_error().hypot(self.direct.std_error);
        let diff = (self.representation.value() - self.direct.value).abs();
        if s == 0.0 {
            if diff < 1e-12 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            diff / s
        }
    }
}

pub fn hs_covariance(f: &Functional, g: &Functional, quad: &QuadratureSpec) -> Result<CovarianceReport> {
    let arity = same_arity(f, g)?;
    let representation = mehler_mc(arity, quad, |d, rule, coupled| {
        let df: Vec<f64> = (0..arity).map(|k| f.partial(&d.zeta, k)).collect();
        let mut acc = 0.0;
        for (&s, &w) in rule.nodes.iter().zip(&rule.weights) {
            couple_into(coupled, &d.zeta, &d.fresh, s);
            for (k, dfk) in df.iter().enumerate() {
                if *dfk != 0.0 {
                    acc += w * dfk * g.partial(coupled, k);
                }
            }
        }
        acc
    })?;
    let direct = plug_in_covariance(f, g, quad)?;
    Ok(CovarianceReport { representation, direct })
}

fn plug_in_covariance(f: &Functional, g: &Functional, quad: &QuadratureSpec) -> Result<Estimate> {
    let arity = f.arity();
    let fm = mehler_mc(arity, quad, |d, _, _| f.evaluate(&d.zeta))?.value();
    let gm = mehler_mc(arity, quad, |d, _, _| g.evaluate(&d.zeta))?.value();
    let est = mehler_mc(arity, quad, |d, _, _| (f.evaluate(&d.zeta) - fm) * (g.evaluate(&d.zeta) - gm))?;
    let n = est.samples as f64;
    Ok(Estimate {
        value: est.value() * n / (n - 1.0).max(1.0),
        std_error: est.std_error(),
    })
}

/// Gauss–Hermite grid on which functionals of `vars` coordinates are expanded up to degree `degree` per coordinate.
#[derive(Clone, Debug)]
pub struct HermiteOracle {
    vars: usize,
    degree: usize,
    grid: Rule,
    /// Largest accepted truncation error relative to `E[f^2]`.
    pub threshold: f64,
}

/// Coefficients in the orthonormal basis `prod_k He_{a_k}(z_k) / sqrt(a_k!)`, last coordinate fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct HermiteExpansion {
    pub vars: usize,
    pub degree: usize,
    pub coefficients: Vec<f64>,
    /// `E[f^2]` on the grid.
    pub second_moment: f64,
    /// `E[f^2] - sum c^2`, the mass outside the tensor.
    pub truncation_error: f64,
}

pub const MAX_ORACLE_VARS: usize = 6;
pub const MAX_ORACLE_DEGREE: usize = 12;

impl HermiteOracle {
    pub fn new(vars: usize, degree: usize) -> Result<Self> {
        let budget = 4_000_000f64.powf(1.0 / vars.max(1) as f64).floor() as usize;
        Self::with_points(vars, degree, budget.clamp(degree + 1, 4 * (degree + 1)))
    }

    /// `points >= degree + 1` keeps the discrete basis orthonormal.
    pub fn with_points(vars: usize, degree: usize, points: usize) -> Result<Self> {
        if vars == 0 || vars > MAX_ORACLE_VARS {
            return Err(Error::InvalidParameter(format!("oracle supports 1..={MAX_ORACLE_VARS} variables, got {vars}")));
        }
        if degree > MAX_ORACLE_DEGREE {
            return Err(Error::InvalidParameter(format!("oracle degree {degree} above {MAX_ORACLE_DEGREE}")));
        }
        if points < degree + 1 {
            return Err(Error::InvalidParameter(format!("{points} grid points cannot resolve degree {degree}")));
        }
        Ok(Self {
            vars,
            degree,
            grid: gauss_hermite(points),
            threshold: 1e-10,
        })
    }

    pub fn vars(&self) -> usize {
        self.vars
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    fn check(&self, f: &Functional) -> Result<()> {
        if f.arity() != self.vars {
            return Err(Error::LengthMismatch {
                expected: self.vars,
                found: f.arity(),
            });
        }
        Ok(())
    }

    pub fn expand(&self, f: &Functional) -> Result<HermiteExpansion> {
        self.check(f)?;
        let (values, weights) = tabulate(&self.grid, self.vars, |z| f.evaluate(z));
        let second_moment: f64 = values.iter().zip(&weights).map(|(v, w)| w * v * v).sum();
        let n = self.grid.len();
        let basis: Vec<Vec<f64>> = self
            .grid
            .nodes
            .iter()
            .zip(&self.grid.weights)
            .map(|(&x, &w)| normalized_hermite(self.degree, x).into_iter().map(|h| w * h).collect())
            .collect();
        // Contract axis by axis: (outer, n, inner) -> (outer, degree + 1, inner).
        let k = self.degree + 1;
        let mut current = values;
        for axis in 0..self.vars {
            let inner = n.pow((self.vars - 1 - axis) as u32);
            let outer = k.pow(axis as u32);
            let mut next = vec![0.0; outer * k * inner];
            for o in 0..outer {
                for i in 0..n {
                    let src = &current[(o * n + i) * inner..(o * n + i + 1) * inner];
                    for (a, &b) in basis[i].iter().enumerate() {
                        let dst = &mut next[(o * k + a) * inner..(o * k + a + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += b * s);
                    }
                }
            }
            current = next;
        }
        let captured: f64 = current.iter().map(|c| c * c).sum();
        Ok(HermiteExpansion {
            vars: self.vars,
            degree: self.degree,
            coefficients: current,
            second_moment,
            truncation_error: (second_moment - captured).max(0.0),
        })
    }

    fn accept(&self, e: &HermiteExpansion) -> Result<()> {
        let threshold = self.threshold * e.second_moment.max(f64::MIN_POSITIVE);
        if e.truncation_error > threshold {
            return Err(Error::Truncation {
                error: e.truncation_error,
                threshold,
            });
        }
        Ok(())
    }
}

impl HermiteExpansion {
    fn degrees(&self, flat: usize) -> Vec<usize> {
        let k = self.degree + 1;
        let mut rest = flat;
        let mut out = vec![0; self.vars];
        for slot in out.iter_mut().rev() {
            *slot = rest % k;
            rest /= k;
        }
        out
    }

    fn flat(&self, alpha: &[usize]) -> Option<usize> {
        if alpha.len() != self.vars || alpha.iter().any(|&a| a > self.degree) {
            return None;
        }
        Some(alpha.iter().fold(0, |acc, &a| acc * (self.degree + 1) + a))
    }

    /// Coefficient of `prod He_{alpha_k}` in the unnormalized basis, `E[f He_alpha] / alpha!`.
    pub fn coefficient(&self, alpha: &[usize]) -> f64 {
        match self.flat(alpha) {
            Some(i) => {
                let fact: f64 = alpha.iter().map(|&a| (1..=a).map(|j| j as f64).product::<f64>()).product();
                self.coefficients[i] / fact.sqrt()
            }
            None => 0.0,
        }
    }

    pub fn total_degree(&self, flat: usize) -> usize {
        self.degrees(flat).iter().sum()
    }

    /// Expansion of `(L + 1)^{-1} f`.
    pub fn resolved(&self) -> HermiteExpansion {
        let coefficients: Vec<f64> = self
            .coefficients
            .iter()
            .enumerate()
            .map(|(i, c)| c / (self.total_degree(i) + 1) as f64)
            .collect();
        let captured = coefficients.iter().map(|c| c * c).sum::<f64>();
        // Tail modes have total degree above `degree`, so they shrink by at least degree + 2.
        let tail = self.truncation_error / ((self.degree + 2) as f64).powi(2);
        HermiteExpansion {
            vars: self.vars,
            degree: self.degree,
            coefficients,
            second_moment: captured + tail,
            truncation_error: tail,
        }
    }

    pub fn evaluate(&self, z: &[f64]) -> f64 {
        let tables: Vec<Vec<f64>> = z.iter().map(|&x| normalized_hermite(self.degree, x)).collect();
        self.coefficients
            .iter()
            .enumerate()
            .map(|(i, c)| c * self.degrees(i).iter().zip(&tables).map(|(&a, t)| t[a]).product::<f64>())
            .sum()
    }
}

/// `f` and the product weights on the tensor grid, last coordinate fastest.
fn tabulate(rule: &Rule, vars: usize, f: impl Fn(&[f64]) -> f64 + Sync) -> (Vec<f64>, Vec<f64>) {
    let n = rule.len();
    let total = n.pow(vars as u32);
    let pairs: Vec<(f64, f64)> = (0..total)
        .into_par_iter()
        .map_init(
            || vec![0.0; vars],
            |z, flat| {
                let mut rest = flat;
                let mut w = 1.0;
                for slot in (0..vars).rev() {
                    let i = rest % n;
                    rest /= n;
                    z[slot] = rule.nodes[i];
                    w *= rule.weights[i];
                }
                (f(z), w)
            },
        )
        .collect();
    pairs.into_iter().unzip()
}

/// Oracle value of `E[f (L + 1)^{-1} g]` with a bound on the effect of truncation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleValue {
    pub value: f64,
    pub truncation_bound: f64,
}

pub fn hermite_resolvent(f: &Functional, g: &Functional, oracle: &HermiteOracle) -> Result<OracleValue> {
    let ef = oracle.expand(f)?;
    let eg = oracle.expand(g)?;
    oracle.accept(&ef)?;
    oracle.accept(&eg)?;
    let value = ef
        .coefficients
        .iter()
        .zip(&eg.coefficients)
        .enumerate()
        .map(|(i, (a, b))| a * b / (ef.total_degree(i) + 1) as f64)
        .sum();
    Ok(OracleValue {
        value,
        truncation_bound: (ef.truncation_error * eg.truncation_error).sqrt() / (oracle.degree + 2) as f64,
    })
}

/// `d f / d z_k` as a functional.
pub fn partial_functional(f: &Functional, k: usize) -> Functional {
    let inner = f.clone();
    Functional::new(format!("d{k} {}", f.name()), f.arity(), move |z| inner.partial(z, k))
}

/// Oracle value of `sum_k E[d_k f (L + 1)^{-1} d_k g]`.
pub fn hs_covariance_oracle(f: &Functional, g: &Functional, oracle: &HermiteOracle) -> Result<OracleValue> {
    let arity = same_arity(f, g)?;
    let mut total = OracleValue {
        value: 0.0,
        truncation_bound: 0.0,
    };
    for k in 0..arity {
        let v = hermite_resolvent(&partial_functional(f, k), &partial_functional(g, k), oracle)?;
        total.value += v.value;
        total.truncation_bound += v.truncation_bound;
    }
    Ok(total)
}

/// The Mehler integral `int_0^1 E[f P_s g] ds` on the oracle expansions, where `P_s` scales
/// a mode of total degree `n` by `s^n`, evaluated with the given rule on `[0, 1]`.
pub fn mehler_quadrature_resolvent(f: &Functional, g: &Functional, oracle: &HermiteOracle, rule: &Rule) -> Result<f64> {
    let ef = oracle.expand(f)?;
    let eg = oracle.expand(g)?;
    Ok(ef
        .coefficients
        .iter()
        .zip(&eg.coefficients)
        .enumerate()
        .map(|(i, (a, b))| {
            let n = ef.total_degree(i) as i32;
            a * b * rule.integrate(|s| s.powi(n))
        })
        .sum())
}

/// `|(L + 1)^{-1} f|_p / |f|_p` by the oracle and, optionally, by nested Monte Carlo.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub p: f64,
    pub norm: f64,
    pub resolved_norm: f64,
    pub oracle_ratio: f64,
    /// Relative truncation error of `f` in the oracle.
    pub truncation: f64,
    pub mc_ratio: Option<Estimate>,
}

impl ContractionReport {
    /// Ratio at most one within three standard errors; the oracle ratio within its truncation slack.
    pub fn passes(&self) -> bool {
        let oracle_ok = self.oracle_ratio <= 1.0 + self.truncation.sqrt() + 1e-12;
        let mc_ok = self.mc_ratio.is_none_or(|r| r.value <= 1.0 + 3.0 * r.std_error);
        oracle_ok && mc_ok
    }
}

/// Inner samples per outer draw in the nested Monte Carlo norm estimate; its bias is upward.
pub const INNER_SAMPLES: usize = 64;

pub fn lp_contraction_check(
    f: &Functional,
    p: f64,
    oracle: &HermiteOracle,
    quad: Option<&QuadratureSpec>,
) -> Result<ContractionReport> {
    if !(p >= 2.0) || !p.is_finite() {
        return Err(Error::InvalidParameter(format!("exponent p = {p} must be at least 2")));
    }
    let expansion = oracle.expand(f)?;
    let resolved = expansion.resolved();
    let points = (((p * oracle.degree as f64).ceil() as usize / 2 + 8).max(oracle.grid.len()))
        .min(4_000_000f64.powf(1.0 / oracle.vars as f64) as usize)
        .max(oracle.degree + 1);
    let fine = gauss_hermite(points);
    let (fv, w) = tabulate(&fine, oracle.vars, |z| f.evaluate(z));
    let (uv, _) = tabulate(&fine, oracle.vars, |z| resolved.evaluate(z));
    let norm = w.iter().zip(&fv).map(|(w, v)| w * v.abs().powf(p)).sum::<f64>().powf(1.0 / p);
    let resolved_norm = w.iter().zip(&uv).map(|(w, v)| w * v.abs().powf(p)).sum::<f64>().powf(1.0 / p);
    let mc_ratio = quad.map(|q| nested_ratio(f, p, q)).transpose()?;
    Ok(ContractionReport {
        p,
        norm,
        resolved_norm,
        oracle_ratio: resolved_norm / norm,
        truncation: expansion.truncation_error / expansion.second_moment.max(f64::MIN_POSITIVE),
        mc_ratio,
    })
}

fn nested_ratio(f: &Functional, p: f64, quad: &QuadratureSpec) -> Result<Estimate> {
    quad.validate()?;
    let arity = f.arity();
    let rule = quad.rule();
    let pairs: Vec<(f64, f64)> = (0..quad.samples)
        .into_par_iter()
        .map_init(
            || vec![0.0; arity],
            |coupled, i| {
                let zeta = GaussianStream::normals(quad.seed, i as u64, Purpose::Scalar, arity);
                let inner = GaussianStream::normals(quad.seed, i as u64, Purpose::Inner, arity * INNER_SAMPLES);
                let mut u = 0.0;
                for (&s, &w) in rule.nodes.iter().zip(&rule.weights) {
                    let mut acc = 0.0;
                    for j in 0..INNER_SAMPLES {
                        couple_into(coupled, &zeta, &inner[j * arity..(j + 1) * arity], s);
                        acc += f.evaluate(coupled);
                    }
                    u += w * acc / INNER_SAMPLES as f64;
                }
                (u.abs().powf(p), f.evaluate(&zeta).abs().powf(p))
            },
        )
        .collect();
    let n = pairs.len() as f64;
    let num = pairs.iter().map(|x| x.0).sum::<f64>() / n;
    let den = pairs.iter().map(|x| x.1).sum::<f64>() / n;
    if !(den > 0.0) || !num.is_finite() {
        return Err(Error::InsufficientData("functional has vanishing or infinite norm".into()));
    }
    let r0 = num / den;
    let resid: RunningStats = pairs.iter().map(|(a, b)| a - r0 * b).collect();
    let sigma0 = resid.std_error() / den;
    let r = r0.powf(1.0 / p);
    Ok(Estimate {
        value: r,
        std_error: r / (p * r0) * sigma0,
    })
}
