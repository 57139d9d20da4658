//! Gaussian disorder, the coefficient map `a(t)`, and the Ornstein–Uhlenbeck coupling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{EdgeField, TorusGeometry};
use crate::rng::{GaussianStream, Purpose};

/// Smooth map from a standard Gaussian to a conductance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum CoefficientMap {
    /// `a(t) = a_min + (a_max - a_min) (1 + tanh(t / tau)) / 2`.
    Tanh { a_min: f64, a_max: f64, tau: f64 },
    /// `a(t) = value`, so `a' = a'' = 0`.
    Constant { value: f64 },
}

impl Default for CoefficientMap {
    fn default() -> Self {
        CoefficientMap::Tanh {
            a_min: 0.5,
            a_max: 1.5,
            tau: 1.0,
        }
    }
}

impl CoefficientMap {
    pub fn tanh(a_min: f64, a_max: f64, tau: f64) -> Result<Self> {
        let map = CoefficientMap::Tanh { a_min, a_max, tau };
        map.validate()?;
        Ok(map)
    }

    /// Tanh family with `a_max / a_min = contrast` and geometric mean one.
    pub fn with_contrast(contrast: f64) -> Result<Self> {
        if !(contrast > 1.0) {
            return Err(Error::InvalidParameter(format!("contrast {contrast} must exceed 1")));
        }
        let a_min = 1.0 / contrast.sqrt();
        Self::tanh(a_min, a_min * contrast, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            CoefficientMap::Tanh { a_min, a_max, tau } => {
                if !(a_min > 0.0 && a_max > a_min && a_max.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "tanh map needs 0 < a_min < a_max, got {a_min}, {a_max}"
                    )));
                }
                if !(tau > 0.0 && tau.is_finite()) {
                    return Err(Error::InvalidParameter(format!("tau {tau} must be positive")));
                }
            }
            CoefficientMap::Constant { value } => {
                if !(value > 0.0 && value.is_finite()) {
                    return Err(Error::InvalidParameter(format!("constant coefficient {value} must be positive")));
                }
            }
        }
        Ok(())
    }

    pub fn value(&self, t: f64) -> f64 {
        match *self {
            CoefficientMap::Tanh { a_min, a_max, tau } => a_min + (a_max - a_min) * 0.5 * (1.0 + (t / tau).tanh()),
            CoefficientMap::Constant { value } => value,
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match *self {
            CoefficientMap::Tanh { a_min, a_max, tau } => {
                let th = (t / tau).tanh();
                (a_max - a_min) * 0.5 * (1.0 - th * th) / tau
            }
            CoefficientMap::Constant { .. } => 0.0,
        }
    }

    pub fn second_derivative(&self, t: f64) -> f64 {
        match *self {
            CoefficientMap::Tanh { a_min, a_max, tau } => {
                let th = (t / tau).tanh();
                -(a_max - a_min) * (1.0 - th * th) * th / (tau * tau)
            }
            CoefficientMap::Constant { .. } => 0.0,
        }
    }

    /// `(inf a, sup a)`.
    pub fn range(&self) -> (f64, f64) {
        match *self {
            CoefficientMap::Tanh { a_min, a_max, .. } => (a_min, a_max),
            CoefficientMap::Constant { value } => (value, value),
        }
    }

    pub fn sup_derivative(&self) -> f64 {
        match *self {
            CoefficientMap::Tanh { a_min, a_max, tau } => 0.5 * (a_max - a_min) / tau,
            CoefficientMap::Constant { .. } => 0.0,
        }
    }

    pub fn sup_second_derivative(&self) -> f64 {
        match *self {
            // max of (1 - y^2) y over [0, 1] is 2 / (3 sqrt 3)
            CoefficientMap::Tanh { a_min, a_max, tau } => (a_max - a_min) / (tau * tau) * 2.0 / (3.0 * 3f64.sqrt()),
            CoefficientMap::Constant { .. } => 0.0,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, CoefficientMap::Constant { .. })
    }

    pub fn apply(&self, zeta: &EdgeField) -> EdgeField {
        zeta.map(|t| self.value(t))
    }
}

/// One draw of the disorder: `zeta` on every edge and `a = a(zeta)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentSample {
    pub zeta: EdgeField,
    pub a: EdgeField,
    pub map: CoefficientMap,
    pub seed: u64,
    pub sample_index: u64,
}

impl EnvironmentSample {
    pub fn geometry(&self) -> &TorusGeometry {
        self.zeta.geometry()
    }

    pub fn from_zeta(map: &CoefficientMap, zeta: EdgeField, seed: u64, sample_index: u64) -> Self {
        let a = map.apply(&zeta);
        Self {
            zeta,
            a,
            map: map.clone(),
            seed,
            sample_index,
        }
    }

    /// `a'(zeta_e)` on every edge.
    pub fn a_prime(&self) -> EdgeField {
        self.zeta.map(|t| self.map.derivative(t))
    }

    pub fn a_second(&self) -> EdgeField {
        self.zeta.map(|t| self.map.second_derivative(t))
    }
}

/// Draws iid standard normals keyed by `(seed, sample_index, edge)` and maps them to conductances.
pub fn sample_environment(
    geometry: &TorusGeometry,
    map: &CoefficientMap,
    seed: u64,
    sample_index: u64,
) -> Result<EnvironmentSample> {
    map.validate()?;
    let zeta = gaussian_edge_field(geometry, seed, sample_index, Purpose::Environment);
    Ok(EnvironmentSample::from_zeta(map, zeta, seed, sample_index))
}

/// Gaussian field for the independent copy used by the OU coupling.
pub fn fresh_field(geometry: &TorusGeometry, seed: u64, sample_index: u64) -> EdgeField {
    gaussian_edge_field(geometry, seed, sample_index, Purpose::Fresh)
}

fn gaussian_edge_field(geometry: &TorusGeometry, seed: u64, sample_index: u64, purpose: Purpose) -> EdgeField {
    let values = GaussianStream::normals(seed, sample_index, purpose, geometry.edge_count());
    EdgeField::new(geometry, values).expect("box-muller output is finite")
}

/// Mehler pair `(zeta, s zeta + sqrt(1 - s^2) zeta')`.
#[derive(Clone, Debug)]
pub struct OuCoupling {
    pub zeta_primary: EdgeField,
    pub zeta_fresh: EdgeField,
    pub s: f64,
}

impl OuCoupling {
    pub fn new(zeta_primary: EdgeField, zeta_fresh: EdgeField, s: f64) -> Result<Self> {
        zeta_primary.geometry().check_same(zeta_fresh.geometry())?;
        check_correlation(s)?;
        Ok(Self {
            zeta_primary,
            zeta_fresh,
            s,
        })
    }
}

fn check_correlation(s: f64) -> Result<()> {
    if (0.0..=1.0).contains(&s) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("coupling parameter {s} outside [0, 1]")))
    }
}

/// `s * zeta + sqrt(1 - s^2) * zeta'` entrywise.
pub fn ou_interpolate(coupling: &OuCoupling) -> Result<EdgeField> {
    couple_fields(&coupling.zeta_primary, &coupling.zeta_fresh, coupling.s)
}

pub(crate) fn couple_fields(primary: &EdgeField, fresh: &EdgeField, s: f64) -> Result<EdgeField> {
    check_correlation(s)?;
    primary.geometry().check_same(fresh.geometry())?;
    if s == 1.0 {
        return Ok(primary.clone());
    }
    if s == 0.0 {
        return Ok(fresh.clone());
    }
    let c = (1.0 - s * s).sqrt();
    Ok(EdgeField::from_fn(primary.geometry(), |e| s * primary[e] + c * fresh[e]))
}

/// Copy of `env` with `zeta_e` shifted by `h` and `a_e` recomputed.
pub fn perturb_edge(env: &EnvironmentSample, edge: usize, h: f64) -> Result<EnvironmentSample> {
    if !h.is_finite() {
        return Err(Error::InvalidParameter(format!("perturbation {h} is not finite")));
    }
    if edge >= env.zeta.len() {
        return Err(Error::InvalidParameter(format!("edge {edge} out of range")));
    }
    let mut out = env.clone();
    out.zeta[edge] += h;
    out.a[edge] = env.map.value(out.zeta[edge]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(v: &[f64]) -> (f64, f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        let kurt = v.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n / (var * var);
        (m, var, kurt)
    }

    #[test]
    fn sampling_is_deterministic() {
        let g = TorusGeometry::new(3, 5).unwrap();
        let map = CoefficientMap::default();
        let a = sample_environment(&g, &map, 7, 2).unwrap();
        let b = sample_environment(&g, &map, 7, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.zeta, sample_environment(&g, &map, 7, 3).unwrap().zeta);
    }

    #[test]
    fn gaussian_moments_on_a_million_edges() {
        // 3 sigma bands: mean 3/sqrt(n) = 3e-3, variance 3 sqrt(2/n) = 4.2e-3.
        let g = TorusGeometry::new(3, 70).unwrap();
        let env = sample_environment(&g, &CoefficientMap::default(), 11, 0).unwrap();
        assert!(env.zeta.len() >= 1_000_000);
        let (m, var, kurt) = moments(env.zeta.values());
        assert!(m.abs() < 5e-3, "mean {m}");
        assert!((var - 1.0).abs() < 1e-2, "variance {var}");
        // sd of the sample kurtosis is about sqrt(24 / n) = 4.9e-3
        assert!((kurt - 3.0).abs() < 0.03, "kurtosis {kurt}");
        assert!(env.a.values().iter().all(|&a| (0.5..=1.5).contains(&a)));
    }

    #[test]
    fn default_map_midpoint() {
        let map = CoefficientMap::default();
        assert_eq!(map.value(0.0), 1.0);
        let map = CoefficientMap::tanh(0.2, 3.0, 2.0).unwrap();
        assert!((map.value(0.0) - 1.6).abs() < 1e-15);
    }

    #[test]
    fn map_invariants_on_dense_grid() {
        let map = CoefficientMap::tanh(0.3, 2.1, 0.7).unwrap();
        let (lo, hi) = map.range();
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=20_000 {
            let t = -10.0 + 20.0 * k as f64 / 20_000.0;
            let a = map.value(t);
            assert!(a >= lo && a <= hi);
            assert!(a >= prev);
            prev = a;
            assert!(map.derivative(t) >= 0.0 && map.derivative(t) <= map.sup_derivative() + 1e-15);
            assert!(map.second_derivative(t).abs() <= map.sup_second_derivative() + 1e-15);
        }
        // Derivatives agree with central differences.
        for t in [-1.3, 0.0, 0.4, 2.2] {
            let h = 1e-5;
            let fd1 = (map.value(t + h) - map.value(t - h)) / (2.0 * h);
            let fd2 = (map.derivative(t + h) - map.derivative(t - h)) / (2.0 * h);
            assert!((fd1 - map.derivative(t)).abs() < 1e-9);
            assert!((fd2 - map.second_derivative(t)).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_bad_maps() {
        assert!(CoefficientMap::tanh(0.0, 1.0, 1.0).is_err());
        assert!(CoefficientMap::tanh(1.0, 1.0, 1.0).is_err());
        assert!(CoefficientMap::tanh(1.0, 2.0, 0.0).is_err());
        assert!(CoefficientMap::Constant { value: -1.0 }.validate().is_err());
    }

    #[test]
    fn ou_endpoints_and_covariance() {
        let g = TorusGeometry::new(3, 100).unwrap();
        let z = sample_environment(&g, &CoefficientMap::default(), 5, 0).unwrap().zeta;
        let zp = fresh_field(&g, 5, 0);
        let one = ou_interpolate(&OuCoupling::new(z.clone(), zp.clone(), 1.0).unwrap()).unwrap();
        assert_eq!(one, z);
        let zero = ou_interpolate(&OuCoupling::new(z.clone(), zp.clone(), 0.0).unwrap()).unwrap();
        assert_eq!(zero, zp);
        let mid = ou_interpolate(&OuCoupling::new(z.clone(), zp.clone(), 0.6).unwrap()).unwrap();
        let n = z.len() as f64;
        let cov = mid.dot(&z) / n;
        assert!((cov - 0.6).abs() < 1e-2, "cov {cov}");
        let (m, var, kurt) = moments(mid.values());
        assert!(m.abs() < 5e-3 && (var - 1.0).abs() < 1e-2);
        assert!((kurt - 3.0).abs() < 0.03, "kurtosis {kurt}");
        assert!(OuCoupling::new(z.clone(), zp.clone(), 1.5).is_err());
        assert!(OuCoupling::new(z, zp, -0.1).is_err());
    }

    #[test]
    fn distinct_samples_are_uncorrelated() {
        let g = TorusGeometry::new(3, 64).unwrap();
        let map = CoefficientMap::default();
        let a = sample_environment(&g, &map, 9, 0).unwrap().zeta;
        let b = sample_environment(&g, &map, 9, 1).unwrap().zeta;
        let n = a.len() as f64;
        // 3 / sqrt(n) band
        assert!((a.dot(&b) / n).abs() < 3.0 / n.sqrt());
    }

    #[test]
    fn perturbation_round_trip_and_taylor_bound() {
        let g = TorusGeometry::new(3, 4).unwrap();
        let map = CoefficientMap::default();
        let env = sample_environment(&g, &map, 1, 0).unwrap();
        assert_eq!(perturb_edge(&env, 5, 0.0).unwrap(), env);
        let h = 0.125;
        let there = perturb_edge(&env, 5, h).unwrap();
        assert_ne!(there, env);
        assert_eq!(there.zeta.values()[..5], env.zeta.values()[..5]);
        let back = perturb_edge(&there, 5, -h).unwrap();
        // exact for a power of two only when no rounding occurs in zeta + h
        if (env.zeta[5] + h) - h == env.zeta[5] {
            assert_eq!(back, env);
        }
        let t = env.zeta[5];
        for k in 3..=8 {
            let h = 2f64.powi(-k);
            let p = perturb_edge(&env, 5, h).unwrap();
            let taylor = (p.a[5] - env.a[5] - h * map.derivative(t)).abs();
            assert!(taylor <= 0.5 * h * h * map.sup_second_derivative() + 1e-16);
        }
        assert!(perturb_edge(&env, 5, f64::NAN).is_err());
    }
}
