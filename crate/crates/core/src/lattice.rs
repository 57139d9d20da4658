//! Discrete geometry and calculus on the periodic torus `(Z/LZ)^d`.
//!
//! Sites are stored in row-major order (the last axis varies fastest).
//! An edge is the pair (base site, direction) and edge `i` of site `x`
//! links `x` to `x + e_i`; edges are indexed site-major, direction-minor:
//! `edge = site * d + i`.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INDEX_CONVENTION: &str = "row-major sites (last axis fastest); edge = site * dim + direction";

#[derive(Clone)]
pub struct TorusGeometry {
    dim: usize,
    side: usize,
    forward: Arc<[usize]>,
    backward: Arc<[usize]>,
}

impl TorusGeometry {
    pub fn new(dim: usize, side: usize) -> Result<Self> {
        if dim < 1 {
            return Err(Error::InvalidGeometry("dimension must be at least 1".into()));
        }
        if side < 2 {
            return Err(Error::InvalidGeometry(format!("side {side} must be at least 2")));
        }
        let sites = side
            .checked_pow(dim as u32)
            .filter(|&n| n <= 1 << 28)
            .ok_or_else(|| Error::InvalidGeometry(format!("{side}^{dim} sites is too large")))?;
        let mut forward = vec![0; sites * dim];
        let mut backward = vec![0; sites * dim];
        for x in 0..sites {
            for i in 0..dim {
                let stride = side.pow((dim - 1 - i) as u32);
                let c = (x / stride) % side;
                forward[x * dim + i] = if c + 1 == side { x + stride - side * stride } else { x + stride };
                backward[x * dim + i] = if c == 0 { x + (side - 1) * stride } else { x - stride };
            }
        }
        Ok(Self {
            dim,
            side,
            forward: forward.into(),
            backward: backward.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn site_count(&self) -> usize {
        self.forward.len() / self.dim
    }

    pub fn edge_count(&self) -> usize {
        self.forward.len()
    }

    /// `x + e_i` with periodic wraparound.
    #[inline]
    pub fn neighbor(&self, site: usize, direction: usize) -> usize {
        self.forward[site * self.dim + direction]
    }

    /// `x - e_i` with periodic wraparound.
    #[inline]
    pub fn back_neighbor(&self, site: usize, direction: usize) -> usize {
        self.backward[site * self.dim + direction]
    }

    #[inline]
    pub fn edge(&self, base: usize, direction: usize) -> usize {
        base * self.dim + direction
    }

    /// Base site and direction of an edge.
    #[inline]
    pub fn edge_parts(&self, edge: usize) -> (usize, usize) {
        (edge / self.dim, edge % self.dim)
    }

    /// Endpoint `base + e_i` of an edge.
    #[inline]
    pub fn edge_end(&self, edge: usize) -> usize {
        self.forward[edge]
    }

    pub fn coords(&self, site: usize) -> Vec<usize> {
        let mut c = vec![0; self.dim];
        let mut rest = site;
        for i in (0..self.dim).rev() {
            c[i] = rest % self.side;
            rest /= self.side;
        }
        c
    }

    /// Site index of integer coordinates, reduced modulo the side.
    pub fn site(&self, coords: &[i64]) -> usize {
        assert_eq!(coords.len(), self.dim, "coordinate length");
        let l = self.side as i64;
        coords
            .iter()
            .fold(0usize, |acc, &c| acc * self.side + c.rem_euclid(l) as usize)
    }

    /// Shortest periodic representative of a site, each component in `(-L/2, L/2]`.
    pub fn centered_coords(&self, site: usize) -> Vec<i64> {
        let l = self.side as i64;
        self.coords(site)
            .into_iter()
            .map(|c| {
                let c = c as i64;
                if c > l / 2 {
                    c - l
                } else {
                    c
                }
            })
            .collect()
    }

    /// Site obtained by translating `site` by `shift`.
    pub fn translate(&self, site: usize, shift: &[i64]) -> usize {
        let c: Vec<i64> = self
            .coords(site)
            .iter()
            .zip(shift)
            .map(|(&c, &s)| c as i64 + s)
            .collect();
        self.site(&c)
    }

    pub fn check_same(&self, other: &TorusGeometry) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GeometryMismatch {
                expected: self.to_string(),
                found: other.to_string(),
            })
        }
    }
}

impl PartialEq for TorusGeometry {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.side == other.side
    }
}

impl Eq for TorusGeometry {}

impl fmt::Debug for TorusGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TorusGeometry")
            .field("dim", &self.dim)
            .field("side", &self.side)
            .finish()
    }
}

impl fmt::Display for TorusGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}^{}", self.side, self.dim)
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// Real values on the sites of the torus.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    geometry: TorusGeometry,
    values: Vec<f64>,
}

/// Real values on the edges of the torus.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeField {
    geometry: TorusGeometry,
    values: Vec<f64>,
}

macro_rules! field_common {
    ($ty:ident, $count:ident) => {
        impl $ty {
            pub fn new(geometry: &TorusGeometry, values: Vec<f64>) -> Result<Self> {
                if values.len() != geometry.$count() {
                    return Err(Error::LengthMismatch {
                        expected: geometry.$count(),
                        found: values.len(),
                    });
                }
                check_finite(&values)?;
                Ok(Self {
                    geometry: geometry.clone(),
                    values,
                })
            }

            pub fn zeros(geometry: &TorusGeometry) -> Self {
                Self::constant(geometry, 0.0)
            }

            pub fn constant(geometry: &TorusGeometry, value: f64) -> Self {
                Self {
                    geometry: geometry.clone(),
                    values: vec![value; geometry.$count()],
                }
            }

            pub fn from_fn(geometry: &TorusGeometry, f: impl FnMut(usize) -> f64) -> Self {
                Self {
                    geometry: geometry.clone(),
                    values: (0..geometry.$count()).map(f).collect(),
                }
            }

            pub fn geometry(&self) -> &TorusGeometry {
                &self.geometry
            }

            pub fn values(&self) -> &[f64] {
                &self.values
            }

            pub fn values_mut(&mut self) -> &mut [f64] {
                &mut self.values
            }

            pub fn into_values(self) -> Vec<f64> {
                self.values
            }

            pub fn len(&self) -> usize {
                self.values.len()
            }

            pub fn is_empty(&self) -> bool {
                self.values.is_empty()
            }

            pub fn dot(&self, other: &Self) -> f64 {
                self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
            }

            pub fn sum(&self) -> f64 {
                self.values.iter().sum()
            }

            pub fn mean(&self) -> f64 {
                self.sum() / self.values.len() as f64
            }

            pub fn max_abs(&self) -> f64 {
                self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
            }

            pub fn scaled(&self, c: f64) -> Self {
                self.map(|v| v * c)
            }

            pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
                Self {
                    geometry: self.geometry.clone(),
                    values: self.values.iter().map(|&v| f(v)).collect(),
                }
            }

            /// `self + c * other`.
            pub fn add_scaled(&self, c: f64, other: &Self) -> Self {
                Self {
                    geometry: self.geometry.clone(),
                    values: self.values.iter().zip(&other.values).map(|(a, b)| a + c * b).collect(),
                }
            }

            pub fn max_abs_diff(&self, other: &Self) -> f64 {
                self.values
                    .iter()
                    .zip(&other.values)
                    .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
            }
        }

        impl std::ops::Index<usize> for $ty {
            type Output = f64;
            fn index(&self, i: usize) -> &f64 {
                &self.values[i]
            }
        }

        impl std::ops::IndexMut<usize> for $ty {
            fn index_mut(&mut self, i: usize) -> &mut f64 {
                &mut self.values[i]
            }
        }
    };
}

field_common!(ScalarField, site_count);
field_common!(EdgeField, edge_count);

impl ScalarField {
    pub fn indicator(geometry: &TorusGeometry, site: usize) -> Self {
        let mut f = Self::zeros(geometry);
        f.values[site] = 1.0;
        f
    }

    /// Subtracts the torus mean in place.
    pub fn center(&mut self) {
        let m = self.mean();
        self.values.iter_mut().for_each(|v| *v -= m);
    }

    pub fn centered(&self) -> Self {
        let mut c = self.clone();
        c.center();
        c
    }
}

impl EdgeField {
    pub fn at(&self, base: usize, direction: usize) -> f64 {
        self.values[self.geometry.edge(base, direction)]
    }

    /// Entrywise product.
    pub fn hadamard(&self, other: &Self) -> Self {
        Self {
            geometry: self.geometry.clone(),
            values: self.values.iter().zip(&other.values).map(|(a, b)| a * b).collect(),
        }
    }

    /// The constant vector `xi` read as an edge field: `xi(e) = xi_i` on edges of direction `i`.
    pub fn from_vector(geometry: &TorusGeometry, xi: &[f64]) -> Result<Self> {
        if xi.len() != geometry.dim() {
            return Err(Error::LengthMismatch {
                expected: geometry.dim(),
                found: xi.len(),
            });
        }
        Ok(Self::from_fn(geometry, |e| xi[e % geometry.dim()]))
    }
}

/// `grad f(e) = f(end) - f(base)`.
pub fn gradient(f: &ScalarField) -> EdgeField {
    let g = f.geometry();
    let d = g.dim();
    let v = f.values();
    let mut out = vec![0.0; g.edge_count()];
    for x in 0..g.site_count() {
        for i in 0..d {
            out[x * d + i] = v[g.neighbor(x, i)] - v[x];
        }
    }
    EdgeField {
        geometry: g.clone(),
        values: out,
    }
}

/// Adjoint of [`gradient`]: `(div F)(x) = sum_i F(x - e_i, x) - F(x, x + e_i)`.
pub fn divergence(field: &EdgeField) -> ScalarField {
    let g = field.geometry();
    let d = g.dim();
    let v = field.values();
    let mut out = vec![0.0; g.site_count()];
    for x in 0..g.site_count() {
        let mut acc = 0.0;
        for i in 0..d {
            acc += v[g.back_neighbor(x, i) * d + i] - v[x * d + i];
        }
        out[x] = acc;
    }
    ScalarField {
        geometry: g.clone(),
        values: out,
    }
}

pub(crate) fn check_positive(a: &EdgeField) -> Result<()> {
    match a.values().iter().position(|&v| !(v > 0.0)) {
        Some(edge) => Err(Error::NonPositiveCoefficient {
            edge,
            value: a.values()[edge],
        }),
        None => Ok(()),
    }
}

/// `mu * u + div(a * grad u)`, with `a` strictly positive.
pub fn apply_elliptic(mu: f64, a: &EdgeField, u: &ScalarField) -> Result<ScalarField> {
    a.geometry().check_same(u.geometry())?;
    check_positive(a)?;
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(Error::InvalidParameter(format!("mass {mu} must be finite and non-negative")));
    }
    let mut out = vec![0.0; u.len()];
    apply_into(mu, a.values(), u.values(), a.geometry(), &mut out);
    Ok(ScalarField {
        geometry: a.geometry().clone(),
        values: out,
    })
}

/// Unchecked operator application used inside the solvers.
pub(crate) fn apply_into(mu: f64, a: &[f64], u: &[f64], g: &TorusGeometry, out: &mut [f64]) {
    let d = g.dim();
    for (o, &ux) in out.iter_mut().zip(u) {
        *o = mu * ux;
    }
    for x in 0..g.site_count() {
        let ux = u[x];
        for i in 0..d {
            let y = g.neighbor(x, i);
            let flux = a[x * d + i] * (u[y] - ux);
            out[x] -= flux;
            out[y] += flux;
        }
    }
}

/// Diagonal of the operator `mu + div(a grad)`.
pub(crate) fn operator_diagonal(mu: f64, a: &[f64], g: &TorusGeometry) -> Vec<f64> {
    let d = g.dim();
    let mut diag = vec![mu; g.site_count()];
    for x in 0..g.site_count() {
        for i in 0..d {
            let w = a[x * d + i];
            diag[x] += w;
            diag[g.neighbor(x, i)] += w;
        }
    }
    diag
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Site,
    Edge,
}

/// JSON header accompanying a flat little-endian `f64` dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub dim: usize,
    pub side: usize,
    pub kind: FieldKind,
    pub index_convention: String,
}

fn write_raw(stem: &Path, header: &FieldHeader, values: &[f64]) -> Result<()> {
    let mut bin = fs::File::create(stem.with_extension("bin"))?;
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    bin.write_all(&buf)?;
    fs::write(stem.with_extension("json"), serde_json::to_string_pretty(header)?)?;
    Ok(())
}

fn read_raw(stem: &Path, kind: FieldKind) -> Result<(TorusGeometry, Vec<f64>)> {
    let header: FieldHeader = serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
    if header.kind != kind {
        return Err(Error::InvalidParameter(format!(
            "field kind {:?} does not match requested {:?}",
            header.kind, kind
        )));
    }
    if header.index_convention != INDEX_CONVENTION {
        return Err(Error::InvalidParameter(format!(
            "unknown index convention `{}`",
            header.index_convention
        )));
    }
    let geometry = TorusGeometry::new(header.dim, header.side)?;
    let mut bytes = Vec::new();
    fs::File::open(stem.with_extension("bin"))?.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::InvalidParameter("binary payload is not a whole number of f64".into()));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((geometry, values))
}

impl ScalarField {
    /// Writes `<stem>.bin` and `<stem>.json`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        let g = self.geometry();
        let header = FieldHeader {
            dim: g.dim(),
            side: g.side(),
            kind: FieldKind::Site,
            index_convention: INDEX_CONVENTION.into(),
        };
        write_raw(stem, &header, self.values())
    }

    pub fn read(stem: &Path) -> Result<Self> {
        let (g, v) = read_raw(stem, FieldKind::Site)?;
        Self::new(&g, v)
    }
}

impl EdgeField {
    pub fn write(&self, stem: &Path) -> Result<()> {
        let g = self.geometry();
        let header = FieldHeader {
            dim: g.dim(),
            side: g.side(),
            kind: FieldKind::Edge,
            index_convention: INDEX_CONVENTION.into(),
        };
        write_raw(stem, &header, self.values())
    }

    pub fn read(stem: &Path) -> Result<Self> {
        let (g, v) = read_raw(stem, FieldKind::Edge)?;
        Self::new(&g, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect()
    }

    #[test]
    fn gradient_of_constant_vanishes() {
        let g = TorusGeometry::new(3, 4).unwrap();
        let f = ScalarField::constant(&g, 2.5);
        assert!(gradient(&f).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_of_indicator_is_local() {
        let g = TorusGeometry::new(3, 4).unwrap();
        let grad = gradient(&ScalarField::indicator(&g, 0));
        for e in 0..g.edge_count() {
            let (base, i) = g.edge_parts(e);
            let expected = if g.neighbor(base, i) == 0 {
                1.0
            } else if base == 0 {
                -1.0
            } else {
                0.0
            };
            assert_eq!(grad[e], expected, "edge {e}");
        }
        assert_eq!(grad.values().iter().filter(|&&v| v == 1.0).count(), 3);
        assert_eq!(grad.values().iter().filter(|&&v| v == -1.0).count(), 3);
    }

    #[test]
    fn gradient_matches_index_arithmetic() {
        let g = TorusGeometry::new(3, 4).unwrap();
        let f = ScalarField::new(&g, pseudo_random(g.site_count(), 3)).unwrap();
        let grad = gradient(&f);
        for x0 in 0..4i64 {
            for x1 in 0..4i64 {
                for x2 in 0..4i64 {
                    let base = [x0, x1, x2];
                    let site = ((x0 * 4 + x1) * 4 + x2) as usize;
                    for i in 0..3 {
                        let mut end = base;
                        end[i] = (end[i] + 1) % 4;
                        let end_site = ((end[0] * 4 + end[1]) * 4 + end[2]) as usize;
                        assert_eq!(grad.at(site, i), f[end_site] - f[site]);
                    }
                }
            }
        }
    }

    #[test]
    fn divergence_of_zero_is_zero() {
        let g = TorusGeometry::new(3, 4).unwrap();
        assert!(divergence(&EdgeField::zeros(&g)).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn laplacian_stencil() {
        let g = TorusGeometry::new(3, 5).unwrap();
        let lap = divergence(&gradient(&ScalarField::indicator(&g, 0)));
        assert_eq!(lap[0], 6.0);
        for i in 0..3 {
            assert_eq!(lap[g.neighbor(0, i)], -1.0);
            assert_eq!(lap[g.back_neighbor(0, i)], -1.0);
        }
        assert_eq!(lap.values().iter().filter(|&&v| v != 0.0).count(), 7);

        let a = EdgeField::constant(&g, 1.0);
        let out = apply_elliptic(0.0, &a, &ScalarField::indicator(&g, 0)).unwrap();
        assert_eq!(out, lap);
    }

    #[test]
    fn mass_term_is_additive() {
        let g = TorusGeometry::new(3, 4).unwrap();
        let u = ScalarField::new(&g, pseudo_random(g.site_count(), 9)).unwrap();
        let a = EdgeField::constant(&g, 1.0);
        let with_mass = apply_elliptic(1.0, &a, &u).unwrap();
        let lap = divergence(&gradient(&u));
        assert!(with_mass.add_scaled(-1.0, &lap).max_abs_diff(&u) < 1e-14);
    }

    #[test]
    fn rejects_non_positive_coefficients() {
        let g = TorusGeometry::new(3, 3).unwrap();
        let mut a = EdgeField::constant(&g, 1.0);
        a[7] = 0.0;
        let err = apply_elliptic(0.0, &a, &ScalarField::zeros(&g)).unwrap_err();
        assert!(matches!(err, Error::NonPositiveCoefficient { edge: 7, .. }));
    }

    #[test]
    fn rejects_non_finite_and_wrong_length() {
        let g = TorusGeometry::new(2, 3).unwrap();
        assert!(matches!(
            ScalarField::new(&g, vec![0.0; 8]),
            Err(Error::LengthMismatch { expected: 9, found: 8 })
        ));
        let mut v = vec![0.0; 9];
        v[4] = f64::NAN;
        assert!(matches!(ScalarField::new(&g, v), Err(Error::NonFinite { index: 4 })));
    }

    #[test]
    fn operator_is_symmetric_against_dense_assembly() {
        let g = TorusGeometry::new(3, 4).unwrap();
        let n = g.site_count();
        let a = EdgeField::new(&g, pseudo_random(g.edge_count(), 5).iter().map(|v| 1.0 + v).collect())
            .unwrap();
        // Dense matrix from applying the operator to unit vectors.
        let cols: Vec<ScalarField> = (0..n)
            .map(|j| apply_elliptic(0.3, &a, &ScalarField::indicator(&g, j)).unwrap())
            .collect();
        for i in 0..n {
            for j in 0..n {
                assert!((cols[j][i] - cols[i][j]).abs() < 1e-14);
            }
        }
        let u = ScalarField::new(&g, pseudo_random(n, 11)).unwrap();
        let v = ScalarField::new(&g, pseudo_random(n, 12)).unwrap();
        let lhs = apply_elliptic(0.3, &a, &u).unwrap().dot(&v);
        let rhs = u.dot(&apply_elliptic(0.3, &a, &v).unwrap());
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn field_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = TorusGeometry::new(3, 3).unwrap();
        let f = EdgeField::new(&g, pseudo_random(g.edge_count(), 1)).unwrap();
        let stem = dir.path().join("zeta");
        f.write(&stem).unwrap();
        assert_eq!(EdgeField::read(&stem).unwrap(), f);
        assert!(ScalarField::read(&stem).is_err());
        let header: FieldHeader =
            serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json")).unwrap()).unwrap();
        assert_eq!(header.kind, FieldKind::Edge);
        assert_eq!(std::fs::metadata(stem.with_extension("bin")).unwrap().len(), 81 * 8);
    }

    fn geometry_strategy() -> impl Strategy<Value = TorusGeometry> {
        (2usize..=4, 2usize..=5).prop_map(|(d, l)| TorusGeometry::new(d, l).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn adjointness(g in geometry_strategy(), seed in any::<u64>()) {
            let f = EdgeField::new(&g, pseudo_random(g.edge_count(), seed)).unwrap();
            let u = ScalarField::new(&g, pseudo_random(g.site_count(), seed ^ 1)).unwrap();
            let lhs = divergence(&f).dot(&u);
            let rhs = f.dot(&gradient(&u));
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (lhs.abs() + rhs.abs()).max(1e-300) + 1e-14);
        }

        #[test]
        fn operator_properties(g in geometry_strategy(), seed in any::<u64>(), mu in 0.0f64..2.0) {
            let a = EdgeField::new(&g, pseudo_random(g.edge_count(), seed).iter().map(|v| 1.0 + v).collect()).unwrap();
            let u = ScalarField::new(&g, pseudo_random(g.site_count(), seed ^ 7)).unwrap();
            // Constants are annihilated without mass.
            let c = apply_elliptic(0.0, &a, &ScalarField::constant(&g, 3.0)).unwrap();
            prop_assert!(c.values().iter().all(|&v| v == 0.0));
            // Zero row sums.
            let out0 = apply_elliptic(0.0, &a, &u).unwrap();
            prop_assert!(out0.sum().abs() < 1e-12 * u.len() as f64);
            // Coercivity.
            let out = apply_elliptic(mu, &a, &u).unwrap();
            prop_assert!(u.dot(&out) >= mu * u.dot(&u) - 1e-12);
        }
    }
}
