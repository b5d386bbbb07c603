//! Ellipsoids, the sphere-to-boundary map and point-set diagnostics.

mod diagnostics;
mod sphere;

use std::sync::{Arc, OnceLock};

use faer::{Accum, Mat, MatMut, MatRef, Par};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, MatrixRepr, SpdMatrix, SymEigen, SYMMETRY_TOL};
use crate::nets::CubePointSet;
use crate::points::Points;

pub use diagnostics::{boundary_equidistribution_test, cover_distance_2d, equidistribution_test, riesz_energy};
pub use sphere::{map_cube_points, map_cube_to_sphere, polar_height, polar_heights, sample_uniform_sphere};

/// Unit-norm tolerance for sphere points.
pub const SPHERE_TOL: f64 = 1e-12;
/// Relative tolerance of the boundary residual `|(x-b)^T B (x-b) - b~| / b~`.
pub const BOUNDARY_TOL: f64 = 1e-9;
/// Input tolerance on `|x| - 1` for the sphere-to-boundary map.
pub const MAP_INPUT_TOL: f64 = 1e-9;

/// `S = { x : (x - b)^T B (x - b) <= b~ }` with `B` symmetric positive definite.
///
/// The eigendecomposition of `B` is computed once on construction and shared
/// between clones; dense square roots are formed lazily.
#[derive(Debug, Clone)]
pub struct EllipsoidConstraint {
    inner: Arc<Inner>,
}

#[derive(Debug)]
struct Inner {
    shape: SpdMatrix,
    center: Vec<f64>,
    level: f64,
    eig: SymEigen,
    inv_sqrt: OnceLock<Option<Mat<f64>>>,
    sqrt: OnceLock<Option<Mat<f64>>>,
}

impl EllipsoidConstraint {
    pub fn new(shape: SpdMatrix, center: Vec<f64>, level: f64) -> Result<Self> {
        let n = shape.dim();
        if n < 2 {
            return Err(Error::invalid("ellipsoids need n >= 2; intervals are not supported"));
        }
        if center.len() != n {
            return Err(Error::dims(format!("center has {} entries, B is {n}x{n}", center.len())));
        }
        if !(level > 0.0 && level.is_finite()) {
            return Err(Error::invalid(format!("b_tilde must be positive and finite, got {level}")));
        }
        if !shape.is_finite() || center.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("ellipsoid data must be finite"));
        }
        if shape.asymmetry() > SYMMETRY_TOL {
            return Err(Error::NotPositiveDefinite("B is not symmetric".into()));
        }
        let eig = shape.eigen()?;
        if eig.min() <= 0.0 {
            return Err(Error::NotPositiveDefinite(format!("smallest eigenvalue of B is {}", eig.min())));
        }
        Ok(EllipsoidConstraint {
            inner: Arc::new(Inner { shape, center, level, eig, inv_sqrt: OnceLock::new(), sqrt: OnceLock::new() }),
        })
    }

    /// Ball of radius `r` around `center`.
    pub fn ball(center: Vec<f64>, r: f64) -> Result<Self> {
        let n = center.len();
        EllipsoidConstraint::new(SpdMatrix::identity(n), center, r * r)
    }

    pub fn dim(&self) -> usize {
        self.inner.center.len()
    }

    pub fn shape(&self) -> &SpdMatrix {
        &self.inner.shape
    }

    pub fn center(&self) -> &[f64] {
        &self.inner.center
    }

    /// The right-hand side `b~`.
    pub fn level(&self) -> f64 {
        self.inner.level
    }

    pub fn sigma_min(&self) -> f64 {
        self.inner.eig.min()
    }

    pub fn sigma_max(&self) -> f64 {
        self.inner.eig.max()
    }

    pub fn condition_number(&self) -> f64 {
        self.sigma_max() / self.sigma_min()
    }

    /// `(x - b)^T B (x - b)`.
    pub fn value(&self, x: &[f64]) -> f64 {
        self.inner.shape.quad_form(&linalg::sub(x, &self.inner.center))
    }

    /// Membership with relative slack `1e-9 * b~`.
    pub fn contains(&self, x: &[f64]) -> bool {
        self.value(x) <= self.level() * (1.0 + BOUNDARY_TOL)
    }

    pub fn boundary_residual(&self, x: &[f64]) -> f64 {
        (self.value(x) - self.level()).abs()
    }

    fn power_matrix(&self, p: f64) -> Option<&Mat<f64>> {
        let cell = if p < 0.0 { &self.inner.inv_sqrt } else { &self.inner.sqrt };
        cell.get_or_init(|| self.inner.eig.power_matrix(p)).as_ref()
    }

    /// `psi(u) = sqrt(b~) B^(-1/2) u + b`.
    pub fn from_sphere(&self, u: &[f64]) -> Vec<f64> {
        let r = self.level().sqrt();
        let v = match self.power_matrix(-0.5) {
            Some(m) => linalg::mat_vec(m.as_ref(), u),
            None => self.inner.eig.apply_power(u, -0.5),
        };
        v.iter().zip(&self.inner.center).map(|(a, c)| r * a + c).collect()
    }

    /// `psi^-1(x) = B^(1/2) (x - b) / sqrt(b~)`; lands on the sphere for `x` on the boundary.
    pub fn to_sphere(&self, x: &[f64]) -> Vec<f64> {
        let d = linalg::sub(x, &self.inner.center);
        let r = 1.0 / self.level().sqrt();
        let v = match self.power_matrix(0.5) {
            Some(m) => linalg::mat_vec(m.as_ref(), &d),
            None => self.inner.eig.apply_power(&d, 0.5),
        };
        v.into_iter().map(|a| a * r).collect()
    }

    /// Applies `x -> scale * M x + shift` row-wise, `M = B^p` symmetric.
    fn transform_rows(&self, mut src: Vec<f64>, p: f64, pre_shift: Option<&[f64]>, scale: f64, post_shift: Option<&[f64]>) -> Vec<f64> {
        let n = self.dim();
        let count = src.len() / n;
        if let Some(s) = pre_shift {
            for row in src.chunks_exact_mut(n) {
                row.iter_mut().zip(s).for_each(|(v, c)| *v -= c);
            }
        }
        let mut out = match self.power_matrix(p) {
            Some(m) => {
                let mut flat = vec![0.0; count * n];
                let lhs = MatRef::from_row_major_slice(&src, count, n);
                let res = MatMut::from_row_major_slice_mut(&mut flat, count, n);
                // rows times symmetric M
                faer::linalg::matmul::matmul(res, Accum::Replace, lhs, m.as_ref(), scale, Par::Seq);
                flat
            }
            None => {
                let diag = self.inner.eig.power_diag(p);
                for row in src.chunks_exact_mut(n) {
                    row.iter_mut().zip(&diag).for_each(|(v, d)| *v *= scale * d);
                }
                src
            }
        };
        if let Some(s) = post_shift {
            for row in out.chunks_exact_mut(n) {
                row.iter_mut().zip(s).for_each(|(v, c)| *v += c);
            }
        }
        out
    }
}

impl PartialEq for EllipsoidConstraint {
    fn eq(&self, other: &Self) -> bool {
        if Arc::ptr_eq(&self.inner, &other.inner) {
            return true;
        }
        let (a, b) = (&self.inner.shape, &other.inner.shape);
        let n = a.dim();
        let same_shape = match (a, b) {
            (SpdMatrix::Diagonal(x), SpdMatrix::Diagonal(y)) => x == y,
            _ => b.dim() == n && (0..n).all(|i| (0..n).all(|j| a.get(i, j) == b.get(i, j))),
        };
        self.inner.level == other.inner.level && self.inner.center == other.inner.center && same_shape
    }
}

#[derive(Serialize, Deserialize)]
struct EllipsoidRepr {
    #[serde(rename = "B")]
    shape: MatrixRepr,
    b: Vec<f64>,
    b_tilde: f64,
}

impl Serialize for EllipsoidConstraint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        EllipsoidRepr { shape: MatrixRepr::from_spd(self.shape()), b: self.center().to_vec(), b_tilde: self.level() }
            .serialize(s)
    }
}

impl<'de> Deserialize<'de> for EllipsoidConstraint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = EllipsoidRepr::deserialize(d)?;
        let shape = r.shape.into_spd().map_err(serde::de::Error::custom)?;
        EllipsoidConstraint::new(shape, r.b, r.b_tilde).map_err(serde::de::Error::custom)
    }
}

/// Points on the unit sphere `S^(n-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpherePointSet {
    pub points: Points,
}

impl SpherePointSet {
    pub fn new(points: Points) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            let err = (linalg::norm2(p) - 1.0).abs();
            if err > SPHERE_TOL {
                return Err(Error::invalid(format!("point {i} has |x| - 1 = {err:e}")));
            }
        }
        Ok(SpherePointSet { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.dim()
    }
}

/// Points on the boundary of one ellipsoid, in generation order.
#[derive(Debug, Clone)]
pub struct BoundaryPointSet {
    pub points: Points,
    pub ellipsoid: EllipsoidConstraint,
}

impl BoundaryPointSet {
    pub fn new(points: Points, ellipsoid: EllipsoidConstraint) -> Result<Self> {
        if points.dim() != ellipsoid.dim() {
            return Err(Error::dims(format!("points have dimension {}, ellipsoid {}", points.dim(), ellipsoid.dim())));
        }
        let tol = BOUNDARY_TOL * ellipsoid.level();
        for (i, p) in points.iter().enumerate() {
            let r = ellipsoid.boundary_residual(p);
            if !(r <= tol) {
                return Err(Error::invalid(format!("point {i} is off the boundary (residual {r:e})")));
            }
        }
        Ok(BoundaryPointSet { points, ellipsoid })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Pulls the points back to the unit sphere through `psi^-1`.
    pub fn pull_back(&self) -> Result<SpherePointSet> {
        let e = &self.ellipsoid;
        let data = e.transform_rows(self.points.as_slice().to_vec(), 0.5, Some(e.center()), 1.0 / e.level().sqrt(), None);
        let mut pts = Points::new(e.dim(), data)?;
        // renormalize away the boundary tolerance
        let n = e.dim();
        let mut flat = pts.into_data();
        for row in flat.chunks_exact_mut(n) {
            let norm = linalg::norm2(row);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        pts = Points::new(n, flat)?;
        SpherePointSet::new(pts)
    }
}

/// `psi(x) = sqrt(b~) B^(-1/2) x + b` for a unit vector `x`.
pub fn map_sphere_to_ellipsoid(x: &[f64], e: &EllipsoidConstraint) -> Result<Vec<f64>> {
    if x.len() != e.dim() {
        return Err(Error::dims(format!("point has dimension {}, ellipsoid {}", x.len(), e.dim())));
    }
    let norm = linalg::norm2(x);
    if (norm - 1.0).abs() > MAP_INPUT_TOL {
        return Err(Error::invalid(format!("input is not a unit vector (|x| = {norm})")));
    }
    Ok(e.from_sphere(x))
}

/// Batch `psi` over a sphere point set.
pub fn map_sphere_points(sphere: &SpherePointSet, e: &EllipsoidConstraint) -> Result<BoundaryPointSet> {
    map_sphere_points_owned(sphere.clone(), e)
}

/// [`map_sphere_points`] reusing the storage of `sphere`.
pub fn map_sphere_points_owned(sphere: SpherePointSet, e: &EllipsoidConstraint) -> Result<BoundaryPointSet> {
    if sphere.dim() != e.dim() {
        return Err(Error::dims(format!("sphere points have dimension {}, ellipsoid {}", sphere.dim(), e.dim())));
    }
    let data = e.transform_rows(sphere.points.into_data(), -0.5, None, e.level().sqrt(), Some(e.center()));
    BoundaryPointSet::new(Points::new(e.dim(), data)?, e.clone())
}

/// Cube points to the boundary of `e` through `psi . Phi`, order preserved.
pub fn boundary_points(cube: &CubePointSet, e: &EllipsoidConstraint) -> Result<BoundaryPointSet> {
    if cube.dim() + 1 != e.dim() {
        return Err(Error::dims(format!(
            "cube dimension {} must be one less than the ellipsoid dimension {}",
            cube.dim(),
            e.dim()
        )));
    }
    map_sphere_points_owned(map_cube_points(cube)?, e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{generate_net, NetConfig};

    fn diag2(a: f64, b: f64) -> SpdMatrix {
        SpdMatrix::from_rows(&[vec![a, 0.0], vec![0.0, b]]).unwrap()
    }

    #[test]
    fn ellipsoid_validation() {
        assert!(EllipsoidConstraint::new(diag2(1.0, -1.0), vec![0.0, 0.0], 1.0).is_err());
        assert!(EllipsoidConstraint::new(diag2(1.0, 1.0), vec![0.0, 0.0], 0.0).is_err());
        assert!(EllipsoidConstraint::new(diag2(1.0, 1.0), vec![0.0], 1.0).is_err());
        assert!(EllipsoidConstraint::new(SpdMatrix::identity(1), vec![0.0], 1.0).is_err());
        let asym = SpdMatrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(EllipsoidConstraint::new(asym, vec![0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn sphere_to_ellipsoid_examples() {
        let unit = EllipsoidConstraint::ball(vec![0.0, 0.0], 1.0).unwrap();
        let x = [0.6, 0.8];
        assert_eq!(map_sphere_to_ellipsoid(&x, &unit).unwrap(), x.to_vec());

        let e = EllipsoidConstraint::new(diag2(4.0, 1.0), vec![0.0, 0.0], 4.0).unwrap();
        let y = map_sphere_to_ellipsoid(&[1.0, 0.0], &e).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-15 && y[1].abs() < 1e-15);
        assert!(e.boundary_residual(&y) < 1e-14);

        let shifted = EllipsoidConstraint::ball(vec![5.0, 5.0], 1.0).unwrap();
        assert_eq!(map_sphere_to_ellipsoid(&[0.0, 1.0], &shifted).unwrap(), vec![5.0, 6.0]);

        assert!(map_sphere_to_ellipsoid(&[1.0, 1.0], &unit).is_err());
    }

    #[test]
    fn boundary_points_on_circle_are_roots_of_unity() {
        let unit = EllipsoidConstraint::ball(vec![0.0, 0.0], 1.0).unwrap();
        for m in [1u32, 3, 6, 10] {
            let cube = generate_net(&NetConfig::sobol(m, 1).unwrap()).unwrap();
            let bps = boundary_points(&cube, &unit).unwrap();
            let n = 1usize << m;
            let mut hit = vec![false; n];
            for p in bps.points.iter() {
                let k = ((p[1].atan2(p[0]) / (2.0 * std::f64::consts::PI) * n as f64).round() as i64).rem_euclid(n as i64);
                let ang = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                assert!((p[0] - ang.cos()).abs() < 1e-12 && (p[1] - ang.sin()).abs() < 1e-12);
                hit[k as usize] = true;
            }
            assert!(hit.iter().all(|h| *h));
        }
    }

    #[test]
    fn single_origin_point_on_unit_circle() {
        let unit = EllipsoidConstraint::ball(vec![0.0, 0.0], 1.0).unwrap();
        let cube = generate_net(&NetConfig::new(2, 0, 1, 0).unwrap()).unwrap();
        let bps = boundary_points(&cube, &unit).unwrap();
        assert_eq!(bps.points.point(0), &[1.0, 0.0]);
    }

    #[test]
    fn boundary_points_dimension_mismatch() {
        let unit = EllipsoidConstraint::ball(vec![0.0, 0.0, 0.0], 1.0).unwrap();
        let cube = generate_net(&NetConfig::sobol(3, 1).unwrap()).unwrap();
        assert!(matches!(boundary_points(&cube, &unit), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn dense_and_diagonal_shapes_agree() {
        let dense = EllipsoidConstraint::new(diag2(3.0, 0.5), vec![1.0, -2.0], 2.0).unwrap();
        let diag = EllipsoidConstraint::new(SpdMatrix::Diagonal(vec![3.0, 0.5]), vec![1.0, -2.0], 2.0).unwrap();
        let cube = generate_net(&NetConfig::sobol(6, 1).unwrap()).unwrap();
        let a = boundary_points(&cube, &dense).unwrap();
        let b = boundary_points(&cube, &diag).unwrap();
        for (p, q) in a.points.iter().zip(b.points.iter()) {
            assert!((p[0] - q[0]).abs() < 1e-14 && (p[1] - q[1]).abs() < 1e-14);
        }
        let back = a.pull_back().unwrap();
        for (u, y) in back.points.iter().zip(cube.points.iter()) {
            let ang = 2.0 * std::f64::consts::PI * y[0];
            assert!((u[0] - ang.cos()).abs() < 1e-13 && (u[1] - ang.sin()).abs() < 1e-13);
        }
    }

    #[test]
    fn json_round_trip() {
        let e = EllipsoidConstraint::new(diag2(4.0, 1.0), vec![0.5, 0.0], 4.0).unwrap();
        let s = serde_json::to_string(&e).unwrap();
        assert!(s.contains("\"B\"") && s.contains("b_tilde"));
        let back: EllipsoidConstraint = serde_json::from_str(&s).unwrap();
        assert_eq!(back, e);
        let bad = r#"{"B": [[1, 0], [0, -1]], "b": [0, 0], "b_tilde": 1}"#;
        assert!(serde_json::from_str::<EllipsoidConstraint>(bad).is_err());
    }
}
