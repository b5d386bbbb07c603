//! QCQP instances and their tangent-plane QP relaxations.
//!
//! Each boundary point `x_j` of `S = { (x-b)^T B (x-b) <= b~ }` contributes the
//! half-space `(x-b)^T B (x_j-b) <= b~`, written as `g_j^T x <= h_j` with
//! `g_j = B (x_j - b)` and `h_j = b~ + g_j^T b`. Rows are kept unnormalized so
//! that `g_j^T x_j = h_j` holds up to the boundary residual of `x_j`.

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{map_cube_points, map_sphere_points_owned, BoundaryPointSet, EllipsoidConstraint};
use crate::linalg::{self, MatrixRepr, RowMatrix, SpdMatrix, SYMMETRY_TOL};
use crate::nets::{generate_net_block, stream_rng, NetConfig};

/// Largest per-ellipsoid point count the default rule will pick.
pub const MAX_DEFAULT_POINTS: usize = 1 << 20;

/// Elementwise box `lower <= x <= upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::dims(format!("l has {} entries, u has {}", lower.len(), upper.len())));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !l.is_finite() || !u.is_finite() {
                return Err(Error::invalid(format!("box bound {i} is not finite")));
            }
            if l > u {
                return Err(Error::invalid(format!("box bound {i}: l = {l} > u = {u}")));
            }
        }
        Ok(Bounds { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| l <= v && v <= u)
    }

    /// Largest violation `max(l - x, x - u)_+`.
    pub fn violation(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .fold(0.0, |m, (v, (l, u))| m.max(l - v).max(v - u))
    }
}

/// `min (x-a)^T A (x-a)` subject to `Cx = c`, `x` in every ellipsoid, and an optional box.
#[derive(Debug, Clone)]
pub struct QcqpProblem {
    objective: SpdMatrix,
    center: Vec<f64>,
    eq_matrix: RowMatrix,
    eq_rhs: Vec<f64>,
    ellipsoids: Vec<EllipsoidConstraint>,
    bounds: Option<Bounds>,
}

impl QcqpProblem {
    pub fn new(
        objective: SpdMatrix,
        center: Vec<f64>,
        eq_matrix: RowMatrix,
        eq_rhs: Vec<f64>,
        ellipsoids: Vec<EllipsoidConstraint>,
        bounds: Option<Bounds>,
    ) -> Result<Self> {
        let n = objective.dim();
        if n == 0 {
            return Err(Error::invalid("problem dimension must be positive"));
        }
        if center.len() != n {
            return Err(Error::dims(format!("a has {} entries, A is {n}x{n}", center.len())));
        }
        if !objective.is_finite() || center.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("objective data must be finite"));
        }
        if objective.asymmetry() > SYMMETRY_TOL {
            return Err(Error::NotPositiveDefinite("A is not symmetric".into()));
        }
        if !objective.is_positive_definite() {
            return Err(Error::NotPositiveDefinite("A".into()));
        }
        check_equalities(n, &eq_matrix, &eq_rhs)?;
        for (i, e) in ellipsoids.iter().enumerate() {
            if e.dim() != n {
                return Err(Error::dims(format!("ellipsoid {i} has dimension {}, problem {n}", e.dim())));
            }
        }
        if let Some(b) = &bounds {
            if b.dim() != n {
                return Err(Error::dims(format!("box has dimension {}, problem {n}", b.dim())));
            }
        }
        Ok(QcqpProblem { objective, center, eq_matrix, eq_rhs, ellipsoids, bounds })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// The matrix `A`.
    pub fn objective(&self) -> &SpdMatrix {
        &self.objective
    }

    /// The objective center `a`.
    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn eq_matrix(&self) -> &RowMatrix {
        &self.eq_matrix
    }

    pub fn eq_rhs(&self) -> &[f64] {
        &self.eq_rhs
    }

    pub fn num_equalities(&self) -> usize {
        self.eq_rhs.len()
    }

    pub fn ellipsoids(&self) -> &[EllipsoidConstraint] {
        &self.ellipsoids
    }

    pub fn bounds(&self) -> Option<&Bounds> {
        self.bounds.as_ref()
    }

    /// The same problem with the box dropped.
    pub fn without_bounds(&self) -> QcqpProblem {
        QcqpProblem { bounds: None, ..self.clone() }
    }

    /// `f(x) = (x-a)^T A (x-a)`.
    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.quad_form(&linalg::sub(x, &self.center))
    }

    /// `max |Cx - c|`.
    pub fn equality_residual(&self, x: &[f64]) -> f64 {
        let r = self.eq_matrix.mul_vec(x);
        r.iter().zip(&self.eq_rhs).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let repr: QcqpRepr = serde_json::from_str(text)?;
        repr.into_problem()
    }
}

fn check_equalities(n: usize, c_mat: &RowMatrix, c: &[f64]) -> Result<()> {
    let p = c.len();
    if c_mat.nrows() != p {
        return Err(Error::dims(format!("C has {} rows, c has {p} entries", c_mat.nrows())));
    }
    if p > 0 && c_mat.ncols() != n {
        return Err(Error::dims(format!("C has {} columns, problem dimension is {n}", c_mat.ncols())));
    }
    if p > n {
        return Err(Error::invalid(format!("{p} equalities exceed the dimension {n}")));
    }
    if c_mat.as_slice().iter().chain(c).any(|v| !v.is_finite()) {
        return Err(Error::invalid("equality data must be finite"));
    }
    if p > 0 && linalg::rank(&c_mat.to_mat(), 1e-10)? < p {
        return Err(Error::invalid("C does not have full row rank"));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct QcqpRepr {
    #[serde(rename = "A")]
    objective: MatrixRepr,
    a: Vec<f64>,
    #[serde(rename = "C", default)]
    eq_matrix: Vec<Vec<f64>>,
    #[serde(default)]
    c: Vec<f64>,
    #[serde(default)]
    ellipsoids: Vec<EllipsoidConstraint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    l: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    u: Option<Vec<f64>>,
}

impl QcqpRepr {
    fn into_problem(self) -> Result<QcqpProblem> {
        let n = self.a.len();
        let objective = self.objective.into_spd()?;
        let eq = if self.eq_matrix.is_empty() { RowMatrix::empty(n) } else { RowMatrix::from_rows(&self.eq_matrix, n)? };
        let bounds = match (self.l, self.u) {
            (None, None) => None,
            (Some(l), Some(u)) => Some(Bounds::new(l, u)?),
            _ => return Err(Error::invalid("l and u must be given together")),
        };
        QcqpProblem::new(objective, self.a, eq, self.c, self.ellipsoids, bounds)
    }
}

impl Serialize for QcqpProblem {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        QcqpRepr {
            objective: MatrixRepr::from_spd(&self.objective),
            a: self.center.clone(),
            eq_matrix: self.eq_matrix.to_rows(),
            c: self.eq_rhs.clone(),
            ellipsoids: self.ellipsoids.clone(),
            l: self.bounds.as_ref().map(|b| b.lower.clone()),
            u: self.bounds.as_ref().map(|b| b.upper.clone()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for QcqpProblem {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        QcqpRepr::deserialize(d)?.into_problem().map_err(serde::de::Error::custom)
    }
}

/// `min (x-a)^T A (x-a)` subject to `Gx <= h`, `Cx = c` and an optional box.
///
/// Box rows are held as bounds rather than materialized; they count as the
/// `2n` rows `x <= u`, `-x <= -l` after the tangent rows.
#[derive(Debug, Clone)]
pub struct QpProblem {
    objective: SpdMatrix,
    center: Vec<f64>,
    g: RowMatrix,
    h: Vec<f64>,
    eq_matrix: RowMatrix,
    eq_rhs: Vec<f64>,
    bounds: Option<Bounds>,
    blocks: Vec<Range<usize>>,
}

impl QpProblem {
    pub fn new(
        objective: SpdMatrix,
        center: Vec<f64>,
        g: RowMatrix,
        h: Vec<f64>,
        eq_matrix: RowMatrix,
        eq_rhs: Vec<f64>,
        bounds: Option<Bounds>,
    ) -> Result<Self> {
        let m = g.nrows();
        QpProblem::with_blocks(objective, center, g, h, eq_matrix, eq_rhs, bounds, vec![0..m])
    }

    #[allow(clippy::too_many_arguments)]
    fn with_blocks(
        objective: SpdMatrix,
        center: Vec<f64>,
        g: RowMatrix,
        h: Vec<f64>,
        eq_matrix: RowMatrix,
        eq_rhs: Vec<f64>,
        bounds: Option<Bounds>,
        blocks: Vec<Range<usize>>,
    ) -> Result<Self> {
        let n = objective.dim();
        if center.len() != n {
            return Err(Error::dims(format!("a has {} entries, A is {n}x{n}", center.len())));
        }
        if g.nrows() > 0 && g.ncols() != n {
            return Err(Error::dims(format!("G has {} columns, problem dimension is {n}", g.ncols())));
        }
        if g.nrows() != h.len() {
            return Err(Error::dims(format!("G has {} rows, h has {} entries", g.nrows(), h.len())));
        }
        if let Some(i) = h.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("h[{i}] is not finite")));
        }
        for (i, row) in g.rows().enumerate() {
            if row.iter().all(|v| *v == 0.0) {
                return Err(Error::invalid(format!("row {i} of G is zero")));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("row {i} of G is not finite")));
            }
        }
        check_equalities(n, &eq_matrix, &eq_rhs)?;
        if let Some(b) = &bounds {
            if b.dim() != n {
                return Err(Error::dims(format!("box has dimension {}, problem {n}", b.dim())));
            }
        }
        let g = if g.nrows() == 0 { RowMatrix::empty(n) } else { g };
        let eq_matrix = if eq_matrix.nrows() == 0 { RowMatrix::empty(n) } else { eq_matrix };
        Ok(QpProblem { objective, center, g, h, eq_matrix, eq_rhs, bounds, blocks })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn objective(&self) -> &SpdMatrix {
        &self.objective
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    /// Tangent rows `G` (box rows excluded).
    pub fn g(&self) -> &RowMatrix {
        &self.g
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn eq_matrix(&self) -> &RowMatrix {
        &self.eq_matrix
    }

    pub fn eq_rhs(&self) -> &[f64] {
        &self.eq_rhs
    }

    pub fn bounds(&self) -> Option<&Bounds> {
        self.bounds.as_ref()
    }

    /// Row range of each ellipsoid's tangent block, in ellipsoid order.
    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    /// `M`: tangent rows plus `2n` box rows when a box is present.
    pub fn num_inequalities(&self) -> usize {
        self.g.nrows() + if self.bounds.is_some() { 2 * self.dim() } else { 0 }
    }

    /// Same problem with a different right-hand side for the tangent rows.
    pub fn with_rhs(&self, h: Vec<f64>) -> Result<QpProblem> {
        QpProblem::with_blocks(
            self.objective.clone(),
            self.center.clone(),
            self.g.clone(),
            h,
            self.eq_matrix.clone(),
            self.eq_rhs.clone(),
            self.bounds.clone(),
            self.blocks.clone(),
        )
    }

    /// `G` and `h` with the box rows appended (`x <= u`, then `-x <= -l`).
    pub fn stacked_inequalities(&self) -> (RowMatrix, Vec<f64>) {
        let n = self.dim();
        let mut g = self.g.clone();
        let mut h = self.h.clone();
        if let Some(b) = &self.bounds {
            let mut data = vec![0.0; 2 * n * n];
            for i in 0..n {
                data[i * n + i] = 1.0;
                data[(n + i) * n + i] = -1.0;
            }
            g.append(RowMatrix::new(2 * n, n, data).expect("box rows")).expect("same width");
            h.extend_from_slice(&b.upper);
            h.extend(b.lower.iter().map(|v| -v));
        }
        (g, h)
    }

    /// `f(x) = (x-a)^T A (x-a)`.
    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.quad_form(&linalg::sub(x, &self.center))
    }

    /// `max(Gx - h)_+` over tangent and box rows.
    pub fn inequality_violation(&self, x: &[f64]) -> f64 {
        let gx = self.g.mul_vec(x);
        let tangent = gx.iter().zip(&self.h).fold(0.0f64, |m, (a, b)| m.max(a - b));
        let boxed = self.bounds.as_ref().map_or(0.0, |b| b.violation(x));
        tangent.max(boxed)
    }

    /// `max |Cx - c|`.
    pub fn equality_residual(&self, x: &[f64]) -> f64 {
        let r = self.eq_matrix.mul_vec(x);
        r.iter().zip(&self.eq_rhs).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Tangent half-spaces `g_j^T x <= h_j`, one per boundary point, in point order.
pub fn tangent_constraints(pts: &BoundaryPointSet) -> (RowMatrix, Vec<f64>) {
    tangent_rows(pts.points.as_slice().to_vec(), &pts.ellipsoid)
}

/// Builds the rows from a row-major copy of the points, reusing its buffer
/// when `B` is diagonal.
fn tangent_rows(mut data: Vec<f64>, e: &EllipsoidConstraint) -> (RowMatrix, Vec<f64>) {
    let n = e.dim();
    let count = data.len() / n;
    let b = e.center();
    for row in data.chunks_exact_mut(n) {
        row.iter_mut().zip(b).for_each(|(v, c)| *v -= c);
    }
    let data = match e.shape() {
        linalg::SpdMatrix::Diagonal(d) => {
            for row in data.chunks_exact_mut(n) {
                row.iter_mut().zip(d).for_each(|(v, s)| *v *= s);
            }
            data
        }
        linalg::SpdMatrix::Dense(m) => {
            // rows times symmetric B
            let lhs = faer::MatRef::from_row_major_slice(&data, count, n);
            let mut out = faer::Mat::<f64>::zeros(count, n);
            faer::linalg::matmul::matmul(out.as_mut(), faer::Accum::Replace, lhs, m.as_ref(), 1.0, faer::Par::Seq);
            RowMatrix::from_mat(&out).into_data()
        }
    };
    let g = RowMatrix::new(count, n, data).expect("row count matches");
    let level = e.level();
    let h = g.rows().map(|row| level + linalg::dot(row, b)).collect();
    (g, h)
}

/// Stacks the tangent blocks of every ellipsoid, in ellipsoid order, and
/// copies the objective, equalities and box through. Consumes the point sets
/// so their storage can be reused for the rows.
pub fn build_qp(p: &QcqpProblem, pts_per_ellipsoid: Vec<BoundaryPointSet>) -> Result<QpProblem> {
    let n = p.dim();
    if pts_per_ellipsoid.len() != p.ellipsoids().len() {
        return Err(Error::dims(format!(
            "{} point sets for {} ellipsoids",
            pts_per_ellipsoid.len(),
            p.ellipsoids().len()
        )));
    }
    for (i, (pts, e)) in pts_per_ellipsoid.iter().zip(p.ellipsoids()).enumerate() {
        if pts.is_empty() {
            return Err(Error::EmptyPointSet(i));
        }
        if pts.points.dim() != n {
            return Err(Error::dims(format!("point set {i} has dimension {}, problem {n}", pts.points.dim())));
        }
        if pts.ellipsoid != *e {
            return Err(Error::invalid(format!("point set {i} lies on a different ellipsoid")));
        }
    }
    let mut g = RowMatrix::empty(n);
    let mut h = Vec::new();
    let mut blocks = Vec::with_capacity(pts_per_ellipsoid.len());
    for pts in pts_per_ellipsoid {
        let BoundaryPointSet { points, ellipsoid } = pts;
        let (gb, hb) = tangent_rows(points.into_data(), &ellipsoid);
        let start = g.nrows();
        g.append(gb)?;
        h.extend(hb);
        blocks.push(start..g.nrows());
    }
    QpProblem::with_blocks(
        p.objective().clone(),
        p.center().to_vec(),
        g,
        h,
        p.eq_matrix().clone(),
        p.eq_rhs().to_vec(),
        p.bounds().cloned(),
        blocks,
    )
}

/// Samples points of each constraint set and checks them against the QP rows
/// generated from that constraint: `n_samples` uniform points of every
/// ellipsoid against its tangent block, and of the box against the box rows.
/// `S` is contained in the polytope iff this holds constraint by constraint.
pub fn containment_check(p: &QcqpProblem, qp: &QpProblem, n_samples: usize, seed: u64) -> bool {
    if n_samples == 0 {
        return true;
    }
    let n = p.dim();
    if qp.dim() != n || qp.blocks().len() != p.ellipsoids().len() || p.bounds().is_some() != qp.bounds().is_some() {
        return false;
    }
    for (k, (e, rows)) in p.ellipsoids().iter().zip(qp.blocks()).enumerate() {
        for i in 0..n_samples {
            let mut rng = stream_rng(seed ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15), i as u64);
            let dir: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let norm = linalg::norm2(&dir);
            if norm == 0.0 {
                continue;
            }
            let r = rng.random::<f64>().powf(1.0 / n as f64);
            let u: Vec<f64> = dir.iter().map(|v| v * r / norm).collect();
            let x = e.from_sphere(&u);
            for j in rows.clone() {
                let lhs = linalg::dot(qp.g().row(j), &x);
                if lhs > qp.h()[j] + 1e-9 * qp.h()[j].abs().max(1.0) {
                    return false;
                }
            }
        }
    }
    if let (Some(pb), Some(qb)) = (p.bounds(), qp.bounds()) {
        let mut rng = stream_rng(seed, u64::MAX);
        for _ in 0..n_samples {
            let x: Vec<f64> = pb.lower.iter().zip(&pb.upper).map(|(l, u)| l + (u - l) * rng.random::<f64>()).collect();
            if !qb.contains(&x) {
                return false;
            }
        }
    }
    true
}

/// `N = max(1024, 2^m)` with `m` the smallest integer such that `2^m >= 10 n`,
/// capped at `2^20`.
pub fn default_points_per_ellipsoid(n: usize) -> usize {
    let target = 10 * n.max(1);
    let pow = target.next_power_of_two();
    if pow > MAX_DEFAULT_POINTS {
        log::warn!("default point count 2^{} for n = {n} capped at 2^20", pow.trailing_zeros());
        return MAX_DEFAULT_POINTS;
    }
    pow.max(1024)
}

/// Net points on every ellipsoid boundary: ellipsoid `i` gets block `i` of the
/// base-2 Sobol' sequence in dimension `n - 1`, `2^log2_points` points each.
pub fn net_boundary_points(p: &QcqpProblem, log2_points: u32) -> Result<Vec<BoundaryPointSet>> {
    let n = p.dim();
    if n < 2 {
        return Err(Error::invalid("boundary sampling needs n >= 2"));
    }
    let cfg = NetConfig::sobol(log2_points, n - 1)?;
    p.ellipsoids()
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let sphere = map_cube_points(&generate_net_block(&cfg, i as u32)?)?;
            map_sphere_points_owned(sphere, e)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::boundary_points;
    use crate::points::Points;

    fn boundary(e: &EllipsoidConstraint, rows: &[Vec<f64>]) -> BoundaryPointSet {
        BoundaryPointSet::new(Points::from_rows(e.dim(), rows).unwrap(), e.clone()).unwrap()
    }

    fn disk_problem(bounds: Option<Bounds>) -> QcqpProblem {
        let e = EllipsoidConstraint::ball(vec![2.0, 0.0], 1.0).unwrap();
        QcqpProblem::new(SpdMatrix::identity(2), vec![0.0; 2], RowMatrix::empty(2), vec![], vec![e], bounds).unwrap()
    }

    #[test]
    fn tangent_row_examples() {
        let e = EllipsoidConstraint::ball(vec![0.0, 0.0], 1.0).unwrap();
        let (g, h) = tangent_constraints(&boundary(&e, &[vec![1.0, 0.0]]));
        assert_eq!((g.row(0), h[0]), (&[1.0, 0.0][..], 1.0));

        let e = EllipsoidConstraint::new(SpdMatrix::Diagonal(vec![4.0, 1.0]), vec![0.0, 0.0], 4.0).unwrap();
        let (g, h) = tangent_constraints(&boundary(&e, &[vec![1.0, 0.0]]));
        assert_eq!((g.row(0), h[0]), (&[4.0, 0.0][..], 4.0));

        let e = EllipsoidConstraint::ball(vec![1.0, 1.0], 1.0).unwrap();
        let (g, h) = tangent_constraints(&boundary(&e, &[vec![2.0, 1.0]]));
        assert_eq!((g.row(0), h[0]), (&[1.0, 0.0][..], 2.0));
    }

    #[test]
    fn dense_and_diagonal_shapes_give_the_same_rows() {
        let diag = EllipsoidConstraint::new(SpdMatrix::Diagonal(vec![4.0, 1.0, 2.0]), vec![0.5, 0.0, -1.0], 3.0).unwrap();
        let dense = EllipsoidConstraint::new(
            SpdMatrix::from_rows(&[vec![4.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 2.0]]).unwrap(),
            vec![0.5, 0.0, -1.0],
            3.0,
        )
        .unwrap();
        let cfg = NetConfig::sobol(5, 2).unwrap();
        let cube = crate::nets::generate_net(&cfg).unwrap();
        let (g1, h1) = tangent_constraints(&boundary_points(&cube, &diag).unwrap());
        let (g2, h2) = tangent_constraints(&boundary_points(&cube, &dense).unwrap());
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()).chain(h1.iter().zip(&h2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn each_point_is_tight_on_its_own_row() {
        let e = EllipsoidConstraint::new(
            SpdMatrix::from_rows(&[vec![3.0, 0.5, 0.0], vec![0.5, 2.0, 0.1], vec![0.0, 0.1, 1.0]]).unwrap(),
            vec![0.3, -0.2, 1.0],
            2.5,
        )
        .unwrap();
        let cube = crate::nets::generate_net(&NetConfig::sobol(6, 2).unwrap()).unwrap();
        let pts = boundary_points(&cube, &e).unwrap();
        let (g, h) = tangent_constraints(&pts);
        for (j, x) in pts.points.iter().enumerate() {
            assert!((linalg::dot(g.row(j), x) - h[j]).abs() <= 1e-9 * e.level());
            // center has slack exactly b~
            assert!((h[j] - linalg::dot(g.row(j), e.center()) - e.level()).abs() < 1e-12);
            for k in 0..pts.len() {
                if k != j {
                    assert!(linalg::dot(g.row(k), x) < h[k]);
                }
            }
        }
    }

    #[test]
    fn build_qp_row_counts() {
        let bounds = Bounds::new(vec![-1.0; 2], vec![3.0; 2]).unwrap();
        let box_only =
            QcqpProblem::new(SpdMatrix::identity(2), vec![0.0; 2], RowMatrix::empty(2), vec![], vec![], Some(bounds))
                .unwrap();
        let qp = build_qp(&box_only, vec![]).unwrap();
        assert_eq!(qp.num_inequalities(), 4);
        let (g, h) = qp.stacked_inequalities();
        assert_eq!(g.nrows(), 4);
        assert_eq!(h, vec![3.0, 3.0, 1.0, 1.0]);

        let p = disk_problem(None);
        let pts = net_boundary_points(&p, 7).unwrap();
        let qp = build_qp(&p, pts).unwrap();
        assert_eq!(qp.num_inequalities(), 128);
        assert_eq!(qp.blocks(), &[0..128]);
    }

    #[test]
    fn build_qp_rejects_bad_point_sets() {
        let p = disk_problem(None);
        assert!(matches!(build_qp(&p, vec![]), Err(Error::DimensionMismatch(_))));
        let e = p.ellipsoids()[0].clone();
        let empty = BoundaryPointSet::new(Points::new(2, vec![]).unwrap(), e).unwrap();
        assert!(matches!(build_qp(&p, vec![empty]), Err(Error::EmptyPointSet(0))));
        let other = EllipsoidConstraint::ball(vec![0.0, 0.0], 1.0).unwrap();
        assert!(build_qp(&p, vec![boundary(&other, &[vec![1.0, 0.0]])]).is_err());
    }

    #[test]
    fn interior_points_satisfy_every_row() {
        let e1 = EllipsoidConstraint::new(SpdMatrix::Diagonal(vec![1.0, 2.0, 0.5]), vec![0.0, 0.5, 0.0], 2.0).unwrap();
        let e2 = EllipsoidConstraint::ball(vec![0.5, 0.0, 0.0], 1.5).unwrap();
        let p = QcqpProblem::new(SpdMatrix::identity(3), vec![3.0; 3], RowMatrix::empty(3), vec![], vec![e1, e2], None)
            .unwrap();
        let qp = build_qp(&p, net_boundary_points(&p, 8).unwrap()).unwrap();
        assert_eq!(qp.blocks(), &[0..256, 256..512]);
        // shrink net boundary points of both ellipsoids toward their centers
        let mut rng = stream_rng(3, 0);
        for e in p.ellipsoids() {
            let cube = crate::nets::sample_uniform_cube(100, 2, 9).unwrap();
            let pts = boundary_points(&cube, e).unwrap();
            for x in pts.points.iter() {
                let t: f64 = rng.random();
                let y: Vec<f64> = x.iter().zip(e.center()).map(|(v, c)| c + t * (v - c)).collect();
                if p.ellipsoids().iter().all(|f| f.contains(&y)) {
                    assert!(qp.inequality_violation(&y) <= 1e-12);
                }
            }
        }
        assert!(containment_check(&p, &qp, 100, 1));
    }

    #[test]
    fn containment_detects_a_broken_row() {
        let p = disk_problem(Some(Bounds::new(vec![0.0, -2.0], vec![4.0, 2.0]).unwrap()));
        let qp = build_qp(&p, net_boundary_points(&p, 5).unwrap()).unwrap();
        assert!(containment_check(&p, &qp, 200, 7));
        assert!(containment_check(&p, &qp, 0, 7));
        let mut h = qp.h().to_vec();
        h[3] -= 2.0 * p.ellipsoids()[0].level();
        let broken = qp.with_rhs(h).unwrap();
        assert!(!containment_check(&p, &broken, 200, 7));
        assert!(containment_check(&p, &broken, 0, 7));
    }

    #[test]
    fn default_point_rule() {
        assert_eq!(default_points_per_ellipsoid(2), 1024);
        assert_eq!(default_points_per_ellipsoid(102), 1024);
        assert_eq!(default_points_per_ellipsoid(103), 2048);
        assert_eq!(default_points_per_ellipsoid(1000), 16384);
        assert_eq!(default_points_per_ellipsoid(1_000_000), 1 << 20);
    }

    #[test]
    fn json_round_trip() {
        let e = EllipsoidConstraint::new(SpdMatrix::Diagonal(vec![4.0, 1.0]), vec![1.0, 0.0], 4.0).unwrap();
        let p = QcqpProblem::new(
            SpdMatrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap(),
            vec![0.1, 0.2],
            RowMatrix::from_rows(&[vec![1.0, 1.0]], 2).unwrap(),
            vec![0.5],
            vec![e],
            Some(Bounds::new(vec![-1.0, -1.0], vec![1.0, 2.0]).unwrap()),
        )
        .unwrap();
        let text = p.to_json().unwrap();
        for key in ["\"A\"", "\"a\"", "\"C\"", "\"c\"", "\"ellipsoids\"", "\"B\"", "\"b_tilde\"", "\"l\"", "\"u\""] {
            assert!(text.contains(key), "{key}");
        }
        let q = QcqpProblem::from_json(&text).unwrap();
        assert_eq!(q.to_json().unwrap(), text);
        let minimal = r#"{"A": [[1,0],[0,1]], "a": [0,0]}"#;
        let m = QcqpProblem::from_json(minimal).unwrap();
        assert_eq!((m.num_equalities(), m.ellipsoids().len(), m.bounds().is_none()), (0, 0, true));
    }

    #[test]
    fn qcqp_validation() {
        let id = SpdMatrix::identity(2);
        let bad_a = SpdMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(QcqpProblem::new(bad_a, vec![0.0; 2], RowMatrix::empty(2), vec![], vec![], None).is_err());
        let dup = RowMatrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0]], 2).unwrap();
        assert!(QcqpProblem::new(id.clone(), vec![0.0; 2], dup, vec![1.0, 2.0], vec![], None).is_err());
        assert!(Bounds::new(vec![1.0], vec![0.0]).is_err());
        let three = RowMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]], 2).unwrap();
        assert!(QcqpProblem::new(id, vec![0.0; 2], three, vec![0.0; 3], vec![], None).is_err());
    }
}
