//! Exact reference solvers for small instances.
//!
//! The bisection oracle handles one ellipsoid plus equalities: for a fixed
//! multiplier `lambda` the stationarity system
//! `A(x-a) + lambda B(x-b) + C^T mu = 0`, `Cx = c` is linear, and the
//! constraint value of its solution is non-increasing in `lambda`.
//! The grid oracle scans a lattice over the feasible region for `n <= 3`.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::EllipsoidConstraint;
use crate::linalg::{self, SpdMatrix};
use crate::linearizer::QcqpProblem;

/// Largest dimension the grid oracle accepts.
pub const GRID_MAX_DIM: usize = 3;
const LAMBDA_CAP: f64 = 1e30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub x_star: Vec<f64>,
    pub lambda_star: f64,
    pub objective: f64,
    /// Whether the ellipsoid constraint is tight at `x_star`.
    pub active: bool,
    /// Grid oracle only: `L * h * sqrt(k)` for gradient bound `L`, step `h`
    /// and `k` free coordinates.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error_bound: Option<f64>,
}

/// `|b| + sqrt(b~ / sigma_min(B))`, a bound on `|x|` over the ellipsoid.
pub fn norm_bound(e: &EllipsoidConstraint) -> f64 {
    linalg::norm2(e.center()) + (e.level() / e.sigma_min()).sqrt()
}

/// Solves `[M, C^T; C, 0] [x; mu] = [r; c]` densely.
fn equality_kkt_solve(m: &Mat<f64>, rhs: &[f64], p: &QcqpProblem) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = p.dim();
    let k = p.num_equalities();
    let mut full = Mat::<f64>::zeros(n + k, n + k);
    for j in 0..n {
        for i in 0..n {
            full[(i, j)] = m[(i, j)];
        }
    }
    for (r, row) in p.eq_matrix().rows().enumerate() {
        for (j, v) in row.iter().enumerate() {
            full[(n + r, j)] = *v;
            full[(j, n + r)] = *v;
        }
    }
    let mut b = rhs.to_vec();
    b.extend_from_slice(p.eq_rhs());
    let sol = linalg::solve_dense(&full, &b).map_err(|_| Error::InconsistentEqualities)?;
    Ok((sol[..n].to_vec(), sol[n..].to_vec()))
}

struct LambdaSystem<'a> {
    p: &'a QcqpProblem,
    e: &'a EllipsoidConstraint,
    a_mat: Mat<f64>,
    b_mat: Mat<f64>,
    aa: Vec<f64>,
    bb: Vec<f64>,
}

impl LambdaSystem<'_> {
    /// `x(lambda)`, `mu(lambda)` and the constraint value at `x(lambda)`.
    fn solve(&self, lambda: f64) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let n = self.p.dim();
        let m = Mat::from_fn(n, n, |i, j| self.a_mat[(i, j)] + lambda * self.b_mat[(i, j)]);
        let rhs: Vec<f64> = self.aa.iter().zip(&self.bb).map(|(a, b)| a + lambda * b).collect();
        let (x, mu) = equality_kkt_solve(&m, &rhs, self.p)?;
        let g = self.e.value(&x);
        Ok((x, mu, g))
    }
}

/// Exact solution of a single-ellipsoid problem without box.
pub fn solve_exact_bisection(p: &QcqpProblem) -> Result<OracleSolution> {
    if p.ellipsoids().len() != 1 {
        return Err(Error::invalid(format!("bisection oracle needs exactly one ellipsoid, got {}", p.ellipsoids().len())));
    }
    if p.bounds().is_some() {
        return Err(Error::invalid("bisection oracle does not handle box constraints"));
    }
    let e = &p.ellipsoids()[0];
    let level = e.level();
    let a_mat = p.objective().to_dense();
    let b_mat = e.shape().to_dense();
    let sys = LambdaSystem {
        p,
        e,
        aa: p.objective().mul_vec(p.center()),
        bb: e.shape().mul_vec(e.center()),
        a_mat,
        b_mat,
    };

    // closest point of the equality subspace to the center, in the B metric
    let (xb, _) = equality_kkt_solve(&sys.b_mat, &sys.bb, p)?;
    if e.value(&xb) > level * (1.0 + 1e-9) {
        return Err(Error::Infeasible("no point with Cx = c lies in the ellipsoid".into()));
    }

    let (x0, _, g0) = sys.solve(0.0)?;
    if g0 <= level {
        let objective = p.objective_value(&x0);
        return Ok(OracleSolution {
            active: g0 >= level * (1.0 - 1e-9),
            x_star: x0,
            lambda_star: 0.0,
            objective,
            error_bound: None,
        });
    }

    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut best = sys.solve(hi)?;
    while best.2 > level {
        lo = hi;
        hi *= 2.0;
        if hi > LAMBDA_CAP {
            // feasible set meets the subspace in (nearly) one point
            let objective = p.objective_value(&xb);
            return Ok(OracleSolution { x_star: xb, lambda_star: hi, objective, active: true, error_bound: None });
        }
        best = sys.solve(hi)?;
    }
    for _ in 0..200 {
        if hi - lo <= 1e-12 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let cand = sys.solve(mid)?;
        if cand.2 > level {
            lo = mid;
        } else {
            hi = mid;
            best = cand;
        }
    }
    let (x, _, _) = best;
    let objective = p.objective_value(&x);
    Ok(OracleSolution { x_star: x, lambda_star: hi, objective, active: true, error_bound: None })
}

/// Best feasible point of a lattice over the feasible region (`n <= 3`).
///
/// Equalities are eliminated through an orthonormal null-space basis. The
/// lattice has `resolution` points per free coordinate. Without equalities it
/// spans the bounding boxes of the ellipsoids clipped to the norm bound and
/// the box; with equalities, the ball of the norm bound. Ties keep the lowest
/// lexicographic index.
pub fn solve_grid_bruteforce(p: &QcqpProblem, resolution: usize) -> Result<OracleSolution> {
    let n = p.dim();
    if n > GRID_MAX_DIM {
        return Err(Error::InstanceTooLarge(format!("grid oracle handles n <= {GRID_MAX_DIM}, got {n}")));
    }
    if resolution < 2 {
        return Err(Error::invalid("grid resolution must be >= 2"));
    }
    let radius = p.ellipsoids().iter().map(norm_bound).fold(f64::INFINITY, f64::min);
    if radius.is_infinite() && p.bounds().is_none() {
        return Err(Error::invalid("grid oracle needs an ellipsoid or a box to bound the search"));
    }
    // x = x0 + Z t with Z orthonormal and x0 orthogonal to range(Z)
    let (x0, z) = null_space_parametrization(p)?;
    let k = z.ncols();
    let mut lo_t = vec![0.0; k];
    let mut hi_t = vec![0.0; k];
    if p.num_equalities() == 0 {
        let boxes = p.ellipsoids().iter().map(bounding_box).collect::<Result<Vec<_>>>()?;
        for j in 0..n {
            let (mut l, mut u) = (-radius, radius);
            for (bl, bu) in &boxes {
                l = l.max(bl[j]);
                u = u.min(bu[j]);
            }
            if let Some(b) = p.bounds() {
                l = l.max(b.lower[j]);
                u = u.min(b.upper[j]);
            }
            lo_t[j] = l;
            hi_t[j] = u;
        }
    } else {
        let r = if radius.is_finite() {
            (radius * radius - linalg::dot(&x0, &x0)).max(0.0).sqrt()
        } else {
            let b = p.bounds().expect("checked above");
            let far: f64 = b.lower.iter().zip(&b.upper).map(|(l, u)| l.abs().max(u.abs()).powi(2)).sum();
            far.sqrt()
        };
        lo_t.iter_mut().for_each(|v| *v = -r);
        hi_t.iter_mut().for_each(|v| *v = r);
    }
    let steps: Vec<f64> = lo_t.iter().zip(&hi_t).map(|(l, u)| (u - l) / (resolution - 1) as f64).collect();

    if lo_t.iter().zip(&hi_t).any(|(l, u)| l > u) {
        return Err(Error::Infeasible("box and ellipsoid bounds do not overlap".into()));
    }
    // dense copies so the scan does not allocate
    let dense = |m: &SpdMatrix| -> Vec<f64> { (0..n * n).map(|i| m.get(i / n, i % n)).collect() };
    let quad = |m: &[f64], c: &[f64], x: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += m[i * n + j] * (x[j] - c[j]);
            }
            s += (x[i] - c[i]) * row;
        }
        s
    };
    let shapes: Vec<(Vec<f64>, &[f64], f64)> =
        p.ellipsoids().iter().map(|e| (dense(e.shape()), e.center(), e.level())).collect();
    let a_dense = dense(p.objective());
    let feasible = |x: &[f64]| -> bool {
        shapes.iter().all(|(m, c, l)| quad(m, c, x) <= *l) && p.bounds().is_none_or(|b| b.contains(x))
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut x = vec![0.0; n];
    let mut idx = vec![0usize; k];
    let total = resolution.checked_pow(k as u32).ok_or_else(|| Error::InstanceTooLarge("grid too large".into()))?;
    for _ in 0..total {
        x.copy_from_slice(&x0);
        for (c, &i) in idx.iter().enumerate() {
            let t = lo_t[c] + i as f64 * steps[c];
            for r in 0..n {
                x[r] += z[(r, c)] * t;
            }
        }
        if feasible(&x) {
            let f = quad(&a_dense, p.center(), &x);
            if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                best = Some((f, x.clone()));
            }
        }
        // lexicographic increment, last coordinate fastest
        for c in (0..k).rev() {
            idx[c] += 1;
            if idx[c] < resolution {
                break;
            }
            idx[c] = 0;
        }
    }
    let (_, x_star) = best.ok_or_else(|| Error::Infeasible("no feasible grid point".into()))?;
    let objective = p.objective_value(&x_star);

    let h = steps.iter().copied().fold(0.0, f64::max);
    let reach = linalg::norm2(&x0) + lo_t.iter().zip(&hi_t).map(|(l, u)| l.abs().max(u.abs()).powi(2)).sum::<f64>().sqrt();
    let a_norm = p.objective().eigen()?.max();
    let lipschitz = 2.0 * a_norm * (reach + linalg::norm2(p.center()));
    let error_bound = lipschitz * h * (k as f64).sqrt();

    let (lambda_star, active) = match p.ellipsoids().first() {
        Some(e) => {
            let slack_tol = 2.0 * e.sigma_max() * (reach + linalg::norm2(e.center())) * h * (k as f64).sqrt();
            let active = e.value(&x_star) >= e.level() - slack_tol;
            let grad_f = p.objective().mul_vec(&linalg::sub(&x_star, p.center()));
            let grad_g = e.shape().mul_vec(&linalg::sub(&x_star, e.center()));
            let gg = linalg::dot(&grad_g, &grad_g);
            let lambda = if active && gg > 0.0 { (-linalg::dot(&grad_f, &grad_g) / gg).max(0.0) } else { 0.0 };
            (lambda, active)
        }
        None => (0.0, false),
    };
    Ok(OracleSolution { x_star, lambda_star, objective, active, error_bound: Some(error_bound) })
}

/// Axis-aligned bounding box of an ellipsoid: `b_j -+ sqrt(b~ (B^-1)_jj)`.
fn bounding_box(e: &EllipsoidConstraint) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = e.dim();
    let b = e.shape().to_dense();
    let mut lo = Vec::with_capacity(n);
    let mut hi = Vec::with_capacity(n);
    for j in 0..n {
        let mut unit = vec![0.0; n];
        unit[j] = 1.0;
        let col = linalg::solve_dense(&b, &unit)?;
        let half = (e.level() * col[j]).sqrt();
        lo.push(e.center()[j] - half);
        hi.push(e.center()[j] + half);
    }
    Ok((lo, hi))
}

/// Minimum-norm solution of `Cx = c` and an orthonormal basis of the null space of `C`.
fn null_space_parametrization(p: &QcqpProblem) -> Result<(Vec<f64>, Mat<f64>)> {
    let n = p.dim();
    let k = p.num_equalities();
    if k == 0 {
        return Ok((vec![0.0; n], Mat::identity(n, n)));
    }
    let ct = Mat::from_fn(n, k, |i, j| p.eq_matrix().row(j)[i]);
    let q = ct.qr().compute_Q();
    let z = Mat::from_fn(n, n - k, |i, j| q[(i, k + j)]);
    let cct = Mat::from_fn(k, k, |i, j| linalg::dot(p.eq_matrix().row(i), p.eq_matrix().row(j)));
    let w = linalg::solve_dense(&cct, p.eq_rhs()).map_err(|_| Error::InconsistentEqualities)?;
    let x0 = p.eq_matrix().t_mul_vec(&w);
    Ok((x0, z))
}

/// KKT stationarity residual `|A(x-a) + lambda B(x-b) + C^T mu|_inf` with
/// `mu` fitted by least squares; used to check oracle output.
pub fn stationarity_residual(p: &QcqpProblem, x: &[f64], lambda: f64) -> Result<f64> {
    let e = p
        .ellipsoids()
        .first()
        .ok_or_else(|| Error::invalid("stationarity check needs an ellipsoid"))?;
    let mut r = p.objective().mul_vec(&linalg::sub(x, p.center()));
    let gb = e.shape().mul_vec(&linalg::sub(x, e.center()));
    r.iter_mut().zip(&gb).for_each(|(a, b)| *a += lambda * b);
    let k = p.num_equalities();
    if k > 0 {
        // mu = -(C C^T)^-1 C r
        let cct = Mat::from_fn(k, k, |i, j| linalg::dot(p.eq_matrix().row(i), p.eq_matrix().row(j)));
        let cr = p.eq_matrix().mul_vec(&r);
        let mu = linalg::solve_dense(&cct, &cr)?;
        let ctmu = p.eq_matrix().t_mul_vec(&mu);
        r.iter_mut().zip(&ctmu).for_each(|(a, b)| *a -= b);
    }
    Ok(linalg::norm_inf(&r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{RowMatrix, SpdMatrix};
    use crate::linearizer::Bounds;

    fn disk() -> QcqpProblem {
        let e = EllipsoidConstraint::ball(vec![2.0, 0.0], 1.0).unwrap();
        QcqpProblem::new(SpdMatrix::identity(2), vec![0.0; 2], RowMatrix::empty(2), vec![], vec![e], None).unwrap()
    }

    #[test]
    fn norm_bound_examples() {
        assert_eq!(norm_bound(&EllipsoidConstraint::ball(vec![0.0, 0.0], 2.0).unwrap()), 2.0);
        let e = EllipsoidConstraint::new(SpdMatrix::Diagonal(vec![4.0, 1.0]), vec![0.0, 0.0], 4.0).unwrap();
        assert_eq!(norm_bound(&e), 2.0);
        assert_eq!(norm_bound(&EllipsoidConstraint::ball(vec![3.0, 0.0], 1.0).unwrap()), 4.0);
    }

    #[test]
    fn disk_problem_by_bisection() {
        let p = disk();
        let s = solve_exact_bisection(&p).unwrap();
        assert!((s.x_star[0] - 1.0).abs() < 1e-10 && s.x_star[1].abs() < 1e-12);
        assert!((s.lambda_star - 1.0).abs() < 1e-10);
        assert!((s.objective - 1.0).abs() < 1e-10);
        assert!(s.active);
        let r = stationarity_residual(&p, &s.x_star, s.lambda_star).unwrap();
        assert!(r <= 1e-9 * (linalg::norm2(&s.x_star) + 1.0));
    }

    #[test]
    fn interior_center_is_returned() {
        let e = EllipsoidConstraint::ball(vec![0.5, 0.0], 1.0).unwrap();
        let c = RowMatrix::from_rows(&[vec![0.0, 1.0]], 2).unwrap();
        let p = QcqpProblem::new(SpdMatrix::identity(2), vec![0.2, 0.1], c, vec![0.1], vec![e], None).unwrap();
        let s = solve_exact_bisection(&p).unwrap();
        assert_eq!(s.lambda_star, 0.0);
        assert!(!s.active);
        assert!((s.x_star[0] - 0.2).abs() < 1e-12 && (s.x_star[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn equality_outside_ellipsoid_is_infeasible() {
        let e = EllipsoidConstraint::ball(vec![0.0, 0.0], 1.0).unwrap();
        let c = RowMatrix::from_rows(&[vec![1.0, 0.0]], 2).unwrap();
        let p = QcqpProblem::new(SpdMatrix::identity(2), vec![0.0; 2], c, vec![2.0], vec![e], None).unwrap();
        assert!(matches!(solve_exact_bisection(&p), Err(Error::Infeasible(_))));
        assert!(matches!(solve_grid_bruteforce(&p, 101), Err(Error::Infeasible(_))));
    }

    #[test]
    fn equality_tangent_to_ellipsoid() {
        let e = EllipsoidConstraint::ball(vec![0.0, 0.0], 1.0).unwrap();
        let c = RowMatrix::from_rows(&[vec![1.0, 0.0]], 2).unwrap();
        let p = QcqpProblem::new(SpdMatrix::identity(2), vec![3.0, 3.0], c, vec![1.0], vec![e], None).unwrap();
        let s = solve_exact_bisection(&p).unwrap();
        assert!((s.x_star[0] - 1.0).abs() < 1e-9 && s.x_star[1].abs() < 1e-6);
    }

    #[test]
    fn disk_problem_on_grid() {
        let s = solve_grid_bruteforce(&disk(), 2001).unwrap();
        assert!((s.objective - 1.0).abs() <= 2e-3);
        assert!(s.objective >= 1.0 - 1e-12);
        assert!(s.error_bound.unwrap() > 0.0);
        assert!(s.active);
        assert!((s.lambda_star - 1.0).abs() < 0.05);
    }

    #[test]
    fn grid_rejects_large_or_unbounded_problems() {
        let e = EllipsoidConstraint::ball(vec![0.0; 4], 1.0).unwrap();
        let p = QcqpProblem::new(SpdMatrix::identity(4), vec![0.0; 4], RowMatrix::empty(4), vec![], vec![e], None).unwrap();
        assert!(matches!(solve_grid_bruteforce(&p, 11), Err(Error::InstanceTooLarge(_))));
        let free = QcqpProblem::new(SpdMatrix::identity(2), vec![0.0; 2], RowMatrix::empty(2), vec![], vec![], None).unwrap();
        assert!(solve_grid_bruteforce(&free, 11).is_err());
    }

    #[test]
    fn grid_with_box_and_equality() {
        // min |x - (2, 2, 0)|^2 on x1 + x2 + x3 = 1 inside the unit ball and x3 >= 0.2
        let e = EllipsoidConstraint::ball(vec![0.0; 3], 1.0).unwrap();
        let c = RowMatrix::from_rows(&[vec![1.0, 1.0, 1.0]], 3).unwrap();
        let b = Bounds::new(vec![-2.0, -2.0, 0.2], vec![2.0, 2.0, 2.0]).unwrap();
        let p = QcqpProblem::new(SpdMatrix::identity(3), vec![2.0, 2.0, 0.0], c, vec![1.0], vec![e], Some(b)).unwrap();
        let s = solve_grid_bruteforce(&p, 401).unwrap();
        assert!(p.equality_residual(&s.x_star) < 1e-12);
        assert!(s.x_star[2] >= 0.2);
        // by symmetry x1 = x2 = (1 - x3) / 2 with x3 = 0.2 active
        assert!((s.x_star[0] - 0.4).abs() < 0.02 && (s.x_star[2] - 0.2).abs() < 0.02, "{:?}", s.x_star);
        assert!(bisection_rejects_boxes(&p));
    }

    fn bisection_rejects_boxes(p: &QcqpProblem) -> bool {
        solve_exact_bisection(p).is_err()
    }
}
