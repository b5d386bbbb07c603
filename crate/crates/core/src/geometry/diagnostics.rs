use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg;
use crate::points::Points;

use super::{polar_height, sample_uniform_sphere, BoundaryPointSet, SpherePointSet};

/// `E_s = sum_{i != j} |x_i - x_j|^-s` over ordered pairs.
pub fn riesz_energy(points: &Points, s: f64) -> Result<f64> {
    if !(s > 0.0) {
        return Err(Error::invalid(format!("Riesz parameter s must be positive, got {s}")));
    }
    let mut total = 0.0;
    for i in 0..points.len() {
        let xi = points.point(i);
        for j in (i + 1)..points.len() {
            let d2: f64 = xi.iter().zip(points.point(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 == 0.0 {
                return Err(Error::InfiniteEnergy { i, j });
            }
            total += 2.0 * d2.powf(-s / 2.0);
        }
    }
    Ok(total)
}

/// Largest cap radius of the tangent polygon of a planar boundary point set.
///
/// Neighboring tangent lines (in angular order) meet at a polygon vertex `v`.
/// The boundary arc visible from `v` runs between the two tangency points.
/// The cap radius is the largest distance from `v` to that arc. On a circle
/// it is attained at the tangency points. For the `N`-th roots of unity on
/// the unit circle it equals `tan(pi / N)`.
pub fn cover_distance_2d(pts: &BoundaryPointSet) -> Result<f64> {
    let e = &pts.ellipsoid;
    if e.dim() != 2 {
        return Err(Error::dims(format!("cover distance is only computed in 2-D, got n = {}", e.dim())));
    }
    let sphere = pts.pull_back()?;
    let mut angles: Vec<(f64, usize)> =
        sphere.points.iter().enumerate().map(|(i, u)| (u[1].atan2(u[0]).rem_euclid(2.0 * PI), i)).collect();
    angles.sort_by(|a, b| a.0.total_cmp(&b.0));
    angles.dedup_by(|b, a| (b.0 - a.0).abs() < 1e-14);
    if angles.len() < 2 {
        return Err(Error::UnboundedCover { gap: 2.0 * PI });
    }
    let k = angles.len();
    let mut worst: f64 = 0.0;
    for idx in 0..k {
        let (a0, i) = angles[idx];
        let (a1, j) = angles[(idx + 1) % k];
        let gap = if idx + 1 == k { a1 + 2.0 * PI - a0 } else { a1 - a0 };
        if gap >= PI - 1e-12 {
            return Err(Error::UnboundedCover { gap });
        }
        let vertex = tangent_intersection(pts, i, j)?;
        let dist2 = |theta: f64| {
            let x = e.from_sphere(&[theta.cos(), theta.sin()]);
            (x[0] - vertex[0]).powi(2) + (x[1] - vertex[1]).powi(2)
        };
        worst = worst.max(max_on_interval(dist2, a0, a0 + gap).sqrt());
    }
    Ok(worst)
}

fn tangent_intersection(pts: &BoundaryPointSet, i: usize, j: usize) -> Result<[f64; 2]> {
    let e = &pts.ellipsoid;
    let row = |k: usize| {
        let g = e.shape().mul_vec(&linalg::sub(pts.points.point(k), e.center()));
        let h = e.level() + linalg::dot(&g, e.center());
        (g, h)
    };
    let (gi, hi) = row(i);
    let (gj, hj) = row(j);
    let det = gi[0] * gj[1] - gi[1] * gj[0];
    if det.abs() <= 1e-300 {
        return Err(Error::UnboundedCover { gap: PI });
    }
    Ok([(hi * gj[1] - gi[1] * hj) / det, (gi[0] * hj - hi * gj[0]) / det])
}

/// Maximum of a smooth function on `[a, b]`: dense scan, then golden-section
/// refinement around the best interior sample.
fn max_on_interval(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    const SAMPLES: usize = 64;
    let h = (b - a) / SAMPLES as f64;
    let vals: Vec<f64> = (0..=SAMPLES).map(|k| f(if k == SAMPLES { b } else { a + k as f64 * h })).collect();
    let (best, &best_val) = vals.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).unwrap();
    if best == 0 || best == SAMPLES {
        return best_val;
    }
    let (mut lo, mut hi) = (a + (best - 1) as f64 * h, a + (best + 1) as f64 * h);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..100 {
        if f1 > f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    best_val.max(f1).max(f2)
}

/// Largest deviation `|count / N - measure|` over `n_caps` random spherical caps
/// of normalized measure `measure`, centers drawn uniformly from `seed`.
pub fn equidistribution_test(pts: &SpherePointSet, n_caps: usize, measure: f64, seed: u64) -> Result<f64> {
    let n = pts.dim();
    if n < 2 {
        return Err(Error::invalid("caps need a sphere in dimension n >= 2"));
    }
    if !(measure > 0.0 && measure < 1.0) {
        return Err(Error::invalid(format!("cap measure must lie in (0, 1), got {measure}")));
    }
    if n_caps == 0 || pts.len() < n_caps {
        return Err(Error::invalid(format!("need 1 <= n_caps <= N, got n_caps = {n_caps}, N = {}", pts.len())));
    }
    let threshold = polar_height(n - 1, measure);
    let centers = sample_uniform_sphere(n_caps, n, seed)?;
    let total = pts.len() as f64;
    let mut worst: f64 = 0.0;
    for c in centers.points.iter() {
        let count = pts.points.iter().filter(|p| linalg::dot(p, c) >= threshold).count();
        worst = worst.max((count as f64 / total - measure).abs());
    }
    Ok(worst)
}

/// [`equidistribution_test`] on a boundary set, pulled back through `psi^-1`.
pub fn boundary_equidistribution_test(pts: &BoundaryPointSet, n_caps: usize, measure: f64, seed: u64) -> Result<f64> {
    equidistribution_test(&pts.pull_back()?, n_caps, measure, seed)
}
