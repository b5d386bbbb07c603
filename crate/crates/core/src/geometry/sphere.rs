//! Cube-to-sphere map in cylindrical coordinates and the uniform sphere sampler.
//!
//! `y_1` sets the angle `2 pi y_1` on the circle. Each further coordinate
//! `y_d` sets a height `t_d`, and the point is lifted as
//! `x_d = (sqrt(1 - t_d^2) x_{d-1}, t_d)`. The height is chosen so that
//! `P(T >= t_d) = y_d` under the normalized surface measure of `S^d`. On `S^2`
//! this is `t = 1 - 2y` exactly (Archimedes). In general the polar angle
//! `theta = acos t` has density proportional to `sin^(d-1) theta`, which is
//! inverted numerically.

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::nets::{stream_rng, CubePointSet};
use crate::points::Points;

use super::SpherePointSet;

const GL_NODES: [f64; 4] = [
    -0.861_136_311_594_052_6,
    -0.339_981_043_584_856_3,
    0.339_981_043_584_856_3,
    0.861_136_311_594_052_6,
];
const GL_WEIGHTS: [f64; 4] = [
    0.347_854_845_137_453_9,
    0.652_145_154_862_546_1,
    0.652_145_154_862_546_1,
    0.347_854_845_137_453_9,
];

/// Distribution of the polar angle on `S^d` (density `sin^(d-1) / W_d` on `[0, pi]`).
#[derive(Debug, Clone, Copy)]
struct PolarLaw {
    d: usize,
    log_norm: f64,
    panel: f64,
}

impl PolarLaw {
    fn new(d: usize) -> Self {
        let df = d as f64;
        // W_d = sqrt(pi) Gamma(d/2) / Gamma((d+1)/2)
        let log_w = 0.5 * std::f64::consts::PI.ln() + ln_gamma(df / 2.0) - ln_gamma((df + 1.0) / 2.0);
        PolarLaw { d, log_norm: -log_w, panel: (0.25 / df.sqrt()).min(std::f64::consts::PI / 16.0) }
    }

    fn density(&self, theta: f64) -> f64 {
        let s = theta.sin();
        if s <= 0.0 {
            return if self.d == 1 { self.log_norm.exp() } else { 0.0 };
        }
        ((self.d - 1) as f64 * s.ln() + self.log_norm).exp()
    }

    fn integral(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        let panels = ((b - a) / self.panel).ceil().max(1.0) as usize;
        let h = (b - a) / panels as f64;
        let mut sum = 0.0;
        for k in 0..panels {
            let mid = a + (k as f64 + 0.5) * h;
            for (x, w) in GL_NODES.iter().zip(GL_WEIGHTS) {
                sum += w * self.density(mid + 0.5 * h * x);
            }
        }
        0.5 * h * sum
    }

    /// Solves `G(theta) = p` for `theta >= from`, given `G(from) = g_from <= p`.
    fn solve_from(&self, from: f64, g_from: f64, p: f64) -> f64 {
        use std::f64::consts::PI;
        if p >= 1.0 {
            return PI;
        }
        let (mut lo, mut hi) = (from, PI);
        let f0 = self.density(from);
        let mut theta = if f0 > 0.0 { from + (p - g_from) / f0 } else { 0.5 * (lo + hi) };
        if !(theta > lo && theta < hi) {
            theta = 0.5 * (lo + hi);
        }
        for _ in 0..200 {
            let r = g_from + self.integral(from, theta) - p;
            if r > 0.0 {
                hi = theta;
            } else {
                lo = theta;
            }
            let f = self.density(theta);
            let step = if f > 0.0 { r / f } else { f64::NAN };
            if step.abs() <= 4.0 * f64::EPSILON * theta.max(1.0) || hi - lo <= f64::EPSILON {
                return (theta - step).clamp(lo, hi);
            }
            let mut next = theta - step;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            theta = next;
        }
        theta
    }
}

/// Height `t` on `S^d` with `P(T >= t) = y` under normalized surface measure.
pub fn polar_height(d: usize, y: f64) -> f64 {
    use std::f64::consts::{FRAC_PI_2, PI};
    match d {
        0 => panic!("polar_height needs d >= 1"),
        1 => (PI * y).cos(),
        2 => 1.0 - 2.0 * y,
        _ => {
            let law = PolarLaw::new(d);
            let p = y.max(1.0 - y);
            let theta = law.solve_from(FRAC_PI_2, 0.5, p);
            let theta = if y >= 0.5 { theta } else { PI - theta };
            theta.cos()
        }
    }
}

/// `polar_height` for many values at once: one sorted sweep outward from
/// the equator, so each solve starts next to its answer.
pub fn polar_heights(d: usize, ys: &[f64]) -> Vec<f64> {
    use std::f64::consts::{FRAC_PI_2, PI};
    if d <= 2 {
        return ys.iter().map(|&y| polar_height(d, y)).collect();
    }
    let law = PolarLaw::new(d);
    let mut order: Vec<(f64, usize)> = ys.iter().enumerate().map(|(i, &y)| (y.max(1.0 - y), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = vec![0.0; ys.len()];
    let (mut theta, mut g) = (FRAC_PI_2, 0.5);
    let mut last_p = f64::NAN;
    for (p, i) in order {
        if p != last_p {
            if p > g {
                let next = law.solve_from(theta, g, p);
                g += law.integral(theta, next);
                theta = next;
            }
            last_p = p;
        }
        let y = ys[i];
        out[i] = if y >= 0.5 { theta.cos() } else { (PI - theta).cos() };
    }
    out
}

fn check_cube_coord(y: f64) -> Result<()> {
    if !(0.0..1.0).contains(&y) {
        return Err(Error::invalid(format!("cube coordinate {y} outside [0, 1)")));
    }
    Ok(())
}

/// Lifts `(cos, sin, t_2, .., t_{n-1})` to the sphere in place by a backward
/// pass of the `sqrt(1 - t^2)` scale factors.
fn lift_in_place(x: &mut [f64]) {
    let mut scale = 1.0;
    for k in (2..x.len()).rev() {
        let t = x[k];
        x[k] = t * scale;
        scale *= (1.0 - t * t).max(0.0).sqrt();
    }
    x[0] *= scale;
    x[1] *= scale;
}

/// Maps `y in [0,1)^(n-1)` to the unit sphere in `R^n` (`n >= 2`).
pub fn map_cube_to_sphere(y: &[f64]) -> Result<Vec<f64>> {
    if y.is_empty() {
        return Err(Error::invalid("the sphere map needs n >= 2 (at least one cube coordinate)"));
    }
    for &v in y {
        check_cube_coord(v)?;
    }
    let n = y.len() + 1;
    let mut x = vec![0.0; n];
    let (s, c) = (2.0 * std::f64::consts::PI * y[0]).sin_cos();
    x[0] = c;
    x[1] = s;
    for d in 2..n {
        x[d] = polar_height(d, y[d - 1]);
    }
    lift_in_place(&mut x);
    Ok(x)
}

/// Batch form of [`map_cube_to_sphere`].
pub fn map_cube_points(cube: &CubePointSet) -> Result<SpherePointSet> {
    let s = cube.dim();
    let n = s + 1;
    let count = cube.len();
    let src = cube.points.as_slice();
    src.iter().try_for_each(|&v| check_cube_coord(v))?;
    let mut data = vec![0.0; count * n];
    for i in 0..count {
        let (sn, cs) = (2.0 * std::f64::consts::PI * src[i * s]).sin_cos();
        data[i * n] = cs;
        data[i * n + 1] = sn;
    }
    let mut column = vec![0.0; count];
    for d in 2..n {
        for (i, c) in column.iter_mut().enumerate() {
            *c = src[i * s + d - 1];
        }
        let heights = polar_heights(d, &column);
        for (i, t) in heights.into_iter().enumerate() {
            data[i * n + d] = t;
        }
    }
    for x in data.chunks_exact_mut(n) {
        lift_in_place(x);
    }
    SpherePointSet::new(Points::new(n, data)?)
}

/// I.i.d. uniform points on the unit sphere in `R^n` from normalized Gaussians;
/// point `i` uses ChaCha8 stream `i` of `seed`.
pub fn sample_uniform_sphere(n_points: usize, n: usize, seed: u64) -> Result<SpherePointSet> {
    if n == 0 {
        return Err(Error::invalid("sphere dimension n must be >= 1"));
    }
    if n_points == 0 {
        return Err(Error::invalid("n_points must be >= 1"));
    }
    let mut data = Vec::with_capacity(n_points * n);
    let mut g = vec![0.0; n];
    for i in 0..n_points {
        let mut rng = stream_rng(seed, i as u64);
        loop {
            for v in g.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-300 {
                data.extend(g.iter().map(|v| v / norm));
                break;
            }
        }
    }
    SpherePointSet::new(Points::new(n, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::function::beta::beta_reg;

    #[test]
    fn circle_examples() {
        let x = map_cube_to_sphere(&[0.0]).unwrap();
        assert_eq!(x, vec![1.0, 0.0]);
        assert!(map_cube_to_sphere(&[]).is_err());
        assert!(map_cube_to_sphere(&[1.0]).is_err());
    }

    #[test]
    fn two_sphere_examples() {
        let x = map_cube_to_sphere(&[0.25, 0.5]).unwrap();
        assert!((x[0]).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15 && x[2] == 0.0);
        let x = map_cube_to_sphere(&[0.5, 0.25]).unwrap();
        assert!((x[0] + 0.75f64.sqrt()).abs() < 1e-15);
        assert!(x[1].abs() < 1e-15);
        assert_eq!(x[2], 0.5);
        assert!((x.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn origin_maps_to_north_pole_above_the_circle() {
        assert_eq!(map_cube_to_sphere(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0, 1.0]);
        let x = map_cube_to_sphere(&[0.0; 4]).unwrap();
        assert_eq!(x, vec![0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn heights_match_incomplete_beta_oracle() {
        // P(T >= t) = I_{(1-t)/2}(d/2, d/2)
        for d in [1usize, 2, 3, 4, 7, 10, 49, 500, 5000] {
            for &y in &[1e-6, 0.01, 0.1, 0.25, 0.4, 0.5, 0.6, 0.77, 0.99, 1.0 - 1e-6] {
                let t = polar_height(d, y);
                let a = d as f64 / 2.0;
                let tail = beta_reg(a, a, (1.0 - t) / 2.0);
                assert!((tail - y).abs() < 1e-11, "d={d} y={y} t={t} tail={tail}");
            }
        }
    }

    #[test]
    fn batch_heights_match_single_heights() {
        let ys: Vec<f64> = (0..257).map(|k| (k as f64 * 0.618_033_988_749_895) % 1.0).collect();
        for d in [3usize, 9, 120] {
            let batch = polar_heights(d, &ys);
            let a = d as f64 / 2.0;
            for (y, t) in ys.iter().zip(&batch) {
                assert!((polar_height(d, *y) - t).abs() < 1e-12, "d={d} y={y}");
                assert!((beta_reg(a, a, (1.0 - t) / 2.0) - y).abs() < 1e-12, "d={d} y={y}");
            }
        }
    }

    #[test]
    fn uniform_sphere_sampler() {
        let a = sample_uniform_sphere(10_000, 3, 5).unwrap();
        let b = sample_uniform_sphere(10_000, 3, 5).unwrap();
        assert_eq!(a, b);
        let mut mean = [0.0; 3];
        for p in a.points.iter() {
            assert!((p.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
            for k in 0..3 {
                mean[k] += p[k] / 10_000.0;
            }
        }
        assert!(mean.iter().map(|v| v * v).sum::<f64>().sqrt() <= 0.05);
        assert!(sample_uniform_sphere(1, 0, 1).is_err());
    }
}
