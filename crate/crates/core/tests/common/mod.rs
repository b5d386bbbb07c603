#![allow(dead_code)]

use faer::Mat;
use qcqp_core::geometry::EllipsoidConstraint;
use qcqp_core::linalg::{self, RowMatrix, SpdMatrix};
use qcqp_core::linearizer::{QcqpProblem, QpProblem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> SpdMatrix {
    let m = gaussian(rng, n, n);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let s: f64 = (0..n).map(|k| m[i][k] * m[j][k]).sum();
                    s / n as f64 + if i == j { 0.5 } else { 0.0 }
                })
                .collect()
        })
        .collect();
    SpdMatrix::from_rows(&rows).unwrap()
}

pub struct EqProblem {
    pub qp: QpProblem,
    pub x: Vec<f64>,
    pub nu: Vec<f64>,
}

/// Random equality-only QP and its solution from the dense KKT system
/// `[2A C^T; C 0] [x; nu] = [2Aa; c]`.
pub fn equality_problem(seed: u64, n: usize, p: usize) -> EqProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_spd(&mut rng, n);
    let center: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let c_rows = gaussian(&mut rng, p, n);
    let c: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let k = n + p;
    let mut kkt = Mat::<f64>::zeros(k, k);
    for i in 0..n {
        for j in 0..n {
            kkt[(i, j)] = 2.0 * a.get(i, j);
        }
    }
    for (r, row) in c_rows.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = row[j];
            kkt[(j, n + r)] = row[j];
        }
    }
    let mut rhs: Vec<f64> = a.mul_vec(&center).into_iter().map(|v| 2.0 * v).collect();
    rhs.extend(&c);
    let sol = linalg::solve_dense(&kkt, &rhs).unwrap();
    let qp = QpProblem::new(
        a,
        center,
        RowMatrix::empty(n),
        vec![],
        RowMatrix::from_rows(&c_rows, n).unwrap(),
        c,
        None,
    )
    .unwrap();
    EqProblem { qp, x: sol[..n].to_vec(), nu: sol[n..].to_vec() }
}

/// `min |x - a|^2` over the ellipsoid `|x - b|^2 <= r^2` in the plane.
pub fn disk_problem(a: [f64; 2], b: [f64; 2], r: f64) -> QcqpProblem {
    let e = EllipsoidConstraint::ball(b.to_vec(), r).unwrap();
    QcqpProblem::new(SpdMatrix::identity(2), a.to_vec(), RowMatrix::empty(2), vec![], vec![e], None).unwrap()
}
