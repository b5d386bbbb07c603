//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line and then
//! asserts. The criteria run one at a time so their timings do not overlap.

mod common;

use std::f64::consts::PI;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use common::{disk_problem, equality_problem};
use qcqp_core::geometry::{boundary_equidistribution_test, cover_distance_2d, BoundaryPointSet, EllipsoidConstraint};
use qcqp_core::harness::{
    generate_problem_with, hash_seed, sample_boundary, solve_pipeline, ProblemOptions, Sampler, Structure,
};
use qcqp_core::linalg;
use qcqp_core::linearizer::{build_qp, default_points_per_ellipsoid, net_boundary_points, QcqpProblem};
use qcqp_core::nets::{generate_net, verify_net_property, NetConfig};
use qcqp_core::oracle::{solve_exact_bisection, solve_grid_bruteforce};
use qcqp_core::points::Points;
use qcqp_core::qpsolver::{kkt_residuals, solve_qp, SolverConfig, Status};

static SERIAL: Mutex<()> = Mutex::new(());

fn report(k: usize, ok: bool, elapsed: Duration, limit: Duration, detail: String) {
    let in_time = elapsed <= limit;
    let verdict = if ok && in_time { "PASS" } else { "FAIL" };
    println!("{verdict} criterion {k}: {detail} ({:.2}s, limit {}s)", elapsed.as_secs_f64(), limit.as_secs());
    assert!(ok, "criterion {k} failed: {detail}");
    assert!(in_time, "criterion {k} took {:.2}s", elapsed.as_secs_f64());
}

fn run(k: usize, limit_secs: u64, body: impl FnOnce() -> (bool, String)) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (ok, detail) = body();
    report(k, ok, start.elapsed(), Duration::from_secs(limit_secs), detail);
}

fn box_free(n: usize, seed: u64) -> QcqpProblem {
    generate_problem_with(n, seed, &ProblemOptions { with_box: false, structure: Structure::Dense }).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

fn rel_sq_error_for(p: &QcqpProblem, sampler: Sampler, n_points: usize, seed: u64) -> f64 {
    let exact = solve_exact_bisection(p).unwrap();
    let (r, mut row) = solve_pipeline(p, sampler, n_points, seed, &SolverConfig::default()).unwrap();
    row.set_reference(&r.x, &exact);
    row.rel_sq_error.unwrap()
}

#[test]
fn criterion_01_circle_cover_law() {
    run(1, 1, || {
        let e = EllipsoidConstraint::ball(vec![0.0, 0.0], 1.0).unwrap();
        let mut worst: f64 = 0.0;
        for m in 2..=10 {
            let n = 1usize << m;
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|k| {
                    let t = 2.0 * PI * k as f64 / n as f64;
                    vec![t.cos(), t.sin()]
                })
                .collect();
            let pts = BoundaryPointSet::new(Points::from_rows(2, &rows).unwrap(), e.clone()).unwrap();
            worst = worst.max((cover_distance_2d(&pts).unwrap() - (PI / n as f64).tan()).abs());
        }
        (worst <= 1e-9, format!("max |cover - tan(pi/N)| = {worst:.2e} for N = 4..1024"))
    });
}

#[test]
fn criterion_02_net_property() {
    run(2, 5, || {
        let cases = [(4, 2), (6, 2), (4, 3), (8, 1)];
        let failed: Vec<_> = cases
            .iter()
            .filter(|&&(m, s)| {
                let cfg = NetConfig::sobol(m, s).unwrap();
                !verify_net_property(&generate_net(&cfg).unwrap(), &cfg).unwrap()
            })
            .collect();
        (failed.is_empty(), format!("net property at (m, s) in {cases:?}, failures {failed:?}"))
    });
}

#[test]
fn criterion_03_measure_preserving_pipeline() {
    run(3, 10, || {
        let mut worst: f64 = 0.0;
        for n in [3usize, 10] {
            let p = box_free(n, 3);
            let pts = net_boundary_points(&p, 12).unwrap().remove(0);
            for (i, measure) in [0.1, 0.25, 0.5].into_iter().enumerate() {
                worst = worst.max(boundary_equidistribution_test(&pts, 200, measure, 100 + i as u64).unwrap());
            }
        }
        (worst < 0.05, format!("max cap deviation {worst:.4} at n = 3, 10 with N = 4096"))
    });
}

#[test]
fn criterion_04_oracle_cross_validation() {
    run(4, 30, || {
        let mut worst: f64 = 0.0;
        for seed in 0..25 {
            let p = box_free(2, 1000 + seed);
            let b = solve_exact_bisection(&p).unwrap();
            let g = solve_grid_bruteforce(&p, 2001).unwrap();
            worst = worst.max((b.objective - g.objective).abs());
        }
        (worst <= 1e-3, format!("max objective gap bisection vs grid {worst:.2e} on 25 planar instances"))
    });
}

#[test]
fn criterion_05_relaxation_inequality() {
    run(5, 120, || {
        let mut violations = 0;
        let mut worst = f64::NEG_INFINITY;
        for i in 0..50u64 {
            let n = [2usize, 5, 10][(i % 3) as usize];
            let p = box_free(n, 2000 + i);
            let exact = solve_exact_bisection(&p).unwrap();
            let (r, _) =
                solve_pipeline(&p, Sampler::Net, default_points_per_ellipsoid(n), 0, &SolverConfig::default()).unwrap();
            let excess = (r.objective - exact.objective) / (1.0 + exact.objective.abs());
            worst = worst.max(excess);
            if r.status != Status::Optimal || excess > 1e-6 {
                violations += 1;
            }
        }
        (violations == 0, format!("{violations} of 50 instances violate f(x(N)) <= f(x*), worst scaled excess {worst:.2e}"))
    });
}

#[test]
fn criterion_06_trend_in_n() {
    run(6, 60, || {
        let p = box_free(2, 0);
        let exact = solve_exact_bisection(&p).unwrap();
        let mut errs = Vec::new();
        let mut feas = 0.0;
        for m in 3..=10 {
            let (r, mut row) = solve_pipeline(&p, Sampler::Net, 1 << m, 0, &SolverConfig::default()).unwrap();
            row.set_reference(&r.x, &exact);
            errs.push(row.rel_sq_error.unwrap());
            feas = row.feasibility_error;
        }
        let rises = errs.windows(2).filter(|w| w[1] >= w[0]).count();
        (
            rises <= 1 && feas < 1e-6,
            format!("{rises} non-decreasing steps in rel_sq_error over N = 8..1024, final feasibility error {feas:.2e}"),
        )
    });
}

#[test]
fn criterion_07_rate() {
    run(7, 30, || {
        let a = [2.0 * 1f64.cos(), 2.0 * 1f64.sin()];
        let p = disk_problem(a, [0.0, 0.0], 1.0);
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for m in 4..=10 {
            let (r, _) = solve_pipeline(&p, Sampler::Net, 1 << m, 0, &SolverConfig::default()).unwrap();
            xs.push(((1u64 << m) as f64).ln());
            ys.push((r.objective - 1.0).abs().ln());
        }
        let k = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let slope = sxy / sxx;
        (slope <= -0.9, format!("log-log slope of |f gap| vs N on the unit circle {slope:.3}"))
    });
}

#[test]
fn criterion_08_sampler_ordering() {
    run(8, 300, || {
        let mut ok = true;
        let mut detail = Vec::new();
        for n in [5usize, 10] {
            let n_points = default_points_per_ellipsoid(n);
            let medians: Vec<f64> = Sampler::ALL
                .iter()
                .enumerate()
                .map(|(k, &s)| {
                    median(
                        (0..20u64)
                            .map(|seed| rel_sq_error_for(&box_free(n, seed), s, n_points, hash_seed(&[seed, k as u64])))
                            .collect(),
                    )
                })
                .collect();
            ok &= medians[0] <= medians[1] && medians[0] <= medians[2];
            detail.push(format!("n={n} medians net {:.3e} cube {:.3e} sphere {:.3e}", medians[0], medians[1], medians[2]));
        }
        (ok, detail.join("; "))
    });
}

#[test]
fn criterion_09_qp_solver_correctness() {
    run(9, 60, || {
        let cfg = SolverConfig::default();
        let mut worst_eq: f64 = 0.0;
        for case in 0..50u64 {
            let n = 2 + (case as usize * 7) % 49;
            let p = (1 + case as usize % 5).min(n);
            let e = equality_problem(5000 + case, n, p);
            let r = solve_qp(&e.qp, &cfg).unwrap();
            let d = linalg::norm2(&linalg::sub(&r.x, &e.x)) / linalg::norm2(&e.x).max(1.0);
            worst_eq = worst_eq.max(if r.status == Status::Optimal { d } else { f64::INFINITY });
        }
        let mut worst_kkt: f64 = 0.0;
        let mut optimal = 0;
        for n in [2usize, 5, 10] {
            for seed in 0..5u64 {
                for with_box in [false, true] {
                    let p = generate_problem_with(n, seed, &ProblemOptions { with_box, structure: Structure::Dense })
                        .unwrap();
                    for (k, &s) in Sampler::ALL.iter().enumerate() {
                        let pts = sample_boundary(&p, s, 1024, hash_seed(&[seed, k as u64])).unwrap();
                        let qp = build_qp(&p, pts).unwrap();
                        let r = solve_qp(&qp, &cfg).unwrap();
                        if r.status == Status::Optimal {
                            optimal += 1;
                            let kkt = kkt_residuals(&qp, &r.x, &r.multipliers).unwrap();
                            worst_kkt = worst_kkt
                                .max(kkt.stationarity)
                                .max(kkt.primal_eq)
                                .max(kkt.primal_ineq)
                                .max(kkt.complementarity);
                        }
                    }
                }
            }
        }
        (
            worst_eq <= 1e-6 && worst_kkt < 1e-6,
            format!(
                "dense KKT agreement {worst_eq:.2e} on 50 equality problems; max KKT residual {worst_kkt:.2e} over {optimal} optimal pipeline solves"
            ),
        )
    });
}

fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

#[test]
fn criterion_10_scalability_smoke() {
    run(10, 600, || {
        let opts = ProblemOptions { with_box: true, structure: Structure::Diagonal };
        let p = generate_problem_with(10_000, 0, &opts).unwrap();
        let (r, row) = solve_pipeline(&p, Sampler::Net, 1 << 14, 0, &SolverConfig::default()).unwrap();
        drop(p);
        let peak = peak_rss_bytes();
        let mem_ok = peak.is_none_or(|b| b < 8 << 30);
        let mem = peak.map_or("unknown".to_string(), |b| format!("{:.2} GB", b as f64 / (1u64 << 30) as f64));
        (
            r.status == Status::Optimal && mem_ok,
            format!("n = 10^4, N = 2^14: status {}, {} iterations, solve {:.1}s, peak memory {mem}", row.status, row.iterations, row.solve_time),
        )
    });
}
