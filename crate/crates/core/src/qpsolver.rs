//! ADMM (operator splitting) solver for strongly convex QPs.
//!
//! The problem `min (x-a)^T A (x-a)` over `Gx <= h`, `Cx = c`, `l <= x <= u`
//! is written as `min 1/2 x^T P x + q^T x` over `lo <= Kx <= hi` with
//! `P = 2A`, `q = -2Aa` and `K = [G; C; I]`. Each iteration solves
//! `(P + sigma I + K^T R K) x = rhs` with a cached Cholesky factor, projects
//! onto the bounds and updates the duals. `R` is `rho` on inequality rows and
//! `1e3 rho` on equality rows.
//!
//! Data are equilibrated (Ruiz scaling of the KKT matrix plus a cost scale),
//! but the scaling is applied on the fly: `G` is never copied. The Gram matrix
//! `(E G D)^T (E G D)` is formed once; a change of `rho` only refactors.
//!
//! All arithmetic is sequential, so a solve is bitwise reproducible.

use std::io::Write;
use std::time::Instant;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Cholesky, RowMatrix, SpdMatrix};
use crate::linearizer::QpProblem;

const EQ_RHO_FACTOR: f64 = 1e3;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const MIN_SCALING: f64 = 1e-4;
const MAX_SCALING: f64 = 1e4;
const POLISH_DELTA: f64 = 1e-6;
const POLISH_REFINE_STEPS: usize = 5;
const POLISH_ROUNDS: usize = 25;
const SWAP_TRIALS: usize = 8;
const POLISH_FEAS_TOL: f64 = 1e-10;
const EARLY_POLISH_FACTOR: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Initial penalty on inequality rows.
    pub rho: f64,
    /// Proximal term on `x`.
    pub sigma: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// Tolerance of the primal infeasibility certificate.
    pub eps_infeasible: f64,
    pub max_iter: usize,
    /// Relaxation parameter in `[1, 1.8]`.
    pub over_relaxation: f64,
    pub adaptive_rho: bool,
    /// Minimum number of iterations between two refactorizations.
    pub adaptive_rho_interval: usize,
    /// Ruiz equilibration passes; 0 disables scaling.
    pub scaling_iters: usize,
    pub polish: bool,
    /// Residuals are evaluated every this many iterations.
    pub check_interval: usize,
    /// Record one trace row per iteration (forces a residual check every iteration).
    pub trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            rho: 0.1,
            sigma: 1e-6,
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            eps_infeasible: 1e-5,
            max_iter: 10_000,
            over_relaxation: 1.5,
            adaptive_rho: true,
            adaptive_rho_interval: 50,
            scaling_iters: 10,
            polish: true,
            check_interval: 10,
            trace: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("rho", self.rho)?;
        positive("sigma", self.sigma)?;
        positive("eps_abs", self.eps_abs)?;
        positive("eps_rel", self.eps_rel)?;
        positive("eps_infeasible", self.eps_infeasible)?;
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be >= 1"));
        }
        if !(1.0..=1.8).contains(&self.over_relaxation) {
            return Err(Error::invalid(format!("over_relaxation {} outside [1, 1.8]", self.over_relaxation)));
        }
        if self.check_interval == 0 || self.adaptive_rho_interval == 0 {
            return Err(Error::invalid("check and adaptation intervals must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    #[serde(rename = "optimal")]
    Optimal,
    #[serde(rename = "max_iter")]
    MaxIter,
    #[serde(rename = "infeasible-detected")]
    Infeasible,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Optimal => "optimal",
            Status::MaxIter => "max_iter",
            Status::Infeasible => "infeasible-detected",
        }
    }
}

/// Lagrange multipliers with the sign convention
/// `2A(x-a) + G^T ineq + C^T eq + upper - lower = 0`, `ineq, upper, lower >= 0`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub ineq: Vec<f64>,
    pub eq: Vec<f64>,
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
}

impl Multipliers {
    pub fn zeros(qp: &QpProblem) -> Self {
        let nb = if qp.bounds().is_some() { qp.dim() } else { 0 };
        Multipliers {
            ineq: vec![0.0; qp.g().nrows()],
            eq: vec![0.0; qp.eq_rhs().len()],
            upper: vec![0.0; nb],
            lower: vec![0.0; nb],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub objective: f64,
    /// ADMM fixed-point residual `sqrt(sigma |dx|^2 + sum_i rho_i dv_i^2)` in
    /// scaled variables, `v = z + y / rho`; non-increasing while `rho` is fixed.
    pub merit: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub x: Vec<f64>,
    /// `(x-a)^T A (x-a)`.
    pub objective: f64,
    pub status: Status,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Seconds.
    pub wall_time: f64,
    pub multipliers: Multipliers,
    pub polished: bool,
    pub rho: f64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub trace: Vec<TraceRow>,
}

/// Writes a trace as CSV with a header row.
pub fn write_trace_csv<W: Write>(rows: &[TraceRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    /// `|2A(x-a) + G^T ineq + C^T eq + upper - lower|_inf`.
    pub stationarity: f64,
    /// `|Cx - c|_inf`.
    pub primal_eq: f64,
    /// Largest violation of `Gx <= h` and of the box.
    pub primal_ineq: f64,
    /// Largest `|multiplier * slack|` over inequality and box rows, or the
    /// largest negative multiplier if that is bigger.
    pub complementarity: f64,
}

struct KktParts {
    res: KktResiduals,
    /// `max(|Px|, |q|, |K^T y|)` for the relative stationarity tolerance.
    stat_scale: f64,
}

/// The four KKT residual norms of `(x, multipliers)`.
pub fn kkt_residuals(qp: &QpProblem, x: &[f64], m: &Multipliers) -> Result<KktResiduals> {
    Ok(kkt_parts(qp, x, m)?.res)
}

fn kkt_parts(qp: &QpProblem, x: &[f64], m: &Multipliers) -> Result<KktParts> {
    let n = qp.dim();
    let nb = if qp.bounds().is_some() { n } else { 0 };
    if x.len() != n
        || m.ineq.len() != qp.g().nrows()
        || m.eq.len() != qp.eq_rhs().len()
        || m.upper.len() != nb
        || m.lower.len() != nb
    {
        return Err(Error::dims("x or multipliers do not match the QP"));
    }
    let diff = linalg::sub(x, qp.center());
    let grad: Vec<f64> = qp.objective().mul_vec(&diff).into_iter().map(|v| 2.0 * v).collect();
    let q_norm = 2.0 * linalg::norm_inf(&qp.objective().mul_vec(qp.center()));
    let px_norm = 2.0 * linalg::norm_inf(&qp.objective().mul_vec(x));
    let mut kty = qp.g().t_mul_vec(&m.ineq);
    if !m.eq.is_empty() {
        let t = qp.eq_matrix().t_mul_vec(&m.eq);
        kty.iter_mut().zip(&t).for_each(|(a, b)| *a += b);
    }
    for i in 0..nb {
        kty[i] += m.upper[i] - m.lower[i];
    }
    let stationarity = linalg::norm_inf(&linalg::add(&grad, &kty));

    let primal_eq = qp.equality_residual(x);
    let gx = qp.g().mul_vec(x);
    let mut primal_ineq = 0.0f64;
    let mut comp = 0.0f64;
    for ((gi, hi), li) in gx.iter().zip(qp.h()).zip(&m.ineq) {
        primal_ineq = primal_ineq.max(gi - hi);
        comp = comp.max((li * (gi - hi)).abs()).max(-li);
    }
    if let Some(b) = qp.bounds() {
        for i in 0..n {
            primal_ineq = primal_ineq.max(x[i] - b.upper[i]).max(b.lower[i] - x[i]);
            comp = comp
                .max((m.upper[i] * (x[i] - b.upper[i])).abs())
                .max((m.lower[i] * (b.lower[i] - x[i])).abs())
                .max(-m.upper[i])
                .max(-m.lower[i]);
        }
    }
    Ok(KktParts {
        res: KktResiduals { stationarity, primal_eq, primal_ineq, complementarity: comp },
        stat_scale: px_norm.max(q_norm).max(linalg::norm_inf(&kty)),
    })
}

/// Checks the optimality conditions that an `Optimal` status promises.
fn meets_tolerances(qp: &QpProblem, x: &[f64], m: &Multipliers, eps_abs: f64, eps_rel: f64) -> Result<bool> {
    let parts = kkt_parts(qp, x, m)?;
    let r = parts.res;
    let eq_tol = eps_abs + eps_rel * linalg::norm_inf(qp.eq_rhs());
    let mut ineq_scale = linalg::norm_inf(qp.h());
    if let Some(b) = qp.bounds() {
        ineq_scale = ineq_scale.max(linalg::norm_inf(&b.lower)).max(linalg::norm_inf(&b.upper));
    }
    let ineq_tol = eps_abs + eps_rel * ineq_scale;
    let stat_tol = eps_abs + eps_rel * parts.stat_scale;
    Ok(r.primal_eq <= eq_tol && r.primal_ineq <= ineq_tol && r.stationarity <= stat_tol)
}

/// Scaled problem data. Rows are ordered `[G; C; box]`.
struct Work<'a> {
    qp: &'a QpProblem,
    n: usize,
    mg: usize,
    p: usize,
    nb: usize,
    d: Vec<f64>,
    e: Vec<f64>,
    cost: f64,
    p_mat: SpdMatrix,
    q: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    rho_scale: Vec<f64>,
    gram: Option<Mat<f64>>,
}

impl<'a> Work<'a> {
    fn new(qp: &'a QpProblem, scaling_iters: usize) -> Self {
        let n = qp.dim();
        let mg = qp.g().nrows();
        let p = qp.eq_rhs().len();
        let nb = if qp.bounds().is_some() { n } else { 0 };
        let m = mg + p + nb;
        let p_orig = qp.objective().scaled(2.0);
        let q_orig: Vec<f64> = qp.objective().mul_vec(qp.center()).into_iter().map(|v| -2.0 * v).collect();

        let mut d = vec![1.0; n];
        let mut e = vec![1.0; m];
        let mut cost = 1.0;
        let clamp = |v: f64| {
            if v < MIN_SCALING {
                1.0
            } else {
                v.min(MAX_SCALING)
            }
        };
        for _ in 0..scaling_iters {
            let (mut col, row) = constraint_norms(qp, &d, &e);
            let pcol = p_orig.congruence_diag(&d).scaled(cost).col_inf_norms();
            col.iter_mut().zip(&pcol).for_each(|(c, pc)| *c = c.max(*pc));
            d.iter_mut().zip(&col).for_each(|(di, c)| *di /= clamp(*c).sqrt());
            e.iter_mut().zip(&row).for_each(|(ei, r)| *ei /= clamp(*r).sqrt());
            let pcol = p_orig.congruence_diag(&d).scaled(cost).col_inf_norms();
            let mean = pcol.iter().sum::<f64>() / n as f64;
            let q_inf = q_orig.iter().zip(&d).fold(0.0f64, |mx, (qi, di)| mx.max((cost * qi * di).abs()));
            cost *= 1.0 / clamp(mean.max(q_inf));
        }
        let p_mat = p_orig.congruence_diag(&d).scaled(cost);
        let q: Vec<f64> = q_orig.iter().zip(&d).map(|(qi, di)| cost * qi * di).collect();

        let mut lo = Vec::with_capacity(m);
        let mut hi = Vec::with_capacity(m);
        let mut rho_scale = Vec::with_capacity(m);
        for (i, h) in qp.h().iter().enumerate() {
            lo.push(f64::NEG_INFINITY);
            hi.push(e[i] * h);
            rho_scale.push(1.0);
        }
        for (i, c) in qp.eq_rhs().iter().enumerate() {
            lo.push(e[mg + i] * c);
            hi.push(e[mg + i] * c);
            rho_scale.push(EQ_RHO_FACTOR);
        }
        if let Some(b) = qp.bounds() {
            for i in 0..n {
                let ei = e[mg + p + i];
                lo.push(ei * b.lower[i]);
                hi.push(ei * b.upper[i]);
                rho_scale.push(if b.lower[i] == b.upper[i] { EQ_RHO_FACTOR } else { 1.0 });
            }
        }

        let gram = if mg + p > 0 {
            let mut gm = Mat::<f64>::zeros(n, n);
            if mg > 0 {
                linalg::add_scaled_gram_lower(&mut gm, qp.g(), &e[..mg], &d, 1.0);
            }
            if p > 0 {
                linalg::add_scaled_gram_lower(&mut gm, qp.eq_matrix(), &e[mg..mg + p], &d, EQ_RHO_FACTOR);
            }
            Some(gm)
        } else {
            None
        };
        Work { qp, n, mg, p, nb, d, e, cost, p_mat, q, lo, hi, rho_scale, gram }
    }

    fn m(&self) -> usize {
        self.mg + self.p + self.nb
    }

    /// `K~ x` in scaled variables.
    fn a_mul(&self, x: &[f64]) -> Vec<f64> {
        let (mg, p) = (self.mg, self.p);
        let xd: Vec<f64> = x.iter().zip(&self.d).map(|(a, b)| a * b).collect();
        let mut out = Vec::with_capacity(self.m());
        if mg > 0 {
            out.extend(self.qp.g().mul_vec(&xd).into_iter().zip(&self.e[..mg]).map(|(v, e)| v * e));
        }
        if p > 0 {
            out.extend(self.qp.eq_matrix().mul_vec(&xd).into_iter().zip(&self.e[mg..mg + p]).map(|(v, e)| v * e));
        }
        if self.nb > 0 {
            out.extend(xd.iter().zip(&self.e[mg + p..]).map(|(v, e)| v * e));
        }
        out
    }

    /// `K~^T y` in scaled variables.
    fn at_mul(&self, y: &[f64]) -> Vec<f64> {
        let (mg, p, n) = (self.mg, self.p, self.n);
        let mut out = vec![0.0; n];
        if mg > 0 {
            let yg: Vec<f64> = y[..mg].iter().zip(&self.e[..mg]).map(|(a, b)| a * b).collect();
            out = self.qp.g().t_mul_vec(&yg);
        }
        if p > 0 {
            let yc: Vec<f64> = y[mg..mg + p].iter().zip(&self.e[mg..mg + p]).map(|(a, b)| a * b).collect();
            let t = self.qp.eq_matrix().t_mul_vec(&yc);
            out.iter_mut().zip(&t).for_each(|(a, b)| *a += b);
        }
        if self.nb > 0 {
            for i in 0..n {
                out[i] += y[mg + p + i] * self.e[mg + p + i];
            }
        }
        out.iter_mut().zip(&self.d).for_each(|(a, b)| *a *= b);
        out
    }

    fn factor(&self, rho: f64, sigma: f64) -> Result<Cholesky> {
        let n = self.n;
        let mut k = match &self.gram {
            Some(g) => Mat::from_fn(n, n, |i, j| if i >= j { rho * g[(i, j)] } else { 0.0 }),
            None => Mat::zeros(n, n),
        };
        self.p_mat.add_into(&mut k, 1.0);
        let off = self.mg + self.p;
        for i in 0..n {
            k[(i, i)] += sigma;
            if self.nb > 0 {
                let s = self.e[off + i] * self.d[i];
                k[(i, i)] += rho * self.rho_scale[off + i] * s * s;
            }
        }
        linalg::mirror_lower(&mut k);
        Cholesky::factor(k).map_err(|e| Error::Factorization(format!("KKT matrix: {e}")))
    }

    fn unscale_x(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.d).map(|(a, b)| a * b).collect()
    }

    fn unscale_y(&self, y: &[f64]) -> Multipliers {
        let (mg, p) = (self.mg, self.p);
        let un: Vec<f64> = y.iter().zip(&self.e).map(|(a, b)| a * b / self.cost).collect();
        let mut m = Multipliers { ineq: un[..mg].to_vec(), eq: un[mg..mg + p].to_vec(), ..Default::default() };
        if self.nb > 0 {
            m.upper = un[mg + p..].iter().map(|v| v.max(0.0)).collect();
            m.lower = un[mg + p..].iter().map(|v| (-v).max(0.0)).collect();
        }
        m
    }

    /// Row `i` of `K~` as a dense vector.
    fn scaled_row(&self, i: usize) -> Vec<f64> {
        let (mg, p) = (self.mg, self.p);
        let ei = self.e[i];
        if i < mg {
            self.qp.g().row(i).iter().zip(&self.d).map(|(a, b)| ei * a * b).collect()
        } else if i < mg + p {
            self.qp.eq_matrix().row(i - mg).iter().zip(&self.d).map(|(a, b)| ei * a * b).collect()
        } else {
            let j = i - mg - p;
            let mut r = vec![0.0; self.n];
            r[j] = ei * self.d[j];
            r
        }
    }
}

/// Column and row infinity norms of `E K D` without forming it.
fn constraint_norms(qp: &QpProblem, d: &[f64], e: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = qp.dim();
    let mg = qp.g().nrows();
    let p = qp.eq_rhs().len();
    let mut col = vec![0.0f64; n];
    let mut row = Vec::with_capacity(e.len());
    let mut scan = |mat: &RowMatrix, es: &[f64], row: &mut Vec<f64>| {
        for (r, ei) in mat.rows().zip(es) {
            let mut rmax = 0.0f64;
            for ((v, dj), cj) in r.iter().zip(d).zip(col.iter_mut()) {
                let a = (ei * v * dj).abs();
                rmax = rmax.max(a);
                *cj = cj.max(a);
            }
            row.push(rmax);
        }
    };
    scan(qp.g(), &e[..mg], &mut row);
    scan(qp.eq_matrix(), &e[mg..mg + p], &mut row);
    if qp.bounds().is_some() {
        for i in 0..n {
            let a = (e[mg + p + i] * d[i]).abs();
            row.push(a);
            col[i] = col[i].max(a);
        }
    }
    (col, row)
}

struct Residuals {
    primal: f64,
    dual: f64,
    eps_primal: f64,
    eps_dual: f64,
    /// `|Kx|`, `|z|` and `|Px|, |K^T y|, |q|` maxima used for rho adaptation.
    primal_scale: f64,
    dual_scale: f64,
}

fn residuals(w: &Work, x: &[f64], z: &[f64], ax: &[f64], y: &[f64], eps_abs: f64, eps_rel: f64) -> Residuals {
    let mut primal = 0.0f64;
    let mut ax_n = 0.0f64;
    let mut z_n = 0.0f64;
    for ((a, zi), ei) in ax.iter().zip(z).zip(&w.e) {
        primal = primal.max(((a - zi) / ei).abs());
        ax_n = ax_n.max((a / ei).abs());
        z_n = z_n.max((zi / ei).abs());
    }
    let px = w.p_mat.mul_vec(x);
    let aty = w.at_mul(y);
    let mut dual = 0.0f64;
    let (mut px_n, mut aty_n, mut q_n) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..w.n {
        let s = 1.0 / (w.d[i] * w.cost);
        dual = dual.max(((px[i] + w.q[i] + aty[i]) * s).abs());
        px_n = px_n.max((px[i] * s).abs());
        aty_n = aty_n.max((aty[i] * s).abs());
        q_n = q_n.max((w.q[i] * s).abs());
    }
    let primal_scale = ax_n.max(z_n);
    let dual_scale = px_n.max(aty_n).max(q_n);
    Residuals {
        primal,
        dual,
        eps_primal: eps_abs + eps_rel * primal_scale,
        eps_dual: eps_abs + eps_rel * dual_scale,
        primal_scale,
        dual_scale,
    }
}

/// Primal infeasibility certificate from the dual step `dy` (scaled).
fn infeasibility_certificate(w: &Work, dy: &[f64], eps: f64) -> bool {
    let norm = dy.iter().zip(&w.e).fold(0.0f64, |m, (v, e)| m.max((v * e).abs()));
    if norm <= 1e-30 {
        return false;
    }
    let tol = eps * norm;
    let mut support = 0.0;
    for ((v, lo), hi) in dy.iter().zip(&w.lo).zip(&w.hi) {
        if *v > 0.0 {
            if hi.is_infinite() {
                if v.abs() > tol {
                    return false;
                }
            } else {
                support += hi * v;
            }
        } else if *v < 0.0 {
            if lo.is_infinite() {
                if v.abs() > tol {
                    return false;
                }
            } else {
                support += lo * v;
            }
        }
    }
    if support >= -tol {
        return false;
    }
    let aty = w.at_mul(dy);
    let dual = aty.iter().zip(&w.d).fold(0.0f64, |m, (a, d)| m.max((a / d).abs()));
    dual <= tol
}

/// Solves the QP. Non-convergence is reported through `status`, not as an error.
pub fn solve_qp(qp: &QpProblem, cfg: &SolverConfig) -> Result<SolveReport> {
    cfg.validate()?;
    let start = Instant::now();
    let w = Work::new(qp, cfg.scaling_iters);
    let (n, m) = (w.n, w.m());
    let alpha = cfg.over_relaxation;
    let sigma = cfg.sigma;
    let mut rho = cfg.rho.clamp(RHO_MIN, RHO_MAX);
    let mut chol = w.factor(rho, sigma)?;
    let mut last_factor_iter = 0usize;

    let mut x = vec![0.0; n];
    // z = proj(v) with v = z + y / rho, so the first step is already a splitting step
    let mut z: Vec<f64> = (0..m).map(|i| 0.0f64.clamp(w.lo[i], w.hi[i])).collect();
    let mut y = vec![0.0; m];
    let mut ax = vec![0.0; m];
    let mut trace = Vec::new();
    let check_every = if cfg.trace { 1 } else { cfg.check_interval };
    let (mut eps_abs, mut eps_rel) = (cfg.eps_abs, cfg.eps_rel);
    let mut last_res: Option<Residuals> = None;
    let mut status = Status::MaxIter;
    let mut iterations = cfg.max_iter;
    let mut final_x: Option<(Vec<f64>, Multipliers, bool)> = None;
    let mut next_polish = 0usize;
    let mut polish_gap = cfg.check_interval.max(1) * 5;

    for iter in 1..=cfg.max_iter {
        // x-step
        let mut rhs: Vec<f64> = x.iter().zip(&w.q).map(|(xi, qi)| sigma * xi - qi).collect();
        if m > 0 {
            let wv: Vec<f64> = (0..m).map(|i| rho * w.rho_scale[i] * z[i] - y[i]).collect();
            let t = w.at_mul(&wv);
            rhs.iter_mut().zip(&t).for_each(|(r, v)| *r += v);
        }
        chol.solve_in_place(&mut rhs);
        let xt = rhs;
        let zt = if m > 0 { w.a_mul(&xt) } else { Vec::new() };

        let x_new: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let mut merit = 0.0;
        merit += x_new.iter().zip(&x).map(|(a, b)| sigma * (a - b) * (a - b)).sum::<f64>();
        let mut dy = vec![0.0; m];
        for i in 0..m {
            let ri = rho * w.rho_scale[i];
            let zr = alpha * zt[i] + (1.0 - alpha) * z[i];
            let z_new = (zr + y[i] / ri).clamp(w.lo[i], w.hi[i]);
            let y_new = y[i] + ri * (zr - z_new);
            let dv = (z_new - z[i]) + (y_new - y[i]) / ri;
            merit += ri * dv * dv;
            dy[i] = y_new - y[i];
            ax[i] = alpha * zt[i] + (1.0 - alpha) * ax[i];
            z[i] = z_new;
            y[i] = y_new;
        }
        x = x_new;

        if iter % check_every != 0 && iter != cfg.max_iter {
            continue;
        }
        let res = residuals(&w, &x, &z, &ax, &y, eps_abs, eps_rel);
        if cfg.trace {
            let xu = w.unscale_x(&x);
            trace.push(TraceRow {
                iteration: iter,
                primal_residual: res.primal,
                dual_residual: res.dual,
                objective: qp.objective_value(&xu),
                merit: merit.sqrt(),
                rho,
            });
        }
        if m > 0 && infeasibility_certificate(&w, &dy, cfg.eps_infeasible) {
            status = Status::Infeasible;
            iterations = iter;
            last_res = Some(res);
            break;
        }
        let near = res.primal <= EARLY_POLISH_FACTOR * res.eps_primal && res.dual <= EARLY_POLISH_FACTOR * res.eps_dual;
        let converged = res.primal <= res.eps_primal && res.dual <= res.eps_dual;
        if cfg.polish && near && !converged && iter >= next_polish {
            // degenerate problems can creep towards tolerance for a long time
            // while the active set is already right
            if let Some((xp, mp)) = polish(&w, &z, &y) {
                if meets_tolerances(qp, &xp, &mp, cfg.eps_abs, cfg.eps_rel)? {
                    status = Status::Optimal;
                    iterations = iter;
                    last_res = Some(res);
                    final_x = Some((xp, mp, true));
                    break;
                }
            }
            polish_gap *= 2;
            next_polish = iter + polish_gap;
        }
        if converged {
            let xu = w.unscale_x(&x);
            let mu = w.unscale_y(&y);
            let mut candidate = (xu, mu, false);
            if cfg.polish {
                if let Some((xp, mp)) = polish(&w, &z, &y) {
                    if meets_tolerances(qp, &xp, &mp, cfg.eps_abs, cfg.eps_rel)? {
                        candidate = (xp, mp, true);
                    }
                }
            }
            if candidate.2 || meets_tolerances(qp, &candidate.0, &candidate.1, cfg.eps_abs, cfg.eps_rel)? {
                status = Status::Optimal;
                iterations = iter;
                last_res = Some(res);
                final_x = Some(candidate);
                break;
            }
            // the scaled stopping rule passed but the unscaled checks did not
            eps_abs = (eps_abs * 0.1).max(1e-14);
            eps_rel = (eps_rel * 0.1).max(1e-14);
        }
        if cfg.adaptive_rho && m > 0 && iter - last_factor_iter >= cfg.adaptive_rho_interval {
            let rp = res.primal / res.primal_scale.max(1e-30);
            let rd = res.dual / res.dual_scale.max(1e-30);
            let ratio = rp / rd.max(1e-30);
            let new_rho = if ratio > 10.0 {
                (rho * 2.0).min(RHO_MAX)
            } else if ratio < 0.1 {
                (rho / 2.0).max(RHO_MIN)
            } else {
                rho
            };
            if new_rho != rho {
                rho = new_rho;
                drop(chol);
                chol = w.factor(rho, sigma)?;
                last_factor_iter = iter;
            }
        }
        last_res = Some(res);
    }

    if final_x.is_none() && status == Status::MaxIter && cfg.polish {
        if let Some((xp, mp)) = polish(&w, &z, &y) {
            if meets_tolerances(qp, &xp, &mp, cfg.eps_abs, cfg.eps_rel)? {
                status = Status::Optimal;
                final_x = Some((xp, mp, true));
            }
        }
    }
    let (x_out, mult, polished) = match final_x {
        Some(v) => v,
        None => (w.unscale_x(&x), w.unscale_y(&y), false),
    };
    let (primal_residual, dual_residual) = match (&last_res, polished) {
        (_, true) => {
            let k = kkt_residuals(qp, &x_out, &mult)?;
            (k.primal_ineq.max(k.primal_eq), k.stationarity)
        }
        (Some(r), false) => (r.primal, r.dual),
        (None, false) => (f64::NAN, f64::NAN),
    };
    let objective = qp.objective_value(&x_out);
    Ok(SolveReport {
        x: x_out,
        objective,
        status,
        iterations,
        primal_residual,
        dual_residual,
        wall_time: start.elapsed().as_secs_f64(),
        multipliers: mult,
        polished,
        rho,
        trace,
    })
}

/// Solves the equality-constrained QP on a guessed active set and repairs the
/// guess a few times: multipliers of the wrong sign are released and the most
/// violated inactive row is added. Returns unscaled `x` and multipliers, or
/// `None` when no consistent active set is found.
fn polish(w: &Work, z: &[f64], y: &[f64]) -> Option<(Vec<f64>, Multipliers)> {
    let n = w.n;
    let m = w.m();
    let mut fixed = Vec::new();
    let mut guess = Vec::new();
    for i in 0..m {
        if w.lo[i] == w.hi[i] {
            fixed.push((i, w.hi[i]));
        } else if z[i] - w.lo[i] < -y[i] {
            guess.push((i, w.lo[i]));
        } else if w.hi[i] - z[i] < y[i] {
            guess.push((i, w.hi[i]));
        }
    }
    if fixed.len() > n {
        return None;
    }
    if fixed.len() + guess.len() > n {
        guess.sort_by(|a, b| y[b.0].abs().total_cmp(&y[a.0].abs()));
        guess.truncate(n - fixed.len());
    }
    let delta = POLISH_DELTA;
    // P~ + delta I
    let kp = match &w.p_mat {
        SpdMatrix::Diagonal(dg) => KpFactor::Diagonal(dg.iter().map(|v| v + delta).collect()),
        SpdMatrix::Dense(pm) => {
            let mut a = pm.clone();
            for i in 0..n {
                a[(i, i)] += delta;
            }
            KpFactor::Dense(Cholesky::factor(a).ok()?)
        }
    };
    let mut active: Vec<(usize, f64)> = fixed.iter().chain(&guess).copied().collect();
    let n_fixed = fixed.len();
    for _ in 0..POLISH_ROUNDS {
        let (xs, ys) = solve_active(w, &kp, &active)?;
        let y_tol = 1e-9 * (1.0 + linalg::norm_inf(&ys));
        let mut worst: Option<(usize, f64)> = None;
        for (c, &(i, t)) in active.iter().enumerate().skip(n_fixed) {
            let v = if t == w.hi[i] { -ys[c] } else { ys[c] };
            if v > y_tol && worst.is_none_or(|(_, wv)| v > wv) {
                worst = Some((c, v));
            }
        }
        if let Some((c, _)) = worst {
            active.remove(c);
            continue;
        }
        let ax = w.a_mul(&xs);
        let mut viol: Option<(usize, f64, f64)> = None;
        for i in 0..m {
            if active.iter().any(|(a, _)| *a == i) {
                continue;
            }
            let (lo, hi) = (w.lo[i], w.hi[i]);
            let (v, t) = if ax[i] > hi { ((ax[i] - hi) / (1.0 + hi.abs()), hi) } else if ax[i] < lo { ((lo - ax[i]) / (1.0 + lo.abs()), lo) } else { (0.0, 0.0) };
            if v > POLISH_FEAS_TOL && viol.is_none_or(|(_, vv, _)| v > vv) {
                viol = Some((i, v, t));
            }
        }
        if let Some((i, _, t)) = viol {
            if active.len() == n {
                active = swap_in(w, &kp, &active, &ys, n_fixed, (i, t))?;
            } else {
                active.push((i, t));
            }
            continue;
        }
        let mut y_full = vec![0.0; m];
        for (c, &(i, _)) in active.iter().enumerate() {
            y_full[i] = ys[c];
        }
        return Some((w.unscale_x(&xs), w.unscale_y(&y_full)));
    }
    None
}

/// Replaces one row of a full active set by `add`, trying the rows with the
/// smallest multipliers first and keeping the first sign-consistent result.
fn swap_in(
    w: &Work,
    kp: &KpFactor,
    active: &[(usize, f64)],
    ys: &[f64],
    n_fixed: usize,
    add: (usize, f64),
) -> Option<Vec<(usize, f64)>> {
    let mut order: Vec<usize> = (n_fixed..active.len()).collect();
    order.sort_by(|&a, &b| ys[a].abs().total_cmp(&ys[b].abs()));
    let mut fallback = None;
    for &c in order.iter().take(SWAP_TRIALS) {
        let mut cand = active.to_vec();
        cand[c] = add;
        let Some((_, yc)) = solve_active(w, kp, &cand) else { continue };
        let tol = 1e-9 * (1.0 + linalg::norm_inf(&yc));
        let ok = cand.iter().enumerate().skip(n_fixed).all(|(k, &(i, t))| {
            let v = if t == w.hi[i] { -yc[k] } else { yc[k] };
            v <= tol
        });
        if ok {
            return Some(cand);
        }
        fallback.get_or_insert(cand);
    }
    fallback
}

/// Regularized KKT solve `min 1/2 x'P~x + q~'x s.t. R x = t` with iterative
/// refinement, in scaled variables.
fn solve_active(w: &Work, kp: &KpFactor, active: &[(usize, f64)]) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = w.n;
    let k = active.len();
    let delta = POLISH_DELTA;
    let target: Vec<f64> = active.iter().map(|a| a.1).collect();
    let mut rt = Mat::<f64>::zeros(n, k);
    for (c, &(i, _)) in active.iter().enumerate() {
        for (j, v) in w.scaled_row(i).into_iter().enumerate() {
            rt[(j, c)] = v;
        }
    }
    // Schur complement R (P~ + delta)^-1 R^T + delta I
    let schur = if k > 0 {
        let mut wm = rt.clone();
        kp.solve_half(&mut wm);
        let mut s = Mat::<f64>::zeros(k, k);
        faer::linalg::matmul::matmul(s.as_mut(), faer::Accum::Replace, wm.transpose(), wm.as_ref(), 1.0, faer::Par::Seq);
        for i in 0..k {
            s[(i, i)] += delta;
        }
        Some(Cholesky::factor(s).ok()?)
    } else {
        None
    };
    let r_mul = |v: &[f64]| -> Vec<f64> { linalg::mat_t_vec(rt.as_ref(), v) };
    let rt_mul = |v: &[f64]| -> Vec<f64> {
        if k == 0 {
            vec![0.0; n]
        } else {
            linalg::mat_vec(rt.as_ref(), v)
        }
    };
    let solve_reg = |r1: &[f64], r2: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut t = r1.to_vec();
        kp.solve(&mut t);
        let mut yy: Vec<f64> = if k > 0 { linalg::sub(&r_mul(&t), r2) } else { Vec::new() };
        if let Some(s) = &schur {
            s.solve_in_place(&mut yy);
        }
        let mut xx = linalg::sub(r1, &rt_mul(&yy));
        kp.solve(&mut xx);
        (xx, yy)
    };
    let neg_q: Vec<f64> = w.q.iter().map(|v| -v).collect();
    let (mut xs, mut ys) = solve_reg(&neg_q, &target);
    for _ in 0..POLISH_REFINE_STEPS {
        let px = w.p_mat.mul_vec(&xs);
        let e1: Vec<f64> = (0..n).map(|i| neg_q[i] - px[i]).collect();
        let e1 = linalg::sub(&e1, &rt_mul(&ys));
        let e2 = if k > 0 { linalg::sub(&target, &r_mul(&xs)) } else { Vec::new() };
        let (dx, dyy) = solve_reg(&e1, &e2);
        xs.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
        ys.iter_mut().zip(&dyy).for_each(|(a, b)| *a += b);
    }
    if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
        return None;
    }
    Some((xs, ys))
}

enum KpFactor {
    Diagonal(Vec<f64>),
    Dense(Cholesky),
}

impl KpFactor {
    fn solve(&self, v: &mut [f64]) {
        match self {
            KpFactor::Diagonal(d) => v.iter_mut().zip(d).for_each(|(a, b)| *a /= b),
            KpFactor::Dense(c) => c.solve_in_place(v),
        }
    }

    /// `L^-1 M` where `L L^T` is the factored matrix.
    fn solve_half(&self, m: &mut Mat<f64>) {
        match self {
            KpFactor::Diagonal(d) => {
                for j in 0..m.ncols() {
                    for (i, di) in d.iter().enumerate() {
                        m[(i, j)] /= di.sqrt();
                    }
                }
            }
            KpFactor::Dense(c) => c.solve_lower_in_place(m),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::RowMatrix;
    use crate::linearizer::Bounds;

    fn qp(a: SpdMatrix, center: Vec<f64>, g: Vec<Vec<f64>>, h: Vec<f64>, c: Vec<Vec<f64>>, cv: Vec<f64>) -> QpProblem {
        let n = center.len();
        let g = RowMatrix::from_rows(&g, n).unwrap();
        let c = RowMatrix::from_rows(&c, n).unwrap();
        QpProblem::new(a, center, g, h, c, cv, None).unwrap()
    }

    #[test]
    fn unconstrained_minimum() {
        let p = qp(SpdMatrix::identity(2), vec![3.0, -1.0], vec![], vec![], vec![], vec![]);
        let r = solve_qp(&p, &SolverConfig::default()).unwrap();
        assert_eq!(r.status, Status::Optimal, "{r:?}");
        assert!((r.x[0] - 3.0).abs() < 1e-6 && (r.x[1] + 1.0).abs() < 1e-6);
        assert!(r.objective < 1e-10);
    }

    #[test]
    fn single_active_bound() {
        let p = qp(SpdMatrix::identity(1), vec![1.0], vec![vec![1.0]], vec![0.0], vec![], vec![]);
        let r = solve_qp(&p, &SolverConfig::default()).unwrap();
        assert_eq!(r.status, Status::Optimal);
        assert!(r.x[0].abs() < 1e-6, "{:?}", r.x);
        assert!((r.objective - 1.0).abs() < 1e-6);
        assert!((r.multipliers.ineq[0] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn symmetric_equality() {
        let p = qp(SpdMatrix::identity(2), vec![0.0, 0.0], vec![], vec![], vec![vec![1.0, 1.0]], vec![1.0]);
        let r = solve_qp(&p, &SolverConfig::default()).unwrap();
        assert_eq!(r.status, Status::Optimal);
        assert!((r.x[0] - 0.5).abs() < 1e-6 && (r.x[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn box_rows_are_honored() {
        let g = RowMatrix::empty(2);
        let b = Bounds::new(vec![-1.0, 0.5], vec![1.0, 2.0]).unwrap();
        let p = QpProblem::new(SpdMatrix::identity(2), vec![3.0, 0.0], g, vec![], RowMatrix::empty(2), vec![], Some(b))
            .unwrap();
        let r = solve_qp(&p, &SolverConfig::default()).unwrap();
        assert_eq!(r.status, Status::Optimal);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 0.5).abs() < 1e-6, "{:?}", r.x);
        assert!(r.multipliers.upper[0] > 0.0 && r.multipliers.lower[1] > 0.0);
        let k = kkt_residuals(&p, &r.x, &r.multipliers).unwrap();
        assert!(k.stationarity < 1e-6 && k.complementarity < 1e-6);
    }

    #[test]
    fn infeasible_rows_are_detected() {
        // x <= -1 and -x <= -1
        let p = qp(SpdMatrix::identity(1), vec![0.0], vec![vec![1.0], vec![-1.0]], vec![-1.0, -1.0], vec![], vec![]);
        let r = solve_qp(&p, &SolverConfig::default()).unwrap();
        assert_eq!(r.status, Status::Infeasible);
    }

    #[test]
    fn iteration_limit_is_reported() {
        let p = qp(
            SpdMatrix::identity(2),
            vec![2.0, 2.0],
            vec![vec![1.0, 1.0], vec![1.0, -1.0]],
            vec![1.0, 0.5],
            vec![],
            vec![],
        );
        let cfg = SolverConfig { max_iter: 2, polish: false, ..Default::default() };
        let r = solve_qp(&p, &cfg).unwrap();
        assert_eq!(r.status, Status::MaxIter);
        assert_eq!(r.iterations, 2);
        assert!(r.primal_residual.is_finite() && r.dual_residual.is_finite());
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig { rho: 0.0, ..Default::default() }.validate().is_err());
        assert!(SolverConfig { max_iter: 0, ..Default::default() }.validate().is_err());
        assert!(SolverConfig { over_relaxation: 1.9, ..Default::default() }.validate().is_err());
        assert!(SolverConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_multipliers_at_unconstrained_optimum() {
        let p = qp(SpdMatrix::identity(2), vec![0.2, 0.1], vec![vec![1.0, 0.0]], vec![5.0], vec![], vec![]);
        let k = kkt_residuals(&p, &[0.2, 0.1], &Multipliers::zeros(&p)).unwrap();
        assert_eq!(k, KktResiduals { stationarity: 0.0, primal_eq: 0.0, primal_ineq: 0.0, complementarity: 0.0 });
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let p = qp(SpdMatrix::identity(2), vec![2.0, 2.0], vec![vec![1.0, 1.0]], vec![1.0], vec![], vec![]);
        let r = solve_qp(&p, &SolverConfig { trace: true, ..Default::default() }).unwrap();
        assert_eq!(r.trace.len(), r.iterations);
        let mut buf = Vec::new();
        write_trace_csv(&r.trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,primal_residual,dual_residual,objective,merit,rho"));
        assert_eq!(text.lines().count(), r.trace.len() + 1);
    }
}
