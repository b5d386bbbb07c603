//! Random instances, the sample-linearize-solve pipeline, metrics and sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{map_cube_points, map_sphere_points_owned, sample_uniform_sphere, BoundaryPointSet, EllipsoidConstraint};
use crate::linalg::{self, RowMatrix, SpdMatrix};
use crate::linearizer::{build_qp, default_points_per_ellipsoid, net_boundary_points, Bounds, QcqpProblem};
use crate::nets::sample_uniform_cube;
use crate::oracle::{solve_exact_bisection, solve_grid_bruteforce, OracleSolution};
use crate::qpsolver::{solve_qp, SolveReport, SolverConfig};

/// Eigenvalue range of the generated `A` and `B`.
pub const EIGEN_RANGE: (f64, f64) = (0.5, 5.0);
/// Grid resolution of the reference oracle on boxed `n = 2` instances.
pub const GRID_REFERENCE_RESOLUTION: usize = 2001;

/// Storage of the generated matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Structure {
    /// `Q diag(lambda) Q^T` with Haar-random `Q`.
    #[default]
    Dense,
    /// `diag(lambda)`: `Q = I`. For very large `n`.
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemOptions {
    pub with_box: bool,
    pub structure: Structure,
}

impl Default for ProblemOptions {
    fn default() -> Self {
        ProblemOptions { with_box: true, structure: Structure::Dense }
    }
}

/// [`generate_problem_with`] with a box and dense matrices.
pub fn generate_problem(n: usize, seed: u64) -> Result<QcqpProblem> {
    generate_problem_with(n, seed, &ProblemOptions::default())
}

/// One random ellipsoid-constrained instance:
///
/// * `A`, `B` = `Q diag(lambda) Q^T`, `lambda ~ U[0.5, 5]`, `Q` Haar-random;
/// * `a = 0`, `b ~ U[-1, 1]^n`;
/// * `b~ = kappa * b^T B b` with `kappa ~ U[0.25, 0.75]`, so `a` lies outside `S`
///   and the constraint is active at the optimum;
/// * box `l, u = b -+ delta` with `delta_i = kappa_i sqrt(b~ (B^-1)_ii)`,
///   `kappa_i ~ U[0.3, 0.9]`, so every face cuts `S`.
pub fn generate_problem_with(n: usize, seed: u64, opts: &ProblemOptions) -> Result<QcqpProblem> {
    if n < 2 {
        return Err(Error::invalid("generated problems need n >= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a_eig = random_eigenvalues(&mut rng, n);
    let a_mat = spd_from_eigen(&mut rng, &a_eig, opts.structure);
    let b_eig = random_eigenvalues(&mut rng, n);
    let (b_mat, b_inv_diag): (SpdMatrix, Vec<f64>) = match opts.structure {
        Structure::Diagonal => {
            let inv = b_eig.iter().map(|v| 1.0 / v).collect();
            (SpdMatrix::Diagonal(b_eig.clone()), inv)
        }
        Structure::Dense => {
            let q = haar_orthogonal(&mut rng, n);
            let m = Mat::from_fn(n, n, |i, j| (0..n).map(|k| q[(i, k)] * b_eig[k] * q[(j, k)]).sum::<f64>());
            let inv = (0..n).map(|i| (0..n).map(|k| q[(i, k)] * q[(i, k)] / b_eig[k]).sum()).collect();
            (SpdMatrix::Dense(symmetrize(m)), inv)
        }
    };
    let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let btb = b_mat.quad_form(&b);
    let level = rng.random_range(0.25..0.75) * btb;
    let bounds = if opts.with_box {
        let delta: Vec<f64> = b_inv_diag
            .iter()
            .map(|inv: &f64| rng.random_range(0.3..0.9) * (level * inv).sqrt())
            .collect();
        let lower = b.iter().zip(&delta).map(|(c, d)| c - d).collect();
        let upper = b.iter().zip(&delta).map(|(c, d)| c + d).collect();
        Some(Bounds::new(lower, upper)?)
    } else {
        None
    };
    let e = EllipsoidConstraint::new(b_mat, b, level)?;
    QcqpProblem::new(a_mat, vec![0.0; n], RowMatrix::empty(n), vec![], vec![e], bounds)
}

fn random_eigenvalues(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(EIGEN_RANGE.0..EIGEN_RANGE.1)).collect()
}

fn spd_from_eigen(rng: &mut ChaCha8Rng, eig: &[f64], structure: Structure) -> SpdMatrix {
    let n = eig.len();
    match structure {
        Structure::Diagonal => SpdMatrix::Diagonal(eig.to_vec()),
        Structure::Dense => {
            let q = haar_orthogonal(rng, n);
            let mut scaled = q.clone();
            for j in 0..n {
                for i in 0..n {
                    scaled[(i, j)] *= eig[j];
                }
            }
            let mut m = Mat::<f64>::zeros(n, n);
            faer::linalg::matmul::matmul(m.as_mut(), faer::Accum::Replace, scaled.as_ref(), q.transpose(), 1.0, faer::Par::Seq);
            SpdMatrix::Dense(symmetrize(m))
        }
    }
}

fn symmetrize(m: Mat<f64>) -> Mat<f64> {
    let n = m.nrows();
    Mat::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]))
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the signs
/// of `diag(R)` folded into `Q`.
fn haar_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Mat<f64> {
    let g = Mat::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.R();
    let mut q = qr.compute_Q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampler {
    /// Sobol' net mapped through the cube-to-sphere map and `psi`.
    Net,
    /// I.i.d. uniform cube points through the same maps.
    UniformCube,
    /// I.i.d. uniform sphere points (normalized Gaussians) through `psi`.
    UniformSphere,
}

impl Sampler {
    pub const ALL: [Sampler; 3] = [Sampler::Net, Sampler::UniformCube, Sampler::UniformSphere];

    pub fn as_str(&self) -> &'static str {
        match self {
            Sampler::Net => "net",
            Sampler::UniformCube => "uniform-cube",
            Sampler::UniformSphere => "uniform-sphere",
        }
    }
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Sampler::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown sampler '{s}' (net, uniform-cube, uniform-sphere)")))
    }
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a list of integers.
pub fn hash_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x51_7c_c1_b7_27_22_0a_95, |h, p| mix(h ^ mix(*p)))
}

/// `n_points` boundary points on every ellipsoid of `p`. Random samplers draw
/// an independent stream per ellipsoid; the net uses successive net blocks.
pub fn sample_boundary(p: &QcqpProblem, sampler: Sampler, n_points: usize, seed: u64) -> Result<Vec<BoundaryPointSet>> {
    let n = p.dim();
    if n_points == 0 {
        return Err(Error::invalid("N must be >= 1"));
    }
    match sampler {
        Sampler::Net => {
            if !n_points.is_power_of_two() {
                return Err(Error::invalid(format!("net sampler needs N to be a power of 2, got {n_points}")));
            }
            net_boundary_points(p, n_points.trailing_zeros())
        }
        Sampler::UniformCube => p
            .ellipsoids()
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let cube = sample_uniform_cube(n_points, n - 1, hash_seed(&[seed, i as u64]))?;
                map_sphere_points_owned(map_cube_points(&cube)?, e)
            })
            .collect(),
        Sampler::UniformSphere => p
            .ellipsoids()
            .iter()
            .enumerate()
            .map(|(i, e)| map_sphere_points_owned(sample_uniform_sphere(n_points, n, hash_seed(&[seed, i as u64]))?, e))
            .collect(),
    }
}

/// `((x - b)^T B (x - b) - b~)_+`.
pub fn feasibility_error(x: &[f64], e: &EllipsoidConstraint) -> Result<f64> {
    if x.len() != e.dim() {
        return Err(Error::dims(format!("x has {} entries, ellipsoid dimension {}", x.len(), e.dim())));
    }
    Ok((e.value(x) - e.level()).max(0.0))
}

/// `|x_approx - x_exact|^2 / |x_exact|^2`.
pub fn rel_sq_error(x_approx: &[f64], x_exact: &[f64]) -> Result<f64> {
    if x_approx.len() != x_exact.len() {
        return Err(Error::dims("vectors differ in length"));
    }
    let den = linalg::dot(x_exact, x_exact);
    if den == 0.0 {
        return Err(Error::ZeroReference);
    }
    let d = linalg::sub(x_approx, x_exact);
    Ok(linalg::dot(&d, &d) / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub n: usize,
    #[serde(rename = "N")]
    pub n_points: usize,
    pub sampler: Sampler,
    pub rep: usize,
    pub seed: u64,
    pub status: String,
    pub objective_approx: f64,
    pub objective_exact: Option<f64>,
    pub rel_sq_error: Option<f64>,
    /// Largest feasibility error over the ellipsoids.
    pub feasibility_error: f64,
    pub solve_time: f64,
    pub iterations: usize,
}

impl MetricsRow {
    /// Fills the exact-solution columns.
    pub fn set_reference(&mut self, x_approx: &[f64], exact: &OracleSolution) {
        self.objective_exact = Some(exact.objective);
        self.rel_sq_error = rel_sq_error(x_approx, &exact.x_star).ok();
    }
}

/// Sample, map, linearize and solve. `seed` drives the random samplers only.
pub fn solve_pipeline(
    p: &QcqpProblem,
    sampler: Sampler,
    n_points: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<(SolveReport, MetricsRow)> {
    let pts = sample_boundary(p, sampler, n_points, seed)?;
    let qp = build_qp(p, pts)?;
    let report = solve_qp(&qp, cfg)?;
    drop(qp);
    let mut feas = 0.0f64;
    for e in p.ellipsoids() {
        feas = feas.max(feasibility_error(&report.x, e)?);
    }
    let row = MetricsRow {
        n: p.dim(),
        n_points,
        sampler,
        rep: 0,
        seed,
        status: report.status.as_str().to_string(),
        objective_approx: report.objective,
        objective_exact: None,
        rel_sq_error: None,
        feasibility_error: feas,
        solve_time: report.wall_time,
        iterations: report.iterations,
    };
    Ok((report, row))
}

/// Exact solution when an oracle applies: bisection for one ellipsoid without
/// box up to `max_dim`, the grid for boxed `n = 2` instances.
pub fn reference_solution(p: &QcqpProblem, max_dim: usize) -> Result<Option<OracleSolution>> {
    if p.ellipsoids().len() != 1 || p.dim() > max_dim {
        return Ok(None);
    }
    if p.bounds().is_none() {
        return solve_exact_bisection(p).map(Some);
    }
    if p.dim() == 2 {
        return solve_grid_bruteforce(p, GRID_REFERENCE_RESOLUTION).map(Some);
    }
    Ok(None)
}

/// How `N` is chosen per dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PointRule {
    Standard,
    Explicit(Vec<usize>),
}

impl PointRule {
    pub fn values(&self, n: usize) -> Vec<usize> {
        match self {
            PointRule::Standard => vec![default_points_per_ellipsoid(n)],
            PointRule::Explicit(v) => v.clone(),
        }
    }
}

impl Serialize for PointRule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PointRule::Standard => s.serialize_str("paper-default"),
            PointRule::Explicit(v) => v.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for PointRule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Name(String),
            List(Vec<usize>),
        }
        match Raw::deserialize(d)? {
            Raw::Name(s) if s == "paper-default" => Ok(PointRule::Standard),
            Raw::Name(s) => Err(serde::de::Error::custom(format!("unknown N rule '{s}'"))),
            Raw::List(v) => Ok(PointRule::Explicit(v)),
        }
    }
}

fn default_samplers() -> Vec<Sampler> {
    Sampler::ALL.to_vec()
}

fn default_reps() -> usize {
    1
}

fn default_oracle_dim() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dims: Vec<usize>,
    #[serde(default = "default_samplers")]
    pub samplers: Vec<Sampler>,
    #[serde(rename = "N_rule", default = "PointRule::standard")]
    pub n_rule: PointRule,
    /// Repetitions (independent instances) per dimension.
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverConfig,
    pub output: PathBuf,
    #[serde(default)]
    pub with_box: bool,
    /// Worker threads; 0 uses the available parallelism.
    #[serde(default)]
    pub workers: usize,
    /// Largest `n` for which the exact oracle runs.
    #[serde(default = "default_oracle_dim")]
    pub oracle_max_dim: usize,
}

impl PointRule {
    fn standard() -> Self {
        PointRule::Standard
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(n) = self.dims.iter().find(|n| **n < 2) {
            return Err(Error::invalid(format!("dimension {n} < 2")));
        }
        if let PointRule::Explicit(v) = &self.n_rule {
            if v.contains(&0) {
                return Err(Error::invalid("N must be >= 1"));
            }
            if self.samplers.contains(&Sampler::Net) {
                if let Some(bad) = v.iter().find(|v| !v.is_power_of_two()) {
                    return Err(Error::invalid(format!("N = {bad} is not a power of 2, required by the net sampler")));
                }
            }
        }
        self.solver.validate()
    }

    /// Cells in canonical order: dimension, N, sampler, repetition.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &n in &self.dims {
            for n_points in self.n_rule.values(n) {
                for &sampler in &self.samplers {
                    for rep in 0..self.reps {
                        out.push(CellKey { n, n_points, sampler, rep });
                    }
                }
            }
        }
        out
    }

    /// Instance seed, shared by every `N` and sampler of a repetition.
    pub fn problem_seed(&self, n: usize, rep: usize) -> u64 {
        hash_seed(&[self.seed, n as u64, rep as u64])
    }

    pub fn sampler_seed(&self, key: &CellKey) -> u64 {
        hash_seed(&[self.seed, key.n as u64, key.n_points as u64, key.sampler as u64 + 1, key.rep as u64])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub n: usize,
    pub n_points: usize,
    pub sampler: Sampler,
    pub rep: usize,
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n={} N={} sampler={} rep={}", self.n, self.n_points, self.sampler, self.rep)
    }
}

impl MetricsRow {
    fn key(&self) -> CellKey {
        CellKey { n: self.n, n_points: self.n_points, sampler: self.sampler, rep: self.rep }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepSummary {
    pub rows: usize,
    pub computed: usize,
    pub skipped: usize,
}

/// Runs one cell from scratch.
pub fn run_cell(cfg: &ExperimentConfig, key: &CellKey) -> Result<MetricsRow> {
    let opts = ProblemOptions { with_box: cfg.with_box, structure: Structure::Dense };
    let p = generate_problem_with(key.n, cfg.problem_seed(key.n, key.rep), &opts)?;
    let seed = cfg.sampler_seed(key);
    let (report, mut row) = solve_pipeline(&p, key.sampler, key.n_points, seed, &cfg.solver)?;
    row.rep = key.rep;
    if let Some(exact) = reference_solution(&p, cfg.oracle_max_dim)? {
        row.set_reference(&report.x, &exact);
    }
    Ok(row)
}

fn read_rows(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for r in rd.deserialize() {
        match r {
            Ok(row) => rows.push(row),
            // a torn final line from an interrupted run is recomputed
            Err(e) if matches!(e.kind(), csv::ErrorKind::Deserialize { .. } | csv::ErrorKind::UnequalLengths { .. }) => {
                log::warn!("skipping unreadable row in {}: {e}", path.display());
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(rows)
}

fn write_rows(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut wr = csv::WriterBuilder::new().has_headers(false).from_path(&tmp)?;
        wr.write_record(CSV_HEADER)?;
        for r in rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

const CSV_HEADER: [&str; 12] = [
    "n",
    "N",
    "sampler",
    "rep",
    "seed",
    "status",
    "objective_approx",
    "objective_exact",
    "rel_sq_error",
    "feasibility_error",
    "solve_time",
    "iterations",
];

/// Runs every cell of the experiment and writes the CSV in canonical order.
///
/// Rows already in the output file are kept and their cells skipped. New rows
/// are appended as they finish, so an interrupted sweep resumes where it
/// stopped; the file is rewritten in canonical order at the end.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepSummary> {
    cfg.validate()?;
    let cells = cfg.cells();
    let path = cfg.output.as_path();
    let mut done: BTreeMap<CellKey, MetricsRow> = BTreeMap::new();
    if path.exists() {
        for row in read_rows(path)? {
            done.insert(row.key(), row);
        }
    }
    let todo: Vec<CellKey> = cells.iter().filter(|k| !done.contains_key(k)).copied().collect();
    let skipped = cells.len() - todo.len();

    // keep only rows of this experiment, then append new ones as they finish
    let kept: Vec<MetricsRow> = cells.iter().filter_map(|k| done.get(k).cloned()).collect();
    write_rows(path, &kept)?;
    let workers = match cfg.workers {
        0 => std::thread::available_parallelism().map_or(1, |v| v.get()),
        w => w,
    }
    .min(todo.len().max(1));

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(CellKey, Result<MetricsRow>)>();
    let mut first_error: Option<Error> = None;
    std::thread::scope(|s| -> Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            let todo = &todo;
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(key) = todo.get(i) else { break };
                if tx.send((*key, run_cell(cfg, key))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let file = fs::OpenOptions::new().append(true).open(path)?;
        let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        for (key, res) in rx {
            match res {
                Ok(row) => {
                    wr.serialize(&row)?;
                    wr.flush()?;
                    done.insert(key, row);
                }
                Err(e) => {
                    if first_error.is_none() {
                        first_error = Some(Error::Cell { cell: key.to_string(), source: Box::new(e) });
                        // stop handing out new cells
                        next.store(usize::MAX / 2, Ordering::SeqCst);
                    }
                }
            }
        }
        Ok(())
    })?;
    if let Some(e) = first_error {
        return Err(e);
    }
    let rows: Vec<MetricsRow> = cells.iter().filter_map(|k| done.get(k).cloned()).collect();
    write_rows(path, &rows)?;
    Ok(SweepSummary { rows: rows.len(), computed: todo.len(), skipped })
}
