//! Small dense linear-algebra layer over `faer`.
//!
//! Symmetric positive definite matrices come in two storage forms: dense and
//! diagonal. The diagonal form keeps very large problems (n around 10^4) inside
//! a desk machine's memory and avoids an O(n^3) eigendecomposition.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::llt;
use faer::{Accum, Conj, Mat, MatRef, Par, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance for the symmetry check on dense input.
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub enum SpdMatrix {
    Dense(Mat<f64>),
    Diagonal(Vec<f64>),
}

impl SpdMatrix {
    pub fn identity(n: usize) -> Self {
        SpdMatrix::Diagonal(vec![1.0; n])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::dims("matrix rows must all have length equal to the row count"));
        }
        Ok(SpdMatrix::Dense(Mat::from_fn(n, n, |i, j| rows[i][j])))
    }

    pub fn dim(&self) -> usize {
        match self {
            SpdMatrix::Dense(m) => m.nrows(),
            SpdMatrix::Diagonal(d) => d.len(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            SpdMatrix::Dense(m) => m[(i, j)],
            SpdMatrix::Diagonal(d) => {
                if i == j {
                    d[i]
                } else {
                    0.0
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            SpdMatrix::Dense(m) => m.col_iter().all(|c| c.iter().all(|v| v.is_finite())),
            SpdMatrix::Diagonal(d) => d.iter().all(|v| v.is_finite()),
        }
    }

    /// Largest absolute asymmetry relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        match self {
            SpdMatrix::Diagonal(_) => 0.0,
            SpdMatrix::Dense(m) => {
                let n = m.nrows();
                let mut scale: f64 = 0.0;
                let mut worst: f64 = 0.0;
                for j in 0..n {
                    for i in 0..n {
                        scale = scale.max(m[(i, j)].abs());
                        if i < j {
                            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
                        }
                    }
                }
                if scale == 0.0 {
                    0.0
                } else {
                    worst / scale
                }
            }
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        match self {
            SpdMatrix::Diagonal(d) => d.iter().zip(x).map(|(a, b)| a * b).collect(),
            SpdMatrix::Dense(m) => mat_vec(m.as_ref(), x),
        }
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        match self {
            SpdMatrix::Diagonal(d) => d.iter().zip(x).map(|(a, v)| a * v * v).sum(),
            SpdMatrix::Dense(_) => dot(x, &self.mul_vec(x)),
        }
    }

    pub fn to_dense(&self) -> Mat<f64> {
        match self {
            SpdMatrix::Dense(m) => m.clone(),
            SpdMatrix::Diagonal(d) => Mat::from_fn(d.len(), d.len(), |i, j| if i == j { d[i] } else { 0.0 }),
        }
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..n).map(|i| (0..n).map(|j| self.get(i, j)).collect()).collect()
    }

    /// `s * self`.
    pub fn scaled(&self, s: f64) -> Self {
        match self {
            SpdMatrix::Diagonal(d) => SpdMatrix::Diagonal(d.iter().map(|v| v * s).collect()),
            SpdMatrix::Dense(m) => SpdMatrix::Dense(Mat::from_fn(m.nrows(), m.ncols(), |i, j| s * m[(i, j)])),
        }
    }

    /// `diag(d) * self * diag(d)`.
    pub fn congruence_diag(&self, d: &[f64]) -> Self {
        match self {
            SpdMatrix::Diagonal(v) => SpdMatrix::Diagonal(v.iter().zip(d).map(|(a, s)| a * s * s).collect()),
            SpdMatrix::Dense(m) => SpdMatrix::Dense(Mat::from_fn(m.nrows(), m.ncols(), |i, j| d[i] * m[(i, j)] * d[j])),
        }
    }

    /// Infinity norm of each column.
    pub fn col_inf_norms(&self) -> Vec<f64> {
        match self {
            SpdMatrix::Diagonal(d) => d.iter().map(|v| v.abs()).collect(),
            SpdMatrix::Dense(m) => m.col_iter().map(|c| c.iter().fold(0.0f64, |a, v| a.max(v.abs()))).collect(),
        }
    }

    /// Adds `s * self` into a dense square matrix.
    pub fn add_into(&self, target: &mut Mat<f64>, s: f64) {
        match self {
            SpdMatrix::Diagonal(d) => {
                for (i, v) in d.iter().enumerate() {
                    target[(i, i)] += s * v;
                }
            }
            SpdMatrix::Dense(m) => {
                for j in 0..m.ncols() {
                    for i in 0..m.nrows() {
                        target[(i, j)] += s * m[(i, j)];
                    }
                }
            }
        }
    }

    /// Cholesky-based positive-definiteness test.
    pub fn is_positive_definite(&self) -> bool {
        match self {
            SpdMatrix::Diagonal(d) => d.iter().all(|v| *v > 0.0),
            SpdMatrix::Dense(m) => Cholesky::factor(m.clone()).is_ok(),
        }
    }

    pub fn eigen(&self) -> Result<SymEigen> {
        SymEigen::new(self)
    }
}

/// Symmetric eigendecomposition `V diag(values) V^T`, with eigenvalues ascending.
/// Diagonal matrices keep `vectors = None` (the identity, up to ordering).
#[derive(Debug, Clone)]
pub struct SymEigen {
    values: Vec<f64>,
    vectors: Option<Mat<f64>>,
}

impl SymEigen {
    pub fn new(m: &SpdMatrix) -> Result<Self> {
        match m {
            SpdMatrix::Diagonal(d) => Ok(SymEigen { values: d.clone(), vectors: None }),
            SpdMatrix::Dense(mat) => {
                let evd = mat
                    .self_adjoint_eigen(Side::Lower)
                    .map_err(|e| Error::Factorization(format!("eigendecomposition: {e:?}")))?;
                let values = evd.S().column_vector().iter().copied().collect();
                Ok(SymEigen { values, vectors: Some(evd.U().to_owned()) })
            }
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Dense `V diag(values^p) V^T`; `None` for diagonal input (use `power_diag`).
    pub fn power_matrix(&self, p: f64) -> Option<Mat<f64>> {
        let v = self.vectors.as_ref()?;
        let n = v.nrows();
        let scaled = Mat::from_fn(n, n, |i, j| v[(i, j)] * self.values[j].powf(p));
        Some(&scaled * v.transpose())
    }

    pub fn power_diag(&self, p: f64) -> Vec<f64> {
        self.values.iter().map(|v| v.powf(p)).collect()
    }

    /// `M^p x` for the decomposed matrix `M`.
    pub fn apply_power(&self, x: &[f64], p: f64) -> Vec<f64> {
        match &self.vectors {
            None => self.values.iter().zip(x).map(|(l, v)| l.powf(p) * v).collect(),
            Some(v) => {
                let mut coeffs = mat_t_vec(v.as_ref(), x);
                for (c, l) in coeffs.iter_mut().zip(&self.values) {
                    *c *= l.powf(p);
                }
                mat_vec(v.as_ref(), &coeffs)
            }
        }
    }
}

/// Dense Cholesky factor, computed in place so large systems hold one n x n buffer.
#[derive(Debug, Clone)]
pub struct Cholesky {
    factor: Mat<f64>,
}

impl Cholesky {
    pub fn factor(mut a: Mat<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::dims("cholesky needs a square matrix"));
        }
        let mut mem = MemBuffer::new(llt::factor::cholesky_in_place_scratch::<f64>(n, Par::Seq, Default::default()));
        llt::factor::cholesky_in_place(
            a.as_mut(),
            Default::default(),
            Par::Seq,
            MemStack::new(&mut mem),
            Default::default(),
        )
        .map_err(|e| Error::NotPositiveDefinite(format!("{e:?}")))?;
        Ok(Cholesky { factor: a })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        let n = rhs.len();
        let mut col = faer::MatMut::from_column_major_slice_mut(rhs, n, 1);
        llt::solve::solve_in_place_with_conj(
            self.factor.as_ref(),
            Conj::No,
            col.as_mut(),
            Par::Seq,
            MemStack::new(&mut MemBuffer::new(llt::solve::solve_in_place_scratch::<f64>(n, 1, Par::Seq))),
        );
    }

    pub fn solve_mat_in_place(&self, rhs: &mut Mat<f64>) {
        let (n, k) = (rhs.nrows(), rhs.ncols());
        llt::solve::solve_in_place_with_conj(
            self.factor.as_ref(),
            Conj::No,
            rhs.as_mut(),
            Par::Seq,
            MemStack::new(&mut MemBuffer::new(llt::solve::solve_in_place_scratch::<f64>(n, k, Par::Seq))),
        );
    }

    /// Solves `L X = rhs` with the lower factor only.
    pub fn solve_lower_in_place(&self, rhs: &mut Mat<f64>) {
        faer::linalg::triangular_solve::solve_lower_triangular_in_place(self.factor.as_ref(), rhs.as_mut(), Par::Seq);
    }

    pub fn into_buffer(self) -> Mat<f64> {
        self.factor
    }
}

/// General dense solve via partial-pivot LU; rejects (numerically) singular systems.
pub fn solve_dense(a: &Mat<f64>, b: &[f64]) -> Result<Vec<f64>> {
    use faer::linalg::solvers::Solve;
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(Error::dims("solve_dense shape"));
    }
    let lu = a.partial_piv_lu();
    let rhs = Mat::from_fn(n, 1, |i, _| b[i]);
    let x = lu.solve(&rhs);
    let out: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Factorization("singular linear system".into()));
    }
    // residual check catches pivots that underflowed to tiny but finite values
    let r = mat_vec(a.as_ref(), &out);
    let scale = norm_inf(b).max(1.0) * (1.0 + max_abs(a)) * (n as f64);
    if r.iter().zip(b).any(|(ri, bi)| (ri - bi).abs() > 1e-8 * scale) {
        return Err(Error::Factorization("singular linear system".into()));
    }
    Ok(out)
}

/// Numerical rank via singular values.
pub fn rank(a: &Mat<f64>, rel_tol: f64) -> Result<usize> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Ok(0);
    }
    let s = a
        .singular_values()
        .map_err(|e| Error::Factorization(format!("svd: {e:?}")))?;
    let top = s.iter().copied().fold(0.0, f64::max);
    Ok(s.iter().filter(|v| **v > rel_tol * top.max(f64::MIN_POSITIVE)).count())
}

pub fn max_abs(a: &Mat<f64>) -> f64 {
    a.col_iter().flat_map(|c| c.iter().copied().collect::<Vec<_>>()).fold(0.0, |m, v| m.max(v.abs()))
}

pub fn mat_vec(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    let mut out = Mat::<f64>::zeros(a.nrows(), 1);
    let xv = MatRef::from_column_major_slice(x, x.len(), 1);
    faer::linalg::matmul::matmul(out.as_mut(), Accum::Replace, a, xv, 1.0, Par::Seq);
    out.col(0).iter().copied().collect()
}

pub fn mat_t_vec(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    mat_vec(a.transpose(), x)
}

/// `A^T A` for a dense matrix.
pub fn gram(a: MatRef<'_, f64>) -> Mat<f64> {
    let n = a.ncols();
    let mut out = Mat::<f64>::zeros(n, n);
    faer::linalg::matmul::matmul(out.as_mut(), Accum::Replace, a.transpose(), a, 1.0, Par::Seq);
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// JSON shape of a square matrix: nested row-major rows, or `{"diag": [...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixRepr {
    Rows(Vec<Vec<f64>>),
    Diag { diag: Vec<f64> },
}

impl MatrixRepr {
    pub fn from_spd(m: &SpdMatrix) -> Self {
        match m {
            SpdMatrix::Diagonal(d) => MatrixRepr::Diag { diag: d.clone() },
            SpdMatrix::Dense(_) => MatrixRepr::Rows(m.to_rows()),
        }
    }

    pub fn into_spd(self) -> Result<SpdMatrix> {
        match self {
            MatrixRepr::Rows(rows) => SpdMatrix::from_rows(&rows),
            MatrixRepr::Diag { diag } => Ok(SpdMatrix::Diagonal(diag)),
        }
    }
}

pub fn mat_from_rows(rows: &[Vec<f64>], ncols: usize) -> Result<Mat<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::dims(format!("every row must have {ncols} entries")));
    }
    Ok(Mat::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn mat_to_rows(m: &Mat<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

/// Dense row-major matrix, the layout tangent rows are generated in.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMatrix {
    nrows: usize,
    ncols: usize,
    data: Vec<f64>,
}

impl RowMatrix {
    pub fn new(nrows: usize, ncols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != nrows * ncols {
            return Err(Error::dims(format!("{} values for a {nrows}x{ncols} matrix", data.len())));
        }
        Ok(RowMatrix { nrows, ncols, data })
    }

    pub fn empty(ncols: usize) -> Self {
        RowMatrix { nrows: 0, ncols, data: Vec::new() }
    }

    pub fn from_rows(rows: &[Vec<f64>], ncols: usize) -> Result<Self> {
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(Error::dims(format!("every row must have {ncols} entries")));
        }
        Ok(RowMatrix { nrows: rows.len(), ncols, data: rows.concat() })
    }

    pub fn from_mat(m: &Mat<f64>) -> Self {
        let (r, c) = (m.nrows(), m.ncols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend((0..c).map(|j| m[(i, j)]));
        }
        RowMatrix { nrows: r, ncols: c, data }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        (0..self.nrows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn as_mat_ref(&self) -> MatRef<'_, f64> {
        MatRef::from_row_major_slice(&self.data, self.nrows, self.ncols)
    }

    pub fn to_mat(&self) -> Mat<f64> {
        Mat::from_fn(self.nrows, self.ncols, |i, j| self.data[i * self.ncols + j])
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(|r| r.to_vec()).collect()
    }

    /// Appends the rows of `other` below `self`.
    pub fn append(&mut self, other: RowMatrix) -> Result<()> {
        if other.ncols != self.ncols {
            return Err(Error::dims(format!("cannot stack {} columns under {}", other.ncols, self.ncols)));
        }
        if self.data.is_empty() {
            self.data = other.data;
        } else {
            self.data.extend_from_slice(&other.data);
        }
        self.nrows += other.nrows;
        Ok(())
    }

    pub fn select_rows(&self, idx: &[usize]) -> RowMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.ncols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        RowMatrix { nrows: idx.len(), ncols: self.ncols, data }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        if self.nrows == 0 {
            return Vec::new();
        }
        mat_vec(self.as_mat_ref(), x)
    }

    pub fn t_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        if self.nrows == 0 {
            return vec![0.0; self.ncols];
        }
        mat_t_vec(self.as_mat_ref(), y)
    }
}

/// Adds `alpha * (R G D)^T (R G D)` into the lower triangle of `out`, with
/// `R = diag(row_scale)` and `D = diag(col_scale)`. Rows are processed in
/// fixed-size blocks, so the extra memory is one block.
pub fn add_scaled_gram_lower(out: &mut Mat<f64>, g: &RowMatrix, row_scale: &[f64], col_scale: &[f64], alpha: f64) {
    use faer::linalg::matmul::triangular::{self, BlockStructure};
    const BLOCK: usize = 512;
    let n = g.ncols();
    let mut start = 0;
    while start < g.nrows() {
        let k = BLOCK.min(g.nrows() - start);
        let block = Mat::from_fn(k, n, |i, j| row_scale[start + i] * g.row(start + i)[j] * col_scale[j]);
        triangular::matmul(
            out.as_mut(),
            BlockStructure::TriangularLower,
            Accum::Add,
            block.transpose(),
            BlockStructure::Rectangular,
            block.as_ref(),
            BlockStructure::Rectangular,
            alpha,
            Par::Seq,
        );
        start += k;
    }
}

/// Copies the lower triangle of a square matrix onto its upper triangle.
pub fn mirror_lower(m: &mut Mat<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            m[(i, j)] = m[(j, i)];
        }
    }
}
