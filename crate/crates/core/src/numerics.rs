//! Dense linear algebra used by the harmonization pipelines.
//!
//! Everything here is small: design matrices are tall and thin (a handful of
//! covariates plus one indicator per site) and covariance matrices are G×G with
//! G at most a few hundred. A row-major [`Matrix`], a Cholesky-based normal
//! equations solver and a Jacobi symmetric eigensolver cover all of it.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from rows; `cols` is only consulted when `rows` is empty.
    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self> {
        let cols = rows.first().map_or(cols, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows_iter().map(<[f64]>::to_vec).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (oj, &bkj) in o.iter_mut().zip(other.row(k)) {
                    *oj += aik * bkj;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · self`
    pub fn gram(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.cols);
        for r in self.rows_iter() {
            for a in 0..self.cols {
                let ra = r[a];
                if ra == 0.0 {
                    continue;
                }
                for b in a..self.cols {
                    out.data[a * self.cols + b] += ra * r[b];
                }
            }
        }
        for a in 0..self.cols {
            for b in 0..a {
                out.data[a * self.cols + b] = out.data[b * self.cols + a];
            }
        }
        out
    }

    /// `selfᵀ · v`
    pub fn t_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &vi) in self.rows_iter().zip(v) {
            for (o, &x) in out.iter_mut().zip(r) {
                *o += x * vi;
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        self.rows_iter().map(|r| dot(r, v)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols && self.rows > 0 && other.rows > 0 {
            return Err(Error::DimensionMismatch(format!(
                "cannot stack {} columns on {} columns",
                other.cols, self.cols
            )));
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    shape: [usize; 2],
    rows: Vec<Vec<f64>>,
}

impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixRepr {
            shape: [self.rows, self.cols],
            rows: self.to_rows(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = MatrixRepr::deserialize(d)?;
        let m = Matrix::from_rows(&repr.rows, repr.shape[1]).map_err(serde::de::Error::custom)?;
        if m.shape() != (repr.shape[0], repr.shape[1]) {
            return Err(serde::de::Error::custom(format!(
                "matrix shape {:?} does not match its rows",
                repr.shape
            )));
        }
        Ok(m)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Unbiased (n − 1) sample variance. Returns 0 for fewer than two values.
pub fn sample_variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    /// Pivots below `1e-10 · max(diag)` are treated as singular.
    pub fn new(a: &Matrix) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::DimensionMismatch("Cholesky needs a square matrix".into()));
        }
        let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
        let threshold = 1e-10 * scale.max(f64::MIN_POSITIVE);
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > threshold) {
                return Err(Error::RankDeficient);
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.l.nrows();
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[(i, k)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[(k, i)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        y
    }
}

/// Per-response least-squares solution.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSystemSolution {
    pub coefficients: Vec<f64>,
    /// ‖response − design·coefficients‖² / N
    pub residual_variance: f64,
}

/// Factorizes `designᵀ·design + ridge·I` once so that many responses sharing the
/// same design (one per feature) can be solved cheaply.
#[derive(Clone, Debug)]
pub struct OlsSolver<'a> {
    design: &'a Matrix,
    factor: Cholesky,
}

impl<'a> OlsSolver<'a> {
    pub fn new(design: &'a Matrix, ridge: f64) -> Result<Self> {
        if design.nrows() == 0 || design.ncols() == 0 {
            return Err(Error::InvalidArgument("design matrix must be non-empty".into()));
        }
        if !(ridge >= 0.0) || !ridge.is_finite() {
            return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
        }
        let mut normal = design.gram();
        for i in 0..normal.nrows() {
            normal[(i, i)] += ridge;
        }
        let factor = Cholesky::new(&normal)?;
        Ok(OlsSolver { design, factor })
    }

    pub fn solve(&self, response: &[f64]) -> Result<LinearSystemSolution> {
        if response.len() != self.design.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "response has {} entries, design has {} rows",
                response.len(),
                self.design.nrows()
            )));
        }
        let coefficients = self.factor.solve(&self.design.t_mul_vec(response));
        let rss: f64 = self
            .design
            .rows_iter()
            .zip(response)
            .map(|(r, &y)| (y - dot(r, &coefficients)).powi(2))
            .sum();
        Ok(LinearSystemSolution {
            coefficients,
            residual_variance: rss / response.len() as f64,
        })
    }
}

/// Minimizes ‖design·β − response‖² + ridge·‖β‖² through the normal equations.
pub fn ols_solve(design: &Matrix, response: &[f64], ridge: f64) -> Result<LinearSystemSolution> {
    OlsSolver::new(design, ridge)?.solve(response)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Eigenvalues are returned in nonincreasing order; eigenvectors are the
/// columns of the returned matrix.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::DimensionMismatch("eigensolver needs a square matrix".into()));
    }
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let frob: f64 = m.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * frob.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok((values, vectors))
}

/// Output of [`pca_project`].
#[derive(Clone, Debug)]
pub struct Pca {
    /// N×k projected scores of the centered data.
    pub scores: Matrix,
    /// G×k loadings (unit-norm columns).
    pub components: Matrix,
    /// Variance captured by each component (n − 1 denominator), nonincreasing.
    pub explained_variance: Vec<f64>,
    /// Sum of the column variances of the input.
    pub total_variance: f64,
}

/// Projects column-centered data onto its top-k principal directions.
///
/// Each component is oriented so that its largest-magnitude loading is positive.
pub fn pca_project(data: &Matrix, k: usize) -> Result<Pca> {
    let (n, g) = data.shape();
    if n < 2 {
        return Err(Error::InvalidArgument("PCA needs at least 2 samples".into()));
    }
    if k == 0 || k > n.min(g) {
        return Err(Error::InvalidArgument(format!(
            "component count {k} out of range 1..={}",
            n.min(g)
        )));
    }
    let means: Vec<f64> = (0..g).map(|j| mean(&data.column(j))).collect();
    let centered = Matrix::from_fn(n, g, |i, j| data[(i, j)] - means[j]);
    let mut cov = centered.gram();
    let denom = (n - 1) as f64;
    cov.data.iter_mut().for_each(|x| *x /= denom);
    let total_variance = (0..g).map(|j| cov[(j, j)]).sum();

    let (values, vectors) = symmetric_eigen(&cov)?;
    let mut components = Matrix::zeros(g, k);
    for c in 0..k {
        let mut col = vectors.column(c);
        let pivot = col
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map_or(1.0, |(_, x)| x);
        if pivot < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        for (r, x) in col.into_iter().enumerate() {
            components[(r, c)] = x;
        }
    }
    let scores = centered.matmul(&components)?;
    let explained_variance = values[..k].iter().map(|&v| v.max(0.0)).collect();
    Ok(Pca {
        scores,
        components,
        explained_variance,
        total_variance,
    })
}
