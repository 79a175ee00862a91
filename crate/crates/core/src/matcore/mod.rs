//! Dense row-major `f64` matrices and the primitive kernels every pooler builds on.
//!
//! All loops run in a fixed order (row-major, inner index last), so results are
//! bit-reproducible from run to run.

mod eigen;
mod norm;

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use eigen::{jacobi_eigh, JACOBI_MAX_SWEEPS};
pub use norm::{col_softmax, eta_norm, layernorm_cols, Axis, LN_EPS};

/// Dense matrix of 64-bit floats stored row-major.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMat", into = "RawMat")]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMat> for Mat {
    type Error = Error;

    fn try_from(raw: RawMat) -> Result<Self> {
        Mat::new(raw.rows, raw.cols, raw.data)
    }
}

impl From<Mat> for RawMat {
    fn from(m: Mat) -> Self {
        RawMat {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        }
    }
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Mat {
    /// Builds a matrix from row-major data.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("Mat::new", format!("empty shape {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Mat::new",
                format!("{} elements for shape {rows}x{cols}", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from a slice of equally long rows.
    ///
    /// Panics on ragged or empty input; intended for literals in code and tests.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        assert!(!rows.is_empty(), "from_rows: no rows");
        let cols = rows[0].as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "from_rows: ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), cols, data).expect("from_rows: empty row")
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "filled: empty shape");
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// `n x 1` column from a vector.
    pub fn col_vector(v: &[f64]) -> Self {
        Self::new(v.len(), 1, v.to_vec()).expect("col_vector: empty vector")
    }

    /// `n x n` diagonal matrix.
    pub fn diag(v: &[f64]) -> Self {
        let mut m = Self::zeros(v.len(), v.len());
        for (i, &x) in v.iter().enumerate() {
            m[(i, i)] = x;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn set_col(&mut self, j: usize, v: &[f64]) {
        assert_eq!(v.len(), self.rows, "set_col: length mismatch");
        for (i, &x) in v.iter().enumerate() {
            self.data[i * self.cols + j] = x;
        }
    }

    /// Columns `idx` gathered into a new matrix, in the given order.
    pub fn select_cols(&self, idx: &[usize]) -> Result<Mat> {
        if idx.is_empty() {
            return Err(Error::shape("select_cols", "no columns selected"));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= self.cols) {
            return Err(Error::shape(
                "select_cols",
                format!("column {bad} out of range for {}x{}", self.rows, self.cols),
            ));
        }
        let mut out = Mat::zeros(self.rows, idx.len());
        for i in 0..self.rows {
            for (c, &j) in idx.iter().enumerate() {
                out[(i, c)] = self[(i, j)];
            }
        }
        Ok(out)
    }

    /// Row block `start..end` as a new matrix.
    pub fn row_block(&self, start: usize, end: usize) -> Mat {
        assert!(start < end && end <= self.rows, "row_block out of range");
        Mat {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(k) => Err(Error::NonFinite {
                op,
                detail: format!(
                    "element ({}, {}) = {}",
                    k / self.cols,
                    k % self.cols,
                    self.data[k]
                ),
            }),
        }
    }

    fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    fn same_shape(&self, other: &Mat, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{} vs {}", self.shape_str(), other.shape_str()),
            ));
        }
        Ok(())
    }

    /// Matrix product `self * other`.
    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{} * {}", self.shape_str(), other.shape_str()),
            ));
        }
        let (r, n, c) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let out_row = &mut out[i * c..(i + 1) * c];
            for k in 0..n {
                let a = self.data[i * n + k];
                let b_row = &other.data[k * c..(k + 1) * c];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Mat {
            rows: r,
            cols: c,
            data: out,
        })
    }

    /// Matrix-vector product.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(Error::shape(
                "matvec",
                format!("{} * vector of {}", self.shape_str(), v.len()),
            ));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn transpose(&self) -> Mat {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Mat {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    /// Elementwise map.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_with(&self, other: &Mat, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        self.same_shape(other, op)?;
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|x| x * s)
    }

    pub fn add_scalar(&self, s: f64) -> Mat {
        self.map(|x| x + s)
    }

    /// Hadamard power.
    pub fn powf(&self, e: f64) -> Mat {
        self.map(|x| x.powf(e))
    }

    pub fn exp(&self) -> Mat {
        self.map(f64::exp)
    }

    pub fn ln(&self) -> Mat {
        self.map(f64::ln)
    }

    /// Replaces every element below `floor` by `floor`.
    pub fn clamp_below(&self, floor: f64) -> Mat {
        self.map(|x| if x < floor { floor } else { x })
    }

    pub fn sigmoid(&self) -> Mat {
        self.map(sigmoid)
    }

    pub fn relu(&self) -> Mat {
        self.map(|x| x.max(0.0))
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Row-major flat index of the first occurrence of the global minimum.
    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (k, &x) in self.data.iter().enumerate() {
            if x < self.data[best] {
                best = k;
            }
        }
        best
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Mean over columns for each row (`rows x 1`); this is `X 1 / cols`.
    pub fn row_mean(&self) -> Mat {
        let data = (0..self.rows)
            .map(|i| self.row(i).iter().sum::<f64>() / self.cols as f64)
            .collect();
        Mat {
            rows: self.rows,
            cols: 1,
            data,
        }
    }

    /// Mean over rows for each column (`1 x cols`).
    pub fn col_mean(&self) -> Mat {
        let mut data = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (acc, &x) in data.iter_mut().zip(self.row(i)) {
                *acc += x;
            }
        }
        for acc in &mut data {
            *acc /= self.rows as f64;
        }
        Mat {
            rows: 1,
            cols: self.cols,
            data,
        }
    }

    /// `diag(v) * self`: scales row `i` by `v[i]`.
    pub fn diag_left(&self, v: &[f64]) -> Result<Mat> {
        if v.len() != self.rows {
            return Err(Error::shape(
                "diag_left",
                format!("diag of {} * {}", v.len(), self.shape_str()),
            ));
        }
        let mut out = self.clone();
        for (i, &s) in v.iter().enumerate() {
            for x in out.row_mut(i) {
                *x *= s;
            }
        }
        Ok(out)
    }

    /// `self * diag(v)`: scales column `j` by `v[j]`.
    pub fn diag_right(&self, v: &[f64]) -> Result<Mat> {
        if v.len() != self.cols {
            return Err(Error::shape(
                "diag_right",
                format!("{} * diag of {}", self.shape_str(), v.len()),
            ));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for (x, &s) in out.row_mut(i).iter_mut().zip(v) {
                *x *= s;
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Mat) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Unit-`l2` copy of `v`.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::NonFinite {
            op: "l2_normalize",
            detail: format!("vector norm is {norm}"),
        });
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_mat, seeded};

    #[test]
    fn identity_times_m_is_m() {
        let m = Mat::from_rows(&[[1.0, -2.0], [3.5, 0.0], [7.0, 8.0]]);
        assert_eq!(Mat::identity(3).matmul(&m).unwrap(), m);
    }

    #[test]
    fn small_product_by_hand() {
        let a = Mat::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Mat::from_rows(&[[1.0], [1.0]]);
        assert_eq!(a.matmul(&b).unwrap(), Mat::from_rows(&[[3.0], [7.0]]));
    }

    #[test]
    fn right_identity_is_exact() {
        let a = normal_mat(&mut seeded(3), 5, 4, 1.0);
        assert_eq!(a.matmul(&Mat::identity(4)).unwrap(), a);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Mat::zeros(2, 3);
        let b = Mat::zeros(2, 3);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("2x3 * 2x3"), "{msg}");
    }

    #[test]
    fn matmul_distributes_over_add() {
        let mut rng = seeded(11);
        for _ in 0..50 {
            let a = normal_mat(&mut rng, 4, 6, 1.0);
            let b = normal_mat(&mut rng, 6, 3, 1.0);
            let c = normal_mat(&mut rng, 6, 3, 1.0);
            let lhs = a.matmul(&b.add(&c).unwrap()).unwrap();
            let rhs = a.matmul(&b).unwrap().add(&a.matmul(&c).unwrap()).unwrap();
            assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn constructor_rejects_bad_lengths() {
        assert!(Mat::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Mat::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn transpose_and_diag_scaling() {
        let a = Mat::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(a.transpose().transpose(), a);
        assert_eq!(a.transpose()[(2, 1)], 6.0);
        let l = a.diag_left(&[2.0, 0.5]).unwrap();
        assert_eq!(l, Mat::from_rows(&[[2.0, 4.0, 6.0], [2.0, 2.5, 3.0]]));
        let r = a.diag_right(&[1.0, 0.0, -1.0]).unwrap();
        assert_eq!(r, Mat::from_rows(&[[1.0, 0.0, -3.0], [4.0, 0.0, -6.0]]));
        assert!(a.diag_left(&[1.0]).is_err());
    }

    #[test]
    fn reductions() {
        let a = Mat::from_rows(&[[1.0, 3.0], [5.0, 7.0]]);
        assert_eq!(a.row_mean().into_vec(), vec![2.0, 6.0]);
        assert_eq!(a.col_mean().into_vec(), vec![3.0, 5.0]);
        assert_eq!((a.min(), a.max()), (1.0, 7.0));
        let b = Mat::from_rows(&[[2.0, -1.0], [-1.0, 0.0]]);
        assert_eq!(b.argmin(), 1);
    }

    #[test]
    fn elementwise_helpers() {
        let a = Mat::from_rows(&[[-1.0, 0.0, 2.0]]);
        assert_eq!(a.relu().into_vec(), vec![0.0, 0.0, 2.0]);
        assert_eq!(a.clamp_below(0.5).into_vec(), vec![0.5, 0.5, 2.0]);
        assert_eq!(a.sigmoid()[(0, 1)], 0.5);
        assert!((sigmoid(-800.0)).is_finite());
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert_eq!(v, vec![0.6, 0.8]);
        assert!(l2_normalize(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn serde_roundtrip_validates_shape() {
        let a = Mat::from_rows(&[[1.0, 2.0]]);
        let s = serde_json::to_string(&a).unwrap();
        let b: Mat = serde_json::from_str(&s).unwrap();
        assert_eq!(a, b);
        let bad = r#"{"rows":2,"cols":2,"data":[1.0]}"#;
        assert!(serde_json::from_str::<Mat>(bad).is_err());
    }
}
