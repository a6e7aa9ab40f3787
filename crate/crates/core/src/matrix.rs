//! Dense row-major matrices and the handful of vector routines the adapters need.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Residual norm below which a Gram-Schmidt candidate is considered degenerate.
pub const GS_TOLERANCE: f64 = 1e-10;
/// Number of fresh Gaussian candidates tried before giving up.
pub const GS_MAX_RETRIES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} entries", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Column vector from a slice.
    pub fn column_vector(v: &[f64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    /// Matrix of i.i.d. N(0, std²) entries, filled in row-major order.
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Result<Self> {
        if !std.is_finite() || std <= 0.0 {
            return Err(Error::Parameter(format!(
                "gaussian std must be positive and finite, got {std}"
            )));
        }
        let data = (0..rows * cols).map(|_| rng.normal(std)).collect();
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Standard product `self · rhs`.
    ///
    /// Accumulators start at `+0.0` and sum in increasing inner index, so the
    /// result is reproducible and never `-0.0` unless an operand forces it.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape(
                "matmul",
                format!("lhs cols == rhs rows ({})", self.cols),
                format!("{}x{} · {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::shape(
                "t_matmul",
                format!("lhs rows == rhs rows ({})", self.rows),
                format!("{}x{}ᵀ · {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            ));
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let lhs_row = self.row(k);
            let rhs_row = rhs.row(k);
            for (i, &a) in lhs_row.iter().enumerate() {
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::shape(
                "matmul_t",
                format!("lhs cols == rhs cols ({})", self.cols),
                format!("{}x{} · {}x{}ᵀ", self.rows, self.cols, rhs.rows, rhs.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = dot(a, rhs.row(j));
            }
        }
        Ok(out)
    }

    fn check_same_shape(&self, rhs: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(
                op,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", rhs.rows, rhs.cols),
            ));
        }
        Ok(())
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.check_same_shape(rhs, "add")?;
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { data, ..*self })
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.check_same_shape(rhs, "sub")?;
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { data, ..*self })
    }

    pub fn add_assign(&mut self, rhs: &Matrix) -> Result<()> {
        self.check_same_shape(rhs, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha · rhs`
    pub fn axpy(&mut self, alpha: f64, rhs: &Matrix) -> Result<()> {
        self.check_same_shape(rhs, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Multiplies row `i` by `factors[i]` (left multiplication by a diagonal).
    pub fn scale_rows(&self, factors: &[f64]) -> Result<Matrix> {
        if factors.len() != self.rows {
            return Err(Error::shape("scale_rows", self.rows, factors.len()));
        }
        let mut out = self.clone();
        for (i, &f) in factors.iter().enumerate() {
            for v in &mut out.data[i * self.cols..(i + 1) * self.cols] {
                *v *= f;
            }
        }
        Ok(out)
    }

    pub fn remove_column(&mut self, j: usize) {
        assert!(j < self.cols, "column {j} out of range");
        let mut data = Vec::with_capacity(self.rows * (self.cols - 1));
        for i in 0..self.rows {
            let row = self.row(i);
            data.extend_from_slice(&row[..j]);
            data.extend_from_slice(&row[j + 1..]);
        }
        self.cols -= 1;
        self.data = data;
    }

    pub fn remove_row(&mut self, i: usize) {
        assert!(i < self.rows, "row {i} out of range");
        self.data.drain(i * self.cols..(i + 1) * self.cols);
        self.rows -= 1;
    }

    pub fn push_column(&mut self, col: &[f64]) -> Result<()> {
        if col.len() != self.rows {
            return Err(Error::shape("push_column", self.rows, col.len()));
        }
        let mut data = Vec::with_capacity(self.rows * (self.cols + 1));
        for (i, &c) in col.iter().enumerate() {
            data.extend_from_slice(self.row(i));
            data.push(c);
        }
        self.cols += 1;
        self.data = data;
        Ok(())
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::shape("push_row", self.cols, row.len()));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// One line per row, comma separated, shortest round-trip decimal form.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.rows {
            for (j, v) in self.row(i).iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                write!(out, "{v:?}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Matrix> {
        let mut rows = 0;
        let mut cols = None;
        let mut data = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row = parse_csv_row(line, lineno + 1)?;
            match cols {
                None => cols = Some(row.len()),
                Some(c) if c != row.len() => {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        message: format!("expected {c} columns, found {}", row.len()),
                    })
                }
                _ => {}
            }
            data.extend(row);
            rows += 1;
        }
        let cols = cols.ok_or(Error::Parse {
            line: 0,
            message: "empty matrix".into(),
        })?;
        Matrix::from_vec(rows, cols, data)
    }
}

/// Parses one comma-separated line of finite reals.
pub fn parse_csv_row(line: &str, lineno: usize) -> Result<Vec<f64>> {
    line.split(',')
        .map(|cell| {
            let cell = cell.trim();
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("`{cell}` is not finite"),
                });
            }
            Ok(v)
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Singular values of an SVD-form factorization.
///
/// A constructed `Spectrum` is non-empty with finite, non-negative entries. The
/// importance metrics themselves take plain slices because trained singular
/// values may drift negative.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum(Vec<f64>);

impl Spectrum {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Parameter("spectrum must be non-empty".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Parameter(format!(
                "singular values must be finite and non-negative, got {v}"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Deref for Spectrum {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Returns a unit vector orthogonal to every column of `basis`.
///
/// The basis need not be orthonormal: its columns are first reduced to an
/// orthonormal set spanning the same space (near-dependent columns dropped),
/// then `candidate` is projected off that set twice. If the residual norm
/// falls below [`GS_TOLERANCE`], a fresh Gaussian candidate is drawn, up to
/// [`GS_MAX_RETRIES`] times.
pub fn gram_schmidt_extend(basis: &Matrix, candidate: &[f64], rng: &mut SeededRng) -> Result<Vec<f64>> {
    let n = basis.rows();
    if candidate.len() != n {
        return Err(Error::shape("gram_schmidt_extend", n, candidate.len()));
    }
    if !basis.is_finite() || candidate.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("gram_schmidt_extend needs finite inputs".into()));
    }
    if basis.cols() >= n {
        return Err(Error::RankFull {
            rows: n,
            cols: basis.cols(),
        });
    }

    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(basis.cols());
    for j in 0..basis.cols() {
        let col = basis.column(j);
        let scale = norm(&col);
        if scale == 0.0 {
            continue;
        }
        let mut v: Vec<f64> = col.iter().map(|x| x / scale).collect();
        project_out(&mut v, &ortho);
        project_out(&mut v, &ortho);
        let r = norm(&v);
        if r > GS_TOLERANCE {
            v.iter_mut().for_each(|x| *x /= r);
            ortho.push(v);
        }
    }

    let mut v = candidate.to_vec();
    for attempt in 0..=GS_MAX_RETRIES {
        if attempt > 0 {
            v = (0..n).map(|_| rng.standard_normal()).collect();
        }
        project_out(&mut v, &ortho);
        project_out(&mut v, &ortho);
        let r = norm(&v);
        if r >= GS_TOLERANCE {
            v.iter_mut().for_each(|x| *x /= r);
            return Ok(v);
        }
    }
    Err(Error::DegenerateInput {
        retries: GS_MAX_RETRIES,
    })
}

fn project_out(v: &mut [f64], ortho: &[Vec<f64>]) {
    for u in ortho {
        let c = dot(v, u);
        for (x, y) in v.iter_mut().zip(u) {
            *x -= c * y;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn identity_times_a() {
        let a = Matrix::from_rows(&[&[1.5, -2.0], &[0.25, 7.0]]);
        assert_eq!(Matrix::identity(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Matrix::from_rows(&[&[1.0], &[1.0]]);
        assert_eq!(a.matmul(&b).unwrap(), Matrix::from_rows(&[&[3.0], &[7.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SeededRng::new(11);
        let a = Matrix::gaussian(5, 3, 1.0, &mut rng).unwrap();
        let b = Matrix::gaussian(3, 4, 1.0, &mut rng).unwrap();
        let fast = a.matmul(&b).unwrap();
        assert!(max_abs_diff(&fast, &naive_matmul(&a, &b)) <= 1e-12);
        assert!(max_abs_diff(&a.t_matmul(&fast).unwrap(), &naive_matmul(&a.transpose(), &fast)) <= 1e-12);
        assert!(max_abs_diff(&fast.matmul_t(&b).unwrap(), &naive_matmul(&fast, &b.transpose())) <= 1e-12);
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
    }

    #[test]
    fn gaussian_is_deterministic() {
        let a = Matrix::gaussian(4, 4, 0.5, &mut SeededRng::new(9)).unwrap();
        let b = Matrix::gaussian(4, 4, 0.5, &mut SeededRng::new(9)).unwrap();
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn gaussian_moments() {
        // Standard error of the mean is 0.01 and of the std about 0.007 at n = 1e4.
        let m = Matrix::gaussian(100, 100, 1.0, &mut SeededRng::new(2024)).unwrap();
        let n = m.data().len() as f64;
        let mean = m.data().iter().sum::<f64>() / n;
        let var = m.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 0.05, "mean {mean}");
        assert!((0.95..=1.05).contains(&var.sqrt()), "std {}", var.sqrt());
    }

    #[test]
    fn gaussian_rejects_bad_std() {
        let mut rng = SeededRng::new(0);
        assert!(matches!(Matrix::gaussian(2, 2, 0.0, &mut rng), Err(Error::Parameter(_))));
        assert!(matches!(Matrix::gaussian(2, 2, -1.0, &mut rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn frobenius_cases() {
        assert_eq!(Matrix::zeros(3, 2).frobenius_norm(), 0.0);
        assert_eq!(Matrix::from_rows(&[&[3.0, 4.0]]).frobenius_norm(), 5.0);
        let m = Matrix::gaussian(6, 7, 2.0, &mut SeededRng::new(5)).unwrap();
        let mut s = 0.0;
        for i in 0..6 {
            for j in 0..7 {
                s += m.get(i, j) * m.get(i, j);
            }
        }
        assert!((m.frobenius_norm() - s.sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn gram_schmidt_hand_cases() {
        let mut rng = SeededRng::new(1);
        let e1 = Matrix::from_rows(&[&[1.0], &[0.0], &[0.0]]);
        assert_eq!(gram_schmidt_extend(&e1, &[0.0, 1.0, 0.0], &mut rng).unwrap(), vec![0.0, 1.0, 0.0]);
        let v = gram_schmidt_extend(&e1, &[1.0, 1.0, 0.0], &mut rng).unwrap();
        assert!(v[0].abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15 && v[2] == 0.0);
    }

    #[test]
    fn gram_schmidt_resamples_degenerate_candidate() {
        let mut rng = SeededRng::new(1);
        let e1 = Matrix::from_rows(&[&[1.0], &[0.0], &[0.0]]);
        let v = gram_schmidt_extend(&e1, &[2.0, 0.0, 0.0], &mut rng).unwrap();
        assert!(v[0].abs() < 1e-10);
        assert!((norm(&v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gram_schmidt_rank_full() {
        let mut rng = SeededRng::new(1);
        let basis = Matrix::identity(3);
        assert!(matches!(
            gram_schmidt_extend(&basis, &[1.0, 2.0, 3.0], &mut rng),
            Err(Error::RankFull { rows: 3, cols: 3 })
        ));
    }

    #[test]
    fn gram_schmidt_random_orthonormal_basis() {
        let mut rng = SeededRng::new(77);
        let mut basis = Matrix::zeros(8, 0);
        for _ in 0..3 {
            let c: Vec<f64> = (0..8).map(|_| rng.standard_normal()).collect();
            let v = gram_schmidt_extend(&basis, &c, &mut rng).unwrap();
            basis.push_column(&v).unwrap();
        }
        let cand: Vec<f64> = (0..8).map(|_| rng.standard_normal()).collect();
        let v = gram_schmidt_extend(&basis, &cand, &mut rng).unwrap();
        for j in 0..3 {
            assert!(dot(&v, &basis.column(j)).abs() <= 1e-10);
        }
        assert!((norm(&v) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = Matrix::from_rows(&[&[0.1, -1e-300, 1.0 / 3.0], &[5e20, 0.0, -0.0]]);
        let back = Matrix::from_csv(&m.to_csv()).unwrap();
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m), bits(&back));
    }

    #[test]
    fn csv_rejects_garbage() {
        assert!(matches!(Matrix::from_csv("1,2\n3,x\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(Matrix::from_csv("1,2\n3\n"), Err(Error::Parse { line: 2, .. })));
        assert!(Matrix::from_csv("").is_err());
    }

    #[test]
    fn spectrum_validation() {
        assert!(Spectrum::new(vec![]).is_err());
        assert!(Spectrum::new(vec![1.0, -0.5]).is_err());
        assert!(Spectrum::new(vec![1.0, f64::NAN]).is_err());
        assert_eq!(Spectrum::new(vec![2.0, 0.0]).unwrap().len(), 2);
    }

    #[test]
    fn structural_edits() {
        let mut m = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        m.remove_column(1);
        assert_eq!(m, Matrix::from_rows(&[&[1.0, 3.0], &[4.0, 6.0]]));
        m.push_column(&[9.0, 8.0]).unwrap();
        assert_eq!(m, Matrix::from_rows(&[&[1.0, 3.0, 9.0], &[4.0, 6.0, 8.0]]));
        m.remove_row(0);
        assert_eq!(m, Matrix::from_rows(&[&[4.0, 6.0, 8.0]]));
        m.push_row(&[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(m.shape(), (2, 3));
    }

    fn arb_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(-3.0f64..3.0, rows * cols)
            .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(
            (a, b, c) in (1usize..5, 1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(m, n, p, q)| {
                (arb_matrix(m, n), arb_matrix(n, p), arb_matrix(p, q))
            })
        ) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.frobenius_norm().max(1.0);
            prop_assert!(left.sub(&right).unwrap().frobenius_norm() <= 1e-9 * scale);
        }
    }

    #[test]
    fn gram_schmidt_thousand_random_instances() {
        let mut rng = SeededRng::new(4242);
        for _ in 0..1000 {
            let n = 2 + rng.below(10);
            let k = rng.below(n);
            let basis = Matrix::gaussian(n, k.max(1), 1.0, &mut rng).unwrap();
            let basis = if k == 0 { Matrix::zeros(n, 0) } else { basis };
            let cand: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
            let v = gram_schmidt_extend(&basis, &cand, &mut rng).unwrap();
            assert!((norm(&v) - 1.0).abs() <= 1e-12);
            for j in 0..basis.cols() {
                let col = basis.column(j);
                assert!(dot(&v, &col).abs() <= 1e-10 * norm(&col).max(1.0));
            }
        }
    }
}
