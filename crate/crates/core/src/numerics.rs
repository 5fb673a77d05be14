//! Dense double-precision matrices and the handful of array operations the
//! mask builders and mixer forms are composed from.
//!
//! Storage is row-major. Batch and head axes are not represented; callers
//! loop over independent [`Matrix`] values instead.

use std::fmt::Write as _;

use crate::error::{LionError, Result};

/// Row sums smaller than this in magnitude are rejected under [`ScalingMode::Sum`].
pub const DEGENERATE_ROW_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(LionError::shape(format!(
                "matrix must be at least 1x1, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(LionError::shape(format!(
                "{} elements cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be at least 1x1");
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be at least 1x1");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(LionError::shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn column(&self, j: usize) -> Vector {
        Vector((0..self.rows).map(|i| self.get(i, j)).collect())
    }

    pub fn diagonal(&self) -> Vector {
        let n = self.rows.min(self.cols);
        Vector((0..n).map(|i| self.get(i, i)).collect())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(LionError::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Matrix {
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

    /// Selects a contiguous row range as a new matrix.
    pub fn row_block(&self, start: usize, len: usize) -> Matrix {
        assert!(start + len <= self.rows && len > 0);
        Matrix {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    /// Selects the `rows x cols` window whose top-left corner is `(r0, c0)`.
    pub fn submatrix(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Matrix {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols);
        Matrix::from_fn(rows, cols, |i, j| self.get(r0 + i, c0 + j))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// One row per line, comma separated, 17 significant digits per entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.data.len() * 24);
        for i in 0..self.rows {
            for (j, x) in self.row(i).iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                write!(out, "{x:.16e}").expect("writing to a String cannot fail");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Matrix> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|field| {
                    field.trim().parse::<f64>().map_err(|e| LionError::Parse {
                        line: n + 1,
                        msg: format!("`{}`: {e}", field.trim()),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(LionError::Parse {
                        line: n + 1,
                        msg: format!("expected {} fields, found {}", first.len(), row.len()),
                    });
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(LionError::Parse {
                line: 0,
                msg: "no data rows".into(),
            });
        }
        Matrix::from_rows(&rows)
    }
}

/// A nonempty sequence of reals (decays, log-decays, gates, cumulative factors).
#[derive(Debug, Clone, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(LionError::shape("vector must have at least one entry"));
        }
        Ok(Self(data))
    }

    pub fn filled(len: usize, value: f64) -> Self {
        assert!(len > 0, "vector must have at least one entry");
        Self(vec![value; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Vector {
        Vector(self.0.iter().map(|&x| f(x)).collect())
    }

    pub fn reversed(&self) -> Vector {
        Vector(self.0.iter().rev().copied().collect())
    }

    /// Single-column matrix view of the vector.
    pub fn to_column(&self) -> Matrix {
        Matrix {
            rows: self.0.len(),
            cols: 1,
            data: self.0.clone(),
        }
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = LionError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Vector::new(v)
    }
}

/// Output normalization applied to masked attention rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScalingMode {
    /// No normalization.
    None,
    /// Divide each row by its (masked) row sum.
    Sum,
    /// Divide each row by `max(|row sum|, 1)`.
    MaxOne,
    /// Divide by the row sum of the *unmasked* scores. This is the denominator
    /// produced by an undecayed `z` recurrence; it differs from [`ScalingMode::Sum`]
    /// whenever a decay is below one.
    SumUnmasked,
}

impl ScalingMode {
    pub const ALL: [ScalingMode; 4] = [
        ScalingMode::None,
        ScalingMode::Sum,
        ScalingMode::MaxOne,
        ScalingMode::SumUnmasked,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScalingMode::None => "none",
            ScalingMode::Sum => "sum",
            ScalingMode::MaxOne => "max-one",
            ScalingMode::SumUnmasked => "sum-unmasked",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }

    /// Turns an accumulated denominator into the divisor for `row`.
    ///
    /// Returns `None` when no division is applied.
    pub fn divisor(self, row: usize, denominator: f64) -> Result<Option<f64>> {
        match self {
            ScalingMode::None => Ok(None),
            ScalingMode::Sum | ScalingMode::SumUnmasked => {
                if denominator.abs() < DEGENERATE_ROW_EPS || !denominator.is_finite() {
                    Err(LionError::DegenerateRow {
                        row,
                        value: denominator,
                    })
                } else {
                    Ok(Some(denominator))
                }
            }
            ScalingMode::MaxOne => Ok(Some(denominator.abs().max(1.0))),
        }
    }
}

impl std::fmt::Display for ScalingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Standard product; each entry accumulates over the inner index in
/// ascending order starting from zero.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(LionError::shape(format!(
            "matmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a_row.iter().enumerate() {
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(LionError::shape(format!(
            "matmul_transposed: {}x{} times ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(Matrix::from_fn(a.rows, b.rows, |i, j| {
        dot(a.row(i), b.row(j))
    }))
}

pub fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.zip_with(b, "hadamard", |x, y| x * y)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn cumprod(v: &Vector) -> Vector {
    let mut acc = 1.0;
    Vector(
        v.iter()
            .map(|&x| {
                acc *= x;
                acc
            })
            .collect(),
    )
}

pub fn cumsum(v: &Vector) -> Vector {
    let mut acc = 0.0;
    Vector(
        v.iter()
            .map(|&x| {
                acc += x;
                acc
            })
            .collect(),
    )
}

/// Row reversal, `J·X`.
pub fn flip_rows(x: &Matrix) -> Matrix {
    let mut data = Vec::with_capacity(x.data.len());
    for i in (0..x.rows).rev() {
        data.extend_from_slice(x.row(i));
    }
    Matrix {
        rows: x.rows,
        cols: x.cols,
        data,
    }
}

/// Row and column reversal, `J·X·J`.
pub fn exchange_conjugate(x: &Matrix) -> Result<Matrix> {
    if !x.is_square() {
        return Err(LionError::shape(format!(
            "exchange_conjugate needs a square matrix, got {}x{}",
            x.rows, x.cols
        )));
    }
    let n = x.rows;
    Ok(Matrix::from_fn(n, n, |i, j| x.get(n - 1 - i, n - 1 - j)))
}

/// Keeps entries with `j <= i + offset`.
pub fn tril(x: &Matrix, offset: isize) -> Result<Matrix> {
    triangle(x, offset, "tril", |i, j, d| j <= i + d)
}

/// Keeps entries with `j >= i + offset`.
pub fn triu(x: &Matrix, offset: isize) -> Result<Matrix> {
    triangle(x, offset, "triu", |i, j, d| j >= i + d)
}

fn triangle(
    x: &Matrix,
    offset: isize,
    op: &str,
    keep: impl Fn(isize, isize, isize) -> bool,
) -> Result<Matrix> {
    if !x.is_square() {
        return Err(LionError::shape(format!(
            "{op} needs a square matrix, got {}x{}",
            x.rows, x.cols
        )));
    }
    Ok(Matrix::from_fn(x.rows, x.cols, |i, j| {
        if keep(i as isize, j as isize, offset) {
            x.get(i, j)
        } else {
            0.0
        }
    }))
}

/// Row normalization of a score matrix.
///
/// [`ScalingMode::SumUnmasked`] divides by the row sums of `a` as given; it
/// is up to the caller to hand in unmasked scores.
pub fn scale_rows(a: &Matrix, mode: ScalingMode) -> Result<Matrix> {
    let mut out = a.clone();
    for i in 0..a.rows {
        let sum: f64 = a.row(i).iter().sum();
        if let Some(div) = mode.divisor(i, sum)? {
            out.row_mut(i).iter_mut().for_each(|x| *x /= div);
        }
    }
    Ok(out)
}

/// `max |a - b| / max |b|`, the infinity-norm relative error of `a` against
/// reference `b`. Falls back to the absolute error when `b` is all zeros.
pub fn max_rel_err(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_err: shape mismatch");
    let diff = a
        .data
        .iter()
        .zip(&b.data)
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = b.max_abs();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}
