//! Dense vector and matrix arithmetic shared by retrieval and adapter merging.
//!
//! Everything here runs in `f64`. Embeddings may be stored as `f32` on disk,
//! but similarity is always evaluated in double precision so rankings are
//! stable near ties.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A finite, non-empty real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Numeric("vector must have at least one component".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("vector component {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::new(values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }

    /// Returns a unit-norm copy.
    pub fn normalized(&self) -> Result<Self> {
        let n = norm(self);
        if n == 0.0 {
            return Err(Error::Numeric("cannot normalize a zero vector".into()));
        }
        Ok(Self(self.0.iter().map(|v| v / n).collect()))
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

pub fn dot(a: &Vector, b: &Vector) -> Result<f64> {
    check_dims(a.dim(), b.dim())?;
    Ok(dot_slices(a.as_slice(), b.as_slice()))
}

pub fn norm(a: &Vector) -> f64 {
    dot_slices(a.as_slice(), a.as_slice()).sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &Vector, b: &Vector) -> Result<f64> {
    check_dims(a.dim(), b.dim())?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero-norm vector".into()));
    }
    Ok(cosine_from_parts(dot_slices(a.as_slice(), b.as_slice()), na, nb))
}

/// Cosine of a query against a stored single-precision embedding.
///
/// The stored norm is passed in so stores can cache it.
pub(crate) fn cosine_f32(query: &[f64], query_norm: f64, stored: &[f32], stored_norm: f64) -> f64 {
    let d: f64 = query
        .iter()
        .zip(stored)
        .map(|(&q, &s)| q * f64::from(s))
        .sum();
    cosine_from_parts(d, query_norm, stored_norm)
}

pub(crate) fn norm_f32(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

fn cosine_from_parts(dot: f64, na: f64, nb: f64) -> f64 {
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { expected: a, actual: b });
    }
    Ok(())
}

/// Row-major dense matrix of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Numeric(format!("matrix shape {rows}x{cols} is empty")));
        }
        if rows * cols != values.len() {
            return Err(Error::Numeric(format!(
                "matrix shape {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("matrix contains non-finite values".into()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut m = Self::zeros(n, n)?;
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Folds a low-rank adapter into a base weight: `W + A·B`.
///
/// `A` is `rows(W) × r` and `B` is `r × cols(W)`. No scaling factor is
/// applied. Entries whose update is exactly zero are left untouched, so a
/// zero `B` reproduces `W` bit for bit (including signed zeros).
pub fn lora_merge(w: &Matrix, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows || w.rows != a.rows || w.cols != b.cols {
        return Err(Error::ShapeMismatch(format!(
            "W {}x{}, A {}x{}, B {}x{}",
            w.rows, w.cols, a.rows, a.cols, b.rows, b.cols
        )));
    }
    let rank = a.cols;
    let mut out = w.values.clone();
    for i in 0..w.rows {
        let a_row = &a.values[i * rank..(i + 1) * rank];
        let out_row = &mut out[i * w.cols..(i + 1) * w.cols];
        for (j, cell) in out_row.iter_mut().enumerate() {
            let mut delta = 0.0;
            for (k, &a_ik) in a_row.iter().enumerate() {
                delta += a_ik * b.values[k * b.cols + j];
            }
            if delta != 0.0 {
                *cell += delta;
            }
        }
    }
    Matrix::new(w.rows, w.cols, out)
}
