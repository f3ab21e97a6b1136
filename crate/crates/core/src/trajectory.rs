//! Dense `d × τ` perturbation matrices stored column by column.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::Scalar;

/// A `d × τ` matrix of pre-logit perturbations, one column per controlled
/// decoding step. Also used for the mean of the perturbation distribution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory<T> {
    rows: usize,
    cols: usize,
    // column-major: column t occupies data[t*rows..(t+1)*rows]
    data: Vec<T>,
}

/// The mean `U` being optimized has the same layout as a sample `V`.
pub type MeanTrajectory<T> = Trajectory<T>;

impl<T: Scalar> Trajectory<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    /// Builds from column-major data. Entries must be finite.
    pub fn from_columns(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "trajectory data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("trajectory entries must be finite"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for c in 0..cols {
            for r in 0..rows {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Pre-logit dimension `d`.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Control horizon `τ`.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[col * self.rows + row]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[col * self.rows + row] = value;
    }

    pub fn column(&self, t: usize) -> &[T] {
        &self.data[t * self.rows..(t + 1) * self.rows]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.rows.max(1)).take(self.cols)
    }

    /// Column-major view of all entries.
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Frobenius inner product `Σ_t a_tᵀ b_t`.
    pub fn dot(&self, other: &Self) -> Result<T> {
        self.ensure_shape(other.rows, other.cols)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn squared_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn ensure_shape(&self, rows: usize, cols: usize) -> Result<()> {
        if self.rows != rows || self.cols != cols {
            return Err(Error::ShapeMismatch {
                expected_rows: rows,
                expected_cols: cols,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_major_layout() {
        let m = Trajectory::from_fn(2, 3, |r, c| (10 * c + r) as f64);
        assert_eq!(m.column(1), &[10.0, 11.0]);
        assert_eq!(m.get(1, 2), 21.0);
        assert_eq!(m.columns().count(), 3);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Trajectory::from_columns(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(Trajectory::from_columns(1, 2, vec![0.0]).is_err());
    }

    #[test]
    fn dot_checks_shape() {
        let a = Trajectory::<f64>::zeros(2, 2);
        let b = Trajectory::<f64>::zeros(2, 3);
        assert!(matches!(a.dot(&b), Err(Error::ShapeMismatch { .. })));
    }
}
