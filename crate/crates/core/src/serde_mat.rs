//! Row-major JSON encoding for dense matrices.
//!
//! Matrices are written as flat row-major arrays; the owning document carries
//! the dimensions. On input a nested `[[row], [row], ...]` array is accepted
//! as well.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsidError};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixData {
    Flat(Vec<f64>),
    Nested(Vec<Vec<f64>>),
}

impl MatrixData {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        MatrixData::Flat(row_major(m))
    }

    pub fn to_matrix(&self, rows: usize, cols: usize, name: &str) -> Result<DMatrix<f64>> {
        let flat: Vec<f64> = match self {
            MatrixData::Flat(v) => v.clone(),
            MatrixData::Nested(rs) => {
                if rs.len() != rows || rs.iter().any(|r| r.len() != cols) {
                    return Err(SsidError::DimensionMismatch(format!(
                        "{name}: expected {rows}x{cols} nested array"
                    )));
                }
                rs.iter().flatten().cloned().collect()
            }
        };
        if flat.len() != rows * cols {
            return Err(SsidError::DimensionMismatch(format!(
                "{name}: expected {} entries for {rows}x{cols}, got {}",
                rows * cols,
                flat.len()
            )));
        }
        Ok(DMatrix::from_row_slice(rows, cols, &flat))
    }
}

pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}
