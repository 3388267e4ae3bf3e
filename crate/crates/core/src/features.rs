//! Dense per-node descriptor arrays.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Carrier {
    Image,
    Cloud,
}

/// `M × C` descriptor matrix: one row per pixel, point or graph node.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    vectors: DMatrix<f64>,
    carrier: Carrier,
}

impl FeatureField {
    pub fn new(vectors: DMatrix<f64>, carrier: Carrier) -> Result<Self> {
        if vectors.ncols() == 0 {
            return Err(Error::InvalidArgument("feature fields need at least one channel".into()));
        }
        if !vectors.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature entry".into()));
        }
        Ok(Self { vectors, carrier })
    }

    pub fn from_rows(rows: &[Vec<f64>], carrier: Carrier) -> Result<Self> {
        let c = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != c) {
            return Err(Error::DimensionMismatch {
                expected: c,
                got: bad.len(),
            });
        }
        Self::new(
            DMatrix::from_row_iterator(rows.len(), c, rows.iter().flatten().copied()),
            carrier,
        )
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.vectors
    }

    pub fn carrier(&self) -> Carrier {
        self.carrier
    }

    pub fn rows(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn channels(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.vectors.row(i).transpose()
    }

    /// Copy with every row scaled to unit length; zero rows stay zero.
    pub fn normalized(&self) -> Self {
        let mut m = self.vectors.clone();
        for mut row in m.row_iter_mut() {
            let n = row.norm();
            if n > 0.0 {
                row /= n;
            }
        }
        Self {
            vectors: m,
            carrier: self.carrier,
        }
    }

    /// Sub-field made of the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            vectors: self.vectors.select_rows(rows),
            carrier: self.carrier,
        }
    }

    /// Fails with `NotNormalized` when a row norm deviates from 1 by more than `tol`.
    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        for (i, row) in self.vectors.row_iter().enumerate() {
            let norm = row.norm();
            if (norm - 1.0).abs() > tol {
                return Err(Error::NotNormalized { row: i, norm });
            }
        }
        Ok(())
    }
}
