//! Global descriptors and id-aligned descriptor sets.

use std::collections::HashSet;

use thiserror::Error;

use crate::numerics::{l2_norm, l2_normalize_in_place, Matrix};

/// Tolerance on `| ‖v‖ − 1 |` for a descriptor to count as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// A single global descriptor. `normalized` is false only when the vector was
/// too close to zero to be scaled to unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f32>,
    pub normalized: bool,
}

impl Descriptor {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Normalizes `values`; see [`crate::numerics::l2_normalize`].
    pub fn from_raw(mut values: Vec<f32>) -> Self {
        let normalized = l2_normalize_in_place(&mut values);
        Self { values, normalized }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SetError {
    #[error("{ids} ids for {rows} descriptor rows")]
    LengthMismatch { ids: usize, rows: usize },
    #[error("duplicate id {0}")]
    DuplicateId(u64),
}

/// Id-aligned matrix of descriptors: row `i` belongs to `ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    ids: Vec<u64>,
    matrix: Matrix,
}

impl DescriptorSet {
    pub fn new(ids: Vec<u64>, matrix: Matrix) -> Result<Self, SetError> {
        if ids.len() != matrix.rows() {
            return Err(SetError::LengthMismatch {
                ids: ids.len(),
                rows: matrix.rows(),
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for &id in &ids {
            if !seen.insert(id) {
                return Err(SetError::DuplicateId(id));
            }
        }
        Ok(Self { ids, matrix })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            ids: Vec::new(),
            matrix: Matrix::zeros(0, dim),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.matrix.row(i)
    }

    /// True when every row has unit norm within [`UNIT_NORM_TOL`].
    pub fn is_normalized(&self) -> bool {
        self.matrix
            .iter_rows()
            .all(|r| (l2_norm(r) - 1.0).abs() < UNIT_NORM_TOL)
    }

    /// Rows selected by position, keeping their ids.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let ids = rows.iter().map(|&r| self.ids[r]).collect();
        let mut data = Vec::with_capacity(rows.len() * self.dim());
        for &r in rows {
            data.extend_from_slice(self.matrix.row(r));
        }
        Self {
            ids,
            matrix: Matrix::new(rows.len(), self.dim(), data).expect("shape is consistent"),
        }
    }

    pub fn into_parts(self) -> (Vec<u64>, Matrix) {
        (self.ids, self.matrix)
    }
}
