use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{degenerate, invalid, Result};
use crate::grid::PatchGrid;

/// Where a dense feature map came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    /// Text-aligned output of the value-projection path of the last block.
    MaskclipLast,
    /// Residual stream after an intermediate block.
    Intermediate { layer: usize },
    /// Output of affinity-guided pooling.
    Refined,
}

/// Dense per-patch features, one row per patch in row-major grid order.
///
/// The class token is never part of a feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureMap {
    grid: PatchGrid,
    values: Array2<f64>,
    source: SourceTag,
}

impl PatchFeatureMap {
    pub fn new(grid: PatchGrid, values: Array2<f64>, source: SourceTag) -> Result<Self> {
        if values.nrows() != grid.len() {
            return Err(invalid(format!(
                "feature map has {} rows but grid {}x{} has {} patches",
                values.nrows(),
                grid.n_rows,
                grid.n_cols,
                grid.len()
            )));
        }
        if values.ncols() == 0 {
            return Err(invalid("feature dimension must be positive"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("feature map contains non-finite values"));
        }
        Ok(Self {
            grid,
            values,
            source,
        })
    }

    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn source(&self) -> SourceTag {
        self.source
    }

    pub fn row(&self, patch: usize) -> ArrayView1<'_, f64> {
        self.values.row(patch)
    }

    pub(crate) fn with_source(mut self, source: SourceTag) -> Self {
        self.source = source;
        self
    }
}

/// Rows scaled to unit L2 norm. Fails on any zero-norm row instead of producing NaN.
pub(crate) fn l2_normalize_rows(values: &Array2<f64>, what: &str) -> Result<Array2<f64>> {
    let mut out = values.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(degenerate(format!("{what}: row {i} has zero norm")));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_row_mismatch() {
        let grid = PatchGrid::new(2, 2, 16).unwrap();
        let err = PatchFeatureMap::new(grid, Array2::zeros((3, 4)), SourceTag::Refined);
        assert!(err.is_err());
    }

    #[test]
    fn rejects_nan() {
        let grid = PatchGrid::new(1, 1, 16).unwrap();
        let err = PatchFeatureMap::new(grid, array![[f64::NAN]], SourceTag::Refined);
        assert!(err.is_err());
    }

    #[test]
    fn normalize_guards_zero_rows() {
        let v = array![[3.0, 4.0], [0.0, 0.0]];
        assert!(l2_normalize_rows(&v, "test").is_err());
        let ok = l2_normalize_rows(&array![[3.0, 4.0]], "test").unwrap();
        assert_eq!(ok, array![[0.6, 0.8]]);
    }
}
