use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::features::{l2_normalize_rows, PatchFeatureMap};
use crate::grid::PatchGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffinitySource {
    TeacherDino,
    LearnedClip,
    /// Cosine similarities of an arbitrary feature map.
    Features,
}

/// Patch-to-patch cosine similarities.
///
/// Entries lie in `[-1, 1]`, the matrix is exactly symmetric and its
/// diagonal is exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    grid: PatchGrid,
    values: Array2<f64>,
    source: AffinitySource,
}

impl AffinityMatrix {
    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn source(&self) -> AffinitySource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Wrap externally produced values after checking the invariants.
    pub fn from_values(grid: PatchGrid, values: Array2<f64>, source: AffinitySource) -> Result<Self> {
        let n = grid.len();
        if values.dim() != (n, n) {
            return Err(invalid(format!(
                "affinity must be {n}x{n}, got {:?}",
                values.dim()
            )));
        }
        for p in 0..n {
            if (values[[p, p]] - 1.0).abs() > 1e-5 {
                return Err(invalid(format!("affinity diagonal at {p} is {}", values[[p, p]])));
            }
            for q in 0..n {
                let v = values[[p, q]];
                if !v.is_finite() || v.abs() > 1.0 + 1e-5 || (v - values[[q, p]]).abs() > 1e-5 {
                    return Err(invalid(format!("affinity entry ({p},{q}) = {v} violates invariants")));
                }
            }
        }
        Ok(Self { grid, values, source })
    }
}

/// Cosine affinity of the rows of `values`; exact unit diagonal and symmetry.
pub(crate) fn cosine_affinity(
    grid: PatchGrid,
    values: &Array2<f64>,
    source: AffinitySource,
) -> Result<AffinityMatrix> {
    if values.nrows() == 0 {
        return Err(invalid("empty feature map"));
    }
    let u = l2_normalize_rows(values, "affinity features")?;
    let mut a = u.dot(&u.t());
    let n = a.nrows();
    for p in 0..n {
        a[[p, p]] = 1.0;
        for q in p + 1..n {
            let v = a[[p, q]].clamp(-1.0, 1.0);
            a[[p, q]] = v;
            a[[q, p]] = v;
        }
    }
    Ok(AffinityMatrix {
        grid,
        values: a,
        source,
    })
}

/// Cosine affinity between all pairs of patches of `features`.
pub fn compute_affinity(features: &PatchFeatureMap) -> Result<AffinityMatrix> {
    cosine_affinity(features.grid(), features.values(), AffinitySource::Features)
}

/// Same computation, tagged with an explicit source.
pub fn compute_affinity_as(features: &PatchFeatureMap, source: AffinitySource) -> Result<AffinityMatrix> {
    cosine_affinity(features.grid(), features.values(), source)
}

/// Pooling weights: the affinity with entries below `gamma` zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingWeights {
    grid: PatchGrid,
    values: Array2<f64>,
}

impl PoolingWeights {
    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Arbitrary weights (e.g. uniform or identity) for a grid.
    pub fn from_values(grid: PatchGrid, values: Array2<f64>) -> Result<Self> {
        let n = grid.len();
        if values.dim() != (n, n) {
            return Err(invalid(format!("weights must be {n}x{n}, got {:?}", values.dim())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("weights contain non-finite values"));
        }
        Ok(Self { grid, values })
    }

    pub fn identity(grid: PatchGrid) -> Self {
        Self {
            grid,
            values: Array2::eye(grid.len()),
        }
    }
}

/// Keep entries `>= gamma` verbatim and zero the rest. The unit diagonal
/// survives for every `gamma <= 1`.
pub fn threshold_affinity(affinity: &AffinityMatrix, gamma: f64) -> Result<PoolingWeights> {
    if !(-1.0..=1.0).contains(&gamma) {
        return Err(invalid(format!("gamma {gamma} outside [-1, 1]")));
    }
    Ok(PoolingWeights {
        grid: affinity.grid,
        values: affinity.values.mapv(|v| if v < gamma { 0.0 } else { v }),
    })
}
