use ndarray::Axis;

use crate::denoiser::affinity::PoolingWeights;
use crate::error::{degenerate, invalid, Result};
use crate::features::{PatchFeatureMap, SourceTag};

/// Affinity-guided pooling: each output row is the weighted average of all
/// input rows, with weights taken from the matching row of `weights`.
pub fn guided_pool(features: &PatchFeatureMap, weights: &PoolingWeights) -> Result<PatchFeatureMap> {
    if features.grid() != weights.grid() {
        return Err(invalid("feature and weight grids differ"));
    }
    let w = weights.values();
    let sums = w.sum_axis(Axis(1));
    if let Some(p) = sums.iter().position(|s| !(*s > 0.0)) {
        return Err(degenerate(format!(
            "pooling weights of patch {p} sum to {}",
            sums[p]
        )));
    }
    let mut pooled = w.dot(features.values());
    for (mut row, s) in pooled.axis_iter_mut(Axis(0)).zip(sums.iter()) {
        row.mapv_inplace(|v| v / s);
    }
    PatchFeatureMap::new(features.grid(), pooled, SourceTag::Refined)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PatchGrid;
    use ndarray::{array, Array2};

    #[test]
    fn identity_weights_are_identity() {
        let grid = PatchGrid::new(1, 3, 16).unwrap();
        let f = PatchFeatureMap::new(grid, array![[0.1, 2.0], [-3.0, 4.5], [7.0, 1e-3]], SourceTag::MaskclipLast)
            .unwrap();
        let out = guided_pool(&f, &PoolingWeights::identity(grid)).unwrap();
        assert_eq!(out.values(), f.values());
        assert_eq!(out.source(), SourceTag::Refined);
    }

    #[test]
    fn uniform_weights_give_mean() {
        let grid = PatchGrid::new(2, 1, 16).unwrap();
        let f = PatchFeatureMap::new(grid, array![[1.0, 3.0], [3.0, 5.0]], SourceTag::MaskclipLast).unwrap();
        let w = PoolingWeights::from_values(grid, Array2::ones((2, 2))).unwrap();
        let out = guided_pool(&f, &w).unwrap();
        assert_eq!(out.values(), &array![[2.0, 4.0], [2.0, 4.0]]);
    }

    #[test]
    fn zero_row_sum_is_degenerate() {
        let grid = PatchGrid::new(1, 2, 16).unwrap();
        let f = PatchFeatureMap::new(grid, array![[1.0], [2.0]], SourceTag::MaskclipLast).unwrap();
        let w = PoolingWeights::from_values(grid, array![[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(guided_pool(&f, &w), Err(crate::Error::DegenerateInput(_))));
    }
}
