use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Spatial layout of ViT patch tokens once the class token is dropped.
///
/// Patches are stored row-major: patch `p` sits at row `p / n_cols`, column `p % n_cols`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchGrid {
    pub n_rows: usize,
    pub n_cols: usize,
    pub patch_size: usize,
}

impl PatchGrid {
    pub fn new(n_rows: usize, n_cols: usize, patch_size: usize) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 || patch_size == 0 {
            return Err(invalid(format!(
                "patch grid dimensions must be positive, got {n_rows}x{n_cols} with patch size {patch_size}"
            )));
        }
        Ok(Self {
            n_rows,
            n_cols,
            patch_size,
        })
    }

    /// Grid covering an `height`x`width` image with ceil division.
    pub fn for_image(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if height == 0 || width == 0 || patch_size == 0 {
            return Err(invalid(format!(
                "image {height}x{width} with patch size {patch_size}: all dimensions must be positive"
            )));
        }
        Self::new(
            height.div_ceil(patch_size),
            width.div_ceil(patch_size),
            patch_size,
        )
    }

    /// Number of patches.
    pub fn len(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.n_cols + col
    }

    pub fn coords(&self, patch: usize) -> (usize, usize) {
        (patch / self.n_cols, patch % self.n_cols)
    }

    /// Pixel extent of the grid (padded image size).
    pub fn pixel_extent(&self) -> (usize, usize) {
        (self.n_rows * self.patch_size, self.n_cols * self.patch_size)
    }
}

/// Free-function form of [`PatchGrid::for_image`].
pub fn patch_grid_for(height: usize, width: usize, patch_size: usize) -> Result<PatchGrid> {
    PatchGrid::for_image(height, width, patch_size)
}
