//! Image resizing, normalization and patch extraction.

use image::{imageops, imageops::FilterType, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::PatchGrid;

/// Per-channel normalization applied after scaling pixels to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl PixelStats {
    pub const CLIP: Self = Self {
        mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
        std: [0.268_629_54, 0.261_302_58, 0.275_777_11],
    };
    pub const IMAGENET: Self = Self {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };
}

/// Target dimensions when the shorter side is scaled to `short_side`.
pub fn short_side_dims(height: u32, width: u32, short_side: u32) -> (u32, u32) {
    let short = height.min(width);
    if short == short_side || short == 0 {
        return (height, width);
    }
    let scale = short_side as f64 / short as f64;
    let h = ((height as f64 * scale).round() as u32).max(1);
    let w = ((width as f64 * scale).round() as u32).max(1);
    (h, w)
}

/// Bilinear resize so the shorter side equals `short_side`, keeping aspect
/// ratio. An image already at the target size is returned untouched.
pub fn resize_short_side(img: &RgbImage, short_side: u32) -> RgbImage {
    let (h, w) = short_side_dims(img.height(), img.width(), short_side);
    if (h, w) == (img.height(), img.width()) {
        return img.clone();
    }
    imageops::resize(img, w, h, FilterType::Triangle)
}

/// Normalized `3 x H' x W'` tensor, zero-padded so both sides are patch
/// multiples, and the grid it covers.
pub fn normalize_and_pad(
    img: &RgbImage,
    stats: &PixelStats,
    patch_size: usize,
) -> Result<(Array3<f32>, PatchGrid)> {
    let (h, w) = (img.height() as usize, img.width() as usize);
    let grid = PatchGrid::for_image(h, w, patch_size)?;
    let (ph, pw) = grid.pixel_extent();
    let mut t = Array3::<f32>::zeros((3, ph, pw));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            let v = px.0[c] as f32 / 255.0;
            t[[c, y as usize, x as usize]] = (v - stats.mean[c]) / stats.std[c];
        }
    }
    Ok((t, grid))
}

/// Flatten each patch in `(channel, row, col)` order, matching a PyTorch
/// `[D, 3, P, P]` convolution kernel flattened to `[D, 3*P*P]`.
pub fn patchify(t: &Array3<f32>, grid: &PatchGrid) -> Result<Array2<f32>> {
    let p = grid.patch_size;
    let (c, h, w) = t.dim();
    if (h, w) != grid.pixel_extent() {
        return Err(invalid(format!(
            "tensor {h}x{w} does not match grid extent {:?}",
            grid.pixel_extent()
        )));
    }
    let mut out = Array2::<f32>::zeros((grid.len(), c * p * p));
    for r in 0..grid.n_rows {
        for col in 0..grid.n_cols {
            let idx = grid.index(r, col);
            let mut k = 0;
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        out[[idx, k]] = t[[ch, r * p + dy, col * p + dx]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Crop (or zero-pad) an image into a `height x width` canvas anchored top-left.
pub fn crop_or_pad(img: &RgbImage, x0: u32, y0: u32, width: u32, height: u32) -> RgbImage {
    let mut out = RgbImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let (sx, sy) = (x0 + x, y0 + y);
            if sx < img.width() && sy < img.height() {
                out.put_pixel(x, y, *img.get_pixel(sx, sy));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn short_side_keeps_aspect() {
        assert_eq!(short_side_dims(500, 375, 448), (597, 448));
        assert_eq!(short_side_dims(448, 448, 448), (448, 448));
        assert_eq!(short_side_dims(224, 112, 448), (896, 448));
    }

    #[test]
    fn identity_resize_is_untouched() {
        let img = RgbImage::from_fn(448, 460, |x, y| Rgb([x as u8, y as u8, 7]));
        assert_eq!(resize_short_side(&img, 448), img);
    }

    #[test]
    fn padding_rounds_up_to_patches() {
        let img = RgbImage::from_pixel(17, 33, Rgb([255, 0, 0]));
        let (t, grid) = normalize_and_pad(&img, &PixelStats::CLIP, 16).unwrap();
        assert_eq!((grid.n_rows, grid.n_cols), (3, 2));
        assert_eq!(t.dim(), (3, 48, 32));
        assert_eq!(t[[0, 40, 0]], 0.0);
        let red = (1.0 - PixelStats::CLIP.mean[0]) / PixelStats::CLIP.std[0];
        assert!((t[[0, 0, 0]] - red).abs() < 1e-6);
    }

    #[test]
    fn patchify_orders_channel_row_col() {
        let t = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| (c * 100 + y * 10 + x) as f32);
        let grid = PatchGrid::new(2, 2, 2).unwrap();
        let p = patchify(&t, &grid).unwrap();
        // Patch (row 0, col 1): channel 0 rows 0..2, cols 2..4.
        assert_eq!(p.row(1).to_vec()[..4], [2.0, 3.0, 12.0, 13.0]);
        assert_eq!(p[[3, 4]], 122.0);
    }
}
