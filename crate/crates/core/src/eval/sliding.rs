//! Sliding-window inference with coverage-normalized score accumulation.

use image::{imageops, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::denoiser::pipeline::Pipeline;
use crate::denoiser::upsample::{PixelAccumulator, PixelScores};
use crate::error::{invalid, Result};
use crate::featurizer::TextQuerySet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlidingWindow {
    pub window: u32,
    pub stride: u32,
}

impl Default for SlidingWindow {
    fn default() -> Self {
        Self {
            window: 448,
            stride: 224,
        }
    }
}

impl SlidingWindow {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.window < self.stride {
            return Err(invalid(format!(
                "need window >= stride > 0, got window {} stride {}",
                self.window, self.stride
            )));
        }
        Ok(())
    }
}

/// Window start offsets along one axis of length `len`. The last window is
/// snapped to the border; an axis shorter than the window gets one window.
pub fn window_origins(len: u32, window: u32, stride: u32) -> Vec<u32> {
    if len <= window {
        return vec![0];
    }
    let mut out: Vec<u32> = (0..).map(|i| i * stride).take_while(|&s| s + window < len).collect();
    out.push(len - window);
    out.dedup();
    out
}

/// Resize `image` to the pipeline's working size, run every window, and
/// return the coverage-normalized pixel scores at the working size.
pub fn sliding_window_segment(
    image: &RgbImage,
    mask: Option<&GrayImage>,
    pipeline: &Pipeline<'_>,
    queries: &TextQuerySet,
    sw: SlidingWindow,
) -> Result<PixelScores> {
    sw.validate()?;
    pipeline.check(queries)?;
    let (img, mask) = pipeline.prepare(image, mask);
    let (w, h) = img.dimensions();
    let ys = window_origins(h, sw.window, sw.stride);
    let xs = window_origins(w, sw.window, sw.stride);
    let (wh, ww) = (sw.window.min(h), sw.window.min(w));
    let mut acc = PixelAccumulator::new(queries.len(), h as usize, w as usize);
    for &y0 in &ys {
        for &x0 in &xs {
            let crop = if (wh, ww) == (h, w) {
                img.clone()
            } else {
                imageops::crop_imm(&img, x0, y0, ww, wh).to_image()
            };
            let crop_mask = mask.as_ref().map(|m| {
                if (wh, ww) == (h, w) {
                    m.clone()
                } else {
                    imageops::crop_imm(m, x0, y0, ww, wh).to_image()
                }
            });
            let (_, scores) = pipeline.run_window(&crop, crop_mask.as_ref(), queries)?;
            acc.add(&scores, y0 as usize, x0 as usize)?;
        }
    }
    acc.finish()
}
