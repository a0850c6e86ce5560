//! Joint image/mask augmentation: random scale and crop, horizontal flip,
//! photometric jitter (image only).

use image::{imageops, GrayImage, Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmentations {
    pub random_scale_crop: bool,
    pub flip: bool,
    pub photometric: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    pub crop_size: u32,
    /// Brightness, contrast and saturation factors are drawn from `1 ± jitter`.
    pub jitter: f64,
}

impl Default for Augmentations {
    fn default() -> Self {
        Self {
            random_scale_crop: true,
            flip: true,
            photometric: true,
            scale_min: 0.5,
            scale_max: 2.0,
            crop_size: 448,
            jitter: 0.25,
        }
    }
}

impl Augmentations {
    pub fn none() -> Self {
        Self {
            random_scale_crop: false,
            flip: false,
            photometric: false,
            ..Self::default()
        }
    }

    pub fn any(&self) -> bool {
        self.random_scale_crop || self.flip || self.photometric
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(invalid("scale range must satisfy 0 < min <= max"));
        }
        if self.crop_size == 0 {
            return Err(invalid("crop size must be positive"));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(invalid("jitter must lie in [0, 1)"));
        }
        Ok(())
    }
}

fn luma(p: &Rgb<u8>) -> f64 {
    0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64
}

fn photometric<R: Rng>(img: &mut RgbImage, jitter: f64, rng: &mut R) {
    let mut draw = || rng.random_range(1.0 - jitter..=1.0 + jitter);
    let (b, c, s) = (draw(), draw(), draw());
    let mean = img.pixels().map(luma).sum::<f64>() / (img.width() * img.height()).max(1) as f64;
    for p in img.pixels_mut() {
        let mut v = p.0.map(|x| x as f64 * b);
        let m = mean * b;
        v = v.map(|x| (x - m) * c + m);
        let g = 0.299 * v[0] + 0.587 * v[1] + 0.114 * v[2];
        v = v.map(|x| g + (x - g) * s);
        p.0 = v.map(|x| x.round().clamp(0.0, 255.0) as u8);
    }
}

/// Apply the enabled augmentations to an image and its foreground mask.
/// Geometry is shared; photometric changes touch only the image. Random
/// crops never exceed the scaled image (no padding).
pub fn augment<R: Rng>(
    image: &RgbImage,
    mask: &GrayImage,
    cfg: &Augmentations,
    rng: &mut R,
) -> Result<(RgbImage, GrayImage)> {
    if image.dimensions() != mask.dimensions() {
        return Err(invalid("image and mask sizes differ"));
    }
    let mut img = image.clone();
    let mut msk = mask.clone();
    if cfg.random_scale_crop {
        let s = rng.random_range(cfg.scale_min..=cfg.scale_max);
        let w = ((img.width() as f64 * s).round() as u32).max(1);
        let h = ((img.height() as f64 * s).round() as u32).max(1);
        img = imageops::resize(&img, w, h, imageops::FilterType::Triangle);
        msk = imageops::resize(&msk, w, h, imageops::FilterType::Nearest);
        let cw = cfg.crop_size.min(w);
        let ch = cfg.crop_size.min(h);
        let x0 = rng.random_range(0..=w - cw);
        let y0 = rng.random_range(0..=h - ch);
        img = imageops::crop_imm(&img, x0, y0, cw, ch).to_image();
        msk = imageops::crop_imm(&msk, x0, y0, cw, ch).to_image();
    }
    if cfg.flip && rng.random_bool(0.5) {
        imageops::flip_horizontal_in_place(&mut img);
        imageops::flip_horizontal_in_place(&mut msk);
    }
    if cfg.photometric {
        photometric(&mut img, cfg.jitter, rng);
    }
    Ok((img, msk))
}
