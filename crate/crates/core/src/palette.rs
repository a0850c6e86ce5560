//! Indexed-colour label images and their palette.
//!
//! Class `i` is drawn with the PASCAL VOC colour map entry `i` (bits of the
//! index spread over the high bits of R, G and B).

use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::denoiser::upsample::LabelMap;
use crate::error::{invalid, Result};

/// Colour of class `index`.
pub fn color(index: u8) -> [u8; 3] {
    let mut rgb = [0u8; 3];
    let mut c = index;
    for shift in (0..8).rev() {
        for (ch, v) in rgb.iter_mut().enumerate() {
            *v |= ((c >> ch) & 1) << shift;
        }
        c >>= 3;
    }
    rgb
}

pub fn palette(n: usize) -> Vec<[u8; 3]> {
    (0..n.min(256)).map(|i| color(i as u8)).collect()
}

fn check_labels(labels: &LabelMap, n_classes: usize) -> Result<()> {
    if n_classes == 0 || n_classes > 256 {
        return Err(invalid(format!("indexed images hold 1..=256 classes, got {n_classes}")));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= n_classes) {
        return Err(invalid(format!("label {l} outside {n_classes} classes")));
    }
    Ok(())
}

/// Encode a label map as an 8-bit palette PNG.
pub fn indexed_png(labels: &LabelMap, n_classes: usize) -> Result<Vec<u8>> {
    check_labels(labels, n_classes)?;
    let (h, w) = labels.dim();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(palette(n_classes).concat());
        let mut writer = enc
            .write_header()
            .map_err(|e| invalid(format!("png header: {e}")))?;
        let data: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
        writer
            .write_image_data(&data)
            .map_err(|e| invalid(format!("png data: {e}")))?;
    }
    Ok(out)
}

pub fn write_indexed_png(labels: &LabelMap, n_classes: usize, path: &Path) -> Result<()> {
    std::fs::write(path, indexed_png(labels, n_classes)?)?;
    Ok(())
}

/// Palette/legend text: `index<TAB>#rrggbb<TAB>name` per class.
pub fn legend(names: &[String]) -> String {
    let mut s = String::new();
    for (i, name) in names.iter().enumerate().take(256) {
        let [r, g, b] = color(i as u8);
        s.push_str(&format!("{i}\t#{r:02x}{g:02x}{b:02x}\t{name}\n"));
    }
    s
}

pub fn write_legend(names: &[String], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(legend(names).as_bytes())?;
    Ok(())
}

/// RGB rendering of a label map.
pub fn colorize(labels: &LabelMap) -> RgbImage {
    let (h, w) = labels.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb(color(labels[[y as usize, x as usize]].min(255) as u8))
    })
}
