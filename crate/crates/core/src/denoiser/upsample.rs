//! Patch scores to pixel label maps.

use ndarray::{s, Array2, Array3};

use crate::denoiser::matching::SegmentationResult;
use crate::error::{invalid, Result};

/// Per-pixel class indices.
pub type LabelMap = Array2<u32>;

/// Dense pixel scores plus the background-override decision.
///
/// `override_frac` is the fraction of contributing predictions that forced
/// the background label at that pixel; a pixel is background when it
/// exceeds one half.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelScores {
    scores: Array3<f32>,
    override_frac: Array2<f32>,
    background: Option<usize>,
}

/// Half-pixel-aligned source coordinate with PyTorch-style clamping.
fn bilinear_tap(dst: usize, scale: f64, n_src: usize) -> (usize, usize, f64) {
    let x = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let x0 = (x.floor() as usize).min(n_src - 1);
    let x1 = (x0 + 1).min(n_src - 1);
    let frac = if x0 == n_src - 1 { 0.0 } else { x - x0 as f64 };
    (x0, x1, frac)
}

fn nearest_tap(dst: usize, scale: f64, n_src: usize) -> usize {
    (((dst as f64 + 0.5) * scale).floor() as usize).min(n_src - 1)
}

impl PixelScores {
    /// Interpolate patch scores onto a `height x width` pixel canvas that
    /// spans `extent` grid cells (rows, cols). Score channels are bilinear;
    /// the background override is expanded nearest-neighbour.
    pub fn from_result(
        result: &SegmentationResult,
        height: usize,
        width: usize,
        extent: (f64, f64),
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("pixel canvas must be non-empty"));
        }
        if !(extent.0 > 0.0 && extent.1 > 0.0) {
            return Err(invalid("grid extent must be positive"));
        }
        let grid = result.grid();
        let c = result.n_queries();
        let sy = extent.0 / height as f64;
        let sx = extent.1 / width as f64;
        let ty: Vec<_> = (0..height).map(|y| bilinear_tap(y, sy, grid.n_rows)).collect();
        let tx: Vec<_> = (0..width).map(|x| bilinear_tap(x, sx, grid.n_cols)).collect();
        let scores_in = result.scores();
        let mut scores = Array3::<f32>::zeros((c, height, width));
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let p00 = grid.index(y0, x0);
                let p01 = grid.index(y0, x1);
                let p10 = grid.index(y1, x0);
                let p11 = grid.index(y1, x1);
                for k in 0..c {
                    let top = scores_in[[p00, k]] * (1.0 - fx) + scores_in[[p01, k]] * fx;
                    let bot = scores_in[[p10, k]] * (1.0 - fx) + scores_in[[p11, k]] * fx;
                    scores[[k, y, x]] = (top * (1.0 - fy) + bot * fy) as f32;
                }
            }
        }

        let overridden = result.overridden();
        let background = overridden
            .iter()
            .position(|o| *o)
            .map(|p| result.labels()[p]);
        let mut override_frac = Array2::<f32>::zeros((height, width));
        if background.is_some() {
            for y in 0..height {
                let r = nearest_tap(y, sy, grid.n_rows);
                for x in 0..width {
                    let col = nearest_tap(x, sx, grid.n_cols);
                    if overridden[grid.index(r, col)] {
                        override_frac[[y, x]] = 1.0;
                    }
                }
            }
        }
        Ok(Self {
            scores,
            override_frac,
            background,
        })
    }

    pub fn height(&self) -> usize {
        self.scores.dim().1
    }

    pub fn width(&self) -> usize {
        self.scores.dim().2
    }

    pub fn n_classes(&self) -> usize {
        self.scores.dim().0
    }

    pub fn scores(&self) -> &Array3<f32> {
        &self.scores
    }

    pub fn override_frac(&self) -> &Array2<f32> {
        &self.override_frac
    }

    pub fn background(&self) -> Option<usize> {
        self.background
    }

    /// Keep the top-left `height x width` region.
    pub fn crop(&self, height: usize, width: usize) -> Self {
        Self {
            scores: self.scores.slice(s![.., ..height, ..width]).to_owned(),
            override_frac: self.override_frac.slice(s![..height, ..width]).to_owned(),
            background: self.background,
        }
    }

    fn pick(&self, vals: impl Fn(usize) -> f32, overridden: bool) -> u32 {
        if overridden {
            if let Some(bg) = self.background {
                return bg as u32;
            }
        }
        let mut best = 0;
        let mut best_v = vals(0);
        for k in 1..self.n_classes() {
            let v = vals(k);
            if v > best_v {
                best = k;
                best_v = v;
            }
        }
        best as u32
    }

    /// Per-pixel labels at the native resolution.
    pub fn labels(&self) -> LabelMap {
        Array2::from_shape_fn((self.height(), self.width()), |(y, x)| {
            self.pick(|k| self.scores[[k, y, x]], self.override_frac[[y, x]] > 0.5)
        })
    }

    /// Labels after resizing to `out_h x out_w` (bilinear scores, nearest
    /// override), computed pixel by pixel without materialising the
    /// resized score volume.
    pub fn labels_at(&self, out_h: usize, out_w: usize) -> LabelMap {
        let (h, w) = (self.height(), self.width());
        if (out_h, out_w) == (h, w) {
            return self.labels();
        }
        let sy = h as f64 / out_h as f64;
        let sx = w as f64 / out_w as f64;
        let tx: Vec<_> = (0..out_w).map(|x| bilinear_tap(x, sx, w)).collect();
        let nx: Vec<_> = (0..out_w).map(|x| nearest_tap(x, sx, w)).collect();
        let mut out = LabelMap::zeros((out_h, out_w));
        for oy in 0..out_h {
            let (y0, y1, fy) = bilinear_tap(oy, sy, h);
            let ny = nearest_tap(oy, sy, h);
            for ox in 0..out_w {
                let (x0, x1, fx) = tx[ox];
                let sc = &self.scores;
                let val = |k: usize| {
                    let top = sc[[k, y0, x0]] as f64 * (1.0 - fx) + sc[[k, y0, x1]] as f64 * fx;
                    let bot = sc[[k, y1, x0]] as f64 * (1.0 - fx) + sc[[k, y1, x1]] as f64 * fx;
                    (top * (1.0 - fy) + bot * fy) as f32
                };
                out[[oy, ox]] = self.pick(val, self.override_frac[[ny, nx[ox]]] > 0.5);
            }
        }
        out
    }
}

/// Sum of overlapping window predictions with per-pixel coverage counts.
#[derive(Debug, Clone)]
pub struct PixelAccumulator {
    sums: Array3<f32>,
    overrides: Array2<f32>,
    counts: Array2<f32>,
    background: Option<usize>,
}

impl PixelAccumulator {
    pub fn new(n_classes: usize, height: usize, width: usize) -> Self {
        Self {
            sums: Array3::zeros((n_classes, height, width)),
            overrides: Array2::zeros((height, width)),
            counts: Array2::zeros((height, width)),
            background: None,
        }
    }

    /// Add a window prediction whose top-left corner is at (`y0`, `x0`).
    pub fn add(&mut self, window: &PixelScores, y0: usize, x0: usize) -> Result<()> {
        let (h, w) = (window.height(), window.width());
        if window.n_classes() != self.sums.dim().0
            || y0 + h > self.counts.nrows()
            || x0 + w > self.counts.ncols()
        {
            return Err(invalid("window does not fit the accumulator"));
        }
        let mut sums = self.sums.slice_mut(s![.., y0..y0 + h, x0..x0 + w]);
        sums += &window.scores;
        let mut ov = self.overrides.slice_mut(s![y0..y0 + h, x0..x0 + w]);
        ov += &window.override_frac;
        let mut cnt = self.counts.slice_mut(s![y0..y0 + h, x0..x0 + w]);
        cnt += 1.0;
        if self.background.is_none() {
            self.background = window.background;
        }
        Ok(())
    }

    /// Coverage-normalized scores. Every pixel must have been covered.
    pub fn finish(self) -> Result<PixelScores> {
        if self.counts.iter().any(|&c| c == 0.0) {
            return Err(invalid("some pixels were not covered by any window"));
        }
        let mut scores = self.sums;
        for mut plane in scores.outer_iter_mut() {
            plane /= &self.counts;
        }
        Ok(PixelScores {
            scores,
            override_frac: self.overrides / &self.counts,
            background: self.background,
        })
    }
}

/// Upsample a patch-level result to `height x width` pixels, where the
/// canvas spans the whole grid.
pub fn upsample_to_pixels(result: &SegmentationResult, height: usize, width: usize) -> Result<LabelMap> {
    let g = result.grid();
    if height < g.n_rows || width < g.n_cols {
        return Err(invalid(format!(
            "target {height}x{width} smaller than grid {}x{}",
            g.n_rows, g.n_cols
        )));
    }
    Ok(PixelScores::from_result(result, height, width, (g.n_rows as f64, g.n_cols as f64))?.labels())
}
