use ndarray::{Array2, Array3, ArrayView3};

use crate::error::{invalid, Result};

const CUBIC_A: f32 = -0.75;

fn cubic_weights(t: f32) -> [f32; 4] {
    let a = CUBIC_A;
    let near = |x: f32| ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    let far = |x: f32| ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

/// Bicubic resampling of an `h x w x c` grid with half-pixel alignment and
/// clamped borders.
pub fn bicubic_resize(src: &ArrayView3<'_, f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, c) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.to_owned();
    }
    let taps = |out: usize, inp: usize| -> Vec<([usize; 4], [f32; 4])> {
        let scale = inp as f32 / out as f32;
        (0..out)
            .map(|o| {
                let x = (o as f32 + 0.5) * scale - 0.5;
                let x0 = x.floor();
                let wts = cubic_weights(x - x0);
                let idx = [-1i64, 0, 1, 2]
                    .map(|k| (x0 as i64 + k).clamp(0, inp as i64 - 1) as usize);
                (idx, wts)
            })
            .collect()
    };
    let ty = taps(out_h, h);
    let tx = taps(out_w, w);

    let mut out = Array3::<f32>::zeros((out_h, out_w, c));
    for (oy, (iy, wy)) in ty.iter().enumerate() {
        for (ox, (ix, wx)) in tx.iter().enumerate() {
            for (a, &yy) in iy.iter().enumerate() {
                for (b, &xx) in ix.iter().enumerate() {
                    let wgt = wy[a] * wx[b];
                    for ch in 0..c {
                        out[[oy, ox, ch]] += wgt * src[[yy, xx, ch]];
                    }
                }
            }
        }
    }
    out
}

/// Resample a square positional table (class row first) onto an
/// `n_rows x n_cols` patch grid. Returns the class row and the patch rows.
pub fn interpolate_positions(
    table: &Array2<f32>,
    n_rows: usize,
    n_cols: usize,
) -> Result<(Array2<f32>, Array2<f32>)> {
    let (n_pos, d) = table.dim();
    let n_patches = n_pos.checked_sub(1).ok_or_else(|| invalid("empty positional table"))?;
    let side = (n_patches as f64).sqrt().round() as usize;
    if side * side != n_patches {
        return Err(invalid(format!(
            "positional table with {n_patches} patch rows is not a square grid"
        )));
    }
    let cls = table.slice(ndarray::s![0..1, ..]).to_owned();
    let grid = table
        .slice(ndarray::s![1.., ..])
        .to_owned()
        .into_shape_with_order((side, side, d))
        .expect("square grid");
    let resized = bicubic_resize(&grid.view(), n_rows, n_cols);
    let patches = resized
        .into_shape_with_order((n_rows * n_cols, d))
        .expect("contiguous");
    Ok((cls, patches))
}
