//! The two light convolutional heads applied to intermediate CLIP features.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::denoiser::affinity::{cosine_affinity, AffinityMatrix, AffinitySource};
use crate::error::{invalid, Result};
use crate::features::PatchFeatureMap;
use crate::grid::PatchGrid;

/// 3x3 convolution `d_in -> d_g` whose output correlations predict the
/// teacher affinity.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityHead {
    /// Kernel flattened to `(ky, kx, c_in) x d_g`, i.e. `[3, 3, d_in, d_g]` row-major.
    weights: Array2<f64>,
    bias: Array1<f64>,
    input_tap: usize,
}

impl AffinityHead {
    pub fn new(kernel: Array4<f64>, bias: Array1<f64>, input_tap: usize) -> Result<Self> {
        let (kh, kw, d_in, d_g) = kernel.dim();
        if (kh, kw) != (3, 3) {
            return Err(invalid(format!("affinity head kernel must be 3x3, got {kh}x{kw}")));
        }
        if bias.len() != d_g {
            return Err(invalid(format!("bias has {} entries, kernel outputs {d_g}", bias.len())));
        }
        if d_g == 0 || d_g >= d_in {
            return Err(invalid(format!(
                "projection width {d_g} must be positive and smaller than input width {d_in}"
            )));
        }
        let weights = kernel
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((9 * d_in, d_g))
            .expect("contiguous");
        Ok(Self {
            weights,
            bias,
            input_tap,
        })
    }

    /// Uniform init in `±1/sqrt(fan_in)` for kernel and bias.
    pub fn init<R: Rng>(d_in: usize, d_g: usize, input_tap: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / ((9 * d_in) as f64).sqrt();
        let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let kernel = Array4::from_shape_simple_fn((3, 3, d_in, d_g), || u.sample(rng));
        let bias = Array1::from_shape_simple_fn(d_g, || u.sample(rng));
        Self::new(kernel, bias, input_tap)
    }

    pub fn d_in(&self) -> usize {
        self.weights.nrows() / 9
    }

    pub fn d_g(&self) -> usize {
        self.weights.ncols()
    }

    pub fn input_tap(&self) -> usize {
        self.input_tap
    }

    pub fn kernel(&self) -> Array4<f64> {
        self.weights
            .clone()
            .into_shape_with_order((3, 3, self.d_in(), self.d_g()))
            .expect("contiguous")
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub(crate) fn weights_mut(&mut self) -> (&mut Array2<f64>, &mut Array1<f64>) {
        (&mut self.weights, &mut self.bias)
    }

    pub(crate) fn check_input(&self, x: &PatchFeatureMap) -> Result<()> {
        if x.dim() != self.d_in() {
            return Err(invalid(format!(
                "affinity head expects {}-dim features, got {}",
                self.d_in(),
                x.dim()
            )));
        }
        Ok(())
    }

    /// Projected features `N x d_g` and the unfolded input used to compute them.
    pub(crate) fn project_with_columns(&self, x: &PatchFeatureMap) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_input(x)?;
        let cols = im2col3x3(x.values(), x.grid());
        let mut g = cols.dot(&self.weights);
        g += &self.bias;
        Ok((g, cols))
    }

    /// Projected features `N x d_g`.
    pub fn project(&self, x: &PatchFeatureMap) -> Result<Array2<f64>> {
        Ok(self.project_with_columns(x)?.0)
    }
}

/// Unfold a row-major patch grid into 3x3 neighbourhoods with zero padding.
/// Row `p` holds `(ky, kx, c)` blocks for offsets `ky, kx in {-1, 0, 1}`.
pub fn im2col3x3(values: &Array2<f64>, grid: PatchGrid) -> Array2<f64> {
    let d = values.ncols();
    let mut cols = Array2::<f64>::zeros((grid.len(), 9 * d));
    for r in 0..grid.n_rows {
        for c in 0..grid.n_cols {
            let p = grid.index(r, c);
            for ky in 0..3 {
                for kx in 0..3 {
                    let (rr, cc) = (r as isize + ky as isize - 1, c as isize + kx as isize - 1);
                    if rr < 0 || cc < 0 || rr >= grid.n_rows as isize || cc >= grid.n_cols as isize {
                        continue;
                    }
                    let q = grid.index(rr as usize, cc as usize);
                    let off = (ky * 3 + kx) * d;
                    cols.row_mut(p)
                        .slice_mut(ndarray::s![off..off + d])
                        .assign(&values.row(q));
                }
            }
        }
    }
    cols
}

/// Learned affinity: cosine similarities of the head's projected features.
pub fn predict_affinity(intermediate: &PatchFeatureMap, head: &AffinityHead) -> Result<AffinityMatrix> {
    let g = head.project(intermediate)?;
    cosine_affinity(intermediate.grid(), &g, AffinitySource::LearnedClip)
}

/// 1x1 convolution `d_in -> 1` producing per-patch objectness logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectnessHead {
    weights: Array1<f64>,
    bias: f64,
}

impl ObjectnessHead {
    pub fn new(kernel: Array1<f64>, bias: f64) -> Result<Self> {
        if kernel.is_empty() {
            return Err(invalid("objectness kernel is empty"));
        }
        Ok(Self {
            weights: kernel,
            bias,
        })
    }

    pub fn init<R: Rng>(d_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let weights = Array1::from_shape_simple_fn(d_in, || u.sample(rng));
        let bias = u.sample(rng);
        Self { weights, bias }
    }

    pub fn d_in(&self) -> usize {
        self.weights.len()
    }

    pub fn kernel(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub(crate) fn weights_mut(&mut self) -> (&mut Array1<f64>, &mut f64) {
        (&mut self.weights, &mut self.bias)
    }

    pub fn logits(&self, x: &PatchFeatureMap) -> Result<Array1<f64>> {
        if x.dim() != self.d_in() {
            return Err(invalid(format!(
                "objectness head expects {}-dim features, got {}",
                self.d_in(),
                x.dim()
            )));
        }
        Ok(x.values().dot(&self.weights) + self.bias)
    }
}

/// Per-patch foreground decision (`true` = foreground), with logits when
/// produced by a head.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectnessMap {
    grid: PatchGrid,
    logits: Option<Array1<f64>>,
    binary: Vec<bool>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ObjectnessMap {
    /// Foreground iff `sigmoid(logit) > 0.5`.
    pub fn from_logits(grid: PatchGrid, logits: Array1<f64>) -> Result<Self> {
        if logits.len() != grid.len() {
            return Err(invalid(format!(
                "{} logits for a grid of {} patches",
                logits.len(),
                grid.len()
            )));
        }
        let binary = logits.iter().map(|&l| sigmoid(l) > 0.5).collect();
        Ok(Self {
            grid,
            logits: Some(logits),
            binary,
        })
    }

    pub fn from_binary(grid: PatchGrid, binary: Vec<bool>) -> Result<Self> {
        if binary.len() != grid.len() {
            return Err(invalid(format!(
                "{} mask entries for a grid of {} patches",
                binary.len(),
                grid.len()
            )));
        }
        Ok(Self {
            grid,
            logits: None,
            binary,
        })
    }

    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn logits(&self) -> Option<&Array1<f64>> {
        self.logits.as_ref()
    }

    pub fn binary(&self) -> &[bool] {
        &self.binary
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.binary.iter().filter(|b| **b).count() as f64 / self.binary.len() as f64
    }
}

pub fn predict_objectness(intermediate: &PatchFeatureMap, head: &ObjectnessHead) -> Result<ObjectnessMap> {
    ObjectnessMap::from_logits(intermediate.grid(), head.logits(intermediate)?)
}

/// Both heads, as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub affinity: AffinityHead,
    pub objectness: ObjectnessHead,
}

impl Heads {
    pub fn init<R: Rng>(d_in: usize, d_g: usize, input_tap: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            affinity: AffinityHead::init(d_in, d_g, input_tap, rng)?,
            objectness: ObjectnessHead::init(d_in, rng),
        })
    }

    pub fn input_tap(&self) -> usize {
        self.affinity.input_tap()
    }
}
