//! Minimal f32 transformer layers for frozen inference.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Ix1, Ix2};
use rayon::prelude::*;

use crate::error::Result;
use crate::tensors::TensorStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    QuickGelu,
    Gelu,
}

impl Activation {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "quick_gelu" => Some(Self::QuickGelu),
            "gelu" => Some(Self::Gelu),
            _ => None,
        }
    }

    fn apply(self, x: f32) -> f32 {
        match self {
            Self::QuickGelu => x / (1.0 + (-1.702 * x).exp()),
            Self::Gelu => 0.5 * x * (1.0 + libm::erff(x / std::f32::consts::SQRT_2)),
        }
    }

    pub fn apply_inplace(self, x: &mut Array2<f32>) {
        x.mapv_inplace(|v| self.apply(v));
    }
}

/// Dense layer; the weight is kept as `in x out` so `forward` is one matmul.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Array2<f32>,
    bias: Option<Array1<f32>>,
}

impl Linear {
    pub fn new(weight_in_out: Array2<f32>, bias: Option<Array1<f32>>) -> Self {
        Self {
            weight: weight_in_out,
            bias,
        }
    }

    /// Load a `[out, in]` weight (PyTorch layout) plus optional bias.
    pub fn load(
        store: &TensorStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        with_bias: bool,
    ) -> Result<Self> {
        let w = store
            .f32(&format!("{prefix}.weight"), Some(&[d_out, d_in]))?
            .into_dimensionality::<Ix2>()
            .expect("rank checked");
        let bias = if with_bias {
            Some(
                store
                    .f32(&format!("{prefix}.bias"), Some(&[d_out]))?
                    .into_dimensionality::<Ix1>()
                    .expect("rank checked"),
            )
        } else {
            None
        };
        Ok(Self::new(w.t().to_owned(), bias))
    }

    pub fn d_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &ArrayView2<'_, f32>) -> Array2<f32> {
        let mut y = x.dot(&self.weight);
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Array1<f32>,
    beta: Array1<f32>,
    eps: f32,
}

impl LayerNorm {
    pub fn load(store: &TensorStore, prefix: &str, dim: usize, eps: f32) -> Result<Self> {
        let get = |n: &str| -> Result<Array1<f32>> {
            Ok(store
                .f32(&format!("{prefix}.{n}"), Some(&[dim]))?
                .into_dimensionality::<Ix1>()
                .expect("rank checked"))
        };
        Ok(Self {
            gamma: get("weight")?,
            beta: get("bias")?,
            eps,
        })
    }

    pub fn forward(&self, x: &ArrayView2<'_, f32>) -> Array2<f32> {
        let mut out = x.to_owned();
        let d = x.ncols() as f32;
        for mut row in out.axis_iter_mut(Axis(0)) {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
            let inv = 1.0 / (var + self.eps).sqrt();
            row.iter_mut()
                .zip(self.gamma.iter().zip(self.beta.iter()))
                .for_each(|(v, (g, b))| *v = (*v - mean) * inv * g + b);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl Attention {
    /// Multi-head scaled dot-product attention. `causal` masks future tokens.
    pub fn forward(&self, x: &ArrayView2<'_, f32>, causal: bool) -> Array2<f32> {
        let q = self.q.forward(x);
        let k = self.k.forward(x);
        let v = self.v.forward(x);
        let (t, d) = q.dim();
        let hd = d / self.n_heads;
        let scale = (hd as f32).powf(-0.5);

        let heads: Vec<Array2<f32>> = (0..self.n_heads)
            .into_par_iter()
            .map(|h| {
                let cols = s![.., h * hd..(h + 1) * hd];
                let mut scores = q.slice(cols).dot(&k.slice(cols).t());
                scores *= scale;
                for (i, mut row) in scores.axis_iter_mut(Axis(0)).enumerate() {
                    if causal {
                        row.slice_mut(s![i + 1..]).fill(f32::NEG_INFINITY);
                    }
                    softmax_inplace(row.as_slice_mut().expect("contiguous row"));
                }
                scores.dot(&v.slice(cols))
            })
            .collect();

        let mut merged = Array2::<f32>::zeros((t, d));
        for (h, out) in heads.into_iter().enumerate() {
            merged.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&out);
        }
        self.out.forward(&merged.view())
    }
}

fn softmax_inplace(row: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn forward(&self, x: &ArrayView2<'_, f32>) -> Array2<f32> {
        let mut h = self.fc1.forward(x);
        self.act.apply_inplace(&mut h);
        self.fc2.forward(&h.view())
    }
}

/// Pre-norm transformer block shared by the CLIP and DINO encoders.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn forward(&self, x: &Array2<f32>, causal: bool) -> Array2<f32> {
        let mut x = x + &self.attn.forward(&self.ln1.forward(&x.view()).view(), causal);
        let m = self.mlp.forward(&self.ln2.forward(&x.view()).view());
        x += &m;
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = [1.0f32, 2.0, 3.0, f32::NEG_INFINITY];
        softmax_inplace(&mut r);
        assert!((r.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert_eq!(r[3], 0.0);
    }

    #[test]
    fn activations_at_known_points() {
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
        assert!((Activation::Gelu.apply(1.0) - 0.841_344_7).abs() < 1e-6);
        assert!((Activation::QuickGelu.apply(1.0) - 1.0 / (1.0 + (-1.702f32).exp())).abs() < 1e-7);
    }

    #[test]
    fn linear_uses_in_out_layout() {
        let l = Linear::new(array![[1.0, 0.0, 2.0], [0.0, 1.0, 0.0]], Some(array![0.5, 0.0, 0.0]));
        let y = l.forward(&array![[1.0f32, 2.0]].view());
        assert_eq!(y, array![[1.5, 2.0, 2.0]]);
    }
}
