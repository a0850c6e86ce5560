use image::RgbImage;
use ndarray::{concatenate, s, Array1, Array2, Axis, Ix1, Ix3};
use serde::{Deserialize, Serialize};

use super::nn::{Activation, Block, Linear};
use super::posembed::interpolate_positions;
use super::{count_indexed, load_block, load_error, meta_act, meta_f32, meta_usize, patch_kernel, BlockKeys};
use crate::error::Result;
use crate::grid::PatchGrid;
use crate::preprocess::{normalize_and_pad, patchify, PixelStats};
use crate::tensors::TensorStore;

/// Which projection of the last attention layer to expose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    #[default]
    Value,
    Key,
    Query,
}

impl std::str::FromStr for EmbeddingKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "value" => Ok(Self::Value),
            "key" => Ok(Self::Key),
            "query" => Ok(Self::Query),
            other => Err(format!("unknown embedding kind `{other}` (value|key|query)")),
        }
    }
}

/// Self-supervised ViT used as a teacher.
#[derive(Debug, Clone)]
pub struct DinoModel {
    patch_size: usize,
    width: usize,
    kernel: Array2<f32>,
    kernel_bias: Array1<f32>,
    cls_token: Array2<f32>,
    positions: Array2<f32>,
    blocks: Vec<Block>,
    stats: PixelStats,
}

impl DinoModel {
    pub fn load(store: &TensorStore) -> Result<Self> {
        let p = if store.contains("vit.embeddings.cls_token") {
            "vit."
        } else {
            ""
        };
        let (kernel, width, patch_size) =
            patch_kernel(store, &format!("{p}embeddings.patch_embeddings.projection.weight"))?;
        let kernel_bias = store
            .f32(&format!("{p}embeddings.patch_embeddings.projection.bias"), Some(&[width]))?
            .into_dimensionality::<Ix1>()
            .expect("rank checked");
        let cls_token = store
            .f32(&format!("{p}embeddings.cls_token"), Some(&[1, 1, width]))?
            .into_shape_with_order((1, width))
            .expect("contiguous");
        let pos_name = format!("{p}embeddings.position_embeddings");
        let n_pos = store
            .shape(&pos_name)
            .map(|s| s[1])
            .ok_or_else(|| load_error(store, "missing DINO position embeddings"))?;
        let positions = store
            .f32(&pos_name, Some(&[1, n_pos, width]))?
            .into_dimensionality::<Ix3>()
            .expect("rank checked")
            .index_axis_move(Axis(0), 0);
        let eps = meta_f32(store, "layer_norm_eps", 1e-6)?;
        let act = meta_act(store, Activation::Gelu)?;
        let n_heads = meta_usize(store, "vision_heads")?.unwrap_or((width / 64).max(1));
        let n_blocks = count_indexed(
            store,
            &format!("{p}encoder.layer."),
            ".layernorm_before.weight",
        );
        if n_blocks == 0 {
            return Err(load_error(store, "no DINO encoder blocks found"));
        }
        let blocks = (0..n_blocks)
            .map(|i| {
                let b = format!("{p}encoder.layer.{i}");
                let keys = BlockKeys {
                    ln1: format!("{b}.layernorm_before"),
                    q: format!("{b}.attention.attention.query"),
                    k: format!("{b}.attention.attention.key"),
                    v: format!("{b}.attention.attention.value"),
                    out: format!("{b}.attention.output.dense"),
                    ln2: format!("{b}.layernorm_after"),
                    fc1: format!("{b}.intermediate.dense"),
                    fc2: format!("{b}.output.dense"),
                };
                load_block(store, &keys, width, n_heads, act, eps)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch_size,
            width,
            kernel,
            kernel_bias,
            cls_token,
            positions,
            blocks,
            stats: PixelStats::IMAGENET,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Per-head projections of the last attention layer, concatenated over
    /// heads and taken before the attention output projection. The class
    /// token is dropped.
    pub fn last_layer_embeddings(
        &self,
        img: &RgbImage,
        kind: EmbeddingKind,
    ) -> Result<(Array2<f32>, PatchGrid)> {
        let (t, grid) = normalize_and_pad(img, &self.stats, self.patch_size)?;
        let patches = patchify(&t, &grid)?.dot(&self.kernel) + &self.kernel_bias;
        let (cls_pos, patch_pos) = interpolate_positions(&self.positions, grid.n_rows, grid.n_cols)?;
        let mut x = concatenate![Axis(0), &self.cls_token + &cls_pos, patches + &patch_pos];
        let (last, rest) = self.blocks.split_last().expect("at least one block");
        for block in rest {
            x = block.forward(&x, false);
        }
        let y = last.ln1.forward(&x.view());
        let proj: &Linear = match kind {
            EmbeddingKind::Value => &last.attn.v,
            EmbeddingKind::Key => &last.attn.k,
            EmbeddingKind::Query => &last.attn.q,
        };
        let e = proj.forward(&y.view());
        Ok((e.slice(s![1.., ..]).to_owned(), grid))
    }
}
