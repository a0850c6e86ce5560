use image::RgbImage;
use ndarray::{concatenate, s, Array1, Array2, Axis, Ix1};

use super::nn::{Activation, Block, LayerNorm, Linear};
use super::posembed::interpolate_positions;
use super::{
    count_indexed, load_block, load_error, matrix, meta_act, meta_f32, meta_usize, patch_kernel,
    BlockKeys,
};
use crate::error::{invalid, Result};
use crate::grid::PatchGrid;
use crate::preprocess::{normalize_and_pad, patchify, PixelStats};
use crate::tensors::TensorStore;

fn clip_block_keys(prefix: &str, i: usize) -> BlockKeys {
    let b = format!("{prefix}.encoder.layers.{i}");
    BlockKeys {
        ln1: format!("{b}.layer_norm1"),
        q: format!("{b}.self_attn.q_proj"),
        k: format!("{b}.self_attn.k_proj"),
        v: format!("{b}.self_attn.v_proj"),
        out: format!("{b}.self_attn.out_proj"),
        ln2: format!("{b}.layer_norm2"),
        fc1: format!("{b}.mlp.fc1"),
        fc2: format!("{b}.mlp.fc2"),
    }
}

/// Outputs of one vision forward pass, class token already removed.
#[derive(Debug, Clone)]
pub struct VisionOutput {
    pub grid: PatchGrid,
    /// Residual stream after the tapped block, `N x width`.
    pub intermediate: Option<Array2<f32>>,
    /// Value-path output of the last block, projected to the joint space, `N x proj`.
    pub last: Option<Array2<f32>>,
}

#[derive(Debug, Clone)]
pub struct ClipVision {
    patch_size: usize,
    width: usize,
    kernel: Array2<f32>,
    class_embedding: Array2<f32>,
    positions: Array2<f32>,
    pre_ln: LayerNorm,
    blocks: Vec<Block>,
    post_ln: LayerNorm,
    projection: Linear,
    stats: PixelStats,
}

impl ClipVision {
    pub fn load(store: &TensorStore) -> Result<Self> {
        let (kernel, width, patch_size) =
            patch_kernel(store, "vision_model.embeddings.patch_embedding.weight")?;
        let class_embedding = store
            .f32("vision_model.embeddings.class_embedding", Some(&[width]))?
            .into_dimensionality::<Ix1>()
            .expect("rank checked")
            .insert_axis(Axis(0));
        let n_pos = store
            .shape("vision_model.embeddings.position_embedding.weight")
            .map(|s| s[0])
            .ok_or_else(|| load_error(store, "missing vision position embedding"))?;
        let positions = matrix(
            store,
            "vision_model.embeddings.position_embedding.weight",
            [n_pos, width],
        )?;
        let eps = meta_f32(store, "layer_norm_eps", 1e-5)?;
        let act = meta_act(store, Activation::QuickGelu)?;
        let n_heads = meta_usize(store, "vision_heads")?.unwrap_or((width / 64).max(1));
        let n_blocks = count_indexed(store, "vision_model.encoder.layers.", ".layer_norm1.weight");
        if n_blocks == 0 {
            return Err(load_error(store, "no vision encoder blocks found"));
        }
        let blocks = (0..n_blocks)
            .map(|i| load_block(store, &clip_block_keys("vision_model", i), width, n_heads, act, eps))
            .collect::<Result<Vec<_>>>()?;
        let proj_dim = store
            .shape("visual_projection.weight")
            .map(|s| s[0])
            .ok_or_else(|| load_error(store, "missing visual_projection.weight"))?;
        Ok(Self {
            patch_size,
            width,
            kernel,
            class_embedding,
            positions,
            pre_ln: LayerNorm::load(store, "vision_model.pre_layrnorm", width, eps)?,
            blocks,
            post_ln: LayerNorm::load(store, "vision_model.post_layernorm", width, eps)?,
            projection: Linear::load(store, "visual_projection", width, proj_dim, false)?,
            stats: PixelStats::CLIP,
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

    pub fn proj_dim(&self) -> usize {
        self.projection.d_out()
    }

    fn embed(&self, img: &RgbImage) -> Result<(Array2<f32>, PatchGrid)> {
        let (t, grid) = normalize_and_pad(img, &self.stats, self.patch_size)?;
        let patches = patchify(&t, &grid)?.dot(&self.kernel);
        let (cls_pos, patch_pos) = interpolate_positions(&self.positions, grid.n_rows, grid.n_cols)?;
        let tokens = concatenate![
            Axis(0),
            &self.class_embedding + &cls_pos,
            patches + &patch_pos
        ];
        Ok((self.pre_ln.forward(&tokens.view()), grid))
    }

    /// Last block with query/key discarded: value projection and output
    /// projection applied per token, then residual, MLP, final norm and
    /// the joint-space projection.
    fn value_path(&self, block: &Block, x: &Array2<f32>) -> Array2<f32> {
        let y = block.ln1.forward(&x.view());
        let v = block.attn.v.forward(&y.view());
        let mut z = x + &block.attn.out.forward(&v.view());
        let m = block.mlp.forward(&block.ln2.forward(&z.view()).view());
        z += &m;
        let z = self.post_ln.forward(&z.view());
        self.projection.forward(&z.slice(s![1.., ..]))
    }

    /// Run the encoder on an image whose size is already final (no resize).
    ///
    /// `tap` is 1-based: `tap = l` captures the output of the l-th block.
    /// Blocks past what the requested outputs need are skipped.
    pub fn forward(&self, img: &RgbImage, tap: Option<usize>, want_last: bool) -> Result<VisionOutput> {
        let n = self.blocks.len();
        if let Some(t) = tap {
            if t == 0 || t > n {
                return Err(invalid(format!("tap layer {t} outside 1..={n}")));
            }
        }
        let (mut x, grid) = self.embed(img)?;
        let tap_at = tap.unwrap_or(0);
        let mut intermediate = None;
        let mut last = None;
        for (i, block) in self.blocks.iter().enumerate() {
            let layer = i + 1;
            if layer == n && want_last {
                last = Some(self.value_path(block, &x));
            }
            if layer <= tap_at || (want_last && layer < n) {
                x = block.forward(&x, false);
                if layer == tap_at {
                    intermediate = Some(x.slice(s![1.., ..]).to_owned());
                }
            } else {
                break;
            }
        }
        Ok(VisionOutput {
            grid,
            intermediate,
            last,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ClipText {
    token_embedding: Array2<f32>,
    positions: Array2<f32>,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    projection: Linear,
}

impl ClipText {
    pub fn load(store: &TensorStore) -> Result<Option<Self>> {
        let Some(shape) = store.shape("text_model.embeddings.token_embedding.weight") else {
            return Ok(None);
        };
        let (vocab, width) = (shape[0], shape[1]);
        let token_embedding = matrix(
            store,
            "text_model.embeddings.token_embedding.weight",
            [vocab, width],
        )?;
        let ctx = store
            .shape("text_model.embeddings.position_embedding.weight")
            .map(|s| s[0])
            .ok_or_else(|| load_error(store, "missing text position embedding"))?;
        let positions = matrix(
            store,
            "text_model.embeddings.position_embedding.weight",
            [ctx, width],
        )?;
        let eps = meta_f32(store, "layer_norm_eps", 1e-5)?;
        let act = meta_act(store, Activation::QuickGelu)?;
        let n_heads = meta_usize(store, "text_heads")?.unwrap_or((width / 64).max(1));
        let n_blocks = count_indexed(store, "text_model.encoder.layers.", ".layer_norm1.weight");
        let blocks = (0..n_blocks)
            .map(|i| load_block(store, &clip_block_keys("text_model", i), width, n_heads, act, eps))
            .collect::<Result<Vec<_>>>()?;
        let proj_dim = store
            .shape("text_projection.weight")
            .map(|s| s[0])
            .ok_or_else(|| load_error(store, "missing text_projection.weight"))?;
        Ok(Some(Self {
            token_embedding,
            positions,
            blocks,
            final_ln: LayerNorm::load(store, "text_model.final_layer_norm", width, eps)?,
            projection: Linear::load(store, "text_projection", width, proj_dim, false)?,
        }))
    }

    pub fn context_length(&self) -> usize {
        self.positions.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.nrows()
    }

    pub fn proj_dim(&self) -> usize {
        self.projection.d_out()
    }

    /// Embed one token sequence; the last token is the end-of-text token
    /// whose final state is pooled. Causal masking makes trailing padding
    /// irrelevant, so sequences are run at their true length.
    pub fn encode_ids(&self, ids: &[u32]) -> Result<Array1<f32>> {
        if ids.is_empty() || ids.len() > self.context_length() {
            return Err(invalid(format!(
                "token sequence length {} outside 1..={}",
                ids.len(),
                self.context_length()
            )));
        }
        let mut x = Array2::<f32>::zeros((ids.len(), self.token_embedding.ncols()));
        for (row, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= self.vocab_size() {
                return Err(invalid(format!("token id {id} outside vocabulary")));
            }
            x.row_mut(row)
                .assign(&(&self.token_embedding.row(id) + &self.positions.row(row)));
        }
        for block in &self.blocks {
            x = block.forward(&x, true);
        }
        let eot = x.slice(s![ids.len() - 1..ids.len(), ..]).to_owned();
        let pooled = self.final_ln.forward(&eot.view());
        Ok(self.projection.forward(&pooled.view()).row(0).to_owned())
    }
}

/// Vision tower plus optional text tower from one container.
#[derive(Debug, Clone)]
pub struct ClipModel {
    pub vision: ClipVision,
    pub text: Option<ClipText>,
}

impl ClipModel {
    pub fn load(store: &TensorStore) -> Result<Self> {
        Ok(Self {
            vision: ClipVision::load(store)?,
            text: ClipText::load(store)?,
        })
    }
}
