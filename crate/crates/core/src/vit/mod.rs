//! Frozen ViT encoders loaded from flat tensor containers.
//!
//! Two key layouts are understood: the Hugging Face `CLIPModel` layout
//! (`vision_model.*`, `text_model.*`, `visual_projection`, `text_projection`)
//! and the Hugging Face `ViTModel` layout used by DINO checkpoints
//! (`embeddings.*`, `encoder.layer.*`, optionally prefixed with `vit.`).
//! Hyper-parameters that cannot be read off tensor shapes come from the
//! container's string metadata (`family`, `vision_heads`, `text_heads`,
//! `hidden_act`, `layer_norm_eps`) with per-family defaults.

pub mod clip;
pub mod dino;
pub mod nn;
pub mod posembed;

use ndarray::{Array2, Ix2, Ix4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensors::TensorStore;
use nn::{Activation, Attention, Block, LayerNorm, Linear, Mlp};

pub use clip::{ClipModel, ClipText, ClipVision};
pub use dino::DinoModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Clip,
    Dino,
}

impl Family {
    /// Family from the `family` metadata entry, falling back to key sniffing.
    pub fn detect(store: &TensorStore) -> Option<Self> {
        match store.metadata().get("family").map(String::as_str) {
            Some("clip") => return Some(Self::Clip),
            Some("dino") => return Some(Self::Dino),
            _ => {}
        }
        if store.contains("vision_model.embeddings.class_embedding") {
            Some(Self::Clip)
        } else if store.contains("embeddings.cls_token") || store.contains("vit.embeddings.cls_token")
        {
            Some(Self::Dino)
        } else {
            None
        }
    }
}

pub(crate) fn load_error(store: &TensorStore, reason: impl Into<String>) -> Error {
    Error::Load {
        path: store.origin().to_path_buf(),
        reason: reason.into(),
    }
}

pub(crate) fn meta_usize(store: &TensorStore, key: &str) -> Result<Option<usize>> {
    store
        .metadata()
        .get(key)
        .map(|v| {
            v.parse()
                .map_err(|_| load_error(store, format!("metadata `{key}` is not an integer: {v}")))
        })
        .transpose()
}

pub(crate) fn meta_f32(store: &TensorStore, key: &str, default: f32) -> Result<f32> {
    match store.metadata().get(key) {
        Some(v) => v
            .parse()
            .map_err(|_| load_error(store, format!("metadata `{key}` is not a number: {v}"))),
        None => Ok(default),
    }
}

pub(crate) fn meta_act(store: &TensorStore, default: Activation) -> Result<Activation> {
    match store.metadata().get("hidden_act") {
        Some(v) => Activation::parse(v)
            .ok_or_else(|| load_error(store, format!("unknown activation `{v}`"))),
        None => Ok(default),
    }
}

pub(crate) fn count_indexed(store: &TensorStore, prefix: &str, suffix: &str) -> usize {
    (0..)
        .take_while(|i| store.contains(&format!("{prefix}{i}{suffix}")))
        .count()
}

pub(crate) fn matrix(store: &TensorStore, name: &str, shape: [usize; 2]) -> Result<Array2<f32>> {
    Ok(store
        .f32(name, Some(&shape))?
        .into_dimensionality::<Ix2>()
        .expect("rank checked"))
}

/// Patch-embedding kernel `[D, 3, P, P]` flattened to `[3*P*P, D]`.
pub(crate) fn patch_kernel(store: &TensorStore, name: &str) -> Result<(Array2<f32>, usize, usize)> {
    let shape = store
        .shape(name)
        .ok_or_else(|| load_error(store, format!("missing tensor `{name}`")))?
        .to_vec();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != shape[3] {
        return Err(load_error(
            store,
            format!("`{name}` must be [D, 3, P, P], got {shape:?}"),
        ));
    }
    let (d, p) = (shape[0], shape[2]);
    let w = store
        .f32(name, None)?
        .into_dimensionality::<Ix4>()
        .expect("rank checked")
        .into_shape_with_order((d, 3 * p * p))
        .expect("contiguous");
    Ok((w.t().to_owned(), d, p))
}

/// Tensor names for one transformer block.
pub(crate) struct BlockKeys {
    pub ln1: String,
    pub q: String,
    pub k: String,
    pub v: String,
    pub out: String,
    pub ln2: String,
    pub fc1: String,
    pub fc2: String,
}

pub(crate) fn load_block(
    store: &TensorStore,
    keys: &BlockKeys,
    dim: usize,
    n_heads: usize,
    act: Activation,
    eps: f32,
) -> Result<Block> {
    let mlp_dim = store
        .shape(&format!("{}.weight", keys.fc1))
        .map(|s| s[0])
        .ok_or_else(|| load_error(store, format!("missing `{}.weight`", keys.fc1)))?;
    if n_heads == 0 || dim % n_heads != 0 {
        return Err(load_error(
            store,
            format!("width {dim} is not divisible by {n_heads} heads"),
        ));
    }
    Ok(Block {
        ln1: LayerNorm::load(store, &keys.ln1, dim, eps)?,
        attn: Attention {
            q: Linear::load(store, &keys.q, dim, dim, true)?,
            k: Linear::load(store, &keys.k, dim, dim, true)?,
            v: Linear::load(store, &keys.v, dim, dim, true)?,
            out: Linear::load(store, &keys.out, dim, dim, true)?,
            n_heads,
        },
        ln2: LayerNorm::load(store, &keys.ln2, dim, eps)?,
        mlp: Mlp {
            fc1: Linear::load(store, &keys.fc1, dim, mlp_dim, true)?,
            fc2: Linear::load(store, &keys.fc2, mlp_dim, dim, true)?,
            act,
        },
    })
}
