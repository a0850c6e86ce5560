//! Small deterministic fixtures: randomly initialised backbones in the
//! supported container layouts, a word-level tokenizer, and toy scenes with
//! foreground masks. Used by the test suites and for smoke runs without
//! downloaded weights.

use std::collections::BTreeSet;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensors::TensorWriter;
use crate::templates::IMAGENET_TEMPLATES;

/// Shape of a randomly initialised ViT.
#[derive(Debug, Clone, Copy)]
pub struct TinyVit {
    pub patch_size: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp: usize,
    /// Side of the square positional grid the weights were "trained" at.
    pub pos_side: usize,
}

impl Default for TinyVit {
    fn default() -> Self {
        Self {
            patch_size: 8,
            width: 32,
            heads: 2,
            blocks: 4,
            mlp: 64,
            pos_side: 4,
        }
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, n: usize, std: f32) -> Vec<f32> {
        let d = Normal::new(0.0, std).unwrap();
        (0..n).map(|_| d.sample(&mut self.rng)).collect()
    }
}

fn put_linear(w: &mut TensorWriter, init: &mut Init, name: &str, d_in: usize, d_out: usize, bias: bool) {
    let std = (1.0 / d_in as f32).sqrt();
    w.insert_f32(format!("{name}.weight"), &[d_out, d_in], &init.normal(d_in * d_out, std));
    if bias {
        w.insert_f32(format!("{name}.bias"), &[d_out], &init.normal(d_out, 0.02));
    }
}

fn put_norm(w: &mut TensorWriter, name: &str, d: usize) {
    w.insert_f32(format!("{name}.weight"), &[d], &vec![1.0; d]);
    w.insert_f32(format!("{name}.bias"), &[d], &vec![0.0; d]);
}

/// Random CLIP-layout container with vision and text towers.
pub fn tiny_clip(vit: TinyVit, proj_dim: usize, vocab: usize, context: usize, seed: u64) -> TensorWriter {
    let mut w = TensorWriter::new();
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let d = vit.width;
    let p = vit.patch_size;
    let fan_in = 3 * p * p;
    w.insert_f32(
        "vision_model.embeddings.patch_embedding.weight",
        &[d, 3, p, p],
        &init.normal(d * fan_in, (1.0 / fan_in as f32).sqrt()),
    );
    w.insert_f32("vision_model.embeddings.class_embedding", &[d], &init.normal(d, 0.5));
    let n_pos = vit.pos_side * vit.pos_side + 1;
    w.insert_f32(
        "vision_model.embeddings.position_embedding.weight",
        &[n_pos, d],
        &init.normal(n_pos * d, 0.1),
    );
    put_norm(&mut w, "vision_model.pre_layrnorm", d);
    put_norm(&mut w, "vision_model.post_layernorm", d);
    for i in 0..vit.blocks {
        put_clip_block(&mut w, &mut init, &format!("vision_model.encoder.layers.{i}"), d, vit.mlp);
    }
    put_linear(&mut w, &mut init, "visual_projection", d, proj_dim, false);

    w.insert_f32(
        "text_model.embeddings.token_embedding.weight",
        &[vocab, d],
        &init.normal(vocab * d, 0.5),
    );
    w.insert_f32(
        "text_model.embeddings.position_embedding.weight",
        &[context, d],
        &init.normal(context * d, 0.1),
    );
    for i in 0..2 {
        put_clip_block(&mut w, &mut init, &format!("text_model.encoder.layers.{i}"), d, vit.mlp);
    }
    put_norm(&mut w, "text_model.final_layer_norm", d);
    put_linear(&mut w, &mut init, "text_projection", d, proj_dim, false);
    w.set_metadata("family", "clip");
    w.set_metadata("vision_heads", vit.heads.to_string());
    w.set_metadata("text_heads", vit.heads.to_string());
    w
}

fn put_clip_block(w: &mut TensorWriter, init: &mut Init, b: &str, d: usize, mlp: usize) {
    put_norm(w, &format!("{b}.layer_norm1"), d);
    for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
        put_linear(w, init, &format!("{b}.self_attn.{proj}"), d, d, true);
    }
    put_norm(w, &format!("{b}.layer_norm2"), d);
    put_linear(w, init, &format!("{b}.mlp.fc1"), d, mlp, true);
    put_linear(w, init, &format!("{b}.mlp.fc2"), mlp, d, true);
}

/// Random DINO-layout (`ViTModel`) container.
pub fn tiny_dino(vit: TinyVit, seed: u64) -> TensorWriter {
    let mut w = TensorWriter::new();
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let d = vit.width;
    let p = vit.patch_size;
    let fan_in = 3 * p * p;
    w.insert_f32(
        "embeddings.patch_embeddings.projection.weight",
        &[d, 3, p, p],
        &init.normal(d * fan_in, (1.0 / fan_in as f32).sqrt()),
    );
    w.insert_f32("embeddings.patch_embeddings.projection.bias", &[d], &init.normal(d, 0.02));
    w.insert_f32("embeddings.cls_token", &[1, 1, d], &init.normal(d, 0.5));
    let n_pos = vit.pos_side * vit.pos_side + 1;
    w.insert_f32(
        "embeddings.position_embeddings",
        &[1, n_pos, d],
        &init.normal(n_pos * d, 0.1),
    );
    for i in 0..vit.blocks {
        let b = format!("encoder.layer.{i}");
        put_norm(&mut w, &format!("{b}.layernorm_before"), d);
        for proj in ["query", "key", "value"] {
            put_linear(&mut w, &mut init, &format!("{b}.attention.attention.{proj}"), d, d, true);
        }
        put_linear(&mut w, &mut init, &format!("{b}.attention.output.dense"), d, d, true);
        put_norm(&mut w, &format!("{b}.layernorm_after"), d);
        put_linear(&mut w, &mut init, &format!("{b}.intermediate.dense"), d, vit.mlp, true);
        put_linear(&mut w, &mut init, &format!("{b}.output.dense"), vit.mlp, d, true);
    }
    put_norm(&mut w, "layernorm", d);
    w.set_metadata("family", "dino");
    w.set_metadata("vision_heads", vit.heads.to_string());
    w
}

fn word_pieces(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut cur_word = None;
    for ch in text.to_lowercase().chars() {
        let is_word = ch.is_alphanumeric() || ch == '_';
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            cur_word = None;
            continue;
        }
        if cur_word.is_some_and(|w| w != is_word) && !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        cur.push(ch);
        cur_word = Some(is_word);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Word-level tokenizer definition covering the ImageNet templates plus
/// `extra_words`. Ids 0/1/2 are start-of-text, end-of-text and unknown.
pub fn tiny_tokenizer_json(extra_words: &[&str]) -> String {
    let mut words = BTreeSet::new();
    for t in IMAGENET_TEMPLATES {
        words.extend(word_pieces(&t.replace("{}", " ")));
    }
    for w in extra_words {
        words.extend(word_pieces(w));
    }
    let mut vocab = serde_json::Map::new();
    for (i, tok) in ["<|startoftext|>", "<|endoftext|>", "[UNK]"].iter().enumerate() {
        vocab.insert((*tok).into(), i.into());
    }
    for (i, wd) in words.iter().enumerate() {
        vocab.insert(wd.clone(), (i + 3).into());
    }
    let special = |id: u32, content: &str| {
        serde_json::json!({
            "id": id, "content": content, "single_word": false, "lstrip": false,
            "rstrip": false, "normalized": false, "special": true
        })
    };
    let json = serde_json::json!({
        "version": "1.0",
        "truncation": null,
        "padding": null,
        "added_tokens": [special(0, "<|startoftext|>"), special(1, "<|endoftext|>")],
        "normalizer": {"type": "Lowercase"},
        "pre_tokenizer": {"type": "Whitespace"},
        "post_processor": {
            "type": "TemplateProcessing",
            "single": [
                {"SpecialToken": {"id": "<|startoftext|>", "type_id": 0}},
                {"Sequence": {"id": "A", "type_id": 0}},
                {"SpecialToken": {"id": "<|endoftext|>", "type_id": 0}}
            ],
            "pair": [
                {"SpecialToken": {"id": "<|startoftext|>", "type_id": 0}},
                {"Sequence": {"id": "A", "type_id": 0}},
                {"Sequence": {"id": "B", "type_id": 1}},
                {"SpecialToken": {"id": "<|endoftext|>", "type_id": 0}}
            ],
            "special_tokens": {
                "<|startoftext|>": {"id": "<|startoftext|>", "ids": [0], "tokens": ["<|startoftext|>"]},
                "<|endoftext|>": {"id": "<|endoftext|>", "ids": [1], "tokens": ["<|endoftext|>"]}
            }
        },
        "decoder": null,
        "model": {"type": "WordLevel", "vocab": vocab, "unk_token": "[UNK]"}
    });
    json.to_string()
}

/// Number of entries in the vocabulary produced by [`tiny_tokenizer_json`].
pub fn tiny_vocab_size(extra_words: &[&str]) -> usize {
    let v: serde_json::Value = serde_json::from_str(&tiny_tokenizer_json(extra_words)).unwrap();
    v["model"]["vocab"].as_object().unwrap().len()
}

/// A toy scene: textured background and one axis-aligned object of a
/// distinct colour. Returns the image and its foreground mask (255 = object).
pub fn scene(seed: u64, width: u32, height: u32) -> (RgbImage, GrayImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = [rng.random_range(0..90u8), rng.random_range(60..160u8), rng.random_range(0..90u8)];
    let fg = [rng.random_range(170..255u8), rng.random_range(0..80u8), rng.random_range(120..255u8)];
    let ow = rng.random_range(width / 4..=width * 3 / 5).max(1);
    let oh = rng.random_range(height / 4..=height * 3 / 5).max(1);
    let ox = rng.random_range(0..=width - ow);
    let oy = rng.random_range(0..=height - oh);
    let mut img = RgbImage::new(width, height);
    let mut mask = GrayImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let inside = x >= ox && x < ox + ow && y >= oy && y < oy + oh;
            let base = if inside { fg } else { bg };
            let jitter: i16 = rng.random_range(-12..=12);
            let px = base.map(|c| (c as i16 + jitter).clamp(0, 255) as u8);
            img.put_pixel(x, y, Rgb(px));
            mask.put_pixel(x, y, Luma([if inside { 255 } else { 0 }]));
        }
    }
    (img, mask)
}

/// Words known to the fixture tokenizer besides the template vocabulary.
pub const FIXTURE_WORDS: &[&str] = &["cat", "dog", "car", "tree", "sky", "grass", "person", "background"];

/// Width of the joint embedding space of [`tiny_backbone`].
pub const TINY_PROJ_DIM: usize = 16;

/// A randomly initialised CLIP handle with a fixture tokenizer, tapped at
/// block `tap_layer`. Images are encoded at a short side of `short_side`.
pub fn tiny_backbone(seed: u64, tap_layer: usize, short_side: u32) -> crate::Result<crate::featurizer::BackboneHandle> {
    tiny_backbone_with(TinyVit::default(), seed, tap_layer, short_side)
}

/// [`tiny_backbone`] with a custom vision shape.
pub fn tiny_backbone_with(
    vit: TinyVit,
    seed: u64,
    tap_layer: usize,
    short_side: u32,
) -> crate::Result<crate::featurizer::BackboneHandle> {
    let vocab = tiny_vocab_size(FIXTURE_WORDS);
    let bytes = tiny_clip(vit, TINY_PROJ_DIM, vocab, 16, seed).to_bytes()?;
    let store = crate::tensors::TensorStore::from_bytes(&bytes, format!("tiny-clip-{seed}"))?;
    let tok = crate::featurizer::tokenizer_from_json(&tiny_tokenizer_json(FIXTURE_WORDS))?;
    let mut opts = crate::featurizer::BackboneOptions::new(format!("tiny-clip-{seed}"));
    opts.tap_layer = tap_layer;
    opts.short_side = short_side;
    crate::featurizer::BackboneHandle::from_store(&store, Some(tok), &opts)
}

/// A randomly initialised DINO teacher matching [`tiny_backbone`]'s patch size.
pub fn tiny_teacher(seed: u64) -> crate::Result<crate::teachers::DinoTeacher> {
    let bytes = tiny_dino(TinyVit::default(), seed).to_bytes()?;
    let store = crate::tensors::TensorStore::from_bytes(&bytes, format!("tiny-dino-{seed}"))?;
    crate::teachers::DinoTeacher::from_store(&store, crate::teachers::EmbeddingKind::Value)
}

/// Encoder stand-in whose features are affine functions of each patch's
/// mean colour (in-image pixels only). `last` is 3-wide, `intermediate`
/// 4-wide. Counts its passes like a real backbone.
#[derive(Debug, Default)]
pub struct PatchColorEncoder {
    pub patch_size: usize,
    pub short_side: u32,
    passes: std::sync::atomic::AtomicU64,
}

impl PatchColorEncoder {
    pub fn new(patch_size: usize, short_side: u32) -> Self {
        Self {
            patch_size,
            short_side,
            passes: Default::default(),
        }
    }

    pub fn passes(&self) -> u64 {
        self.passes.load(std::sync::atomic::Ordering::SeqCst)
    }
}

impl crate::featurizer::DenseEncoder for PatchColorEncoder {
    fn patch_size(&self) -> usize {
        self.patch_size
    }

    fn short_side(&self) -> u32 {
        self.short_side
    }

    fn tap_layer(&self) -> usize {
        1
    }

    fn backbone_id(&self) -> String {
        format!("patch-color-p{}", self.patch_size)
    }

    fn encode_exact(&self, image: &RgbImage) -> crate::Result<crate::featurizer::DenseFeatures> {
        use crate::features::{PatchFeatureMap, SourceTag};
        self.passes.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        let (h, w) = (image.height() as usize, image.width() as usize);
        let grid = crate::grid::PatchGrid::for_image(h, w, self.patch_size)?;
        let p = self.patch_size;
        let mut last = ndarray::Array2::<f64>::zeros((grid.len(), 3));
        let mut inter = ndarray::Array2::<f64>::zeros((grid.len(), 4));
        for r in 0..grid.n_rows {
            for c in 0..grid.n_cols {
                let mut sum = [0.0f64; 3];
                let mut n = 0.0;
                for y in r * p..((r + 1) * p).min(h) {
                    for x in c * p..((c + 1) * p).min(w) {
                        let px = image.get_pixel(x as u32, y as u32).0;
                        for k in 0..3 {
                            sum[k] += px[k] as f64 / 255.0;
                        }
                        n += 1.0;
                    }
                }
                let i = grid.index(r, c);
                for k in 0..3 {
                    last[[i, k]] = sum[k] / n + 0.05;
                    inter[[i, k]] = sum[k] / n - 0.5;
                }
                inter[[i, 3]] = 1.0;
            }
        }
        Ok(crate::featurizer::DenseFeatures {
            last: PatchFeatureMap::new(grid, last, SourceTag::MaskclipLast)?,
            intermediate: PatchFeatureMap::new(grid, inter, SourceTag::Intermediate { layer: 1 })?,
            encoded_size: (h as u32, w as u32),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pieces_split_punctuation() {
        assert_eq!(word_pieces("A close-up photo."), ["a", "close", "-", "up", "photo", "."]);
    }

    #[test]
    fn tokenizer_parses_and_wraps() {
        let json = tiny_tokenizer_json(&["cat"]);
        let tok = tokenizers::Tokenizer::from_bytes(json.as_bytes()).unwrap();
        let enc = tok.encode("a photo of a cat.", true).unwrap();
        let ids = enc.get_ids();
        assert_eq!(ids.first(), Some(&0));
        assert_eq!(ids.last(), Some(&1));
        assert!(!ids.contains(&2));
        let unk = tok.encode("zyzzyva", true).unwrap();
        assert_eq!(unk.get_ids(), &[0, 2, 1]);
    }

    #[test]
    fn scene_is_deterministic() {
        let (a, ma) = scene(3, 32, 32);
        let (b, mb) = scene(3, 32, 32);
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert!(ma.pixels().any(|p| p.0[0] == 255));
        assert!(ma.pixels().any(|p| p.0[0] == 0));
    }
}
