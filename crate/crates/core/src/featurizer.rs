//! Dense text-aligned patch features, intermediate taps, and text queries.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use image::RgbImage;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use tokenizers::Tokenizer;

use crate::error::{invalid, Error, Result};
use crate::features::{l2_normalize_rows, PatchFeatureMap, SourceTag};
use crate::grid::PatchGrid;
use crate::preprocess::resize_short_side;
use crate::templates::{expand, TemplateSet};
use crate::tensors::TensorStore;
use crate::vit::{ClipModel, Family};

/// Default shorter-side length images are resized to before encoding.
pub const DEFAULT_SHORT_SIDE: u32 = 448;

/// Both feature maps produced by one encoder pass over an image.
#[derive(Debug, Clone)]
pub struct DenseFeatures {
    /// Text-aligned features (`d` = joint embedding width).
    pub last: PatchFeatureMap,
    /// Residual stream after the tap block (`d` = encoder width).
    pub intermediate: PatchFeatureMap,
    /// Size of the image actually encoded (after resize, before padding).
    pub encoded_size: (u32, u32),
}

impl DenseFeatures {
    pub fn grid(&self) -> PatchGrid {
        self.last.grid()
    }
}

/// Anything that turns an image into dense features.
pub trait DenseEncoder: Send + Sync {
    fn patch_size(&self) -> usize;
    /// Shorter side images are resized to before encoding.
    fn short_side(&self) -> u32;
    /// 1-based block index of the intermediate tap.
    fn tap_layer(&self) -> usize;
    fn backbone_id(&self) -> String;
    /// Encode `image` at its current size (padded to a patch multiple).
    fn encode_exact(&self, image: &RgbImage) -> Result<DenseFeatures>;
    /// Resize (shorter side), encode, and return both maps on the same grid.
    fn encode(&self, image: &RgbImage) -> Result<DenseFeatures> {
        self.encode_exact(&resize_short_side(image, self.short_side()))
    }
    /// Intermediate tap only, at the image's current size.
    fn encode_intermediate_exact(&self, image: &RgbImage) -> Result<PatchFeatureMap> {
        Ok(self.encode_exact(image)?.intermediate)
    }
}

/// Embeds a single piece of text into the joint space (un-normalized).
pub trait TextEmbedder: Send + Sync {
    fn embed_text(&self, text: &str) -> Result<Array1<f64>>;
}

/// Prompts and their unit-norm embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TextQuerySet {
    prompts: Vec<String>,
    embeddings: Array2<f64>,
    background: Option<usize>,
    template_set: TemplateSet,
}

/// True when a prompt names the background query.
pub fn is_background_prompt(prompt: &str) -> bool {
    prompt.trim().eq_ignore_ascii_case("background")
}

impl TextQuerySet {
    /// Build from raw embeddings; rows are L2-normalized here.
    pub fn new(prompts: Vec<String>, embeddings: Array2<f64>, template_set: TemplateSet) -> Result<Self> {
        if prompts.is_empty() {
            return Err(invalid("query set needs at least one prompt"));
        }
        if prompts.len() != embeddings.nrows() {
            return Err(invalid(format!(
                "{} prompts but {} embedding rows",
                prompts.len(),
                embeddings.nrows()
            )));
        }
        let embeddings = l2_normalize_rows(&embeddings, "text embedding")?;
        let background = prompts.iter().position(|p| is_background_prompt(p));
        Ok(Self {
            prompts,
            embeddings,
            background,
            template_set,
        })
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn has_background(&self) -> bool {
        self.background.is_some()
    }

    pub fn background_index(&self) -> Option<usize> {
        self.background
    }

    pub fn template_set(&self) -> TemplateSet {
        self.template_set
    }
}

/// Embed each prompt under every template of `template_set`, average the
/// unit-normalized template embeddings, and normalize the mean.
///
/// Templates are visited in sorted order, so the result does not depend on
/// how the template list is ordered.
pub fn encode_text_queries(
    encoder: &dyn TextEmbedder,
    prompts: &[String],
    template_set: TemplateSet,
) -> Result<TextQuerySet> {
    encode_with_templates(encoder, prompts, template_set.templates(), template_set)
}

pub(crate) fn encode_with_templates(
    encoder: &dyn TextEmbedder,
    prompts: &[String],
    templates: &[&str],
    template_set: TemplateSet,
) -> Result<TextQuerySet> {
    if prompts.is_empty() {
        return Err(invalid("no prompts given"));
    }
    let mut sorted: Vec<&str> = templates.to_vec();
    sorted.sort_unstable();
    let mut rows = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let name = prompt.trim();
        if name.is_empty() {
            return Err(invalid("empty prompt string"));
        }
        let mut acc: Option<Array1<f64>> = None;
        for t in &sorted {
            let e = encoder.embed_text(&expand(t, name))?;
            let norm = e.dot(&e).sqrt();
            if !(norm > 0.0) {
                return Err(Error::DegenerateInput(format!("zero text embedding for `{name}`")));
            }
            let e = e / norm;
            acc = Some(match acc {
                Some(a) => a + &e,
                None => e,
            });
        }
        rows.push(acc.expect("at least one template"));
    }
    let dim = rows[0].len();
    let mut emb = Array2::<f64>::zeros((rows.len(), dim));
    for (mut dst, src) in emb.axis_iter_mut(Axis(0)).zip(rows) {
        dst.assign(&src);
    }
    TextQuerySet::new(prompts.iter().map(|p| p.trim().to_string()).collect(), emb, template_set)
}

/// Expected backbone shape, checked against the weight file on load.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneExpectation {
    pub patch_size: Option<usize>,
    pub embed_dim: Option<usize>,
    pub n_blocks: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneOptions {
    pub weights: PathBuf,
    /// Tokenizer definition; without it text queries cannot be embedded.
    #[serde(default)]
    pub tokenizer: Option<PathBuf>,
    #[serde(default = "default_tap_layer")]
    pub tap_layer: usize,
    #[serde(default = "default_short_side")]
    pub short_side: u32,
    #[serde(default)]
    pub expect: BackboneExpectation,
}

fn default_tap_layer() -> usize {
    10
}

fn default_short_side() -> u32 {
    DEFAULT_SHORT_SIDE
}

impl BackboneOptions {
    pub fn new(weights: impl Into<PathBuf>) -> Self {
        Self {
            weights: weights.into(),
            tokenizer: None,
            tap_layer: default_tap_layer(),
            short_side: default_short_side(),
            expect: BackboneExpectation::default(),
        }
    }
}

/// A frozen CLIP backbone with its tokenizer.
///
/// Immutable after load; every method takes `&self` and may be called from
/// several threads at once.
pub struct BackboneHandle {
    weight_source: PathBuf,
    id: String,
    model: ClipModel,
    tokenizer: Option<Tokenizer>,
    tap_layer: usize,
    short_side: u32,
    passes: AtomicU64,
}

impl std::fmt::Debug for BackboneHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackboneHandle")
            .field("weight_source", &self.weight_source)
            .field("id", &self.id)
            .field("tap_layer", &self.tap_layer)
            .finish_non_exhaustive()
    }
}

impl BackboneHandle {
    pub fn load(opts: &BackboneOptions) -> Result<Self> {
        let store = TensorStore::load(&opts.weights)?;
        let tokenizer = opts
            .tokenizer
            .as_deref()
            .map(load_tokenizer)
            .transpose()?;
        Self::from_store(&store, tokenizer, opts)
    }

    pub fn from_store(store: &TensorStore, tokenizer: Option<Tokenizer>, opts: &BackboneOptions) -> Result<Self> {
        match Family::detect(store) {
            Some(Family::Clip) => {}
            other => {
                return Err(Error::Load {
                    path: store.origin().to_path_buf(),
                    reason: format!("expected a CLIP container, found {other:?}"),
                })
            }
        }
        let model = ClipModel::load(store)?;
        let v = &model.vision;
        let mismatch = |what: &str, want: usize, got: usize| Error::Load {
            path: store.origin().to_path_buf(),
            reason: format!("{what}: expected {want}, weights have {got}"),
        };
        if let Some(p) = opts.expect.patch_size.filter(|&p| p != v.patch_size()) {
            return Err(mismatch("patch size", p, v.patch_size()));
        }
        if let Some(d) = opts.expect.embed_dim.filter(|&d| d != v.width()) {
            return Err(mismatch("embed dim", d, v.width()));
        }
        if let Some(n) = opts.expect.n_blocks.filter(|&n| n != v.n_blocks()) {
            return Err(mismatch("block count", n, v.n_blocks()));
        }
        if opts.tap_layer == 0 || opts.tap_layer > v.n_blocks() {
            return Err(invalid(format!(
                "tap layer {} outside 1..={}",
                opts.tap_layer,
                v.n_blocks()
            )));
        }
        if opts.short_side == 0 {
            return Err(invalid("short side must be positive"));
        }
        let id = format!(
            "clip-{}x{}-p{}-{}",
            v.width(),
            v.n_blocks(),
            v.patch_size(),
            &store.digest()[..12]
        );
        Ok(Self {
            weight_source: store.origin().to_path_buf(),
            id,
            model,
            tokenizer,
            tap_layer: opts.tap_layer,
            short_side: opts.short_side,
            passes: AtomicU64::new(0),
        })
    }

    pub fn weight_source(&self) -> &Path {
        &self.weight_source
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn embed_dim(&self) -> usize {
        self.model.vision.width()
    }

    pub fn proj_dim(&self) -> usize {
        self.model.vision.proj_dim()
    }

    pub fn n_blocks(&self) -> usize {
        self.model.vision.n_blocks()
    }

    /// Number of image forward passes run so far.
    pub fn forward_passes(&self) -> u64 {
        self.passes.load(Ordering::SeqCst)
    }

    /// Dense features for `image` (shorter side resized first).
    pub fn encode_image_dense(&self, image: &RgbImage) -> Result<DenseFeatures> {
        self.encode_exact_impl(&resize_short_side(image, self.short_side))
    }

    fn encode_exact_impl(&self, img: &RgbImage) -> Result<DenseFeatures> {
        self.passes.fetch_add(1, Ordering::SeqCst);
        let out = self.model.vision.forward(img, Some(self.tap_layer), true)?;
        let last = out.last.expect("requested");
        let inter = out.intermediate.expect("requested");
        Ok(DenseFeatures {
            last: PatchFeatureMap::new(out.grid, last.mapv(f64::from), SourceTag::MaskclipLast)?,
            intermediate: PatchFeatureMap::new(
                out.grid,
                inter.mapv(f64::from),
                SourceTag::Intermediate {
                    layer: self.tap_layer,
                },
            )?,
            encoded_size: (img.height(), img.width()),
        })
    }

    /// Intermediate tap only, on an image whose size is already final.
    /// Stops after the tap block.
    pub fn encode_intermediate(&self, image: &RgbImage) -> Result<PatchFeatureMap> {
        self.passes.fetch_add(1, Ordering::SeqCst);
        let out = self.model.vision.forward(image, Some(self.tap_layer), false)?;
        PatchFeatureMap::new(
            out.grid,
            out.intermediate.expect("requested").mapv(f64::from),
            SourceTag::Intermediate {
                layer: self.tap_layer,
            },
        )
    }

    pub fn encode_text_queries(&self, prompts: &[String], template_set: TemplateSet) -> Result<TextQuerySet> {
        encode_text_queries(self, prompts, template_set)
    }
}

impl DenseEncoder for BackboneHandle {
    fn patch_size(&self) -> usize {
        self.model.vision.patch_size()
    }

    fn short_side(&self) -> u32 {
        self.short_side
    }

    fn tap_layer(&self) -> usize {
        self.tap_layer
    }

    fn backbone_id(&self) -> String {
        self.id.clone()
    }

    fn encode_exact(&self, image: &RgbImage) -> Result<DenseFeatures> {
        self.encode_exact_impl(image)
    }

    fn encode_intermediate_exact(&self, image: &RgbImage) -> Result<PatchFeatureMap> {
        self.encode_intermediate(image)
    }
}

impl TextEmbedder for BackboneHandle {
    fn embed_text(&self, text: &str) -> Result<Array1<f64>> {
        let text_model = self
            .model
            .text
            .as_ref()
            .ok_or_else(|| invalid("weights contain no text tower"))?;
        let tokenizer = self
            .tokenizer
            .as_ref()
            .ok_or_else(|| invalid("no tokenizer configured"))?;
        let enc = tokenizer
            .encode(text, true)
            .map_err(|e| invalid(format!("tokenizer failed on `{text}`: {e}")))?;
        let mut ids = enc.get_ids().to_vec();
        let ctx = text_model.context_length();
        if ids.len() > ctx {
            let eot = *ids.last().expect("non-empty");
            ids.truncate(ctx - 1);
            ids.push(eot);
        }
        Ok(text_model.encode_ids(&ids)?.mapv(f64::from))
    }
}

pub fn load_tokenizer(path: &Path) -> Result<Tokenizer> {
    if !path.exists() {
        return Err(Error::NotFound(path.display().to_string()));
    }
    Tokenizer::from_file(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn tokenizer_from_json(json: &str) -> Result<Tokenizer> {
    Tokenizer::from_bytes(json.as_bytes()).map_err(|e| invalid(format!("tokenizer json: {e}")))
}
