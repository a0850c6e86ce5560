//! End-to-end composition: dense features, affinity, pooling, matching,
//! background refinement, and pixel labels.

use image::{imageops, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::denoiser::affinity::{threshold_affinity, AffinityMatrix};
use crate::denoiser::background::refine_background;
use crate::denoiser::heads::{predict_affinity, predict_objectness, Heads, ObjectnessMap};
use crate::denoiser::matching::{similarity_map, SegmentationResult};
use crate::denoiser::pooling::guided_pool;
use crate::denoiser::upsample::{LabelMap, PixelScores};
use crate::error::{invalid, Result};
use crate::features::{l2_normalize_rows, PatchFeatureMap, SourceTag};
use crate::featurizer::{DenseEncoder, DenseFeatures, TextQuerySet};
use crate::preprocess::short_side_dims;
use crate::teachers::{mask_to_grid, DinoTeacher};

/// Where pooling weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingSource {
    /// No pooling: plain MaskCLIP features.
    None,
    /// Affinity of the self-supervised teacher.
    Teacher,
    /// Affinity predicted by the learned head.
    #[default]
    Learned,
}

/// Where the objectness mask for background refinement comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundSource {
    #[default]
    Off,
    Learned,
    Teacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub gamma: f64,
    pub delta: f64,
    pub pooling: PoolingSource,
    pub background: BackgroundSource,
    /// L2-normalize MaskCLIP features before pooling instead of only at
    /// matching time.
    pub normalize_before_pooling: bool,
}

pub const DEFAULT_GAMMA: f64 = 0.2;
pub const DEFAULT_DELTA: f64 = 0.98;

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            delta: DEFAULT_DELTA,
            pooling: PoolingSource::Learned,
            background: BackgroundSource::Off,
            normalize_before_pooling: false,
        }
    }
}

impl PipelineConfig {
    /// Plain MaskCLIP: no pooling, no background refinement.
    pub fn baseline() -> Self {
        Self {
            pooling: PoolingSource::None,
            background: BackgroundSource::Off,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.gamma) {
            return Err(invalid(format!("gamma {} outside [-1, 1]", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(invalid(format!("delta {} outside [0, 1]", self.delta)));
        }
        Ok(())
    }

    pub fn needs_heads(&self) -> bool {
        self.pooling == PoolingSource::Learned || self.background == BackgroundSource::Learned
    }
}

/// Teacher-side inputs for one image (or window), on the student grid.
#[derive(Debug, Clone, Default)]
pub struct TeacherSignals {
    pub affinity: Option<AffinityMatrix>,
    pub objectness: Option<ObjectnessMap>,
}

/// MaskCLIP baseline: match the raw dense features against the queries.
pub fn maskclip_baseline(features: &DenseFeatures, queries: &TextQuerySet) -> Result<SegmentationResult> {
    similarity_map(&features.last, queries)
}

/// Patch-level segmentation from already computed features. Pure: no
/// backbone pass happens here.
pub fn segment_features(
    features: &DenseFeatures,
    heads: Option<&Heads>,
    teacher: &TeacherSignals,
    queries: &TextQuerySet,
    config: &PipelineConfig,
) -> Result<SegmentationResult> {
    config.validate()?;
    if queries.is_empty() {
        return Err(invalid("no text queries"));
    }
    let need_heads = || heads.ok_or_else(|| invalid("learned heads required but none loaded"));
    let last = if config.normalize_before_pooling {
        PatchFeatureMap::new(
            features.last.grid(),
            l2_normalize_rows(features.last.values(), "dense features")?,
            features.last.source(),
        )?
    } else {
        features.last.clone()
    };
    let affinity = match config.pooling {
        PoolingSource::None => None,
        PoolingSource::Teacher => Some(
            teacher
                .affinity
                .clone()
                .ok_or_else(|| invalid("teacher pooling requested without a teacher affinity"))?,
        ),
        PoolingSource::Learned => Some(predict_affinity(&features.intermediate, &need_heads()?.affinity)?),
    };
    let pooled = match affinity {
        None => last,
        Some(a) => {
            if a.grid() != last.grid() {
                return Err(invalid("affinity grid does not match feature grid"));
            }
            guided_pool(&last, &threshold_affinity(&a, config.gamma)?)?.with_source(SourceTag::Refined)
        }
    };
    let result = similarity_map(&pooled, queries)?;
    let objectness = match config.background {
        BackgroundSource::Off => return Ok(result),
        BackgroundSource::Learned => predict_objectness(&features.intermediate, &need_heads()?.objectness)?,
        BackgroundSource::Teacher => teacher
            .objectness
            .clone()
            .ok_or_else(|| invalid("teacher background requested without an objectness mask"))?,
    };
    let bg = queries
        .background_index()
        .ok_or_else(|| invalid("background refinement needs a `background` query"))?;
    refine_background(&result, &objectness, config.delta, bg)
}

/// Pixel labels at the input resolution plus the patch-level result.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub labels: LabelMap,
    pub result: SegmentationResult,
}

/// A configured inference pipeline over borrowed components.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    encoder: &'a dyn DenseEncoder,
    heads: Option<&'a Heads>,
    teacher: Option<&'a DinoTeacher>,
    config: PipelineConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(encoder: &'a dyn DenseEncoder, config: PipelineConfig) -> Self {
        Self {
            encoder,
            heads: None,
            teacher: None,
            config,
        }
    }

    pub fn with_heads(mut self, heads: &'a Heads) -> Self {
        self.heads = Some(heads);
        self
    }

    pub fn with_teacher(mut self, teacher: &'a DinoTeacher) -> Self {
        self.teacher = Some(teacher);
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn with_config(mut self, config: PipelineConfig) -> Self {
        self.config = config;
        self
    }

    pub fn encoder(&self) -> &'a dyn DenseEncoder {
        self.encoder
    }

    /// Check that every component the configuration needs is present.
    pub fn check(&self, queries: &TextQuerySet) -> Result<()> {
        self.config.validate()?;
        if self.config.needs_heads() && self.heads.is_none() {
            return Err(invalid("configuration needs learned heads"));
        }
        if self.config.pooling == PoolingSource::Teacher && self.teacher.is_none() {
            return Err(invalid("teacher pooling needs a teacher backbone"));
        }
        if self.config.background != BackgroundSource::Off && !queries.has_background() {
            return Err(invalid("background refinement needs a `background` query"));
        }
        Ok(())
    }

    /// Size images are encoded at.
    pub fn working_dims(&self, image: &RgbImage) -> (u32, u32) {
        short_side_dims(image.height(), image.width(), self.encoder.short_side())
    }

    /// Resize `image` (and its mask, nearest) to the working size.
    pub fn prepare(&self, image: &RgbImage, mask: Option<&GrayImage>) -> (RgbImage, Option<GrayImage>) {
        let (h, w) = self.working_dims(image);
        let img = if (h, w) == (image.height(), image.width()) {
            image.clone()
        } else {
            imageops::resize(image, w, h, imageops::FilterType::Triangle)
        };
        let mask = mask.map(|m| {
            if (m.height(), m.width()) == (h, w) {
                m.clone()
            } else {
                imageops::resize(m, w, h, imageops::FilterType::Nearest)
            }
        });
        (img, mask)
    }

    /// One backbone pass over an image already at its working size, with
    /// dense pixel scores over the same extent.
    ///
    /// `mask` is the teacher objectness mask at the same size, needed only
    /// when the background source is the teacher.
    pub fn run_window(
        &self,
        image: &RgbImage,
        mask: Option<&GrayImage>,
        queries: &TextQuerySet,
    ) -> Result<(SegmentationResult, PixelScores)> {
        let features = self.encoder.encode_exact(image)?;
        let grid = features.grid();
        let mut signals = TeacherSignals::default();
        if self.config.pooling == PoolingSource::Teacher {
            let t = self
                .teacher
                .ok_or_else(|| invalid("teacher pooling needs a teacher backbone"))?;
            signals.affinity = Some(t.affinity_for(image, grid)?);
        }
        if self.config.background == BackgroundSource::Teacher {
            let m = mask.ok_or_else(|| invalid("teacher background needs an objectness mask"))?;
            signals.objectness = Some(mask_to_grid(m, grid, (image.height(), image.width()))?);
        }
        let result = segment_features(&features, self.heads, &signals, queries, &self.config)?;
        let p = grid.patch_size as f64;
        let (h, w) = (image.height() as usize, image.width() as usize);
        let pixels = PixelScores::from_result(&result, h, w, (h as f64 / p, w as f64 / p))?;
        Ok((result, pixels))
    }

    /// Single-pass segmentation: resize, one window over the whole image,
    /// labels at the original resolution.
    pub fn segment(
        &self,
        image: &RgbImage,
        mask: Option<&GrayImage>,
        queries: &TextQuerySet,
    ) -> Result<Segmentation> {
        self.check(queries)?;
        let (img, mask) = self.prepare(image, mask);
        let (result, pixels) = self.run_window(&img, mask.as_ref(), queries)?;
        Ok(Segmentation {
            labels: pixels.labels_at(image.height() as usize, image.width() as usize),
            result,
        })
    }
}
