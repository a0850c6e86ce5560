//! Evaluation: sliding-window inference over datasets and mIoU.

pub mod confusion;
pub mod datasets;
pub mod report;
pub mod sliding;

use image::GrayImage;
use rayon::prelude::*;

use crate::denoiser::pipeline::{BackgroundSource, Pipeline};
use crate::error::{invalid, Error, Result};
use crate::featurizer::TextQuerySet;
use crate::teachers::ObjectnessSource;

pub use confusion::{accumulate_confusion, miou, ConfusionMatrix, Miou, IGNORE_INDEX};
pub use datasets::{load_annotation, DatasetAdapter, DatasetKind, Sample};
pub use report::{config_hash, ClassIou, EvalReport};
pub use sliding::{sliding_window_segment, window_origins, SlidingWindow};

pub struct EvalOptions<'a> {
    pub sliding: SlidingWindow,
    /// Teacher masks keyed by sample id, for the teacher background source.
    pub objectness: Option<&'a dyn ObjectnessSource>,
    /// Recorded in the report.
    pub config_hash: String,
}

/// Confusion matrix for one sample.
pub fn evaluate_sample(
    sample: &Sample,
    adapter: &DatasetAdapter,
    pipeline: &Pipeline<'_>,
    queries: &TextQuerySet,
    opts: &EvalOptions<'_>,
) -> Result<ConfusionMatrix> {
    let image = image::open(&sample.image)?.to_rgb8();
    let gt = load_annotation(&sample.annotation)?;
    let mask: Option<GrayImage> = if pipeline.config().background == BackgroundSource::Teacher {
        let src = opts
            .objectness
            .ok_or_else(|| invalid("teacher background needs an objectness source"))?;
        Some(src.mask(&sample.id)?)
    } else {
        None
    };
    let scores = sliding_window_segment(&image, mask.as_ref(), pipeline, queries, opts.sliding)?;
    let pred = scores.labels_at(gt.nrows(), gt.ncols());
    accumulate_confusion(&pred, &gt, adapter.n_classes(), adapter.ignore_index).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("{}: {m}", sample.id)),
        other => other,
    })
}

/// Evaluate every sample in parallel and sum the confusion matrices.
///
/// Background refinement runs only on datasets with a background class;
/// elsewhere the configured background source is ignored.
pub fn evaluate_dataset(
    adapter: &DatasetAdapter,
    pipeline: &Pipeline<'_>,
    queries: &TextQuerySet,
    opts: &EvalOptions<'_>,
) -> Result<EvalReport> {
    if queries.len() != adapter.n_classes() {
        return Err(invalid(format!(
            "{} queries for {} classes",
            queries.len(),
            adapter.n_classes()
        )));
    }
    let mut config = *pipeline.config();
    if !adapter.has_background {
        config.background = BackgroundSource::Off;
    }
    let pipeline = pipeline.with_config(config);
    let samples = adapter.samples()?;
    let total = samples
        .par_iter()
        .map(|s| evaluate_sample(s, adapter, &pipeline, queries, opts))
        .try_reduce(|| ConfusionMatrix::new(adapter.n_classes()), |a, b| Ok(a + b))?;
    let m = miou(&total)?;
    Ok(EvalReport {
        dataset: adapter.name.clone(),
        config_hash: opts.config_hash.clone(),
        per_class_iou: adapter
            .class_names
            .iter()
            .zip(m.per_class_iou)
            .map(|(c, iou)| ClassIou { class: c.clone(), iou })
            .collect(),
        miou: m.mean,
        n_images: samples.len(),
        sliding_window: opts.sliding,
        background_refinement: config.background != BackgroundSource::Off,
    })
}
