//! The training loop for the affinity and objectness heads.

use image::{imageops, GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::heads::{predict_affinity, predict_objectness, Heads, ObjectnessMap};
use crate::error::{invalid, Error, Result};
use crate::features::PatchFeatureMap;
use crate::featurizer::DenseEncoder;
use crate::teachers::{binarize_target, mask_to_grid, AffinityTeacher, BinaryAffinityTarget, ObjectnessSource};
use crate::training::augment::{augment, Augmentations};
use crate::training::checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
use crate::training::loss::{
    correlation_bce, correlation_loss_and_grad, objectness_bce, objectness_loss_and_grad, AffinityGrad,
    ObjectnessGrad,
};
use crate::training::optim::{Adam, AdamParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub affinity_head_stop_epoch: usize,
    pub gamma: f64,
    pub seed: u64,
    /// Width of the affinity head's projection.
    pub d_g: usize,
    pub augmentations: Augmentations,
    pub adam: AdamParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 5e-4,
            lr_decay_epoch: 15,
            lr_decay_factor: 0.1,
            affinity_head_stop_epoch: 5,
            gamma: 0.2,
            seed: 0,
            d_g: 256,
            augmentations: Augmentations::default(),
            adam: AdamParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch size must be positive"));
        }
        if self.affinity_head_stop_epoch > self.epochs {
            return Err(invalid(format!(
                "affinity head stop epoch {} exceeds {} epochs",
                self.affinity_head_stop_epoch, self.epochs
            )));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(invalid("lr decay factor must lie in (0, 1]"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("learning rate must be positive"));
        }
        if !(-1.0..=1.0).contains(&self.gamma) {
            return Err(invalid("gamma outside [-1, 1]"));
        }
        self.augmentations.validate()
    }

    /// Objectness learning rate during `epoch` (1-based).
    pub fn objectness_lr(&self, epoch: usize) -> f64 {
        if epoch > self.lr_decay_epoch {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }

    /// Whether the affinity head is updated during `epoch` (1-based).
    pub fn affinity_trainable(&self, epoch: usize) -> bool {
        epoch <= self.affinity_head_stop_epoch
    }
}

/// Mean losses over one epoch. Epoch 0 is the untrained heads evaluated
/// once over the training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_c: f64,
    pub loss_m: f64,
    pub lr: f64,
}

impl EpochMetrics {
    /// One newline-terminated JSON record.
    pub fn to_ndjson(&self) -> String {
        let mut s = serde_json::to_string(self).expect("plain struct");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub image: RgbImage,
}

/// Everything `train` reads; nothing here is mutated.
#[derive(Clone, Copy)]
pub struct TrainInputs<'a> {
    pub samples: &'a [TrainSample],
    pub student: &'a dyn DenseEncoder,
    pub teacher: &'a dyn AffinityTeacher,
    pub objectness: &'a dyn ObjectnessSource,
}

/// Passed to the observer after every epoch (including epoch 0).
pub struct EpochReport<'a> {
    pub metrics: EpochMetrics,
    pub heads: &'a Heads,
}

struct Prepared {
    x: PatchFeatureMap,
    d: BinaryAffinityTarget,
    m: ObjectnessMap,
}

fn unavailable(id: &str, e: Error) -> Error {
    match e {
        Error::TeacherUnavailable { .. } => e,
        other => Error::TeacherUnavailable {
            image_id: id.to_string(),
            reason: other.to_string(),
        },
    }
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct Run<'a> {
    inputs: TrainInputs<'a>,
    config: &'a TrainConfig,
    masks: Vec<GrayImage>,
}

impl Run<'_> {
    fn prepare(&self, idx: usize, epoch: usize) -> Result<Prepared> {
        let sample = &self.inputs.samples[idx];
        let mut rng = sample_rng(self.config.seed, 1 + (epoch * self.inputs.samples.len() + idx) as u64);
        let (img, mask) = augment(&sample.image, &self.masks[idx], &self.config.augmentations, &mut rng)?;
        let x = self.inputs.student.encode_intermediate_exact(&img)?;
        let a = self
            .inputs
            .teacher
            .affinity_for(&img, x.grid())
            .map_err(|e| unavailable(&sample.id, e))?;
        let m = mask_to_grid(&mask, x.grid(), (img.height(), img.width()))
            .map_err(|e| unavailable(&sample.id, e))?;
        Ok(Prepared {
            d: binarize_target(&a, self.config.gamma),
            x,
            m,
        })
    }
}

fn eval_losses(heads: &Heads, p: &Prepared) -> Result<(f64, f64)> {
    let a = predict_affinity(&p.x, &heads.affinity)?;
    let lc = correlation_bce(a.values(), p.d.values())?.0;
    let o = predict_objectness(&p.x, &heads.objectness)?;
    let lm = objectness_bce(o.logits().expect("head output"), p.m.binary())?.0;
    Ok((lc, lm))
}

type SampleGrads = (f64, f64, Option<AffinityGrad>, ObjectnessGrad);

fn sample_grads(heads: &Heads, p: &Prepared, with_affinity: bool) -> Result<SampleGrads> {
    let (lc, ga) = if with_affinity {
        let (l, g) = correlation_loss_and_grad(&heads.affinity, &p.x, &p.d)?;
        (l, Some(g))
    } else {
        let a = predict_affinity(&p.x, &heads.affinity)?;
        (correlation_bce(a.values(), p.d.values())?.0, None)
    };
    let (lm, gm) = objectness_loss_and_grad(&heads.objectness, &p.x, &p.m)?;
    Ok((lc, lm, ga, gm))
}

/// Resize a mask to the image size (nearest) after an aspect check.
fn fit_mask(mask: GrayImage, image: &RgbImage) -> Result<GrayImage> {
    if mask.dimensions() == image.dimensions() {
        return Ok(mask);
    }
    let want = image.width() as f64 / image.height() as f64;
    let got = mask.width() as f64 / mask.height() as f64;
    if ((got - want) / want).abs() > 0.02 {
        return Err(invalid(format!(
            "mask {}x{} does not match image aspect {}x{}",
            mask.width(),
            mask.height(),
            image.width(),
            image.height()
        )));
    }
    Ok(imageops::resize(&mask, image.width(), image.height(), imageops::FilterType::Nearest))
}

/// Train both heads against teacher targets. The backbone and teacher are
/// only read. With a fixed seed the result is a pure function of the inputs.
pub fn train(
    inputs: TrainInputs<'_>,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochReport<'_>),
) -> Result<Checkpoint> {
    config.validate()?;
    if inputs.samples.is_empty() {
        return Err(invalid("training set is empty"));
    }
    // Fail fast on missing teacher masks before any compute.
    let masks = inputs
        .samples
        .iter()
        .map(|s| {
            inputs
                .objectness
                .mask(&s.id)
                .and_then(|m| fit_mask(m, &s.image))
                .map_err(|e| unavailable(&s.id, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let run = Run { inputs, config, masks };
    let n = inputs.samples.len();

    let cached: Option<Vec<Prepared>> = if config.augmentations.any() {
        None
    } else {
        Some((0..n).into_par_iter().map(|i| run.prepare(i, 0)).collect::<Result<_>>()?)
    };
    let prepare_batch = |idx: &[usize], epoch: usize| -> Result<Vec<Prepared>> {
        idx.par_iter().map(|&i| run.prepare(i, epoch)).collect()
    };

    let first = match &cached {
        Some(c) => c[0].x.dim(),
        None => run.prepare(0, 0)?.x.dim(),
    };
    let mut init_rng = sample_rng(config.seed, 0);
    let mut heads = Heads::init(first, config.d_g, inputs.student.tap_layer(), &mut init_rng)?;

    let all: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs + 1);
    {
        let mut sum = (0.0, 0.0);
        for chunk in all.chunks(config.batch_size) {
            let fresh;
            let batch: Vec<&Prepared> = match &cached {
                Some(c) => chunk.iter().map(|&i| &c[i]).collect(),
                None => {
                    fresh = prepare_batch(chunk, 0)?;
                    fresh.iter().collect()
                }
            };
            let losses = batch
                .par_iter()
                .map(|p| eval_losses(&heads, p))
                .collect::<Result<Vec<_>>>()?;
            for (lc, lm) in losses {
                sum.0 += lc;
                sum.1 += lm;
            }
        }
        let metrics = EpochMetrics {
            epoch: 0,
            loss_c: sum.0 / n as f64,
            loss_m: sum.1 / n as f64,
            lr: config.lr,
        };
        history.push(metrics);
        observer(&EpochReport {
            metrics,
            heads: &heads,
        });
    }

    let (n_a, n_o) = (heads.affinity.kernel().len(), heads.objectness.d_in());
    let mut adam_ak = Adam::new(n_a, config.adam);
    let mut adam_ab = Adam::new(config.d_g, config.adam);
    let mut adam_ok = Adam::new(n_o, config.adam);
    let mut adam_ob = Adam::new(1, config.adam);

    for epoch in 1..=config.epochs {
        let mut order = all.clone();
        order.shuffle(&mut sample_rng(config.seed, u64::MAX - epoch as u64));
        let train_aff = config.affinity_trainable(epoch);
        let lr_m = config.objectness_lr(epoch);
        let mut sum = (0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let fresh;
            let batch: Vec<&Prepared> = match &cached {
                Some(c) => chunk.iter().map(|&i| &c[i]).collect(),
                None => {
                    fresh = prepare_batch(chunk, epoch)?;
                    fresh.iter().collect()
                }
            };
            let grads = batch
                .par_iter()
                .map(|p| sample_grads(&heads, p, train_aff))
                .collect::<Result<Vec<_>>>()?;
            let b = grads.len() as f64;
            let mut gak = ndarray::Array2::<f64>::zeros((n_a / config.d_g, config.d_g));
            let mut gab = ndarray::Array1::<f64>::zeros(config.d_g);
            let mut gok = ndarray::Array1::<f64>::zeros(n_o);
            let mut gob = 0.0;
            for (lc, lm, ga, gm) in grads {
                sum.0 += lc;
                sum.1 += lm;
                if let Some(ga) = ga {
                    gak += &ga.kernel;
                    gab += &ga.bias;
                }
                gok += &gm.kernel;
                gob += gm.bias;
            }
            if train_aff {
                let (w, bias) = heads.affinity.weights_mut();
                adam_ak.step(
                    w.as_slice_mut().expect("contiguous"),
                    (gak / b).as_slice().expect("contiguous"),
                    config.lr,
                );
                adam_ab.step(
                    bias.as_slice_mut().expect("contiguous"),
                    (gab / b).as_slice().expect("contiguous"),
                    config.lr,
                );
            }
            let (w, bias) = heads.objectness.weights_mut();
            adam_ok.step(
                w.as_slice_mut().expect("contiguous"),
                (gok / b).as_slice().expect("contiguous"),
                lr_m,
            );
            adam_ob.step(std::slice::from_mut(bias), &[gob / b], lr_m);
        }
        let metrics = EpochMetrics {
            epoch,
            loss_c: sum.0 / n as f64,
            loss_m: sum.1 / n as f64,
            lr: lr_m,
        };
        history.push(metrics);
        observer(&EpochReport {
            metrics,
            heads: &heads,
        });
    }

    Ok(Checkpoint {
        meta: CheckpointMeta {
            version: CHECKPOINT_VERSION,
            input_tap: heads.input_tap(),
            d_in: heads.affinity.d_in(),
            d_g: heads.affinity.d_g(),
            gamma_default: config.gamma,
            delta_default: crate::denoiser::pipeline::DEFAULT_DELTA,
            backbone_id: inputs.student.backbone_id(),
            teacher_id: Some(inputs.teacher.teacher_id()),
            config: Some(config.clone()),
            history,
        },
        heads,
    })
}
