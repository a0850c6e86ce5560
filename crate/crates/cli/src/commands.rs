//! Subcommand implementations.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dinoiser_core::denoiser::pipeline::{BackgroundSource, Pipeline, PipelineConfig, PoolingSource};
use dinoiser_core::eval::{config_hash, evaluate_dataset, DatasetAdapter, EvalOptions};
use dinoiser_core::eval::datasets::parse_prompt_lines;
use dinoiser_core::featurizer::{is_background_prompt, BackboneHandle, BackboneOptions, DenseEncoder};
use dinoiser_core::palette;
use dinoiser_core::teachers::{DinoTeacher, MaskDirectory, ObjectnessSource};
use dinoiser_core::training::{train, Checkpoint, TrainInputs, TrainSample};
use dinoiser_service::{AppState, Model};
use serde::Serialize;

use crate::config::{resolve_weights, CliConfig, TeacherConfig};
use crate::{Cli, Command, PipelineFlags};

/// Version of the JSON written next to each mask.
pub const SIDECAR_VERSION: u32 = 1;

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = CliConfig::load(cli.common.config.as_deref())?;
    let c = &cli.common;
    cfg.deterministic |= c.deterministic || dinoiser_core::runtime::deterministic_requested();
    if cfg.deterministic {
        dinoiser_core::runtime::enable_deterministic();
    }
    if let Some(d) = &c.output_dir {
        cfg.output_dir = Some(d.clone());
    }
    if let Some(w) = &c.weights {
        let mut opts = cfg.backbone.take().unwrap_or_else(|| BackboneOptions::new(w));
        opts.weights = w.clone();
        cfg.backbone = Some(opts);
    }
    if let Some(t) = &c.tokenizer {
        let opts = cfg.backbone.as_mut().context("--tokenizer needs --weights or a [backbone] section")?;
        opts.tokenizer = Some(t.clone());
    }
    if let Some(ck) = &c.checkpoint {
        cfg.checkpoint = Some(ck.clone());
    }
    let teacher_flag = c.teacher.is_some();
    if let Some(t) = &c.teacher {
        cfg.teacher = Some(TeacherConfig {
            weights: t.clone(),
            kind: cfg.teacher.as_ref().map(|t| t.kind).unwrap_or_default(),
        });
    }
    match cli.command {
        Command::Segment {
            images,
            prompts,
            prompt_file,
            pipeline,
        } => {
            cfg.command = "segment".into();
            let prompts = match (prompts, prompt_file) {
                (Some(p), _) => p.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
                (None, Some(f)) => parse_prompt_lines(
                    &std::fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?,
                ),
                (None, None) => bail!("give --prompts or --prompt-file"),
            };
            segment(cfg, &images, prompts, &pipeline, teacher_flag)
        }
        Command::Train {
            data,
            split,
            masks,
            epochs,
            seed,
        } => {
            cfg.command = "train".into();
            if data.is_some() {
                cfg.train.data = data;
            }
            if split.is_some() {
                cfg.train.split = split;
            }
            if masks.is_some() {
                cfg.train.masks = masks;
            }
            if let Some(e) = epochs {
                cfg.train.config.epochs = e;
                cfg.train.config.affinity_head_stop_epoch = cfg.train.config.affinity_head_stop_epoch.min(e);
                cfg.train.config.lr_decay_epoch = cfg.train.config.lr_decay_epoch.min(e);
            }
            if let Some(s) = seed {
                cfg.train.config.seed = s;
            }
            run_train(cfg)
        }
        Command::Eval {
            dataset,
            data_root,
            split,
            pipeline,
        } => {
            cfg.command = "eval".into();
            if dataset.is_some() {
                cfg.eval.dataset = dataset;
            }
            if data_root.is_some() {
                cfg.eval.root = data_root;
            }
            if split.is_some() {
                cfg.eval.split = split;
            }
            eval(cfg, &pipeline, teacher_flag)
        }
        Command::Export { out } => {
            cfg.command = "export".into();
            export(cfg, out)
        }
        Command::Serve { addr } => {
            cfg.command = "serve".into();
            if let Some(a) = addr {
                cfg.serve.addr = a;
            }
            serve(cfg)
        }
    }
}

struct Loaded {
    backbone: BackboneHandle,
    checkpoint: Option<Checkpoint>,
    teacher: Option<DinoTeacher>,
}

fn load_models(cfg: &CliConfig, need_heads: bool, need_teacher: bool) -> Result<Loaded> {
    let opts = cfg.backbone()?;
    let backbone = BackboneHandle::load(&opts).with_context(|| format!("loading {}", opts.weights.display()))?;
    let checkpoint = match (&cfg.checkpoint, need_heads) {
        (Some(p), true) => {
            let ck = Checkpoint::load(resolve_weights(p))?;
            ck.check_tap(backbone.tap_layer(), cfg.allow_tap_mismatch)?;
            Some(ck)
        }
        _ => None,
    };
    let teacher = match (&cfg.teacher, need_teacher) {
        (Some(t), true) => Some(DinoTeacher::load(&resolve_weights(&t.weights), t.kind)?),
        _ => None,
    };
    Ok(Loaded {
        backbone,
        checkpoint,
        teacher,
    })
}

/// Fill in pooling and background from flags and what is loadable.
fn resolve_pipeline(
    cfg: &mut CliConfig,
    flags: &PipelineFlags,
    teacher_flag: bool,
    wants_background: bool,
    teacher_masks: bool,
) -> Result<()> {
    let p = &mut cfg.pipeline;
    if let Some(g) = flags.gamma {
        p.gamma = g;
    }
    if let Some(d) = flags.delta {
        p.delta = d;
    }
    if flags.baseline_maskclip {
        p.pooling = PoolingSource::None;
        p.background = BackgroundSource::Off;
        return Ok(());
    }
    let has_heads = cfg.checkpoint.is_some();
    let has_teacher = cfg.teacher.is_some();
    p.pooling = match flags.pooling {
        Some(s) => s,
        None if teacher_flag => PoolingSource::Teacher,
        None if has_heads => PoolingSource::Learned,
        None if has_teacher => PoolingSource::Teacher,
        None => bail!("no checkpoint or teacher for pooling; pass --checkpoint, --teacher or --baseline-maskclip"),
    };
    if flags.no_background || !wants_background {
        p.background = BackgroundSource::Off;
    } else if p.background == BackgroundSource::Off {
        p.background = if teacher_masks {
            BackgroundSource::Teacher
        } else if has_heads {
            BackgroundSource::Learned
        } else {
            BackgroundSource::Off
        };
    }
    cfg.validate()
}

#[derive(Debug, Serialize)]
struct PromptCoverage {
    prompt: String,
    color: String,
    coverage_percent: f64,
}

#[derive(Debug, Serialize)]
struct Sidecar {
    version: u32,
    image: String,
    width: u32,
    height: u32,
    mask: String,
    legend: String,
    prompts: Vec<PromptCoverage>,
    backbone_id: String,
    checkpoint_id: Option<String>,
    templates: dinoiser_core::templates::TemplateSet,
    config: PipelineConfig,
}

fn segment(
    mut cfg: CliConfig,
    images: &[PathBuf],
    prompts: Vec<String>,
    flags: &PipelineFlags,
    teacher_flag: bool,
) -> Result<()> {
    if prompts.is_empty() {
        bail!("no prompts given");
    }
    let wants_bg = prompts.iter().any(|p| is_background_prompt(p));
    resolve_pipeline(&mut cfg, flags, teacher_flag, wants_bg, false)?;
    if cfg.pipeline.background == BackgroundSource::Teacher {
        bail!("teacher background refinement needs per-image masks; use eval or a checkpoint");
    }
    let models = load_models(
        &cfg,
        cfg.pipeline.needs_heads(),
        cfg.pipeline.pooling == PoolingSource::Teacher,
    )?;
    cfg.persist()?;
    let queries = models.backbone.encode_text_queries(&prompts, cfg.templates)?;
    let heads = models.checkpoint.as_ref().map(|c| &c.heads);
    let mut pipeline = Pipeline::new(&models.backbone, cfg.pipeline);
    if let Some(h) = heads {
        pipeline = pipeline.with_heads(h);
    }
    if let Some(t) = &models.teacher {
        pipeline = pipeline.with_teacher(t);
    }
    let checkpoint_id = models.checkpoint.as_ref().map(|c| c.id()).transpose()?;
    let out = cfg.output_dir();
    let mut failures = 0;
    for path in images {
        let res = segment_one(path, &pipeline, &queries, &out, &cfg, checkpoint_id.clone());
        match res {
            Ok(sidecar) => println!("{}", out.join(sidecar).display()),
            Err(e) => {
                failures += 1;
                eprintln!("error: {}: {e:#}", path.display());
            }
        }
    }
    if failures == images.len() {
        bail!("every image failed");
    }
    Ok(())
}

fn segment_one(
    path: &Path,
    pipeline: &Pipeline<'_>,
    queries: &dinoiser_core::featurizer::TextQuerySet,
    out: &Path,
    cfg: &CliConfig,
    checkpoint_id: Option<String>,
) -> Result<String> {
    let img = image::open(path)?.to_rgb8();
    let seg = pipeline.segment(&img, None, queries)?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .context("image path has no file name")?;
    let (mask, legend, sidecar) = (format!("{stem}.png"), format!("{stem}.legend.txt"), format!("{stem}.json"));
    let names = queries.prompts().to_vec();
    palette::write_indexed_png(&seg.labels, names.len(), &out.join(&mask))?;
    palette::write_legend(&names, &out.join(&legend))?;
    let total = seg.labels.len() as f64;
    let mut counts = vec![0usize; names.len()];
    for &l in seg.labels.iter() {
        counts[l as usize] += 1;
    }
    let colors = palette::palette(names.len());
    let record = Sidecar {
        version: SIDECAR_VERSION,
        image: path.display().to_string(),
        width: img.width(),
        height: img.height(),
        mask,
        legend,
        prompts: names
            .iter()
            .zip(counts)
            .zip(colors)
            .map(|((p, n), c)| PromptCoverage {
                prompt: p.clone(),
                color: format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2]),
                coverage_percent: 100.0 * n as f64 / total,
            })
            .collect(),
        backbone_id: pipeline.encoder().backbone_id(),
        checkpoint_id,
        templates: cfg.templates,
        config: cfg.pipeline,
    };
    std::fs::write(out.join(&sidecar), serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(sidecar)
}

const IMAGE_EXTS: [&str; 3] = ["jpg", "jpeg", "png"];

fn run_train(cfg: CliConfig) -> Result<()> {
    let root = cfg.train.data.clone().context("no training data: pass --data")?;
    let split = cfg.train.split.clone().unwrap_or_else(|| "train".into());
    let masks = MaskDirectory::new(cfg.train.masks.clone().unwrap_or_else(|| root.join("masks")));
    if cfg.teacher.is_none() {
        bail!("training needs a DINO teacher: pass --teacher");
    }
    cfg.train.config.validate()?;
    let models = load_models(&cfg, false, true)?;
    let teacher = models.teacher.as_ref().expect("teacher requested");
    let split_file = root.join(format!("{split}.txt"));
    let ids = parse_prompt_lines(
        &std::fs::read_to_string(&split_file).with_context(|| format!("reading {}", split_file.display()))?,
    );
    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let path = IMAGE_EXTS
            .iter()
            .map(|e| root.join("images").join(format!("{id}.{e}")))
            .find(|p| p.is_file())
            .with_context(|| format!("no image for `{id}` under {}", root.join("images").display()))?;
        samples.push(TrainSample {
            image: image::open(&path)?.to_rgb8(),
            id,
        });
    }
    cfg.persist()?;
    let out = cfg.output_dir();
    let mut log = std::fs::File::create(out.join("metrics.ndjson"))?;
    let mut log_err = None;
    let inputs = TrainInputs {
        samples: &samples,
        student: &models.backbone,
        teacher,
        objectness: &masks as &dyn ObjectnessSource,
    };
    let ck = train(inputs, &cfg.train.config, &mut |r| {
        let line = r.metrics.to_ndjson();
        eprint!("{line}");
        if let Err(e) = log.write_all(line.as_bytes()) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let path = out.join("heads.safetensors");
    ck.save(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn eval(mut cfg: CliConfig, flags: &PipelineFlags, teacher_flag: bool) -> Result<()> {
    let kind = cfg.eval.dataset.context("no dataset: pass --dataset")?;
    let root = cfg.eval.root.clone().context("no dataset root: pass --data-root")?;
    let adapter = DatasetAdapter::open(kind, &root, cfg.eval.split.as_deref())?;
    let masks = cfg.eval.masks.clone();
    resolve_pipeline(&mut cfg, flags, teacher_flag, adapter.has_background, masks.is_some())?;
    let models = load_models(
        &cfg,
        cfg.pipeline.needs_heads(),
        cfg.pipeline.pooling == PoolingSource::Teacher,
    )?;
    cfg.persist()?;
    let queries = models.backbone.encode_text_queries(&adapter.class_names, cfg.templates)?;
    let mut pipeline = Pipeline::new(&models.backbone, cfg.pipeline);
    if let Some(ck) = &models.checkpoint {
        pipeline = pipeline.with_heads(&ck.heads);
    }
    if let Some(t) = &models.teacher {
        pipeline = pipeline.with_teacher(t);
    }
    let mask_dir = masks.map(MaskDirectory::new);
    let opts = EvalOptions {
        sliding: cfg.eval.sliding,
        objectness: mask_dir.as_ref().map(|m| m as &dyn ObjectnessSource),
        config_hash: config_hash(&cfg),
    };
    let report = evaluate_dataset(&adapter, &pipeline, &queries, &opts)?;
    let path = cfg.output_dir().join(format!("eval_{}.json", report.dataset));
    std::fs::write(&path, report.to_json() + "\n")?;
    print!("{}", report.to_table());
    println!("{}", path.display());
    Ok(())
}

fn export(mut cfg: CliConfig, out: Option<PathBuf>) -> Result<()> {
    let src = cfg.checkpoint.clone().context("no checkpoint: pass --checkpoint")?;
    let ck = Checkpoint::load(resolve_weights(&src))?;
    if cfg.output_dir.is_none() {
        // Keep the resolved config next to the exported file.
        cfg.output_dir = out.as_deref().and_then(Path::parent).map(Path::to_path_buf);
    }
    cfg.persist()?;
    let out = out.unwrap_or_else(|| cfg.output_dir().join("heads_f32.safetensors"));
    std::fs::write(&out, ck.export_bytes()?)?;
    println!("{}", out.display());
    Ok(())
}

fn serve(cfg: CliConfig) -> Result<()> {
    cfg.validate()?;
    cfg.persist()?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&cfg.serve.addr)
            .await
            .with_context(|| format!("binding {}", cfg.serve.addr))?;
        println!("listening on http://{}", listener.local_addr()?);
        std::io::stdout().flush()?;
        let mut service = cfg.serve.service.clone();
        service.pipeline = cfg.pipeline;
        service.template_set = cfg.templates;
        let state = AppState::loading(service);
        let loader = state.clone();
        tokio::task::spawn_blocking(move || {
            let loaded = load_models(&cfg, true, true).and_then(|m| Ok(Model::new(m.backbone, m.checkpoint, m.teacher)?));
            match loaded {
                Ok(m) => {
                    loader.set_model(m);
                    eprintln!("model loaded");
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    std::process::exit(1);
                }
            }
        });
        dinoiser_service::serve(listener, state).await?;
        Ok(())
    })
}
