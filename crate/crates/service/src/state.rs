//! Loaded model, service settings and shared handler state.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use dinoiser_core::denoiser::pipeline::{PipelineConfig, PoolingSource};
use dinoiser_core::denoiser::Heads;
use dinoiser_core::eval::config_hash;
use dinoiser_core::featurizer::{encode_text_queries, BackboneHandle, DenseEncoder, TextQuerySet};
use dinoiser_core::teachers::DinoTeacher;
use dinoiser_core::templates::TemplateSet;
use dinoiser_core::training::Checkpoint;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::session::SessionStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub max_upload_bytes: usize,
    pub session_ttl_secs: u64,
    pub max_sessions: usize,
    pub template_set: TemplateSet,
    /// Defaults for requests that leave gamma/delta unset.
    pub pipeline: PipelineConfig,
    /// Allowed CORS origin; any origin when unset.
    pub cors_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_upload_bytes: 16 << 20,
            session_ttl_secs: 900,
            max_sessions: 64,
            template_set: TemplateSet::default(),
            pipeline: PipelineConfig::default(),
            cors_origin: None,
        }
    }
}

/// Frozen weights shared read-only by every request.
pub struct Model {
    backbone: BackboneHandle,
    heads: Option<Heads>,
    checkpoint_id: Option<String>,
    teacher: Option<DinoTeacher>,
    text_cache: Mutex<HashMap<(String, String), Array1<f64>>>,
}

impl Model {
    pub fn new(
        backbone: BackboneHandle,
        checkpoint: Option<Checkpoint>,
        teacher: Option<DinoTeacher>,
    ) -> dinoiser_core::Result<Self> {
        let (heads, checkpoint_id) = match checkpoint {
            Some(ck) => {
                ck.check_tap(backbone.tap_layer(), false)?;
                let id = ck.id()?;
                (Some(ck.heads), Some(id))
            }
            None => (None, None),
        };
        Ok(Self {
            backbone,
            heads,
            checkpoint_id,
            teacher,
            text_cache: Mutex::default(),
        })
    }

    pub fn backbone(&self) -> &BackboneHandle {
        &self.backbone
    }

    pub fn heads(&self) -> Option<&Heads> {
        self.heads.as_ref()
    }

    pub fn teacher(&self) -> Option<&DinoTeacher> {
        self.teacher.as_ref()
    }

    pub fn checkpoint_id(&self) -> Option<&str> {
        self.checkpoint_id.as_deref()
    }

    /// Image forward passes run so far.
    pub fn backbone_passes(&self) -> u64 {
        self.backbone.forward_passes()
    }

    /// Pooling used when a request does not name one.
    pub fn default_pooling(&self) -> PoolingSource {
        if self.heads.is_some() {
            PoolingSource::Learned
        } else if self.teacher.is_some() {
            PoolingSource::Teacher
        } else {
            PoolingSource::None
        }
    }

    /// Text queries for `prompts`, embedding each prompt at most once per
    /// template set over the model's lifetime.
    pub fn queries(&self, prompts: &[String], templates: TemplateSet) -> dinoiser_core::Result<TextQuerySet> {
        let key = |p: &str| (p.trim().to_string(), format!("{templates:?}"));
        let missing: Vec<String> = {
            let cache = self.text_cache.lock().expect("text cache poisoned");
            prompts.iter().filter(|p| !cache.contains_key(&key(p))).cloned().collect()
        };
        let mut fresh = Vec::with_capacity(missing.len());
        for p in &missing {
            let q = encode_text_queries(&self.backbone, std::slice::from_ref(p), templates)?;
            fresh.push((key(p), q.embeddings().row(0).to_owned()));
        }
        let mut cache = self.text_cache.lock().expect("text cache poisoned");
        cache.extend(fresh);
        let dim = self.backbone.proj_dim();
        let mut emb = Array2::<f64>::zeros((prompts.len(), dim));
        for (i, p) in prompts.iter().enumerate() {
            emb.row_mut(i).assign(&cache[&key(p)]);
        }
        drop(cache);
        TextQuerySet::new(prompts.iter().map(|p| p.trim().to_string()).collect(), emb, templates)
    }
}

struct Inner {
    config: ServiceConfig,
    config_hash: String,
    model: OnceLock<Arc<Model>>,
    sessions: SessionStore,
}

/// Cheap to clone; handed to every handler.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    /// State with no model yet: health reports 503 until [`AppState::set_model`].
    pub fn loading(config: ServiceConfig) -> Self {
        let sessions = SessionStore::new(Duration::from_secs(config.session_ttl_secs), config.max_sessions);
        Self {
            inner: Arc::new(Inner {
                config_hash: config_hash(&config),
                config,
                model: OnceLock::new(),
                sessions,
            }),
        }
    }

    pub fn ready(config: ServiceConfig, model: Model) -> Self {
        let s = Self::loading(config);
        s.set_model(model);
        s
    }

    /// Install the model once loading finishes. Later calls are ignored.
    pub fn set_model(&self, model: Model) {
        let _ = self.inner.model.set(Arc::new(model));
    }

    pub fn model(&self) -> Option<Arc<Model>> {
        self.inner.model.get().cloned()
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    pub fn config_hash(&self) -> &str {
        &self.inner.config_hash
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.inner.sessions
    }
}
