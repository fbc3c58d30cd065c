//! Environment configuration and provider construction.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use editgate_core::editors::{EditorKind, Models};
use editgate_core::embedding::{EmbeddingProvider, HashEmbedder, RemoteEmbedder};
use editgate_core::metrics::{NliProvider, RemoteNli, SubstringNli};
use editgate_core::model::{HttpModel, ModelRef, ModelRole, ScriptSpec, ScriptedModel, TextModel};
use editgate_core::{Error, Result};
use serde::Deserialize;

pub const DEFAULT_EMBED_DIM: usize = 384;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Endpoint {
    pub url: String,
    pub key: Option<String>,
    pub model: String,
}

/// Everything read from `EG_*` variables.
#[derive(Clone, Debug, PartialEq)]
pub struct GatewayConfig {
    pub base: Option<Endpoint>,
    pub post_editor: Option<Endpoint>,
    pub augmenter: Option<Endpoint>,
    pub embed_url: Option<String>,
    pub embed_dim: usize,
    pub nli_url: Option<String>,
    pub memory_path: Option<PathBuf>,
    pub editor: EditorKind,
    pub admin_token: Option<String>,
}

impl GatewayConfig {
    pub fn from_env() -> Result<Self> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    /// Reads settings through `get`; empty values count as unset.
    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let get = |k: &str| get(k).filter(|v| !v.trim().is_empty());
        let endpoint = |prefix: &str, default_model: &str| {
            get(&format!("EG_{prefix}_URL")).map(|url| Endpoint {
                url,
                key: get(&format!("EG_{prefix}_KEY")),
                model: get(&format!("EG_{prefix}_MODEL")).unwrap_or_else(|| default_model.to_owned()),
            })
        };
        let editor = match get("EG_EDITOR") {
            Some(v) => v.parse()?,
            None => EditorKind::PostEdit,
        };
        let embed_dim = match get("EG_EMBED_DIM") {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("EG_EMBED_DIM `{v}` is not a positive integer")))?,
            None => DEFAULT_EMBED_DIM,
        };
        Ok(Self {
            base: endpoint("BASE", "gpt-3.5-turbo"),
            post_editor: endpoint("POSTEDITOR", "post-editor"),
            augmenter: endpoint("AUGMENTER", "gpt-4"),
            embed_url: get("EG_EMBED_URL"),
            embed_dim,
            nli_url: get("EG_NLI_URL"),
            memory_path: get("EG_MEMORY_PATH").map(PathBuf::from),
            editor,
            admin_token: get("EG_ADMIN_TOKEN"),
        })
    }
}

/// Offline stand-ins for every model role, loaded from a JSON file.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptFile {
    #[serde(default)]
    pub base: Option<ScriptSpec>,
    #[serde(default)]
    pub post_editor: Option<ScriptSpec>,
    #[serde(default)]
    pub augmenter: Option<ScriptSpec>,
    #[serde(default)]
    pub surrogate: Option<ScriptSpec>,
}

impl ScriptFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Constructed providers.
#[derive(Clone)]
pub struct Providers {
    pub base: Option<Arc<dyn TextModel>>,
    pub post_editor: Option<Arc<dyn TextModel>>,
    pub augmenter: Option<Arc<dyn TextModel>>,
    pub surrogate: Option<Arc<dyn TextModel>>,
    pub embedder: Arc<dyn EmbeddingProvider>,
    pub nli: Arc<dyn NliProvider>,
}

fn http(role: ModelRole, ep: &Endpoint) -> Result<Arc<dyn TextModel>> {
    let cfg = ModelRef::new(role, &ep.url, &ep.model).with_api_key(ep.key.clone());
    cfg.validate()?;
    Ok(Arc::new(HttpModel::new(cfg)?))
}

impl Providers {
    /// Scripted models take precedence over configured endpoints.
    pub fn build(config: &GatewayConfig, script: Option<&ScriptFile>) -> Result<Self> {
        let pick = |spec: Option<&ScriptSpec>, name: &str, role: ModelRole, ep: Option<&Endpoint>| {
            match (spec, ep) {
                (Some(spec), _) => Ok(Some(Arc::new(ScriptedModel::from_spec(name, spec)) as Arc<dyn TextModel>)),
                (None, Some(ep)) => http(role, ep).map(Some),
                (None, None) => Ok(None),
            }
        };
        let script = script.cloned().unwrap_or_default();
        let post_editor = pick(
            script.post_editor.as_ref(),
            "scripted-post-editor",
            ModelRole::PostEditor,
            config.post_editor.as_ref(),
        )?;
        // The surrogate shares the post-editor endpoint unless scripted apart.
        let surrogate = match script.surrogate.as_ref() {
            Some(spec) => Some(Arc::new(ScriptedModel::from_spec("scripted-surrogate", spec)) as Arc<dyn TextModel>),
            None => match config.post_editor.as_ref() {
                Some(ep) if script.post_editor.is_none() => Some(http(ModelRole::Surrogate, ep)?),
                _ => post_editor.clone(),
            },
        };
        let embedder: Arc<dyn EmbeddingProvider> = match &config.embed_url {
            Some(url) => Arc::new(RemoteEmbedder::new(url, None, config.embed_dim)?),
            None => Arc::new(HashEmbedder::new(config.embed_dim)),
        };
        let nli: Arc<dyn NliProvider> = match &config.nli_url {
            Some(url) => Arc::new(RemoteNli::new(url, None)?),
            None => Arc::new(SubstringNli),
        };
        Ok(Self {
            base: pick(script.base.as_ref(), "scripted-base", ModelRole::Base, config.base.as_ref())?,
            post_editor,
            augmenter: pick(
                script.augmenter.as_ref(),
                "scripted-augmenter",
                ModelRole::Augmenter,
                config.augmenter.as_ref(),
            )?,
            surrogate,
            embedder,
            nli,
        })
    }

    pub fn base(&self) -> Result<Arc<dyn TextModel>> {
        self.base
            .clone()
            .ok_or_else(|| Error::Config("no base model: set EG_BASE_URL or pass --script".into()))
    }

    pub fn augmenter(&self) -> Result<Arc<dyn TextModel>> {
        self.augmenter
            .clone()
            .ok_or_else(|| Error::Config("no augmenter: set EG_AUGMENTER_URL or pass --script".into()))
    }

    pub fn models(&self) -> Result<Models> {
        Ok(Models {
            base: self.base()?,
            post_editor: self.post_editor.clone(),
            surrogate: self.surrogate.clone(),
        })
    }

    /// Remote endpoints that must answer for `editor` to work.
    pub fn required_urls(config: &GatewayConfig, editor: EditorKind) -> BTreeMap<&'static str, String> {
        let mut urls = BTreeMap::new();
        if let Some(ep) = &config.base {
            urls.insert("EG_BASE_URL", ep.url.clone());
        }
        if matches!(editor, EditorKind::PostEdit | EditorKind::Serac) {
            if let Some(ep) = &config.post_editor {
                urls.insert("EG_POSTEDITOR_URL", ep.url.clone());
            }
        }
        if let Some(url) = &config.embed_url {
            urls.insert("EG_EMBED_URL", url.clone());
        }
        urls
    }
}
