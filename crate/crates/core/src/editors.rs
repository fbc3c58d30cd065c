//! Editor strategies behind one contract.
//!
//! | kind        | base model sees          | edit knowledge goes to |
//! |-------------|--------------------------|------------------------|
//! | postedit    | the query only           | post-editor            |
//! | prompt      | fact + query             | base                   |
//! | ike         | demos + fact + query     | base                   |
//! | serac       | the query (out of scope) | surrogate              |
//! | passthrough | the query only           | nobody                 |

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::embedding::{dot, EmbeddingVector};
use crate::error::{Error, Result};
use crate::memory::{EditMemory, RetrievalResult};
use crate::model::TextModel;
use crate::templates::{is_retain, Demo, DemoLibrary, TemplateId, TemplateSet, DEFAULT_IKE_DEMOS};
use crate::types::ResponsePair;

pub const DEFAULT_SERAC_THRESHOLD: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditorKind {
    PostEdit,
    Prompt,
    Ike,
    Serac,
    Passthrough,
}

impl EditorKind {
    pub const ALL: [EditorKind; 5] = [
        EditorKind::PostEdit,
        EditorKind::Prompt,
        EditorKind::Ike,
        EditorKind::Serac,
        EditorKind::Passthrough,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EditorKind::PostEdit => "postedit",
            EditorKind::Prompt => "prompt",
            EditorKind::Ike => "ike",
            EditorKind::Serac => "serac",
            EditorKind::Passthrough => "passthrough",
        }
    }
}

impl fmt::Display for EditorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EditorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EditorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim().to_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown editor `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditorConfig {
    pub kind: EditorKind,
    /// In-scope iff retrieval score >= threshold.
    pub serac_threshold: f64,
    pub ike_demos: usize,
}

impl EditorConfig {
    pub fn new(kind: EditorKind) -> Self {
        Self {
            kind,
            serac_threshold: DEFAULT_SERAC_THRESHOLD,
            ike_demos: DEFAULT_IKE_DEMOS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.serac_threshold) {
            return Err(Error::Config(format!(
                "serac threshold must be in [0, 1], got {}",
                self.serac_threshold
            )));
        }
        if self.kind == EditorKind::Ike && self.ike_demos == 0 {
            return Err(Error::Config("ike demo count must be positive".into()));
        }
        Ok(())
    }
}

impl Default for EditorConfig {
    fn default() -> Self {
        Self::new(EditorKind::PostEdit)
    }
}

/// Where the original response in a decision came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OriginalSource {
    Supplied,
    Generated,
    /// The editor answered without a plain base call.
    Unavailable,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub editor: Option<EditorKind>,
    pub memory_size: usize,
    pub retrieval_score: Option<f64>,
    pub retrieval_index: Option<usize>,
    pub template: Option<TemplateId>,
    pub retain: Option<bool>,
    pub in_scope: Option<bool>,
    pub demos_used: Option<usize>,
    pub demo_shortfall: Option<usize>,
    pub original_source: Option<OriginalSource>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditorDecision {
    pub pair: ResponsePair,
    pub trace: Trace,
}

/// Model handles used by editors. Only the ones an editor needs must be set.
#[derive(Clone)]
pub struct Models {
    pub base: Arc<dyn TextModel>,
    pub post_editor: Option<Arc<dyn TextModel>>,
    pub surrogate: Option<Arc<dyn TextModel>>,
}

impl Models {
    pub fn new(base: Arc<dyn TextModel>) -> Self {
        Self {
            base,
            post_editor: None,
            surrogate: None,
        }
    }

    pub fn with_post_editor(mut self, m: Arc<dyn TextModel>) -> Self {
        self.post_editor = Some(m);
        self
    }

    pub fn with_surrogate(mut self, m: Arc<dyn TextModel>) -> Self {
        self.surrogate = Some(m);
        self
    }
}

/// Demonstrations with precomputed query embeddings for nearest-first order.
#[derive(Clone, Debug, Default)]
pub struct DemoIndex {
    demos: Vec<Demo>,
    vectors: Option<Vec<EmbeddingVector>>,
}

impl DemoIndex {
    /// Keeps library order.
    pub fn unranked(library: DemoLibrary) -> Self {
        Self {
            demos: library.demos,
            vectors: None,
        }
    }

    pub async fn ranked(
        library: DemoLibrary,
        provider: &dyn crate::embedding::EmbeddingProvider,
    ) -> Result<Self> {
        let queries: Vec<String> = library.demos.iter().map(|d| d.query.clone()).collect();
        let vectors = provider.embed_batch(&queries).await?;
        Ok(Self {
            demos: library.demos,
            vectors: Some(vectors),
        })
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    /// Up to `count` demos not built from `exclude_edit`, most similar first.
    pub fn select(
        &self,
        count: usize,
        query_vector: Option<&EmbeddingVector>,
        exclude_edit: u64,
    ) -> Result<Vec<Demo>> {
        let mut candidates: Vec<(usize, f64)> = Vec::with_capacity(self.demos.len());
        for (i, demo) in self.demos.iter().enumerate() {
            if demo.edit.edit_id == exclude_edit {
                continue;
            }
            let score = match (&self.vectors, query_vector) {
                (Some(vs), Some(q)) => dot(q, &vs[i])?,
                _ => 0.0,
            };
            candidates.push((i, score));
        }
        // Stable sort keeps library order between equal scores.
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
        Ok(candidates
            .into_iter()
            .take(count)
            .map(|(i, _)| self.demos[i].clone())
            .collect())
    }
}

/// One editor bound to a memory and model set.
#[derive(Clone)]
pub struct Editor {
    config: EditorConfig,
    memory: Arc<EditMemory>,
    models: Models,
    templates: Arc<TemplateSet>,
    demos: Arc<DemoIndex>,
}

impl Editor {
    pub fn new(config: EditorConfig, memory: Arc<EditMemory>, models: Models) -> Result<Self> {
        config.validate()?;
        match config.kind {
            EditorKind::PostEdit if models.post_editor.is_none() => {
                return Err(Error::Config("postedit requires a post-editor model".into()));
            }
            EditorKind::Serac if models.surrogate.is_none() => {
                return Err(Error::Config("serac requires a surrogate model".into()));
            }
            _ => {}
        }
        Ok(Self {
            config,
            memory,
            models,
            templates: Arc::new(TemplateSet::default()),
            demos: Arc::new(DemoIndex::default()),
        })
    }

    pub fn with_templates(mut self, templates: Arc<TemplateSet>) -> Self {
        self.templates = templates;
        self
    }

    pub fn with_demos(mut self, demos: Arc<DemoIndex>) -> Self {
        self.demos = demos;
        self
    }

    pub fn config(&self) -> &EditorConfig {
        &self.config
    }

    pub fn memory(&self) -> &Arc<EditMemory> {
        &self.memory
    }

    /// Answers `query`. `original`, when known (e.g. shipped with a test set),
    /// is used instead of asking the base model.
    pub async fn respond(&self, query: &str, original: Option<&str>) -> Result<EditorDecision> {
        let started = Instant::now();
        let mut decision = match self.config.kind {
            EditorKind::PostEdit => self.postedit_respond(query, original).await?,
            EditorKind::Prompt => self.prompt_respond(query, original).await?,
            EditorKind::Ike => self.ike_respond(query, original).await?,
            EditorKind::Serac => self.serac_respond(query, original).await?,
            EditorKind::Passthrough => self.passthrough_respond(query, original).await?,
        };
        decision.trace.editor = Some(self.config.kind);
        decision.trace.memory_size = self.memory.len();
        decision.pair.latency_ms = started.elapsed().as_millis() as u64;
        Ok(decision)
    }

    async fn original(&self, query: &str, supplied: Option<&str>) -> Result<(String, OriginalSource)> {
        match supplied {
            Some(o) => Ok((o.to_owned(), OriginalSource::Supplied)),
            None => Ok((
                self.models.base.generate(query).await?.text,
                OriginalSource::Generated,
            )),
        }
    }

    fn retrieval_trace(hit: &RetrievalResult) -> Trace {
        Trace {
            retrieval_score: Some(hit.score),
            retrieval_index: Some(hit.index),
            ..Trace::default()
        }
    }

    /// Base answer, top-1 edit, post-editor rewrite or retain.
    pub async fn postedit_respond(
        &self,
        query: &str,
        original: Option<&str>,
    ) -> Result<EditorDecision> {
        let post_editor = self
            .models
            .post_editor
            .as_ref()
            .ok_or_else(|| Error::Config("postedit requires a post-editor model".into()))?;
        let (y_o, source) = self.original(query, original).await?;
        let hit = self.memory.retrieve(query).await?;
        let mut trace = Self::retrieval_trace(&hit);
        trace.original_source = Some(source);

        let outcome = match self.templates.render_edit(&hit.edit, query, &y_o) {
            Ok(prompt) => {
                trace.template = Some(prompt.template_id);
                post_editor.generate(&prompt.text).await.map(|g| g.text)
            }
            Err(e) => Err(e),
        };
        let pair = match outcome {
            Ok(out) if is_retain(&out) => {
                trace.retain = Some(true);
                ResponsePair::unedited(y_o, Some(hit.edit.edit_id))
            }
            Ok(out) => {
                trace.retain = Some(false);
                ResponsePair {
                    original: y_o,
                    edited: out,
                    was_edited: true,
                    matched_edit_id: Some(hit.edit.edit_id),
                    latency_ms: 0,
                }
            }
            Err(e) => {
                // Serve the upstream answer rather than fail the request.
                tracing::warn!(error = %e, "post-editor failed; returning original response");
                trace.error = Some(format!("{}: {e}", e.kind()));
                ResponsePair::unedited(y_o, Some(hit.edit.edit_id))
            }
        };
        Ok(EditorDecision { pair, trace })
    }

    async fn base_with_prompt(
        &self,
        prompt: crate::templates::RenderedPrompt,
        hit: &RetrievalResult,
        mut trace: Trace,
        original: Option<&str>,
    ) -> Result<EditorDecision> {
        trace.template = Some(prompt.template_id);
        let out = self.models.base.generate(&prompt.text).await?.text;
        trace.original_source = Some(if original.is_some() {
            OriginalSource::Supplied
        } else {
            OriginalSource::Unavailable
        });
        Ok(EditorDecision {
            pair: ResponsePair {
                original: original.unwrap_or_default().to_owned(),
                edited: out,
                was_edited: true,
                matched_edit_id: Some(hit.edit.edit_id),
                latency_ms: 0,
            },
            trace,
        })
    }

    /// Fact sentence plus query, one base call.
    pub async fn prompt_respond(
        &self,
        query: &str,
        original: Option<&str>,
    ) -> Result<EditorDecision> {
        let hit = self.memory.retrieve(query).await?;
        let prompt = self.templates.render_prompt_baseline(&hit.edit, query)?;
        self.base_with_prompt(prompt, &hit, Self::retrieval_trace(&hit), original)
            .await
    }

    /// In-context demonstrations plus fact and query, one base call.
    pub async fn ike_respond(&self, query: &str, original: Option<&str>) -> Result<EditorDecision> {
        if self.demos.is_empty() {
            return Err(Error::EmptyDemoLibrary);
        }
        if self.memory.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let q = self.memory.provider().embed(query).await?;
        let hit = self.memory.retrieve_vector(&q)?;
        let demos = self
            .demos
            .select(self.config.ike_demos, Some(&q), hit.edit.edit_id)?;
        let mut trace = Self::retrieval_trace(&hit);
        trace.demos_used = Some(demos.len());
        if demos.len() < self.config.ike_demos {
            trace.demo_shortfall = Some(self.config.ike_demos - demos.len());
        }
        let prompt = self.templates.render_ike(&demos, &hit.edit, query)?;
        self.base_with_prompt(prompt, &hit, trace, original).await
    }

    /// Similarity-gated surrogate; out-of-scope queries defer to the base model.
    pub async fn serac_respond(
        &self,
        query: &str,
        original: Option<&str>,
    ) -> Result<EditorDecision> {
        let surrogate = self
            .models
            .surrogate
            .as_ref()
            .ok_or_else(|| Error::Config("serac requires a surrogate model".into()))?;
        let hit = self.memory.retrieve(query).await?;
        let mut trace = Self::retrieval_trace(&hit);
        let in_scope = hit.score >= self.config.serac_threshold;
        trace.in_scope = Some(in_scope);
        if !in_scope {
            let (y_o, source) = self.original(query, original).await?;
            trace.original_source = Some(source);
            return Ok(EditorDecision {
                pair: ResponsePair::unedited(y_o, None),
                trace,
            });
        }
        let prompt = self.templates.render_surrogate(&hit.edit, query)?;
        trace.template = Some(prompt.template_id);
        let out = surrogate.generate(&prompt.text).await?.text;
        trace.original_source = Some(if original.is_some() {
            OriginalSource::Supplied
        } else {
            OriginalSource::Unavailable
        });
        Ok(EditorDecision {
            pair: ResponsePair {
                original: original.unwrap_or_default().to_owned(),
                edited: out,
                was_edited: true,
                matched_edit_id: Some(hit.edit.edit_id),
                latency_ms: 0,
            },
            trace,
        })
    }

    pub async fn passthrough_respond(
        &self,
        query: &str,
        original: Option<&str>,
    ) -> Result<EditorDecision> {
        let (y_o, source) = self.original(query, original).await?;
        Ok(EditorDecision {
            pair: ResponsePair::unedited(y_o, None),
            trace: Trace {
                original_source: Some(source),
                ..Trace::default()
            },
        })
    }
}
