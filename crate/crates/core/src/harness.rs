//! Experiment runner: editors over a dataset, scored and aggregated.
//!
//! Each record is evaluated against its own memory holding the record's
//! edit (plus sampled distractors in scaling runs, or a copy of a configured
//! background memory), so no run ever mutates shared state.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::augment::RecordFailure;
use crate::editors::{DemoIndex, Editor, EditorConfig, EditorKind, Models, OriginalSource, Trace};
use crate::embedding::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::memory::{EditMemory, KeyPolicy};
use crate::metrics::{aggregate, round2, EvalScores, Metric, NliProvider, Report, Scorer};
use crate::templates::TemplateSet;
use crate::types::{Edit, EditId, QueryRecord, QueryType};

pub const DEFAULT_SCALING_SIZES: [usize; 4] = [1, 10, 100, 1000];

/// Providers shared by every run.
#[derive(Clone)]
pub struct EvalContext {
    pub models: Models,
    pub embedder: Arc<dyn EmbeddingProvider>,
    pub key_policy: KeyPolicy,
    pub nli: Arc<dyn NliProvider>,
    pub templates: Arc<TemplateSet>,
    pub demos: Arc<DemoIndex>,
}

impl EvalContext {
    pub fn new(
        models: Models,
        embedder: Arc<dyn EmbeddingProvider>,
        nli: Arc<dyn NliProvider>,
    ) -> Self {
        Self {
            models,
            embedder,
            key_policy: KeyPolicy::default(),
            nli,
            templates: Arc::new(TemplateSet::builtin().clone()),
            demos: Arc::new(DemoIndex::default()),
        }
    }

    pub fn with_demos(mut self, demos: Arc<DemoIndex>) -> Self {
        self.demos = demos;
        self
    }
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub editor: EditorConfig,
    /// Records evaluated at once.
    pub concurrency: usize,
    /// Memory size per record; `None` holds only the record's edit.
    pub memory_size: Option<usize>,
    pub seed: u64,
    /// Copied per record and extended with the record's edit.
    pub background: Option<Arc<EditMemory>>,
}

impl EvalConfig {
    pub fn new(editor: EditorConfig) -> Self {
        Self {
            editor,
            concurrency: 8,
            memory_size: None,
            seed: 0,
            background: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordTrace {
    pub index: usize,
    pub edit_id: EditId,
    pub query: String,
    pub query_type: QueryType,
    pub original_source: OriginalSource,
    pub original: String,
    pub edited: String,
    pub was_edited: bool,
    pub matched_edit_id: Option<EditId>,
    pub scores: EvalScores,
    pub editor_trace: Trace,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OriginalSources {
    pub dataset: usize,
    pub generated: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRun {
    pub editor: EditorKind,
    pub report: Report,
    pub original_sources: OriginalSources,
    pub traces: Vec<RecordTrace>,
    pub quarantine: Vec<RecordFailure>,
}

/// Machine-readable summary written as `report.json`.
#[derive(Serialize)]
struct ReportFile<'a> {
    editor: EditorKind,
    report: &'a Report,
    original_sources: OriginalSources,
    evaluated: usize,
    quarantined: usize,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

impl EvalRun {
    pub fn report_json(&self) -> Result<String> {
        let file = ReportFile {
            editor: self.editor,
            report: &self.report,
            original_sources: self.original_sources,
            evaluated: self.traces.len(),
            quarantined: self.quarantine.len(),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    /// Writes `report.json`, `report.tsv`, `traces.jsonl` and `quarantine.jsonl`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("report.json"), &self.report_json()?)?;
        write(&dir.join("report.tsv"), &self.report.to_tsv())?;
        write(&dir.join("traces.jsonl"), &jsonl(&self.traces)?)?;
        write(&dir.join("quarantine.jsonl"), &jsonl(&self.quarantine)?)?;
        Ok(())
    }
}

/// Distinct edits of a dataset in first-seen order, embedded once.
pub async fn edit_pool(dataset: &[QueryRecord], ctx: &EvalContext) -> Result<EditMemory> {
    let mut seen = BTreeMap::new();
    let mut edits: Vec<Edit> = Vec::new();
    for r in dataset {
        if seen.insert(r.edit.edit_id, ()).is_none() {
            edits.push(r.edit.clone());
        }
    }
    let pool = EditMemory::new(ctx.embedder.clone(), ctx.key_policy);
    pool.extend(edits).await?;
    Ok(pool)
}

fn memory_for(
    record: &QueryRecord,
    pool: &EditMemory,
    config: &EvalConfig,
) -> Result<EditMemory> {
    let id = record.edit.edit_id;
    let own = pool
        .entry(id)
        .ok_or_else(|| Error::Precondition(format!("edit {id} missing from pool")))?;
    if let Some(size) = config.memory_size {
        return pool.subset(size, config.seed, Some(id));
    }
    let memory = match &config.background {
        Some(bg) => bg.fork(),
        None => EditMemory::new(pool.provider().clone(), pool.key_policy()),
    };
    memory.insert_entry(own);
    Ok(memory)
}

async fn eval_record(
    index: usize,
    record: &QueryRecord,
    pool: &EditMemory,
    ctx: &EvalContext,
    config: &EvalConfig,
) -> Result<RecordTrace> {
    let memory = Arc::new(memory_for(record, pool, config)?);
    let (original, original_source) = match &record.original_response {
        Some(o) => (o.clone(), OriginalSource::Supplied),
        None => (
            ctx.models.base.generate(&record.query).await?.text,
            OriginalSource::Generated,
        ),
    };
    let editor = Editor::new(config.editor, memory, ctx.models.clone())?
        .with_templates(ctx.templates.clone())
        .with_demos(ctx.demos.clone());
    let decision = editor.respond(&record.query, Some(&original)).await?;
    let scorer = Scorer {
        nli: ctx.nli.as_ref(),
        embedder: ctx.embedder.as_ref(),
    };
    let scores = scorer
        .score(
            &record.edit,
            record.query_type,
            &record.query,
            &original,
            &decision.pair.edited,
        )
        .await?;
    Ok(RecordTrace {
        index,
        edit_id: record.edit.edit_id,
        query: record.query.clone(),
        query_type: record.query_type,
        original_source,
        original,
        edited: decision.pair.edited,
        was_edited: decision.pair.was_edited,
        matched_edit_id: decision.pair.matched_edit_id,
        scores,
        editor_trace: decision.trace,
    })
}

/// Evaluates one editor over `dataset`; failing records are quarantined.
pub async fn run_eval(
    dataset: &[QueryRecord],
    ctx: &EvalContext,
    config: &EvalConfig,
) -> Result<EvalRun> {
    let pool = edit_pool(dataset, ctx).await?;
    run_eval_with_pool(dataset, &pool, ctx, config).await
}

async fn run_eval_with_pool(
    dataset: &[QueryRecord],
    pool: &EditMemory,
    ctx: &EvalContext,
    config: &EvalConfig,
) -> Result<EvalRun> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput);
    }
    config.editor.validate()?;
    if let Some(size) = config.memory_size {
        if size == 0 || size > pool.len() {
            return Err(Error::SizeOutOfRange {
                size,
                available: pool.len(),
            });
        }
    }
    let results: Vec<(usize, Result<RecordTrace>)> = stream::iter(
        dataset
            .iter()
            .enumerate()
            .map(|(i, r)| async move { (i, eval_record(i, r, pool, ctx, config).await) }),
    )
    .buffered(config.concurrency.max(1))
    .collect()
    .await;

    let mut traces = Vec::new();
    let mut quarantine = Vec::new();
    let mut sources = OriginalSources::default();
    for (index, result) in results {
        match result {
            Ok(t) => {
                match t.original_source {
                    OriginalSource::Generated => sources.generated += 1,
                    _ => sources.dataset += 1,
                }
                traces.push(t);
            }
            Err(e) => {
                tracing::warn!(index, error = %e, "record quarantined");
                quarantine.push(RecordFailure {
                    index,
                    edit_id: dataset[index].edit.edit_id,
                    error: format!("{}: {e}", e.kind()),
                });
            }
        }
    }
    if traces.is_empty() {
        return Err(Error::Precondition(format!(
            "all {} records failed; first: {}",
            quarantine.len(),
            quarantine[0].error
        )));
    }
    let scored: Vec<(QueryType, EvalScores)> =
        traces.iter().map(|t| (t.query_type, t.scores)).collect();
    Ok(EvalRun {
        editor: config.editor.kind,
        report: aggregate(&scored)?,
        original_sources: sources,
        traces,
        quarantine,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingRow {
    pub size: usize,
    pub editing_score: Option<f64>,
    pub retention_score: Option<f64>,
    pub report: Report,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRun {
    pub rows: Vec<ScalingRow>,
    pub runs: Vec<EvalRun>,
}

impl ScalingRun {
    pub fn to_tsv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_owned(), |v| format!("{v:.2}"));
        let mut out = String::from("size\tediting\tretention\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                r.size,
                fmt(r.editing_score),
                fmt(r.retention_score)
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.rows)? + "\n")
    }

    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("scaling.json"), &self.to_json()?)?;
        write(&dir.join("scaling.tsv"), &self.to_tsv())?;
        for (row, run) in self.rows.iter().zip(&self.runs) {
            run.write_to_dir(dir.join(format!("size-{}", row.size)))?;
        }
        Ok(())
    }
}

/// Evaluates with memories of each size, always holding the record's own edit.
pub async fn run_memory_scaling(
    dataset: &[QueryRecord],
    ctx: &EvalContext,
    config: &EvalConfig,
    sizes: &[usize],
    seed: u64,
) -> Result<ScalingRun> {
    let pool = edit_pool(dataset, ctx).await?;
    if let Some(&size) = sizes.iter().find(|&&s| s == 0 || s > pool.len()) {
        return Err(Error::SizeOutOfRange {
            size,
            available: pool.len(),
        });
    }
    let mut rows = Vec::with_capacity(sizes.len());
    let mut runs = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let cfg = EvalConfig {
            memory_size: Some(size),
            seed,
            ..config.clone()
        };
        let run = run_eval_with_pool(dataset, &pool, ctx, &cfg).await?;
        rows.push(ScalingRow {
            size,
            editing_score: run.report.editing_score,
            retention_score: run.report.retention_score,
            report: run.report.clone(),
        });
        runs.push(run);
    }
    Ok(ScalingRun { rows, runs })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonGroup {
    pub editor: EditorKind,
    pub report: Option<Report>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub groups: Vec<ComparisonGroup>,
}

impl Comparison {
    /// One row group per editor; failed editors show NA cells.
    pub fn to_tsv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_owned(), |v| format!("{v:.2}"));
        let mut out = format!("editor\t{}\n", Report::HEADER);
        for g in &self.groups {
            match &g.report {
                Some(r) => {
                    for line in r.tsv_rows() {
                        out.push_str(&format!("{}\t{line}\n", g.editor));
                    }
                }
                None => {
                    for m in Metric::ALL {
                        out.push_str(&format!("{}\t{}\tNA\tNA\tNA\tNA\n", g.editor, m.as_str()));
                    }
                    out.push_str(&format!("{}\tEDITING\t\t\t\t{}\n", g.editor, fmt(None)));
                    out.push_str(&format!("{}\tRETENTION\t\t\t\t{}\n", g.editor, fmt(None)));
                }
            }
        }
        out
    }

    /// Retention score of `better` minus that of `worse`.
    pub fn retention_gap(&self, better: EditorKind, worse: EditorKind) -> Option<f64> {
        let get = |k: EditorKind| {
            self.groups
                .iter()
                .find(|g| g.editor == k)
                .and_then(|g| g.report.as_ref()?.retention_score)
        };
        Some(round2(get(better)? - get(worse)?))
    }
}

/// Runs each editor over the same dataset.
pub async fn compare_editors(
    dataset: &[QueryRecord],
    ctx: &EvalContext,
    kinds: &[EditorKind],
    config: &EvalConfig,
) -> Result<Comparison> {
    let pool = edit_pool(dataset, ctx).await?;
    let mut groups = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let cfg = EvalConfig {
            editor: EditorConfig { kind, ..config.editor },
            ..config.clone()
        };
        let outcome = run_eval_with_pool(dataset, &pool, ctx, &cfg).await;
        groups.push(match outcome {
            Ok(run) => ComparisonGroup {
                editor: kind,
                report: Some(run.report),
                error: None,
            },
            Err(e) => ComparisonGroup {
                editor: kind,
                report: None,
                error: Some(format!("{}: {e}", e.kind())),
            },
        });
    }
    Ok(Comparison { groups })
}
