//! Training-data pipeline: original responses, augmented edited responses,
//! TE/SE quality filter and SFT export.
//!
//! A run directory holds `originals.jsonl`, `edited.jsonl`, `kept.jsonl` and
//! `manifest.json`. Every stage resumes from what is already on disk and
//! leaves the directory untouched when there is nothing left to do.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::metrics::{se, te, KnowledgeText, NliProvider};
use crate::model::TextModel;
use crate::templates::{TemplateSet, RETAIN_TOKEN};
use crate::types::{parse_dataset_file, record_to_line, EditId, QueryRecord, Scope};

pub const ORIGINALS_FILE: &str = "originals.jsonl";
pub const EDITED_FILE: &str = "edited.jsonl";
pub const KEPT_FILE: &str = "kept.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterScores {
    pub te: f64,
    pub se: f64,
}

/// A record after filtering.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedRecord {
    pub record: QueryRecord,
    pub kept: bool,
    /// `None` for OOS records, which are never scored.
    pub filter_scores: Option<FilterScores>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFailure {
    pub index: usize,
    pub edit_id: EditId,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSummary {
    pub total: usize,
    /// Records completed by this run.
    pub processed: usize,
    /// Records already complete before this run.
    pub skipped: usize,
    pub model_calls: usize,
    pub failures: Vec<RecordFailure>,
}

impl StageSummary {
    fn absorb(&mut self, index: usize, edit_id: EditId, outcome: &Outcome) {
        match outcome {
            Outcome::Skipped => self.skipped += 1,
            Outcome::Done { called } => {
                self.processed += 1;
                self.model_calls += usize::from(*called);
            }
            Outcome::Failed(e) => {
                self.model_calls += usize::from(!matches!(e, Error::Precondition(_)));
                self.failures.push(RecordFailure {
                    index,
                    edit_id,
                    error: format!("{}: {e}", e.kind()),
                });
            }
        }
    }
}

enum Outcome {
    Skipped,
    Done { called: bool },
    Failed(Error),
}

async fn run_stage<'a, F, Fut>(
    records: Vec<QueryRecord>,
    concurrency: usize,
    step: F,
) -> (Vec<QueryRecord>, StageSummary)
where
    F: Fn(QueryRecord) -> Fut,
    Fut: std::future::Future<Output = (QueryRecord, Outcome)> + 'a,
{
    let total = records.len();
    // `buffered` yields in input order whatever the completion order.
    let results: Vec<(QueryRecord, Outcome)> = stream::iter(records.into_iter().map(step))
        .buffered(concurrency.max(1))
        .collect()
        .await;
    let mut summary = StageSummary {
        total,
        ..StageSummary::default()
    };
    let mut out = Vec::with_capacity(total);
    for (i, (record, outcome)) in results.into_iter().enumerate() {
        summary.absorb(i, record.edit.edit_id, &outcome);
        out.push(record);
    }
    (out, summary)
}

/// Fills `original_response` from the base model; filled records are kept as is.
pub async fn augment_original(
    records: Vec<QueryRecord>,
    base: &dyn TextModel,
    concurrency: usize,
) -> (Vec<QueryRecord>, StageSummary) {
    run_stage(records, concurrency, |mut record| async move {
        if record.original_response.is_some() {
            return (record, Outcome::Skipped);
        }
        match base.generate(&record.query).await {
            Ok(g) => {
                record.original_response = Some(g.text);
                (record, Outcome::Done { called: true })
            }
            Err(e) => (record, Outcome::Failed(e)),
        }
    })
    .await
}

/// Produces the post-editor target for one record. OOS targets are the
/// retain token and cost no model call.
pub async fn augment_edited_record(
    mut record: QueryRecord,
    augmenter: &dyn TextModel,
    templates: &TemplateSet,
) -> Result<QueryRecord> {
    if record.scope() == Scope::Oos {
        record.edited_response = Some(RETAIN_TOKEN.to_owned());
        return Ok(record);
    }
    let original = record
        .original_response
        .as_deref()
        .ok_or_else(|| Error::Precondition("record has no original_response".into()))?;
    let prompt = templates.render_aug(&record.edit, &record.query, original)?;
    record.edited_response = Some(augmenter.generate(&prompt.text).await?.text);
    Ok(record)
}

pub async fn augment_edited(
    records: Vec<QueryRecord>,
    augmenter: &dyn TextModel,
    templates: &TemplateSet,
    concurrency: usize,
) -> (Vec<QueryRecord>, StageSummary) {
    run_stage(records, concurrency, |record| async move {
        let done = match record.scope() {
            Scope::Oos => record.edited_response.as_deref() == Some(RETAIN_TOKEN),
            Scope::Ins => record.edited_response.is_some(),
        };
        if done {
            return (record, Outcome::Skipped);
        }
        let called = record.scope() == Scope::Ins;
        match augment_edited_record(record.clone(), augmenter, templates).await {
            Ok(r) => (r, Outcome::Done { called }),
            Err(e) => (record, Outcome::Failed(e)),
        }
    })
    .await
}

/// Keeps INS records whose edited response scores TE == 1 and SE == 1.
pub async fn filter_record(record: QueryRecord, nli: &dyn NliProvider) -> Result<AugmentedRecord> {
    if record.scope() == Scope::Oos {
        return Ok(AugmentedRecord {
            record,
            kept: true,
            filter_scores: None,
        });
    }
    let (original, edited) = record
        .responses()
        .ok_or_else(|| Error::Precondition("record lacks original or edited response".into()))?;
    let knowledge = KnowledgeText::new(&record.edit, &record.query, original);
    let scores = FilterScores {
        te: te(edited, Scope::Ins, &record.edit.old_object, &record.edit.new_object),
        se: se(Scope::Ins, &record.query, edited, &knowledge, nli).await?,
    };
    Ok(AugmentedRecord {
        kept: scores.te == 1.0 && scores.se == 1.0,
        filter_scores: Some(scores),
        record,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub total: usize,
    pub kept: usize,
    pub dropped: usize,
    pub failures: Vec<RecordFailure>,
}

pub async fn filter_records(
    records: Vec<QueryRecord>,
    nli: &dyn NliProvider,
    concurrency: usize,
) -> (Vec<AugmentedRecord>, FilterSummary) {
    let total = records.len();
    let results: Vec<(usize, EditId, Result<AugmentedRecord>)> =
        stream::iter(records.into_iter().enumerate().map(|(i, r)| async move {
            let id = r.edit.edit_id;
            (i, id, filter_record(r, nli).await)
        }))
        .buffered(concurrency.max(1))
        .collect()
        .await;
    let mut summary = FilterSummary {
        total,
        ..FilterSummary::default()
    };
    let mut out = Vec::with_capacity(total);
    for (index, edit_id, result) in results {
        match result {
            Ok(a) => {
                if a.kept {
                    summary.kept += 1;
                } else {
                    summary.dropped += 1;
                }
                out.push(a);
            }
            Err(e) => summary.failures.push(RecordFailure {
                index,
                edit_id,
                error: format!("{}: {e}", e.kind()),
            }),
        }
    }
    (out, summary)
}

fn kept_lines(records: &[AugmentedRecord]) -> (String, usize) {
    let mut out = String::new();
    let mut n = 0;
    for a in records.iter().filter(|a| a.kept) {
        out.push_str(&record_to_line(&a.record));
        out.push('\n');
        n += 1;
    }
    (out, n)
}

/// Writes kept records one JSON object per line; returns how many.
pub fn export_sft(records: &[AugmentedRecord], path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let (text, n) = kept_lines(records);
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Original,
    Edited,
    Filter,
    Export,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Stage::Original),
            "edited" => Ok(Stage::Edited),
            "filter" => Ok(Stage::Filter),
            "export" => Ok(Stage::Export),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

/// Result of one stage against a run directory.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: Stage,
    /// False when the directory already held this stage's output.
    pub changed: bool,
    pub summary: Value,
}

/// Drives the stages against a run directory.
pub struct Pipeline {
    dir: PathBuf,
    concurrency: usize,
    templates: TemplateSet,
}

impl Pipeline {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            concurrency: 8,
            templates: TemplateSet::builtin().clone(),
        }
    }

    pub fn with_concurrency(mut self, concurrency: usize) -> Self {
        self.concurrency = concurrency.max(1);
        self
    }

    pub fn with_templates(mut self, templates: TemplateSet) -> Self {
        self.templates = templates;
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn read(&self, name: &str) -> Result<Vec<QueryRecord>> {
        parse_dataset_file(self.path(name))
    }

    /// Writes `text` unless the file already holds it.
    fn write_if_changed(&self, name: &str, text: &str) -> Result<bool> {
        let path = self.path(name);
        if fs::read_to_string(&path).is_ok_and(|old| old == text) {
            return Ok(false);
        }
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(true)
    }

    pub fn manifest(&self) -> Result<Map<String, Value>> {
        let path = self.path(MANIFEST_FILE);
        match fs::read_to_string(&path) {
            Ok(text) => match serde_json::from_str(&text)? {
                Value::Object(m) => Ok(m),
                _ => Err(Error::Config(format!("{} is not an object", path.display()))),
            },
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Map::new()),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    fn record_stage(&self, stage: Stage, mut entry: Value) -> Result<()> {
        let mut manifest = self.manifest()?;
        let now = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or_default();
        entry["updated_at_unix"] = json!(now);
        manifest.insert(
            serde_json::to_value(stage)?.as_str().unwrap_or_default().to_owned(),
            entry,
        );
        let text = serde_json::to_string_pretty(&Value::Object(manifest))? + "\n";
        self.write_if_changed(MANIFEST_FILE, &text)?;
        Ok(())
    }

    fn lines(records: &[QueryRecord]) -> String {
        let mut out = String::new();
        for r in records {
            out.push_str(&record_to_line(r));
            out.push('\n');
        }
        out
    }

    /// Resumes from `originals.jsonl` when present, else starts from `input`.
    pub async fn stage_original(
        &self,
        input: Option<&Path>,
        base: &dyn TextModel,
    ) -> Result<StageReport> {
        let records = if self.path(ORIGINALS_FILE).exists() {
            self.read(ORIGINALS_FILE)?
        } else {
            let input = input
                .ok_or_else(|| Error::Precondition("no dataset given and no originals to resume".into()))?;
            parse_dataset_file(input)?
        };
        let (records, summary) = augment_original(records, base, self.concurrency).await;
        let changed = self.write_if_changed(ORIGINALS_FILE, &Self::lines(&records))?;
        let summary = serde_json::to_value(&summary)?;
        if changed {
            self.record_stage(Stage::Original, json!({ "model": base.name(), "summary": summary }))?;
        }
        Ok(StageReport {
            stage: Stage::Original,
            changed,
            summary,
        })
    }

    pub async fn stage_edited(&self, augmenter: &dyn TextModel) -> Result<StageReport> {
        let originals = self.read(ORIGINALS_FILE)?;
        let records = if self.path(EDITED_FILE).exists() {
            let previous = self.read(EDITED_FILE)?;
            merge_progress(originals, previous)
        } else {
            originals
        };
        let (records, summary) =
            augment_edited(records, augmenter, &self.templates, self.concurrency).await;
        let changed = self.write_if_changed(EDITED_FILE, &Self::lines(&records))?;
        let summary = serde_json::to_value(&summary)?;
        if changed {
            self.record_stage(Stage::Edited, json!({ "model": augmenter.name(), "summary": summary }))?;
        }
        Ok(StageReport {
            stage: Stage::Edited,
            changed,
            summary,
        })
    }

    pub async fn stage_filter(&self, nli: &dyn NliProvider) -> Result<StageReport> {
        let records = self.read(EDITED_FILE)?;
        let (filtered, summary) = filter_records(records, nli, self.concurrency).await;
        let (text, _) = kept_lines(&filtered);
        let changed = self.write_if_changed(KEPT_FILE, &text)?;
        let summary = serde_json::to_value(&summary)?;
        if changed {
            let scorer = json!({
                "nli": nli.name(),
                "entail_threshold": nli.threshold(),
                "rule": "te == 1 && se == 1 (INS); OOS kept",
            });
            self.record_stage(Stage::Filter, json!({ "scorer": scorer, "summary": summary }))?;
        }
        Ok(StageReport {
            stage: Stage::Filter,
            changed,
            summary,
        })
    }

    /// Copies the kept set to `out` (defaults to the run directory's copy).
    pub fn stage_export(&self, out: Option<&Path>) -> Result<StageReport> {
        let kept = self.read(KEPT_FILE)?;
        let text = Self::lines(&kept);
        let changed = match out {
            Some(path) => {
                if fs::read_to_string(path).is_ok_and(|old| old == text) {
                    false
                } else {
                    fs::write(path, &text).map_err(|e| Error::io(path, e))?;
                    true
                }
            }
            None => false,
        };
        Ok(StageReport {
            stage: Stage::Export,
            changed,
            summary: json!({ "exported": kept.len() }),
        })
    }
}

/// Carries edited responses from a previous run onto a fresh originals list.
fn merge_progress(originals: Vec<QueryRecord>, previous: Vec<QueryRecord>) -> Vec<QueryRecord> {
    originals
        .into_iter()
        .enumerate()
        .map(|(i, mut r)| {
            if let Some(p) = previous.get(i) {
                if p.edit == r.edit && p.query == r.query && p.original_response == r.original_response {
                    r.edited_response = p.edited_response.clone();
                }
            }
            r
        })
        .collect()
}
