//! Edits, scoped queries and the line-oriented dataset format.
//!
//! Stored text is kept verbatim; lowercasing happens only at metric entry.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub type EditId = u64;

const OBJECT_SEP: &str = ">>";
const PROMPT_SEP: &str = "||";

/// One knowledge update `o -> o*` for the fact realized by `prompt`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edit {
    pub edit_id: EditId,
    /// Question text jointly realizing subject and relation.
    pub prompt: String,
    pub old_object: String,
    pub new_object: String,
    /// Serialized `old >> new || prompt` form, verbatim.
    pub raw: String,
}

impl Edit {
    /// Builds an edit from its parts; `raw` is synthesized in canonical form.
    pub fn new(
        edit_id: EditId,
        prompt: impl Into<String>,
        old_object: impl Into<String>,
        new_object: impl Into<String>,
    ) -> Result<Self> {
        let prompt = prompt.into();
        let old_object = old_object.into();
        let new_object = new_object.into();
        let raw = format!(
            "{} {OBJECT_SEP} {} {PROMPT_SEP} {}",
            old_object.trim(),
            new_object.trim(),
            prompt.trim()
        );
        parse_edit_string(edit_id, &raw)
    }
}

/// Parses `old >> new || prompt`.
pub fn parse_edit_string(edit_id: EditId, raw: &str) -> Result<Edit> {
    let prompt_seps = raw.matches(PROMPT_SEP).count();
    if prompt_seps != 1 {
        return Err(Error::MalformedEdit(format!(
            "expected exactly one `{PROMPT_SEP}`, found {prompt_seps}"
        )));
    }
    let (objects, prompt) = raw.split_once(PROMPT_SEP).expect("separator counted");
    let object_seps = raw.matches(OBJECT_SEP).count();
    if object_seps != 1 || !objects.contains(OBJECT_SEP) {
        return Err(Error::MalformedEdit(format!(
            "expected exactly one `{OBJECT_SEP}` before `{PROMPT_SEP}`, found {object_seps}"
        )));
    }
    let (old, new) = objects.split_once(OBJECT_SEP).expect("separator counted");

    let (prompt, old, new) = (prompt.trim(), old.trim(), new.trim());
    for (name, value) in [("prompt", prompt), ("old object", old), ("new object", new)] {
        if value.is_empty() {
            return Err(Error::MalformedEdit(format!("{name} is empty")));
        }
    }
    if old == new {
        return Err(Error::MalformedEdit(format!(
            "old and new object are both `{old}`"
        )));
    }
    Ok(Edit {
        edit_id,
        prompt: prompt.to_owned(),
        old_object: old.to_owned(),
        new_object: new.to_owned(),
        raw: raw.to_owned(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryType {
    Simple,
    Rephrase,
    Oos,
}

impl QueryType {
    pub const ALL: [QueryType; 3] = [QueryType::Simple, QueryType::Rephrase, QueryType::Oos];

    pub fn scope(self) -> Scope {
        match self {
            QueryType::Simple | QueryType::Rephrase => Scope::Ins,
            QueryType::Oos => Scope::Oos,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QueryType::Simple => "simple",
            QueryType::Rephrase => "rephrase",
            QueryType::Oos => "oos",
        }
    }
}

impl fmt::Display for QueryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QueryType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "simple" => Ok(QueryType::Simple),
            "rephrase" => Ok(QueryType::Rephrase),
            "oos" => Ok(QueryType::Oos),
            _ => Err(s.to_owned()),
        }
    }
}

/// In-scope vs out-of-scope relative to the record's edit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    #[serde(rename = "INS")]
    Ins,
    #[serde(rename = "OOS")]
    Oos,
}

/// A query bound to an edit.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryRecord {
    pub edit: Edit,
    pub query: String,
    pub query_type: QueryType,
    pub original_response: Option<String>,
    pub edited_response: Option<String>,
    /// Fields not understood by this crate, kept for re-serialization.
    pub extra: BTreeMap<String, Value>,
}

impl QueryRecord {
    pub fn new(edit: Edit, query: impl Into<String>, query_type: QueryType) -> Self {
        Self {
            edit,
            query: query.into(),
            query_type,
            original_response: None,
            edited_response: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn with_original(mut self, original: impl Into<String>) -> Self {
        self.original_response = Some(original.into());
        self
    }

    pub fn with_edited(mut self, edited: impl Into<String>) -> Self {
        self.edited_response = Some(edited.into());
        self
    }

    pub fn scope(&self) -> Scope {
        self.query_type.scope()
    }

    /// Both responses, if the record is ready for scoring.
    pub fn responses(&self) -> Option<(&str, &str)> {
        Some((
            self.original_response.as_deref()?,
            self.edited_response.as_deref()?,
        ))
    }
}

/// Original and final response for one query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponsePair {
    pub original: String,
    pub edited: String,
    pub was_edited: bool,
    pub matched_edit_id: Option<EditId>,
    pub latency_ms: u64,
}

impl ResponsePair {
    pub fn unedited(original: String, matched_edit_id: Option<EditId>) -> Self {
        Self {
            edited: original.clone(),
            original,
            was_edited: false,
            matched_edit_id,
            latency_ms: 0,
        }
    }
}

#[derive(Serialize)]
struct RecordLine<'a> {
    edit_id: EditId,
    edit: &'a str,
    query: &'a str,
    query_type: QueryType,
    #[serde(skip_serializing_if = "Option::is_none")]
    original_response: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    edited_response: Option<&'a str>,
    #[serde(flatten)]
    extra: &'a BTreeMap<String, Value>,
}

/// Serializes one record as a single JSON line (no trailing newline).
pub fn record_to_line(record: &QueryRecord) -> String {
    let line = RecordLine {
        edit_id: record.edit.edit_id,
        edit: &record.edit.raw,
        query: &record.query,
        query_type: record.query_type,
        original_response: record.original_response.as_deref(),
        edited_response: record.edited_response.as_deref(),
        extra: &record.extra,
    };
    serde_json::to_string(&line).expect("record serialization is infallible")
}

pub fn write_dataset_file(path: impl AsRef<Path>, records: &[QueryRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for record in records {
        out.push_str(&record_to_line(record));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn parse_dataset_file(path: impl AsRef<Path>) -> Result<Vec<QueryRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset_str(&text)
}

/// Parses JSON-lines records, or a single JSON array of records.
pub fn parse_dataset_str(text: &str) -> Result<Vec<QueryRecord>> {
    if text.trim_start().starts_with('[') {
        let entries: Vec<Value> = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        return entries
            .into_iter()
            .enumerate()
            .map(|(i, v)| record_from_value(v, i + 1))
            .collect();
    }

    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        records.push(record_from_value(value, line_no)?);
    }
    Ok(records)
}

fn record_from_value(value: Value, line: usize) -> Result<QueryRecord> {
    let parse_err = |message: String| Error::Parse { line, message };
    let Value::Object(mut map) = value else {
        return Err(parse_err("record is not an object".into()));
    };

    let edit_id = match map.remove("edit_id") {
        Some(Value::Number(n)) => n
            .as_u64()
            .ok_or_else(|| parse_err(format!("edit_id `{n}` is not a non-negative integer")))?,
        Some(other) => return Err(parse_err(format!("edit_id must be an integer, got {other}"))),
        None => return Err(parse_err("missing field `edit_id`".into())),
    };
    let mut take_str = |name: &str| -> Result<Option<String>> {
        match map.remove(name) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(other) => Err(parse_err(format!("field `{name}` must be a string, got {other}"))),
        }
    };
    let raw_edit = take_str("edit")?.ok_or_else(|| parse_err("missing field `edit`".into()))?;
    let query = take_str("query")?.ok_or_else(|| parse_err("missing field `query`".into()))?;
    let label =
        take_str("query_type")?.ok_or_else(|| parse_err("missing field `query_type`".into()))?;
    let mut original_response = take_str("original_response")?;
    let mut edited_response = take_str("edited_response")?;

    let edit = parse_edit_string(edit_id, &raw_edit).map_err(|e| parse_err(e.to_string()))?;
    let query_type = label
        .parse::<QueryType>()
        .map_err(|label| Error::UnknownQueryType { line, label })?;

    // Model-suffixed aliases such as `original_response_by_gpt3.5`.
    let mut extra = BTreeMap::new();
    for (key, value) in map {
        let slot = if key.starts_with("original_response_by_") {
            Some(&mut original_response)
        } else if key.starts_with("edited_response_by_") {
            Some(&mut edited_response)
        } else {
            None
        };
        match (slot, value) {
            (Some(slot @ None), Value::String(s)) => *slot = Some(s),
            (_, value) => {
                extra.insert(key, value);
            }
        }
    }

    Ok(QueryRecord {
        edit,
        query,
        query_type,
        original_response,
        edited_response,
        extra,
    })
}
