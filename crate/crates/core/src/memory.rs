//! Edit memory with exact top-1 retrieval.
//!
//! Entries are scanned linearly under dot-product similarity; ties go to the
//! lowest insertion index. Writers embed outside the lock and then swap the
//! entry in, so readers never observe a half-built entry.

use std::path::Path;
use std::sync::{Arc, RwLock, RwLockReadGuard};
use std::time::SystemTime;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, EmbeddingProvider, EmbeddingVector};
use crate::error::{Error, Result};
use crate::types::{parse_edit_string, Edit, EditId};

/// Which text of an edit is embedded as its retrieval key.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeyPolicy {
    /// The full `old >> new || prompt` string.
    #[default]
    RawEdit,
    PromptOnly,
}

impl KeyPolicy {
    pub fn key_text(self, edit: &Edit) -> &str {
        match self {
            KeyPolicy::RawEdit => &edit.raw,
            KeyPolicy::PromptOnly => &edit.prompt,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub edit: Edit,
    pub vector: EmbeddingVector,
    pub inserted_at: SystemTime,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub edit: Edit,
    pub score: f64,
    pub index: usize,
}

pub struct EditMemory {
    provider: Arc<dyn EmbeddingProvider>,
    key_policy: KeyPolicy,
    entries: RwLock<Vec<MemoryEntry>>,
}

impl std::fmt::Debug for EditMemory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EditMemory")
            .field("provider", &self.provider.name())
            .field("key_policy", &self.key_policy)
            .field("len", &self.len())
            .finish()
    }
}

impl EditMemory {
    pub fn new(provider: Arc<dyn EmbeddingProvider>, key_policy: KeyPolicy) -> Self {
        Self::from_entries(provider, key_policy, Vec::new())
    }

    pub fn from_entries(
        provider: Arc<dyn EmbeddingProvider>,
        key_policy: KeyPolicy,
        entries: Vec<MemoryEntry>,
    ) -> Self {
        Self {
            provider,
            key_policy,
            entries: RwLock::new(entries),
        }
    }

    pub fn provider(&self) -> &Arc<dyn EmbeddingProvider> {
        &self.provider
    }

    pub fn key_policy(&self) -> KeyPolicy {
        self.key_policy
    }

    fn read(&self) -> RwLockReadGuard<'_, Vec<MemoryEntry>> {
        self.entries.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn len(&self) -> usize {
        self.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.read().is_empty()
    }

    pub fn edits(&self) -> Vec<Edit> {
        self.read().iter().map(|e| e.edit.clone()).collect()
    }

    pub fn get(&self, edit_id: EditId) -> Option<Edit> {
        self.read()
            .iter()
            .find(|e| e.edit.edit_id == edit_id)
            .map(|e| e.edit.clone())
    }

    pub fn entry(&self, edit_id: EditId) -> Option<MemoryEntry> {
        self.read().iter().find(|e| e.edit.edit_id == edit_id).cloned()
    }

    pub fn entries(&self) -> Vec<MemoryEntry> {
        self.read().clone()
    }

    /// An independent copy sharing the provider; vectors are not recomputed.
    pub fn fork(&self) -> Self {
        Self::from_entries(self.provider.clone(), self.key_policy, self.entries())
    }

    pub fn next_edit_id(&self) -> EditId {
        self.read()
            .iter()
            .map(|e| e.edit.edit_id + 1)
            .max()
            .unwrap_or(0)
    }

    pub async fn embed_edit(&self, edit: Edit) -> Result<MemoryEntry> {
        let vector = self.provider.embed(self.key_policy.key_text(&edit)).await?;
        Ok(MemoryEntry {
            edit,
            vector,
            inserted_at: SystemTime::now(),
        })
    }

    /// Inserts or, for an existing `edit_id`, replaces in place.
    pub async fn add_edit(&self, edit: Edit) -> Result<EditId> {
        let entry = self.embed_edit(edit).await?;
        Ok(self.insert_entry(entry))
    }

    pub fn insert_entry(&self, entry: MemoryEntry) -> EditId {
        let id = entry.edit.edit_id;
        let mut entries = self.entries.write().unwrap_or_else(|e| e.into_inner());
        match entries.iter_mut().find(|e| e.edit.edit_id == id) {
            Some(slot) => *slot = entry,
            None => entries.push(entry),
        }
        id
    }

    pub fn remove(&self, edit_id: EditId) -> Option<Edit> {
        let mut entries = self.entries.write().unwrap_or_else(|e| e.into_inner());
        let pos = entries.iter().position(|e| e.edit.edit_id == edit_id)?;
        Some(entries.remove(pos).edit)
    }

    pub async fn retrieve(&self, query: &str) -> Result<RetrievalResult> {
        if self.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let q = self.provider.embed(query).await?;
        self.retrieve_vector(&q)
    }

    pub fn retrieve_vector(&self, query: &EmbeddingVector) -> Result<RetrievalResult> {
        let entries = self.read();
        let mut best: Option<(usize, f64)> = None;
        for (i, entry) in entries.iter().enumerate() {
            let score = dot(query, &entry.vector)?;
            // Strict comparison keeps the earliest index on ties.
            if best.map_or(true, |(_, s)| score > s) {
                best = Some((i, score));
            }
        }
        let (index, score) = best.ok_or(Error::EmptyMemory)?;
        Ok(RetrievalResult {
            edit: entries[index].edit.clone(),
            score,
            index,
        })
    }

    /// Persistence form: one `edit_id<TAB>raw` line per entry.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for entry in self.read().iter() {
            out.push_str(&entry.edit.edit_id.to_string());
            out.push('\t');
            out.push_str(&entry.edit.raw);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(bad) = self.read().iter().find(|e| e.edit.raw.contains(['\n', '\r'])) {
            return Err(Error::io(
                path,
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("edit {} contains a line break", bad.edit.edit_id),
                ),
            ));
        }
        std::fs::write(path, self.dump()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_dump(text: &str) -> Result<Vec<Edit>> {
        let mut edits = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                line: line_no,
                message,
            };
            let (id, raw) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected `edit_id<TAB>edit`".into()))?;
            let id: EditId = id
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("invalid edit id `{id}`")))?;
            edits.push(parse_edit_string(id, raw).map_err(|e| parse_err(e.to_string()))?);
        }
        Ok(edits)
    }

    /// Loads a persisted memory, re-embedding every edit with `provider`.
    pub async fn load(
        path: impl AsRef<Path>,
        provider: Arc<dyn EmbeddingProvider>,
        key_policy: KeyPolicy,
    ) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let memory = Self::new(provider, key_policy);
        memory.extend(Self::parse_dump(&text)?).await?;
        Ok(memory)
    }

    /// Embeds in one batch and inserts in order.
    pub async fn extend(&self, edits: Vec<Edit>) -> Result<()> {
        let keys: Vec<String> = edits
            .iter()
            .map(|e| self.key_policy.key_text(e).to_owned())
            .collect();
        let vectors = self.provider.embed_batch(&keys).await?;
        let now = SystemTime::now();
        for (edit, vector) in edits.into_iter().zip(vectors) {
            self.insert_entry(MemoryEntry {
                edit,
                vector,
                inserted_at: now,
            });
        }
        Ok(())
    }

    /// Deterministic sample of `size` entries, insertion order preserved.
    /// `target`, when given, is always part of the sample.
    pub fn subset(&self, size: usize, seed: u64, target: Option<EditId>) -> Result<Self> {
        let entries = self.read();
        let available = entries.len();
        if size == 0 || size > available {
            return Err(Error::SizeOutOfRange { size, available });
        }
        let target_pos = match target {
            Some(id) => Some(
                entries
                    .iter()
                    .position(|e| e.edit.edit_id == id)
                    .ok_or_else(|| Error::Precondition(format!("target edit {id} not in memory")))?,
            ),
            None => None,
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<usize> = match target_pos {
            Some(t) => {
                let others: Vec<usize> = (0..available).filter(|&i| i != t).collect();
                let mut picked: Vec<usize> =
                    rand::seq::index::sample(&mut rng, others.len(), size - 1)
                        .into_iter()
                        .map(|i| others[i])
                        .collect();
                picked.push(t);
                picked
            }
            None => rand::seq::index::sample(&mut rng, available, size).into_vec(),
        };
        picked.sort_unstable();
        let chosen = picked.into_iter().map(|i| entries[i].clone()).collect();
        Ok(Self::from_entries(
            self.provider.clone(),
            self.key_policy,
            chosen,
        ))
    }
}
