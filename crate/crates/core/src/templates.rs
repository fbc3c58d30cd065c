//! Prompt templates and retain-token detection.
//!
//! Templates use `{name}` placeholders substituted in a single pass, so
//! braces inside user text are never re-expanded. The built-in texts live in
//! `templates/*.txt` and can be replaced from a directory of the same names.

use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Edit, QueryRecord, QueryType};

/// Canonical serialized form of the retain token.
pub const RETAIN_TOKEN: &str = "<Retain>";

pub const DEFAULT_IKE_DEMOS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Aug,
    Edit,
    PromptBaseline,
    Ike,
    Surrogate,
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateId::Aug => "aug",
            TemplateId::Edit => "edit",
            TemplateId::PromptBaseline => "prompt_baseline",
            TemplateId::Ike => "ike",
            TemplateId::Surrogate => "surrogate",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    pub template_id: TemplateId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemoKind {
    /// The edit's own prompt answered with the new object.
    Copy,
    /// A paraphrase answered with the new object.
    Update,
    /// An unrelated query answered with its original answer.
    Retain,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demo {
    pub kind: DemoKind,
    pub edit: Edit,
    pub query: String,
    pub answer: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DemoLibrary {
    pub demos: Vec<Demo>,
}

impl DemoLibrary {
    /// Simple records become copy demos, Rephrase records update demos and
    /// OOS records with an original response retain demos.
    pub fn from_records(records: &[QueryRecord]) -> Self {
        let demos = records
            .iter()
            .filter_map(|r| {
                let (kind, answer) = match r.query_type {
                    QueryType::Simple => (DemoKind::Copy, r.edit.new_object.clone()),
                    QueryType::Rephrase => (DemoKind::Update, r.edit.new_object.clone()),
                    QueryType::Oos => (DemoKind::Retain, r.original_response.clone()?),
                };
                let query = match kind {
                    DemoKind::Copy => r.edit.prompt.clone(),
                    _ => r.query.clone(),
                };
                Some(Demo {
                    kind,
                    edit: r.edit.clone(),
                    query,
                    answer,
                })
            })
            .collect();
        Self { demos }
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateSet {
    pub aug: String,
    pub edit: String,
    pub prompt_baseline: String,
    pub ike_demo: String,
    pub ike_query: String,
    pub surrogate: String,
}

fn asset(text: &str) -> String {
    text.strip_suffix('\n').unwrap_or(text).to_owned()
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            aug: asset(include_str!("../templates/aug.txt")),
            edit: asset(include_str!("../templates/edit.txt")),
            prompt_baseline: asset(include_str!("../templates/prompt.txt")),
            ike_demo: asset(include_str!("../templates/ike_demo.txt")),
            ike_query: asset(include_str!("../templates/ike_query.txt")),
            surrogate: asset(include_str!("../templates/surrogate.txt")),
        }
    }
}

fn check_nonempty(name: &'static str, value: &str) -> Result<()> {
    if value.trim().is_empty() {
        Err(Error::EmptyField(name))
    } else {
        Ok(())
    }
}

/// Single-pass `{name}` substitution; unknown placeholders are an error.
fn fill(template: &str, vars: &[(&str, &str)]) -> Result<String> {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}');
        let name = close.map(|c| &after[..c]);
        match name {
            Some(name)
                if !name.is_empty()
                    && name.chars().all(|c| c.is_ascii_lowercase() || c == '_') =>
            {
                let value = vars
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| Error::UnfilledPlaceholder(name.to_owned()))?;
                out.push_str(value);
                rest = &after[name.len() + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

impl TemplateSet {
    /// Built-in templates shared process-wide.
    pub fn builtin() -> &'static TemplateSet {
        static SET: OnceLock<TemplateSet> = OnceLock::new();
        SET.get_or_init(TemplateSet::default)
    }

    /// Loads overrides from `dir`; missing files keep the built-in text.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut set = Self::default();
        for (file, slot) in [
            ("aug.txt", &mut set.aug),
            ("edit.txt", &mut set.edit),
            ("prompt.txt", &mut set.prompt_baseline),
            ("ike_demo.txt", &mut set.ike_demo),
            ("ike_query.txt", &mut set.ike_query),
            ("surrogate.txt", &mut set.surrogate),
        ] {
            let path = dir.join(file);
            match std::fs::read_to_string(&path) {
                Ok(text) => *slot = asset(&text),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(Error::io(path, e)),
            }
        }
        Ok(set)
    }

    fn fact_vars<'a>(edit: &'a Edit, query: &'a str) -> [(&'static str, &'a str); 4] {
        [
            ("prompt", edit.prompt.as_str()),
            ("old_object", edit.old_object.as_str()),
            ("new_object", edit.new_object.as_str()),
            ("query", query),
        ]
    }

    fn render_with_original(
        &self,
        template: &str,
        id: TemplateId,
        edit: &Edit,
        query: &str,
        original_response: &str,
    ) -> Result<RenderedPrompt> {
        check_nonempty("query", query)?;
        check_nonempty("original_response", original_response)?;
        let [a, b, c, d] = Self::fact_vars(edit, query);
        let text = fill(template, &[a, b, c, d, ("original_response", original_response)])?;
        Ok(RenderedPrompt {
            text,
            template_id: id,
        })
    }

    /// Augmentation prompt asking to rewrite the spans of the old fact.
    pub fn render_aug(
        &self,
        edit: &Edit,
        query: &str,
        original_response: &str,
    ) -> Result<RenderedPrompt> {
        self.render_with_original(&self.aug, TemplateId::Aug, edit, query, original_response)
    }

    /// Post-editor input.
    pub fn render_edit(
        &self,
        edit: &Edit,
        query: &str,
        original_response: &str,
    ) -> Result<RenderedPrompt> {
        self.render_with_original(&self.edit, TemplateId::Edit, edit, query, original_response)
    }

    /// SERAC-style surrogate input: the edit prompt without an original response.
    pub fn render_surrogate(&self, edit: &Edit, query: &str) -> Result<RenderedPrompt> {
        check_nonempty("query", query)?;
        Ok(RenderedPrompt {
            text: fill(&self.surrogate, &Self::fact_vars(edit, query))?,
            template_id: TemplateId::Surrogate,
        })
    }

    pub fn render_prompt_baseline(&self, edit: &Edit, query: &str) -> Result<RenderedPrompt> {
        check_nonempty("query", query)?;
        Ok(RenderedPrompt {
            text: fill(&self.prompt_baseline, &Self::fact_vars(edit, query))?,
            template_id: TemplateId::PromptBaseline,
        })
    }

    /// Demonstration blocks followed by the current fact and query, separated
    /// by blank lines. Every given demo is rendered.
    pub fn render_ike(&self, demos: &[Demo], edit: &Edit, query: &str) -> Result<RenderedPrompt> {
        if demos.is_empty() {
            return Err(Error::EmptyDemoLibrary);
        }
        check_nonempty("query", query)?;
        let mut blocks = Vec::with_capacity(demos.len() + 1);
        for demo in demos {
            let [a, b, c, d] = Self::fact_vars(&demo.edit, &demo.query);
            blocks.push(fill(&self.ike_demo, &[a, b, c, d, ("answer", demo.answer.as_str())])?);
        }
        blocks.push(fill(&self.ike_query, &Self::fact_vars(edit, query))?);
        Ok(RenderedPrompt {
            text: blocks.join("\n\n"),
            template_id: TemplateId::Ike,
        })
    }
}

pub fn render_aug(edit: &Edit, query: &str, original_response: &str) -> Result<RenderedPrompt> {
    TemplateSet::builtin().render_aug(edit, query, original_response)
}

pub fn render_edit(edit: &Edit, query: &str, original_response: &str) -> Result<RenderedPrompt> {
    TemplateSet::builtin().render_edit(edit, query, original_response)
}

pub fn render_prompt_baseline(edit: &Edit, query: &str) -> Result<RenderedPrompt> {
    TemplateSet::builtin().render_prompt_baseline(edit, query)
}

pub fn render_ike(demos: &[Demo], edit: &Edit, query: &str) -> Result<RenderedPrompt> {
    TemplateSet::builtin().render_ike(demos, edit, query)
}

/// True when the post-editor declined to edit.
///
/// The whole trimmed output must be the bare word `retain` (a trailing period
/// is tolerated), or contain the `<retain>` / `⟨retain⟩` token anywhere.
pub fn is_retain(model_output: &str) -> bool {
    let t = model_output.trim().to_lowercase();
    if t.contains("<retain>") || t.contains("⟨retain⟩") {
        return true;
    }
    let bare = t.strip_suffix('.').unwrap_or(&t).trim();
    bare == "retain"
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maupi() -> Edit {
        Edit::new(1, "The nationality of Marcel Maupi was what?", "French", "Italian").unwrap()
    }

    #[test]
    fn aug_contains_fact_lines_and_response() {
        let p = render_aug(
            &maupi(),
            "What was Marcel Maupi's nationality?",
            "Marcel Maupi was a French national.",
        )
        .unwrap();
        assert_eq!(p.template_id, TemplateId::Aug);
        assert!(p.text.contains(
            "old fact:The nationality of Marcel Maupi was what? French in original reply;"
        ));
        assert!(p
            .text
            .contains("new fact: The nationality of Marcel Maupi was what? Italian."));
        assert!(p
            .text
            .contains("### Original response:\nMarcel Maupi was a French national.\n### Edited response:"));
        assert!(!p.text.contains('{'));
        let again = render_aug(
            &maupi(),
            "What was Marcel Maupi's nationality?",
            "Marcel Maupi was a French national.",
        )
        .unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn edit_template_fact_sentence() {
        let edit = crate::types::parse_edit_string(
            15000,
            "Denis Dyack  >>  Denys de La Tour || Who is the designer of Too Human?",
        )
        .unwrap();
        let p = render_edit(&edit, "Who is the designer from Too Human?", "The designer of Too Human is Denis Dyack.").unwrap();
        assert!(p.text.contains("The answer of Who is the designer of Too Human? has been updated from Denis Dyack to Denys de La Tour."));
        assert!(p.text.contains("simply output the following word: retain."));
        assert!(p.text.starts_with("### Instruction:\n"));
        assert!(p.text.ends_with("### Edited response:"));
    }

    #[test]
    fn empty_fields_rejected() {
        assert!(matches!(
            render_edit(&maupi(), "q", ""),
            Err(Error::EmptyField("original_response"))
        ));
        assert!(matches!(
            render_aug(&maupi(), " ", "r"),
            Err(Error::EmptyField("query"))
        ));
    }

    #[test]
    fn user_braces_are_not_expanded() {
        let p = render_edit(&maupi(), "what is {query}?", "{original_response} {x").unwrap();
        assert!(p.text.contains("### The query:\nwhat is {query}?\n"));
        assert!(p.text.contains("{original_response} {x\n"));
    }

    #[test]
    fn unknown_placeholder_in_template() {
        let mut set = TemplateSet::default();
        set.prompt_baseline = "{prompt} {subject}".into();
        assert!(matches!(
            set.render_prompt_baseline(&maupi(), "q"),
            Err(Error::UnfilledPlaceholder(name)) if name == "subject"
        ));
    }

    #[test]
    fn prompt_baseline_is_fact_then_query() {
        let edit = crate::types::parse_edit_string(
            15000,
            "Denis Dyack  >>  Denys de La Tour || Who is the designer of Too Human?",
        )
        .unwrap();
        let p = render_prompt_baseline(&edit, "Who is the designer from Too Human?").unwrap();
        assert_eq!(
            p.text,
            "New Fact: Who is the designer of Too Human? Denys de La Tour\nPrompt: Who is the designer from Too Human?"
        );
    }

    #[test]
    fn ike_renders_every_demo() {
        let demos: Vec<Demo> = (0..32)
            .map(|i| Demo {
                kind: DemoKind::Update,
                edit: Edit::new(100 + i, format!("prompt {i}"), "a", "b").unwrap(),
                query: format!("query {i}"),
                answer: "b".into(),
            })
            .collect();
        let p = render_ike(&demos, &maupi(), "What was Marcel Maupi's nationality?").unwrap();
        assert_eq!(p.text.split("\n\n").count(), 33);
        assert_eq!(p.text.matches("New Fact:").count(), 33);
        assert!(p.text.ends_with("Prompt: What was Marcel Maupi's nationality?"));
        assert!(matches!(
            render_ike(&[], &maupi(), "q"),
            Err(Error::EmptyDemoLibrary)
        ));
    }

    #[test]
    fn demo_library_kinds() {
        let e = maupi();
        let records = vec![
            QueryRecord::new(e.clone(), "ignored for copy", QueryType::Simple),
            QueryRecord::new(e.clone(), "What was Maupi's citizenship?", QueryType::Rephrase),
            QueryRecord::new(e.clone(), "Who wrote Hamlet?", QueryType::Oos).with_original("Shakespeare."),
            QueryRecord::new(e.clone(), "no original", QueryType::Oos),
        ];
        let lib = DemoLibrary::from_records(&records);
        assert_eq!(lib.len(), 3);
        assert_eq!(lib.demos[0].kind, DemoKind::Copy);
        assert_eq!(lib.demos[0].query, e.prompt);
        assert_eq!(lib.demos[0].answer, "Italian");
        assert_eq!(lib.demos[1].kind, DemoKind::Update);
        assert_eq!(lib.demos[2].answer, "Shakespeare.");
    }

    #[test]
    fn retain_detection() {
        for yes in ["<Retain>", "retain", " Retain.\n", "<retain> ", "⟨Retain⟩", "ok <Retain>"] {
            assert!(is_retain(yes), "{yes:?}");
        }
        for no in [
            "Marcel Maupi was an Italian national.",
            "We retain the original answer.",
            "",
            "retained",
        ] {
            assert!(!is_retain(no), "{no:?}");
        }
    }

    #[test]
    fn overrides_from_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("prompt.txt"), "Fact: {prompt} -> {new_object}\nQ: {query}\n").unwrap();
        let set = TemplateSet::from_dir(dir.path()).unwrap();
        assert_eq!(set.edit, TemplateSet::default().edit);
        let p = set.render_prompt_baseline(&maupi(), "q").unwrap();
        assert_eq!(p.text, "Fact: The nationality of Marcel Maupi was what? -> Italian\nQ: q");
    }
}
