//! Prompt templates and few-shot prompt layout.
//!
//! Templates are plain UTF-8 text with `{name}` placeholders. Two roles
//! exist: source generation (asks for `{m}` sentences related to
//! `{query}`) and translation (renders `{demonstrations}` then `{source}`).
//! Built-in defaults are embedded; a directory holding
//! `source_generation.txt` and `translation.txt` overrides them.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::ChatMessage;
use crate::generation::DemonstrationPair;

const DEFAULT_SOURCE_GENERATION: &str = include_str!("../templates/source_generation.txt");
const DEFAULT_TRANSLATION: &str = include_str!("../templates/translation.txt");

/// Separator between the source and target side of a demonstration line.
pub const PAIR_ARROW: &str = "⇒";

const KNOWN_PLACEHOLDERS: [&str; 6] = [
    "query",
    "m",
    "source_lang",
    "target_lang",
    "source",
    "demonstrations",
];

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template {name}: missing placeholder {{{placeholder}}}")]
    MissingPlaceholder { name: String, placeholder: String },
    #[error("template {name}: unknown placeholder {{{placeholder}}}")]
    UnknownPlaceholder { name: String, placeholder: String },
    #[error("template {name}: no value for placeholder {{{placeholder}}}")]
    UnboundPlaceholder { name: String, placeholder: String },
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateRole {
    SourceGeneration,
    Translation,
}

impl TemplateRole {
    pub fn file_stem(self) -> &'static str {
        match self {
            TemplateRole::SourceGeneration => "source_generation",
            TemplateRole::Translation => "translation",
        }
    }

    pub fn required_placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateRole::SourceGeneration => &["query", "m", "source_lang"],
            TemplateRole::Translation => &["source_lang", "target_lang", "demonstrations", "source"],
        }
    }
}

/// Source and target language names as they appear in prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguagePair {
    pub source: String,
    pub target: String,
}

impl LanguagePair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        LanguagePair {
            source: source.into(),
            target: target.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    role: TemplateRole,
    body: String,
}

/// Yields `(byte range, name)` for each `{identifier}` in `body`.
fn placeholders(body: &str) -> impl Iterator<Item = (std::ops::Range<usize>, &str)> {
    let bytes = body.as_bytes();
    let mut pos = 0;
    std::iter::from_fn(move || {
        while pos < bytes.len() {
            if bytes[pos] == b'{' {
                let start = pos;
                let mut end = start + 1;
                while end < bytes.len() && (bytes[end].is_ascii_lowercase() || bytes[end] == b'_') {
                    end += 1;
                }
                if end < bytes.len() && bytes[end] == b'}' && end > start + 1 {
                    pos = end + 1;
                    return Some((start..end + 1, &body[start + 1..end]));
                }
            }
            pos += 1;
        }
        None
    })
}

impl PromptTemplate {
    pub fn new(
        name: impl Into<String>,
        role: TemplateRole,
        body: impl Into<String>,
    ) -> Result<Self, TemplateError> {
        let template = PromptTemplate {
            name: name.into(),
            role,
            body: body.into(),
        };
        template.validate()?;
        Ok(template)
    }

    fn validate(&self) -> Result<(), TemplateError> {
        let found: Vec<&str> = placeholders(&self.body).map(|(_, n)| n).collect();
        if let Some(unknown) = found.iter().find(|n| !KNOWN_PLACEHOLDERS.contains(n)) {
            return Err(TemplateError::UnknownPlaceholder {
                name: self.name.clone(),
                placeholder: unknown.to_string(),
            });
        }
        if let Some(missing) = self
            .role
            .required_placeholders()
            .iter()
            .find(|p| !found.contains(p))
        {
            return Err(TemplateError::MissingPlaceholder {
                name: self.name.clone(),
                placeholder: missing.to_string(),
            });
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn role(&self) -> TemplateRole {
        self.role
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Substitutes placeholders in one pass, so values containing
    /// `{...}` are never expanded again. Trailing whitespace is trimmed.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.body.len() + 256);
        let mut last = 0;
        for (range, name) in placeholders(&self.body) {
            let value = values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| TemplateError::UnboundPlaceholder {
                    name: self.name.clone(),
                    placeholder: name.to_string(),
                })?;
            out.push_str(&self.body[last..range.start]);
            out.push_str(value);
            last = range.end;
        }
        out.push_str(&self.body[last..]);
        out.truncate(out.trim_end().len());
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub source_generation: PromptTemplate,
    pub translation: PromptTemplate,
}

impl Default for Templates {
    fn default() -> Self {
        Templates {
            source_generation: PromptTemplate::new(
                "source_generation",
                TemplateRole::SourceGeneration,
                DEFAULT_SOURCE_GENERATION,
            )
            .expect("built-in source template is valid"),
            translation: PromptTemplate::new(
                "translation",
                TemplateRole::Translation,
                DEFAULT_TRANSLATION,
            )
            .expect("built-in translation template is valid"),
        }
    }
}

impl Templates {
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let dir = dir.as_ref();
        let load = |role: TemplateRole| {
            let path = dir.join(format!("{}.txt", role.file_stem()));
            let body = std::fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                path: path.display().to_string(),
                source,
            })?;
            PromptTemplate::new(role.file_stem(), role, body)
        };
        Ok(Templates {
            source_generation: load(TemplateRole::SourceGeneration)?,
            translation: load(TemplateRole::Translation)?,
        })
    }

    pub fn source_generation_messages(
        &self,
        query: &str,
        m: usize,
        langs: &LanguagePair,
    ) -> Result<Vec<ChatMessage>, TemplateError> {
        let m = m.to_string();
        let text = self.source_generation.render(&[
            ("query", query),
            ("m", &m),
            ("source_lang", &langs.source),
            ("target_lang", &langs.target),
        ])?;
        Ok(vec![ChatMessage::user(text)])
    }

    /// Instruction, numbered demonstration blocks, then `source` with an
    /// empty target slot.
    pub fn translation_messages(
        &self,
        source: &str,
        demonstrations: &[DemonstrationPair],
        langs: &LanguagePair,
    ) -> Result<Vec<ChatMessage>, TemplateError> {
        let blocks = render_demonstrations(demonstrations);
        let text = self.translation.render(&[
            ("source_lang", &langs.source),
            ("target_lang", &langs.target),
            ("demonstrations", &blocks),
            ("source", source),
        ])?;
        Ok(vec![ChatMessage::user(text)])
    }
}

pub fn render_demonstrations(pairs: &[DemonstrationPair]) -> String {
    let mut out = String::new();
    for (i, pair) in pairs.iter().enumerate() {
        let _ = write!(
            out,
            "Example {}:\n{} {PAIR_ARROW} {}\n\n",
            i + 1,
            pair.source,
            pair.target
        );
    }
    out
}

/// Number of demonstration blocks in a rendered translation prompt.
pub fn count_demonstration_blocks(prompt: &str) -> usize {
    let lines: Vec<&str> = prompt.lines().collect();
    lines
        .windows(2)
        .filter(|w| {
            w[0].strip_prefix("Example ")
                .and_then(|rest| rest.strip_suffix(':'))
                .is_some_and(|n| n.parse::<usize>().is_ok())
                && w[1].contains(PAIR_ARROW)
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::Provenance;

    fn pair(s: &str, t: &str) -> DemonstrationPair {
        DemonstrationPair::new(s, t, Provenance::Fixed).unwrap()
    }

    #[test]
    fn defaults_are_valid_and_ask_for_m_sentences() {
        let t = Templates::default();
        let msgs = t
            .source_generation_messages("A pride of lions.", 10, &LanguagePair::new("English", "Khmer"))
            .unwrap();
        assert_eq!(msgs.len(), 1);
        assert!(msgs[0].content.contains("Write 10 new English sentences"));
        assert!(msgs[0].content.contains("exactly 10 sentences"));
        assert!(msgs[0].content.ends_with("Query sentence: A pride of lions."));
        assert!(msgs[0].content.contains("Relevance"));
        assert!(msgs[0].content.contains("Diversity"));
    }

    #[test]
    fn translation_layout() {
        let t = Templates::default();
        let langs = LanguagePair::new("English", "Swahili");
        let demos = vec![pair("Hello.", "Habari."), pair("Thank you.", "Asante.")];
        let msgs = t.translation_messages("Good night.", &demos, &langs).unwrap();
        let text = &msgs[0].content;
        assert_eq!(count_demonstration_blocks(text), 2);
        let first = text.find("Hello. ⇒ Habari.").unwrap();
        let second = text.find("Thank you. ⇒ Asante.").unwrap();
        let query = text.find("Good night. ⇒").unwrap();
        assert!(first < second && second < query);
        assert!(text.ends_with("Good night. ⇒"));

        let zero = t.translation_messages("Good night.", &[], &langs).unwrap();
        assert_eq!(count_demonstration_blocks(&zero[0].content), 0);
    }

    #[test]
    fn render_is_single_pass() {
        let t = PromptTemplate::new("x", TemplateRole::SourceGeneration, "{query}|{m}|{source_lang}")
            .unwrap();
        let out = t
            .render(&[("query", "{m}"), ("m", "3"), ("source_lang", "en")])
            .unwrap();
        assert_eq!(out, "{m}|3|en");
    }

    #[test]
    fn validation_errors() {
        assert!(matches!(
            PromptTemplate::new("x", TemplateRole::SourceGeneration, "{query} {m}"),
            Err(TemplateError::MissingPlaceholder { .. })
        ));
        assert!(matches!(
            PromptTemplate::new("x", TemplateRole::SourceGeneration, "{query} {m} {source_lang} {bogus}"),
            Err(TemplateError::UnknownPlaceholder { .. })
        ));
        // JSON-ish braces are not placeholders.
        assert!(PromptTemplate::new(
            "x",
            TemplateRole::SourceGeneration,
            "{query} {m} {source_lang} {\"a\": 1} {}"
        )
        .is_ok());
    }

    #[test]
    fn load_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("source_generation.txt"),
            "Give {m} {source_lang} sentences like: {query}",
        )
        .unwrap();
        std::fs::write(
            dir.path().join("translation.txt"),
            "{source_lang} to {target_lang}\n{demonstrations}{source} ⇒",
        )
        .unwrap();
        let t = Templates::load_dir(dir.path()).unwrap();
        let msgs = t
            .source_generation_messages("q", 3, &LanguagePair::new("English", "Zulu"))
            .unwrap();
        assert_eq!(msgs[0].content, "Give 3 English sentences like: q");

        std::fs::remove_file(dir.path().join("translation.txt")).unwrap();
        assert!(matches!(
            Templates::load_dir(dir.path()),
            Err(TemplateError::Io { .. })
        ));
    }
}
