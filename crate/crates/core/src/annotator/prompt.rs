use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::AnnotateError;
use crate::corpus::{TaskSpec, TextSample};
use crate::hashing::sha256_fields;

/// One revision of a labeling prompt. `label_lexicon` maps each task label to
/// the exact token the model must answer with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVersion {
    pub prompt_id: String,
    pub version: u32,
    pub instructions: String,
    pub label_lexicon: BTreeMap<String, String>,
    /// Informational only; not part of the prompt hash.
    #[serde(default)]
    pub created_at: String,
}

impl PromptVersion {
    pub fn new(prompt_id: impl Into<String>, version: u32, instructions: impl Into<String>) -> Self {
        Self {
            prompt_id: prompt_id.into(),
            version,
            instructions: instructions.into(),
            label_lexicon: BTreeMap::new(),
            created_at: String::new(),
        }
    }

    pub fn with_label(mut self, label: impl Into<String>, token: impl Into<String>) -> Self {
        self.label_lexicon.insert(label.into(), token.into());
        self
    }

    /// Default binary prompt: answer `YES` for the positive label, `NO` otherwise.
    pub fn yes_no(task: &TaskSpec, version: u32) -> Self {
        let instructions = if task.description.is_empty() {
            format!("Decide for each text whether it is `{}`.", task.positive_label)
        } else {
            task.description.clone()
        };
        Self::new(task.task_id.clone(), version, instructions)
            .with_label(task.positive_label.clone(), "YES")
            .with_label(task.negative_label.clone(), "NO")
    }

    /// Content hash over id, version, instructions and lexicon.
    pub fn hash(&self) -> String {
        let mut fields = vec![self.prompt_id.clone(), self.version.to_string(), self.instructions.clone()];
        for (label, token) in &self.label_lexicon {
            fields.push(label.clone());
            fields.push(token.clone());
        }
        sha256_fields(fields)
    }

    pub fn label_for_token(&self, token: &str) -> Option<&str> {
        self.label_lexicon.iter().find(|(_, t)| t.as_str() == token).map(|(l, _)| l.as_str())
    }

    /// Every task label needs a distinct, non-empty, single-line token.
    pub fn validate_for(&self, task: &TaskSpec) -> Result<(), AnnotateError> {
        for label in task.labels() {
            if !self.label_lexicon.contains_key(label) {
                return Err(AnnotateError::MissingLexiconEntry(label.to_string()));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for token in self.label_lexicon.values() {
            if token.trim().is_empty() || token.contains('\n') || token.trim() != token {
                return Err(AnnotateError::InvalidPrompt(format!("bad lexicon token {token:?}")));
            }
            if !seen.insert(token) {
                return Err(AnnotateError::InvalidPrompt(format!("token {token:?} maps to two labels")));
            }
        }
        Ok(())
    }
}

/// Chat messages for one batch: the instructions plus the answer format as
/// the system message, the numbered texts as the user message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
    pub n_items: usize,
}

/// Renders `batch` as lines `1: <text>`, `2: <text>`, ... Line breaks inside
/// a text are folded to spaces so that numbering stays one line per item.
pub fn render_prompt(prompt: &PromptVersion, batch: &[TextSample], batch_size: usize) -> Result<RenderedPrompt, AnnotateError> {
    if batch.is_empty() || batch.len() > batch_size {
        return Err(AnnotateError::OversizedBatch { got: batch.len(), max: batch_size });
    }
    let tokens: Vec<&str> = prompt.label_lexicon.values().map(String::as_str).collect();
    let system = format!(
        "{}\n\nAnswer with exactly one line per numbered text, in order, formatted as `<number>: <answer>` where <answer> is one of: {}. Do not add anything else.",
        prompt.instructions.trim_end(),
        tokens.join(", ")
    );
    let mut user = String::new();
    for (i, s) in batch.iter().enumerate() {
        let flat: String = s.text.split_whitespace().collect::<Vec<_>>().join(" ");
        user.push_str(&format!("{}: {}\n", i + 1, flat));
    }
    Ok(RenderedPrompt { system, user, n_items: batch.len() })
}

/// Why a batch response could not be read.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseFailure {
    #[error("expected {expected} answer lines, got {got}")]
    CountMismatch { got: usize, expected: usize },
    #[error("answer {index}: unknown token {token:?}")]
    UnknownToken { index: usize, token: String },
    #[error("line {line} is numbered {found:?}")]
    Misnumbered { line: usize, found: String },
}

/// Reads the canonical `<n>: <token>` format. Blank lines are ignored; every
/// other line must be numbered 1..=expected_n in order and carry a lexicon
/// token. Returns `(index, label)` pairs with 1-based indices.
pub fn parse_response(raw: &str, expected_n: usize, prompt: &PromptVersion) -> Result<Vec<(usize, String)>, ParseFailure> {
    let lines: Vec<&str> = raw.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if lines.len() != expected_n {
        return Err(ParseFailure::CountMismatch { got: lines.len(), expected: expected_n });
    }
    let mut out = Vec::with_capacity(expected_n);
    for (i, line) in lines.iter().enumerate() {
        let index = i + 1;
        let (num, token) = line.split_once(':').ok_or_else(|| ParseFailure::Misnumbered { line: index, found: line.to_string() })?;
        if num.trim().parse::<usize>().ok() != Some(index) {
            return Err(ParseFailure::Misnumbered { line: index, found: num.trim().to_string() });
        }
        let token = token.trim();
        let label = prompt
            .label_for_token(token)
            .ok_or_else(|| ParseFailure::UnknownToken { index, token: token.to_string() })?;
        out.push((index, label.to_string()));
    }
    Ok(out)
}

/// Versioned prompt files: `<dir>/<prompt_id>/v<version>.txt` holds the
/// instructions, `v<version>.lexicon.json` the lexicon and creation time.
#[derive(Debug, Clone)]
pub struct PromptStore {
    root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    label_lexicon: BTreeMap<String, String>,
    #[serde(default)]
    created_at: String,
}

impl PromptStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn paths(&self, id: &str, version: u32) -> (PathBuf, PathBuf) {
        let dir = self.root.join(id);
        (dir.join(format!("v{version}.txt")), dir.join(format!("v{version}.lexicon.json")))
    }

    /// Versions present for `id`, ascending.
    pub fn versions(&self, id: &str) -> Result<Vec<u32>, AnnotateError> {
        let dir = self.root.join(id);
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut out: Vec<u32> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_prefix('v')?.strip_suffix(".txt")?.parse().ok()
            })
            .collect();
        out.sort_unstable();
        Ok(out)
    }

    pub fn ids(&self) -> Result<Vec<String>, AnnotateError> {
        if !self.root.exists() {
            return Ok(Vec::new());
        }
        let mut out: Vec<String> = std::fs::read_dir(&self.root)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        out.sort();
        Ok(out)
    }

    /// Saves a new version. Versions must increase; an existing version is
    /// never overwritten.
    pub fn save(&self, prompt: &PromptVersion) -> Result<(), AnnotateError> {
        if let Some(&latest) = self.versions(&prompt.prompt_id)?.last() {
            if prompt.version <= latest {
                return Err(AnnotateError::VersionNotIncreasing { id: prompt.prompt_id.clone(), version: prompt.version, latest });
            }
        }
        let (txt, side) = self.paths(&prompt.prompt_id, prompt.version);
        std::fs::create_dir_all(txt.parent().expect("has parent"))?;
        let sidecar = Sidecar { label_lexicon: prompt.label_lexicon.clone(), created_at: prompt.created_at.clone() };
        std::fs::write(&side, serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes"))?;
        std::fs::write(&txt, &prompt.instructions)?;
        Ok(())
    }

    pub fn load(&self, id: &str, version: u32) -> Result<PromptVersion, AnnotateError> {
        let (txt, side) = self.paths(id, version);
        if !txt.exists() {
            return Err(AnnotateError::UnknownPrompt { id: id.to_string(), version });
        }
        let instructions = std::fs::read_to_string(txt)?;
        let sidecar: Sidecar = serde_json::from_slice(&std::fs::read(side)?)
            .map_err(|e| AnnotateError::InvalidPrompt(e.to_string()))?;
        Ok(PromptVersion {
            prompt_id: id.to_string(),
            version,
            instructions,
            label_lexicon: sidecar.label_lexicon,
            created_at: sidecar.created_at,
        })
    }

    pub fn latest(&self, id: &str) -> Result<Option<PromptVersion>, AnnotateError> {
        match self.versions(id)?.last() {
            Some(&v) => self.load(id, v).map(Some),
            None => Ok(None),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}
