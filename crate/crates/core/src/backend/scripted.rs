//! Deterministic rule-driven backend for offline runs and tests.
//!
//! Rules are tried in order and the first match wins. A completion rule can
//! constrain the prompt kind, the template id, substrings of individual slots
//! and a substring of the rendered prompt; its response may echo slot values
//! with `{slot}` placeholders (plus `{seed}` and `{kind}`). Embeddings come
//! from exact or substring rules, falling back to a hashed bag-of-words
//! vector.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, CompletionResponse, Embedding, Prompt, PromptKind};
use crate::digest::json_digest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<PromptKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    /// Slot name → substring that slot must contain.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub slots: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_contains: Option<String>,
    pub response: String,
}

impl ScriptedRule {
    pub fn catch_all(response: impl Into<String>) -> Self {
        Self {
            kind: None,
            template: None,
            slots: BTreeMap::new(),
            prompt_contains: None,
            response: response.into(),
        }
    }

    pub fn for_kind(kind: PromptKind, response: impl Into<String>) -> Self {
        Self {
            kind: Some(kind),
            ..Self::catch_all(response)
        }
    }

    pub fn when_slot(mut self, slot: &str, contains: &str) -> Self {
        self.slots.insert(slot.to_string(), contains.to_string());
        self
    }

    pub fn when_prompt(mut self, contains: &str) -> Self {
        self.prompt_contains = Some(contains.to_string());
        self
    }

    fn is_catch_all(&self) -> bool {
        self.kind.is_none()
            && self.template.is_none()
            && self.slots.is_empty()
            && self.prompt_contains.is_none()
    }

    fn matches(&self, prompt: &Prompt<'_>) -> bool {
        let request = prompt.request;
        self.kind.is_none_or(|k| k == request.kind)
            && self
                .template
                .as_ref()
                .is_none_or(|t| *t == request.template_id)
            && self.slots.iter().all(|(name, needle)| {
                request
                    .slots
                    .get(name)
                    .is_some_and(|value| value.contains(needle.as_str()))
            })
            && self
                .prompt_contains
                .as_ref()
                .is_none_or(|needle| prompt.text.contains(needle.as_str()))
    }

    fn respond(&self, prompt: &Prompt<'_>) -> String {
        let request = prompt.request;
        let mut out = String::with_capacity(self.response.len());
        let mut rest = self.response.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let Some(close) = after.find('}') else {
                out.push_str(&rest[open..]);
                rest = "";
                break;
            };
            let name = &after[..close];
            let value = match name {
                "seed" => Some(request.seed.to_string()),
                "kind" => Some(request.kind.to_string()),
                _ => request.slots.get(name).cloned(),
            };
            match value {
                Some(v) => out.push_str(&v),
                None => out.push_str(&rest[open..open + close + 2]),
            }
            rest = &after[close + 1..];
        }
        out.push_str(rest);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRule {
    /// Exact match after trimming, case-insensitive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Case-insensitive substring match.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    pub vector: Vec<f64>,
}

impl EmbeddingRule {
    pub fn exact(text: &str, vector: Vec<f64>) -> Self {
        Self {
            text: Some(text.to_string()),
            contains: None,
            vector,
        }
    }

    fn matches(&self, text: &str) -> bool {
        let lowered = text.trim().to_lowercase();
        self.text
            .as_ref()
            .is_none_or(|t| t.trim().to_lowercase() == lowered)
            && self
                .contains
                .as_ref()
                .is_none_or(|c| lowered.contains(&c.to_lowercase()))
    }
}

/// What to return when no embedding rule matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingFallback {
    /// Signed feature hashing of lowercase alphanumeric words.
    Hashed { dimension: usize },
    /// No fallback: a catch-all embedding rule is required.
    None,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RuleFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hashed_embedding_dimension: Option<usize>,
    #[serde(default)]
    completion: Vec<ScriptedRule>,
    #[serde(default)]
    embedding: Vec<EmbeddingRule>,
}

#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    completions: Vec<ScriptedRule>,
    embeddings: Vec<EmbeddingRule>,
    fallback: EmbeddingFallback,
    identity: String,
}

impl ScriptedBackend {
    pub fn new(
        completions: Vec<ScriptedRule>,
        embeddings: Vec<EmbeddingRule>,
        fallback: EmbeddingFallback,
    ) -> Result<Self> {
        if !completions.iter().any(ScriptedRule::is_catch_all) {
            return Err(Error::Config(
                "scripted rules need a catch-all completion rule".into(),
            ));
        }
        let catch_all_embedding = embeddings
            .iter()
            .any(|r| r.text.is_none() && r.contains.is_none());
        let dimension = match fallback {
            EmbeddingFallback::Hashed { dimension: 0 } => {
                return Err(Error::Config("hashed embedding dimension must be > 0".into()))
            }
            EmbeddingFallback::Hashed { dimension } => Some(dimension),
            EmbeddingFallback::None if !catch_all_embedding => {
                return Err(Error::Config(
                    "scripted rules need a catch-all embedding rule or a hashed fallback".into(),
                ))
            }
            EmbeddingFallback::None => None,
        };
        let dimension = dimension.or_else(|| embeddings.first().map(|r| r.vector.len()));
        for rule in &embeddings {
            if Some(rule.vector.len()) != dimension {
                return Err(Error::Config(format!(
                    "embedding rule vector has dimension {}, expected {}",
                    rule.vector.len(),
                    dimension.unwrap_or(0)
                )));
            }
            Embedding::new(rule.vector.clone()).map_err(|e| Error::Config(e.to_string()))?;
        }
        let identity = format!(
            "scripted:{}",
            &json_digest(&(&completions, &embeddings, &fallback))[..16]
        );
        Ok(Self {
            completions,
            embeddings,
            fallback,
            identity,
        })
    }

    pub fn from_toml(source: &str) -> Result<Self> {
        let file: RuleFile = toml::from_str(source)
            .map_err(|e| Error::Config(format!("scripted rule file: {e}")))?;
        let fallback = match file.hashed_embedding_dimension {
            Some(dimension) => EmbeddingFallback::Hashed { dimension },
            None => EmbeddingFallback::None,
        };
        Self::new(file.completion, file.embedding, fallback)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let source = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&source)
    }

    /// Puts `rule` ahead of the existing rules.
    pub fn prepend(&mut self, rule: ScriptedRule) {
        self.completions.insert(0, rule);
    }

    pub fn prepend_embedding(&mut self, rule: EmbeddingRule) -> Result<()> {
        let mut embeddings = vec![rule];
        embeddings.extend(self.embeddings.iter().cloned());
        *self = Self::new(self.completions.clone(), embeddings, self.fallback)?;
        Ok(())
    }
}

fn hashed_embedding(text: &str, dimension: usize) -> Vec<f64> {
    let mut values = vec![0.0; dimension];
    let lowered = text.to_lowercase();
    for word in lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
    {
        let h = Sha256::digest(word.as_bytes());
        let mut idx = [0u8; 8];
        idx.copy_from_slice(&h[..8]);
        let slot = (u64::from_le_bytes(idx) % dimension as u64) as usize;
        values[slot] += if h[8] & 1 == 0 { 1.0 } else { -1.0 };
    }
    if values.iter().all(|v| *v == 0.0) {
        let h = Sha256::digest(lowered.as_bytes());
        values[h[0] as usize % dimension] = 1.0;
    }
    values
}

impl Backend for ScriptedBackend {
    fn complete(&self, prompt: Prompt<'_>) -> Result<CompletionResponse> {
        let rule = self
            .completions
            .iter()
            .find(|r| r.matches(&prompt))
            .expect("catch-all rule present");
        Ok(CompletionResponse::text(rule.respond(&prompt)))
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        if let Some(rule) = self.embeddings.iter().find(|r| r.matches(text)) {
            return Embedding::new(rule.vector.clone());
        }
        match self.fallback {
            EmbeddingFallback::Hashed { dimension } => {
                Embedding::new(hashed_embedding(text, dimension))
            }
            EmbeddingFallback::None => unreachable!("catch-all embedding rule checked at construction"),
        }
    }

    fn identity(&self) -> String {
        self.identity.clone()
    }
}
