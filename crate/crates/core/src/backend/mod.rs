//! Text generation and embedding behind one interface.
//!
//! Three implementations share the [`Backend`] trait: [`HttpBackend`] talks to
//! an OpenAI-compatible service, [`ReplayCache`] records and replays
//! responses keyed by request digest, and [`ScriptedBackend`] answers from a
//! deterministic rule table without touching the network. Callers go through
//! a [`Gateway`], which owns the templates, renders prompts, enforces the
//! response contract and optionally logs every call.

mod cache;
mod http;
mod scripted;
mod template;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::digest::{json_digest, sha256_hex};
use crate::error::{Error, Result};

pub use cache::{CacheMode, CacheRecord, ReplayCache};
pub use http::{HttpBackend, HttpConfig};
pub use scripted::{EmbeddingFallback, EmbeddingRule, ScriptedBackend, ScriptedRule};
pub use template::{Template, TemplateSet, DEFAULT_TEMPLATES};

/// The role a prompt plays in the simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptKind {
    ChoosePositive,
    RankCandidates,
    UpdateUserMemory,
    ExtractRelevantPreferences,
    FusePreferences,
    UpdateItemMemory,
    ExtractTags,
    NameGroup,
}

impl PromptKind {
    pub const ALL: [PromptKind; 8] = [
        PromptKind::ChoosePositive,
        PromptKind::RankCandidates,
        PromptKind::UpdateUserMemory,
        PromptKind::ExtractRelevantPreferences,
        PromptKind::FusePreferences,
        PromptKind::UpdateItemMemory,
        PromptKind::ExtractTags,
        PromptKind::NameGroup,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::ChoosePositive => "choose-positive",
            PromptKind::RankCandidates => "rank-candidates",
            PromptKind::UpdateUserMemory => "update-user-memory",
            PromptKind::ExtractRelevantPreferences => "extract-relevant-preferences",
            PromptKind::FusePreferences => "fuse-preferences",
            PromptKind::UpdateItemMemory => "update-item-memory",
            PromptKind::ExtractTags => "extract-tags",
            PromptKind::NameGroup => "name-group",
        }
    }

    /// Slots every request of this kind must bind.
    pub fn required_slots(self) -> &'static [&'static str] {
        match self {
            PromptKind::ChoosePositive => &["neg", "pos"],
            PromptKind::RankCandidates => &["candidates"],
            PromptKind::UpdateUserMemory => &["memory"],
            PromptKind::ExtractRelevantPreferences => &["source_memory", "target_domain"],
            PromptKind::FusePreferences => &["separated", "extracts"],
            PromptKind::UpdateItemMemory => &["item_memory", "user_memory"],
            PromptKind::ExtractTags => &["memories"],
            PromptKind::NameGroup => &["tags"],
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidRequest(format!("unknown prompt kind `{s}`")))
    }
}

/// A request for one completion: which template, what goes in it, and the
/// seed the backend should use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub kind: PromptKind,
    pub template_id: String,
    pub slots: BTreeMap<String, String>,
    pub seed: u64,
}

impl PromptRequest {
    pub fn new(kind: PromptKind, template_id: impl Into<String>, seed: u64) -> Self {
        Self {
            kind,
            template_id: template_id.into(),
            slots: BTreeMap::new(),
            seed,
        }
    }

    pub fn slot(mut self, name: &str, value: impl Into<String>) -> Self {
        self.slots.insert(name.to_string(), value.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        for name in self.kind.required_slots() {
            if !self.slots.contains_key(*name) {
                return Err(Error::InvalidRequest(format!(
                    "{} request is missing required slot `{name}`",
                    self.kind
                )));
            }
        }
        Ok(())
    }

    /// Cache key: digest of template id, slots (sorted by name) and seed.
    pub fn digest(&self) -> String {
        json_digest(&(&self.template_id, &self.slots, self.seed))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    #[serde(default)]
    pub usage: Usage,
}

impl CompletionResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            usage: Usage::default(),
        }
    }
}

/// A dense embedding. All vectors within one run share a dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::MalformedResponse("embedding has dimension 0".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm <= 0.0 {
            return Err(Error::MalformedResponse(format!(
                "embedding norm must be finite and positive, got {norm}"
            )));
        }
        Ok(Self { values })
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Vec<f64> {
        let n = self.norm();
        self.values.iter().map(|v| v / n).collect()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        let dot: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum();
        dot / (self.norm() * other.norm())
    }
}

/// A rendered prompt handed to a backend.
#[derive(Debug, Clone, Copy)]
pub struct Prompt<'a> {
    pub request: &'a PromptRequest,
    pub text: &'a str,
}

/// A text-generation and embedding service.
///
/// Implementations must be safe to call from several threads at once.
pub trait Backend: Send + Sync {
    fn complete(&self, prompt: Prompt<'_>) -> Result<CompletionResponse>;

    fn embed(&self, text: &str) -> Result<Embedding>;

    /// Short description recorded in run manifests.
    fn identity(&self) -> String;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, prompt: Prompt<'_>) -> Result<CompletionResponse> {
        (**self).complete(prompt)
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        (**self).embed(text)
    }

    fn identity(&self) -> String {
        (**self).identity()
    }
}

/// One logged call made through a [`Gateway`].
#[derive(Debug, Clone, PartialEq)]
pub enum CallRecord {
    Completion {
        request: PromptRequest,
        prompt: String,
        response: Option<String>,
    },
    Embedding {
        text: String,
    },
}

impl CallRecord {
    pub fn kind(&self) -> Option<PromptKind> {
        match self {
            CallRecord::Completion { request, .. } => Some(request.kind),
            CallRecord::Embedding { .. } => None,
        }
    }
}

/// Digest-only record of one call, kept for traces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallDigest {
    /// Prompt kind, or `embed`.
    pub kind: String,
    pub prompt_digest: String,
    /// `None` when the call failed.
    pub response_digest: Option<String>,
}

/// Result of a completion made through the gateway.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub prompt_digest: String,
    pub response_digest: String,
}

/// Renders prompts from templates and dispatches them to a backend.
pub struct Gateway {
    templates: TemplateSet,
    backend: Arc<dyn Backend>,
    dimension: OnceLock<usize>,
    log: Option<Mutex<Vec<CallRecord>>>,
    digests: Mutex<Vec<CallDigest>>,
    unavailable_streak: AtomicUsize,
}

impl Gateway {
    pub fn new(templates: TemplateSet, backend: Arc<dyn Backend>) -> Self {
        Self {
            templates,
            backend,
            dimension: OnceLock::new(),
            log: None,
            digests: Mutex::new(Vec::new()),
            unavailable_streak: AtomicUsize::new(0),
        }
    }

    fn track<T>(&self, result: &Result<T>) {
        match result {
            Err(Error::BackendUnavailable(_)) => {
                self.unavailable_streak.fetch_add(1, Ordering::Relaxed);
            }
            Ok(_) => self.unavailable_streak.store(0, Ordering::Relaxed),
            Err(_) => {}
        }
    }

    /// Calls in a row that failed with [`Error::BackendUnavailable`].
    pub fn unavailable_streak(&self) -> usize {
        self.unavailable_streak.load(Ordering::Relaxed)
    }

    /// Fails when the backend has been unreachable for `limit` calls in a
    /// row; 0 disables the check.
    pub fn check_reachable(&self, limit: usize) -> Result<()> {
        let streak = self.unavailable_streak();
        if limit > 0 && streak >= limit {
            return Err(Error::BackendUnavailable(format!("{streak} consecutive calls failed")));
        }
        Ok(())
    }

    /// Keeps a log of every call, readable through [`Gateway::calls`].
    pub fn with_call_log(mut self) -> Self {
        self.log = Some(Mutex::new(Vec::new()));
        self
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn backend_identity(&self) -> String {
        self.backend.identity()
    }

    pub fn render(&self, request: &PromptRequest) -> Result<String> {
        request.validate()?;
        let template = self.templates.get(&request.template_id)?;
        if request.kind == PromptKind::ChoosePositive && !template.places_before("neg", "pos") {
            return Err(Error::Template(format!(
                "template `{}` must place {{neg}} before {{pos}}",
                request.template_id
            )));
        }
        template.render(&request.slots)
    }

    pub fn complete(&self, request: &PromptRequest) -> Result<Completion> {
        let prompt = self.render(request)?;
        let result = self.backend.complete(Prompt {
            request,
            text: &prompt,
        });
        let response = match result {
            Ok(r) if r.text.trim().is_empty() => Err(Error::MalformedResponse(format!(
                "empty generation for {}",
                request.kind
            ))),
            other => other,
        };
        self.track(&response);
        let prompt_digest = sha256_hex(&prompt);
        self.digests.lock().unwrap().push(CallDigest {
            kind: request.kind.to_string(),
            prompt_digest: prompt_digest.clone(),
            response_digest: response.as_ref().ok().map(|r| sha256_hex(&r.text)),
        });
        if let Some(log) = &self.log {
            log.lock().unwrap().push(CallRecord::Completion {
                request: request.clone(),
                prompt,
                response: response.as_ref().ok().map(|r| r.text.clone()),
            });
        }
        let response = response?;
        Ok(Completion {
            response_digest: sha256_hex(&response.text),
            text: response.text,
            prompt_digest,
        })
    }

    pub fn embed(&self, text: &str) -> Result<Embedding> {
        if text.trim().is_empty() {
            return Err(Error::InvalidRequest("cannot embed empty text".into()));
        }
        if let Some(log) = &self.log {
            log.lock().unwrap().push(CallRecord::Embedding {
                text: text.to_string(),
            });
        }
        let result = self.backend.embed(text).and_then(|embedding| {
            let dim = *self.dimension.get_or_init(|| embedding.dimension());
            if embedding.dimension() != dim {
                return Err(Error::MalformedResponse(format!(
                    "embedding dimension {} differs from run dimension {dim}",
                    embedding.dimension()
                )));
            }
            Ok(embedding)
        });
        self.track(&result);
        self.digests.lock().unwrap().push(CallDigest {
            kind: "embed".into(),
            prompt_digest: sha256_hex(text),
            response_digest: result.as_ref().ok().map(|e| json_digest(&e.values())),
        });
        result
    }

    /// Drains the digests of calls made since the previous drain.
    pub fn take_call_digests(&self) -> Vec<CallDigest> {
        std::mem::take(&mut *self.digests.lock().unwrap())
    }

    /// Snapshot of the call log (empty when logging is off).
    pub fn calls(&self) -> Vec<CallRecord> {
        self.log
            .as_ref()
            .map(|l| l.lock().unwrap().clone())
            .unwrap_or_default()
    }

    pub fn clear_calls(&self) {
        if let Some(log) = &self.log {
            log.lock().unwrap().clear();
        }
    }
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.identity())
            .field("templates", &self.templates.ids().collect::<Vec<_>>())
            .finish()
    }
}

/// Keeps the tail of a memory text so it fits in `budget` characters.
///
/// Memories grow by appending, so the oldest content is at the front.
pub fn truncate_oldest(text: &str, budget: usize) -> &str {
    let count = text.chars().count();
    if count <= budget {
        return text;
    }
    let skip = count - budget;
    let (offset, _) = text.char_indices().nth(skip).expect("skip < count");
    &text[offset..]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scripted(rules: Vec<ScriptedRule>) -> Gateway {
        let backend = ScriptedBackend::new(rules, Vec::new(), EmbeddingFallback::Hashed { dimension: 8 })
            .unwrap();
        Gateway::new(TemplateSet::builtin(), Arc::new(backend)).with_call_log()
    }

    fn choose_request() -> PromptRequest {
        PromptRequest::new(PromptKind::ChoosePositive, "choose-positive", 1)
            .slot("domain", "Books")
            .slot("separated", "")
            .slot("fused", "")
            .slot("shared", "")
            .slot("neg", "NEGATIVE ITEM")
            .slot("pos", "POSITIVE ITEM")
    }

    #[test]
    fn scripted_rule_answers_by_kind() {
        let gw = scripted(vec![
            ScriptedRule::for_kind(PromptKind::ChoosePositive, "B"),
            ScriptedRule::catch_all("ok"),
        ]);
        assert_eq!(gw.complete(&choose_request()).unwrap().text, "B");
    }

    #[test]
    fn builtin_choose_template_places_negative_first() {
        let gw = scripted(vec![ScriptedRule::catch_all("ok")]);
        let text = gw.render(&choose_request()).unwrap();
        assert!(text.find("NEGATIVE ITEM").unwrap() < text.find("POSITIVE ITEM").unwrap());
    }

    #[test]
    fn missing_required_slot_is_rejected() {
        let gw = scripted(vec![ScriptedRule::catch_all("ok")]);
        let mut req = choose_request();
        req.slots.remove("pos");
        assert!(matches!(gw.complete(&req), Err(Error::InvalidRequest(_))));
    }

    #[test]
    fn empty_generation_is_malformed() {
        let gw = scripted(vec![ScriptedRule::catch_all("   ")]);
        assert!(matches!(
            gw.complete(&choose_request()),
            Err(Error::MalformedResponse(_))
        ));
        assert_eq!(gw.calls().len(), 1);
    }

    #[test]
    fn embed_rejects_empty_text() {
        let gw = scripted(vec![ScriptedRule::catch_all("ok")]);
        assert!(matches!(gw.embed(""), Err(Error::InvalidRequest(_))));
    }

    #[test]
    fn request_digest_ignores_insertion_order() {
        let a = PromptRequest::new(PromptKind::NameGroup, "t", 3)
            .slot("x", "1")
            .slot("tags", "2");
        let b = PromptRequest::new(PromptKind::NameGroup, "t", 3)
            .slot("tags", "2")
            .slot("x", "1");
        assert_eq!(a.digest(), b.digest());
        let c = PromptRequest { seed: 4, ..a.clone() };
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn truncation_keeps_newest_content() {
        assert_eq!(truncate_oldest("abcdef", 3), "def");
        assert_eq!(truncate_oldest("abc", 10), "abc");
        assert_eq!(truncate_oldest("ééé", 2), "éé");
    }

    #[test]
    fn prompt_kind_round_trips_through_str() {
        for kind in PromptKind::ALL {
            assert_eq!(kind.as_str().parse::<PromptKind>().unwrap(), kind);
        }
    }
}
