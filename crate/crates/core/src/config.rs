//! Run configuration.
//!
//! A run is configured by one TOML file with nested sections. Every field
//! has a default; the only required setting is where the chosen backend
//! gets its answers (`backend.rules`, `backend.cache` or `backend.http`).
//! Relative paths are resolved against the directory of the config file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::{HttpConfig, PromptKind};
use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::groups::{GroupBy, GroupingParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub name: String,
    pub seed: u64,
    /// Passes over the training split.
    pub epochs: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: 42,
            epochs: 1,
        }
    }
}

/// Mechanism switches. The five supported combinations are the
/// [`Variant`]s.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Features {
    pub dual_layer: bool,
    pub shared_groups: bool,
    pub group_by: GroupBy,
}

impl Default for Features {
    fn default() -> Self {
        Variant::Full.features()
    }
}

/// Named feature combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// One memory per user, no groups.
    Baseline,
    /// Dual-layer memories, no groups.
    Dual,
    /// One memory per user plus interest groups.
    Shared,
    /// Dual-layer memories plus groups built from interaction history.
    HistoryGroups,
    /// Dual-layer memories plus interest groups.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::Dual,
        Variant::Shared,
        Variant::HistoryGroups,
        Variant::Full,
    ];

    pub fn features(self) -> Features {
        let (dual_layer, shared_groups, group_by) = match self {
            Variant::Baseline => (false, false, GroupBy::Interest),
            Variant::Dual => (true, false, GroupBy::Interest),
            Variant::Shared => (false, true, GroupBy::Interest),
            Variant::HistoryGroups => (true, true, GroupBy::History),
            Variant::Full => (true, true, GroupBy::Interest),
        };
        Features {
            dual_layer,
            shared_groups,
            group_by,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Dual => "dual",
            Variant::Shared => "shared",
            Variant::HistoryGroups => "history-groups",
            Variant::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

impl Features {
    pub fn validate(&self) -> Result<()> {
        if self.group_by == GroupBy::History && !self.shared_groups {
            return Err(Error::Config(
                "group_by = \"history\" requires shared_groups = true".into(),
            ));
        }
        Ok(())
    }

    pub fn variant(&self) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| {
            let f = v.features();
            f.dual_layer == self.dual_layer
                && f.shared_groups == self.shared_groups
                && (!self.shared_groups || f.group_by == self.group_by)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    /// Shared entries shown per group in a decision context.
    pub shared_view: usize,
    /// Characters of each memory passed into a prompt (newest kept).
    pub memory_budget_chars: usize,
    /// Whether users see their own entries in group memories.
    pub self_echo: bool,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            shared_view: 10,
            memory_budget_chars: 2000,
            self_echo: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    /// Re-segment interest groups after every this many training
    /// interactions (never after the final one).
    pub resegment_every: usize,
    /// Write a resumable snapshot after every this many interactions;
    /// 0 disables periodic snapshots.
    pub snapshot_every: usize,
    /// Issue independent backend calls of one step concurrently.
    pub parallel_calls: bool,
    /// Abort after this many consecutive unreachable-backend failures
    /// instead of degrading every remaining step; 0 never aborts.
    pub max_unavailable_streak: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            resegment_every: 100,
            snapshot_every: 100,
            parallel_calls: false,
            max_unavailable_streak: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// The trained user agents.
    Agent,
    /// Training-split popularity.
    Pop,
    /// Max cosine similarity to the user's history embeddings.
    SeqSim,
    /// Zero-shot ranking from raw history titles.
    LlmRank,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Agent => "agent",
            Method::Pop => "pop",
            Method::SeqSim => "seq-sim",
            Method::LlmRank => "llm-rank",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Method::Agent, Method::Pop, Method::SeqSim, Method::LlmRank]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSplit {
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub runs: usize,
    pub distractors: usize,
    pub methods: Vec<Method>,
    pub split: EvalSplit,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            runs: 5,
            distractors: 9,
            methods: vec![Method::Agent, Method::Pop, Method::SeqSim, Method::LlmRank],
            split: EvalSplit::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Scripted,
    Replay,
    Live,
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scripted" => Ok(BackendKind::Scripted),
            "replay" => Ok(BackendKind::Replay),
            "live" => Ok(BackendKind::Live),
            other => Err(Error::Config(format!("unknown backend `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Rule file for the scripted backend.
    pub rules: Option<PathBuf>,
    /// Cache file for the replay backend.
    pub cache: Option<PathBuf>,
    /// Replay backend only: forward misses to the live backend and record.
    pub record: bool,
    pub http: Option<HttpConfig>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Scripted,
            rules: None,
            cache: None,
            record: false,
            http: None,
        }
    }
}

/// Template id used for each prompt kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateIds {
    pub overrides: BTreeMap<PromptKind, String>,
    pub zero_shot_rank: String,
}

impl Default for TemplateIds {
    fn default() -> Self {
        Self {
            overrides: BTreeMap::new(),
            zero_shot_rank: "rank-candidates-zero-shot".into(),
        }
    }
}

impl TemplateIds {
    pub fn get(&self, kind: PromptKind) -> &str {
        self.overrides
            .get(&kind)
            .map(String::as_str)
            .unwrap_or(kind.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateConfig {
    /// Template file; the built-in templates are used when unset.
    pub path: Option<PathBuf>,
    pub ids: TemplateIds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Prepared dataset bundle directory.
    pub dataset: PathBuf,
    /// Directory receiving snapshots, traces, reports and manifests.
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/bundle"),
            output: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub features: Features,
    pub memory: MemoryConfig,
    pub groups: GroupingParams,
    pub simulation: SimulationConfig,
    pub evaluation: EvaluationConfig,
    pub backend: BackendConfig,
    pub templates: TemplateConfig,
    pub paths: PathsConfig,
}

fn resolve(base: &Path, path: &mut PathBuf) {
    if path.is_relative() {
        *path = base.join(&*path);
    }
}

impl RunConfig {
    pub fn from_toml(source: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(source).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let source = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&source)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.paths.dataset);
        resolve(base, &mut self.paths.output);
        for p in [
            self.backend.rules.as_mut(),
            self.backend.cache.as_mut(),
            self.templates.path.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.run.epochs == 0 {
            return err("run.epochs must be >= 1");
        }
        if self.groups.capacity == 0 {
            return err("groups.capacity must be >= 1");
        }
        if self.groups.max_groups_per_user == 0 {
            return err("groups.max_groups_per_user must be >= 1");
        }
        if self.groups.k == Some(0) {
            return err("groups.k must be >= 1");
        }
        if self.simulation.resegment_every == 0 {
            return err("simulation.resegment_every must be >= 1");
        }
        if self.evaluation.runs == 0 {
            return err("evaluation.runs must be >= 1");
        }
        if self.evaluation.distractors == 0 {
            return err("evaluation.distractors must be >= 1");
        }
        match self.backend.kind {
            BackendKind::Scripted if self.backend.rules.is_none() => {
                return err("scripted backend requires backend.rules")
            }
            BackendKind::Replay if self.backend.cache.is_none() => {
                return err("replay backend requires backend.cache")
            }
            BackendKind::Replay if self.backend.record && self.backend.http.is_none() => {
                return err("recording replay backend requires backend.http")
            }
            BackendKind::Live if self.backend.http.is_none() => {
                return err("live backend requires backend.http")
            }
            _ => {}
        }
        Ok(())
    }

    pub fn apply_variant(&mut self, variant: Variant) {
        self.features = variant.features();
    }

    /// Digest of the settings that determine simulation behaviour. File
    /// locations are excluded so the digest is stable across machines.
    pub fn digest(&self) -> String {
        json_digest(&(
            &self.run,
            &self.features,
            &self.memory,
            &self.groups,
            &self.simulation,
            &self.evaluation,
            self.backend.kind,
            &self.templates.ids,
        ))
    }
}
