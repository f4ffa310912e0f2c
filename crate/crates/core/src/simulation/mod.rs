//! The chronological training loop.
//!
//! Each training interaction `(u, i, d)` runs, in order: negative sampling,
//! inference (the user agent picks between the negative `j` and the true
//! item `i`), reflection on the user's separated memory, two-step fusion
//! into the fused memory, reflection on both item memories, and a broadcast
//! of the interaction to the user's groups. Interest groups are rebuilt
//! every `resegment_every` interactions.

mod scenario;
pub mod trace;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::LazyLock;

use rand::seq::IndexedRandom;
use rand::Rng;
use regex::Regex;
use tracing::{debug, warn};

use crate::backend::{truncate_oldest, CallDigest, Gateway, PromptKind, PromptRequest};
use crate::config::RunConfig;
use crate::dataset::{Bundle, CatalogItem, Interaction};
use crate::digest::{derive_seed, json_digest, rng_for, sha256_hex};
use crate::error::{Error, Result};
use crate::groups::{resegment, GroupBy, Segmentation};
use crate::ids::{DomainId, ItemId, UserId};
use crate::memory::{ContextOptions, ItemAgent, MemoryLayout, MemoryState, SharedEntry};
use crate::parallel::map_ordered;
use crate::snapshot::write_snapshot;

pub use scenario::{popularity_scenario, ScenarioOutcome};
pub use trace::{
    read_trace, steps_digest, truncate_trace, MemoryDiff, MemoryTarget, NullSink, Phase, StepRecord,
    TraceEnd, TraceHeader, TraceRecord, TraceSink, TraceWriter, TRACE_VERSION,
};

/// Shown in a prompt in place of an empty memory.
pub const EMPTY_MEMORY: &str = "(nothing recorded yet)";
/// Shown in a prompt when no group activity is visible.
pub const NO_SHARED: &str = "(no recent activity)";

// Seed path components, one per randomized decision within a step.
const SEED_NEGATIVE: u64 = 0;
const SEED_INFER: u64 = 1;
const SEED_COIN: u64 = 2;
const SEED_UPDATE: u64 = 3;
const SEED_FUSE: u64 = 4;
const SEED_ITEMS: u64 = 5;
const SEED_RESEGMENT: u64 = 6;

/// A memory as passed into a prompt: trimmed to `budget` characters
/// (newest kept), with a placeholder for an empty memory.
pub fn memory_slot(text: &str, budget: usize) -> String {
    let text = truncate_oldest(text.trim(), budget).trim();
    if text.is_empty() {
        EMPTY_MEMORY.to_string()
    } else {
        text.to_string()
    }
}

/// Position of an option in a two-way choice prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Choice {
    First,
    Second,
}

static LABELED: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(?:choice|answer|option|pick|choose|select(?:ed)?)\s*(?:is\s*)?[:\-=]?\s*(?:option\s*)?[\(\[]?([ab12])\b").unwrap()
});
static LEADING: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)^[\(\[]?([ab12])\b").unwrap());
static ORDINAL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(first|second)\b").unwrap());

fn choice_of(token: &str) -> Choice {
    match token.to_ascii_lowercase().as_str() {
        "a" | "1" | "first" => Choice::First,
        _ => Choice::Second,
    }
}

/// Reads the choice out of a choose-positive completion. Tries, in order:
/// a labeled answer ("Choice: B", "option A"), a bare leading letter or
/// digit, then the first of the words "first"/"second".
pub fn parse_choice(text: &str) -> Option<Choice> {
    let text = text.trim();
    if let Some(c) = LABELED.captures(text) {
        return Some(choice_of(&c[1]));
    }
    if let Some(c) = LEADING.captures(text) {
        return Some(choice_of(&c[1]));
    }
    ORDINAL.captures(text).map(|c| choice_of(&c[1]))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferenceOutcome {
    pub chosen: ItemId,
    pub explanation: String,
    pub correct: bool,
    /// The choice was drawn by coin because no completion could be parsed.
    pub degraded: bool,
}

/// Controls for [`Simulator::run`].
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop once this many interactions have been processed in total.
    pub stop_after: Option<usize>,
    /// Where periodic snapshots are written.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingOutcome {
    /// Interactions processed in total, including earlier resumed runs.
    pub processed: usize,
    /// Length of the full training stream (all epochs).
    pub total: usize,
    /// Phase records flagged degraded during this call.
    pub degraded: usize,
    pub segmentations: Vec<Segmentation>,
}

impl TrainingOutcome {
    pub fn completed(&self) -> bool {
        self.processed == self.total
    }
}

fn memory_digest(text: &str) -> String {
    sha256_hex(text)
}

/// Collects the records of one interaction.
struct Recorder<'s> {
    sink: &'s mut dyn TraceSink,
    gateway: &'s Gateway,
    parallel: bool,
    step: usize,
    interaction: Option<&'s Interaction>,
    degraded: usize,
}

impl Recorder<'_> {
    fn emit(
        &mut self,
        phase: Phase,
        items: Vec<ItemId>,
        diffs: Vec<MemoryDiff>,
        note: Option<String>,
    ) -> Result<()> {
        let mut calls: Vec<CallDigest> = self.gateway.take_call_digests();
        if self.parallel {
            calls.sort_by(|a, b| (&a.kind, &a.prompt_digest).cmp(&(&b.kind, &b.prompt_digest)));
        }
        let degraded = note.is_some();
        if degraded {
            self.degraded += 1;
        }
        self.sink.record(TraceRecord::Step(StepRecord {
            step: self.step,
            phase,
            user: self.interaction.map(|i| i.user.clone()),
            domain: self.interaction.map(|i| i.domain.clone()),
            timestamp: self.interaction.map(|i| i.timestamp),
            items,
            calls,
            diffs,
            degraded,
            note,
        }))
    }
}

/// Runs a completion, turning recoverable backend failures into `None`
/// plus a note.
fn soft<T>(result: Result<T>, what: &str, notes: &mut Vec<String>) -> Result<Option<T>> {
    match result {
        Ok(v) => Ok(Some(v)),
        Err(e) if e.is_recoverable() => {
            warn!(error = %e, "{what} skipped");
            notes.push(format!("{what}: {e}"));
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn join_notes(notes: Vec<String>) -> Option<String> {
    (!notes.is_empty()).then(|| notes.join("; "))
}

/// Drives training over one dataset with one configuration.
pub struct Simulator<'a> {
    config: &'a RunConfig,
    gateway: &'a Gateway,
    catalog: BTreeMap<ItemId, CatalogItem>,
    by_domain: BTreeMap<DomainId, Vec<ItemId>>,
    interacted: BTreeMap<UserId, BTreeSet<ItemId>>,
}

impl<'a> Simulator<'a> {
    /// `interacted` lists every item each user interacted with; negatives
    /// are never drawn from it.
    pub fn new(
        config: &'a RunConfig,
        gateway: &'a Gateway,
        items: &[CatalogItem],
        interacted: BTreeMap<UserId, BTreeSet<ItemId>>,
    ) -> Self {
        let mut by_domain: BTreeMap<DomainId, Vec<ItemId>> = BTreeMap::new();
        for item in items {
            by_domain.entry(item.domain.clone()).or_default().push(item.item_id.clone());
        }
        for ids in by_domain.values_mut() {
            ids.sort();
        }
        Self {
            config,
            gateway,
            catalog: items.iter().map(|i| (i.item_id.clone(), i.clone())).collect(),
            by_domain,
            interacted,
        }
    }

    pub fn from_bundle(config: &'a RunConfig, gateway: &'a Gateway, bundle: &Bundle) -> Self {
        Self::new(config, gateway, &bundle.items, bundle.interacted())
    }

    pub fn gateway(&self) -> &Gateway {
        self.gateway
    }

    pub fn layout(&self) -> MemoryLayout {
        if self.config.features.dual_layer {
            MemoryLayout::DualLayer
        } else {
            MemoryLayout::Single
        }
    }

    pub fn context_options(&self) -> ContextOptions {
        ContextOptions {
            shared_view: self.config.memory.shared_view,
            self_echo: self.config.memory.self_echo,
            shared_groups: self.config.features.shared_groups,
        }
    }

    /// Fresh state: every catalog item seeded from its side information and
    /// every known user with empty memories.
    pub fn initial_state(&self, domains: Vec<DomainId>) -> Result<MemoryState> {
        let mut state = MemoryState::new(self.layout(), domains)?;
        for item in self.catalog.values() {
            let agent = ItemAgent::init(item.item_id.clone(), item.domain.clone(), item.side_info())?;
            state.add_item(agent)?;
        }
        for user in self.interacted.keys() {
            state.add_user(user.clone());
        }
        Ok(state)
    }

    fn slot_text(&self, text: &str) -> String {
        memory_slot(text, self.config.memory.memory_budget_chars)
    }

    fn template(&self, kind: PromptKind) -> &str {
        self.config.templates.ids.get(kind)
    }

    /// Uniform seeded draw from the items of `domain` the user never
    /// interacted with.
    pub fn sample_negative(&self, user: &UserId, domain: &DomainId, seed: u64) -> Result<ItemId> {
        let seen = self.interacted.get(user);
        let pool: Vec<&ItemId> = self
            .by_domain
            .get(domain)
            .into_iter()
            .flatten()
            .filter(|i| seen.is_none_or(|s| !s.contains(*i)))
            .collect();
        let mut rng = rng_for(seed, &[]);
        pool.choose(&mut rng)
            .map(|i| (*i).clone())
            .ok_or_else(|| Error::NoNegativeAvailable {
                user: user.to_string(),
                domain: domain.to_string(),
            })
    }

    /// Asks the user agent to pick between `negative` (shown first) and the
    /// true item.
    pub fn infer(
        &self,
        state: &MemoryState,
        interaction: &Interaction,
        negative: &ItemId,
        seed: u64,
    ) -> Result<InferenceOutcome> {
        let ctx = state.decision_context(&interaction.user, &interaction.domain, self.context_options())?;
        let shared = ctx.render_shared();
        let request = |attempt: u64| {
            Ok::<_, Error>(
                PromptRequest::new(
                    PromptKind::ChoosePositive,
                    self.template(PromptKind::ChoosePositive),
                    derive_seed(seed, &[attempt]),
                )
                .slot("domain", interaction.domain.as_str())
                .slot("separated", self.slot_text(&ctx.separated))
                .slot("fused", self.slot_text(&ctx.fused))
                .slot("shared", if shared.is_empty() { NO_SHARED.to_string() } else { shared.clone() })
                .slot("neg", self.slot_text(&state.item(negative)?.memory))
                .slot("pos", self.slot_text(&state.item(&interaction.item)?.memory)),
            )
        };
        for attempt in 0..2 {
            let answer = match self.gateway.complete(&request(attempt)?) {
                Ok(c) => c.text,
                Err(e) if e.is_recoverable() => {
                    warn!(error = %e, attempt, "choice prompt failed");
                    continue;
                }
                Err(e) => return Err(e),
            };
            if let Some(choice) = parse_choice(&answer) {
                let chosen = match choice {
                    Choice::First => negative.clone(),
                    Choice::Second => interaction.item.clone(),
                };
                return Ok(InferenceOutcome {
                    correct: chosen == interaction.item,
                    chosen,
                    explanation: answer.trim().to_string(),
                    degraded: false,
                });
            }
            debug!(attempt, "unparseable choice");
        }
        let second = rng_for(seed, &[SEED_COIN]).random_bool(0.5);
        let chosen = if second { interaction.item.clone() } else { negative.clone() };
        Ok(InferenceOutcome {
            correct: second,
            chosen,
            explanation: String::new(),
            degraded: true,
        })
    }

    fn outcome_text(outcome: &InferenceOutcome) -> String {
        let label = if outcome.correct { "B" } else { "A" };
        if outcome.explanation.is_empty() {
            format!("The simulated shopper picked Option {label}.")
        } else {
            format!(
                "The simulated shopper picked Option {label}, reasoning: {}",
                outcome.explanation
            )
        }
    }

    /// Reflection on the user's separated memory (the single memory under
    /// the single layout). Returns the write, if one happened.
    pub fn update_user_separated(
        &self,
        state: &mut MemoryState,
        interaction: &Interaction,
        negative: &ItemId,
        outcome: &InferenceOutcome,
        seed: u64,
    ) -> Result<Option<MemoryDiff>> {
        let key = state.memory_key(&interaction.domain)?;
        let before = state.user(&interaction.user)?.separated(&key)?.to_string();
        let request = PromptRequest::new(
            PromptKind::UpdateUserMemory,
            self.template(PromptKind::UpdateUserMemory),
            seed,
        )
        .slot("domain", interaction.domain.as_str())
        .slot("memory", self.slot_text(&before))
        .slot("neg", self.slot_text(&state.item(negative)?.memory))
        .slot("pos", self.slot_text(&state.item(&interaction.item)?.memory))
        .slot("outcome", Self::outcome_text(outcome));
        let completion = self.gateway.complete(&request)?;
        let after = completion.text.trim().to_string();
        state.write_separated(&interaction.user, &interaction.domain, after.clone())?;
        Ok(Some(MemoryDiff {
            target: MemoryTarget::Separated,
            owner: interaction.user.to_string(),
            domain: Some(key),
            before: memory_digest(&before),
            after: memory_digest(&after),
        }))
    }

    /// Two-step fusion: extract `domain`-relevant preferences from each other
    /// domain's non-empty separated memory, then rewrite the fused memory
    /// of `domain` from its separated memory, the extracts and the previous
    /// fused text.
    pub fn fuse(
        &self,
        state: &mut MemoryState,
        user: &UserId,
        domain: &DomainId,
        seed: u64,
        notes: &mut Vec<String>,
    ) -> Result<Option<MemoryDiff>> {
        let agent = state.user(user)?;
        let sources: Vec<(DomainId, String)> = state
            .domains
            .iter()
            .filter(|d| *d != domain)
            .filter_map(|d| {
                let memory = agent.separated(d).ok()?;
                (!memory.trim().is_empty()).then(|| (d.clone(), memory.to_string()))
            })
            .collect();
        let extracts = map_ordered(&sources, self.config.simulation.parallel_calls, |(source, memory)| {
            let request = PromptRequest::new(
                PromptKind::ExtractRelevantPreferences,
                self.template(PromptKind::ExtractRelevantPreferences),
                derive_seed(seed, &[crate::digest::str_word(source.as_str())]),
            )
            .slot("source_domain", source.as_str())
            .slot("source_memory", self.slot_text(memory))
            .slot("target_domain", domain.as_str());
            self.gateway.complete(&request)
        });
        let mut lines = Vec::new();
        for ((source, _), extract) in sources.iter().zip(extracts) {
            if let Some(c) = soft(extract, &format!("extract from {source}"), notes)? {
                let text = c.text.trim();
                let bare = text.trim_matches(|ch: char| !ch.is_alphanumeric());
                if !bare.eq_ignore_ascii_case("none") {
                    lines.push(format!("[{source}] {text}"));
                }
            }
        }

        let separated = agent.separated(domain)?.to_string();
        let before = agent.fused(domain)?.to_string();
        let request = PromptRequest::new(
            PromptKind::FusePreferences,
            self.template(PromptKind::FusePreferences),
            derive_seed(seed, &[u64::MAX]),
        )
        .slot("domain", domain.as_str())
        .slot("separated", self.slot_text(&separated))
        .slot("extracts", if lines.is_empty() { "(none)".to_string() } else { lines.join("\n") })
        .slot("fused", self.slot_text(&before));
        let Some(completion) = soft(self.gateway.complete(&request), "fuse", notes)? else {
            return Ok(None);
        };
        let after = completion.text.trim().to_string();
        state.write_fused(user, domain, after.clone())?;
        Ok(Some(MemoryDiff {
            target: MemoryTarget::Fused,
            owner: user.to_string(),
            domain: Some(domain.clone()),
            before: memory_digest(&before),
            after: memory_digest(&after),
        }))
    }

    /// Reflection on both item memories from the user's current preference
    /// text for the domain: `i` learns what it appeals to, `j` what it does
    /// not appeal to.
    pub fn update_item_memories(
        &self,
        state: &mut MemoryState,
        interaction: &Interaction,
        negative: &ItemId,
        seed: u64,
        notes: &mut Vec<String>,
    ) -> Result<Vec<MemoryDiff>> {
        let key = state.memory_key(&interaction.domain)?;
        let agent = state.user(&interaction.user)?;
        let preferences = match state.layout {
            MemoryLayout::DualLayer => agent.fused(&key)?,
            MemoryLayout::Single => agent.separated(&key)?,
        };
        let user_memory = self.slot_text(preferences);
        let jobs = [
            (
                interaction.item.clone(),
                "A shopper picked this item over an alternative. The shopper's preferences:",
                "appeals to",
            ),
            (
                negative.clone(),
                "A shopper passed over this item for an alternative. The shopper's preferences:",
                "does not appeal to",
            ),
        ];
        let mut requests = Vec::new();
        for (n, (item, relation, appeal)) in jobs.iter().enumerate() {
            requests.push(
                PromptRequest::new(
                    PromptKind::UpdateItemMemory,
                    self.template(PromptKind::UpdateItemMemory),
                    derive_seed(seed, &[n as u64]),
                )
                .slot("domain", interaction.domain.as_str())
                .slot("item_memory", self.slot_text(&state.item(item)?.memory))
                .slot("relation", *relation)
                .slot("user_memory", user_memory.clone())
                .slot("appeal", *appeal),
            );
        }
        let results = map_ordered(&requests, self.config.simulation.parallel_calls, |r| {
            self.gateway.complete(r)
        });
        let mut diffs = Vec::new();
        for ((item, _, _), result) in jobs.iter().zip(results) {
            let Some(completion) = soft(result, &format!("item {item}"), notes)? else {
                continue;
            };
            let before = memory_digest(&state.item(item)?.memory);
            let after = completion.text.trim().to_string();
            state.write_item(item, after.clone())?;
            diffs.push(MemoryDiff {
                target: MemoryTarget::Item,
                owner: item.to_string(),
                domain: Some(interaction.domain.clone()),
                before,
                after: memory_digest(&after),
            });
        }
        Ok(diffs)
    }

    /// Pushes the interaction into every group the user belongs to.
    pub fn broadcast(&self, state: &mut MemoryState, interaction: &Interaction) -> Result<Vec<MemoryDiff>> {
        let catalog = self
            .catalog
            .get(&interaction.item)
            .ok_or_else(|| Error::UnknownItem(interaction.item.to_string()))?;
        let entry = SharedEntry {
            user: interaction.user.clone(),
            item_summary: catalog.side_info().summary(),
            domain: interaction.domain.clone(),
            timestamp: interaction.timestamp,
        };
        let groups: Vec<_> = state.user(&interaction.user)?.groups.iter().cloned().collect();
        let mut diffs = Vec::new();
        for gid in groups {
            let Some(group) = state.groups.get_mut(&gid) else {
                continue;
            };
            let before = json_digest(&group.shared.entries().collect::<Vec<_>>());
            group.shared.push(entry.clone());
            diffs.push(MemoryDiff {
                target: MemoryTarget::Shared,
                owner: gid.to_string(),
                domain: Some(interaction.domain.clone()),
                before,
                after: json_digest(&group.shared.entries().collect::<Vec<_>>()),
            });
        }
        Ok(diffs)
    }

    fn check_interaction(&self, state: &MemoryState, interaction: &Interaction) -> Result<()> {
        state.check_domain(&interaction.domain).map_err(|_| {
            Error::Dataset(format!("interaction uses unconfigured domain {}", interaction.domain))
        })?;
        let item = state
            .item(&interaction.item)
            .map_err(|_| Error::Dataset(format!("interaction references unknown item {}", interaction.item)))?;
        if item.domain != interaction.domain {
            return Err(Error::Dataset(format!(
                "item {} belongs to {}, not {}",
                item.id, item.domain, interaction.domain
            )));
        }
        state.user(&interaction.user).map(|_| ())
    }

    /// Runs every phase for one interaction.
    fn process(
        &self,
        state: &mut MemoryState,
        interaction: &Interaction,
        step: usize,
        recorder: &mut Recorder<'_>,
    ) -> Result<()> {
        self.check_interaction(state, interaction)?;
        let seed = derive_seed(self.config.run.seed, &[step as u64]);
        let user = &interaction.user;
        let domain = &interaction.domain;
        self.gateway.take_call_digests();

        let negative = match self.sample_negative(user, domain, derive_seed(seed, &[SEED_NEGATIVE])) {
            Ok(j) => j,
            Err(e @ Error::NoNegativeAvailable { .. }) => {
                warn!(error = %e, step, "interaction skipped");
                return recorder.emit(
                    Phase::SampleNegative,
                    vec![interaction.item.clone()],
                    Vec::new(),
                    Some(e.to_string()),
                );
            }
            Err(e) => return Err(e),
        };
        recorder.emit(
            Phase::SampleNegative,
            vec![interaction.item.clone(), negative.clone()],
            Vec::new(),
            None,
        )?;

        let outcome = self.infer(state, interaction, &negative, derive_seed(seed, &[SEED_INFER]))?;
        recorder.emit(
            Phase::Infer,
            vec![negative.clone(), interaction.item.clone()],
            Vec::new(),
            outcome.degraded.then(|| "choice drawn by coin".to_string()),
        )?;

        let mut notes = Vec::new();
        let diff = soft(
            self.update_user_separated(state, interaction, &negative, &outcome, derive_seed(seed, &[SEED_UPDATE])),
            "separated update",
            &mut notes,
        )?
        .flatten();
        recorder.emit(Phase::UpdateSeparated, Vec::new(), diff.into_iter().collect(), join_notes(notes))?;

        if self.config.features.dual_layer {
            let mut notes = Vec::new();
            let diff = self.fuse(state, user, domain, derive_seed(seed, &[SEED_FUSE]), &mut notes)?;
            recorder.emit(Phase::Fuse, Vec::new(), diff.into_iter().collect(), join_notes(notes))?;
        }

        let mut notes = Vec::new();
        let diffs = self.update_item_memories(state, interaction, &negative, derive_seed(seed, &[SEED_ITEMS]), &mut notes)?;
        recorder.emit(
            Phase::UpdateItems,
            vec![interaction.item.clone(), negative.clone()],
            diffs,
            join_notes(notes),
        )?;

        if self.config.features.shared_groups {
            let diffs = self.broadcast(state, interaction)?;
            recorder.emit(Phase::Broadcast, vec![interaction.item.clone()], diffs, None)?;
        }
        Ok(())
    }

    /// Item titles of each user's first `upto` processed interactions.
    fn histories(&self, stream: &[Interaction], upto: usize) -> BTreeMap<UserId, Vec<String>> {
        let mut out: BTreeMap<UserId, Vec<String>> = BTreeMap::new();
        for i in &stream[..upto] {
            if let Some(item) = self.catalog.get(&i.item) {
                out.entry(i.user.clone()).or_default().push(item.title.clone());
            }
        }
        out
    }

    fn resegment(
        &self,
        state: &mut MemoryState,
        stream: &[Interaction],
        recorder: &mut Recorder<'_>,
    ) -> Result<Option<Segmentation>> {
        let group_by = self.config.features.group_by;
        let histories = match group_by {
            GroupBy::History => self.histories(stream, state.processed),
            GroupBy::Interest => BTreeMap::new(),
        };
        let digest_groups = |s: &MemoryState| {
            json_digest(
                &s.groups
                    .values()
                    .map(|g| (&g.id, &g.name, &g.member_users))
                    .collect::<Vec<_>>(),
            )
        };
        let before = digest_groups(state);
        self.gateway.take_call_digests();
        let result = resegment(
            state,
            self.gateway,
            &self.config.templates.ids,
            &self.config.groups,
            group_by,
            &histories,
            derive_seed(self.config.run.seed, &[SEED_RESEGMENT, state.processed as u64]),
            self.config.simulation.parallel_calls,
        );
        let mut notes = Vec::new();
        let segmentation = soft(result, "resegmentation", &mut notes)?;
        if let Some(seg) = &segmentation {
            if !seg.failed_users.is_empty() {
                notes.push(format!("tag extraction failed for {} users", seg.failed_users.len()));
            }
        }
        // Recorded calls of a segmentation are ordered canonically: users
        // are processed in id order, but parallel embedding may interleave.
        let diff = MemoryDiff {
            target: MemoryTarget::Groups,
            owner: "groups".into(),
            domain: None,
            before,
            after: digest_groups(state),
        };
        recorder.emit(Phase::Resegment, Vec::new(), vec![diff], join_notes(notes))?;
        Ok(segmentation)
    }

    /// The training stream: `train` in stable timestamp order, repeated
    /// once per epoch.
    pub fn stream(&self, train: &[Interaction]) -> Vec<Interaction> {
        let mut sorted = train.to_vec();
        sorted.sort_by_key(|i| i.timestamp);
        let mut stream = Vec::with_capacity(sorted.len() * self.config.run.epochs);
        for _ in 0..self.config.run.epochs {
            stream.extend(sorted.iter().cloned());
        }
        stream
    }

    /// Processes the training stream from `state.processed` onwards.
    pub fn run(
        &self,
        state: &mut MemoryState,
        train: &[Interaction],
        options: &RunOptions,
        sink: &mut dyn TraceSink,
    ) -> Result<TrainingOutcome> {
        let stream = self.stream(train);
        let total = stream.len();
        if state.processed > total {
            return Err(Error::Snapshot(format!(
                "snapshot has processed {} interactions but the stream has {total}",
                state.processed
            )));
        }
        let mut recorder = Recorder {
            sink,
            gateway: self.gateway,
            parallel: self.config.simulation.parallel_calls,
            step: 0,
            interaction: None,
            degraded: 0,
        };
        let mut segmentations = Vec::new();
        while state.processed < total {
            if options.stop_after.is_some_and(|n| state.processed >= n) {
                break;
            }
            let interaction = &stream[state.processed];
            let step = state.processed + 1;
            recorder.step = step;
            recorder.interaction = Some(interaction);
            self.process(state, interaction, step, &mut recorder)?;
            self.gateway.check_reachable(self.config.simulation.max_unavailable_streak)?;
            state.processed = step;

            if self.config.features.shared_groups
                && step.is_multiple_of(self.config.simulation.resegment_every)
                && step < total
            {
                recorder.interaction = None;
                if let Some(seg) = self.resegment(state, &stream, &mut recorder)? {
                    segmentations.push(seg);
                }
            }
            let every = self.config.simulation.snapshot_every;
            if let Some(path) = &options.checkpoint {
                if every > 0 && step.is_multiple_of(every) {
                    write_snapshot(state, path)?;
                }
            }
        }
        Ok(TrainingOutcome {
            processed: state.processed,
            total,
            degraded: recorder.degraded,
            segmentations,
        })
    }
}
