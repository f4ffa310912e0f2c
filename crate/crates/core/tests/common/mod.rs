//! Shared fixtures for integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use memsim_core::backend::{CallRecord, EmbeddingFallback, Gateway, PromptKind, ScriptedBackend, ScriptedRule, TemplateSet};
use memsim_core::config::{RunConfig, Variant};
use memsim_core::dataset::{Bundle, CatalogItem, DatasetSpec, Interaction};
use memsim_core::memory::MemoryState;
use memsim_core::pipeline;
use memsim_core::simulation::{RunOptions, Simulator, TraceRecord};
use memsim_core::{DomainId, ItemId, UserId};

/// Snapshot digest of the golden run under the full variant.
pub const GOLDEN_SNAPSHOT_DIGEST: &str = "03134c57a0a9a54fa526acbed9cef14d0487f5b24974aed7b79dc8a1191fb0c6";
/// Digest of the step records of the golden run under the full variant.
pub const GOLDEN_TRACE_DIGEST: &str = "69bb704bee283b9c89a66bf2c2ec5185b0c9b1615503aa2b4d3feb049ae4478f";

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/golden")
}

/// A prepared copy of the golden dataset and a config writing into a
/// temporary directory.
pub struct World {
    pub dir: tempfile::TempDir,
    pub config: RunConfig,
    pub bundle: Bundle,
}

impl World {
    pub fn new(variant: Variant) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = DatasetSpec::load(&golden_dir().join("dataset.toml")).unwrap();
        spec.output = dir.path().join("bundle");
        let bundle = Bundle::prepare(&spec).unwrap();
        bundle.write(&spec.output, false).unwrap();

        let mut config = RunConfig::load(&golden_dir().join("config.toml")).unwrap();
        config.apply_variant(variant);
        config.paths.dataset = spec.output.clone();
        config.paths.output = dir.path().join("run");
        Self { dir, config, bundle }
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.config.paths.output.join(name)
    }

    /// Trains in memory with a call-logging gateway.
    pub fn simulate(&self) -> Simulated {
        let gateway = pipeline::build_gateway(&self.config).unwrap().with_call_log();
        simulate_with(&self.config, &gateway, &self.bundle.items, self.bundle.interacted(), &self.bundle.manifest.domains, &self.bundle.split.train)
    }
}

/// Outcome of an in-memory training run.
pub struct Simulated {
    pub state: MemoryState,
    pub trace: Vec<TraceRecord>,
    pub calls: Vec<CallRecord>,
    /// Copies of the state after each processed interaction.
    pub states: Vec<MemoryState>,
}

pub fn simulate_with(
    config: &RunConfig,
    gateway: &Gateway,
    items: &[CatalogItem],
    interacted: BTreeMap<UserId, BTreeSet<ItemId>>,
    domains: &[DomainId],
    train: &[Interaction],
) -> Simulated {
    let sim = Simulator::new(config, gateway, items, interacted);
    let mut state = sim.initial_state(domains.to_vec()).unwrap();
    let mut trace = Vec::new();
    let mut states = vec![state.clone()];
    for stop in 1..=sim.stream(train).len() {
        let options = RunOptions {
            stop_after: Some(stop),
            checkpoint: None,
        };
        sim.run(&mut state, train, &options, &mut trace).unwrap();
        states.push(state.clone());
    }
    Simulated {
        state,
        trace,
        calls: gateway.calls(),
        states,
    }
}

/// Rules that make every write distinct, so any stray write shows up.
pub fn echo_rules() -> Vec<ScriptedRule> {
    use PromptKind::*;
    vec![
        ScriptedRule::for_kind(ChoosePositive, "Choice: B\nfits"),
        ScriptedRule::for_kind(UpdateUserMemory, "{domain} pick {pos} #{seed}"),
        ScriptedRule::for_kind(ExtractRelevantPreferences, "from {source_domain} #{seed}"),
        ScriptedRule::for_kind(FusePreferences, "{separated} | {extracts} #{seed}"),
        ScriptedRule::for_kind(UpdateItemMemory, "{appeal} #{seed}"),
        ScriptedRule::for_kind(ExtractTags, "board games; long walks"),
        ScriptedRule::for_kind(NameGroup, "Group of {tags}"),
        ScriptedRule::catch_all("ok"),
    ]
}

pub fn echo_gateway() -> Gateway {
    let backend = ScriptedBackend::new(echo_rules(), Vec::new(), EmbeddingFallback::Hashed { dimension: 16 }).unwrap();
    Gateway::new(TemplateSet::builtin(), Arc::new(backend)).with_call_log()
}

/// A random catalog over `domains` domains and a random positive stream.
pub struct RandomWorld {
    pub domains: Vec<DomainId>,
    pub items: Vec<CatalogItem>,
    pub train: Vec<Interaction>,
}

impl RandomWorld {
    pub fn new(seed: u64, domains: usize, users: usize, interactions: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let domain_ids: Vec<DomainId> = (0..domains).map(|d| DomainId::from(format!("D{d}").as_str())).collect();
        let mut items = Vec::new();
        for d in &domain_ids {
            for n in 0..5 {
                items.push(CatalogItem {
                    item_id: ItemId::from(format!("{d}-i{n}").as_str()),
                    domain: d.clone(),
                    title: format!("{d} title {n}"),
                    category: format!("{d} category"),
                });
            }
        }
        let mut train = Vec::new();
        let mut seen: BTreeSet<(usize, usize)> = BTreeSet::new();
        let mut t = 0;
        while train.len() < interactions {
            let user = rng.random_range(0..users);
            let item = rng.random_range(0..items.len());
            // Leave at least one unseen item per domain for negatives.
            if !seen.insert((user, item)) || item % 5 == 4 {
                continue;
            }
            let chosen: &CatalogItem = &items[item];
            t += rng.random_range(1..5);
            train.push(Interaction {
                user: UserId::from(format!("u{user}").as_str()),
                item: chosen.item_id.clone(),
                domain: chosen.domain.clone(),
                timestamp: t,
                rating: *[4.0, 5.0].choose(&mut rng).unwrap(),
            });
        }
        Self {
            domains: domain_ids,
            items,
            train,
        }
    }

    pub fn interacted(&self) -> BTreeMap<UserId, BTreeSet<ItemId>> {
        let mut out: BTreeMap<UserId, BTreeSet<ItemId>> = BTreeMap::new();
        for i in &self.train {
            out.entry(i.user.clone()).or_default().insert(i.item.clone());
        }
        out
    }

    pub fn simulate(&self, config: &RunConfig) -> Simulated {
        let gateway = echo_gateway();
        simulate_with(config, &gateway, &self.items, self.interacted(), &self.domains, &self.train)
    }
}

/// Digest of every domain-scoped memory: `(kind, owner, domain) -> text`.
pub fn domain_memories(state: &MemoryState) -> BTreeMap<(String, String, DomainId), String> {
    let mut out = BTreeMap::new();
    for (id, user) in &state.users {
        for (d, text) in user.separated_memories() {
            out.insert(("separated".to_string(), id.to_string(), d.clone()), text.to_string());
        }
        for (d, text) in user.fused_memories() {
            out.insert(("fused".to_string(), id.to_string(), d.clone()), text.to_string());
        }
    }
    for (id, item) in &state.items {
        out.insert(("item".to_string(), id.to_string(), item.domain.clone()), item.memory.clone());
    }
    out
}

/// Checks that choose-positive prompts place the negative's text before
/// the positive's. Returns the number of prompts checked.
pub fn check_ordering(calls: &[CallRecord]) -> Result<usize, String> {
    let mut checked = 0;
    for call in calls {
        let CallRecord::Completion { request, prompt, .. } = call else {
            continue;
        };
        if request.kind != PromptKind::ChoosePositive {
            continue;
        }
        let neg = &request.slots["neg"];
        let pos = &request.slots["pos"];
        // Memories earlier in the prompt may quote item text, so compare
        // the last occurrences, which are the item slots themselves.
        let (Some(n), Some(p)) = (prompt.rfind(neg.as_str()), prompt.rfind(pos.as_str())) else {
            return Err(format!("item text missing from prompt:\n{prompt}"));
        };
        if n + neg.len() > p {
            return Err(format!("negative at {n} does not precede positive at {p}:\n{prompt}"));
        }
        checked += 1;
    }
    Ok(checked)
}
