//! A three-user scenario showing popularity spreading through a group.
//!
//! Alice, Bob and Carl each buy outdoor gear at `t1` and end up in one
//! interest group. At `t2` Bob and Carl buy rain gear, and at `t3` Carl buys
//! a tent. Alice does nothing after `t1`, so any change in what she sees
//! comes from the other two.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::backend::{EmbeddingFallback, Gateway, PromptKind, ScriptedBackend, ScriptedRule, TemplateSet};
use crate::config::{RunConfig, Variant};
use crate::dataset::{CatalogItem, Interaction};
use crate::error::Result;
use crate::ids::{DomainId, ItemId, UserId};
use crate::memory::DecisionContext;

use super::{RunOptions, Simulator, TraceRecord};

pub const T1: i64 = 1_000;
pub const T2: i64 = 2_000;
pub const T3: i64 = 3_000;

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    /// Alice's decision context after the `t1`, `t2` and `t3` interactions.
    pub alice: [DecisionContext; 3],
    pub trace: Vec<TraceRecord>,
}

fn item(id: &str, title: &str, category: &str) -> CatalogItem {
    CatalogItem {
        item_id: ItemId::from(id),
        domain: DomainId::from("Outdoor"),
        title: title.into(),
        category: category.into(),
    }
}

fn interaction(user: &str, item: &str, timestamp: i64) -> Interaction {
    Interaction {
        user: user.into(),
        item: item.into(),
        domain: "Outdoor".into(),
        timestamp,
        rating: 5.0,
    }
}

fn rules() -> Vec<ScriptedRule> {
    use PromptKind::*;
    vec![
        ScriptedRule::for_kind(ChoosePositive, "Choice: B\nIt suits time outdoors."),
        ScriptedRule::for_kind(UpdateUserMemory, "Enjoys outdoor activities and practical gear."),
        ScriptedRule::for_kind(ExtractRelevantPreferences, "none"),
        ScriptedRule::for_kind(FusePreferences, "Outdoor enthusiast who values practical gear."),
        ScriptedRule::for_kind(UpdateItemMemory, "Suits shoppers who spend time outdoors."),
        ScriptedRule::for_kind(ExtractTags, "outdoor gear"),
        ScriptedRule::for_kind(NameGroup, "Outdoor Enthusiasts"),
        ScriptedRule::catch_all("ok"),
    ]
}

/// Runs the scenario under `variant` with a scripted backend.
pub fn popularity_scenario(variant: Variant) -> Result<ScenarioOutcome> {
    let catalog = vec![
        item("boots", "Trail Hiking Boots", "Footwear"),
        item("fleece", "Hiking Fleece", "Clothing"),
        item("daypack", "Daypack 30L", "Bags"),
        item("raincoat", "Waterproof Rain Jacket", "Rain Gear"),
        item("rainboots", "Rubber Rain Boots", "Rain Gear"),
        item("tent", "Two-Person Camping Tent", "Camping Equipment"),
        item("chair", "Folding Camp Chair", "Furniture"),
        item("bottle", "Insulated Water Bottle", "Hydration"),
    ];
    let stream = vec![
        interaction("alice", "boots", T1),
        interaction("bob", "fleece", T1),
        interaction("carl", "daypack", T1),
        interaction("bob", "raincoat", T2),
        interaction("carl", "rainboots", T2),
        interaction("carl", "tent", T3),
    ];
    let mut interacted: BTreeMap<UserId, BTreeSet<ItemId>> = BTreeMap::new();
    for i in &stream {
        interacted.entry(i.user.clone()).or_default().insert(i.item.clone());
    }

    let mut config = RunConfig::default();
    config.apply_variant(variant);
    config.simulation.resegment_every = 3;
    config.simulation.snapshot_every = 0;
    let backend = ScriptedBackend::new(rules(), Vec::new(), EmbeddingFallback::Hashed { dimension: 16 })?;
    let gateway = Gateway::new(TemplateSet::builtin(), Arc::new(backend));
    let sim = Simulator::new(&config, &gateway, &catalog, interacted);
    let mut state = sim.initial_state(vec!["Outdoor".into()])?;

    let alice = UserId::from("alice");
    let outdoor = DomainId::from("Outdoor");
    let mut trace = Vec::new();
    let mut contexts = Vec::new();
    for stop in [3, 5, 6] {
        let options = RunOptions {
            stop_after: Some(stop),
            checkpoint: None,
        };
        sim.run(&mut state, &stream, &options, &mut trace)?;
        contexts.push(state.decision_context(&alice, &outdoor, sim.context_options())?);
    }
    Ok(ScenarioOutcome {
        alice: contexts.try_into().expect("three checkpoints"),
        trace,
    })
}
