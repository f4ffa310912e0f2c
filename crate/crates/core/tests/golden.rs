//! End-to-end runs over the shipped golden dataset.

mod common;

use std::fs;

use memsim_core::backend::{CallRecord, PromptKind};
use memsim_core::config::Variant;
use memsim_core::digest::sha256_hex;
use memsim_core::pipeline::{self, TrainOptions};
use memsim_core::simulation::{read_trace, steps_digest, Phase, TraceRecord};
use memsim_core::{DomainId, Error, ItemId, UserId};

use common::World;

fn train(world: &World) -> pipeline::TrainSummary {
    pipeline::train(&world.config, &TrainOptions::default()).unwrap()
}

fn read(world: &World, name: &str) -> String {
    fs::read_to_string(world.artifact(name)).unwrap()
}

#[test]
fn reruns_are_byte_identical() {
    let a = World::new(Variant::Full);
    let b = World::new(Variant::Full);
    train(&a);
    train(&b);
    for name in [pipeline::SNAPSHOT_FILE, pipeline::TRACE_FILE, pipeline::SEGMENTS_FILE] {
        assert_eq!(read(&a, name), read(&b, name), "{name} differs");
    }
}

#[test]
fn digests_match_frozen_values() {
    let world = World::new(Variant::Full);
    let summary = train(&world);
    let manifest = summary.manifest.unwrap();
    let snapshot = fs::read(world.artifact(pipeline::SNAPSHOT_FILE)).unwrap();
    assert_eq!(sha256_hex(&snapshot), common::GOLDEN_SNAPSHOT_DIGEST);
    assert_eq!(manifest.final_snapshot_digest.as_deref(), Some(common::GOLDEN_SNAPSHOT_DIGEST));
    assert_eq!(manifest.trace_digest.as_deref(), Some(common::GOLDEN_TRACE_DIGEST));
    assert_eq!(summary.processed, 14);
}

#[test]
fn parallel_calls_do_not_change_results() {
    let mut traces = Vec::new();
    for _ in 0..2 {
        let mut world = World::new(Variant::Full);
        world.config.simulation.parallel_calls = true;
        let manifest = train(&world).manifest.unwrap();
        assert_eq!(manifest.final_snapshot_digest.as_deref(), Some(common::GOLDEN_SNAPSHOT_DIGEST));
        traces.push(manifest.trace_digest);
    }
    // Calls are recorded in canonical order, so the trace is stable too.
    assert_eq!(traces[0], traces[1]);
}

#[test]
fn every_variant_completes_deterministically() {
    for variant in Variant::ALL {
        let a = World::new(variant);
        let b = World::new(variant);
        let da = train(&a).manifest.unwrap().final_snapshot_digest;
        let db = train(&b).manifest.unwrap().final_snapshot_digest;
        assert_eq!(da, db, "{variant}");
    }
}

/// Expected memories after the first interactions, worked out from the
/// rule file by hand.
#[test]
fn memory_transcript_follows_the_rules() {
    let world = World::new(Variant::Full);
    let sim = world.simulate();
    let u1 = UserId::from("u1");
    let books = DomainId::from("Books");
    let movies = DomainId::from("Movies");
    let item = |step: usize, id: &str| sim.states[step].item(&ItemId::from(id)).unwrap().memory.clone();

    // Step 1: u1 picks b1 in Books with nothing else known.
    let after1 = sim.states[1].user(&u1).unwrap();
    let b1 = item(0, "b1");
    assert_eq!(b1, "Title: The Long Voyage; Category: Fantasy > Epic");
    let separated = format!("Prefers Books items like: {b1}");
    assert_eq!(after1.separated(&books).unwrap(), separated);
    assert_eq!(after1.fused(&books).unwrap(), format!("{separated}\nCarried over: (none)"));
    assert_eq!(item(1, "b1"), format!("{b1}\nChosen by a Books shopper."));

    // Step 4: u1 picks m1 in Movies; the Books memory mentions fantasy.
    let after4 = sim.states[4].user(&u1).unwrap();
    let m1 = item(3, "m1");
    let separated = format!("Prefers Movies items like: {m1}");
    assert_eq!(after4.separated(&movies).unwrap(), separated);
    assert_eq!(
        after4.fused(&movies).unwrap(),
        format!("{separated}\nCarried over: [Books] enjoys fantasy worlds")
    );
    // Books memories are untouched by a Movies interaction.
    assert_eq!(after4.separated(&books).unwrap(), sim.states[3].user(&u1).unwrap().separated(&books).unwrap());
    assert_eq!(after4.fused(&books).unwrap(), sim.states[3].user(&u1).unwrap().fused(&books).unwrap());
}

#[test]
fn puzzle_negatives_are_chosen_and_reflected() {
    let world = World::new(Variant::Full);
    let sim = world.simulate();
    let mut seen = 0;
    for call in &sim.calls {
        let CallRecord::Completion { request, response, .. } = call else { continue };
        if request.kind == PromptKind::UpdateUserMemory && request.slots["neg"].contains("Puzzle") {
            assert!(request.slots["outcome"].contains("Option A"), "{:?}", request.slots["outcome"]);
            assert!(response.as_deref().unwrap().starts_with("Prefers Games items like"));
            seen += 1;
        }
    }
    assert!(seen > 0, "golden run never drew the puzzle as a negative");
}

#[test]
fn fusion_extracts_each_other_domain_in_order_then_fuses() {
    let world = World::new(Variant::Full);
    let sim = world.simulate();
    let domains = &world.bundle.manifest.domains;
    let completions: Vec<_> = sim
        .calls
        .iter()
        .filter_map(|c| match c {
            CallRecord::Completion { request, .. } => Some(request),
            CallRecord::Embedding { .. } => None,
        })
        .collect();
    let mut fusions = 0;
    for (n, request) in completions.iter().enumerate() {
        if request.kind != PromptKind::FusePreferences {
            continue;
        }
        fusions += 1;
        let target = &request.slots["domain"];
        // The extracts for this fusion sit right before it.
        let mut sources = Vec::new();
        for prior in completions[..n].iter().rev() {
            if prior.kind != PromptKind::ExtractRelevantPreferences {
                break;
            }
            assert_eq!(&prior.slots["target_domain"], target);
            sources.push(prior.slots["source_domain"].clone());
        }
        sources.reverse();
        let order: Vec<String> = domains
            .iter()
            .map(|d| d.to_string())
            .filter(|d| sources.contains(d))
            .collect();
        assert_eq!(sources, order, "extracts out of domain order");
        assert!(!sources.contains(target));
        let previous = completions[n - 1 - sources.len()];
        assert_eq!(previous.kind, PromptKind::UpdateUserMemory);
    }
    assert_eq!(fusions, 14);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let world = World::new(Variant::Full);
    // Checkpoints land every 4 interactions; stop between two of them.
    let partial = pipeline::train(
        &world.config,
        &TrainOptions {
            resume: false,
            stop_after: Some(10),
        },
    )
    .unwrap();
    assert_eq!(partial.processed, 10);
    assert!(partial.manifest.is_none());
    assert!(!world.artifact(pipeline::SNAPSHOT_FILE).exists());

    let resumed = pipeline::train(
        &world.config,
        &TrainOptions {
            resume: true,
            stop_after: None,
        },
    )
    .unwrap();
    let manifest = resumed.manifest.unwrap();
    assert_eq!(manifest.final_snapshot_digest.as_deref(), Some(common::GOLDEN_SNAPSHOT_DIGEST));
    assert_eq!(manifest.trace_digest.as_deref(), Some(common::GOLDEN_TRACE_DIGEST));

    let fresh = World::new(Variant::Full);
    train(&fresh);
    assert_eq!(read(&world, pipeline::TRACE_FILE), read(&fresh, pipeline::TRACE_FILE));
    assert_eq!(read(&world, pipeline::SEGMENTS_FILE), read(&fresh, pipeline::SEGMENTS_FILE));
}

#[test]
fn resume_refuses_a_changed_config() {
    let mut world = World::new(Variant::Full);
    pipeline::train(
        &world.config,
        &TrainOptions {
            resume: false,
            stop_after: Some(5),
        },
    )
    .unwrap();
    world.config.run.seed += 1;
    let err = pipeline::train(
        &world.config,
        &TrainOptions {
            resume: true,
            stop_after: None,
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::Replay(_)), "{err}");
}

#[test]
fn replay_reproduces_the_trace() {
    let world = World::new(Variant::Full);
    train(&world);
    let summary = pipeline::replay(&world.config, &world.artifact(pipeline::TRACE_FILE)).unwrap();
    assert_eq!(summary.steps, 14);
    assert_eq!(summary.final_snapshot_digest, common::GOLDEN_SNAPSHOT_DIGEST);
}

#[test]
fn replay_rejects_truncated_tampered_or_foreign_traces() {
    let mut world = World::new(Variant::Full);
    train(&world);
    let trace = world.artifact(pipeline::TRACE_FILE);
    let text = read(&world, pipeline::TRACE_FILE);
    let lines: Vec<&str> = text.lines().collect();

    let truncated = world.dir.path().join("truncated.jsonl");
    fs::write(&truncated, lines[..lines.len() / 2].join("\n") + "\n").unwrap();
    assert!(matches!(pipeline::replay(&world.config, &truncated), Err(Error::Replay(_))));

    // Alter one recorded memory diff.
    let mut records = read_trace(&trace).unwrap();
    let step = records
        .iter_mut()
        .find_map(|r| match r {
            TraceRecord::Step(s) if s.phase == Phase::UpdateSeparated => Some(s),
            _ => None,
        })
        .unwrap();
    step.diffs[0].after = "0".repeat(64);
    let tampered = world.dir.path().join("tampered.jsonl");
    let body: String = records.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    fs::write(&tampered, body).unwrap();
    let err = pipeline::replay(&world.config, &tampered).unwrap_err();
    assert!(matches!(err, Error::Replay(ref m) if m.contains("diverges")), "{err}");

    world.config.run.seed += 1;
    assert!(matches!(pipeline::replay(&world.config, &trace), Err(Error::Replay(_))));
}

#[test]
fn trace_steps_cover_every_interaction() {
    let world = World::new(Variant::Full);
    train(&world);
    let records = read_trace(&world.artifact(pipeline::TRACE_FILE)).unwrap();
    assert!(matches!(records.first(), Some(TraceRecord::Header(_))));
    let Some(TraceRecord::End(end)) = records.last() else { panic!("no end record") };
    assert_eq!(end.steps, 14);
    let steps: std::collections::BTreeSet<usize> = records.iter().filter_map(|r| r.as_step()).map(|s| s.step).collect();
    assert_eq!(steps, (1..=14).collect());
    // Resegmentation after step 6 and 12, never after the last step.
    let reseg: Vec<usize> = records
        .iter()
        .filter_map(|r| r.as_step())
        .filter(|s| s.phase == Phase::Resegment)
        .map(|s| s.step)
        .collect();
    assert_eq!(reseg, [6, 12]);
    assert_eq!(steps_digest(&records), common::GOLDEN_TRACE_DIGEST);
}

#[test]
fn evaluation_report_is_reproducible() {
    let world = World::new(Variant::Full);
    train(&world);
    let snapshot = world.artifact(pipeline::SNAPSHOT_FILE);
    let first = pipeline::evaluate(&world.config, &snapshot, None).unwrap();
    let second = pipeline::evaluate(&world.config, &snapshot, None).unwrap();
    assert_eq!(first.report, second.report);
    assert_eq!(first.report.runs.len(), 2 * world.config.evaluation.methods.len());
    assert!(world.artifact(pipeline::REPORT_FILE).exists());
    assert!(world.artifact(pipeline::REPORT_TABLE_FILE).exists());
    let table = read(&world, pipeline::REPORT_TABLE_FILE);
    for method in ["agent", "pop", "seq-sim", "llm-rank"] {
        assert!(table.contains(method), "{table}");
    }
}

#[test]
fn evaluation_rejects_a_snapshot_of_another_layout() {
    let mut world = World::new(Variant::Full);
    train(&world);
    let snapshot = world.artifact(pipeline::SNAPSHOT_FILE);
    world.config.apply_variant(Variant::Baseline);
    assert!(matches!(pipeline::evaluate(&world.config, &snapshot, None), Err(Error::Config(_))));
}
