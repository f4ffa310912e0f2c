//! End-to-end runs: backend construction, training with resume, evaluation,
//! replay, and run manifests.
//!
//! A run writes its artifacts under `paths.output`:
//!
//! | file | contents |
//! |------|----------|
//! | `trace.jsonl` | trace of every training phase |
//! | `checkpoint.ndjson` | latest periodic snapshot |
//! | `snapshot.ndjson` | final trained state |
//! | `segments.jsonl` | one record per group per segmentation |
//! | `manifest.json` | training run manifest |
//! | `report.jsonl`, `report.txt` | evaluation metrics |
//! | `eval-manifest.json` | evaluation run manifest |

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::backend::{
    Backend, CacheMode, Gateway, HttpBackend, ReplayCache, ScriptedBackend, TemplateSet,
};
use crate::config::{BackendKind, RunConfig};
use crate::dataset::Bundle;
use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::evaluation::{Evaluator, MetricReport};
use crate::groups::Segmentation;
use crate::memory::MemoryLayout;
use crate::simulation::{
    read_trace, steps_digest, truncate_trace, RunOptions, Simulator, TraceEnd, TraceHeader, TraceRecord,
    TraceSink, TraceWriter, TRACE_VERSION,
};
use crate::snapshot::{read_snapshot, snapshot_digest, write_atomic, write_snapshot};

pub const TRACE_FILE: &str = "trace.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ndjson";
pub const SNAPSHOT_FILE: &str = "snapshot.ndjson";
pub const SEGMENTS_FILE: &str = "segments.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVAL_MANIFEST_FILE: &str = "eval-manifest.json";
pub const REPORT_FILE: &str = "report.jsonl";
pub const REPORT_TABLE_FILE: &str = "report.txt";

/// Builds the backend selected by the config.
pub fn build_backend(config: &RunConfig) -> Result<Arc<dyn Backend>> {
    let b = &config.backend;
    let http = || -> Result<Arc<dyn Backend>> {
        let http = b
            .http
            .clone()
            .ok_or_else(|| Error::Config("backend.http is required".into()))?;
        Ok(Arc::new(HttpBackend::new(http)?))
    };
    Ok(match b.kind {
        BackendKind::Scripted => {
            let rules = b
                .rules
                .as_ref()
                .ok_or_else(|| Error::Config("scripted backend requires backend.rules".into()))?;
            Arc::new(ScriptedBackend::load(rules)?)
        }
        BackendKind::Replay => {
            let cache = b
                .cache
                .as_ref()
                .ok_or_else(|| Error::Config("replay backend requires backend.cache".into()))?;
            if b.record {
                Arc::new(ReplayCache::open(cache, CacheMode::RecordThrough, Some(http()?))?)
            } else {
                Arc::new(ReplayCache::open(cache, CacheMode::ReplayOnly, None)?)
            }
        }
        BackendKind::Live => match &b.cache {
            Some(cache) => Arc::new(ReplayCache::open(cache, CacheMode::RecordThrough, Some(http()?))?),
            None => http()?,
        },
    })
}

pub fn build_gateway(config: &RunConfig) -> Result<Gateway> {
    let templates = match &config.templates.path {
        Some(path) => TemplateSet::load(path)?,
        None => TemplateSet::builtin(),
    };
    for kind in crate::backend::PromptKind::ALL {
        templates.get(config.templates.ids.get(kind))?;
    }
    Ok(Gateway::new(templates, build_backend(config)?))
}

/// Record of one CLI run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub run_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    pub config_digest: String,
    pub dataset_digest: String,
    pub seeds: BTreeMap<String, u64>,
    pub backend: String,
    pub started_at: String,
    pub finished_at: String,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub degraded: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_snapshot_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_digest: Option<String>,
    /// Digest of the inputs that determine the run's results.
    pub identity_digest: String,
}

impl RunManifest {
    fn new(command: &str, config: &RunConfig, dataset_digest: String, backend: String, started_at: String) -> Self {
        let seeds: BTreeMap<String, u64> = [("run".to_string(), config.run.seed)].into_iter().collect();
        let config_digest = config.digest();
        let identity_digest = json_digest(&(command, &config_digest, &dataset_digest, &seeds, &backend));
        Self {
            command: command.into(),
            run_name: config.run.name.clone(),
            variant: config.features.variant().map(|v| v.name().to_string()),
            config_digest,
            dataset_digest,
            seeds,
            backend,
            started_at,
            finished_at: String::new(),
            artifacts: BTreeMap::new(),
            degraded: 0,
            final_snapshot_digest: None,
            trace_digest: None,
            identity_digest,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable") + "\n";
        write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn expected_layout(config: &RunConfig) -> MemoryLayout {
    if config.features.dual_layer {
        MemoryLayout::DualLayer
    } else {
        MemoryLayout::Single
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from the latest periodic snapshot if there is one.
    pub resume: bool,
    /// Stop abruptly after this many interactions, as if interrupted.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub processed: usize,
    pub total: usize,
    pub degraded: usize,
    /// Written only when training completed.
    pub manifest: Option<RunManifest>,
}

fn append_segments(path: &Path, segmentations: &[Segmentation]) -> Result<()> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for seg in segmentations {
        for group in &seg.groups {
            let line = serde_json::to_string(group).expect("serializable");
            writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

fn truncate_segments(path: &Path, segmentation: u32) -> Result<()> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(());
    };
    let kept: String = text
        .lines()
        .filter(|l| {
            serde_json::from_str::<serde_json::Value>(l)
                .ok()
                .and_then(|v| v["segmentation"].as_u64())
                .is_some_and(|s| s <= segmentation as u64)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    write_atomic(path, kept.as_bytes())
}

fn trace_header(path: &Path) -> Result<TraceHeader> {
    match read_trace(path)?.into_iter().next() {
        Some(TraceRecord::Header(h)) => Ok(h),
        _ => Err(Error::Replay(format!("{} has no header record", path.display()))),
    }
}

/// Trains under `config`, writing artifacts to `config.paths.output`.
pub fn train(config: &RunConfig, options: &TrainOptions) -> Result<TrainSummary> {
    let started_at = now();
    let bundle = Bundle::load(&config.paths.dataset)?;
    let dataset_digest = bundle.manifest.digest();
    let gateway = build_gateway(config)?;
    let sim = Simulator::from_bundle(config, &gateway, &bundle);
    let out = &config.paths.output;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let trace_path = out.join(TRACE_FILE);
    let checkpoint = out.join(CHECKPOINT_FILE);
    let segments = out.join(SEGMENTS_FILE);
    let header = TraceHeader {
        version: TRACE_VERSION,
        config_digest: config.digest(),
        dataset_digest: dataset_digest.clone(),
        backend: gateway.backend_identity(),
    };

    let resumable = options.resume && checkpoint.exists() && trace_path.exists();
    let (mut state, mut writer) = if resumable {
        let found = trace_header(&trace_path)?;
        if found.config_digest != header.config_digest || found.dataset_digest != header.dataset_digest {
            return Err(Error::Replay(
                "cannot resume: config or dataset differs from the interrupted run".into(),
            ));
        }
        let state = read_snapshot(&checkpoint)?;
        if state.layout != expected_layout(config) {
            return Err(Error::Snapshot("checkpoint layout does not match the config".into()));
        }
        truncate_trace(&trace_path, state.processed)?;
        truncate_segments(&segments, state.segmentation)?;
        (state, TraceWriter::append(&trace_path)?)
    } else {
        for stale in [&checkpoint, &segments, &out.join(SNAPSHOT_FILE), &out.join(MANIFEST_FILE)] {
            if stale.exists() {
                std::fs::remove_file(stale).map_err(|e| Error::io(stale, e))?;
            }
        }
        let state = sim.initial_state(bundle.manifest.domains.clone())?;
        let mut writer = TraceWriter::create(&trace_path)?;
        writer.record(TraceRecord::Header(header))?;
        (state, writer)
    };

    let run_options = RunOptions {
        stop_after: options.stop_after,
        checkpoint: Some(checkpoint.clone()),
    };
    let outcome = sim.run(&mut state, &bundle.split.train, &run_options, &mut writer)?;
    append_segments(&segments, &outcome.segmentations)?;
    if !outcome.completed() {
        return Ok(TrainSummary {
            processed: outcome.processed,
            total: outcome.total,
            degraded: outcome.degraded,
            manifest: None,
        });
    }

    let final_path = out.join(SNAPSHOT_FILE);
    let final_digest = write_snapshot(&state, &final_path)?;
    let records = read_trace(&trace_path)?;
    let degraded = records
        .iter()
        .filter_map(TraceRecord::as_step)
        .filter(|s| s.degraded)
        .count();
    let trace_digest = steps_digest(&records);
    writer.record(TraceRecord::End(TraceEnd {
        steps: outcome.processed,
        records: records.len() - 1,
        degraded,
        final_snapshot_digest: final_digest.clone(),
    }))?;
    drop(writer);

    let mut manifest = RunManifest::new("train", config, dataset_digest, gateway.backend_identity(), started_at);
    manifest.finished_at = now();
    manifest.degraded = degraded;
    manifest.final_snapshot_digest = Some(final_digest);
    manifest.trace_digest = Some(trace_digest);
    for (name, file) in [
        ("trace", TRACE_FILE),
        ("snapshot", SNAPSHOT_FILE),
        ("checkpoint", CHECKPOINT_FILE),
        ("segments", SEGMENTS_FILE),
    ] {
        manifest.artifacts.insert(name.into(), out.join(file));
    }
    manifest.artifacts.insert("dataset".into(), config.paths.dataset.clone());
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(TrainSummary {
        processed: outcome.processed,
        total: outcome.total,
        degraded,
        manifest: Some(manifest),
    })
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub report: MetricReport,
    pub manifest: RunManifest,
}

/// Evaluates a trained snapshot and writes the report files.
pub fn evaluate(config: &RunConfig, snapshot: &Path, runs: Option<usize>) -> Result<EvalSummary> {
    let started_at = now();
    let state = read_snapshot(snapshot)?;
    if state.layout != expected_layout(config) {
        return Err(Error::Config("snapshot memory layout does not match the config features".into()));
    }
    let bundle = Bundle::load(&config.paths.dataset)?;
    let gateway = build_gateway(config)?;
    let runs = runs.unwrap_or(config.evaluation.runs);
    if runs == 0 {
        return Err(Error::Config("at least one evaluation run is required".into()));
    }
    let evaluator = Evaluator::new(config, &gateway, &state, &bundle);
    let report = evaluator.evaluate(runs)?;

    let out = &config.paths.output;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    report.write(&out.join(REPORT_FILE), &out.join(REPORT_TABLE_FILE))?;
    let mut manifest = RunManifest::new("eval", config, bundle.manifest.digest(), gateway.backend_identity(), started_at);
    manifest.finished_at = now();
    manifest.degraded = report.degraded();
    manifest.final_snapshot_digest = Some(snapshot_digest(&state));
    manifest.artifacts.insert("snapshot".into(), snapshot.to_path_buf());
    manifest.artifacts.insert("report".into(), out.join(REPORT_FILE));
    manifest.artifacts.insert("table".into(), out.join(REPORT_TABLE_FILE));
    manifest.write(&out.join(EVAL_MANIFEST_FILE))?;
    Ok(EvalSummary { report, manifest })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplaySummary {
    pub steps: usize,
    pub final_snapshot_digest: String,
}

/// Re-runs the training recorded in `trace` and checks that every step
/// record and the final snapshot digest come out identical.
pub fn replay(config: &RunConfig, trace: &Path) -> Result<ReplaySummary> {
    let recorded = read_trace(trace)?;
    let Some(TraceRecord::Header(header)) = recorded.first() else {
        return Err(Error::Replay("trace has no header record".into()));
    };
    let Some(TraceRecord::End(end)) = recorded.last() else {
        return Err(Error::Replay("trace has no end record; it is truncated or the run was interrupted".into()));
    };
    if header.config_digest != config.digest() {
        return Err(Error::Replay(format!(
            "config digest {} does not match the trace's {}",
            config.digest(),
            header.config_digest
        )));
    }
    let bundle = Bundle::load(&config.paths.dataset)?;
    if header.dataset_digest != bundle.manifest.digest() {
        return Err(Error::Replay("dataset differs from the one the trace was recorded on".into()));
    }
    let gateway = build_gateway(config)?;
    let sim = Simulator::from_bundle(config, &gateway, &bundle);
    let mut state = sim.initial_state(bundle.manifest.domains.clone())?;
    let mut fresh: Vec<TraceRecord> = Vec::new();
    sim.run(&mut state, &bundle.split.train, &RunOptions::default(), &mut fresh)?;

    let old: Vec<_> = recorded.iter().filter_map(TraceRecord::as_step).collect();
    let new: Vec<_> = fresh.iter().filter_map(TraceRecord::as_step).collect();
    if let Some(n) = (0..old.len().max(new.len())).find(|&n| old.get(n) != new.get(n)) {
        let at = old.get(n).or(new.get(n)).map(|s| (s.step, s.phase));
        return Err(Error::Replay(format!("replay diverges at record {} ({at:?})", n + 1)));
    }
    let digest = snapshot_digest(&state);
    if digest != end.final_snapshot_digest {
        return Err(Error::Replay(format!(
            "final snapshot digest {digest} differs from recorded {}",
            end.final_snapshot_digest
        )));
    }
    Ok(ReplaySummary {
        steps: state.processed,
        final_snapshot_digest: digest,
    })
}
