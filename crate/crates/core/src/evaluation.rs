//! Ranking evaluation.
//!
//! For every held-out interaction the true item is mixed with distractors
//! from the same domain that the user never interacted with. Each method
//! ranks the candidates and the rank of the true item is scored with MRR
//! and NDCG. The whole protocol is repeated for several runs with fresh
//! candidates and presentation order; trained state stays fixed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::backend::{Embedding, Gateway, PromptKind, PromptRequest};
use crate::config::{EvalSplit, Method, RunConfig};
use crate::dataset::{Bundle, CatalogItem, Interaction};
use crate::digest::{derive_seed, rng_for, str_word};
use crate::error::{Error, Result};
use crate::ids::{DomainId, ItemId, UserId};
use crate::memory::MemoryState;
use crate::parallel::map_ordered;
use crate::simulation::{memory_slot, NO_SHARED};
use crate::snapshot::write_atomic;

/// Largest rank the metrics accept.
pub const MAX_RANK: usize = 10;

fn check_rank(rank: usize) -> Result<()> {
    if (1..=MAX_RANK).contains(&rank) {
        Ok(())
    } else {
        Err(Error::InvalidRank { rank, max: MAX_RANK })
    }
}

/// Reciprocal rank of the single relevant item.
pub fn mrr(rank: usize) -> Result<f64> {
    check_rank(rank)?;
    Ok(1.0 / rank as f64)
}

/// NDCG@10 with one relevant item, whose ideal DCG is 1.
pub fn ndcg(rank: usize) -> Result<f64> {
    check_rank(rank)?;
    Ok(1.0 / (rank as f64 + 1.0).log2())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub user: UserId,
    pub domain: DomainId,
    pub ground_truth: ItemId,
    /// Sorted by id.
    pub distractors: Vec<ItemId>,
    /// The order in which candidates are shown to rankers.
    pub presentation_order: Vec<ItemId>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.presentation_order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.presentation_order.is_empty()
    }
}

/// Samples `count` distractors uniformly from `domain_items` minus the
/// user's items and the truth, then shuffles all candidates.
pub fn build_candidates(
    user: &UserId,
    domain: &DomainId,
    truth: &ItemId,
    domain_items: &[ItemId],
    interacted: &BTreeSet<ItemId>,
    count: usize,
    seed: u64,
) -> Result<CandidateSet> {
    let mut pool: Vec<&ItemId> = domain_items
        .iter()
        .filter(|i| *i != truth && !interacted.contains(*i))
        .collect();
    pool.sort();
    pool.dedup();
    if pool.len() < count {
        return Err(Error::EvalPoolTooSmall {
            eligible: pool.len(),
            required: count,
        });
    }
    let mut rng = rng_for(seed, &[]);
    let mut distractors: Vec<ItemId> = pool.choose_multiple(&mut rng, count).map(|i| (*i).clone()).collect();
    distractors.sort();
    let mut presentation_order = distractors.clone();
    presentation_order.push(truth.clone());
    presentation_order.shuffle(&mut rng);
    Ok(CandidateSet {
        user: user.clone(),
        domain: domain.clone(),
        ground_truth: truth.clone(),
        distractors,
        presentation_order,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingResult {
    pub ordering: Vec<ItemId>,
    /// 1-based.
    pub rank_of_truth: usize,
    /// A fallback ordering was used.
    pub degraded: bool,
}

impl RankingResult {
    /// Checks that `ordering` is a permutation of the candidates and
    /// locates the truth.
    pub fn new(ordering: Vec<ItemId>, candidates: &CandidateSet, degraded: bool) -> Result<Self> {
        let mut sorted = ordering.clone();
        sorted.sort();
        let mut expected = candidates.presentation_order.clone();
        expected.sort();
        if sorted != expected {
            return Err(Error::InvalidRequest("ranking is not a permutation of the candidates".into()));
        }
        let rank_of_truth = ordering
            .iter()
            .position(|i| *i == candidates.ground_truth)
            .expect("truth is a candidate")
            + 1;
        Ok(Self {
            ordering,
            rank_of_truth,
            degraded,
        })
    }
}

/// Extracts a full ranking of `candidates` from a completion. Tokens are
/// split on whitespace and `, ; > |`, stripped of surrounding punctuation,
/// and matched exactly against candidate ids; repeats are ignored. Returns
/// `None` unless every candidate appears.
pub fn parse_ranking(text: &str, candidates: &[ItemId]) -> Option<Vec<ItemId>> {
    let known: BTreeSet<&str> = candidates.iter().map(ItemId::as_str).collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(candidates.len());
    for token in text.split(|c: char| c.is_whitespace() || matches!(c, ',' | ';' | '>' | '|')) {
        let token = token.trim_matches(|c: char| !c.is_alphanumeric() && c != '_' && c != '-');
        if known.contains(token) && seen.insert(token) {
            out.push(ItemId::from(token));
        }
    }
    (out.len() == candidates.len()).then_some(out)
}

/// Candidates in descending score order, ties broken by id.
fn order_by_score(candidates: &CandidateSet, score: impl Fn(&ItemId) -> f64) -> Vec<ItemId> {
    let mut scored: Vec<(f64, &ItemId)> = candidates.presentation_order.iter().map(|i| (score(i), i)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.into_iter().map(|(_, i)| i.clone()).collect()
}

/// Ranks by training-split interaction count, descending; ties by id.
pub fn pop_baseline(candidates: &CandidateSet, train_counts: &BTreeMap<ItemId, usize>) -> RankingResult {
    let ordering = order_by_score(candidates, |i| train_counts.get(i).copied().unwrap_or(0) as f64);
    RankingResult::new(ordering, candidates, false).expect("ordering is a permutation")
}

/// Ranks by the largest cosine similarity between a candidate and any item
/// of the user's history; ties by id. An empty history gives id order,
/// flagged degraded.
pub fn seqsim_baseline(
    candidates: &CandidateSet,
    history: &[Embedding],
    embed: impl Fn(&ItemId) -> Result<Embedding>,
) -> Result<RankingResult> {
    if history.is_empty() {
        return RankingResult::new(order_by_score(candidates, |_| 0.0), candidates, true);
    }
    let mut scores = HashMap::new();
    for item in &candidates.presentation_order {
        let e = embed(item)?;
        let best = history.iter().map(|h| e.cosine(h)).fold(f64::NEG_INFINITY, f64::max);
        scores.insert(item.clone(), best);
    }
    RankingResult::new(order_by_score(candidates, |i| scores[i]), candidates, false)
}

/// Asks for a ranking, reprompting once; falls back to presentation order
/// flagged degraded.
fn elicit_ranking(
    gateway: &Gateway,
    candidates: &CandidateSet,
    request: impl Fn(u64) -> PromptRequest,
) -> Result<RankingResult> {
    for attempt in 0..2 {
        match gateway.complete(&request(attempt)) {
            Ok(c) => {
                if let Some(ordering) = parse_ranking(&c.text, &candidates.presentation_order) {
                    return RankingResult::new(ordering, candidates, false);
                }
            }
            Err(e) if e.is_recoverable() => warn!(error = %e, attempt, "ranking prompt failed"),
            Err(e) => return Err(e),
        }
    }
    RankingResult::new(candidates.presentation_order.clone(), candidates, true)
}

/// Per-(method, run) metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: Method,
    pub dataset: String,
    pub run: usize,
    pub cases: usize,
    pub mrr: f64,
    pub ndcg: f64,
    /// Cases whose ranking came from a fallback.
    pub degraded: usize,
}

/// Mean and sample standard deviation over runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub dataset: String,
    pub runs: usize,
    pub mrr_mean: f64,
    pub mrr_std: f64,
    pub ndcg_mean: f64,
    pub ndcg_std: f64,
    pub degraded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub runs: Vec<RunMetrics>,
    pub summary: Vec<MethodSummary>,
}

/// Arithmetic mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Summarizes per-run metrics by method, in the order methods first appear.
pub fn aggregate(runs: &[RunMetrics]) -> Vec<MethodSummary> {
    let mut methods: Vec<Method> = Vec::new();
    for r in runs {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    methods
        .into_iter()
        .map(|method| {
            let mine: Vec<&RunMetrics> = runs.iter().filter(|r| r.method == method).collect();
            let (mrr_mean, mrr_std) = mean_std(&mine.iter().map(|r| r.mrr).collect::<Vec<_>>());
            let (ndcg_mean, ndcg_std) = mean_std(&mine.iter().map(|r| r.ndcg).collect::<Vec<_>>());
            MethodSummary {
                method,
                dataset: mine[0].dataset.clone(),
                runs: mine.len(),
                mrr_mean,
                mrr_std,
                ndcg_mean,
                ndcg_std,
                degraded: mine.iter().map(|r| r.degraded).sum(),
            }
        })
        .collect()
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
enum ReportLine<'a> {
    Run(&'a RunMetrics),
    Summary(&'a MethodSummary),
}

impl MetricReport {
    pub fn from_runs(runs: Vec<RunMetrics>) -> Self {
        let summary = aggregate(&runs);
        Self { runs, summary }
    }

    pub fn degraded(&self) -> usize {
        self.runs.iter().map(|r| r.degraded).sum()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.runs {
            out.push_str(&serde_json::to_string(&ReportLine::Run(r)).expect("serializable"));
            out.push('\n');
        }
        for s in &self.summary {
            out.push_str(&serde_json::to_string(&ReportLine::Summary(s)).expect("serializable"));
            out.push('\n');
        }
        out
    }

    /// Reads the summary records back from a report file.
    pub fn read_summary(path: &Path) -> Result<Vec<MethodSummary>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut value: serde_json::Value = serde_json::from_str(line)
                .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
            if value["record"] == "summary" {
                value.as_object_mut().expect("object").remove("record");
                out.push(
                    serde_json::from_value(value)
                        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?,
                );
            }
        }
        Ok(out)
    }

    pub fn table(&self) -> String {
        table(&self.summary)
    }

    pub fn write(&self, jsonl: &Path, text: &Path) -> Result<()> {
        write_atomic(jsonl, self.to_jsonl().as_bytes())?;
        write_atomic(text, self.table().as_bytes())
    }
}

/// Aligned plain-text table of summaries.
pub fn table(summary: &[MethodSummary]) -> String {
    let header = ["dataset", "method", "runs", "MRR", "MRR sd", "NDCG", "NDCG sd", "degraded"];
    let rows: Vec<[String; 8]> = summary
        .iter()
        .map(|s| {
            [
                s.dataset.clone(),
                s.method.name().to_string(),
                s.runs.to_string(),
                format!("{:.4}", s.mrr_mean),
                format!("{:.4}", s.mrr_std),
                format!("{:.4}", s.ndcg_mean),
                format!("{:.4}", s.ndcg_std),
                s.degraded.to_string(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, w))| if c < 2 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header.to_vec());
    line(widths.iter().map(|w| &"----------------"[..(*w).min(16)]).collect());
    for r in &rows {
        line(r.iter().map(String::as_str).collect());
    }
    out
}

// Seed path components.
const SEED_EVAL: u64 = 0xe7a1;
const SEED_CANDIDATES: u64 = 0;
const SEED_AGENT: u64 = 1;
const SEED_LLMRANK: u64 = 2;

/// Runs the configured methods over a trained state.
pub struct Evaluator<'a> {
    config: &'a RunConfig,
    gateway: &'a Gateway,
    state: &'a MemoryState,
    dataset: String,
    cases: Vec<Interaction>,
    catalog: BTreeMap<ItemId, CatalogItem>,
    by_domain: BTreeMap<DomainId, Vec<ItemId>>,
    interacted: BTreeMap<UserId, BTreeSet<ItemId>>,
    train_counts: BTreeMap<ItemId, usize>,
    history: BTreeMap<UserId, Vec<ItemId>>,
    embeddings: Mutex<HashMap<ItemId, Embedding>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(config: &'a RunConfig, gateway: &'a Gateway, state: &'a MemoryState, bundle: &Bundle) -> Self {
        let cases = match config.evaluation.split {
            EvalSplit::Valid => bundle.split.valid.clone(),
            EvalSplit::Test => bundle.split.test.clone(),
        };
        let mut by_domain: BTreeMap<DomainId, Vec<ItemId>> = BTreeMap::new();
        for item in &bundle.items {
            by_domain.entry(item.domain.clone()).or_default().push(item.item_id.clone());
        }
        let mut train_counts = BTreeMap::new();
        let mut history: BTreeMap<UserId, Vec<ItemId>> = BTreeMap::new();
        let mut train = bundle.split.train.clone();
        train.sort_by_key(|i| i.timestamp);
        for i in &train {
            *train_counts.entry(i.item.clone()).or_insert(0) += 1;
            history.entry(i.user.clone()).or_default().push(i.item.clone());
        }
        Self {
            config,
            gateway,
            state,
            dataset: bundle.manifest.name.clone(),
            cases,
            catalog: bundle.items.iter().map(|i| (i.item_id.clone(), i.clone())).collect(),
            by_domain,
            interacted: bundle.interacted(),
            train_counts,
            history,
            embeddings: Mutex::new(HashMap::new()),
        }
    }

    pub fn cases(&self) -> &[Interaction] {
        &self.cases
    }

    pub fn candidates(&self, case: &Interaction, seed: u64) -> Result<CandidateSet> {
        let empty = BTreeSet::new();
        build_candidates(
            &case.user,
            &case.domain,
            &case.item,
            self.by_domain.get(&case.domain).map(Vec::as_slice).unwrap_or_default(),
            self.interacted.get(&case.user).unwrap_or(&empty),
            self.config.evaluation.distractors,
            seed,
        )
    }

    fn item(&self, id: &ItemId) -> Result<&CatalogItem> {
        self.catalog.get(id).ok_or_else(|| Error::UnknownItem(id.to_string()))
    }

    fn embedding(&self, id: &ItemId) -> Result<Embedding> {
        if let Some(e) = self.embeddings.lock().unwrap().get(id) {
            return Ok(e.clone());
        }
        let e = self.gateway.embed(&self.item(id)?.side_info().render())?;
        self.embeddings.lock().unwrap().insert(id.clone(), e.clone());
        Ok(e)
    }

    fn template(&self, kind: PromptKind) -> &str {
        self.config.templates.ids.get(kind)
    }

    /// Ranking by the trained user agent.
    pub fn rank_with_agent(&self, candidates: &CandidateSet, seed: u64) -> Result<RankingResult> {
        let budget = self.config.memory.memory_budget_chars;
        let options = crate::memory::ContextOptions {
            shared_view: self.config.memory.shared_view,
            self_echo: self.config.memory.self_echo,
            shared_groups: self.config.features.shared_groups,
        };
        let ctx = self.state.decision_context(&candidates.user, &candidates.domain, options)?;
        let shared = ctx.render_shared();
        let mut listing = Vec::new();
        for id in &candidates.presentation_order {
            listing.push(format!("[{id}] {}", memory_slot(&self.state.item(id)?.memory, budget)));
        }
        let listing = listing.join("\n");
        elicit_ranking(self.gateway, candidates, |attempt| {
            PromptRequest::new(
                PromptKind::RankCandidates,
                self.template(PromptKind::RankCandidates),
                derive_seed(seed, &[attempt]),
            )
            .slot("domain", candidates.domain.as_str())
            .slot("separated", memory_slot(&ctx.separated, budget))
            .slot("fused", memory_slot(&ctx.fused, budget))
            .slot("shared", if shared.is_empty() { NO_SHARED.to_string() } else { shared.clone() })
            .slot("candidates", listing.clone())
        })
    }

    /// Zero-shot ranking from the raw titles of the user's training history.
    pub fn llmrank_baseline(&self, candidates: &CandidateSet, seed: u64) -> Result<RankingResult> {
        let mut history = Vec::new();
        for id in self.history.get(&candidates.user).into_iter().flatten() {
            let item = self.item(id)?;
            history.push(format!("- [{}] {}", item.domain, item.side_info().summary()));
        }
        let history = if history.is_empty() {
            "(no history)".to_string()
        } else {
            memory_slot(&history.join("\n"), self.config.memory.memory_budget_chars)
        };
        let mut listing = Vec::new();
        for id in &candidates.presentation_order {
            listing.push(format!("[{id}] {}", self.item(id)?.side_info().summary()));
        }
        let listing = listing.join("\n");
        elicit_ranking(self.gateway, candidates, |attempt| {
            PromptRequest::new(
                PromptKind::RankCandidates,
                self.config.templates.ids.zero_shot_rank.as_str(),
                derive_seed(seed, &[attempt]),
            )
            .slot("history", history.clone())
            .slot("domain", candidates.domain.as_str())
            .slot("candidates", listing.clone())
        })
    }

    fn rank(&self, method: Method, candidates: &CandidateSet, seed: u64) -> Result<RankingResult> {
        match method {
            Method::Agent => self.rank_with_agent(candidates, derive_seed(seed, &[SEED_AGENT])),
            Method::Pop => Ok(pop_baseline(candidates, &self.train_counts)),
            Method::SeqSim => {
                let history: Vec<Embedding> = self
                    .history
                    .get(&candidates.user)
                    .into_iter()
                    .flatten()
                    .map(|i| self.embedding(i))
                    .collect::<Result<_>>()?;
                seqsim_baseline(candidates, &history, |i| self.embedding(i))
            }
            Method::LlmRank => self.llmrank_baseline(candidates, derive_seed(seed, &[SEED_LLMRANK])),
        }
    }

    /// One run of one method over every evaluation case.
    pub fn run_method(&self, method: Method, run: usize) -> Result<RunMetrics> {
        if self.cases.is_empty() {
            return Err(Error::Dataset("the evaluation split is empty".into()));
        }
        let base = derive_seed(self.config.run.seed, &[SEED_EVAL, run as u64]);
        let indexed: Vec<(usize, &Interaction)> = self.cases.iter().enumerate().collect();
        let results = map_ordered(&indexed, self.config.simulation.parallel_calls, |(n, case)| {
            let seed = derive_seed(base, &[*n as u64, str_word(case.user.as_str())]);
            let candidates = self.candidates(case, derive_seed(seed, &[SEED_CANDIDATES]))?;
            self.rank(method, &candidates, seed)
        });
        let mut mrr_sum = 0.0;
        let mut ndcg_sum = 0.0;
        let mut degraded = 0;
        for result in results {
            let result = result?;
            mrr_sum += mrr(result.rank_of_truth)?;
            ndcg_sum += ndcg(result.rank_of_truth)?;
            degraded += usize::from(result.degraded);
        }
        let n = self.cases.len() as f64;
        Ok(RunMetrics {
            method,
            dataset: self.dataset.clone(),
            run,
            cases: self.cases.len(),
            mrr: mrr_sum / n,
            ndcg: ndcg_sum / n,
            degraded,
        })
    }

    /// All configured methods over `runs` runs.
    pub fn evaluate(&self, runs: usize) -> Result<MetricReport> {
        let mut out = Vec::new();
        for &method in &self.config.evaluation.methods {
            for run in 0..runs {
                out.push(self.run_method(method, run)?);
                self.gateway.check_reachable(self.config.simulation.max_unavailable_streak)?;
            }
        }
        Ok(MetricReport::from_runs(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(names: &[&str]) -> Vec<ItemId> {
        names.iter().map(|n| ItemId::from(*n)).collect()
    }

    fn set(truth: &str, order: &[&str]) -> CandidateSet {
        let order = ids(order);
        let mut distractors: Vec<ItemId> = order.iter().filter(|i| i.as_str() != truth).cloned().collect();
        distractors.sort();
        CandidateSet {
            user: "u".into(),
            domain: "Books".into(),
            ground_truth: truth.into(),
            distractors,
            presentation_order: order,
        }
    }

    #[test]
    fn metric_closed_forms() {
        assert_eq!(mrr(1).unwrap(), 1.0);
        assert_eq!(ndcg(1).unwrap(), 1.0);
        assert_eq!(mrr(2).unwrap(), 0.5);
        assert!((ndcg(2).unwrap() - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg(3).unwrap(), 0.5);
        assert!(matches!(mrr(0), Err(Error::InvalidRank { .. })));
        assert!(matches!(ndcg(11), Err(Error::InvalidRank { .. })));
    }

    #[test]
    fn candidates_with_exactly_enough_distractors() {
        let items = ids(&["t", "a", "b", "c", "d", "e", "f", "g", "h", "i", "seen"]);
        let seen: BTreeSet<ItemId> = ids(&["t", "seen"]).into_iter().collect();
        let cs = build_candidates(&"u".into(), &"Books".into(), &"t".into(), &items, &seen, 9, 3).unwrap();
        assert_eq!(cs.distractors, ids(&["a", "b", "c", "d", "e", "f", "g", "h", "i"]));
        assert_eq!(cs.len(), 10);
        assert_eq!(cs, build_candidates(&"u".into(), &"Books".into(), &"t".into(), &items, &seen, 9, 3).unwrap());

        let fewer = &items[..9];
        assert!(matches!(
            build_candidates(&"u".into(), &"Books".into(), &"t".into(), fewer, &seen, 9, 3),
            Err(Error::EvalPoolTooSmall { eligible: 8, required: 9 })
        ));
    }

    #[test]
    fn ranking_parse() {
        let cands = ids(&["b1", "b2", "b3"]);
        assert_eq!(parse_ranking("b3, b1, b2", &cands), Some(ids(&["b3", "b1", "b2"])));
        assert_eq!(parse_ranking("1. [b2]\n2. [b3]\n3. [b1]", &cands), Some(ids(&["b2", "b3", "b1"])));
        assert_eq!(parse_ranking("b2 > b2 > b1 > b3", &cands), Some(ids(&["b2", "b1", "b3"])));
        assert_eq!(parse_ranking("b1, b2", &cands), None);
        assert_eq!(parse_ranking("b10, b1, b2, b3", &cands), Some(ids(&["b1", "b2", "b3"])));
    }

    #[test]
    fn pop_orders_by_count_then_id() {
        let cs = set("a", &["c", "b", "a"]);
        let counts: BTreeMap<ItemId, usize> = [("a".into(), 5), ("b".into(), 3), ("c".into(), 1)].into_iter().collect();
        let r = pop_baseline(&cs, &counts);
        assert_eq!(r.ordering, ids(&["a", "b", "c"]));
        assert_eq!(r.rank_of_truth, 1);
        let r = pop_baseline(&cs, &BTreeMap::new());
        assert_eq!(r.ordering, ids(&["a", "b", "c"]));
    }

    #[test]
    fn seqsim_scores_by_best_history_match() {
        let cs = set("b", &["a", "b", "c"]);
        let vec_of = |i: &ItemId| {
            Embedding::new(match i.as_str() {
                "a" => vec![1.0, 0.0, 0.0],
                "b" => vec![0.0, 1.0, 0.0],
                _ => vec![0.0, 0.0, 1.0],
            })
        };
        let history = vec![Embedding::new(vec![0.0, 2.0, 0.0]).unwrap()];
        let r = seqsim_baseline(&cs, &history, vec_of).unwrap();
        assert_eq!(r.rank_of_truth, 1);

        let orthogonal = vec![Embedding::new(vec![0.0, 0.0, 0.0, 1.0]).unwrap()];
        let pad = |i: &ItemId| vec_of(i).map(|e| Embedding::new([e.values(), &[0.0]].concat()).unwrap());
        let r = seqsim_baseline(&cs, &orthogonal, pad).unwrap();
        assert_eq!(r.ordering, ids(&["a", "b", "c"]));

        let r = seqsim_baseline(&cs, &[], vec_of).unwrap();
        assert!(r.degraded);
        assert_eq!(r.ordering, ids(&["a", "b", "c"]));
    }

    #[test]
    fn aggregation() {
        let run = |method, run, mrr| RunMetrics {
            method,
            dataset: "d".into(),
            run,
            cases: 1,
            mrr,
            ndcg: mrr,
            degraded: 0,
        };
        let s = aggregate(&[run(Method::Pop, 0, 0.3), run(Method::Pop, 1, 0.5)]);
        assert!((s[0].mrr_mean - 0.4).abs() < 1e-12);
        assert_eq!(aggregate(&[run(Method::Pop, 0, 0.7)])[0].mrr_std, 0.0);
        let same: Vec<_> = (0..5).map(|r| run(Method::Agent, r, 0.25)).collect();
        let s = aggregate(&same);
        assert_eq!((s[0].runs, s[0].mrr_std), (5, 0.0));
    }

    #[test]
    fn table_is_aligned() {
        let report = MetricReport::from_runs(vec![RunMetrics {
            method: Method::SeqSim,
            dataset: "cross-1".into(),
            run: 0,
            cases: 4,
            mrr: 0.5,
            ndcg: 0.6,
            degraded: 0,
        }]);
        let t = report.table();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("cross-1  seq-sim"));
        assert_eq!(lines[0].find("MRR"), lines[2].find("0.5000").map(|p| p + 3));
    }
}
