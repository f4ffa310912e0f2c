//! Interest groups: tag extraction, clustering, naming and membership.
//!
//! A segmentation is a full rebuild. Each user's preference text is turned
//! into a handful of short interest tags, every tag is embedded, the
//! L2-normalised embeddings are clustered globally with k-means, each
//! cluster is named by the backend, and each user joins the few clusters
//! holding most of their tags. New groups start with empty shared memories.

mod kmeans;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use tracing::warn;

pub use kmeans::{
    distinct_count, kmeans, squared_distance, DEFAULT_RESTARTS, within_cluster_sse, KMeansParams, KMeansResult,
};

use crate::backend::{Embedding, Gateway, PromptKind, PromptRequest};
use crate::config::TemplateIds;
use crate::digest::{derive_seed, str_word};
use crate::error::{Error, Result};
use crate::ids::{GroupId, UserId};
use crate::memory::{GroupSharedMemory, MemoryState};
use crate::parallel::map_ordered;

/// Maximum words kept per tag.
pub const MAX_TAG_WORDS: usize = 5;

/// How users are segmented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupBy {
    /// Tags extracted from each user's preference memories.
    #[default]
    Interest,
    /// One pseudo-tag per user summarising their whole interaction history.
    History,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupingParams {
    /// Tags kept per user.
    pub max_tags: usize,
    /// Cluster count; `None` picks `max(2, floor(sqrt(tags)))`.
    pub k: Option<usize>,
    /// Groups retained per user.
    pub max_groups_per_user: usize,
    /// Shared-memory entries per group.
    pub capacity: usize,
    pub kmeans_restarts: usize,
    pub kmeans_max_iterations: usize,
    /// Characters of interaction history used per user under history grouping.
    pub history_chars: usize,
}

impl Default for GroupingParams {
    fn default() -> Self {
        Self {
            max_tags: 8,
            k: None,
            max_groups_per_user: 3,
            capacity: 20,
            kmeans_restarts: kmeans::DEFAULT_RESTARTS,
            kmeans_max_iterations: 100,
            history_chars: 500,
        }
    }
}

impl GroupingParams {
    pub fn kmeans_params(&self) -> KMeansParams {
        KMeansParams {
            max_iterations: self.kmeans_max_iterations,
            restarts: self.kmeans_restarts,
        }
    }

    /// Cluster count for `tags` tags of which `distinct` have distinct vectors.
    pub fn cluster_count(&self, tags: usize, distinct: usize) -> usize {
        let k = self
            .k
            .unwrap_or_else(|| 2.max((tags as f64).sqrt().floor() as usize));
        k.clamp(1, distinct.max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterestTag {
    pub owner: UserId,
    pub text: String,
    pub vector: Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagCluster {
    pub id: usize,
    pub centroid: Vec<f64>,
    pub members: Vec<InterestTag>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterestGroup {
    pub id: GroupId,
    pub name: String,
    pub member_users: BTreeSet<UserId>,
    pub shared: GroupSharedMemory,
    /// Most frequent member tags, for reports.
    #[serde(default)]
    pub top_tags: Vec<String>,
}

impl InterestGroup {
    pub fn new(id: GroupId, name: String, capacity: usize) -> Result<Self> {
        Ok(Self {
            id,
            name,
            member_users: BTreeSet::new(),
            shared: GroupSharedMemory::new(capacity)?,
            top_tags: Vec::new(),
        })
    }
}

/// One line of the per-segmentation audit report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupReport {
    pub segmentation: u32,
    pub group: GroupId,
    pub name: String,
    pub member_count: usize,
    pub top_tags: Vec<String>,
}

/// Outcome of a successful segmentation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Segmentation {
    pub groups: Vec<GroupReport>,
    /// Users whose tag extraction failed and who kept their previous tags.
    pub failed_users: Vec<UserId>,
    pub tag_count: usize,
}

fn clean_tag(raw: &str) -> Option<String> {
    let trimmed = raw
        .trim()
        .trim_start_matches(|c: char| c == '-' || c == '*' || c == '•' || c.is_ascii_digit() || c == '.' || c == ')')
        .trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '`')
        .trim();
    if trimmed.is_empty() || trimmed.eq_ignore_ascii_case("none") {
        return None;
    }
    let words: Vec<&str> = trimmed.split_whitespace().take(MAX_TAG_WORDS).collect();
    Some(words.join(" "))
}

/// Splits a completion into at most `max` tags, dropping case-insensitive
/// duplicates.
pub fn parse_tags(text: &str, max: usize) -> Vec<String> {
    let mut seen = BTreeSet::new();
    text.split([';', '\n', ','])
        .filter_map(clean_tag)
        .filter(|t| seen.insert(t.to_lowercase()))
        .take(max)
        .collect()
}

/// Asks the backend for interest tags describing `preferences`.
///
/// Empty preferences yield no tags without a backend call. A completion
/// with no usable tag is retried once with a fresh seed.
pub fn extract_tags(
    gateway: &Gateway,
    ids: &TemplateIds,
    user: &UserId,
    preferences: &str,
    max_tags: usize,
    seed: u64,
) -> Result<Vec<String>> {
    if preferences.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reason = String::new();
    for attempt in 0..2u64 {
        let request = PromptRequest::new(
            PromptKind::ExtractTags,
            ids.get(PromptKind::ExtractTags),
            derive_seed(seed, &[attempt]),
        )
        .slot("memories", preferences)
        .slot("max_tags", max_tags.to_string());
        match gateway.complete(&request) {
            Ok(c) => {
                let tags = parse_tags(&c.text, max_tags);
                if !tags.is_empty() {
                    return Ok(tags);
                }
                reason = format!("no tags in {:?}", c.text);
            }
            Err(Error::MalformedResponse(m)) => reason = m,
            Err(e) => return Err(e),
        }
    }
    Err(Error::TagExtractionFailed {
        user: user.to_string(),
        reason,
    })
}

fn most_frequent(texts: impl IntoIterator<Item = String>) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for t in texts {
        *counts.entry(t).or_default() += 1;
    }
    let mut ranked: Vec<_> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

/// Names a cluster from its distinct member tags (most frequent first); an
/// empty completion falls back to the most frequent tag.
pub fn name_cluster(gateway: &Gateway, ids: &TemplateIds, cluster: &TagCluster, seed: u64) -> Result<String> {
    if cluster.members.is_empty() {
        return Err(Error::InvalidRequest("cannot name an empty cluster".into()));
    }
    let ranked = most_frequent(cluster.members.iter().map(|t| t.text.clone()));
    let tags: Vec<&str> = ranked.iter().map(|(t, _)| t.as_str()).collect();
    let request = PromptRequest::new(PromptKind::NameGroup, ids.get(PromptKind::NameGroup), seed)
        .slot("tags", tags.join("; "));
    let fallback = || ranked[0].0.clone();
    match gateway.complete(&request) {
        Ok(c) => Ok(c
            .text
            .lines()
            .map(str::trim)
            .find(|l| !l.is_empty())
            .map(str::to_string)
            .unwrap_or_else(fallback)),
        Err(Error::MalformedResponse(_)) => Ok(fallback()),
        Err(e) => Err(e),
    }
}

/// Per user, the clusters holding their tags ranked by how many of the
/// user's tags each holds (ties by cluster id), cut to `max_groups`.
pub fn assign_groups(clusters: &[TagCluster], max_groups: usize) -> BTreeMap<UserId, Vec<usize>> {
    let mut counts: BTreeMap<UserId, BTreeMap<usize, usize>> = BTreeMap::new();
    for cluster in clusters {
        for tag in &cluster.members {
            *counts
                .entry(tag.owner.clone())
                .or_default()
                .entry(cluster.id)
                .or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|(user, per_cluster)| {
            let mut ranked: Vec<(usize, usize)> = per_cluster.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            let kept = ranked.into_iter().take(max_groups).map(|(c, _)| c).collect();
            (user, kept)
        })
        .collect()
}

/// Clusters tags by their normalised embeddings.
pub fn cluster_tags(tags: Vec<InterestTag>, params: &GroupingParams, seed: u64) -> Result<Vec<TagCluster>> {
    if tags.is_empty() {
        return Ok(Vec::new());
    }
    let points: Vec<Vec<f64>> = tags.iter().map(|t| t.vector.normalized()).collect();
    let k = params.cluster_count(points.len(), distinct_count(&points));
    let result = kmeans(&points, k, seed, params.kmeans_params())?;
    let mut clusters: Vec<TagCluster> = result
        .centroids
        .into_iter()
        .enumerate()
        .map(|(id, centroid)| TagCluster {
            id,
            centroid,
            members: Vec::new(),
        })
        .collect();
    for (tag, c) in tags.into_iter().zip(result.assignments) {
        clusters[c].members.push(tag);
    }
    Ok(clusters)
}

/// Inputs gathered for one user before clustering.
struct UserTags {
    user: UserId,
    tags: Vec<String>,
    failed: bool,
}

/// Rebuilds all interest groups. On any backend failure the state is left
/// untouched and the error returned.
#[allow(clippy::too_many_arguments)]
pub fn resegment(
    state: &mut MemoryState,
    gateway: &Gateway,
    ids: &TemplateIds,
    params: &GroupingParams,
    group_by: GroupBy,
    histories: &BTreeMap<UserId, Vec<String>>,
    seed: u64,
    parallel: bool,
) -> Result<Segmentation> {
    let segmentation = state.segmentation + 1;
    let users: Vec<UserId> = state.users.keys().cloned().collect();

    let gathered: Vec<Result<UserTags>> = map_ordered(&users, parallel, |user| {
        match group_by {
            GroupBy::Interest => {
                let text = state.preference_text(user)?;
                let user_seed = derive_seed(seed, &[segmentation as u64, str_word(user.as_str())]);
                match extract_tags(gateway, ids, user, &text, params.max_tags, user_seed) {
                    Ok(tags) => Ok(UserTags {
                        user: user.clone(),
                        tags,
                        failed: false,
                    }),
                    Err(e @ Error::TagExtractionFailed { .. }) => {
                        warn!(error = %e, "keeping previous tags");
                        Ok(UserTags {
                            user: user.clone(),
                            tags: state.user_tags.get(user).cloned().unwrap_or_default(),
                            failed: true,
                        })
                    }
                    Err(e) => Err(e),
                }
            }
            GroupBy::History => {
                let titles = histories.get(user).map(Vec::as_slice).unwrap_or_default();
                let summary: String = titles.join("; ").chars().take(params.history_chars).collect();
                let tags = if summary.trim().is_empty() { Vec::new() } else { vec![summary] };
                Ok(UserTags {
                    user: user.clone(),
                    tags,
                    failed: false,
                })
            }
        }
    });
    let gathered: Vec<UserTags> = gathered.into_iter().collect::<Result<_>>()?;

    let mut texts: Vec<&str> = gathered.iter().flat_map(|u| u.tags.iter().map(String::as_str)).collect();
    texts.sort_unstable();
    texts.dedup();
    let embedded = map_ordered(&texts, parallel, |t| gateway.embed(t));
    let mut vectors: HashMap<&str, Embedding> = HashMap::new();
    for (text, vector) in texts.iter().zip(embedded) {
        vectors.insert(text, vector?);
    }

    let tags: Vec<InterestTag> = gathered
        .iter()
        .flat_map(|u| {
            u.tags.iter().map(|t| InterestTag {
                owner: u.user.clone(),
                text: t.clone(),
                vector: vectors[t.as_str()].clone(),
            })
        })
        .collect();
    let tag_count = tags.len();
    let clusters = cluster_tags(tags, params, derive_seed(seed, &[segmentation as u64]))?;
    let memberships = assign_groups(&clusters, params.max_groups_per_user);

    let mut members_of: BTreeMap<usize, BTreeSet<UserId>> = BTreeMap::new();
    for (user, kept) in &memberships {
        for c in kept {
            members_of.entry(*c).or_default().insert(user.clone());
        }
    }
    let live: Vec<&TagCluster> = clusters.iter().filter(|c| members_of.contains_key(&c.id)).collect();
    let names = map_ordered(&live, parallel, |c| {
        name_cluster(
            gateway,
            ids,
            c,
            derive_seed(seed, &[segmentation as u64, 1 << 32 | c.id as u64]),
        )
    });

    let mut groups = BTreeMap::new();
    let mut reports = Vec::new();
    let mut group_of_cluster = BTreeMap::new();
    for (cluster, name) in live.iter().zip(names) {
        let id = GroupId::new(format!("s{segmentation}-g{}", cluster.id));
        let mut group = InterestGroup::new(id.clone(), name?, params.capacity)?;
        group.member_users = members_of[&cluster.id].clone();
        group.top_tags = most_frequent(cluster.members.iter().map(|t| t.text.clone()))
            .into_iter()
            .take(5)
            .map(|(t, _)| t)
            .collect();
        reports.push(GroupReport {
            segmentation,
            group: id.clone(),
            name: group.name.clone(),
            member_count: group.member_users.len(),
            top_tags: group.top_tags.clone(),
        });
        group_of_cluster.insert(cluster.id, id.clone());
        groups.insert(id, group);
    }

    // Commit.
    for agent in state.users.values_mut() {
        agent.groups = memberships
            .get(&agent.id)
            .map(|kept| kept.iter().map(|c| group_of_cluster[c].clone()).collect())
            .unwrap_or_default();
    }
    state.groups = groups;
    for u in &gathered {
        state.user_tags.insert(u.user.clone(), u.tags.clone());
    }
    state.segmentation = segmentation;
    Ok(Segmentation {
        groups: reports,
        failed_users: gathered.into_iter().filter(|u| u.failed).map(|u| u.user).collect(),
        tag_count,
    })
}
