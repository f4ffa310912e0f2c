//! Agent memory state.
//!
//! Users hold a domain-separated and a domain-fused text memory per domain,
//! items hold one text memory, and interest groups hold a bounded queue of
//! recent member interactions. [`MemoryState`] owns all of it; the simulation
//! loop is its only writer.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::InterestGroup;
use crate::ids::{DomainId, GroupId, ItemId, UserId};

/// Number of category characters kept in an item summary.
pub const SUMMARY_CATEGORY_CHARS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideInfo {
    pub title: String,
    pub category: String,
}

impl SideInfo {
    pub fn new(title: impl Into<String>, category: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            category: category.into(),
        }
    }

    pub fn is_blank(&self) -> bool {
        self.title.trim().is_empty() && self.category.trim().is_empty()
    }

    pub fn render(&self) -> String {
        format!("Title: {}; Category: {}", self.title.trim(), self.category.trim())
    }

    /// Title plus the first 100 characters of the category text.
    pub fn summary(&self) -> String {
        let category: String = self
            .category
            .trim()
            .chars()
            .take(SUMMARY_CATEGORY_CHARS)
            .collect();
        if category.is_empty() {
            self.title.trim().to_string()
        } else {
            format!("{} ({category})", self.title.trim())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemAgent {
    pub id: ItemId,
    pub domain: DomainId,
    pub side_info: SideInfo,
    pub memory: String,
}

impl ItemAgent {
    /// Creates an item whose memory is seeded from its side information.
    pub fn init(id: ItemId, domain: DomainId, side_info: SideInfo) -> Result<Self> {
        if side_info.is_blank() {
            return Err(Error::InvalidItem(id.to_string()));
        }
        let memory = side_info.render();
        Ok(Self {
            id,
            domain,
            side_info,
            memory,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserAgent {
    pub id: UserId,
    separated: BTreeMap<DomainId, String>,
    fused: BTreeMap<DomainId, String>,
    pub groups: BTreeSet<GroupId>,
}

impl UserAgent {
    /// A user with empty memories for every key in `memory_keys`.
    pub fn new<'a>(id: UserId, memory_keys: impl IntoIterator<Item = &'a DomainId>) -> Self {
        let separated: BTreeMap<_, _> = memory_keys
            .into_iter()
            .map(|d| (d.clone(), String::new()))
            .collect();
        Self {
            id,
            fused: separated.clone(),
            separated,
            groups: BTreeSet::new(),
        }
    }

    pub fn separated(&self, key: &DomainId) -> Result<&str> {
        self.separated
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownDomain(key.to_string()))
    }

    pub fn fused(&self, key: &DomainId) -> Result<&str> {
        self.fused
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownDomain(key.to_string()))
    }

    pub fn write_separated(&mut self, key: &DomainId, text: impl Into<String>) -> Result<()> {
        let slot = self
            .separated
            .get_mut(key)
            .ok_or_else(|| Error::UnknownDomain(key.to_string()))?;
        *slot = text.into();
        Ok(())
    }

    pub fn write_fused(&mut self, key: &DomainId, text: impl Into<String>) -> Result<()> {
        let slot = self
            .fused
            .get_mut(key)
            .ok_or_else(|| Error::UnknownDomain(key.to_string()))?;
        *slot = text.into();
        Ok(())
    }

    pub fn separated_memories(&self) -> impl Iterator<Item = (&DomainId, &str)> {
        self.separated.iter().map(|(d, m)| (d, m.as_str()))
    }

    pub fn fused_memories(&self) -> impl Iterator<Item = (&DomainId, &str)> {
        self.fused.iter().map(|(d, m)| (d, m.as_str()))
    }

    pub fn memory_keys(&self) -> impl Iterator<Item = &DomainId> {
        self.separated.keys()
    }

    pub(crate) fn keys_consistent(&self) -> bool {
        self.separated.keys().eq(self.fused.keys())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedEntry {
    pub user: UserId,
    pub item_summary: String,
    pub domain: DomainId,
    pub timestamp: i64,
}

impl SharedEntry {
    pub fn render(&self) -> String {
        format!(
            "- [{}] a member picked {} ({})",
            self.domain, self.item_summary, self.timestamp
        )
    }
}

/// Fixed-capacity FIFO of recent member interactions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSharedMemory {
    capacity: usize,
    entries: VecDeque<SharedEntry>,
}

impl GroupSharedMemory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("shared memory capacity must be > 0".into()));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends `entry`, evicting the oldest entry when full.
    pub fn push(&mut self, entry: SharedEntry) {
        debug_assert!(self
            .entries
            .back()
            .is_none_or(|last| last.timestamp <= entry.timestamp));
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    /// Entries oldest first.
    pub fn entries(&self) -> impl DoubleEndedIterator<Item = &SharedEntry> + ExactSizeIterator {
        self.entries.iter()
    }

    /// Up to `n` entries, newest first.
    pub fn recent(&self, n: usize) -> impl Iterator<Item = &SharedEntry> {
        self.entries.iter().rev().take(n)
    }

    pub(crate) fn is_valid(&self) -> bool {
        self.capacity > 0 && self.entries.len() <= self.capacity
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedView {
    pub group: GroupId,
    pub name: String,
    pub entries: Vec<SharedEntry>,
}

impl SharedView {
    pub fn render(&self) -> String {
        let mut out = format!("Group \"{}\":", self.name);
        if self.entries.is_empty() {
            out.push_str("\n- (no recent activity)");
        }
        for entry in &self.entries {
            out.push('\n');
            out.push_str(&entry.render());
        }
        out
    }
}

/// Everything a user agent sees when deciding in one domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionContext {
    pub separated: String,
    pub fused: String,
    pub shared_views: Vec<SharedView>,
}

impl DecisionContext {
    pub fn render_shared(&self) -> String {
        self.shared_views
            .iter()
            .map(SharedView::render)
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Whether users keep two memories per domain or one memory overall.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryLayout {
    DualLayer,
    /// One memory per user, stored as the separated memory of the
    /// [`DomainId::ALL`] key.
    Single,
}

/// Read options for [`MemoryState::decision_context`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextOptions {
    /// Entries shown per group.
    pub shared_view: usize,
    /// Whether a user sees their own entries in group memories.
    pub self_echo: bool,
    /// Whether group memories are visible at all.
    pub shared_groups: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryState {
    pub layout: MemoryLayout,
    pub domains: Vec<DomainId>,
    pub users: BTreeMap<UserId, UserAgent>,
    pub items: BTreeMap<ItemId, ItemAgent>,
    pub groups: BTreeMap<GroupId, InterestGroup>,
    /// Tags each user contributed to the latest segmentation.
    pub user_tags: BTreeMap<UserId, Vec<String>>,
    /// Training interactions processed so far.
    pub processed: usize,
    /// Number of completed segmentations.
    pub segmentation: u32,
}

impl MemoryState {
    pub fn new(layout: MemoryLayout, domains: Vec<DomainId>) -> Result<Self> {
        if domains.is_empty() {
            return Err(Error::Config("at least one domain is required".into()));
        }
        if domains.iter().any(|d| d.as_str() == DomainId::ALL) {
            return Err(Error::Config(format!(
                "`{}` is reserved and cannot be a domain name",
                DomainId::ALL
            )));
        }
        let unique: BTreeSet<_> = domains.iter().collect();
        if unique.len() != domains.len() {
            return Err(Error::Config("domain names must be unique".into()));
        }
        Ok(Self {
            layout,
            domains,
            users: BTreeMap::new(),
            items: BTreeMap::new(),
            groups: BTreeMap::new(),
            user_tags: BTreeMap::new(),
            processed: 0,
            segmentation: 0,
        })
    }

    /// Keys present in every user's memory maps.
    pub fn memory_keys(&self) -> Vec<DomainId> {
        match self.layout {
            MemoryLayout::DualLayer => self.domains.clone(),
            MemoryLayout::Single => vec![DomainId::all()],
        }
    }

    pub fn check_domain(&self, domain: &DomainId) -> Result<()> {
        if self.domains.contains(domain) {
            Ok(())
        } else {
            Err(Error::UnknownDomain(domain.to_string()))
        }
    }

    /// Memory key that holds a user's memory for `domain`.
    pub fn memory_key(&self, domain: &DomainId) -> Result<DomainId> {
        self.check_domain(domain)?;
        Ok(match self.layout {
            MemoryLayout::DualLayer => domain.clone(),
            MemoryLayout::Single => DomainId::all(),
        })
    }

    pub fn add_user(&mut self, id: UserId) -> &mut UserAgent {
        let keys = self.memory_keys();
        self.users
            .entry(id.clone())
            .or_insert_with(|| UserAgent::new(id, &keys))
    }

    pub fn add_item(&mut self, item: ItemAgent) -> Result<()> {
        self.check_domain(&item.domain)?;
        self.items.insert(item.id.clone(), item);
        Ok(())
    }

    pub fn user(&self, id: &UserId) -> Result<&UserAgent> {
        self.users
            .get(id)
            .ok_or_else(|| Error::UnknownUser(id.to_string()))
    }

    pub fn user_mut(&mut self, id: &UserId) -> Result<&mut UserAgent> {
        self.users
            .get_mut(id)
            .ok_or_else(|| Error::UnknownUser(id.to_string()))
    }

    pub fn item(&self, id: &ItemId) -> Result<&ItemAgent> {
        self.items
            .get(id)
            .ok_or_else(|| Error::UnknownItem(id.to_string()))
    }

    pub fn write_item(&mut self, id: &ItemId, memory: impl Into<String>) -> Result<()> {
        let item = self
            .items
            .get_mut(id)
            .ok_or_else(|| Error::UnknownItem(id.to_string()))?;
        item.memory = memory.into();
        Ok(())
    }

    /// Assembles what `user` sees when deciding in `domain`: the domain's
    /// two memories plus, per group, the `shared_view` most recent entries
    /// newest first.
    pub fn decision_context(
        &self,
        user: &UserId,
        domain: &DomainId,
        options: ContextOptions,
    ) -> Result<DecisionContext> {
        let key = self.memory_key(domain)?;
        let agent = self.user(user)?;
        let shared_views = if options.shared_groups {
            agent
                .groups
                .iter()
                .filter_map(|gid| self.groups.get(gid))
                .map(|group| SharedView {
                    group: group.id.clone(),
                    name: group.name.clone(),
                    entries: group
                        .shared
                        .entries()
                        .rev()
                        .filter(|e| options.self_echo || e.user != *user)
                        .take(options.shared_view)
                        .cloned()
                        .collect(),
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(DecisionContext {
            separated: agent.separated(&key)?.to_string(),
            fused: agent.fused(&key)?.to_string(),
            shared_views,
        })
    }

    pub fn write_separated(&mut self, user: &UserId, domain: &DomainId, text: impl Into<String>) -> Result<()> {
        let key = self.memory_key(domain)?;
        self.user_mut(user)?.write_separated(&key, text)
    }

    pub fn write_fused(&mut self, user: &UserId, domain: &DomainId, text: impl Into<String>) -> Result<()> {
        let key = self.memory_key(domain)?;
        self.user_mut(user)?.write_fused(&key, text)
    }

    /// Text describing a user's interests across domains: the fused
    /// memories under the dual layout, the single memory otherwise.
    pub fn preference_text(&self, user: &UserId) -> Result<String> {
        let agent = self.user(user)?;
        let parts: Vec<String> = match self.layout {
            MemoryLayout::DualLayer => agent
                .fused_memories()
                .filter(|(_, m)| !m.trim().is_empty())
                .map(|(d, m)| format!("[{d}] {}", m.trim()))
                .collect(),
            MemoryLayout::Single => agent
                .separated_memories()
                .filter(|(_, m)| !m.trim().is_empty())
                .map(|(_, m)| m.trim().to_string())
                .collect(),
        };
        Ok(parts.join("\n"))
    }

    /// Checks the structural invariants. Used by tests and after restore.
    pub fn validate(&self) -> Result<()> {
        let keys: BTreeSet<DomainId> = self.memory_keys().into_iter().collect();
        for user in self.users.values() {
            if !user.keys_consistent() || !user.memory_keys().eq(keys.iter()) {
                return Err(Error::Snapshot(format!(
                    "user {} memory keys do not match the configured domains",
                    user.id
                )));
            }
            if let Some(g) = user.groups.iter().find(|g| !self.groups.contains_key(*g)) {
                return Err(Error::Snapshot(format!(
                    "user {} references missing group {g}",
                    user.id
                )));
            }
        }
        for item in self.items.values() {
            self.check_domain(&item.domain)?;
        }
        for group in self.groups.values() {
            if !group.shared.is_valid() {
                return Err(Error::Snapshot(format!("group {} exceeds capacity", group.id)));
            }
        }
        Ok(())
    }
}
