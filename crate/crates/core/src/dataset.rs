//! Review ingestion, filtering and chronological splitting.
//!
//! Input is newline-delimited JSON, one review per line:
//!
//! ```text
//! {"user_id":"A1","item_id":"B00X","domain":"Books","rating":5.0,"timestamp":1634000000,"title":"Dune","category":"Science Fiction"}
//! ```
//!
//! `rating` is a number in `[1, 5]` and `timestamp` integer epoch seconds.
//! Lines that do not parse are counted and skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::digest::{json_digest, rng_for};
use crate::error::{Error, Result};
use crate::ids::{DomainId, ItemId, UserId};
use crate::memory::SideInfo;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawReview {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub domain: DomainId,
    pub rating: f64,
    pub timestamp: i64,
    pub title: String,
    pub category: String,
}

impl RawReview {
    fn check(&self) -> std::result::Result<(), String> {
        if self.user_id.as_str().trim().is_empty() || self.item_id.as_str().trim().is_empty() {
            return Err("empty user or item id".into());
        }
        if self.domain.as_str().trim().is_empty() {
            return Err("empty domain".into());
        }
        if !(1.0..=5.0).contains(&self.rating) {
            return Err(format!("rating {} outside [1, 5]", self.rating));
        }
        Ok(())
    }

    pub fn interaction(&self) -> Interaction {
        Interaction {
            user: self.user_id.clone(),
            item: self.item_id.clone(),
            domain: self.domain.clone(),
            timestamp: self.timestamp,
            rating: self.rating,
        }
    }
}

/// A timestamped positive interaction; the unit of simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub domain: DomainId,
    pub timestamp: i64,
    pub rating: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogItem {
    pub item_id: ItemId,
    pub domain: DomainId,
    pub title: String,
    pub category: String,
}

impl CatalogItem {
    pub fn side_info(&self) -> SideInfo {
        SideInfo::new(self.title.clone(), self.category.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub reviews: Vec<RawReview>,
    pub skipped: usize,
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Reads newline-delimited reviews, skipping (and counting) malformed lines.
pub fn ingest(path: &Path) -> Result<Ingested> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reviews = Vec::new();
    let mut skipped = 0;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<RawReview>(&line)
            .map_err(|e| e.to_string())
            .and_then(|r| r.check().map(|_| r));
        match parsed {
            Ok(mut r) => {
                r.title = normalize_ws(&r.title);
                r.category = normalize_ws(&r.category);
                reviews.push(r);
            }
            Err(reason) => {
                warn!(line = lineno + 1, %reason, "skipping malformed review");
                skipped += 1;
            }
        }
    }
    Ok(Ingested { reviews, skipped })
}

/// A time bound given either as epoch seconds or as a `YYYY-MM-DD` UTC date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeBound {
    Epoch(i64),
    Date(String),
}

impl TimeBound {
    pub fn epoch(&self) -> Result<i64> {
        match self {
            TimeBound::Epoch(t) => Ok(*t),
            TimeBound::Date(s) => chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp())
                .map_err(|e| Error::Config(format!("bad date `{s}`: {e}"))),
        }
    }
}

/// A raw Amazon review dump plus its metadata file, for one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmazonSource {
    pub domain: DomainId,
    pub reviews: PathBuf,
    pub meta: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    /// Reviews in the native newline-delimited format.
    #[serde(default)]
    pub input: Option<PathBuf>,
    /// Raw Amazon dumps converted on the fly.
    #[serde(default)]
    pub amazon: Vec<AmazonSource>,
    pub domains: Vec<DomainId>,
    /// Inclusive start of the time window.
    pub window_start: TimeBound,
    /// Exclusive end of the time window.
    pub window_end: TimeBound,
    #[serde(default = "default_min_rating")]
    pub min_rating: f64,
    #[serde(default = "default_min_interactions")]
    pub min_interactions: usize,
    #[serde(default = "default_min_domains")]
    pub min_domains: usize,
    /// Users sampled after filtering; `None` (written `"all"`) keeps every
    /// eligible user.
    #[serde(default = "default_sample", with = "sample_size")]
    pub user_sample_size: Option<usize>,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub seed: u64,
    /// Split each user's history separately instead of the global timeline.
    #[serde(default)]
    pub per_user_split: bool,
    /// Output bundle directory.
    pub output: PathBuf,
}

fn default_min_rating() -> f64 {
    4.0
}
fn default_min_interactions() -> usize {
    10
}
fn default_min_domains() -> usize {
    2
}
fn default_sample() -> Option<usize> {
    Some(100)
}
mod sample_size {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Count(usize),
        Word(String),
    }

    pub fn serialize<S: Serializer>(value: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        match value {
            Some(n) => Repr::Count(*n),
            None => Repr::Word("all".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Count(n) => Ok(Some(n)),
            Repr::Word(w) if w == "all" => Ok(None),
            Repr::Word(w) => Err(serde::de::Error::custom(format!(
                "user_sample_size must be a count or \"all\", got \"{w}\""
            ))),
        }
    }
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

/// The four domains the shipped presets draw from.
pub const PRESET_DOMAINS: [&str; 4] = ["Books", "CDs", "Movies", "Games"];

impl DatasetSpec {
    /// The five 3-or-4 domain combinations of [`PRESET_DOMAINS`], numbered
    /// 1 to 5. Compositions are a reconstruction, not a published mapping.
    pub fn preset(index: usize, input: PathBuf, output: PathBuf) -> Result<Self> {
        let domains: &[&str] = match index {
            1 => &["Books", "CDs", "Movies"],
            2 => &["Books", "CDs", "Games"],
            3 => &["Books", "Movies", "Games"],
            4 => &["CDs", "Movies", "Games"],
            5 => &PRESET_DOMAINS,
            _ => return Err(Error::Config(format!("no preset cross-{index}"))),
        };
        Ok(Self {
            name: format!("cross-{index}"),
            input: Some(input),
            amazon: Vec::new(),
            domains: domains.iter().map(|d| DomainId::from(*d)).collect(),
            window_start: TimeBound::Date("2021-10-01".into()),
            window_end: TimeBound::Date("2022-04-01".into()),
            min_rating: default_min_rating(),
            min_interactions: default_min_interactions(),
            min_domains: default_min_domains(),
            user_sample_size: default_sample(),
            split: default_split(),
            seed: 0,
            per_user_split: false,
            output,
        })
    }

    pub fn from_toml(source: &str) -> Result<Self> {
        let spec: Self = toml::from_str(source).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let source = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = Self::from_toml(&source)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = spec.input.as_mut() {
            fix(p);
        }
        for src in &mut spec.amazon {
            fix(&mut src.reviews);
            fix(&mut src.meta);
        }
        fix(&mut spec.output);
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.domains.len();
        if !(3..=4).contains(&n) {
            return Err(Error::Config(format!("a dataset needs 3 or 4 domains, got {n}")));
        }
        if self.domains.iter().collect::<BTreeSet<_>>().len() != n {
            return Err(Error::Config("duplicate domain".into()));
        }
        if self.split.iter().any(|r| !(0.0..=1.0).contains(r))
            || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!("split ratios {:?} must sum to 1", self.split)));
        }
        if self.window_start.epoch()? >= self.window_end.epoch()? {
            return Err(Error::Config("empty time window".into()));
        }
        if self.input.is_none() && self.amazon.is_empty() {
            return Err(Error::Config("dataset spec needs `input` or `amazon` sources".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        json_digest(&(
            &self.name,
            &self.domains,
            self.window_start.epoch().ok(),
            self.window_end.epoch().ok(),
            self.min_rating,
            self.min_interactions,
            self.min_domains,
            self.user_sample_size,
            self.split,
            self.seed,
            self.per_user_split,
        ))
    }
}

/// Applies, in order: minimum rating, time window, domain restriction,
/// multi-domain and minimum-activity user rules, then a seeded uniform
/// sample of users. Record order is preserved.
pub fn filter_pipeline(reviews: &[RawReview], spec: &DatasetSpec) -> Result<Vec<RawReview>> {
    let start = spec.window_start.epoch()?;
    let end = spec.window_end.epoch()?;
    let domains: BTreeSet<&DomainId> = spec.domains.iter().collect();
    let kept: Vec<&RawReview> = reviews
        .iter()
        .filter(|r| r.rating >= spec.min_rating)
        .filter(|r| (start..end).contains(&r.timestamp))
        .filter(|r| domains.contains(&r.domain))
        .collect();

    let mut activity: BTreeMap<&UserId, (usize, BTreeSet<&DomainId>)> = BTreeMap::new();
    for r in &kept {
        let entry = activity.entry(&r.user_id).or_default();
        entry.0 += 1;
        entry.1.insert(&r.domain);
    }
    let eligible: Vec<&UserId> = activity
        .into_iter()
        .filter(|(_, (count, doms))| *count >= spec.min_interactions && doms.len() >= spec.min_domains)
        .map(|(u, _)| u)
        .collect();

    let chosen: BTreeSet<&UserId> = match spec.user_sample_size {
        None => eligible.into_iter().collect(),
        Some(n) if n > eligible.len() => {
            return Err(Error::DatasetTooSmall {
                eligible: eligible.len(),
                requested: n,
            })
        }
        Some(n) => {
            let mut rng = rng_for(spec.seed, &[0x5eed]);
            eligible.choose_multiple(&mut rng, n).copied().collect()
        }
    };
    Ok(kept
        .into_iter()
        .filter(|r| chosen.contains(&r.user_id))
        .cloned()
        .collect())
}

/// Item catalog from retained reviews; the first record of an item wins.
pub fn build_catalog(reviews: &[RawReview]) -> Vec<CatalogItem> {
    let mut items: BTreeMap<&ItemId, CatalogItem> = BTreeMap::new();
    for r in reviews {
        items.entry(&r.item_id).or_insert_with(|| CatalogItem {
            item_id: r.item_id.clone(),
            domain: r.domain.clone(),
            title: r.title.clone(),
            category: r.category.clone(),
        });
    }
    items.into_values().collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub train: Vec<Interaction>,
    pub valid: Vec<Interaction>,
    pub test: Vec<Interaction>,
}

/// Sizes of the three parts for `n` records: `round(r0 n)`, `round(r1 n)`,
/// and the remainder.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> (usize, usize, usize) {
    let train = ((ratios[0] * n as f64).round() as usize).min(n);
    let valid = ((ratios[1] * n as f64).round() as usize).min(n - train);
    (train, valid, n - train - valid)
}

/// Stable chronological sort.
pub fn sort_chronologically(interactions: &mut [Interaction]) {
    interactions.sort_by_key(|i| i.timestamp);
}

/// Global chronological split into contiguous train/valid/test parts.
pub fn split(interactions: &[Interaction], ratios: [f64; 3]) -> Split {
    let n = interactions.len();
    if n < 10 {
        warn!(n, "degenerate split: fewer than 10 interactions");
    }
    let mut sorted = interactions.to_vec();
    sort_chronologically(&mut sorted);
    let (a, b, _) = split_sizes(n, ratios);
    let test = sorted.split_off(a + b);
    let valid = sorted.split_off(a);
    Split {
        train: sorted,
        valid,
        test,
    }
}

/// Splits each user's history chronologically, then merges the parts.
pub fn split_per_user(interactions: &[Interaction], ratios: [f64; 3]) -> Split {
    let mut by_user: BTreeMap<&UserId, Vec<Interaction>> = BTreeMap::new();
    for i in interactions {
        by_user.entry(&i.user).or_default().push(i.clone());
    }
    let mut out = Split::default();
    for (_, history) in by_user {
        let part = split(&history, ratios);
        out.train.extend(part.train);
        out.valid.extend(part.valid);
        out.test.extend(part.test);
    }
    sort_chronologically(&mut out.train);
    sort_chronologically(&mut out.valid);
    sort_chronologically(&mut out.test);
    out
}

/// Converts one raw Amazon review dump (with its metadata file) into
/// native reviews. Review timestamps in milliseconds are converted to
/// seconds; items without metadata are dropped.
pub fn convert_amazon(source: &AmazonSource) -> Result<Ingested> {
    use serde_json::Value;
    let read_lines = |path: &Path| -> Result<Vec<String>> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        BufReader::new(file)
            .lines()
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(path, e))
    };
    let mut meta: BTreeMap<String, (String, String)> = BTreeMap::new();
    for line in read_lines(&source.meta)? {
        let Ok(v) = serde_json::from_str::<Value>(&line) else {
            continue;
        };
        let Some(asin) = v["parent_asin"].as_str().or(v["asin"].as_str()) else {
            continue;
        };
        let title = v["title"].as_str().unwrap_or_default().to_string();
        let category = match &v["categories"] {
            Value::Array(parts) => parts
                .iter()
                .filter_map(Value::as_str)
                .collect::<Vec<_>>()
                .join(" > "),
            _ => v["main_category"].as_str().unwrap_or_default().to_string(),
        };
        meta.insert(asin.to_string(), (title, category));
    }
    let mut reviews = Vec::new();
    let mut skipped = 0;
    for line in read_lines(&source.reviews)? {
        if line.trim().is_empty() {
            continue;
        }
        let review = serde_json::from_str::<Value>(&line).ok().and_then(|v| {
            let asin = v["parent_asin"].as_str().or(v["asin"].as_str())?;
            let (title, category) = meta.get(asin)?;
            let ts = v["timestamp"]
                .as_i64()
                .or_else(|| v["unixReviewTime"].as_i64().map(|s| s * 1000))?;
            let r = RawReview {
                user_id: UserId::new(v["user_id"].as_str().or(v["reviewerID"].as_str())?),
                item_id: ItemId::new(asin),
                domain: source.domain.clone(),
                rating: v["rating"].as_f64().or(v["overall"].as_f64())?,
                timestamp: ts / 1000,
                title: normalize_ws(title),
                category: normalize_ws(category),
            };
            r.check().ok().map(|_| r)
        });
        match review {
            Some(r) => reviews.push(r),
            None => skipped += 1,
        }
    }
    Ok(Ingested { reviews, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub name: String,
    pub spec_digest: String,
    pub domains: Vec<DomainId>,
    pub users: usize,
    pub items: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub skipped_lines: usize,
}

impl BundleManifest {
    /// Digest identifying the bundle contents.
    pub fn digest(&self) -> String {
        json_digest(self)
    }
}

/// A prepared dataset: splits, catalog and manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub manifest: BundleManifest,
    pub split: Split,
    pub items: Vec<CatalogItem>,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("serializable"));
        out.push('\n');
    }
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| {
            Error::Dataset(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?);
    }
    Ok(rows)
}

impl Bundle {
    /// Runs the full preparation pipeline for `spec`.
    pub fn prepare(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let mut reviews = Vec::new();
        let mut skipped = 0;
        if let Some(input) = &spec.input {
            let ingested = ingest(input)?;
            reviews.extend(ingested.reviews);
            skipped += ingested.skipped;
        }
        for source in &spec.amazon {
            let ingested = convert_amazon(source)?;
            reviews.extend(ingested.reviews);
            skipped += ingested.skipped;
        }
        Self::from_reviews(spec, &reviews, skipped)
    }

    pub fn from_reviews(spec: &DatasetSpec, reviews: &[RawReview], skipped: usize) -> Result<Self> {
        let retained = filter_pipeline(reviews, spec)?;
        let interactions: Vec<Interaction> = retained.iter().map(RawReview::interaction).collect();
        let split = if spec.per_user_split {
            split_per_user(&interactions, spec.split)
        } else {
            split(&interactions, spec.split)
        };
        let items = build_catalog(&retained);
        let users: BTreeSet<&UserId> = retained.iter().map(|r| &r.user_id).collect();
        Ok(Self {
            manifest: BundleManifest {
                name: spec.name.clone(),
                spec_digest: spec.digest(),
                domains: spec.domains.clone(),
                users: users.len(),
                items: items.len(),
                train: split.train.len(),
                valid: split.valid.len(),
                test: split.test.len(),
                skipped_lines: skipped,
            },
            split,
            items,
        })
    }

    /// Writes the bundle to `dir`. An existing non-empty directory is only
    /// overwritten with `force`.
    pub fn write(&self, dir: &Path, force: bool) -> Result<()> {
        let occupied = dir
            .read_dir()
            .map(|mut entries| entries.next().is_some())
            .unwrap_or(false);
        if occupied && !force {
            return Err(Error::Dataset(format!(
                "{} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join("train.jsonl"), &self.split.train)?;
        write_jsonl(&dir.join("valid.jsonl"), &self.split.valid)?;
        write_jsonl(&dir.join("test.jsonl"), &self.split.test)?;
        write_jsonl(&dir.join("items.jsonl"), &self.items)?;
        let manifest = serde_json::to_string_pretty(&self.manifest).expect("serializable");
        let path = dir.join("manifest.json");
        std::fs::write(&path, manifest + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: BundleManifest =
            serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        Ok(Self {
            manifest,
            split: Split {
                train: read_jsonl(&dir.join("train.jsonl"))?,
                valid: read_jsonl(&dir.join("valid.jsonl"))?,
                test: read_jsonl(&dir.join("test.jsonl"))?,
            },
            items: read_jsonl(&dir.join("items.jsonl"))?,
        })
    }

    /// Every item each user interacted with, across all splits.
    pub fn interacted(&self) -> BTreeMap<UserId, BTreeSet<ItemId>> {
        let mut out: BTreeMap<UserId, BTreeSet<ItemId>> = BTreeMap::new();
        for i in self
            .split
            .train
            .iter()
            .chain(&self.split.valid)
            .chain(&self.split.test)
        {
            out.entry(i.user.clone()).or_default().insert(i.item.clone());
        }
        out
    }
}
