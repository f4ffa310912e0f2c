//! Newline-delimited snapshot format for [`MemoryState`].
//!
//! ```text
//! {"format":"memsim-snapshot","version":1,"layout":"dual-layer","domains":[..],"processed":0,"segmentation":0}
//! {"record":"user","id":"u1","payload":{..}}
//! {"record":"item","id":"i1","payload":{..}}
//! {"record":"group","id":"s1-g0","payload":{..}}
//! {"record":"tags","id":"u1","payload":["rock music"]}
//! {"record":"end","count":4}
//! ```
//!
//! Records appear in a fixed order (users, items, groups, tags, each sorted
//! by id), so equal states serialize to identical bytes.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::ids::{DomainId, UserId};
use crate::memory::{ItemAgent, MemoryLayout, MemoryState, UserAgent};
use crate::groups::InterestGroup;

const FORMAT: &str = "memsim-snapshot";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    layout: MemoryLayout,
    domains: Vec<DomainId>,
    processed: usize,
    segmentation: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    record: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    payload: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    count: Option<usize>,
}

fn line<T: Serialize>(out: &mut String, value: &T) {
    out.push_str(&serde_json::to_string(value).expect("serializable"));
    out.push('\n');
}

fn record<T: Serialize>(out: &mut String, kind: &str, id: &str, payload: &T) {
    line(
        out,
        &Record {
            record: kind.into(),
            id: Some(id.into()),
            payload: Some(serde_json::to_value(payload).expect("serializable")),
            count: None,
        },
    );
}

/// Serializes `state` to the snapshot text format.
pub fn snapshot(state: &MemoryState) -> String {
    let mut out = String::new();
    line(
        &mut out,
        &Header {
            format: FORMAT.into(),
            version: VERSION,
            layout: state.layout,
            domains: state.domains.clone(),
            processed: state.processed,
            segmentation: state.segmentation,
        },
    );
    for (id, user) in &state.users {
        record(&mut out, "user", id.as_str(), user);
    }
    for (id, item) in &state.items {
        record(&mut out, "item", id.as_str(), item);
    }
    for (id, group) in &state.groups {
        record(&mut out, "group", id.as_str(), group);
    }
    for (id, tags) in &state.user_tags {
        record(&mut out, "tags", id.as_str(), tags);
    }
    let count = state.users.len() + state.items.len() + state.groups.len() + state.user_tags.len();
    line(
        &mut out,
        &Record {
            record: "end".into(),
            id: None,
            payload: None,
            count: Some(count),
        },
    );
    out
}

pub fn snapshot_digest(state: &MemoryState) -> String {
    sha256_hex(snapshot(state))
}

fn corrupt(lineno: usize, what: impl std::fmt::Display) -> Error {
    Error::Snapshot(format!("line {lineno}: {what}"))
}

fn payload<T: for<'de> Deserialize<'de>>(lineno: usize, rec: Record) -> Result<(String, T)> {
    let id = rec.id.ok_or_else(|| corrupt(lineno, "record without id"))?;
    let value = rec.payload.ok_or_else(|| corrupt(lineno, "record without payload"))?;
    let parsed = serde_json::from_value(value).map_err(|e| corrupt(lineno, e))?;
    Ok((id, parsed))
}

/// Parses a snapshot, rejecting truncated or corrupt input.
pub fn restore(blob: &str) -> Result<MemoryState> {
    let mut lines = blob.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Snapshot("empty snapshot".into()))?;
    let header: Header = serde_json::from_str(first).map_err(|e| corrupt(1, e))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(corrupt(
            1,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    let mut state = MemoryState::new(header.layout, header.domains)?;
    state.processed = header.processed;
    state.segmentation = header.segmentation;

    let mut count = 0usize;
    let mut ended = false;
    for (lineno, text) in lines {
        if ended {
            return Err(corrupt(lineno, "data after end record"));
        }
        let rec: Record = serde_json::from_str(text).map_err(|e| corrupt(lineno, e))?;
        match rec.record.as_str() {
            "user" => {
                let (id, user): (String, UserAgent) = payload(lineno, rec)?;
                if user.id.as_str() != id {
                    return Err(corrupt(lineno, "user id mismatch"));
                }
                state.users.insert(user.id.clone(), user);
            }
            "item" => {
                let (id, item): (String, ItemAgent) = payload(lineno, rec)?;
                if item.id.as_str() != id {
                    return Err(corrupt(lineno, "item id mismatch"));
                }
                state.items.insert(item.id.clone(), item);
            }
            "group" => {
                let (id, group): (String, InterestGroup) = payload(lineno, rec)?;
                if group.id.as_str() != id {
                    return Err(corrupt(lineno, "group id mismatch"));
                }
                state.groups.insert(group.id.clone(), group);
            }
            "tags" => {
                let (id, tags): (String, Vec<String>) = payload(lineno, rec)?;
                state.user_tags.insert(UserId::new(id), tags);
            }
            "end" => {
                if rec.count != Some(count) {
                    return Err(corrupt(lineno, "record count mismatch"));
                }
                ended = true;
                continue;
            }
            other => return Err(corrupt(lineno, format!("unknown record kind `{other}`"))),
        }
        count += 1;
    }
    if !ended {
        return Err(Error::Snapshot("truncated snapshot: missing end record".into()));
    }
    state.validate()?;
    Ok(state)
}

/// Writes a snapshot atomically (temporary file plus rename).
pub fn write_snapshot(state: &MemoryState, path: &Path) -> Result<String> {
    let text = snapshot(state);
    write_atomic(path, text.as_bytes())?;
    Ok(sha256_hex(&text))
}

pub fn read_snapshot(path: &Path) -> Result<MemoryState> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    restore(&text)
}

/// Writes `bytes` to a temporary sibling file, syncs it, then renames it
/// over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes)
        .and_then(|_| file.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{SharedEntry, SideInfo};

    fn sample() -> MemoryState {
        let mut s = MemoryState::new(MemoryLayout::DualLayer, vec!["Books".into(), "Games".into()]).unwrap();
        s.add_user("u1".into());
        s.add_item(ItemAgent::init("i1".into(), "Books".into(), SideInfo::new("Dune", "sci-fi")).unwrap())
            .unwrap();
        s.write_fused(&"u1".into(), &"Games".into(), "likes \"quoted\"\nlines").unwrap();
        let mut g = InterestGroup::new("s1-g0".into(), "Sci-fi".into(), 2).unwrap();
        g.member_users.insert("u1".into());
        g.shared.push(SharedEntry {
            user: "u1".into(),
            item_summary: "Dune".into(),
            domain: "Books".into(),
            timestamp: 3,
        });
        s.groups.insert(g.id.clone(), g);
        s.user_mut(&"u1".into()).unwrap().groups.insert("s1-g0".into());
        s.user_tags.insert("u1".into(), vec!["sci-fi".into()]);
        s.processed = 5;
        s.segmentation = 1;
        s
    }

    #[test]
    fn round_trip_fresh_state() {
        let s = MemoryState::new(MemoryLayout::Single, vec!["Books".into()]).unwrap();
        assert_eq!(restore(&snapshot(&s)).unwrap(), s);
    }

    #[test]
    fn round_trip_populated_state() {
        let s = sample();
        let text = snapshot(&s);
        let back = restore(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(snapshot(&back), text);
    }

    #[test]
    fn truncated_snapshot_is_rejected() {
        let text = snapshot(&sample());
        let lines: Vec<&str> = text.lines().collect();
        let truncated = lines[..lines.len() - 1].join("\n");
        assert!(matches!(restore(&truncated), Err(Error::Snapshot(_))));
        let cut = &text[..text.len() / 2];
        assert!(matches!(restore(cut), Err(Error::Snapshot(_))));
        assert!(matches!(restore(""), Err(Error::Snapshot(_))));
    }

    #[test]
    fn dangling_group_reference_is_rejected() {
        let mut s = sample();
        s.groups.clear();
        assert!(restore(&snapshot(&s)).is_err());
    }
}
