//! Prompt templates.
//!
//! A template file holds named sections. A section starts with a header line
//! `[template-id]` and runs until the next header. Placeholders are written
//! `{slot_name}`; `{{` and `}}` produce literal braces. Lines starting with
//! `#` before the first header are comments.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_TEMPLATES: &str = include_str!("../../templates/default.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    id: String,
    segments: Vec<Segment>,
}

impl Template {
    pub fn parse(id: &str, source: &str) -> Result<Self> {
        let mut segments = Vec::new();
        let mut text = String::new();
        let mut chars = source.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                '{' if chars.peek() == Some(&'{') => {
                    chars.next();
                    text.push('{');
                }
                '}' if chars.peek() == Some(&'}') => {
                    chars.next();
                    text.push('}');
                }
                '{' => {
                    let mut name = String::new();
                    loop {
                        match chars.next() {
                            Some('}') => break,
                            Some(ch) if ch.is_ascii_alphanumeric() || ch == '_' => name.push(ch),
                            Some(ch) => {
                                return Err(Error::Template(format!(
                                    "template `{id}`: invalid character {ch:?} in placeholder"
                                )))
                            }
                            None => {
                                return Err(Error::Template(format!(
                                    "template `{id}`: unterminated placeholder"
                                )))
                            }
                        }
                    }
                    if name.is_empty() {
                        return Err(Error::Template(format!("template `{id}`: empty placeholder")));
                    }
                    if !text.is_empty() {
                        segments.push(Segment::Text(std::mem::take(&mut text)));
                    }
                    segments.push(Segment::Slot(name));
                }
                '}' => {
                    return Err(Error::Template(format!(
                        "template `{id}`: unmatched `}}`"
                    )))
                }
                other => text.push(other),
            }
        }
        if !text.is_empty() {
            segments.push(Segment::Text(text));
        }
        Ok(Self {
            id: id.to_string(),
            segments,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Slot names referenced by the template.
    pub fn slots(&self) -> BTreeSet<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Slot(name) => Some(name.as_str()),
                Segment::Text(_) => None,
            })
            .collect()
    }

    fn first_position(&self, slot: &str) -> Option<usize> {
        self.segments
            .iter()
            .position(|s| matches!(s, Segment::Slot(name) if name == slot))
    }

    /// True when `first` occurs, and occurs before every occurrence of `second`.
    pub fn places_before(&self, first: &str, second: &str) -> bool {
        let last_first = self
            .segments
            .iter()
            .rposition(|s| matches!(s, Segment::Slot(name) if name == first));
        match (last_first, self.first_position(second)) {
            (Some(a), Some(b)) => a < b,
            _ => false,
        }
    }

    /// Substitutes every placeholder. Missing and unused slots are errors.
    pub fn render(&self, slots: &BTreeMap<String, String>) -> Result<String> {
        let used = self.slots();
        if let Some(extra) = slots.keys().find(|k| !used.contains(k.as_str())) {
            return Err(Error::Template(format!(
                "template `{}` does not use slot `{extra}`",
                self.id
            )));
        }
        let mut out = String::new();
        for segment in &self.segments {
            match segment {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(name) => match slots.get(name) {
                    Some(value) => out.push_str(value),
                    None => {
                        return Err(Error::Template(format!(
                            "template `{}` is missing slot `{name}`",
                            self.id
                        )))
                    }
                },
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<String, Template>,
}

fn header_id(line: &str) -> Option<&str> {
    let inner = line.trim_end().strip_prefix('[')?.strip_suffix(']')?;
    let mut chars = inner.chars();
    let first = chars.next()?;
    let valid = first.is_ascii_lowercase()
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || "-_.".contains(c));
    valid.then_some(inner)
}

impl TemplateSet {
    pub fn parse(source: &str) -> Result<Self> {
        let mut templates = BTreeMap::new();
        let mut current: Option<(String, Vec<&str>)> = None;
        let finish = |entry: Option<(String, Vec<&str>)>,
                          templates: &mut BTreeMap<String, Template>|
         -> Result<()> {
            if let Some((id, lines)) = entry {
                let body = lines.join("\n");
                let body = body.trim_matches('\n');
                let template = Template::parse(&id, body)?;
                if templates.insert(id.clone(), template).is_some() {
                    return Err(Error::Template(format!("duplicate template `{id}`")));
                }
            }
            Ok(())
        };
        for (lineno, line) in source.lines().enumerate() {
            if let Some(id) = header_id(line) {
                finish(current.take(), &mut templates)?;
                current = Some((id.to_string(), Vec::new()));
            } else if let Some((_, lines)) = current.as_mut() {
                lines.push(line);
            } else if !(line.trim().is_empty() || line.trim_start().starts_with('#')) {
                return Err(Error::Template(format!(
                    "line {}: text outside of a template section",
                    lineno + 1
                )));
            }
        }
        finish(current.take(), &mut templates)?;
        Ok(Self { templates })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let source = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&source)
    }

    /// Templates shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("built-in templates parse")
    }

    pub fn get(&self, id: &str) -> Result<&Template> {
        self.templates
            .get(id)
            .ok_or_else(|| Error::Template(format!("no template named `{id}`")))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn render(&self, id: &str, slots: &BTreeMap<String, String>) -> Result<String> {
        self.get(id)?.render(slots)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slots(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn substitutes_slots() {
        let t = Template::parse("t", "User likes: {prefs}").unwrap();
        assert_eq!(t.render(&slots(&[("prefs", "jazz")])).unwrap(), "User likes: jazz");
    }

    #[test]
    fn missing_slot_is_an_error() {
        let t = Template::parse("t", "User likes: {prefs}").unwrap();
        assert!(matches!(t.render(&slots(&[])), Err(Error::Template(_))));
    }

    #[test]
    fn unused_slot_is_an_error() {
        let t = Template::parse("t", "User likes: {prefs}").unwrap();
        let err = t.render(&slots(&[("prefs", "a"), ("other", "b")]));
        assert!(matches!(err, Err(Error::Template(_))));
    }

    #[test]
    fn negative_renders_before_positive() {
        let t = Template::parse("c", "A: {neg}\nB: {pos}").unwrap();
        let out = t.render(&slots(&[("neg", "NEG"), ("pos", "POS")])).unwrap();
        assert!(out.find("NEG").unwrap() < out.find("POS").unwrap());
        assert!(t.places_before("neg", "pos"));
        let swapped = Template::parse("c", "A: {pos}\nB: {neg}").unwrap();
        assert!(!swapped.places_before("neg", "pos"));
    }

    #[test]
    fn escaped_braces_are_literal() {
        let t = Template::parse("t", "{{\"a\": {x}}}").unwrap();
        assert_eq!(t.render(&slots(&[("x", "1")])).unwrap(), "{\"a\": 1}");
        assert!(Template::parse("t", "oops {x").is_err());
        assert!(Template::parse("t", "oops }").is_err());
    }

    #[test]
    fn parses_sections() {
        let set = TemplateSet::parse("# comment\n[a]\nhello {x}\n\n[b-2]\nbye\n").unwrap();
        assert_eq!(set.ids().collect::<Vec<_>>(), vec!["a", "b-2"]);
        assert_eq!(set.render("a", &slots(&[("x", "you")])).unwrap(), "hello you");
        assert!(TemplateSet::parse("stray\n[a]\nx").is_err());
        assert!(TemplateSet::parse("[a]\nx\n[a]\ny").is_err());
    }

    #[test]
    fn builtin_templates_cover_every_kind() {
        let set = TemplateSet::builtin();
        for kind in crate::backend::PromptKind::ALL {
            let t = set.get(kind.as_str()).unwrap();
            for slot in kind.required_slots() {
                assert!(t.slots().contains(slot), "{kind} template lacks {slot}");
            }
        }
        assert!(set
            .get("choose-positive")
            .unwrap()
            .places_before("neg", "pos"));
        set.get("rank-candidates-zero-shot").unwrap();
    }
}
