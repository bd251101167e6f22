//! Resolution of free-text recommendation titles to catalog items.
//!
//! Titles are normalized, looked up in an exact map, and otherwise compared
//! against every catalog entry by normalized edit similarity. Anything below
//! the fuzzy threshold stays unmatched but keeps its rank slot.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use log::debug;
use serde::{Deserialize, Serialize};
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::ids::{ItemId, UserId};
use crate::promptgen::StrategyKind;
use crate::recclient::RawRecommendation;

const ARTICLES: [&str; 3] = ["the", "a", "an"];

/// Split a trailing parenthetical four-digit year off `s`.
fn split_year(s: &str) -> (&str, Option<i32>) {
    let trimmed = s.trim_end();
    let bytes = trimmed.as_bytes();
    if bytes.len() >= 6 && bytes[bytes.len() - 1] == b')' && bytes[bytes.len() - 6] == b'(' {
        let digits = &trimmed[trimmed.len() - 5..trimmed.len() - 1];
        if digits.bytes().all(|b| b.is_ascii_digit()) {
            return (&trimmed[..trimmed.len() - 6], digits.parse().ok());
        }
    }
    (trimmed, None)
}

/// Normalize a title and also return the trailing year, if one was stripped.
pub fn normalize_with_year(title: &str) -> (String, Option<i32>) {
    let compat: String = title.nfkc().collect();
    let folded: String = compat.to_lowercase().nfkc().collect();
    let (base, year) = split_year(&folded);

    // "matrix, the" -> "the matrix"
    let mut relocated = base.trim_end().to_string();
    for article in ARTICLES {
        let suffix = format!(", {article}");
        if let Some(head) = relocated.strip_suffix(&suffix) {
            relocated = format!("{article} {head}");
            break;
        }
    }

    let spaced: String = relocated
        .chars()
        .filter(|&c| !is_combining_mark(c))
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    let mut tokens: Vec<&str> = spaced.split_whitespace().collect();
    let leading = tokens.iter().take(tokens.len().saturating_sub(1)).take_while(|t| ARTICLES.contains(t)).count();
    tokens.drain(..leading);
    (tokens.join(" "), year)
}

/// Canonical matching key for a title: compatibility-normalized, casefolded,
/// trailing `(YYYY)` removed, `", The"` style suffixes moved to the front,
/// punctuation turned into spaces, whitespace collapsed, and leading articles
/// dropped.
pub fn normalize_title(title: &str) -> String {
    normalize_with_year(title).0
}

/// `1 - levenshtein(a, b) / max(|a|, |b|)` over chars; 1.0 for two empty strings.
pub fn similarity(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - strsim::levenshtein(a, b) as f64 / longest as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub key: String,
    pub item: ItemId,
    pub year: Option<i32>,
    key_len: usize,
}

/// Immutable lookup structure over a title catalog.
#[derive(Debug, Clone)]
pub struct CatalogIndex {
    exact: HashMap<String, ItemId>,
    /// Keys shared by more than one item, with each item's year.
    shared: HashMap<String, Vec<(ItemId, Option<i32>)>>,
    entries: Vec<IndexEntry>,
    collisions: usize,
}

impl CatalogIndex {
    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn exact_len(&self) -> usize {
        self.exact.len()
    }

    /// Items that lost their exact-map slot to a lower id with the same key.
    pub fn collisions(&self) -> usize {
        self.collisions
    }

    pub fn exact_lookup(&self, key: &str) -> Option<ItemId> {
        self.exact.get(key).copied()
    }

    fn resolve_exact(&self, key: &str, year: Option<i32>) -> Option<ItemId> {
        let hit = self.exact.get(key).copied()?;
        if let (Some(year), Some(group)) = (year, self.shared.get(key)) {
            // year within one disambiguates before the lowest-id rule
            let best = group
                .iter()
                .filter_map(|&(item, y)| y.map(|y| ((y - year).abs(), item)))
                .filter(|&(delta, _)| delta <= 1)
                .min();
            if let Some((_, item)) = best {
                return Some(item);
            }
        }
        Some(hit)
    }

    fn best_fuzzy(&self, key: &str, threshold: f64) -> Option<(ItemId, f64)> {
        let len = key.chars().count();
        let mut best: Option<(ItemId, f64)> = None;
        for entry in &self.entries {
            let longest = len.max(entry.key_len);
            if longest == 0 || (len.abs_diff(entry.key_len) as f64) > longest as f64 * (1.0 - threshold) + 1e-9 {
                continue;
            }
            let score = similarity(key, &entry.key);
            if score + 1e-12 < threshold {
                continue;
            }
            let better = match best {
                None => true,
                Some((item, s)) => score > s || (score == s && entry.item < item),
            };
            if better {
                best = Some((entry.item, score));
            }
        }
        best
    }
}

/// Build the index. On exact-key collisions the lower item id keeps the
/// exact slot; every item still appears once in the fuzzy entries.
pub fn build_index(catalog: &BTreeMap<ItemId, String>) -> CatalogIndex {
    let mut exact = HashMap::with_capacity(catalog.len());
    let mut groups: HashMap<String, Vec<(ItemId, Option<i32>)>> = HashMap::new();
    let mut entries = Vec::with_capacity(catalog.len());
    let mut collisions = 0;
    // BTreeMap iteration is ascending by id, so the first writer wins
    for (&item, title) in catalog {
        let (key, year) = normalize_with_year(title);
        if let Some(&winner) = exact.get(&key) {
            collisions += 1;
            debug!("title collision on {key:?}: item {item} shadowed by {winner}");
        } else {
            exact.insert(key.clone(), item);
        }
        groups.entry(key.clone()).or_default().push((item, year));
        entries.push(IndexEntry { key_len: key.chars().count(), key, item, year });
    }
    let shared = groups.into_iter().filter(|(_, g)| g.len() > 1).collect();
    CatalogIndex { exact, shared, entries, collisions }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    Exact,
    Fuzzy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum Slot {
    Matched {
        raw: String,
        item: ItemId,
        kind: MatchKind,
        score: f64,
    },
    /// Out of catalog, or a repeat of an item already matched earlier in the
    /// list (`duplicate_of` is set).
    Unmatched {
        raw: String,
        duplicate_of: Option<ItemId>,
    },
}

impl Slot {
    pub fn item(&self) -> Option<ItemId> {
        match self {
            Slot::Matched { item, .. } => Some(*item),
            Slot::Unmatched { .. } => None,
        }
    }

    pub fn raw(&self) -> &str {
        match self {
            Slot::Matched { raw, .. } | Slot::Unmatched { raw, .. } => raw,
        }
    }
}

/// A recommendation list after resolution; slot order equals the provider's
/// title order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedList {
    pub user: UserId,
    pub strategy: StrategyKind,
    pub slots: Vec<Slot>,
}

impl MatchedList {
    pub fn matched_items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.slots.iter().filter_map(Slot::item)
    }

    pub fn unmatched_count(&self) -> usize {
        self.slots.iter().filter(|s| s.item().is_none()).count()
    }
}

pub fn match_title(title: &str, index: &CatalogIndex, fuzzy_threshold: f64) -> Option<(ItemId, MatchKind, f64)> {
    let (key, year) = normalize_with_year(title);
    if key.is_empty() {
        return None;
    }
    if let Some(item) = index.resolve_exact(&key, year) {
        return Some((item, MatchKind::Exact, 1.0));
    }
    index.best_fuzzy(&key, fuzzy_threshold).map(|(item, score)| (item, MatchKind::Fuzzy, score))
}

pub fn match_titles(rec: &RawRecommendation, index: &CatalogIndex, fuzzy_threshold: f64) -> MatchedList {
    let mut seen = BTreeSet::new();
    let slots = rec
        .titles
        .iter()
        .map(|raw| match match_title(raw, index, fuzzy_threshold) {
            Some((item, _, _)) if !seen.insert(item) => Slot::Unmatched { raw: raw.clone(), duplicate_of: Some(item) },
            Some((item, kind, score)) => Slot::Matched { raw: raw.clone(), item, kind, score },
            None => Slot::Unmatched { raw: raw.clone(), duplicate_of: None },
        })
        .collect();
    MatchedList { user: rec.user, strategy: rec.strategy, slots }
}

/// Append match audit rows: `user_id,strategy,rank,raw_title,outcome,item_id,score`.
pub fn write_audit<W: Write>(lists: &[MatchedList], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| std::io::Error::other(e);
    w.write_record(["user_id", "strategy", "rank", "raw_title", "outcome", "item_id", "score"]).map_err(io)?;
    for list in lists {
        for (rank, slot) in list.slots.iter().enumerate() {
            let (outcome, item, score) = match slot {
                Slot::Matched { item, kind: MatchKind::Exact, score, .. } => {
                    ("exact", item.to_string(), format!("{score:.4}"))
                }
                Slot::Matched { item, kind: MatchKind::Fuzzy, score, .. } => {
                    ("fuzzy", item.to_string(), format!("{score:.4}"))
                }
                Slot::Unmatched { duplicate_of: Some(item), .. } => ("duplicate", item.to_string(), String::new()),
                Slot::Unmatched { duplicate_of: None, .. } => ("unmatched", String::new(), String::new()),
            };
            w.write_record([
                list.user.to_string(),
                list.strategy.name().to_string(),
                (rank + 1).to_string(),
                slot.raw().to_string(),
                outcome.to_string(),
                item,
                score,
            ])
            .map_err(io)?;
        }
    }
    w.flush()
}
