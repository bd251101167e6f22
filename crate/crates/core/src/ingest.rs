//! Dataset loading and the preprocessing protocol: minimum-activity filter
//! followed by a per-user chronological train/test split.
//!
//! Readers take any `io::Read`, so callers can hand in a file or stdin.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{ItemId, UserId};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("unknown dataset format `{0}` (expected `movielens` or `goodbooks`)")]
    UnknownFormat(String),
    #[error("row {row}: {reason}")]
    MalformedRow { row: u64, reason: String },
    #[error("unexpected header {found:?}, expected columns {expected:?}")]
    BadHeader { found: Vec<String>, expected: Vec<&'static str> },
    #[error("train ratio must lie strictly between 0 and 1, got {0}")]
    InvalidRatio(f64),
    #[error("user {user} has {count} interaction(s); a temporal split needs at least 2")]
    TooFewInteractions { user: UserId, count: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, IngestError>;

/// Source dataset layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    /// `userId,movieId,rating,timestamp` / `movieId,title,genres`
    MovieLens,
    /// `user_id,book_id,rating` / books file with `book_id` and `title` columns
    Goodbooks,
}

impl DatasetFormat {
    fn ratings_header(self) -> &'static [&'static str] {
        match self {
            DatasetFormat::MovieLens => &["userId", "movieId", "rating", "timestamp"],
            DatasetFormat::Goodbooks => &["user_id", "book_id", "rating"],
        }
    }

    /// Inclusive rating scale of the source dataset.
    pub fn rating_scale(self) -> (f64, f64) {
        match self {
            DatasetFormat::MovieLens => (0.5, 5.0),
            DatasetFormat::Goodbooks => (1.0, 5.0),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            DatasetFormat::MovieLens => "movielens",
            DatasetFormat::Goodbooks => "goodbooks",
        }
    }
}

impl FromStr for DatasetFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "movielens" | "ml" | "ml-20m" => Ok(DatasetFormat::MovieLens),
            "goodbooks" | "goodbooks-10k" => Ok(DatasetFormat::Goodbooks),
            _ => Err(IngestError::UnknownFormat(s.to_string())),
        }
    }
}

/// One rating event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub rating: f64,
    /// Seconds since the epoch; absent for datasets without time information.
    pub timestamp: Option<i64>,
}

/// Interactions in file order plus a per-user chronological index.
///
/// Positions inside each user's timeline are sorted by timestamp with ties
/// (and missing timestamps) kept in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InteractionSet {
    interactions: Vec<Interaction>,
    per_user: BTreeMap<UserId, Vec<usize>>,
}

impl InteractionSet {
    pub fn new(interactions: Vec<Interaction>) -> Self {
        let mut per_user: BTreeMap<UserId, Vec<usize>> = BTreeMap::new();
        for (pos, it) in interactions.iter().enumerate() {
            per_user.entry(it.user).or_default().push(pos);
        }
        for positions in per_user.values_mut() {
            // stable: equal or absent timestamps keep file order
            positions.sort_by_key(|&p| interactions[p].timestamp);
        }
        Self { interactions, per_user }
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn user_count(&self) -> usize {
        self.per_user.len()
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.per_user.keys().copied()
    }

    pub fn contains_user(&self, user: UserId) -> bool {
        self.per_user.contains_key(&user)
    }

    pub fn item_ids(&self) -> BTreeSet<ItemId> {
        self.interactions.iter().map(|i| i.item).collect()
    }

    /// Positions (into [`interactions`](Self::interactions)) of a user's
    /// events in chronological order.
    pub fn positions(&self, user: UserId) -> &[usize] {
        self.per_user.get(&user).map(Vec::as_slice).unwrap_or(&[])
    }

    /// A user's interactions in chronological order.
    pub fn timeline(&self, user: UserId) -> impl DoubleEndedIterator<Item = &Interaction> + '_ {
        self.positions(user).iter().map(move |&p| &self.interactions[p])
    }

    /// True when every interaction carries a timestamp. When false, per-user
    /// order is file order.
    pub fn has_timestamps(&self) -> bool {
        self.interactions.iter().all(|i| i.timestamp.is_some())
    }

    pub fn timestamp_range(&self) -> Option<(i64, i64)> {
        let mut ts = self.interactions.iter().filter_map(|i| i.timestamp);
        let first = ts.next()?;
        Some(ts.fold((first, first), |(lo, hi), t| (lo.min(t), hi.max(t))))
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary { users: self.user_count(), items: self.item_ids().len(), interactions: self.len() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
}

/// Train and test sets produced by [`temporal_split`].
#[derive(Debug, Clone)]
pub struct SplitPair {
    pub train: InteractionSet,
    pub test: InteractionSet,
    pub ratio: f64,
}

fn csv_reader<R: Read>(source: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(source)
}

fn parse_field<T: FromStr>(record: &csv::StringRecord, idx: usize, row: u64, name: &str) -> Result<T> {
    let raw = record.get(idx).unwrap_or_default();
    raw.parse().map_err(|_| IngestError::MalformedRow { row, reason: format!("cannot parse {name} from {raw:?}") })
}

/// Parse a ratings file. Row numbers in errors are 1-based file lines, so the
/// first data row is row 2.
pub fn parse_interactions<R: Read>(source: R, format: DatasetFormat) -> Result<InteractionSet> {
    let mut reader = csv_reader(source);
    let expected = format.ratings_header();
    let header = reader.headers()?.clone();
    // an entirely empty input has no header row at all
    if !header.is_empty() && !header.iter().eq(expected.iter().copied()) {
        return Err(IngestError::BadHeader {
            found: header.iter().map(str::to_string).collect(),
            expected: expected.to_vec(),
        });
    }
    let (lo, hi) = format.rating_scale();

    let mut interactions = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row = record.position().map_or(0, |p| p.line());
        if record.len() != expected.len() {
            return Err(IngestError::MalformedRow {
                row,
                reason: format!("expected {} columns, found {}", expected.len(), record.len()),
            });
        }
        let user = UserId(parse_field(&record, 0, row, "user id")?);
        let item = ItemId(parse_field(&record, 1, row, "item id")?);
        let rating: f64 = parse_field(&record, 2, row, "rating")?;
        if !(lo..=hi).contains(&rating) {
            return Err(IngestError::MalformedRow {
                row,
                reason: format!("rating {rating} outside scale [{lo}, {hi}]"),
            });
        }
        let timestamp = match format {
            DatasetFormat::MovieLens => Some(parse_field(&record, 3, row, "timestamp")?),
            DatasetFormat::Goodbooks => None,
        };
        interactions.push(Interaction { user, item, rating, timestamp });
    }
    Ok(InteractionSet::new(interactions))
}

/// Parse an item metadata file into an id → title map. Only the id and title
/// columns are consumed.
pub fn parse_titles<R: Read>(source: R, format: DatasetFormat) -> Result<BTreeMap<ItemId, String>> {
    let mut reader = csv_reader(source);
    let header = reader.headers()?.clone();
    let (id_col, title_col) = match format {
        DatasetFormat::MovieLens => ("movieId", "title"),
        DatasetFormat::Goodbooks => ("book_id", "title"),
    };
    let find = |name: &str| header.iter().position(|h| h == name);
    let (Some(id_idx), Some(title_idx)) = (find(id_col), find(title_col)) else {
        return Err(IngestError::BadHeader {
            found: header.iter().map(str::to_string).collect(),
            expected: vec![id_col, title_col],
        });
    };

    let mut titles = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let row = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(IngestError::MalformedRow {
                row,
                reason: format!("expected {} columns, found {}", header.len(), record.len()),
            });
        }
        let id = ItemId(parse_field(&record, id_idx, row, "item id")?);
        titles.insert(id, record[title_idx].to_string());
    }
    Ok(titles)
}

/// Keep only users with at least `min_count` interactions.
pub fn filter_min_interactions(set: &InteractionSet, min_count: usize) -> InteractionSet {
    let keep: BTreeSet<UserId> =
        set.per_user.iter().filter(|(_, positions)| positions.len() >= min_count).map(|(&u, _)| u).collect();
    let kept = set.interactions.iter().filter(|i| keep.contains(&i.user)).copied().collect();
    InteractionSet::new(kept)
}

/// Number of a user's `n` interactions that go to training: `ceil(n * ratio)`.
///
/// The product is nudged down by a tiny epsilon so that values such as
/// `10 * 0.7 = 7.000000000000001` do not round up to 8.
pub fn train_size(n: usize, ratio: f64) -> usize {
    let raw = (n as f64 * ratio - 1e-9).ceil();
    (raw.max(0.0) as usize).min(n)
}

/// Per-user chronological split: the first `ceil(n * train_ratio)` events of
/// each user go to train, the remainder to test.
///
/// Users whose test share rounds to zero appear only in train.
pub fn temporal_split(set: &InteractionSet, train_ratio: f64) -> Result<SplitPair> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(IngestError::InvalidRatio(train_ratio));
    }
    if let Some((&user, positions)) = set.per_user.iter().find(|(_, p)| p.len() < 2) {
        return Err(IngestError::TooFewInteractions { user, count: positions.len() });
    }

    let mut train = Vec::with_capacity(set.len());
    let mut test = Vec::new();
    for positions in set.per_user.values() {
        let cut = train_size(positions.len(), train_ratio);
        train.extend(positions[..cut].iter().map(|&p| set.interactions[p]));
        test.extend(positions[cut..].iter().map(|&p| set.interactions[p]));
    }
    Ok(SplitPair { train: InteractionSet::new(train), test: InteractionSet::new(test), ratio: train_ratio })
}
