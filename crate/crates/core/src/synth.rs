//! Seeded synthetic rating data with a Zipf-shaped item popularity curve.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ids::{ItemId, UserId};
use crate::ingest::{Interaction, InteractionSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    #[serde(default = "default_min")]
    pub min_per_user: usize,
    #[serde(default = "default_max")]
    pub max_per_user: usize,
    /// Zipf exponent of the global item popularity curve.
    #[serde(default = "default_s")]
    pub zipf_s: f64,
    /// Per-user exponents are drawn from `zipf_s * [1 - spread, 1 + spread]`
    /// so that some users lean further into the tail than others.
    #[serde(default = "default_spread")]
    pub user_spread: f64,
}

fn default_min() -> usize {
    30
}
fn default_max() -> usize {
    60
}
fn default_s() -> f64 {
    1.0
}
fn default_spread() -> f64 {
    0.8
}

impl SyntheticConfig {
    pub fn new(users: usize, items: usize) -> Self {
        Self {
            users,
            items,
            min_per_user: default_min(),
            max_per_user: default_max(),
            zipf_s: default_s(),
            user_spread: default_spread(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub interactions: InteractionSet,
    pub titles: BTreeMap<ItemId, String>,
}

/// Item ids are 1-based and ordered by intended popularity (id 1 is the head).
pub fn zipf_weights(items: usize, s: f64) -> Vec<f64> {
    (1..=items).map(|rank| (rank as f64).powf(-s)).collect()
}

pub fn synthetic_title(item: ItemId) -> String {
    format!("Synthetic Feature {:05} ({})", item.0, 1950 + item.0 % 70)
}

/// Generate users with distinct items each, timestamps increasing per user.
pub fn generate(config: &SyntheticConfig, seed: u64) -> SyntheticData {
    assert!(config.items >= 2, "synthetic catalog needs at least two items");
    assert!(config.min_per_user >= 1 && config.min_per_user <= config.max_per_user);
    assert!(config.max_per_user <= config.items, "users cannot rate more distinct items than exist");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut rows = Vec::new();
    for u in 1..=config.users as u64 {
        let s = config.zipf_s * rng.random_range(1.0 - config.user_spread..=1.0 + config.user_spread);
        let weights = zipf_weights(config.items, s.max(0.0));
        let dist = WeightedIndex::new(&weights).expect("positive weights");
        let n = rng.random_range(config.min_per_user..=config.max_per_user);
        let mut seen = BTreeSet::new();
        let mut ts = 1_000_000_000 + rng.random_range(0..1_000_000i64);
        while seen.len() < n {
            let item = ItemId(dist.sample(&mut rng) as u64 + 1);
            if seen.insert(item) {
                ts += rng.random_range(1..5_000i64);
                let rating = rng.random_range(1..=10u32) as f64 / 2.0;
                rows.push(Interaction { user: UserId(u), item, rating, timestamp: Some(ts) });
            }
        }
    }
    let titles = (1..=config.items as u64).map(|i| (ItemId(i), synthetic_title(ItemId(i)))).collect();
    SyntheticData { interactions: InteractionSet::new(rows), titles }
}

/// Write the data as MovieLens-style `ratings.csv` and `movies.csv` contents.
pub fn write_movielens<W1: Write, W2: Write>(data: &SyntheticData, ratings: W1, movies: W2) -> std::io::Result<()> {
    let io = |e: csv::Error| std::io::Error::other(e);
    let mut w = csv::Writer::from_writer(ratings);
    w.write_record(["userId", "movieId", "rating", "timestamp"]).map_err(io)?;
    for it in data.interactions.interactions() {
        let ts = it.timestamp.map(|t| t.to_string()).unwrap_or_default();
        w.write_record([it.user.to_string(), it.item.to_string(), format!("{:.1}", it.rating), ts]).map_err(io)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(movies);
    w.write_record(["movieId", "title", "genres"]).map_err(io)?;
    for (id, title) in &data.titles {
        w.write_record([id.to_string(), title.clone(), "Drama".to_string()]).map_err(io)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{parse_interactions, parse_titles, DatasetFormat};

    #[test]
    fn deterministic_and_well_formed() {
        let cfg = SyntheticConfig::new(20, 100);
        let a = generate(&cfg, 5);
        let b = generate(&cfg, 5);
        assert_eq!(a.interactions, b.interactions);
        assert_eq!(a.interactions.user_count(), 20);
        for u in a.interactions.users() {
            let n = a.interactions.positions(u).len();
            assert!((30..=60).contains(&n));
            let items: BTreeSet<_> = a.interactions.timeline(u).map(|i| i.item).collect();
            assert_eq!(items.len(), n);
        }
        assert_ne!(generate(&cfg, 6).interactions, a.interactions);
    }

    #[test]
    fn movielens_round_trip() {
        let data = generate(&SyntheticConfig::new(5, 80), 1);
        let (mut r, mut m) = (Vec::new(), Vec::new());
        write_movielens(&data, &mut r, &mut m).unwrap();
        let set = parse_interactions(r.as_slice(), DatasetFormat::MovieLens).unwrap();
        assert_eq!(set, data.interactions);
        assert_eq!(parse_titles(m.as_slice(), DatasetFormat::MovieLens).unwrap(), data.titles);
    }
}
