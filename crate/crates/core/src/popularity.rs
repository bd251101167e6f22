//! Item popularity partition (Pareto head/tail split) and user segmentation
//! by share of head-item consumption. Everything here is computed from the
//! training split only.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{ItemId, UserId};
use crate::ingest::InteractionSet;

#[derive(Debug, Error)]
pub enum PopularityError {
    #[error("training interaction references item {0} which is not in the catalog")]
    UnknownItem(ItemId),
    #[error("catalog has {0} item(s); a popularity partition needs at least 2")]
    DegenerateCatalog(usize),
    #[error("pareto fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("user threshold must lie strictly between 0 and 1, got {0}")]
    InvalidThreshold(f64),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PopularityError>;

/// Training interaction counts over the full catalog.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemStats {
    counts: BTreeMap<ItemId, u64>,
}

impl ItemStats {
    pub fn count(&self, item: ItemId) -> Option<u64> {
        self.counts.get(&item).copied()
    }

    pub fn counts(&self) -> &BTreeMap<ItemId, u64> {
        &self.counts
    }

    pub fn total_items(&self) -> usize {
        self.counts.len()
    }

    pub fn total_interactions(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Catalog items ordered by descending count, ties by ascending id.
    pub fn ranked(&self) -> Vec<(ItemId, u64)> {
        let mut ranked: Vec<(ItemId, u64)> = self.counts.iter().map(|(&i, &c)| (i, c)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked
    }
}

pub fn compute_item_stats(train: &InteractionSet, catalog: &BTreeSet<ItemId>) -> Result<ItemStats> {
    let mut counts: BTreeMap<ItemId, u64> = catalog.iter().map(|&i| (i, 0)).collect();
    for it in train.interactions() {
        match counts.get_mut(&it.item) {
            Some(c) => *c += 1,
            None => return Err(PopularityError::UnknownItem(it.item)),
        }
    }
    Ok(ItemStats { counts })
}

/// Popularity class of an item. Prompts call these H-class and T-class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PopClass {
    Popular,
    Niche,
}

impl PopClass {
    pub fn label(self) -> &'static str {
        match self {
            PopClass::Popular => "popular",
            PopClass::Niche => "niche",
        }
    }

    /// Bin index used by the calibration metrics: popular = 0, niche = 1.
    pub fn bin(self) -> usize {
        match self {
            PopClass::Popular => 0,
            PopClass::Niche => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopularityPartition {
    popular: BTreeSet<ItemId>,
    niche: BTreeSet<ItemId>,
    /// Catalog in rank order (descending count, ascending id on ties).
    ranking: Vec<(ItemId, u64)>,
    pareto_fraction: f64,
}

impl PopularityPartition {
    /// Build a partition directly from the two sets. The ranking follows
    /// popular-then-niche in id order.
    pub fn from_sets(popular: BTreeSet<ItemId>, niche: BTreeSet<ItemId>) -> Self {
        let total = popular.len() + niche.len();
        let ranking = popular.iter().chain(niche.iter()).map(|&i| (i, 0)).collect();
        Self {
            pareto_fraction: if total == 0 { 0.0 } else { popular.len() as f64 / total as f64 },
            popular,
            niche,
            ranking,
        }
    }

    pub fn popular(&self) -> &BTreeSet<ItemId> {
        &self.popular
    }

    pub fn niche(&self) -> &BTreeSet<ItemId> {
        &self.niche
    }

    pub fn pareto_fraction(&self) -> f64 {
        self.pareto_fraction
    }

    pub fn ranking(&self) -> &[(ItemId, u64)] {
        &self.ranking
    }

    pub fn class_of(&self, item: ItemId) -> Option<PopClass> {
        if self.popular.contains(&item) {
            Some(PopClass::Popular)
        } else if self.niche.contains(&item) {
            Some(PopClass::Niche)
        } else {
            None
        }
    }

    pub fn catalog_size(&self) -> usize {
        self.popular.len() + self.niche.len()
    }

    /// Audit export: `item_id,class` in rank order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["item_id", "class", "train_count"]).map_err(csv_io)?;
        for &(item, count) in &self.ranking {
            let class = self.class_of(item).map_or("", PopClass::label);
            w.write_record([item.to_string(), class.to_string(), count.to_string()]).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> PopularityError {
    PopularityError::Io(std::io::Error::other(e))
}

/// Number of head items for a catalog: `floor(fraction * total)`, at least 1.
pub fn popular_count(total_items: usize, fraction: f64) -> usize {
    ((total_items as f64 * fraction + 1e-9).floor() as usize).max(1)
}

/// Top `floor(fraction * |catalog|)` items by training count are popular;
/// among equal counts the lower item id wins.
pub fn classify_items(stats: &ItemStats, pareto_fraction: f64) -> Result<PopularityPartition> {
    if !(pareto_fraction > 0.0 && pareto_fraction < 1.0) {
        return Err(PopularityError::InvalidFraction(pareto_fraction));
    }
    let total = stats.total_items();
    if total < 2 {
        return Err(PopularityError::DegenerateCatalog(total));
    }
    let ranking = stats.ranked();
    let head = popular_count(total, pareto_fraction).min(total - 1);
    let popular = ranking[..head].iter().map(|&(i, _)| i).collect();
    let niche = ranking[head..].iter().map(|&(i, _)| i).collect();
    Ok(PopularityPartition { popular, niche, ranking, pareto_fraction })
}

/// User group relative to a consumption threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum UserGroup {
    /// Popular-leaning: head share at or above the threshold.
    P,
    /// Niche-leaning.
    N,
}

impl fmt::Display for UserGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UserGroup::P => "P",
            UserGroup::N => "N",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserSegments {
    ratios: BTreeMap<UserId, f64>,
    groups: BTreeMap<UserId, UserGroup>,
    threshold: f64,
}

impl UserSegments {
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn ratio(&self, user: UserId) -> Option<f64> {
        self.ratios.get(&user).copied()
    }

    pub fn group(&self, user: UserId) -> Option<UserGroup> {
        self.groups.get(&user).copied()
    }

    pub fn ratios(&self) -> &BTreeMap<UserId, f64> {
        &self.ratios
    }

    pub fn groups(&self) -> &BTreeMap<UserId, UserGroup> {
        &self.groups
    }

    /// (P count, N count)
    pub fn group_sizes(&self) -> (usize, usize) {
        let p = self.groups.values().filter(|&&g| g == UserGroup::P).count();
        (p, self.groups.len() - p)
    }

    /// Audit export: `user_id,ratio,group`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["user_id", "ratio", "group"]).map_err(csv_io)?;
        for (user, ratio) in &self.ratios {
            w.write_record([user.to_string(), format!("{ratio:.6}"), self.groups[user].to_string()]).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Share of each user's training interactions that fall on popular items,
/// and the resulting P/N label (`ratio >= threshold` is P).
pub fn classify_users(train: &InteractionSet, partition: &PopularityPartition, threshold: f64) -> Result<UserSegments> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(PopularityError::InvalidThreshold(threshold));
    }
    let mut ratios = BTreeMap::new();
    let mut groups = BTreeMap::new();
    for user in train.users() {
        let (mut hits, mut total) = (0u64, 0u64);
        for it in train.timeline(user) {
            total += 1;
            if partition.popular.contains(&it.item) {
                hits += 1;
            }
        }
        let ratio = hits as f64 / total as f64;
        // compare on counts so 8/10 against 0.8 is exact
        let group = if hits as f64 >= threshold * total as f64 - 1e-9 { UserGroup::P } else { UserGroup::N };
        ratios.insert(user, ratio);
        groups.insert(user, group);
    }
    Ok(UserSegments { ratios, groups, threshold })
}
