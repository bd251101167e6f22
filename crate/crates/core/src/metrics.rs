//! Fairness and accuracy metrics.
//!
//! * LtC: share of niche items that appear in at least one list.
//! * MC / RMC / MRMC: divergence between a target popularity distribution
//!   and the list's popularity distribution, normalized by the divergence of
//!   the worst single-bin list, averaged over prefix depths and then users.
//! * MRR@k, Precision@k, Recall@k, F1@k against the test split.
//!
//! Unmatched slots occupy rank positions: they count in the `k` denominator
//! and as misses, and they carry no popularity mass.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{ItemId, UserId};
use crate::ingest::InteractionSet;
use crate::matcher::{MatchedList, Slot};
use crate::popularity::{PopClass, PopularityPartition, UserGroup, UserSegments};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("distribution has a zero component under {0}; smooth it first")]
    ZeroComponent(DivergenceKind),
    #[error("divergence of an empty distribution is undefined")]
    EmptyDistribution,
    #[error("invalid distribution {0:?}: components must be non-negative and sum to 1")]
    InvalidDistribution([f64; 2]),
    #[error("long-tail coverage is undefined for an empty niche set")]
    EmptyNiche,
    #[error("list for user {0} but the user is not among the evaluated users")]
    UnknownUser(UserId),
    #[error("no target distribution for user {0}")]
    MissingTarget(UserId),
    #[error("no users to average over")]
    NoUsers,
    #[error("cutoff must be at least 1")]
    InvalidCutoff,
    #[error("smoothing must lie strictly between 0 and 1, got {0}")]
    InvalidSmoothing(f64),
    #[error("unknown divergence `{0}` (expected kl, hellinger or chisq)")]
    UnknownDivergence(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceKind {
    Kl,
    Hellinger,
    ChiSq,
}

impl DivergenceKind {
    pub const ALL: [DivergenceKind; 3] = [DivergenceKind::Kl, DivergenceKind::Hellinger, DivergenceKind::ChiSq];

    pub fn name(self) -> &'static str {
        match self {
            DivergenceKind::Kl => "kl",
            DivergenceKind::Hellinger => "hellinger",
            DivergenceKind::ChiSq => "chisq",
        }
    }
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DivergenceKind {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kl" => Ok(DivergenceKind::Kl),
            "hellinger" => Ok(DivergenceKind::Hellinger),
            "chisq" | "chi2" | "chi-squared" => Ok(DivergenceKind::ChiSq),
            _ => Err(MetricsError::UnknownDivergence(s.to_string())),
        }
    }
}

/// Mass over the two popularity bins `[popular, niche]`, or the empty
/// distribution of a list with no classified items.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinDistribution {
    mass: [f64; 2],
}

impl BinDistribution {
    pub const EMPTY: BinDistribution = BinDistribution { mass: [0.0, 0.0] };

    pub fn new(popular: f64, niche: f64) -> Result<Self> {
        let mass = [popular, niche];
        let valid = mass.iter().all(|&m| m >= 0.0 && m.is_finite()) && ((popular + niche) - 1.0).abs() <= 1e-12;
        if !valid {
            return Err(MetricsError::InvalidDistribution(mass));
        }
        Ok(Self { mass })
    }

    pub fn from_counts(popular: usize, niche: usize) -> Self {
        let total = popular + niche;
        if total == 0 {
            return Self::EMPTY;
        }
        Self { mass: [popular as f64 / total as f64, niche as f64 / total as f64] }
    }

    /// All mass on one bin.
    pub fn point(class: PopClass) -> Self {
        let mut mass = [0.0; 2];
        mass[class.bin()] = 1.0;
        Self { mass }
    }

    pub fn mass(&self) -> [f64; 2] {
        self.mass
    }

    pub fn is_empty(&self) -> bool {
        self.mass == [0.0, 0.0]
    }

    /// `(1 - alpha) * x + alpha * uniform`.
    pub fn smoothed(&self, alpha: f64) -> Self {
        let u = 1.0 / self.mass.len() as f64;
        Self { mass: self.mass.map(|m| (1.0 - alpha) * m + alpha * u) }
    }
}

/// `F(p, q)` for the chosen divergence. KL and chi-squared need `q` strictly
/// positive wherever that matters; Hellinger is bounded in `[0, 1]`.
pub fn divergence(p: &BinDistribution, q: &BinDistribution, kind: DivergenceKind) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(MetricsError::EmptyDistribution);
    }
    let (p, q) = (p.mass, q.mass);
    let value = match kind {
        DivergenceKind::Kl => {
            if q.iter().any(|&x| x <= 0.0) {
                return Err(MetricsError::ZeroComponent(kind));
            }
            p.iter().zip(&q).filter(|(&pi, _)| pi > 0.0).map(|(&pi, &qi)| pi * (pi / qi).ln()).sum::<f64>()
        }
        DivergenceKind::Hellinger => {
            let s: f64 = p.iter().zip(&q).map(|(&pi, &qi)| (pi.sqrt() - qi.sqrt()).powi(2)).sum();
            s.sqrt() / std::f64::consts::SQRT_2
        }
        DivergenceKind::ChiSq => {
            if q.iter().any(|&x| x <= 0.0) {
                return Err(MetricsError::ZeroComponent(kind));
            }
            p.iter().zip(&q).map(|(&pi, &qi)| (pi - qi).powi(2) / qi).sum()
        }
    };
    Ok(value.max(0.0))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(MetricsError::InvalidSmoothing(alpha))
    }
}

/// Popularity distribution of the matched items in `slots`.
pub fn list_distribution(slots: &[Slot], partition: &PopularityPartition) -> BinDistribution {
    let (mut pop, mut niche) = (0, 0);
    for item in slots.iter().filter_map(Slot::item) {
        match partition.class_of(item) {
            Some(PopClass::Popular) => pop += 1,
            Some(PopClass::Niche) => niche += 1,
            None => {}
        }
    }
    BinDistribution::from_counts(pop, niche)
}

/// Normalized miscalibration of one list prefix against target `p`.
///
/// Both distributions are smoothed toward uniform by `alpha`. The result is
/// `F(p~, q~) / max_b F(p~, point_b~)`, clamped to `[0, 1]`; a prefix with no
/// matched items scores 1.
pub fn miscalibration(
    p: &BinDistribution,
    prefix: &[Slot],
    partition: &PopularityPartition,
    kind: DivergenceKind,
    alpha: f64,
) -> Result<f64> {
    check_alpha(alpha)?;
    let q = list_distribution(prefix, partition);
    if q.is_empty() {
        return Ok(1.0);
    }
    let ps = p.smoothed(alpha);
    let num = divergence(&ps, &q.smoothed(alpha), kind)?;
    let mut worst = 0.0f64;
    for class in [PopClass::Popular, PopClass::Niche] {
        worst = worst.max(divergence(&ps, &BinDistribution::point(class).smoothed(alpha), kind)?);
    }
    if worst <= 0.0 {
        return Ok(if num <= 0.0 { 0.0 } else { 1.0 });
    }
    Ok((num / worst).clamp(0.0, 1.0))
}

/// Mean miscalibration over prefixes `1..=depth`; prefixes longer than the
/// list reuse the whole list.
pub fn rmc(
    p: &BinDistribution,
    slots: &[Slot],
    partition: &PopularityPartition,
    kind: DivergenceKind,
    depth: usize,
    alpha: f64,
) -> Result<f64> {
    if depth == 0 {
        return Err(MetricsError::InvalidCutoff);
    }
    let mut total = 0.0;
    for k in 1..=depth {
        total += miscalibration(p, &slots[..k.min(slots.len())], partition, kind, alpha)?;
    }
    Ok(total / depth as f64)
}

/// Mean RMC over the users that have lists, in list order.
pub fn mrmc(
    lists: &[MatchedList],
    targets: &BTreeMap<UserId, BinDistribution>,
    partition: &PopularityPartition,
    kind: DivergenceKind,
    depth: usize,
    alpha: f64,
) -> Result<f64> {
    if lists.is_empty() {
        return Err(MetricsError::NoUsers);
    }
    let mut total = 0.0;
    for list in lists {
        let p = targets.get(&list.user).ok_or(MetricsError::MissingTarget(list.user))?;
        total += rmc(p, &list.slots, partition, kind, depth, alpha)?;
    }
    Ok(total / lists.len() as f64)
}

/// Long-tail coverage: `|union of matched items ∩ niche| / |niche|`.
pub fn ltc(lists: &[MatchedList], partition: &PopularityPartition, test_users: &BTreeSet<UserId>) -> Result<f64> {
    let niche = partition.niche();
    if niche.is_empty() {
        return Err(MetricsError::EmptyNiche);
    }
    let mut covered = BTreeSet::new();
    for list in lists {
        if !test_users.contains(&list.user) {
            return Err(MetricsError::UnknownUser(list.user));
        }
        covered.extend(list.matched_items().filter(|i| niche.contains(i)));
    }
    Ok(covered.len() as f64 / niche.len() as f64)
}

/// Per-user relevant items from the test split.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelevanceSet {
    per_user: BTreeMap<UserId, BTreeSet<ItemId>>,
    rating_floor: Option<f64>,
}

impl RelevanceSet {
    /// Every test interaction is relevant, or only those rated at least
    /// `rating_floor` when one is given.
    pub fn from_test(test: &InteractionSet, rating_floor: Option<f64>) -> Self {
        let mut per_user: BTreeMap<UserId, BTreeSet<ItemId>> = BTreeMap::new();
        for it in test.interactions() {
            if rating_floor.is_none_or(|floor| it.rating >= floor) {
                per_user.entry(it.user).or_default().insert(it.item);
            }
        }
        Self { per_user, rating_floor }
    }

    pub fn from_map(per_user: BTreeMap<UserId, BTreeSet<ItemId>>) -> Self {
        Self { per_user, rating_floor: None }
    }

    pub fn get(&self, user: UserId) -> Option<&BTreeSet<ItemId>> {
        self.per_user.get(&user).filter(|s| !s.is_empty())
    }

    pub fn rating_floor(&self) -> Option<f64> {
        self.rating_floor
    }
}

/// A user-averaged accuracy value plus how many users were averaged and how
/// many were skipped for having no relevant items.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averaged {
    pub value: f64,
    pub evaluated: usize,
    pub excluded: usize,
}

fn reciprocal_rank(slots: &[Slot], relevant: &BTreeSet<ItemId>, k: usize) -> f64 {
    slots
        .iter()
        .take(k)
        .position(|s| s.item().is_some_and(|i| relevant.contains(&i)))
        .map_or(0.0, |pos| 1.0 / (pos + 1) as f64)
}

pub fn mrr_at_k(lists: &[MatchedList], relevance: &RelevanceSet, k: usize) -> Result<Averaged> {
    if k == 0 {
        return Err(MetricsError::InvalidCutoff);
    }
    let (mut total, mut evaluated, mut excluded) = (0.0, 0, 0);
    for list in lists {
        match relevance.get(list.user) {
            Some(rel) => {
                total += reciprocal_rank(&list.slots, rel, k);
                evaluated += 1;
            }
            None => excluded += 1,
        }
    }
    let value = if evaluated == 0 { 0.0 } else { total / evaluated as f64 };
    Ok(Averaged { value, evaluated, excluded })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub evaluated: usize,
    pub excluded: usize,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Per-user precision/recall/F1 at `k`, averaged over users with at least
/// one relevant item.
pub fn f1_at_k(lists: &[MatchedList], relevance: &RelevanceSet, k: usize) -> Result<PrecisionRecall> {
    if k == 0 {
        return Err(MetricsError::InvalidCutoff);
    }
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    let (mut evaluated, mut excluded) = (0, 0);
    for list in lists {
        let Some(rel) = relevance.get(list.user) else {
            excluded += 1;
            continue;
        };
        let hits = list.slots.iter().take(k).filter(|s| s.item().is_some_and(|i| rel.contains(&i))).count();
        let precision = hits as f64 / k as f64;
        let recall = hits as f64 / rel.len() as f64;
        p_sum += precision;
        r_sum += recall;
        f_sum += f1_score(precision, recall);
        evaluated += 1;
    }
    let mean = |s: f64| if evaluated == 0 { 0.0 } else { s / evaluated as f64 };
    Ok(PrecisionRecall { precision: mean(p_sum), recall: mean(r_sum), f1: mean(f_sum), evaluated, excluded })
}

/// Which popularity distribution each user's list is calibrated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    /// The user's own training popular/niche shares.
    #[default]
    User,
    /// The global training share of interactions on popular vs niche items.
    Global,
}

impl FromStr for TargetMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "user" => Ok(TargetMode::User),
            "global" => Ok(TargetMode::Global),
            _ => Err(format!("unknown target mode `{s}` (expected user or global)")),
        }
    }
}

pub fn user_targets(segments: &UserSegments) -> BTreeMap<UserId, BinDistribution> {
    segments.ratios().iter().map(|(&u, &r)| (u, BinDistribution { mass: [r, 1.0 - r] })).collect()
}

pub fn global_target(train: &InteractionSet, partition: &PopularityPartition) -> BinDistribution {
    let pop = train.interactions().iter().filter(|i| partition.popular().contains(&i.item)).count();
    BinDistribution::from_counts(pop, train.len() - pop)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    /// Cutoff for MRR and precision/recall/F1.
    pub k: usize,
    /// Prefix depth N for RMC.
    pub depth: usize,
    pub divergence: DivergenceKind,
    pub alpha: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { k: 10, depth: 10, divergence: DivergenceKind::Kl, alpha: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub users: usize,
    pub ltc: f64,
    pub mrmc: f64,
    pub mrr_at_k: f64,
    pub precision_at_k: f64,
    pub recall_at_k: f64,
    pub f1_at_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ltc: f64,
    pub mrmc: f64,
    pub mrr_at_k: f64,
    pub precision_at_k: f64,
    pub recall_at_k: f64,
    pub f1_at_k: f64,
    /// Share of emitted slots that resolved to no catalog item.
    pub out_of_catalog_rate: f64,
    /// Share of emitted slots that repeated an earlier item.
    pub duplicate_rate: f64,
    /// Lists with no extractable titles.
    pub empty_lists: usize,
    pub users: usize,
    /// Users left out of MRR/F1 because they have no relevant test items.
    pub excluded_users: usize,
    pub k: usize,
    pub depth: usize,
    pub divergence: DivergenceKind,
    pub alpha: f64,
    pub groups: BTreeMap<UserGroup, GroupMetrics>,
}

fn slot_rates(lists: &[MatchedList]) -> (f64, f64) {
    let (mut total, mut ooc, mut dup) = (0usize, 0usize, 0usize);
    for s in lists.iter().flat_map(|l| &l.slots) {
        total += 1;
        match s {
            Slot::Unmatched { duplicate_of: None, .. } => ooc += 1,
            Slot::Unmatched { duplicate_of: Some(_), .. } => dup += 1,
            Slot::Matched { .. } => {}
        }
    }
    if total == 0 {
        (0.0, 0.0)
    } else {
        (ooc as f64 / total as f64, dup as f64 / total as f64)
    }
}

/// Compute the full metric suite for one experiment cell. When `segments`
/// is given, the same metrics are also broken down by P/N group.
pub fn evaluate(
    lists: &[MatchedList],
    partition: &PopularityPartition,
    targets: &BTreeMap<UserId, BinDistribution>,
    relevance: &RelevanceSet,
    test_users: &BTreeSet<UserId>,
    segments: Option<&UserSegments>,
    config: &MetricsConfig,
) -> Result<MetricsReport> {
    check_alpha(config.alpha)?;
    let core = |subset: &[MatchedList]| -> Result<(f64, f64, Averaged, PrecisionRecall)> {
        let cov = ltc(subset, partition, test_users)?;
        let m = if subset.is_empty() {
            0.0
        } else {
            mrmc(subset, targets, partition, config.divergence, config.depth, config.alpha)?
        };
        Ok((cov, m, mrr_at_k(subset, relevance, config.k)?, f1_at_k(subset, relevance, config.k)?))
    };
    if lists.is_empty() {
        return Err(MetricsError::NoUsers);
    }
    let (cov, m, mrr, pr) = core(lists)?;

    let mut groups = BTreeMap::new();
    if let Some(seg) = segments {
        for group in [UserGroup::P, UserGroup::N] {
            let subset: Vec<MatchedList> = lists.iter().filter(|l| seg.group(l.user) == Some(group)).cloned().collect();
            let (gc, gm, gr, gp) = core(&subset)?;
            groups.insert(
                group,
                GroupMetrics {
                    users: subset.len(),
                    ltc: gc,
                    mrmc: gm,
                    mrr_at_k: gr.value,
                    precision_at_k: gp.precision,
                    recall_at_k: gp.recall,
                    f1_at_k: gp.f1,
                },
            );
        }
    }

    let (ooc, dup) = slot_rates(lists);
    Ok(MetricsReport {
        ltc: cov,
        mrmc: m,
        mrr_at_k: mrr.value,
        precision_at_k: pr.precision,
        recall_at_k: pr.recall,
        f1_at_k: pr.f1,
        out_of_catalog_rate: ooc,
        duplicate_rate: dup,
        empty_lists: lists.iter().filter(|l| l.slots.is_empty()).count(),
        users: lists.len(),
        excluded_users: mrr.excluded,
        k: config.k,
        depth: config.depth,
        divergence: config.divergence,
        alpha: config.alpha,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::MatchKind;
    use crate::promptgen::StrategyKind;
    use proptest::prelude::*;

    fn partition() -> PopularityPartition {
        // popular: 1, 2; niche: 10..=13
        PopularityPartition::from_sets(
            [1, 2].into_iter().map(ItemId).collect(),
            [10, 11, 12, 13].into_iter().map(ItemId).collect(),
        )
    }

    fn hit(item: u64) -> Slot {
        Slot::Matched { raw: String::new(), item: ItemId(item), kind: MatchKind::Exact, score: 1.0 }
    }

    fn miss() -> Slot {
        Slot::Unmatched { raw: "??".into(), duplicate_of: None }
    }

    fn list(user: u64, slots: Vec<Slot>) -> MatchedList {
        MatchedList { user: UserId(user), strategy: StrategyKind::Vanilla, slots }
    }

    fn users(ids: &[u64]) -> BTreeSet<UserId> {
        ids.iter().copied().map(UserId).collect()
    }

    fn dist(p: f64) -> BinDistribution {
        BinDistribution::new(p, 1.0 - p).unwrap()
    }

    #[test]
    fn ltc_examples() {
        let p = partition();
        let all = users(&[1, 2, 3]);
        let full = vec![list(1, vec![hit(10), hit(11)]), list(2, vec![hit(12), hit(13), hit(1)])];
        assert_eq!(ltc(&full, &p, &all).unwrap(), 1.0);
        let head = vec![list(1, vec![hit(1), hit(2)])];
        assert_eq!(ltc(&head, &p, &all).unwrap(), 0.0);
        let partial = vec![list(1, vec![hit(10)]), list(2, vec![hit(10), hit(11)]), list(3, vec![])];
        assert_eq!(ltc(&partial, &p, &all).unwrap(), 0.5);
    }

    #[test]
    fn ltc_errors() {
        let p = partition();
        assert_eq!(ltc(&[list(9, vec![])], &p, &users(&[1])), Err(MetricsError::UnknownUser(UserId(9))));
        let no_niche = PopularityPartition::from_sets([ItemId(1)].into_iter().collect(), BTreeSet::new());
        assert_eq!(ltc(&[], &no_niche, &users(&[1])), Err(MetricsError::EmptyNiche));
    }

    #[test]
    fn divergence_identity_and_kl_value() {
        let p = dist(0.3);
        for kind in DivergenceKind::ALL {
            assert_eq!(divergence(&p, &p, kind).unwrap(), 0.0);
        }
        let expected = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        let got = divergence(&dist(0.9), &dist(0.5), DivergenceKind::Kl).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.368064).abs() < 1e-6);
    }

    #[test]
    fn divergence_requires_positive_q() {
        assert_eq!(
            divergence(&dist(0.5), &dist(1.0), DivergenceKind::Kl),
            Err(MetricsError::ZeroComponent(DivergenceKind::Kl))
        );
        assert_eq!(
            divergence(&dist(0.5), &dist(1.0), DivergenceKind::ChiSq),
            Err(MetricsError::ZeroComponent(DivergenceKind::ChiSq))
        );
        // Hellinger tolerates zeros: maximal distance between disjoint points
        assert!((divergence(&dist(0.0), &dist(1.0), DivergenceKind::Hellinger).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mc_examples() {
        let part = partition();
        // q = (0.5, 0.5) exactly
        assert_eq!(miscalibration(&dist(0.5), &[hit(1), hit(10)], &part, DivergenceKind::Kl, 0.01).unwrap(), 0.0);
        assert_eq!(miscalibration(&dist(0.5), &[], &part, DivergenceKind::Kl, 0.01).unwrap(), 1.0);
        assert_eq!(miscalibration(&dist(0.5), &[miss(), miss()], &part, DivergenceKind::Hellinger, 0.01).unwrap(), 1.0);

        // all-popular prefix: numerator and denominator coincide
        let mc = miscalibration(&dist(0.5), &[hit(1), hit(2)], &part, DivergenceKind::Kl, 0.01).unwrap();
        let both = 0.5 * (0.5f64 / 0.995).ln() + 0.5 * (0.5f64 / 0.005).ln();
        let num = divergence(&dist(0.5), &BinDistribution::new(0.995, 0.005).unwrap(), DivergenceKind::Kl).unwrap();
        assert!((num - both).abs() < 1e-12);
        assert!((mc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mc_ignores_unmatched_slots_for_mass() {
        let part = partition();
        let a = miscalibration(&dist(0.7), &[hit(1), miss(), hit(10)], &part, DivergenceKind::ChiSq, 0.01).unwrap();
        let b = miscalibration(&dist(0.7), &[hit(1), hit(10)], &part, DivergenceKind::ChiSq, 0.01).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rmc_and_mrmc_means() {
        let part = partition();
        let p = dist(0.5);
        // prefixes [1] -> worst, [1,10] -> perfect; depth 4 reuses the full list
        let slots = vec![hit(1), hit(10)];
        let first = miscalibration(&p, &slots[..1], &part, DivergenceKind::Kl, 0.01).unwrap();
        assert!((first - 1.0).abs() < 1e-12);
        let r = rmc(&p, &slots, &part, DivergenceKind::Kl, 2, 0.01).unwrap();
        assert!((r - 0.5).abs() < 1e-12);
        let r4 = rmc(&p, &slots, &part, DivergenceKind::Kl, 4, 0.01).unwrap();
        assert!((r4 - 0.25).abs() < 1e-12);
        assert_eq!(rmc(&p, &[], &part, DivergenceKind::Kl, 3, 0.01).unwrap(), 1.0);

        let targets: BTreeMap<UserId, BinDistribution> = [(UserId(1), p), (UserId(2), p)].into_iter().collect();
        let lists = vec![list(1, vec![hit(1), hit(10)]), list(2, vec![])];
        let head_only = rmc(&p, &[hit(1), hit(10)], &part, DivergenceKind::Kl, 1, 0.01).unwrap();
        assert!((head_only - 1.0).abs() < 1e-12);
        let single = mrmc(&lists[..1], &targets, &part, DivergenceKind::Kl, 2, 0.01).unwrap();
        assert!((single - 0.5).abs() < 1e-12);
        let m = mrmc(&lists, &targets, &part, DivergenceKind::Kl, 2, 0.01).unwrap();
        assert!((m - 0.75).abs() < 1e-12);
        assert_eq!(mrmc(&[], &targets, &part, DivergenceKind::Kl, 2, 0.01), Err(MetricsError::NoUsers));
        assert_eq!(
            mrmc(&[list(5, vec![])], &targets, &part, DivergenceKind::Kl, 2, 0.01),
            Err(MetricsError::MissingTarget(UserId(5)))
        );
    }

    fn relevance(rows: &[(u64, &[u64])]) -> RelevanceSet {
        RelevanceSet::from_map(
            rows.iter().map(|(u, items)| (UserId(*u), items.iter().copied().map(ItemId).collect())).collect(),
        )
    }

    #[test]
    fn mrr_examples() {
        let rel = relevance(&[(1, &[10]), (2, &[13])]);
        let lists =
            vec![list(1, vec![hit(1), hit(10), hit(11)]), list(2, vec![hit(1), miss(), hit(2), hit(11), hit(13)])];
        let m = mrr_at_k(&lists, &rel, 10).unwrap();
        assert!((m.value - 0.35).abs() < 1e-12);
        assert_eq!(m.evaluated, 2);
        // rank 5 falls outside k = 4
        assert!((mrr_at_k(&lists, &rel, 4).unwrap().value - 0.25).abs() < 1e-12);

        let first = vec![list(1, vec![hit(10)]), list(2, vec![hit(13)])];
        assert_eq!(mrr_at_k(&first, &rel, 10).unwrap().value, 1.0);
        let none = vec![list(1, vec![hit(1)]), list(2, vec![miss()])];
        assert_eq!(mrr_at_k(&none, &rel, 10).unwrap().value, 0.0);
        assert_eq!(mrr_at_k(&none, &rel, 0), Err(MetricsError::InvalidCutoff));
    }

    #[test]
    fn f1_examples() {
        // 4 hits in top 10, 8 relevant
        let rel = relevance(&[(1, &[10, 11, 12, 13, 20, 21, 22, 23])]);
        let mut slots = vec![hit(10), hit(11), hit(12), hit(13)];
        slots.extend([hit(1), hit(2), miss(), miss(), miss(), miss()]);
        let pr = f1_at_k(&[list(1, slots)], &rel, 10).unwrap();
        assert!((pr.precision - 0.4).abs() < 1e-12);
        assert!((pr.recall - 0.5).abs() < 1e-12);
        assert!((pr.f1 - 2.0 * 0.4 * 0.5 / 0.9).abs() < 1e-12);

        let rel = relevance(&[(1, &[10, 11])]);
        let pr = f1_at_k(&[list(1, vec![hit(10), hit(11)])], &rel, 2).unwrap();
        assert_eq!((pr.precision, pr.recall, pr.f1), (1.0, 1.0, 1.0));
        let pr = f1_at_k(&[list(1, vec![hit(1), miss()])], &rel, 2).unwrap();
        assert_eq!((pr.precision, pr.recall, pr.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn users_without_relevance_are_excluded() {
        let rel = relevance(&[(1, &[10]), (2, &[])]);
        let lists = vec![list(1, vec![hit(10)]), list(2, vec![hit(10)]), list(3, vec![hit(10)])];
        let pr = f1_at_k(&lists, &rel, 1).unwrap();
        assert_eq!((pr.evaluated, pr.excluded), (1, 2));
        assert_eq!(pr.precision, 1.0);
        let m = mrr_at_k(&lists, &rel, 1).unwrap();
        assert_eq!((m.value, m.excluded), (1.0, 2));
    }

    #[test]
    fn relevance_from_test_with_floor() {
        use crate::ingest::Interaction;
        let test = InteractionSet::new(vec![
            Interaction { user: UserId(1), item: ItemId(5), rating: 2.0, timestamp: Some(1) },
            Interaction { user: UserId(1), item: ItemId(6), rating: 4.5, timestamp: Some(2) },
        ]);
        assert_eq!(RelevanceSet::from_test(&test, None).get(UserId(1)).unwrap().len(), 2);
        let floored = RelevanceSet::from_test(&test, Some(4.0));
        assert_eq!(floored.get(UserId(1)).unwrap(), &[ItemId(6)].into_iter().collect());
    }

    #[test]
    fn evaluate_reports_rates_and_groups() {
        use crate::ingest::Interaction;
        let part = partition();
        let train = InteractionSet::new(vec![
            Interaction { user: UserId(1), item: ItemId(1), rating: 4.0, timestamp: Some(1) },
            Interaction { user: UserId(2), item: ItemId(10), rating: 4.0, timestamp: Some(1) },
        ]);
        let seg = crate::popularity::classify_users(&train, &part, 0.5).unwrap();
        let targets = user_targets(&seg);
        let rel = relevance(&[(1, &[2]), (2, &[11])]);
        let lists = vec![
            list(1, vec![hit(2), miss()]),
            list(2, vec![hit(11), Slot::Unmatched { raw: "x".into(), duplicate_of: Some(ItemId(11)) }]),
        ];
        let cfg = MetricsConfig { k: 2, depth: 2, ..Default::default() };
        let rep = evaluate(&lists, &part, &targets, &rel, &users(&[1, 2]), Some(&seg), &cfg).unwrap();
        assert_eq!(rep.out_of_catalog_rate, 0.25);
        assert_eq!(rep.duplicate_rate, 0.25);
        assert_eq!(rep.mrr_at_k, 1.0);
        assert_eq!(rep.ltc, 0.25);
        assert_eq!(rep.groups[&UserGroup::P].users, 1);
        assert_eq!(rep.groups[&UserGroup::N].ltc, 0.25);
        assert_eq!(rep.groups[&UserGroup::P].ltc, 0.0);
        // each user's list matches its own target exactly
        assert!(rep.mrmc.abs() < 1e-12);
    }

    #[test]
    fn global_target_shares() {
        use crate::ingest::Interaction;
        let rows = [1, 1, 10, 11].iter().map(|&i| Interaction {
            user: UserId(1),
            item: ItemId(i),
            rating: 4.0,
            timestamp: None,
        });
        let t = global_target(&InteractionSet::new(rows.collect()), &partition());
        assert_eq!(t.mass(), [0.5, 0.5]);
    }

    fn arb_dist() -> impl Strategy<Value = BinDistribution> {
        (0.0f64..=1.0).prop_map(|p| BinDistribution { mass: [p, 1.0 - p] })
    }

    proptest! {
        #[test]
        fn hellinger_symmetric(p in arb_dist(), q in arb_dist()) {
            let a = divergence(&p, &q, DivergenceKind::Hellinger).unwrap();
            let b = divergence(&q, &p, DivergenceKind::Hellinger).unwrap();
            prop_assert!((a - b).abs() < 1e-15);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
        }

        #[test]
        fn ltc_order_invariant(mut items in prop::collection::vec(prop::sample::select(vec![1u64, 2, 10, 11, 12, 13]), 0..8), extra in 10u64..14) {
            let part = partition();
            let all = users(&[1]);
            let base = ltc(&[list(1, items.iter().map(|&i| hit(i)).collect())], &part, &all).unwrap();
            items.reverse();
            let rev = ltc(&[list(1, items.iter().map(|&i| hit(i)).collect())], &part, &all).unwrap();
            prop_assert_eq!(base, rev);
            items.push(extra);
            let more = ltc(&[list(1, items.iter().map(|&i| hit(i)).collect())], &part, &all).unwrap();
            prop_assert!(more >= base);
        }

        #[test]
        fn mrr_ignores_tail_after_first_hit(prefix in prop::collection::vec(prop::sample::select(vec![1u64, 2, 11]), 0..4), tail_a in prop::collection::vec(1u64..14, 0..5), tail_b in prop::collection::vec(1u64..14, 0..5)) {
            let rel = relevance(&[(1, &[10])]);
            let build = |tail: &[u64]| {
                let mut s: Vec<Slot> = prefix.iter().map(|&i| hit(i)).collect();
                s.push(hit(10));
                s.extend(tail.iter().map(|&i| hit(i)));
                vec![list(1, s)]
            };
            let a = mrr_at_k(&build(&tail_a), &rel, 10).unwrap().value;
            let b = mrr_at_k(&build(&tail_b), &rel, 10).unwrap().value;
            prop_assert_eq!(a, b);
        }
    }
}
