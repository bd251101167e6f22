//! Brute-force reference implementations of the evaluation metrics, written
//! directly from their definitions over plain vectors, plus random instance
//! generation shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use fairrec_core::matcher::{MatchKind, MatchedList, Slot};
use fairrec_core::metrics::{BinDistribution, DivergenceKind};
use fairrec_core::popularity::PopularityPartition;
use fairrec_core::promptgen::StrategyKind;
use fairrec_core::{ItemId, UserId};
use rand::Rng;

/// One list as the oracle sees it: `None` is an unmatched slot.
pub type OracleList = Vec<Option<u64>>;

pub struct Instance {
    pub popular: BTreeSet<u64>,
    pub niche: BTreeSet<u64>,
    /// (user, target [popular, niche], list, relevant items)
    pub users: Vec<(u64, [f64; 2], OracleList, BTreeSet<u64>)>,
    pub depth: usize,
    pub alpha: f64,
}

pub fn random_instance<R: Rng>(rng: &mut R) -> Instance {
    let n_items: u64 = rng.random_range(2..=20);
    let n_popular = rng.random_range(1..n_items);
    let mut ids: Vec<u64> = (1..=n_items).collect();
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    let popular: BTreeSet<u64> = ids[..n_popular as usize].iter().copied().collect();
    let niche: BTreeSet<u64> = ids[n_popular as usize..].iter().copied().collect();

    let n_users = rng.random_range(1..=10);
    let mut users = Vec::new();
    for u in 0..n_users {
        let share = match rng.random_range(0..4) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random::<f64>(),
        };
        let len = rng.random_range(0..=5);
        let mut used = BTreeSet::new();
        let mut list = Vec::new();
        for _ in 0..len {
            if rng.random_bool(0.25) {
                list.push(None);
            } else {
                let item = rng.random_range(1..=n_items);
                // the matcher never matches one item twice within a list
                list.push(used.insert(item).then_some(item));
            }
        }
        let relevant: BTreeSet<u64> = (1..=n_items).filter(|_| rng.random_bool(0.2)).collect();
        users.push((u + 1, [share, 1.0 - share], list, relevant));
    }
    Instance { popular, niche, users, depth: rng.random_range(1..=7), alpha: rng.random_range(0.001..0.2) }
}

pub fn to_partition(inst: &Instance) -> PopularityPartition {
    PopularityPartition::from_sets(
        inst.popular.iter().map(|&i| ItemId(i)).collect(),
        inst.niche.iter().map(|&i| ItemId(i)).collect(),
    )
}

pub fn to_matched(user: u64, list: &OracleList) -> MatchedList {
    let slots = list
        .iter()
        .enumerate()
        .map(|(pos, s)| match s {
            Some(i) => Slot::Matched { raw: format!("t{i}"), item: ItemId(*i), kind: MatchKind::Exact, score: 1.0 },
            None => Slot::Unmatched { raw: format!("x{pos}"), duplicate_of: None },
        })
        .collect();
    MatchedList { user: UserId(user), strategy: StrategyKind::Vanilla, slots }
}

pub fn to_target(t: [f64; 2]) -> BinDistribution {
    BinDistribution::new(t[0], t[1]).expect("proper target")
}

pub fn oracle_divergence(p: [f64; 2], q: [f64; 2], kind: DivergenceKind) -> f64 {
    match kind {
        DivergenceKind::Kl => (0..2).filter(|&i| p[i] > 0.0).map(|i| p[i] * (p[i] / q[i]).ln()).sum(),
        DivergenceKind::Hellinger => {
            let s: f64 = (0..2).map(|i| (p[i].sqrt() - q[i].sqrt()).powi(2)).sum();
            s.sqrt() / 2f64.sqrt()
        }
        DivergenceKind::ChiSq => (0..2).map(|i| (p[i] - q[i]).powi(2) / q[i]).sum(),
    }
}

fn smooth(x: [f64; 2], alpha: f64) -> [f64; 2] {
    [(1.0 - alpha) * x[0] + alpha / 2.0, (1.0 - alpha) * x[1] + alpha / 2.0]
}

pub fn oracle_mc(
    target: [f64; 2],
    prefix: &[Option<u64>],
    popular: &BTreeSet<u64>,
    kind: DivergenceKind,
    alpha: f64,
) -> f64 {
    let matched: Vec<u64> = prefix.iter().flatten().copied().collect();
    if matched.is_empty() {
        return 1.0;
    }
    let pop = matched.iter().filter(|i| popular.contains(i)).count() as f64;
    let q = [pop / matched.len() as f64, 1.0 - pop / matched.len() as f64];
    let p = smooth(target, alpha);
    let num = oracle_divergence(p, smooth(q, alpha), kind);
    let worst_pop = oracle_divergence(p, smooth([1.0, 0.0], alpha), kind);
    let worst_niche = oracle_divergence(p, smooth([0.0, 1.0], alpha), kind);
    (num / worst_pop.max(worst_niche)).clamp(0.0, 1.0)
}

pub fn oracle_rmc(
    target: [f64; 2],
    list: &OracleList,
    popular: &BTreeSet<u64>,
    kind: DivergenceKind,
    depth: usize,
    alpha: f64,
) -> f64 {
    let mut values = Vec::new();
    for k in 1..=depth {
        let end = if k > list.len() { list.len() } else { k };
        values.push(oracle_mc(target, &list[..end], popular, kind, alpha));
    }
    values.iter().sum::<f64>() / depth as f64
}

pub fn oracle_mrmc(inst: &Instance, kind: DivergenceKind) -> f64 {
    let rmcs: Vec<f64> =
        inst.users.iter().map(|(_, t, l, _)| oracle_rmc(*t, l, &inst.popular, kind, inst.depth, inst.alpha)).collect();
    rmcs.iter().sum::<f64>() / rmcs.len() as f64
}

pub fn oracle_ltc(inst: &Instance) -> f64 {
    let covered = inst.niche.iter().filter(|n| inst.users.iter().any(|(_, _, l, _)| l.contains(&Some(**n)))).count();
    covered as f64 / inst.niche.len() as f64
}

pub fn oracle_mrr(inst: &Instance, k: usize) -> f64 {
    let mut rr = Vec::new();
    for (_, _, list, rel) in &inst.users {
        if rel.is_empty() {
            continue;
        }
        let mut value = 0.0;
        for (i, slot) in list.iter().enumerate() {
            if i >= k {
                break;
            }
            if let Some(item) = slot {
                if rel.contains(item) {
                    value = 1.0 / (i as f64 + 1.0);
                    break;
                }
            }
        }
        rr.push(value);
    }
    if rr.is_empty() {
        0.0
    } else {
        rr.iter().sum::<f64>() / rr.len() as f64
    }
}

/// (precision, recall, f1) means over users with relevant items.
pub fn oracle_f1(inst: &Instance, k: usize) -> (f64, f64, f64) {
    let mut rows = Vec::new();
    for (_, _, list, rel) in &inst.users {
        if rel.is_empty() {
            continue;
        }
        let top: BTreeSet<u64> = list.iter().take(k).flatten().copied().collect();
        let hits = top.intersection(rel).count() as f64;
        let p = hits / k as f64;
        let r = hits / rel.len() as f64;
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        rows.push((p, r, f));
    }
    if rows.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = rows.len() as f64;
    (
        rows.iter().map(|r| r.0).sum::<f64>() / n,
        rows.iter().map(|r| r.1).sum::<f64>() / n,
        rows.iter().map(|r| r.2).sum::<f64>() / n,
    )
}

pub fn relevance_map(inst: &Instance) -> BTreeMap<UserId, BTreeSet<ItemId>> {
    inst.users.iter().map(|(u, _, _, rel)| (UserId(*u), rel.iter().map(|&i| ItemId(i)).collect())).collect()
}

/// Prints and returns one acceptance verdict line.
pub fn verdict(id: u32, name: &str, ok: bool, detail: &str) -> bool {
    println!("[criterion {id}] {} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}
