//! Result tables (one row per strategy cell) and per-item exposure data.
//!
//! Every emitted file carries the hash of the run manifest so outputs can be
//! traced back to the exact configuration and inputs that produced them.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ids::ItemId;
use crate::ingest::DatasetSummary;
use crate::matcher::MatchedList;
use crate::metrics::MetricsReport;
use crate::popularity::{PopClass, PopularityPartition};
use crate::promptgen::{threshold_label, PromptStrategy, StrategyKind};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("unknown table format `{0}` (expected csv, json or md)")]
    UnknownFormat(String),
    #[error("no experiment cells to report")]
    NoCells,
    #[error("malformed table: {0}")]
    Malformed(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ReportError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileChecksum {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Everything needed to reproduce a run. Contains no wall-clock time, so
/// identical inputs yield an identical manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub datasets: Vec<FileChecksum>,
    /// Earliest and latest interaction timestamps in the ingested data.
    pub data_time_range: Option<(i64, i64)>,
    /// True when the data had no timestamps and file order stood in for time.
    pub pseudo_temporal_order: bool,
    pub raw_summary: DatasetSummary,
    pub filtered_summary: DatasetSummary,
    pub provider: String,
    /// Model identifiers echoed back by a live provider, if any.
    pub returned_models: Vec<String>,
}

impl RunManifest {
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("manifest serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentCell {
    pub strategy: PromptStrategy,
    pub provider: String,
    pub report: MetricsReport,
    pub manifest_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Json,
    Markdown,
}

impl TableFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TableFormat::Csv => "csv",
            TableFormat::Json => "json",
            TableFormat::Markdown => "md",
        }
    }
}

impl FromStr for TableFormat {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(TableFormat::Csv),
            "json" => Ok(TableFormat::Json),
            "md" | "markdown" => Ok(TableFormat::Markdown),
            _ => Err(ReportError::UnknownFormat(s.to_string())),
        }
    }
}

/// Three decimals, ties to even on the exact binary value.
pub fn render3(x: f64) -> String {
    format!("{x:.3}")
}

/// One parsed table row. Numeric fields hold the rendered (3-decimal) values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub strategy: String,
    pub threshold: String,
    pub provider: String,
    pub ltc: f64,
    pub mrmc: f64,
    pub mrr_at_k: f64,
    pub f1_at_k: f64,
    pub out_of_catalog_rate: f64,
}

fn row_of(cell: &ExperimentCell) -> (Vec<String>, [String; 5]) {
    let threshold = match cell.strategy.threshold {
        Some(t) if cell.strategy.kind.per_threshold() => threshold_label(t),
        _ => String::new(),
    };
    let r = &cell.report;
    (
        vec![cell.strategy.kind.display_name().to_string(), threshold, cell.provider.clone()],
        [r.ltc, r.mrmc, r.mrr_at_k, r.f1_at_k, r.out_of_catalog_rate].map(render3),
    )
}

#[derive(Serialize)]
struct JsonTable<'a> {
    manifest_hash: &'a str,
    k: usize,
    divergence: &'a str,
    rows: Vec<TableRow>,
}

/// Render cells as a results table, in input order.
pub fn emit_table(cells: &[ExperimentCell], format: TableFormat) -> Result<Vec<u8>> {
    let first = cells.first().ok_or(ReportError::NoCells)?;
    let k = first.report.k;
    let manifest = &first.manifest_hash;
    match format {
        TableFormat::Csv => {
            let mut out = format!("# manifest: {manifest}\n").into_bytes();
            {
                let mut w = csv::Writer::from_writer(&mut out);
                w.write_record([
                    "strategy".to_string(),
                    "threshold".into(),
                    "provider".into(),
                    "ltc".into(),
                    "mrmc".into(),
                    format!("mrr@{k}"),
                    format!("f1@{k}"),
                    "out_of_catalog_rate".into(),
                ])?;
                for cell in cells {
                    let (labels, values) = row_of(cell);
                    w.write_record(labels.iter().map(String::as_str).chain(values.iter().map(String::as_str)))?;
                }
                w.flush().map_err(csv::Error::from)?;
            }
            Ok(out)
        }
        TableFormat::Json => {
            let rows = cells
                .iter()
                .map(|cell| {
                    let (labels, values) = row_of(cell);
                    let num = |s: &String| s.parse::<f64>().expect("rendered number");
                    TableRow {
                        strategy: labels[0].clone(),
                        threshold: labels[1].clone(),
                        provider: labels[2].clone(),
                        ltc: num(&values[0]),
                        mrmc: num(&values[1]),
                        mrr_at_k: num(&values[2]),
                        f1_at_k: num(&values[3]),
                        out_of_catalog_rate: num(&values[4]),
                    }
                })
                .collect();
            let table = JsonTable { manifest_hash: manifest, k, divergence: first.report.divergence.name(), rows };
            let mut out = serde_json::to_vec_pretty(&table)?;
            out.push(b'\n');
            Ok(out)
        }
        TableFormat::Markdown => {
            let mut s = format!("<!-- manifest: {manifest} -->\n");
            s.push_str(&format!(
                "| Metrics | LtC ↑ | MRMC ↓ | MRR@{k} ↑ | F1@{k} ↑ | Out-of-catalog |\n|---|---|---|---|---|---|\n"
            ));
            for cell in cells {
                let (_, values) = row_of(cell);
                s.push_str(&format!("| {} | {} |\n", cell.strategy.label(), values.join(" | ")));
            }
            Ok(s.into_bytes())
        }
    }
}

/// Parse a CSV table produced by [`emit_table`]. Returns the manifest hash
/// and the rows.
pub fn parse_table_csv(bytes: &[u8]) -> Result<(String, Vec<TableRow>)> {
    let text = std::str::from_utf8(bytes).map_err(|e| ReportError::Malformed(e.to_string()))?;
    let manifest = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("# manifest: "))
        .ok_or_else(|| ReportError::Malformed("missing manifest line".into()))?
        .to_string();
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(bytes);
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != 8 {
            return Err(ReportError::Malformed(format!("expected 8 columns, found {}", record.len())));
        }
        let num = |i: usize| {
            record[i].parse::<f64>().map_err(|_| ReportError::Malformed(format!("bad number {:?}", &record[i])))
        };
        rows.push(TableRow {
            strategy: record[0].to_string(),
            threshold: record[1].to_string(),
            provider: record[2].to_string(),
            ltc: num(3)?,
            mrmc: num(4)?,
            mrr_at_k: num(5)?,
            f1_at_k: num(6)?,
            out_of_catalog_rate: num(7)?,
        });
    }
    Ok((manifest, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureRow {
    pub item: ItemId,
    pub class: PopClass,
    pub train_count: u64,
    pub exposure: u64,
}

/// How often each catalog item was recommended, in training-popularity order.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemExposure {
    pub rows: Vec<ExposureRow>,
}

impl ItemExposure {
    pub fn total(&self) -> u64 {
        self.rows.iter().map(|r| r.exposure).sum()
    }

    /// Share of all exposure that went to niche items; 0 when nothing was
    /// recommended.
    pub fn niche_share(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let niche: u64 = self.rows.iter().filter(|r| r.class == PopClass::Niche).map(|r| r.exposure).sum();
        niche as f64 / total as f64
    }
}

pub fn exposure(lists: &[MatchedList], partition: &PopularityPartition) -> ItemExposure {
    let mut counts: BTreeMap<ItemId, u64> = BTreeMap::new();
    for item in lists.iter().flat_map(MatchedList::matched_items) {
        *counts.entry(item).or_default() += 1;
    }
    let rows = partition
        .ranking()
        .iter()
        .filter_map(|&(item, train_count)| {
            partition.class_of(item).map(|class| ExposureRow {
                item,
                class,
                train_count,
                exposure: counts.get(&item).copied().unwrap_or(0),
            })
        })
        .collect();
    ItemExposure { rows }
}

/// Exposure counts as CSV (`rank,item_id,class,train_count,exposure`),
/// sorted by descending training popularity.
pub fn emit_exposure(lists: &[MatchedList], partition: &PopularityPartition, manifest_hash: &str) -> Result<Vec<u8>> {
    let data = exposure(lists, partition);
    let mut out = format!("# manifest: {manifest_hash}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["rank", "item_id", "class", "train_count", "exposure"])?;
        for (rank, row) in data.rows.iter().enumerate() {
            w.write_record([
                (rank + 1).to_string(),
                row.item.to_string(),
                row.class.label().to_string(),
                row.train_count.to_string(),
                row.exposure.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
    }
    Ok(out)
}

/// Stable file-name stem for a cell, e.g. `fairlrm_55`.
pub fn cell_stem(strategy: &PromptStrategy) -> String {
    match strategy.threshold {
        Some(t) if strategy.kind != StrategyKind::Vanilla => format!("{}_{}", strategy.kind.name(), threshold_label(t)),
        _ => strategy.kind.name().to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::{MatchKind, Slot};
    use crate::metrics::DivergenceKind;
    use crate::UserId;

    fn report(ltc: f64) -> MetricsReport {
        MetricsReport {
            ltc,
            mrmc: 0.3719,
            mrr_at_k: 0.1,
            precision_at_k: 0.2,
            recall_at_k: 0.3,
            f1_at_k: 0.24,
            out_of_catalog_rate: 0.0,
            duplicate_rate: 0.0,
            empty_lists: 0,
            users: 3,
            excluded_users: 0,
            k: 10,
            depth: 10,
            divergence: DivergenceKind::Kl,
            alpha: 0.01,
            groups: BTreeMap::new(),
        }
    }

    fn cell(kind: StrategyKind, threshold: Option<f64>, ltc: f64) -> ExperimentCell {
        ExperimentCell {
            strategy: PromptStrategy { kind, threshold },
            provider: "simulated".into(),
            report: report(ltc),
            manifest_hash: "abc123".into(),
        }
    }

    #[test]
    fn renders_half_even() {
        assert_eq!(render3(0.0625), "0.062");
        assert_eq!(render3(0.1875), "0.188");
        assert_eq!(render3(1.0), "1.000");
        assert_eq!(render3(0.0), "0.000");
    }

    #[test]
    fn csv_table_rows_in_order() {
        let cells = vec![cell(StrategyKind::Vanilla, None, 0.0625), cell(StrategyKind::FairLrm, Some(0.8), 0.5)];
        let bytes = emit_table(&cells, TableFormat::Csv).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert_eq!(
            text,
            "# manifest: abc123\nstrategy,threshold,provider,ltc,mrmc,mrr@10,f1@10,out_of_catalog_rate\n\
             Vanilla,,simulated,0.062,0.372,0.100,0.240,0.000\n\
             FairLRM,82,simulated,0.500,0.372,0.100,0.240,0.000\n"
        );
        let (hash, rows) = parse_table_csv(&bytes).unwrap();
        assert_eq!(hash, "abc123");
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].ltc, 0.062);
        assert_eq!(rows[1].threshold, "82");
    }

    #[test]
    fn other_formats() {
        let cells = vec![cell(StrategyKind::Diversity, Some(0.5), 0.25)];
        let json: serde_json::Value = serde_json::from_slice(&emit_table(&cells, TableFormat::Json).unwrap()).unwrap();
        assert_eq!(json["manifest_hash"], "abc123");
        assert_eq!(json["rows"][0]["ltc"], 0.25);
        assert_eq!(json["rows"][0]["mrmc"], 0.372);
        let md = String::from_utf8(emit_table(&cells, TableFormat::Markdown).unwrap()).unwrap();
        assert!(md.contains("| Diversity (55) | 0.250 | 0.372 |"));
        assert!(md.contains("abc123"));
    }

    #[test]
    fn table_errors() {
        assert!(matches!(emit_table(&[], TableFormat::Csv), Err(ReportError::NoCells)));
        assert!(matches!("xlsx".parse::<TableFormat>(), Err(ReportError::UnknownFormat(_))));
    }

    fn partition() -> PopularityPartition {
        PopularityPartition::from_sets([ItemId(1)].into_iter().collect(), [ItemId(2), ItemId(3)].into_iter().collect())
    }

    fn list(items: &[u64]) -> MatchedList {
        MatchedList {
            user: UserId(1),
            strategy: StrategyKind::Vanilla,
            slots: items
                .iter()
                .map(|&i| Slot::Matched { raw: String::new(), item: ItemId(i), kind: MatchKind::Exact, score: 1.0 })
                .collect(),
        }
    }

    #[test]
    fn exposure_counts() {
        let lists = vec![list(&[2]), list(&[2]), list(&[2])];
        let e = exposure(&lists, &partition());
        assert_eq!(e.rows.iter().map(|r| r.exposure).collect::<Vec<_>>(), vec![0, 3, 0]);
        assert_eq!(e.total(), 3);
        assert_eq!(e.niche_share(), 1.0);

        let empty = exposure(&[list(&[])], &partition());
        assert!(empty.rows.iter().all(|r| r.exposure == 0));
        assert_eq!(empty.niche_share(), 0.0);

        let csv = String::from_utf8(emit_exposure(&lists, &partition(), "h").unwrap()).unwrap();
        assert_eq!(
            csv,
            "# manifest: h\nrank,item_id,class,train_count,exposure\n1,1,popular,0,0\n2,2,niche,0,3\n3,3,niche,0,0\n"
        );
    }

    #[test]
    fn stems() {
        assert_eq!(cell_stem(&PromptStrategy { kind: StrategyKind::Vanilla, threshold: Some(0.5) }), "vanilla");
        assert_eq!(
            cell_stem(&PromptStrategy { kind: StrategyKind::PopDebiasing, threshold: Some(0.5) }),
            "pop_debiasing_55"
        );
    }

    #[test]
    fn uniform_simulation_gives_niche_share_near_eighty_percent() {
        use crate::matcher::{build_index, match_titles};
        use crate::popularity::{classify_items, compute_item_stats};
        use crate::promptgen::PromptRequest;
        use crate::recclient::simulate_recommendations;
        use std::collections::{BTreeMap, BTreeSet};

        let catalog: BTreeSet<ItemId> = (1..=100).map(ItemId).collect();
        let titles: BTreeMap<ItemId, String> = catalog.iter().map(|&i| (i, format!("Film Number {i}"))).collect();
        let stats = compute_item_stats(&crate::ingest::InteractionSet::default(), &catalog).unwrap();
        let partition = classify_items(&stats, 0.2).unwrap();
        let index = build_index(&titles);
        let lists: Vec<MatchedList> = (0..500)
            .map(|u| {
                let req = PromptRequest {
                    user: UserId(u),
                    strategy: PromptStrategy { kind: StrategyKind::Vanilla, threshold: None },
                    history: vec![],
                    list_length: 10,
                };
                match_titles(&simulate_recommendations(&req, &stats, &titles, 0.0, 5).unwrap(), &index, 0.9)
            })
            .collect();
        let e = exposure(&lists, &partition);
        assert_eq!(e.total(), 5_000);
        // binomial standard error over 5,000 slots is about 0.0057
        assert!((e.niche_share() - 0.8).abs() < 0.023, "{}", e.niche_share());
    }
}
