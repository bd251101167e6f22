use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fairrec_core::pipeline::{
    build_cell_prompts, ingest_stats, obtain_responses, partition_csv, prepare, prompts_jsonl, reference_diff,
    responses_jsonl, run_experiment, score_from_responses, segment_csvs, ReferenceStats, RunConfig,
};
use fairrec_core::promptgen::threshold_label;
use fairrec_core::report::render3;
use fairrec_core::synth::{generate, write_movielens, SyntheticConfig};

/// Measure and reduce popularity bias in LLM-generated recommendations.
#[derive(Parser)]
#[command(name = "fairrec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the offline simulator instead of a live provider.
    #[arg(long)]
    simulate: bool,
    /// Override the worker count.
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if self.simulate {
            cfg.simulate = true;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Dataset statistics and P/N group sizes, optionally against published figures.
    IngestStats {
        #[command(flatten)]
        common: Common,
        /// Print a reference comparison for the configured dataset format.
        #[arg(long)]
        reference: bool,
        /// Emit JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Write the head/tail item partition.
    Partition {
        #[command(flatten)]
        common: Common,
    },
    /// Write P/N user segmentations for every configured threshold.
    Segment {
        #[command(flatten)]
        common: Common,
    },
    /// Write every prompt to prompts.jsonl.
    Prompts {
        #[command(flatten)]
        common: Common,
    },
    /// Obtain responses (live or simulated) and write responses.jsonl.
    Query {
        #[command(flatten)]
        common: Common,
    },
    /// Match and score a stored responses.jsonl and write the report.
    Score {
        #[command(flatten)]
        common: Common,
        /// Responses file; defaults to <out>/responses.jsonl.
        #[arg(long)]
        responses: Option<PathBuf>,
    },
    /// Run every stage end to end.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic MovieLens-format dataset.
    Synth {
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 500)]
        items: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for ratings.csv and movies.csv.
        #[arg(long)]
        dir: PathBuf,
    },
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::IngestStats { common, reference, json } => {
            let cfg = common.load()?;
            let stats = ingest_stats(&cfg)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&stats)?);
            } else {
                println!(
                    "raw:      {} users, {} items, {} interactions",
                    stats.raw.users, stats.raw.items, stats.raw.interactions
                );
                println!(
                    "filtered: {} users, {} items, {} interactions (train {}, test {})",
                    stats.filtered.users,
                    stats.filtered.items,
                    stats.filtered.interactions,
                    stats.train_interactions,
                    stats.test_interactions
                );
                println!("catalog:  {} items", stats.catalog_items);
                if stats.pseudo_temporal_order {
                    println!("note: no timestamps; file order used as time order");
                }
                for g in &stats.groups {
                    println!("{:<15} ({}) P={} N={}", g.variant, threshold_label(g.threshold), g.p, g.n);
                }
            }
            if reference {
                let format = cfg.dataset.as_ref().map(|d| d.format).context("--reference needs a [dataset]")?;
                let r = ReferenceStats::for_format(format);
                println!("\nquantity,reference ({}),observed,diff", r.name);
                for (name, reported, observed) in reference_diff(&stats, r) {
                    println!("{name},{reported},{observed},{}", observed - reported);
                }
            }
        }
        Command::Partition { common } => {
            let cfg = common.load()?;
            let data = prepare(&cfg)?;
            let p = &data.partition;
            println!("{} popular / {} niche items", p.popular().len(), p.niche().len());
            write_file(&cfg.out, "partition.csv", &partition_csv(&data, None)?)?;
        }
        Command::Segment { common } => {
            let cfg = common.load()?;
            let data = prepare(&cfg)?;
            for seg in &data.segments {
                let (p, n) = seg.group_sizes();
                println!("({}) P={p} N={n}", threshold_label(seg.threshold()));
            }
            for (name, body) in segment_csvs(&data, None)? {
                write_file(&cfg.out, &name, &body)?;
            }
        }
        Command::Prompts { common } => {
            let cfg = common.load()?;
            let data = prepare(&cfg)?;
            let cells = build_cell_prompts(&cfg, &data)?;
            write_file(&cfg.out, "prompts.jsonl", &prompts_jsonl(&cells))?;
        }
        Command::Query { common } => {
            let cfg = common.load()?;
            let data = prepare(&cfg)?;
            let cells = build_cell_prompts(&cfg, &data)?;
            let responses = obtain_responses(&cfg, &data, &cells, None)?;
            if !cfg.simulate {
                println!("{} cached, {} queried", responses.cache_hits, responses.cache_misses);
            }
            write_file(&cfg.out, "prompts.jsonl", &prompts_jsonl(&cells))?;
            write_file(&cfg.out, "responses.jsonl", &responses_jsonl(&cells, &responses))?;
        }
        Command::Score { common, responses } => {
            let cfg = common.load()?;
            let path = responses.unwrap_or_else(|| cfg.out.join("responses.jsonl"));
            let outcome = score_from_responses(&cfg, &path)?;
            print_summary(&cfg, &outcome);
        }
        Command::Run { common } => {
            let cfg = common.load()?;
            let outcome = run_experiment(&cfg, None)?;
            print_summary(&cfg, &outcome);
        }
        Command::Synth { users, items, seed, dir } => {
            let data = generate(&SyntheticConfig::new(users, items), seed);
            let (mut ratings, mut movies) = (Vec::new(), Vec::new());
            write_movielens(&data, &mut ratings, &mut movies)?;
            write_file(&dir, "ratings.csv", &ratings)?;
            write_file(&dir, "movies.csv", &movies)?;
        }
    }
    Ok(())
}

fn print_summary(cfg: &RunConfig, outcome: &fairrec_core::pipeline::RunOutcome) {
    println!("{:<22} {:>7} {:>7} {:>7} {:>7} {:>7}", "strategy", "LtC", "MRMC", "MRR", "F1", "OOC");
    for cell in &outcome.cells {
        let r = &cell.report;
        println!(
            "{:<22} {:>7} {:>7} {:>7} {:>7} {:>7}",
            cell.strategy.label(),
            render3(r.ltc),
            render3(r.mrmc),
            render3(r.mrr_at_k),
            render3(r.f1_at_k),
            render3(r.out_of_catalog_rate)
        );
    }
    println!("manifest {} ; {} files in {}", outcome.manifest.hash(), outcome.files.len(), cfg.out.display());
}
