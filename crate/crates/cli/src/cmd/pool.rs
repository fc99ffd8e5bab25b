use std::path::{Path, PathBuf};

use anyhow::anyhow;
use clap::{Args, Subcommand};
use serde_json::json;

use dat_core::pool::DEFAULT_TOP_N;
use dat_core::prompt::PAIR_ARROW;
use dat_core::{DemonstrationPair, DemonstrationPool, Provenance};

use crate::config::{read_pairs, ResolvedConfig};
use crate::exit::{CmdResult, Failure, Tag};
use crate::lock::PoolLock;

#[derive(Debug, Args)]
pub struct PoolArgs {
    #[command(subcommand)]
    pub command: PoolCommand,
}

#[derive(Debug, Args)]
pub struct PoolPath {
    /// Pool store file.
    #[arg(long, value_name = "FILE")]
    pub pool: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum PoolCommand {
    /// Add pairs, creating the pool if needed. Exact duplicates are skipped.
    Insert {
        #[command(flatten)]
        path: PoolPath,
        /// Tab-separated `source<TAB>target` file.
        #[arg(long, value_name = "FILE", required_unless_present = "source")]
        pairs: Option<PathBuf>,
        #[arg(long, requires = "target", conflicts_with = "pairs")]
        source: Option<String>,
        #[arg(long, requires = "source")]
        target: Option<String>,
    },
    /// Retrieve pairs for a query with their BM25 and n-gram recall scores.
    Query {
        #[command(flatten)]
        path: PoolPath,
        #[arg(long = "q", value_name = "TEXT")]
        query: String,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_TOP_N)]
        top_n: usize,
        #[arg(long)]
        json: bool,
    },
    /// Check the stored index against one rebuilt from scratch.
    Verify {
        #[command(flatten)]
        path: PoolPath,
    },
    /// Size and source length distribution.
    Stats {
        #[command(flatten)]
        path: PoolPath,
        #[arg(long)]
        json: bool,
    },
    /// List entries in insertion order.
    Inspect {
        #[command(flatten)]
        path: PoolPath,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Rewrite the store in canonical form.
    Compact {
        #[command(flatten)]
        path: PoolPath,
    },
}

fn open(path: &Path) -> CmdResult<DemonstrationPool> {
    ResolvedConfig::require_file(path, "pool file")?;
    DemonstrationPool::load(path).runtime_err()
}

pub fn run(args: PoolArgs) -> CmdResult {
    match args.command {
        PoolCommand::Insert {
            path,
            pairs,
            source,
            target,
        } => {
            let _lock = PoolLock::exclusive(&path.pool).runtime_err()?;
            let mut pool = if path.pool.exists() {
                open(&path.pool)?
            } else {
                DemonstrationPool::new()
            };
            let new_pairs = match (pairs, source, target) {
                (Some(file), _, _) => {
                    ResolvedConfig::require_file(&file, "pairs file")?;
                    read_pairs(&file, Provenance::Fixed).usage_err()?
                }
                (None, Some(s), Some(t)) => {
                    vec![DemonstrationPair::new(s, t, Provenance::Fixed).usage_err()?]
                }
                _ => return Err(Failure::usage(anyhow!("give --pairs or --source with --target"))),
            };
            let (mut inserted, mut duplicates) = (0, 0);
            for pair in new_pairs {
                if pool.insert(pair, None).usage_err()?.is_duplicate() {
                    duplicates += 1;
                } else {
                    inserted += 1;
                }
            }
            pool.persist(&path.pool).runtime_err()?;
            println!("inserted {inserted}, skipped {duplicates} duplicates, size {}", pool.len());
        }
        PoolCommand::Query {
            path,
            query,
            k,
            top_n,
            json,
        } => {
            if k > top_n {
                return Err(Failure::usage(anyhow!("--k {k} exceeds --top-n {top_n}")));
            }
            let _lock = PoolLock::shared(&path.pool).runtime_err()?;
            let pool = open(&path.pool)?;
            if pool.is_empty() {
                eprintln!("warning: pool {} is empty; nothing retrieved", path.pool.display());
            }
            let hits = pool.rbm25_retrieve(&query, top_n, k).usage_err()?;
            if json {
                let rows: Vec<_> = hits
                    .iter()
                    .map(|h| {
                        json!({
                            "insert_sequence": h.insert_sequence,
                            "bm25": h.bm25,
                            "alpha": h.alpha,
                            "source": h.pair.source,
                            "target": h.pair.target,
                        })
                    })
                    .collect();
                println!("{}", serde_json::Value::Array(rows));
            } else {
                println!("rank\tbm25\talpha\tpair");
                for (i, h) in hits.iter().enumerate() {
                    println!(
                        "{}\t{:.4}\t{:.4}\t{} {PAIR_ARROW} {}",
                        i + 1,
                        h.bm25,
                        h.alpha,
                        h.pair.source,
                        h.pair.target
                    );
                }
            }
        }
        PoolCommand::Verify { path } => {
            let _lock = PoolLock::shared(&path.pool).runtime_err()?;
            let pool = open(&path.pool)?;
            pool.verify().runtime_err()?;
            println!("ok: {} entries, index matches a rebuild", pool.len());
        }
        PoolCommand::Stats { path, json } => {
            let _lock = PoolLock::shared(&path.pool).runtime_err()?;
            let stats = open(&path.pool)?.stats();
            if json {
                println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
            } else {
                println!("size: {}", stats.size);
                println!("vocabulary: {}", stats.vocabulary);
                println!(
                    "source tokens: mean {:.1}, min {}, median {}, max {}",
                    stats.mean_source_tokens,
                    stats.min_source_tokens,
                    stats.median_source_tokens,
                    stats.max_source_tokens
                );
            }
        }
        PoolCommand::Inspect { path, limit } => {
            let _lock = PoolLock::shared(&path.pool).runtime_err()?;
            let pool = open(&path.pool)?;
            for e in pool.entries().iter().take(limit.unwrap_or(usize::MAX)) {
                println!(
                    "{}\t{}\t{} {PAIR_ARROW} {}",
                    e.insert_sequence,
                    serde_json::to_value(e.pair.provenance)
                        .ok()
                        .and_then(|v| v.as_str().map(String::from))
                        .unwrap_or_default(),
                    e.pair.source,
                    e.pair.target
                );
            }
        }
        PoolCommand::Compact { path } => {
            let _lock = PoolLock::exclusive(&path.pool).runtime_err()?;
            let pool = open(&path.pool)?;
            pool.verify().runtime_err()?;
            pool.persist(&path.pool).runtime_err()?;
            println!("rewrote {} entries", pool.len());
        }
    }
    Ok(())
}
