use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use anyhow::{anyhow, bail, Context};
use clap::Args;
use tracing::{info, warn};

use dat_core::pipeline::{
    accumulate_then_evaluate, read_queries, run_batch, AccumulationSink, BatchItem, BatchOptions,
    PipelineError, RecordWriter,
};
use dat_core::{DemonstrationPool, Mode, TranslationRecord};

use crate::config::{resolve, GatewayMode, Resolved, ResolvedConfig, RunArgs};
use crate::exit::{CmdResult, Failure, Tag};
use crate::lock::PoolLock;
use crate::manifest::{sidecar, RunManifest, SplitRange};

#[derive(Debug, Args)]
pub struct BatchArgs {
    /// One query per line, or `query<TAB>reference`.
    #[arg(long, value_name = "FILE", required_unless_present = "from_manifest")]
    pub input: Option<PathBuf>,
    /// Record file; a directory when `--split` is given.
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
    /// Queries translated concurrently.
    #[arg(long)]
    pub parallel: Option<usize>,
    /// Seed/eval partition of the input in line order, e.g. `seed:500,eval:512`.
    /// Seed demonstrations fill `--pool`, eval queries then retrieve from it.
    #[arg(long, value_name = "SPEC")]
    pub split: Option<String>,
    /// Seed prefix sizes after which the eval set is translated, e.g. `100,250,500`.
    #[arg(long, value_delimiter = ',', requires = "split")]
    pub sweep: Vec<usize>,
    /// Replace an existing non-empty pool in a split run.
    #[arg(long)]
    pub force: bool,
    /// Repeat the run described by a manifest. A recorded run is replayed from its store.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["input", "split", "sweep"])]
    pub from_manifest: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

/// Parses `seed:N,eval:M` into consecutive line ranges in the order given.
pub fn parse_split(spec: &str) -> anyhow::Result<Vec<SplitRange>> {
    let mut ranges = Vec::new();
    let mut start = 0;
    for part in spec.split(',') {
        let (name, count) = part
            .trim()
            .split_once(':')
            .ok_or_else(|| anyhow!("split part {part:?} is not name:count"))?;
        let name = name.trim().to_ascii_lowercase();
        let count: usize = count
            .trim()
            .parse()
            .with_context(|| format!("split count in {part:?}"))?;
        if name != "seed" && name != "eval" {
            bail!("unknown split {name:?}; expected seed and eval");
        }
        if ranges.iter().any(|r: &SplitRange| r.name == name) {
            bail!("split {name:?} given twice");
        }
        ranges.push(SplitRange {
            name,
            start,
            end: start + count,
        });
        start += count;
    }
    if ranges.len() != 2 {
        bail!("a split needs both seed and eval parts, got {spec:?}");
    }
    Ok(ranges)
}

pub fn run(args: BatchArgs) -> CmdResult {
    let (resolved, plan) = match &args.from_manifest {
        Some(path) => from_manifest(path, &args)?,
        None => {
            let resolved = resolve(&args.run)?;
            let splits = match &args.split {
                Some(spec) => parse_split(spec).usage_err()?,
                None => Vec::new(),
            };
            let plan = Plan {
                input: args.input.clone().expect("clap requires --input"),
                output: args
                    .output
                    .clone()
                    .ok_or_else(|| Failure::usage(anyhow!("--output is required")))?,
                splits,
                sweep: args.sweep.clone(),
            };
            (resolved, plan)
        }
    };
    let parallel = args.parallel.unwrap_or(1).max(1);
    if let [a, b] = plan.splits.as_slice() {
        if a.overlaps(b) {
            return Err(Failure::usage(anyhow!("seed and eval ranges overlap")));
        }
    }

    ResolvedConfig::require_file(&plan.input, "input file")?;
    let items = read_queries(&plan.input)?;
    let mut manifest = RunManifest::new("batch", &resolved.config, parallel);
    manifest.input = Some(plan.input.clone());
    manifest.input_lines = Some(items.len());
    manifest.output = Some(plan.output.clone());
    manifest.splits = plan.splits.clone();
    manifest.sweep = plan.sweep.clone();

    if plan.splits.is_empty() {
        plain(&resolved, &plan, &items, parallel, manifest)
    } else {
        split(&resolved, &plan, &items, parallel, manifest, args.force)
    }
}

struct Plan {
    input: PathBuf,
    output: PathBuf,
    splits: Vec<SplitRange>,
    sweep: Vec<usize>,
}

fn from_manifest(path: &Path, args: &BatchArgs) -> CmdResult<(Resolved, Plan)> {
    ResolvedConfig::require_file(path, "manifest")?;
    let manifest = RunManifest::read(path).usage_err()?;
    if manifest.command != "batch" {
        return Err(Failure::usage(anyhow!(
            "manifest {} describes a {} run, not a batch",
            path.display(),
            manifest.command
        )));
    }
    let mut config = manifest.config;
    if let Some(store) = &args.run.replay {
        config.gateway_mode = GatewayMode::Replay;
        config.transcript_store = Some(store.clone());
    } else if config.gateway_mode == GatewayMode::Record {
        config.gateway_mode = GatewayMode::Replay;
    }
    if config.gateway_mode == GatewayMode::Live && config.endpoint_url.is_none() {
        return Err(Failure::usage(anyhow!("manifest has no endpoint and no --replay store was given")));
    }
    let auth_token = std::env::var(crate::config::ENV_API_KEY)
        .ok()
        .map(dat_core::gateway::SecretString::new);
    let plan = Plan {
        input: manifest
            .input
            .ok_or_else(|| Failure::usage(anyhow!("manifest names no input")))?,
        output: args
            .output
            .clone()
            .or(manifest.output)
            .ok_or_else(|| Failure::usage(anyhow!("manifest names no output")))?,
        splits: manifest.splits,
        sweep: manifest.sweep,
    };
    Ok((Resolved { config, auth_token }, plan))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CmdResult {
    let text = serde_json::to_string_pretty(value).expect("summaries serialize");
    fs::write(path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .runtime_err()
}

fn plain(
    resolved: &Resolved,
    plan: &Plan,
    items: &[BatchItem],
    parallel: usize,
    mut manifest: RunManifest,
) -> CmdResult {
    let rc = &resolved.config;
    let (pool, _lock) = match rc.mode {
        Mode::DatAccumulate => {
            let (pool, lock) = rc.load_pool()?;
            (Some(pool), Some(lock))
        }
        _ => (None, None),
    };
    let config = rc.pipeline(pool)?;
    let gateway = rc.gateway(resolved.auth_token.clone())?;
    if items.is_empty() {
        return Err(Failure::usage(anyhow!("{} has no lines", plan.input.display())));
    }

    let summary_path = sidecar(&plan.output, ".summary.json");
    let manifest_path = sidecar(&plan.output, ".manifest.json");
    manifest.outputs = vec![plan.output.clone(), summary_path.clone()];
    manifest.write(&manifest_path).runtime_err()?;

    let summary = run_batch(
        items,
        &config,
        gateway.as_ref(),
        &plan.output,
        BatchOptions {
            parallelism: parallel,
        },
    )?;
    write_json(&summary_path, &summary)?;
    eprintln!(
        "{} queries: {} translated, {} failed ({} invalid), {} model calls",
        summary.total, summary.succeeded, summary.failed, summary.validation_errors, summary.gateway_calls
    );
    if summary.succeeded == 0 {
        return Err(Failure::runtime(anyhow!("no query was translated")));
    }
    if summary.failed > 0 {
        warn!(failed = summary.failed, "some queries failed; see the error field of their records");
    }
    Ok(())
}

struct SplitSink {
    dir: PathBuf,
    seed: RecordWriter,
    evals: BTreeMap<usize, RecordWriter>,
}

impl SplitSink {
    fn eval_path(dir: &Path, prefix: usize) -> PathBuf {
        dir.join(format!("eval.prefix-{prefix}.jsonl"))
    }
}

impl AccumulationSink for SplitSink {
    fn seed_record(&mut self, record: &TranslationRecord) -> Result<(), PipelineError> {
        self.seed.write(record)
    }

    fn eval_record(&mut self, prefix: usize, record: &TranslationRecord) -> Result<(), PipelineError> {
        if !self.evals.contains_key(&prefix) {
            let writer = RecordWriter::create(Self::eval_path(&self.dir, prefix))?;
            self.evals.insert(prefix, writer);
        }
        self.evals.get_mut(&prefix).expect("inserted above").write(record)
    }
}

fn split(
    resolved: &Resolved,
    plan: &Plan,
    items: &[BatchItem],
    parallel: usize,
    mut manifest: RunManifest,
    force: bool,
) -> CmdResult {
    let rc = &resolved.config;
    if !rc.mode.generates() && rc.mode != Mode::DatAccumulate {
        return Err(Failure::usage(anyhow!(
            "--split runs generate seed demonstrations; mode {} does not",
            rc.mode
        )));
    }
    let seed_range = plan.splits.iter().find(|r| r.name == "seed").expect("parsed");
    let eval_range = plan.splits.iter().find(|r| r.name == "eval").expect("parsed");
    let needed = plan.splits.iter().map(|r| r.end).max().unwrap_or(0);
    if needed > items.len() {
        return Err(Failure::usage(anyhow!(
            "split needs {needed} lines but {} has {}",
            plan.input.display(),
            items.len()
        )));
    }
    if needed < items.len() {
        warn!(unused = items.len() - needed, "input lines beyond the split are ignored");
    }
    let pool_path = rc
        .pool
        .clone()
        .ok_or_else(|| Failure::usage(anyhow!("--split needs --pool <file> to accumulate into")))?;
    let _lock = PoolLock::exclusive(&pool_path).runtime_err()?;
    if pool_path.exists() && !force && !DemonstrationPool::load(&pool_path).runtime_err()?.is_empty() {
        return Err(Failure::usage(anyhow!(
            "pool {} already has entries; pass --force to replace it",
            pool_path.display()
        )));
    }

    let pool = Arc::new(RwLock::new(DemonstrationPool::new()));
    let mut seed_config = rc.clone();
    if seed_config.mode == Mode::DatAccumulate {
        seed_config.mode = Mode::Dat;
    }
    let config = seed_config.pipeline(Some(Arc::clone(&pool)))?;
    let gateway = rc.gateway(resolved.auth_token.clone())?;

    fs::create_dir_all(&plan.output)
        .with_context(|| format!("creating {}", plan.output.display()))
        .runtime_err()?;
    let seed_path = plan.output.join("seed.jsonl");
    let summary_path = plan.output.join("summary.json");
    let prefixes = if plan.sweep.is_empty() {
        vec![seed_range.len()]
    } else {
        plan.sweep.clone()
    };
    manifest.outputs = std::iter::once(seed_path.clone())
        .chain(prefixes.iter().map(|&p| SplitSink::eval_path(&plan.output, p)))
        .chain([summary_path.clone(), pool_path.clone()])
        .collect();
    manifest.write(&plan.output.join("manifest.json")).runtime_err()?;

    let mut sink = SplitSink {
        dir: plan.output.clone(),
        seed: RecordWriter::create(&seed_path)?,
        evals: BTreeMap::new(),
    };
    let outcome = accumulate_then_evaluate(
        &items[seed_range.start..seed_range.end],
        &items[eval_range.start..eval_range.end],
        &plan.sweep,
        &config,
        gateway.as_ref(),
        Arc::clone(&pool),
        BatchOptions {
            parallelism: parallel,
        },
        &mut sink,
    )?;
    sink.seed.finish()?;
    for (_, w) in sink.evals {
        w.finish()?;
    }
    pool.read()
        .unwrap_or_else(|p| p.into_inner())
        .persist(&pool_path)
        .runtime_err()?;
    write_json(&summary_path, &outcome)?;

    eprintln!(
        "seed: {} queries, {} pairs, pool size {} ({} duplicates)",
        outcome.seed_summary.total, outcome.seed_pairs, outcome.pool_size, outcome.duplicates
    );
    for point in &outcome.points {
        eprintln!(
            "eval after {} seed queries (pool {}): {} translated, {} failed",
            point.seed_prefix, point.pool_size, point.summary.succeeded, point.summary.failed
        );
    }
    info!(pool = %pool_path.display(), "pool written");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_specs() {
        let r = parse_split("seed:500,eval:512").unwrap();
        assert_eq!((r[0].start, r[0].end, r[1].start, r[1].end), (0, 500, 500, 1012));
        let r = parse_split("eval:2, seed:3").unwrap();
        assert_eq!((r[1].name.as_str(), r[1].start, r[1].end), ("seed", 2, 5));
        assert!(parse_split("seed:5").is_err());
        assert!(parse_split("seed:5,seed:6").is_err());
        assert!(parse_split("seed:5,test:6").is_err());
        assert!(parse_split("seed:x,eval:6").is_err());
    }
}
