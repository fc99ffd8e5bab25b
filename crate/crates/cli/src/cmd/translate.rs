use std::path::PathBuf;

use anyhow::anyhow;
use clap::Args;
use tracing::info;

use dat_core::pipeline::{translate, RecordWriter};
use dat_core::Mode;

use crate::config::{resolve, RunArgs};
use crate::exit::{CmdResult, Failure, Tag};
use crate::manifest::{sidecar, RunManifest};

#[derive(Debug, Args)]
pub struct TranslateArgs {
    /// Sentence to translate.
    pub query: String,
    #[command(flatten)]
    pub run: RunArgs,
    /// Write the translation record here, with a manifest next to it.
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
    /// Print the whole record as JSON instead of only the translation.
    #[arg(long)]
    pub json: bool,
}

pub fn run(args: TranslateArgs) -> CmdResult {
    let resolved = resolve(&args.run)?;
    let rc = &resolved.config;
    let (pool, _lock) = match rc.mode {
        Mode::DatAccumulate => {
            let (pool, lock) = rc.load_pool()?;
            (Some(pool), Some(lock))
        }
        _ => (None, None),
    };
    let config = rc.pipeline(pool)?;
    let gateway = rc.gateway(resolved.auth_token)?;

    let record = translate(&args.query, &config, gateway.as_ref())?;
    if record.filtering_bypassed {
        info!("m equals k: filtering bypassed, candidates used in generation order");
    }

    if let Some(output) = &args.output {
        let mut writer = RecordWriter::create(output)?;
        writer.write(&record)?;
        writer.finish()?;
        let mut manifest = RunManifest::new("translate", rc, 1);
        manifest.output = Some(output.clone());
        manifest.outputs = vec![output.clone()];
        manifest.write(&sidecar(output, ".manifest.json")).runtime_err()?;
    }

    if args.json {
        println!("{}", serde_json::to_string_pretty(&record).expect("records serialize"));
    }
    match (&record.hypothesis, &record.error) {
        (Some(h), _) => {
            if !args.json {
                println!("{h}");
            }
            Ok(())
        }
        (None, Some(e)) if e.starts_with("validation:") => Err(Failure::usage(anyhow!("{e}"))),
        (None, e) => Err(Failure::runtime(anyhow!(
            "translation failed: {}",
            e.as_deref().unwrap_or("no hypothesis")
        ))),
    }
}
