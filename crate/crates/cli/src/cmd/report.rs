use std::path::PathBuf;

use anyhow::anyhow;
use clap::Args;

use dat_core::metrics::{build_report, render_table, QualityScorer, QualityStatus};
use dat_core::pipeline::read_records;

use crate::config::ResolvedConfig;
use crate::exit::{CmdResult, Failure};
use crate::quality::CommandScorer;

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Record files; one report row each.
    #[arg(long, value_name = "FILE", required = true, num_args = 1..)]
    pub records: Vec<PathBuf>,
    /// Row labels, in the order of `--records`. Defaults to file names.
    #[arg(long)]
    pub label: Vec<String>,
    /// Scorer command reading `{"source","target"}` JSON lines and printing one score per line.
    #[arg(long, value_name = "CMD")]
    pub quality_cmd: Option<String>,
    /// Print the full reports as JSON instead of the table.
    #[arg(long)]
    pub json: bool,
}

pub fn run(args: ReportArgs) -> CmdResult {
    if !args.label.is_empty() && args.label.len() != args.records.len() {
        return Err(Failure::usage(anyhow!(
            "{} labels for {} record files",
            args.label.len(),
            args.records.len()
        )));
    }
    let scorer = args.quality_cmd.as_deref().map(CommandScorer::new);
    let mut reports = Vec::with_capacity(args.records.len());
    for (i, path) in args.records.iter().enumerate() {
        ResolvedConfig::require_file(path, "record file")?;
        let records = read_records(path).map_err(Failure::runtime)?;
        let label = args.label.get(i).cloned().unwrap_or_else(|| {
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string())
        });
        let report = build_report(&label, &records, scorer.as_ref().map(|s| s as &dyn QualityScorer));
        if let QualityStatus::Failed { reason } = &report.quality {
            eprintln!("warning: quality scoring failed for {label}: {reason}");
        }
        reports.push(report);
    }
    if args.json {
        println!("{}", serde_json::to_string_pretty(&reports).expect("reports serialize"));
    } else {
        print!("{}", render_table(&reports));
    }
    Ok(())
}
