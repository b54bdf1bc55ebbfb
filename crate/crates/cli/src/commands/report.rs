use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Subcommand, ValueEnum};
use serde::Deserialize;

use relcirc_core::raster::{MetricsSummary, METRICS_COLUMNS};
use relcirc_core::synopsis::heatmap_csv;
use relcirc_core::varpart::{VarPartReport, VARPART_COLUMNS};

use super::synopsis::{PairSel, SynopsisFile};
use crate::error::{CliError, Result};
use crate::files;

#[derive(Args)]
pub struct ReportArgs {
    #[command(subcommand)]
    pub kind: ReportKind,
}

#[derive(Subcommand)]
pub enum ReportKind {
    /// Model-comparison table from evaluation summaries
    Metrics {
        /// `MODEL,TEMPLATE,SUMMARY_JSON`, one per table row
        #[arg(long = "entry", required = true)]
        entries: Vec<Entry>,
        /// Output CSV (default: stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Layer × head matrix of one synopsis pair as CSV
    Heatmap {
        /// Synopsis JSON written by `synopsis` or `sweep`
        #[arg(long)]
        synopsis: PathBuf,
        /// Pair to render (default: the first scored pair)
        #[arg(long)]
        pair: Option<PairSel>,
        #[arg(long, value_enum, default_value_t = BranchArg::Cond)]
        branch: BranchArg,
        /// Output CSV (default: stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Variance-partitioning table from a `varpart --json` report
    Varpart {
        #[arg(long)]
        json: PathBuf,
        /// Output CSV (default: stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum BranchArg {
    Cond,
    Uncond,
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub model: String,
    pub template: String,
    pub path: PathBuf,
}

impl FromStr for Entry {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut it = s.splitn(3, ',');
        match (it.next(), it.next(), it.next()) {
            (Some(m), Some(t), Some(p)) if !m.is_empty() && !p.is_empty() => Ok(Self {
                model: m.to_string(),
                template: t.to_string(),
                path: PathBuf::from(p),
            }),
            _ => Err(format!("expected MODEL,TEMPLATE,SUMMARY_JSON, got {s:?}")),
        }
    }
}

/// Either the `evaluate` summary or a bare metrics object.
#[derive(Deserialize)]
#[serde(untagged)]
enum SummaryFile {
    Wrapped { metrics: MetricsSummary },
    Bare(MetricsSummary),
}

pub fn run(a: ReportArgs) -> Result<()> {
    match a.kind {
        ReportKind::Metrics { entries, out } => {
            let rows = entries
                .iter()
                .map(|e| {
                    let m = match files::read_json::<SummaryFile>(&e.path)? {
                        SummaryFile::Wrapped { metrics } | SummaryFile::Bare(metrics) => metrics,
                    };
                    Ok(m.metrics_row(&e.model, &e.template))
                })
                .collect::<Result<Vec<_>>>()?;
            files::emit(out.as_deref(), &files::csv_string(&METRICS_COLUMNS, &rows)?)
        }
        ReportKind::Heatmap {
            synopsis,
            pair,
            branch,
            out,
        } => {
            let file: SynopsisFile = files::read_json(&synopsis)?;
            let p = match &pair {
                Some(sel) => file.pair(&sel.image, &sel.text).ok_or_else(|| {
                    CliError::Argument(format!("no scored pair {}:{} in {}", sel.image, sel.text, synopsis.display()))
                })?,
                None => file
                    .pairs
                    .first()
                    .ok_or_else(|| CliError::Argument(format!("{} has no scored pairs", synopsis.display())))?,
            };
            let s = &p.synopsis;
            let m = match branch {
                BranchArg::Cond => &s.cond,
                BranchArg::Uncond => &s.uncond,
            };
            files::emit(out.as_deref(), &heatmap_csv(m, s.layers, s.heads))
        }
        ReportKind::Varpart { json, out } => {
            let report: VarPartReport = files::read_json(&json)?;
            let rows: Vec<Vec<String>> = report.rows.iter().map(|r| r.cells()).collect();
            files::emit(out.as_deref(), &files::csv_string(&VARPART_COLUMNS, &rows)?)
        }
    }
}
