use std::path::PathBuf;

use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use tracing::{info, warn};

use relcirc_core::raster::{aggregate_metrics, evaluate_scene, parse_objects, EvalParams, EvalResult, MetricsSummary, RasterParams, SceneQuery};
use relcirc_core::scene::dataset::{load_image, read_labels, LabelRecord};
use relcirc_core::Color;

use crate::error::Result;
use crate::files;

#[derive(Clone, Copy, ValueEnum)]
pub enum QueryMode {
    /// Only attributes stated in the caption (dropped colors are not checked)
    Caption,
    /// Full ground truth, both colors checked
    Full,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// labels.jsonl describing each image
    #[arg(long)]
    pub labels: PathBuf,
    /// Root for relative image paths (default: the labels file's directory)
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Per-image results (JSON lines)
    #[arg(long)]
    pub out: PathBuf,
    /// Summary JSON (default: stdout)
    #[arg(long)]
    pub summary: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = QueryMode::Caption)]
    pub query: QueryMode,
    /// Channel values strictly above this are foreground
    #[arg(long, default_value_t = 180)]
    pub intensity_threshold: u8,
    /// Minimum component area in pixels
    #[arg(long, default_value_t = 100)]
    pub min_area: usize,
    /// Distance from 0/255 tolerated when tagging red/blue
    #[arg(long, default_value_t = 25.0)]
    pub color_margin: f64,
    /// Polygon simplification epsilon as a fraction of the perimeter
    #[arg(long, default_value_t = 0.04)]
    pub dp_epsilon: f64,
    /// Strict relation alignment tolerance (px)
    #[arg(long, default_value_t = 5.0)]
    pub relation_tol: f64,
    /// Loose relation threshold (px)
    #[arg(long, default_value_t = 8.0)]
    pub loose_threshold: f64,
}

#[derive(Serialize)]
struct ResultLine<'a> {
    index: usize,
    image: &'a str,
    #[serde(flatten)]
    result: &'a EvalResult,
}

#[derive(Serialize)]
struct Summary {
    labels: usize,
    evaluated: usize,
    skipped_occluding: usize,
    metrics: MetricsSummary,
}

fn query_for(r: &LabelRecord, mode: QueryMode) -> Result<SceneQuery> {
    let keep = |c: Color, dropped: bool| match mode {
        QueryMode::Full => Some(c),
        QueryMode::Caption => (!dropped).then_some(c),
    };
    Ok(SceneQuery::new(
        r.shape1,
        r.shape2,
        keep(r.color1, r.color1_dropped),
        keep(r.color2, r.color2_dropped),
        r.spatial_relationship,
    )?)
}

pub fn run(a: EvaluateArgs) -> Result<()> {
    let records = read_labels(&a.labels)?;
    let root = a
        .images
        .clone()
        .or_else(|| a.labels.parent().map(PathBuf::from))
        .unwrap_or_default();
    let raster = RasterParams {
        intensity_threshold: a.intensity_threshold,
        min_area: a.min_area,
        color_margin: a.color_margin,
        dp_epsilon_fraction: a.dp_epsilon,
    };
    let params = EvalParams {
        relation_tolerance: a.relation_tol,
        loose_threshold: a.loose_threshold,
    };
    let scoreable: Vec<&LabelRecord> = records.iter().filter(|r| r.spatial_relationship.is_planar()).collect();
    let skipped = records.len() - scoreable.len();
    if skipped > 0 {
        warn!(skipped, "occluding samples have no planar relation and are skipped");
    }
    let results: Vec<EvalResult> = scoreable
        .par_iter()
        .map(|r| {
            let img = load_image(&root.join(&r.image))?;
            let dets = parse_objects(&img, &raster);
            Ok(evaluate_scene(&dets, &query_for(r, a.query)?, &params))
        })
        .collect::<Result<_>>()?;

    let mut lines = String::new();
    for (r, res) in scoreable.iter().zip(&results) {
        let line = ResultLine {
            index: r.index,
            image: &r.image,
            result: res,
        };
        lines.push_str(&serde_json::to_string(&line).map_err(relcirc_core::Error::from)?);
        lines.push('\n');
    }
    files::write_text(&a.out, &lines)?;

    let metrics = aggregate_metrics(&results)?;
    info!(evaluated = results.len(), overall = metrics.overall, "evaluation done");
    let summary = Summary {
        labels: records.len(),
        evaluated: results.len(),
        skipped_occluding: skipped,
        metrics,
    };
    files::emit(a.summary.as_deref(), &files::to_json(&summary)?)
}
