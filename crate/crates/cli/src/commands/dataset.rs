use std::path::PathBuf;

use clap::{Args, ValueEnum};
use tracing::info;

use relcirc_core::scene::{generate_dataset, GenConfig, ImageFormat, OcclusionMode};

use crate::error::Result;
use crate::files;

#[derive(Clone, Copy, ValueEnum)]
pub enum Occlusion {
    /// Resample positions until the pair does not occlude
    Reject,
    /// Keep occluding pairs and label them in_front/behind
    Allow,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Format {
    Png,
    Atns,
}

#[derive(Args)]
pub struct GenDatasetArgs {
    /// Output directory (receives images/, labels.jsonl and config.json)
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Occlusion::Reject)]
    pub occlusion: Occlusion,
    /// Canvas side in pixels
    #[arg(long, default_value_t = 128)]
    pub canvas: u32,
    /// Shape radius in pixels
    #[arg(long, default_value_t = 16)]
    pub radius: u32,
    /// Probability of dropping each color adjective
    #[arg(long, default_value_t = 0.5)]
    pub color_drop: f64,
    /// Alignment tolerance for relation labels (px)
    #[arg(long, default_value_t = 5.0)]
    pub relation_tol: f64,
    /// Bounding-box overlap ratio above which a pair occludes
    #[arg(long, default_value_t = 0.05)]
    pub occlusion_threshold: f64,
    /// Placement attempts per sample in reject mode
    #[arg(long, default_value_t = 1000)]
    pub max_attempts: usize,
    #[arg(long, value_enum, default_value_t = Format::Png)]
    pub format: Format,
}

pub fn run(a: GenDatasetArgs) -> Result<()> {
    let config = GenConfig {
        canvas: a.canvas,
        radius: a.radius,
        occlusion_mode: match a.occlusion {
            Occlusion::Reject => OcclusionMode::Reject,
            Occlusion::Allow => OcclusionMode::Allow,
        },
        color_drop_prob: a.color_drop,
        relation_tolerance: a.relation_tol,
        occlusion_threshold: a.occlusion_threshold,
        max_attempts: a.max_attempts,
        seed: a.seed,
    };
    let format = match a.format {
        Format::Png => ImageFormat::Png,
        Format::Atns => ImageFormat::Atns,
    };
    let summary = generate_dataset(&config, a.n, &a.out, format)?;
    files::write_json(&a.out.join("config.json"), &config)?;
    info!(samples = summary.samples, occluding = summary.occluding, out = %a.out.display(), "dataset written");
    print!("{}", files::to_json(&summary)?);
    Ok(())
}
