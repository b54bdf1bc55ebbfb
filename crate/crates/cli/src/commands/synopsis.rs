use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use relcirc_core::synopsis::{
    reduce_synopsis, score_templates_streamed, topk_heads, AttnGeometry, HeadScore, ImageMasks, PromptMasks,
    ReductionMode, RowCheck, ScoreRequest, SynopsisResult,
};
use relcirc_core::Error;

use crate::error::{CliError, Result};
use crate::files;

#[derive(Clone, Copy, ValueEnum)]
pub enum Mode {
    /// Mean over denoising steps
    MeanTime,
    /// Maximum over denoising steps
    MaxTime,
    /// Value at the step of maximum activation, plus that step
    MaxStepSelect,
}

impl From<Mode> for ReductionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::MeanTime => ReductionMode::MeanTime,
            Mode::MaxTime => ReductionMode::MaxTime,
            Mode::MaxStepSelect => ReductionMode::MaxStepSelect,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Rows {
    /// Reject invalid rows and renormalize slightly-off rows
    Validate,
    /// Use stored values as they are
    Off,
}

impl From<Rows> for RowCheck {
    fn from(r: Rows) -> Self {
        match r {
            Rows::Validate => RowCheck::Validate,
            Rows::Off => RowCheck::Off,
        }
    }
}

/// `IMAGE:TEXT` selector, e.g. `circle:square`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSel {
    pub image: String,
    pub text: String,
}

impl FromStr for PairSel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.split_once(':') {
            Some((i, t)) if !i.is_empty() && !t.is_empty() => Ok(Self {
                image: i.to_string(),
                text: t.to_string(),
            }),
            _ => Err(format!("expected IMAGE:TEXT, got {s:?}")),
        }
    }
}

#[derive(Args, Clone)]
pub struct ScoreOpts {
    /// Image-target:text-group pairs to score (default: every combination)
    #[arg(long = "pair")]
    pub pairs: Vec<PairSel>,
    #[arg(long, value_enum, default_value_t = Mode::MeanTime)]
    pub mode: Mode,
    #[arg(long, value_enum, default_value_t = Rows::Validate)]
    pub row_check: Rows,
    /// Leading-axis indices read per slab
    #[arg(long, default_value_t = 1)]
    pub chunk: usize,
    /// Heads reported per pair and branch
    #[arg(long, default_value_t = 5)]
    pub k: usize,
}

#[derive(Args)]
pub struct SynopsisArgs {
    /// Attention tensor (ATNS, optional `.meta.json` sidecar)
    #[arg(long)]
    pub attn: PathBuf,
    /// Prompt masks JSON (image targets and text groups)
    #[arg(long)]
    pub masks: PathBuf,
    #[command(flatten)]
    pub score: ScoreOpts,
    /// Output JSON (default: stdout)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Directory of `<id>.atns` attention dumps
    #[arg(long)]
    pub attn_dir: PathBuf,
    /// Directory of `<id>.masks.json`, or one JSON object mapping id to masks
    #[arg(long)]
    pub masks: PathBuf,
    /// Prompt ids to run, one per line (default: every dump in the directory)
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Fail unless exactly this many prompts are found
    #[arg(long)]
    pub expect: Option<usize>,
    /// Receives `<id>.synopsis.json` and `topk_summary.csv`
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub score: ScoreOpts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSynopsis {
    pub image: String,
    pub text: String,
    pub synopsis: SynopsisResult,
    pub topk_cond: Vec<HeadScore>,
    pub topk_uncond: Vec<HeadScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub image: String,
    pub text: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynopsisFile {
    pub prompt: String,
    pub attn: String,
    pub geometry: AttnGeometry,
    pub row_check: RowCheck,
    pub k: usize,
    pub pairs: Vec<PairSynopsis>,
    pub skipped: Vec<SkippedPair>,
}

impl SynopsisFile {
    pub fn pair(&self, image: &str, text: &str) -> Option<&PairSynopsis> {
        self.pairs.iter().find(|p| p.image == image && p.text == text)
    }
}

fn select_pairs(masks: &PromptMasks, wanted: &[PairSel]) -> Result<Vec<PairSel>> {
    if wanted.is_empty() {
        return Ok(masks
            .image
            .keys()
            .flat_map(|i| {
                masks.text.keys().map(move |t| PairSel {
                    image: i.clone(),
                    text: t.clone(),
                })
            })
            .collect());
    }
    for p in wanted {
        if !masks.image.contains_key(&p.image) {
            return Err(CliError::Argument(format!("no image target {:?} in masks", p.image)));
        }
        if !masks.text.contains_key(&p.text) {
            return Err(CliError::Argument(format!("no text group {:?} in masks", p.text)));
        }
    }
    Ok(wanted.to_vec())
}

fn file_label(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Scores every selected pair of one prompt in a single pass over the tensor.
pub fn synopsize(attn: &Path, masks: &PromptMasks, opts: &ScoreOpts) -> Result<SynopsisFile> {
    if opts.chunk == 0 {
        return Err(CliError::Argument("--chunk must be at least 1".into()));
    }
    let pairs = select_pairs(masks, &opts.pairs)?;
    let images: Vec<String> = pairs.iter().map(|p| p.image.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let texts: Vec<String> = pairs.iter().map(|p| p.text.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let request = ScoreRequest {
        image: images
            .iter()
            .map(|i| ImageMasks::new(masks.image_tokens, masks.image[i].clone()))
            .collect::<relcirc_core::Result<_>>()?,
        text: texts.iter().map(|t| masks.text[t].clone()).collect(),
        row_check: opts.row_check.into(),
    };
    let set = score_templates_streamed(attn, opts.chunk, &request)?;
    let g = set.geometry;

    let mut out = Vec::with_capacity(pairs.len());
    let mut skipped = Vec::new();
    for p in pairs {
        let ii = images.iter().position(|i| *i == p.image).expect("image indexed");
        let ti = texts.iter().position(|t| *t == p.text).expect("text indexed");
        match set.pair(ii, ti) {
            Ok(scores) => {
                let synopsis = reduce_synopsis(&scores, opts.mode.into());
                let k = opts.k.min(g.layers * g.heads);
                let topk_cond = topk_heads(&synopsis.cond, g.layers, g.heads, k)?;
                let topk_uncond = topk_heads(&synopsis.uncond, g.layers, g.heads, k)?;
                out.push(PairSynopsis {
                    image: p.image,
                    text: p.text,
                    synopsis,
                    topk_cond,
                    topk_uncond,
                });
            }
            Err(Error::EmptyResult(reason)) => {
                warn!(image = %p.image, text = %p.text, %reason, "pair skipped");
                skipped.push(SkippedPair {
                    image: p.image,
                    text: p.text,
                    reason,
                });
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(SynopsisFile {
        prompt: masks.prompt.clone(),
        attn: file_label(attn),
        geometry: g,
        row_check: opts.row_check.into(),
        k: opts.k,
        pairs: out,
        skipped,
    })
}

pub fn run(a: SynopsisArgs) -> Result<()> {
    let masks: PromptMasks = files::read_json(&a.masks)?;
    let file = synopsize(&a.attn, &masks, &a.score)?;
    info!(pairs = file.pairs.len(), skipped = file.skipped.len(), "synopsis done");
    files::emit(a.out.as_deref(), &files::to_json(&file)?)
}

fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

fn list_dumps(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let p = entry.map_err(|e| CliError::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "atns") {
            if let Some(stem) = p.file_stem() {
                ids.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

enum MaskSource {
    Dir(PathBuf),
    Map(BTreeMap<String, PromptMasks>),
}

impl MaskSource {
    fn open(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Ok(Self::Dir(path.to_path_buf()))
        } else {
            Ok(Self::Map(files::read_json(path)?))
        }
    }

    fn get(&self, id: &str) -> Result<PromptMasks> {
        match self {
            Self::Dir(d) => files::read_json(&d.join(format!("{id}.masks.json"))),
            Self::Map(m) => m
                .get(id)
                .cloned()
                .ok_or_else(|| CliError::Sweep(format!("no masks for prompt {id:?}"))),
        }
    }
}

pub const TOPK_COLUMNS: [&str; 9] = ["prompt", "image", "text", "branch", "rank", "layer", "head", "label", "score"];

fn topk_rows(id: &str, file: &SynopsisFile) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for p in &file.pairs {
        for (branch, list) in [("cond", &p.topk_cond), ("uncond", &p.topk_uncond)] {
            for (r, h) in list.iter().enumerate() {
                rows.push(vec![
                    id.to_string(),
                    p.image.clone(),
                    p.text.clone(),
                    branch.to_string(),
                    (r + 1).to_string(),
                    h.layer.to_string(),
                    h.head.to_string(),
                    h.label(),
                    format!("{:.6}", h.score),
                ]);
            }
        }
    }
    rows
}

pub fn run_sweep(a: SweepArgs) -> Result<()> {
    let ids = match &a.manifest {
        Some(m) => read_manifest(m)?,
        None => list_dumps(&a.attn_dir)?,
    };
    if ids.is_empty() {
        return Err(CliError::Sweep(format!("no prompts found in {}", a.attn_dir.display())));
    }
    if let Some(n) = a.expect {
        if ids.len() != n {
            return Err(CliError::Sweep(format!("expected {n} prompts, found {}", ids.len())));
        }
    }
    let masks = MaskSource::open(&a.masks)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::io(&a.out_dir, e))?;
    info!(prompts = ids.len(), "sweep started");

    let results: Vec<(String, SynopsisFile)> = ids
        .par_iter()
        .map(|id| {
            let attn = a.attn_dir.join(format!("{id}.atns"));
            let file = synopsize(&attn, &masks.get(id)?, &a.score)?;
            files::write_json(&a.out_dir.join(format!("{id}.synopsis.json")), &file)?;
            info!(prompt = %id, pairs = file.pairs.len(), skipped = file.skipped.len(), "prompt done");
            Ok((id.clone(), file))
        })
        .collect::<Result<_>>()?;

    let rows: Vec<Vec<String>> = results.iter().flat_map(|(id, f)| topk_rows(id, f)).collect();
    files::write_text(&a.out_dir.join("topk_summary.csv"), &files::csv_string(&TOPK_COLUMNS, &rows)?)?;
    info!(prompts = results.len(), out = %a.out_dir.display(), "sweep done");
    Ok(())
}
