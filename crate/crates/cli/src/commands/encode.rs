use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, ValueEnum};
use serde::Serialize;
use tracing::info;

use relcirc_core::scene::dataset::read_labels;
use relcirc_core::tensor_io::Tensor;
use relcirc_core::text::{
    build_embedding_dict, caption_groups, token_group_masks, unique_ids, EmbeddingDict, Encoder, EncoderKind,
    WordTokenizer, PAD_ID,
};

use crate::error::{CliError, Result};
use crate::files;

#[derive(Clone, Copy, ValueEnum)]
pub enum Kind {
    /// Random token embeddings
    Rte,
    /// Random token embeddings plus scaled sinusoidal positions
    RtePos,
}

#[derive(Args)]
#[command(group(ArgGroup::new("input").required(true).args(["captions", "labels"])))]
pub struct EncodeArgs {
    /// Text file with one caption per line
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// labels.jsonl whose captions are encoded
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Kind::Rte)]
    pub kind: Kind,
    /// Embedding width
    #[arg(long, default_value_t = 4096)]
    pub dim: usize,
    /// Expected row norm; entries are N(0, scale²/dim)
    #[arg(long, default_value_t = 7.5)]
    pub scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sequence length after eos and padding
    #[arg(long, default_value_t = 20)]
    pub max_len: usize,
    /// Multiplier on the positional table (rte-pos)
    #[arg(long, default_value_t = 1.0 / 6.0)]
    pub pos_scale: f32,
    /// Reuse a saved dictionary instead of building one
    #[arg(long)]
    pub dict: Option<PathBuf>,
    /// Save the dictionary used
    #[arg(long)]
    pub dict_out: Option<PathBuf>,
    /// Output tensor [n, max_len, dim]; token ids and group masks go to
    /// `<stem>.tokens.json`
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct TokenRow {
    caption: String,
    ids: Vec<u32>,
    groups: BTreeMap<String, Vec<f32>>,
}

#[derive(Serialize)]
struct TokenFile {
    kind: &'static str,
    max_len: usize,
    words: Vec<String>,
    rows: Vec<TokenRow>,
}

fn read_captions(a: &EncodeArgs) -> Result<Vec<String>> {
    if let Some(p) = &a.captions {
        let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
        return Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect());
    }
    let p = a.labels.as_ref().expect("clap enforces one input");
    Ok(read_labels(p)?.into_iter().map(|r| r.caption).collect())
}

pub fn tokens_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.tokens.json"))
}

pub fn run(a: EncodeArgs) -> Result<()> {
    let captions = read_captions(&a)?;
    if captions.is_empty() {
        return Err(CliError::Argument("no captions to encode".into()));
    }
    let tok = WordTokenizer::new(a.max_len);
    let ids: Vec<Vec<u32>> = captions.iter().map(|c| tok.tokenize(c)).collect::<Result<_, _>>()?;
    let dict = match &a.dict {
        Some(p) => EmbeddingDict::load(p)?,
        None => build_embedding_dict(&unique_ids(ids.iter().map(Vec::as_slice)), a.dim, a.scale, a.seed)?,
    };
    if let Some(p) = &a.dict_out {
        dict.save(p)?;
    }
    let dim = dict.dim;
    let kind = match a.kind {
        Kind::Rte => EncoderKind::Rte,
        Kind::RtePos => EncoderKind::RtePos,
    };
    let encoder = Encoder::with_pos_scale(dict, kind, a.max_len, Some(PAD_ID), a.pos_scale)?;

    let mut data = Vec::with_capacity(ids.len() * a.max_len * dim);
    for row in &ids {
        data.extend(encoder.encode(row)?.data);
    }
    let t = Tensor::new(vec![ids.len(), a.max_len, dim], data)?;
    files::save_tensor(&a.out, &t)?;

    let spec = caption_groups(&tok)?;
    let rows = captions
        .into_iter()
        .zip(ids)
        .map(|(caption, ids)| {
            let groups = token_group_masks(&ids, &spec)?.groups;
            Ok(TokenRow { caption, ids, groups })
        })
        .collect::<Result<Vec<_>>>()?;
    let words = tok.all_ids().iter().map(|&i| tok.word(i).unwrap_or_default().to_string()).collect();
    let file = TokenFile {
        kind: match a.kind {
            Kind::Rte => "rte",
            Kind::RtePos => "rte_pos",
        },
        max_len: a.max_len,
        words,
        rows,
    };
    files::write_json(&tokens_path(&a.out), &file)?;
    info!(captions = file.rows.len(), dim, out = %a.out.display(), "encoded");
    Ok(())
}
