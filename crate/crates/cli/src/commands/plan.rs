use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{ArgGroup, Args};
use tracing::info;

use relcirc_core::edit::{
    emit_plan_json, parse_plan_json, validate_plan, HeadRef, Intervention, InterventionPlan, ModelGeometry,
    DEFAULT_DESTINATION,
};

use crate::error::{CliError, Result};
use crate::files;

/// `L2H8` or `L2` (every head).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Site {
    pub layer: usize,
    pub head: Option<usize>,
}

impl FromStr for Site {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let bad = || format!("expected L<layer> or L<layer>H<head>, got {s:?}");
        let rest = s.strip_prefix(['L', 'l']).ok_or_else(bad)?;
        let (l, h) = match rest.split_once(['H', 'h']) {
            Some((l, h)) => (l, Some(h)),
            None => (rest, None),
        };
        Ok(Self {
            layer: l.parse().map_err(|_| bad())?,
            head: h.map(|h| h.parse().map_err(|_| bad())).transpose()?,
        })
    }
}

fn parse_tokens(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| format!("bad token index {t:?}")))
        .collect()
}

/// `SITE:TOKENS`, e.g. `L2H8:3,4`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadMask {
    pub site: Site,
    pub tokens: Vec<usize>,
}

impl FromStr for HeadMask {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (site, toks) = s.split_once(':').ok_or_else(|| format!("expected SITE:TOKENS, got {s:?}"))?;
        Ok(Self {
            site: site.parse()?,
            tokens: parse_tokens(toks)?,
        })
    }
}

/// `TOKENS` (every layer) or `SITE:TOKENS`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMask {
    pub site: Option<Site>,
    pub tokens: Vec<usize>,
}

impl FromStr for TokenMask {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.split_once(':') {
            Some((site, toks)) => Ok(Self {
                site: Some(site.parse()?),
                tokens: parse_tokens(toks)?,
            }),
            None => Ok(Self {
                site: None,
                tokens: parse_tokens(s)?,
            }),
        }
    }
}

/// `SOURCE>DEST[:TOKENS]`, e.g. `L1H2>L5:3,4`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Injection {
    pub source: HeadRef,
    pub dest: Site,
    pub tokens: Vec<usize>,
}

impl FromStr for Injection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (src, rest) = s.split_once('>').ok_or_else(|| format!("expected SOURCE>DEST[:TOKENS], got {s:?}"))?;
        let src: Site = src.parse()?;
        let head = src.head.ok_or_else(|| format!("injection source needs a head, got {s:?}"))?;
        let (dest, tokens) = match rest.split_once(':') {
            Some((d, t)) => (d.parse()?, parse_tokens(t)?),
            None => (rest.parse()?, Vec::new()),
        };
        Ok(Self {
            source: HeadRef { layer: src.layer, head },
            dest,
            tokens,
        })
    }
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["input", "layers"])))]
pub struct PlanArgs {
    /// Existing plan JSON to validate and canonicalize
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long, requires_all = ["heads", "text_tokens", "image_tokens"], conflicts_with = "input")]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub text_tokens: Option<usize>,
    #[arg(long)]
    pub image_tokens: Option<usize>,
    /// Zero attention to tokens at one site, e.g. `L2H8:3,4` or `L2:3`
    #[arg(long = "mask-head")]
    pub mask_heads: Vec<HeadMask>,
    /// Remove tokens from cross-attention, e.g. `3,4` (all layers) or `L2:3,4`
    #[arg(long = "mask-token")]
    pub mask_tokens: Vec<TokenMask>,
    /// Inject a head's value-output downstream, e.g. `L1H2>L5:3,4`
    #[arg(long = "inject")]
    pub injections: Vec<Injection>,
    /// Injection target inside the destination layer
    #[arg(long, default_value = DEFAULT_DESTINATION)]
    pub destination: String,
    /// Only validate; print `ok` or fail with the violations
    #[arg(long)]
    pub check: bool,
    /// Output JSON (default: stdout)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn build(a: &PlanArgs) -> InterventionPlan {
    let geometry = ModelGeometry {
        layers: a.layers.unwrap_or_default(),
        heads: a.heads.unwrap_or_default(),
        text_tokens: a.text_tokens.unwrap_or_default(),
        image_tokens: a.image_tokens.unwrap_or_default(),
    };
    let mut interventions = Vec::new();
    for m in &a.mask_heads {
        interventions.push(Intervention::MaskAttentionToTokens {
            layer: m.site.layer,
            head: m.site.head,
            text_token_indices: m.tokens.clone(),
        });
    }
    for m in &a.mask_tokens {
        interventions.push(Intervention::MaskTextToken {
            layer: m.site.map(|s| s.layer),
            head: m.site.and_then(|s| s.head),
            text_token_indices: m.tokens.clone(),
        });
    }
    for i in &a.injections {
        interventions.push(Intervention::InjectVo {
            layer: i.dest.layer,
            head: i.dest.head,
            text_token_indices: i.tokens.clone(),
            source: i.source,
            destination: a.destination.clone(),
        });
    }
    InterventionPlan {
        geometry,
        interventions,
    }
}

pub fn run(a: PlanArgs) -> Result<()> {
    let plan = match &a.input {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            parse_plan_json(&text)?
        }
        None => build(&a),
    };
    if a.check {
        validate_plan(&plan)?;
        return files::emit(a.out.as_deref(), "ok\n");
    }
    let json = emit_plan_json(&plan)?;
    info!(interventions = plan.interventions.len(), "plan emitted");
    files::emit(a.out.as_deref(), &json)
}
