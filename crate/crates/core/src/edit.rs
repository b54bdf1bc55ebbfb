//! Factor-vector arithmetic on prompt embeddings and declarative intervention
//! plans for a model runtime to execute.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::varpart::EffectVectors;

pub const DEFAULT_ALPHA: f64 = 2.0;
pub const DEFAULT_DESTINATION: &str = "image_token_positional_embeddings";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorLevel {
    pub factor: String,
    pub level: String,
}

impl FactorLevel {
    pub fn new(factor: impl Into<String>, level: impl Into<String>) -> Self {
        Self {
            factor: factor.into(),
            level: level.into(),
        }
    }
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

/// Replace one level's effect with a scaled other level at one token row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub token_index: usize,
    pub remove: FactorLevel,
    pub add: FactorLevel,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn lookup<'a>(effects: &'a EffectVectors, fl: &FactorLevel) -> Result<&'a [f64]> {
    effects
        .get(&fl.factor, &fl.level)
        .ok_or_else(|| Error::Plan(format!("no effect vector for {}={}", fl.factor, fl.level)))
}

/// `−β̂_remove + α·β̂_add`.
pub fn edit_delta(effects: &EffectVectors, plan: &EditPlan) -> Result<Vec<f64>> {
    let rm = lookup(effects, &plan.remove)?;
    let add = lookup(effects, &plan.add)?;
    Ok(rm.iter().zip(add).map(|(r, a)| -r + plan.alpha * a).collect())
}

/// Returns a copy of the `[L, D]` embedding with row `token_index` shifted by
/// [`edit_delta`]. The row is not re-normalized.
pub fn apply_edit(embedding: &DMatrix<f64>, effects: &EffectVectors, plan: &EditPlan) -> Result<DMatrix<f64>> {
    let (l, d) = embedding.shape();
    if plan.token_index >= l {
        return Err(Error::Plan(format!("token index {} out of range for {l} tokens", plan.token_index)));
    }
    if effects.dim != d {
        return Err(Error::Plan(format!(
            "embedding width {d} does not match effect dimension {}",
            effects.dim
        )));
    }
    let delta = edit_delta(effects, plan)?;
    let mut out = embedding.clone();
    for (j, v) in delta.iter().enumerate() {
        out[(plan.token_index, j)] += v;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelGeometry {
    pub layers: usize,
    pub heads: usize,
    /// Text tokens `W`.
    pub text_tokens: usize,
    /// Image tokens `S`.
    pub image_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadRef {
    pub layer: usize,
    pub head: usize,
}

/// One manipulation. `head: None` means every head of the layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Intervention {
    /// Zero the listed text columns of one layer's cross-attention.
    MaskAttentionToTokens {
        layer: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        head: Option<usize>,
        text_token_indices: Vec<usize>,
    },
    /// Remove the listed tokens from cross-attention; `layer: None` means all layers.
    MaskTextToken {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        layer: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        head: Option<usize>,
        text_token_indices: Vec<usize>,
    },
    /// Add the source head's value-output into the destination layer.
    InjectVo {
        layer: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        head: Option<usize>,
        #[serde(default)]
        text_token_indices: Vec<usize>,
        source: HeadRef,
        destination: String,
    },
}

impl Intervention {
    pub fn kind(&self) -> &'static str {
        match self {
            Intervention::MaskAttentionToTokens { .. } => "mask_attention_to_tokens",
            Intervention::MaskTextToken { .. } => "mask_text_token",
            Intervention::InjectVo { .. } => "inject_vo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionPlan {
    pub geometry: ModelGeometry,
    pub interventions: Vec<Intervention>,
}

/// A single failed check, tagged with the intervention's position in the plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum PlanViolation {
    EmptyGeometry,
    LayerOutOfRange { item: usize, layer: usize, layers: usize },
    HeadOutOfRange { item: usize, head: usize, heads: usize },
    TokenOutOfRange { item: usize, token: usize, tokens: usize },
    EmptyTokenList { item: usize },
    DuplicateToken { item: usize, token: usize },
    InjectionOrder { item: usize, source_layer: usize, destination_layer: usize },
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanViolation::EmptyGeometry => write!(f, "geometry has a zero-sized axis"),
            PlanViolation::LayerOutOfRange { item, layer, layers } => {
                write!(f, "#{item}: layer {layer} out of range (L = {layers})")
            }
            PlanViolation::HeadOutOfRange { item, head, heads } => {
                write!(f, "#{item}: head {head} out of range (H = {heads})")
            }
            PlanViolation::TokenOutOfRange { item, token, tokens } => {
                write!(f, "#{item}: text token {token} out of range (W = {tokens})")
            }
            PlanViolation::EmptyTokenList { item } => write!(f, "#{item}: no text tokens listed"),
            PlanViolation::DuplicateToken { item, token } => write!(f, "#{item}: text token {token} listed twice"),
            PlanViolation::InjectionOrder {
                item,
                source_layer,
                destination_layer,
            } => write!(
                f,
                "#{item}: source layer {source_layer} must precede destination layer {destination_layer}"
            ),
        }
    }
}

/// Every violation in the plan; empty when valid.
pub fn plan_violations(plan: &InterventionPlan) -> Vec<PlanViolation> {
    let g = plan.geometry;
    let mut out = Vec::new();
    if g.layers == 0 || g.heads == 0 || g.text_tokens == 0 || g.image_tokens == 0 {
        out.push(PlanViolation::EmptyGeometry);
    }
    for (item, iv) in plan.interventions.iter().enumerate() {
        let layer_check = |layer: usize, out: &mut Vec<PlanViolation>| {
            if layer >= g.layers {
                out.push(PlanViolation::LayerOutOfRange {
                    item,
                    layer,
                    layers: g.layers,
                });
            }
        };
        let head_check = |head: usize, out: &mut Vec<PlanViolation>| {
            if head >= g.heads {
                out.push(PlanViolation::HeadOutOfRange {
                    item,
                    head,
                    heads: g.heads,
                });
            }
        };
        let token_check = |tokens: &[usize], required: bool, out: &mut Vec<PlanViolation>| {
            if required && tokens.is_empty() {
                out.push(PlanViolation::EmptyTokenList { item });
            }
            let mut seen = std::collections::BTreeSet::new();
            for &token in tokens {
                if token >= g.text_tokens {
                    out.push(PlanViolation::TokenOutOfRange {
                        item,
                        token,
                        tokens: g.text_tokens,
                    });
                }
                if !seen.insert(token) {
                    out.push(PlanViolation::DuplicateToken { item, token });
                }
            }
        };
        match iv {
            Intervention::MaskAttentionToTokens {
                layer,
                head,
                text_token_indices,
            } => {
                layer_check(*layer, &mut out);
                if let Some(h) = head {
                    head_check(*h, &mut out);
                }
                token_check(text_token_indices, true, &mut out);
            }
            Intervention::MaskTextToken {
                layer,
                head,
                text_token_indices,
            } => {
                if let Some(l) = layer {
                    layer_check(*l, &mut out);
                }
                if let Some(h) = head {
                    head_check(*h, &mut out);
                }
                token_check(text_token_indices, true, &mut out);
            }
            Intervention::InjectVo {
                layer,
                head,
                text_token_indices,
                source,
                ..
            } => {
                layer_check(*layer, &mut out);
                layer_check(source.layer, &mut out);
                if let Some(h) = head {
                    head_check(*h, &mut out);
                }
                head_check(source.head, &mut out);
                token_check(text_token_indices, false, &mut out);
                if source.layer >= *layer {
                    out.push(PlanViolation::InjectionOrder {
                        item,
                        source_layer: source.layer,
                        destination_layer: *layer,
                    });
                }
            }
        }
    }
    out
}

pub fn validate_plan(plan: &InterventionPlan) -> Result<()> {
    let v = plan_violations(plan);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(v))
    }
}

/// Canonical JSON: keys sorted at every level, two-space indent, trailing newline.
pub fn emit_plan_json(plan: &InterventionPlan) -> Result<String> {
    validate_plan(plan)?;
    // serde_json::Value keeps object keys in a BTreeMap, which sorts them
    let value = serde_json::to_value(plan)?;
    let mut s = serde_json::to_string_pretty(&value)?;
    s.push('\n');
    Ok(s)
}

pub fn parse_plan_json(text: &str) -> Result<InterventionPlan> {
    let plan: InterventionPlan = serde_json::from_str(text)?;
    validate_plan(&plan)?;
    Ok(plan)
}
