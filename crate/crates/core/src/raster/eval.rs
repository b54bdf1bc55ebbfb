use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{relation_from_offsets, Color, RelationLabel, ShapeKind, RELATION_TOLERANCE};
use crate::scene::SceneSpec;

use super::Detection;

/// Column set of the model-comparison summary table. `sp rel` is the loose
/// relation score and `sp rel+` the strict one.
pub const METRICS_COLUMNS: [&str; 9] = [
    "model name",
    "template",
    "shape",
    "color",
    "bind",
    "sp rel",
    "sp rel+",
    "Dx",
    "Dy",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub relation_tolerance: f64,
    pub loose_threshold: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            relation_tolerance: RELATION_TOLERANCE,
            loose_threshold: 8.0,
        }
    }
}

/// Parametric description of the intended scene. Only planar relations are
/// scoreable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawQuery")]
pub struct SceneQuery {
    pub shape1: ShapeKind,
    pub shape2: ShapeKind,
    pub color1: Option<Color>,
    pub color2: Option<Color>,
    #[serde(rename = "spatial_relationship")]
    pub relation: RelationLabel,
}

#[derive(Deserialize)]
struct RawQuery {
    shape1: ShapeKind,
    shape2: ShapeKind,
    #[serde(default)]
    color1: Option<Color>,
    #[serde(default)]
    color2: Option<Color>,
    spatial_relationship: RelationLabel,
}

impl TryFrom<RawQuery> for SceneQuery {
    type Error = Error;

    fn try_from(raw: RawQuery) -> Result<Self> {
        SceneQuery::new(raw.shape1, raw.shape2, raw.color1, raw.color2, raw.spatial_relationship)
    }
}

impl SceneQuery {
    pub fn new(
        shape1: ShapeKind,
        shape2: ShapeKind,
        color1: Option<Color>,
        color2: Option<Color>,
        relation: RelationLabel,
    ) -> Result<Self> {
        if !relation.is_planar() {
            return Err(Error::UnsupportedRelation(relation.name().into()));
        }
        Ok(Self {
            shape1,
            shape2,
            color1,
            color2,
            relation,
        })
    }

    /// Query carrying the full ground truth of a generated scene (both colors set).
    pub fn from_spec(spec: &SceneSpec) -> Result<Self> {
        Self::new(spec.shape1, spec.shape2, Some(spec.color1), Some(spec.color2), spec.relation)
    }

    /// Query restricted to what the caption states (dropped colors unspecified).
    pub fn from_caption_of(spec: &SceneSpec) -> Result<Self> {
        Self::new(
            spec.shape1,
            spec.shape2,
            (!spec.color1_dropped).then_some(spec.color1),
            (!spec.color2_dropped).then_some(spec.color2),
            spec.relation,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub shape: bool,
    pub color: bool,
    pub exist_binding: bool,
    pub unique_binding: bool,
    pub spatial_relationship: bool,
    pub spatial_relationship_loose: bool,
    pub overall: bool,
    pub overall_loose: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dx: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub center1: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub center2: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub observed_relation: Option<RelationLabel>,
}

/// Relaxed relation test: each named direction must exceed `threshold`;
/// cardinal relations leave the other axis free.
pub fn loose_relation_check(dx: f64, dy: f64, relation: RelationLabel, threshold: f64) -> Result<bool> {
    use RelationLabel::*;
    if threshold <= 0.0 {
        return Err(Error::Input(format!("loose threshold must be positive, got {threshold}")));
    }
    let t = threshold;
    Ok(match relation {
        Above => dy < -t,
        Below => dy > t,
        Left => dx < -t,
        Right => dx > t,
        UpperLeft => dx < -t && dy < -t,
        UpperRight => dx > t && dy < -t,
        LowerLeft => dx < -t && dy > t,
        LowerRight => dx > t && dy > t,
        InFront | Behind => return Err(Error::UnsupportedRelation(relation.name().into())),
    })
}

fn color_matches(det: &Detection, color: Option<Color>) -> bool {
    match color {
        None => true,
        Some(Color::Red) => det.is_red,
        Some(Color::Blue) => det.is_blue,
    }
}

fn has_color(det: &Detection, color: Color) -> bool {
    color_matches(det, Some(color))
}

pub fn evaluate_scene(detections: &[Detection], query: &SceneQuery, params: &EvalParams) -> EvalResult {
    let o1: Vec<&Detection> = detections
        .iter()
        .filter(|d| d.shape == query.shape1 && color_matches(d, query.color1))
        .collect();
    let o2: Vec<&Detection> = detections
        .iter()
        .filter(|d| d.shape == query.shape2 && color_matches(d, query.color2))
        .collect();

    let count_shape = |s: ShapeKind| detections.iter().filter(|d| d.shape == s).count();
    let shape = if query.shape1 == query.shape2 {
        count_shape(query.shape1) >= 2
    } else {
        count_shape(query.shape1) >= 1 && count_shape(query.shape2) >= 1
    };

    let count_color = |c: Color| detections.iter().filter(|d| has_color(d, c)).count();
    let color = match (query.color1, query.color2) {
        (Some(a), Some(b)) if a == b => count_color(a) >= 2,
        (a, b) => a.is_none_or(|c| count_color(c) >= 1) && b.is_none_or(|c| count_color(c) >= 1),
    };

    let exist_binding = !o1.is_empty() && !o2.is_empty();
    let unique_binding = o1.len() == 1 && o2.len() == 1;

    let mut result = EvalResult {
        shape,
        color,
        exist_binding,
        unique_binding,
        spatial_relationship: false,
        spatial_relationship_loose: false,
        overall: false,
        overall_loose: false,
        dx: None,
        dy: None,
        center1: None,
        center2: None,
        observed_relation: None,
    };
    if unique_binding {
        let (c1, c2) = (o1[0].center, o2[0].center);
        let (dx, dy) = (c1.0 - c2.0, c1.1 - c2.1);
        let observed = relation_from_offsets(dx, dy, params.relation_tolerance);
        result.dx = Some(dx);
        result.dy = Some(dy);
        result.center1 = Some(c1);
        result.center2 = Some(c2);
        result.observed_relation = Some(observed);
        result.spatial_relationship = observed == query.relation;
        result.spatial_relationship_loose =
            loose_relation_check(dx, dy, query.relation, params.loose_threshold).expect("planar relation");
    }
    let base = result.shape && result.color && result.unique_binding;
    result.overall = base && result.spatial_relationship;
    result.overall_loose = base && result.spatial_relationship_loose;
    result
}

/// Mean of every boolean metric, plus mean offsets over uniquely bound samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub n: usize,
    pub shape: f64,
    pub color: f64,
    pub exist_binding: f64,
    pub unique_binding: f64,
    pub spatial_relationship: f64,
    pub spatial_relationship_loose: f64,
    pub overall: f64,
    pub overall_loose: f64,
    pub n_unique: usize,
    pub dx: Option<f64>,
    pub dy: Option<f64>,
}

impl MetricsSummary {
    /// One row in [`METRICS_COLUMNS`] order.
    pub fn metrics_row(&self, model: &str, template: &str) -> Vec<String> {
        let off = |v: Option<f64>| v.map(|v| format!("{v:.1}")).unwrap_or_default();
        vec![
            model.to_string(),
            template.to_string(),
            format!("{:.3}", self.shape),
            format!("{:.3}", self.color),
            format!("{:.3}", self.unique_binding),
            format!("{:.3}", self.spatial_relationship_loose),
            format!("{:.3}", self.spatial_relationship),
            off(self.dx),
            off(self.dy),
        ]
    }
}

pub fn aggregate_metrics(results: &[EvalResult]) -> Result<MetricsSummary> {
    if results.is_empty() {
        return Err(Error::Aggregation("no results to aggregate".into()));
    }
    let n = results.len();
    let mean = |f: fn(&EvalResult) -> bool| results.iter().filter(|r| f(r)).count() as f64 / n as f64;
    let unique: Vec<&EvalResult> = results.iter().filter(|r| r.dx.is_some()).collect();
    let n_unique = unique.len();
    let (dx, dy) = if n_unique == 0 {
        (None, None)
    } else {
        (
            Some(unique.iter().map(|r| r.dx.unwrap()).sum::<f64>() / n_unique as f64),
            Some(unique.iter().map(|r| r.dy.unwrap()).sum::<f64>() / n_unique as f64),
        )
    };
    Ok(MetricsSummary {
        n,
        shape: mean(|r| r.shape),
        color: mean(|r| r.color),
        exist_binding: mean(|r| r.exist_binding),
        unique_binding: mean(|r| r.unique_binding),
        spatial_relationship: mean(|r| r.spatial_relationship),
        spatial_relationship_loose: mean(|r| r.spatial_relationship_loose),
        overall: mean(|r| r.overall),
        overall_loose: mean(|r| r.overall_loose),
        n_unique,
        dx,
        dy,
    })
}
