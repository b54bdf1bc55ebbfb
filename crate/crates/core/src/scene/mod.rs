//! Two-object scene sampling, occlusion detection and relation annotation.

pub mod caption;
pub mod dataset;
pub mod render;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{relation_from_offsets, Color, RelationLabel, ShapeKind};

pub use caption::{format_caption, make_caption, parse_caption, paraphrases, Caption, ParsedCaption};
pub use dataset::{generate_dataset, DatasetSummary, ImageFormat, LabelRecord};
pub use render::{render_scene, shape_contains, BACKGROUND, BLUE, RED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OcclusionMode {
    /// Positions are sampled once; overlapping pairs become in_front/behind.
    Allow,
    /// Positions are resampled until the pair does not occlude.
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub canvas: u32,
    pub radius: u32,
    pub occlusion_mode: OcclusionMode,
    pub color_drop_prob: f64,
    pub relation_tolerance: f64,
    pub occlusion_threshold: f64,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            canvas: 128,
            radius: 16,
            occlusion_mode: OcclusionMode::Reject,
            color_drop_prob: 0.5,
            relation_tolerance: 5.0,
            occlusion_threshold: 0.05,
            max_attempts: 1000,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.color_drop_prob) {
            return Err(Error::Input(format!(
                "color_drop_prob {} outside [0, 1]",
                self.color_drop_prob
            )));
        }
        if !(self.occlusion_threshold > 0.0 && self.occlusion_threshold < 1.0) {
            return Err(Error::Input(format!(
                "occlusion_threshold {} outside (0, 1)",
                self.occlusion_threshold
            )));
        }
        if self.radius == 0 || 2 * self.radius + 3 > self.canvas {
            return Err(Error::Input(format!(
                "radius {} does not fit a {} px canvas",
                self.radius, self.canvas
            )));
        }
        if self.max_attempts == 0 {
            return Err(Error::Input("max_attempts must be positive".into()));
        }
        Ok(())
    }

    /// Inclusive coordinate range `[r + 1, canvas - r - 2]`.
    pub fn position_range(&self) -> (i32, i32) {
        let r = self.radius as i32;
        (r + 1, self.canvas as i32 - r - 2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape1: ShapeKind,
    pub shape2: ShapeKind,
    pub color1: Color,
    pub color2: Color,
    pub pos1: (i32, i32),
    pub pos2: (i32, i32),
    pub radius: u32,
    pub canvas: u32,
    pub shape1_on_top: bool,
    pub occluding: bool,
    pub overlap_ratio: f64,
    pub relation: RelationLabel,
    pub caption: String,
    pub paraphrase: usize,
    pub color1_dropped: bool,
    pub color2_dropped: bool,
}

impl SceneSpec {
    pub fn offsets(&self) -> (i32, i32) {
        (self.pos1.0 - self.pos2.0, self.pos1.1 - self.pos2.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occlusion {
    pub occluding: bool,
    pub overlap_ratio: f64,
}

/// Overlap of the `[x - r, x + r] × [y - r, y + r]` boxes, normalized by the
/// smaller box area. Occluding iff the ratio exceeds `threshold`.
pub fn detect_occlusion(pos1: (i32, i32), pos2: (i32, i32), radius: u32, threshold: f64) -> Occlusion {
    let side = 2.0 * radius as f64;
    let ox = (side - (pos1.0 - pos2.0).abs() as f64).max(0.0);
    let oy = (side - (pos1.1 - pos2.1).abs() as f64).max(0.0);
    let overlap_ratio = (ox * oy) / (side * side);
    Occlusion {
        occluding: overlap_ratio > threshold,
        overlap_ratio,
    }
}

/// Canonical relation for a non-occluding pair (shape1 relative to shape2).
pub fn annotate_relation(pos1: (i32, i32), pos2: (i32, i32), tol: f64) -> RelationLabel {
    relation_from_offsets((pos1.0 - pos2.0) as f64, (pos1.1 - pos2.1) as f64, tol)
}

/// Independent generator stream for sample `index` of a run seeded by `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn sample_scene<R: Rng + ?Sized>(config: &GenConfig, rng: &mut R) -> Result<SceneSpec> {
    config.validate()?;
    let mut pool = ShapeKind::ALL.to_vec();
    pool.shuffle(rng);
    let (shape1, shape2) = (pool[0], pool[1]);

    let (lo, hi) = config.position_range();
    let draw = |rng: &mut R| ((rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)), (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)));

    let (mut pos1, mut pos2) = draw(rng);
    let mut occ = detect_occlusion(pos1, pos2, config.radius, config.occlusion_threshold);
    if config.occlusion_mode == OcclusionMode::Reject {
        let mut attempts = 1;
        while occ.occluding {
            if attempts >= config.max_attempts {
                return Err(Error::Generation(format!(
                    "no non-occluding placement after {attempts} attempts"
                )));
            }
            (pos1, pos2) = draw(rng);
            occ = detect_occlusion(pos1, pos2, config.radius, config.occlusion_threshold);
            attempts += 1;
        }
    }
    let shape1_on_top = rng.gen_bool(0.5);

    let relation = if occ.occluding {
        if shape1_on_top {
            RelationLabel::InFront
        } else {
            RelationLabel::Behind
        }
    } else {
        annotate_relation(pos1, pos2, config.relation_tolerance)
    };

    let mut spec = SceneSpec {
        shape1,
        shape2,
        color1: Color::Red,
        color2: Color::Blue,
        pos1,
        pos2,
        radius: config.radius,
        canvas: config.canvas,
        shape1_on_top,
        occluding: occ.occluding,
        overlap_ratio: occ.overlap_ratio,
        relation,
        caption: String::new(),
        paraphrase: 0,
        color1_dropped: false,
        color2_dropped: false,
    };
    let caption = make_caption(&spec, rng, config.color_drop_prob);
    spec.caption = caption.text;
    spec.paraphrase = caption.paraphrase;
    spec.color1_dropped = caption.color1_dropped;
    spec.color2_dropped = caption.color2_dropped;
    Ok(spec)
}

/// Sample `index` of the run described by `config` (pure in `config.seed` and `index`).
pub fn sample_indexed(config: &GenConfig, index: u64) -> Result<SceneSpec> {
    let mut rng = sample_rng(config.seed, index);
    sample_scene(config, &mut rng)
}
