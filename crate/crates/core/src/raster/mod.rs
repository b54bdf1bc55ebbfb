//! Image → object detections → scene-query metrics.
//!
//! Each RGB channel is thresholded independently, so pure red and pure blue
//! objects land in separate masks even where they touch.

pub mod contour;
pub mod eval;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::geometry::ShapeKind;

pub use contour::{classify_polygon, DP_EPSILON_FRACTION};
pub use eval::{
    aggregate_metrics, evaluate_scene, loose_relation_check, EvalParams, EvalResult, MetricsSummary, SceneQuery,
    METRICS_COLUMNS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterParams {
    /// Channel values strictly above this are foreground.
    pub intensity_threshold: u8,
    /// Components with fewer pixels are discarded.
    pub min_area: usize,
    /// Distance from 0/255 tolerated when tagging red/blue.
    pub color_margin: f64,
    pub dp_epsilon_fraction: f64,
}

impl Default for RasterParams {
    fn default() -> Self {
        Self {
            intensity_threshold: 180,
            min_area: 100,
            color_margin: 25.0,
            dp_epsilon_fraction: DP_EPSILON_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub shape: ShapeKind,
    /// Inclusive pixel bounds `(x0, y0, x1, y1)`.
    pub bbox: (u32, u32, u32, u32),
    /// [`Detection::centroid`] rounded to the pixel grid.
    pub center: (f64, f64),
    /// Mean of pixel centers `(x + 0.5, y + 0.5)`.
    pub centroid: (f64, f64),
    pub area: usize,
    pub mean_rgb: [f64; 3],
    pub is_red: bool,
    pub is_blue: bool,
    pub channel: usize,
    #[serde(skip)]
    pub pixels: Vec<(u32, u32)>,
}

pub fn parse_objects(image: &RgbImage, params: &RasterParams) -> Vec<Detection> {
    parse_objects_in_order(image, params, [0, 1, 2])
}

pub(crate) fn parse_objects_in_order(image: &RgbImage, params: &RasterParams, channels: [usize; 3]) -> Vec<Detection> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut out = Vec::new();
    for channel in channels {
        let mut mask = contour::BinaryMask::new(w, h);
        for (x, y, p) in image.enumerate_pixels() {
            if p.0[channel] > params.intensity_threshold {
                mask.set(x as usize, y as usize, true);
            }
        }
        for comp in contour::connected_components(&mask) {
            if comp.len() < params.min_area {
                continue;
            }
            let boundary: Vec<(f64, f64)> = contour::trace_boundary(&mask, comp[0])
                .into_iter()
                .map(|(x, y)| (x as f64, y as f64))
                .collect();
            let Ok(shape) = classify_polygon(&boundary, params.dp_epsilon_fraction) else {
                continue;
            };
            out.push(describe(image, channel, shape, comp, params));
        }
    }
    out.sort_by(|a, b| {
        (a.bbox.1, a.bbox.0, a.channel, a.bbox.3, a.bbox.2).cmp(&(b.bbox.1, b.bbox.0, b.channel, b.bbox.3, b.bbox.2))
    });
    out
}

fn describe(image: &RgbImage, channel: usize, shape: ShapeKind, comp: Vec<(usize, usize)>, params: &RasterParams) -> Detection {
    let n = comp.len() as f64;
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    let (mut sx, mut sy) = (0.0, 0.0);
    let mut rgb = [0.0f64; 3];
    let mut pixels = Vec::with_capacity(comp.len());
    for (x, y) in comp {
        let (x, y) = (x as u32, y as u32);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
        sx += x as f64 + 0.5;
        sy += y as f64 + 0.5;
        let p = image.get_pixel(x, y).0;
        for c in 0..3 {
            rgb[c] += p[c] as f64;
        }
        pixels.push((x, y));
    }
    let mean_rgb = rgb.map(|v| v / n);
    let hi = 255.0 - params.color_margin;
    let lo = params.color_margin;
    let is_red = mean_rgb[0] >= hi && mean_rgb[1] <= lo && mean_rgb[2] <= lo;
    let is_blue = mean_rgb[2] >= hi && mean_rgb[0] <= lo && mean_rgb[1] <= lo;
    Detection {
        shape,
        bbox: (x0, y0, x1, y1),
        center: ((sx / n).round(), (sy / n).round()),
        centroid: (sx / n, sy / n),
        area: pixels.len(),
        mean_rgb,
        is_red,
        is_blue,
        channel,
        pixels,
    }
}
