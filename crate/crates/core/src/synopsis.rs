//! Cross-attention synopses.
//!
//! An attention dump has axes `layer, step, sample, head, img_tok, txt_tok`
//! with the sample axis holding `2N` entries: the first `N` are the
//! unconditional branch, the rest conditional. Sample `n` of either branch
//! uses image mask `n`.
//!
//! For an image mask `M_img` and a text mask `M_text` the per-sample score is
//! `Σ_ij A(i, j) · M_img(i) · M_text(j)`; it is averaged over samples whose
//! image mask is nonzero, per branch, giving `[L, T, H]` per branch.
//!
//! Two storage orders are accepted: layer-leading `[L, T, 2N, H, S, W]` and
//! sample-leading `[2N, L, T, H, S, W]`. Both keep each `(S, W)` block
//! contiguous, which is the unit of work. Block scores are computed in
//! parallel and summed in storage order, so streamed and in-memory results
//! are bit-identical.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ShapeKind;
use crate::raster::Detection;
use crate::tensor_io::{AxisMeta, Slab, Tensor, TensorReader};

pub const AXES_LAYER_LEADING: [&str; 6] = ["layer", "step", "sample", "head", "img_tok", "txt_tok"];
pub const AXES_SAMPLE_LEADING: [&str; 6] = ["sample", "layer", "step", "head", "img_tok", "txt_tok"];
/// Rows summing to 1 within this are accepted as is.
pub const ROW_TOL: f64 = 1e-3;
/// Rows within this (but outside [`ROW_TOL`]) are renormalized.
pub const ROW_RENORM_TOL: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnLayout {
    LayerLeading,
    SampleLeading,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnGeometry {
    pub layers: usize,
    pub steps: usize,
    /// Samples per branch (`N`).
    pub samples: usize,
    pub heads: usize,
    pub image_tokens: usize,
    pub text_tokens: usize,
    pub layout: AttnLayout,
}

impl AttnGeometry {
    /// Reads geometry from tensor dims. Without axis names the layout is
    /// layer-leading.
    pub fn from_dims(dims: &[usize], meta: Option<&AxisMeta>) -> Result<Self> {
        if dims.len() != 6 {
            return Err(Error::Input(format!("attention tensor must have 6 axes, got {dims:?}")));
        }
        let layout = match meta.filter(|m| !m.axis_names.is_empty()) {
            None => AttnLayout::LayerLeading,
            Some(m) => {
                m.validate(6)?;
                if m.axis_names == AXES_LAYER_LEADING {
                    AttnLayout::LayerLeading
                } else if m.axis_names == AXES_SAMPLE_LEADING {
                    AttnLayout::SampleLeading
                } else {
                    return Err(Error::Unsupported(format!(
                        "attention axis order {:?}; expected {:?} or {:?}",
                        m.axis_names, AXES_LAYER_LEADING, AXES_SAMPLE_LEADING
                    )));
                }
            }
        };
        let (l, t, s2, h) = match layout {
            AttnLayout::LayerLeading => (dims[0], dims[1], dims[2], dims[3]),
            AttnLayout::SampleLeading => (dims[1], dims[2], dims[0], dims[3]),
        };
        if s2 % 2 != 0 {
            return Err(Error::Input(format!("sample axis holds {s2} entries, expected 2N")));
        }
        if let Some(split) = meta.and_then(|m| m.branch_split) {
            if split * 2 != s2 {
                return Err(Error::Input(format!(
                    "branch_split {split} does not halve the sample axis of {s2}"
                )));
            }
        }
        Ok(Self {
            layers: l,
            steps: t,
            samples: s2 / 2,
            heads: h,
            image_tokens: dims[4],
            text_tokens: dims[5],
            layout,
        })
    }

    pub fn dims(&self) -> Vec<usize> {
        let (l, t, s2, h) = (self.layers, self.steps, 2 * self.samples, self.heads);
        match self.layout {
            AttnLayout::LayerLeading => vec![l, t, s2, h, self.image_tokens, self.text_tokens],
            AttnLayout::SampleLeading => vec![s2, l, t, h, self.image_tokens, self.text_tokens],
        }
    }

    pub fn axis_meta(&self) -> AxisMeta {
        let names = match self.layout {
            AttnLayout::LayerLeading => AXES_LAYER_LEADING,
            AttnLayout::SampleLeading => AXES_SAMPLE_LEADING,
        };
        AxisMeta {
            axis_names: names.iter().map(|s| s.to_string()).collect(),
            branch_split: Some(self.samples),
        }
    }

    fn block_len(&self) -> usize {
        self.image_tokens * self.text_tokens
    }

    fn blocks_per_lead(&self) -> usize {
        let d = self.dims();
        d[1] * d[2] * d[3]
    }

    /// `(layer, step, sample, head)` of the block at flat block index `b`.
    fn block_coords(&self, b: usize) -> (usize, usize, usize, usize) {
        let h = b % self.heads;
        let rest = b / self.heads;
        match self.layout {
            AttnLayout::LayerLeading => {
                let s = rest % (2 * self.samples);
                let rest = rest / (2 * self.samples);
                (rest / self.steps, rest % self.steps, s, h)
            }
            AttnLayout::SampleLeading => {
                let t = rest % self.steps;
                let rest = rest / self.steps;
                (rest % self.layers, t, rest / self.layers, h)
            }
        }
    }

    fn lth(&self, l: usize, t: usize, h: usize) -> usize {
        (l * self.steps + t) * self.heads + h
    }
}

/// Per-sample image-token masks. An all-zero mask excludes the sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMasks {
    pub image_tokens: usize,
    pub masks: Vec<Vec<f32>>,
}

impl ImageMasks {
    pub fn new(image_tokens: usize, masks: Vec<Vec<f32>>) -> Result<Self> {
        for (n, m) in masks.iter().enumerate() {
            if m.len() != image_tokens {
                return Err(Error::Input(format!(
                    "image mask {n} has {} entries, expected {image_tokens}",
                    m.len()
                )));
            }
            if m.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Input(format!("image mask {n} has negative or non-finite entries")));
            }
        }
        Ok(Self { image_tokens, masks })
    }

    /// The same mask for every sample.
    pub fn shared(mask: Vec<f32>, samples: usize) -> Result<Self> {
        let s = mask.len();
        Self::new(s, vec![mask; samples])
    }

    pub fn included(&self) -> usize {
        self.masks.iter().filter(|m| m.iter().any(|&v| v != 0.0)).count()
    }

    fn active(&self, n: usize) -> Option<&[f32]> {
        let m = &self.masks[n];
        m.iter().any(|&v| v != 0.0).then_some(m.as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskTarget {
    Shape(ShapeKind),
    Background,
}

impl MaskTarget {
    pub fn name(&self) -> &'static str {
        match self {
            MaskTarget::Shape(s) => s.name(),
            MaskTarget::Background => "background",
        }
    }

    pub const ALL: [MaskTarget; 4] = [
        MaskTarget::Shape(ShapeKind::Circle),
        MaskTarget::Shape(ShapeKind::Square),
        MaskTarget::Shape(ShapeKind::Triangle),
        MaskTarget::Background,
    ];
}

/// Average-pools a `width × height` binary mask onto a `grid.0 × grid.1`
/// token grid (row-major, `x` fastest) and normalizes it to sum 1. Returns
/// zeros for an empty mask.
pub fn pool_mask(bits: &[bool], width: usize, height: usize, grid: (usize, usize)) -> Result<Vec<f32>> {
    let (gx, gy) = grid;
    if gx == 0 || gy == 0 || width % gx != 0 || height % gy != 0 {
        return Err(Error::Input(format!("{width}×{height} mask does not tile into a {gx}×{gy} grid")));
    }
    if bits.len() != width * height {
        return Err(Error::Input(format!("mask has {} pixels, expected {}", bits.len(), width * height)));
    }
    let (cw, ch) = (width / gx, height / gy);
    let mut counts = vec![0usize; gx * gy];
    for y in 0..height {
        for x in 0..width {
            if bits[y * width + x] {
                counts[(y / ch) * gx + x / cw] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Ok(vec![0.0; gx * gy]);
    }
    Ok(counts.iter().map(|&c| (c as f64 / total as f64) as f32).collect())
}

/// Image-token mask of one target from parsed detections.
pub fn image_mask_from_detections(
    detections: &[Detection],
    canvas: (usize, usize),
    grid: (usize, usize),
    target: MaskTarget,
) -> Result<Vec<f32>> {
    let (w, h) = canvas;
    let mut bits = vec![false; w * h];
    let mark = |d: &Detection, bits: &mut Vec<bool>| {
        for &(x, y) in &d.pixels {
            if (x as usize) < w && (y as usize) < h {
                bits[y as usize * w + x as usize] = true;
            }
        }
    };
    match target {
        MaskTarget::Shape(shape) => {
            for d in detections.iter().filter(|d| d.shape == shape) {
                mark(d, &mut bits);
            }
        }
        MaskTarget::Background => {
            for d in detections {
                mark(d, &mut bits);
            }
            for b in bits.iter_mut() {
                *b = !*b;
            }
        }
    }
    pool_mask(&bits, w, h, grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowCheck {
    /// Use values as stored.
    Off,
    /// Reject negative or non-finite values and rows whose sum is off by more
    /// than [`ROW_RENORM_TOL`]; renormalize rows off by more than [`ROW_TOL`].
    Validate,
}

/// Every (image target, text group) pair to score in one pass.
#[derive(Debug, Clone)]
pub struct ScoreRequest {
    pub image: Vec<ImageMasks>,
    pub text: Vec<Vec<f32>>,
    pub row_check: RowCheck,
}

impl ScoreRequest {
    pub fn single(image: ImageMasks, text: Vec<f32>, row_check: RowCheck) -> Self {
        Self {
            image: vec![image],
            text: vec![text],
            row_check,
        }
    }

    fn check(&self, g: &AttnGeometry) -> Result<()> {
        if self.image.is_empty() || self.text.is_empty() {
            return Err(Error::Input("need at least one image mask set and one text mask".into()));
        }
        for m in &self.image {
            if m.image_tokens != g.image_tokens || m.masks.len() != g.samples {
                return Err(Error::Input(format!(
                    "image masks are {}×{}, attention expects {} samples × {} tokens",
                    m.masks.len(),
                    m.image_tokens,
                    g.samples,
                    g.image_tokens
                )));
            }
        }
        for t in &self.text {
            if t.len() != g.text_tokens {
                return Err(Error::Input(format!(
                    "text mask has {} entries, attention has {} text tokens",
                    t.len(),
                    g.text_tokens
                )));
            }
        }
        Ok(())
    }
}

/// Mean template scores for one (image, text) pair, `[L, T, H]` per branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchScores {
    pub layers: usize,
    pub steps: usize,
    pub heads: usize,
    pub included: usize,
    pub cond: Vec<f64>,
    pub uncond: Vec<f64>,
}

impl BranchScores {
    pub fn at(&self, branch: Branch, l: usize, t: usize, h: usize) -> f64 {
        let v = match branch {
            Branch::Cond => &self.cond,
            Branch::Uncond => &self.uncond,
        };
        v[(l * self.steps + t) * self.heads + h]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Cond,
    Uncond,
}

/// Scores for every pair of a [`ScoreRequest`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub geometry: AttnGeometry,
    n_text: usize,
    included: Vec<usize>,
    /// `[image][text][branch (0 = uncond)][L·T·H]` sums over samples.
    sums: Vec<f64>,
}

impl ScoreSet {
    pub fn included(&self, image: usize) -> usize {
        self.included[image]
    }

    pub fn pair(&self, image: usize, text: usize) -> Result<BranchScores> {
        let g = &self.geometry;
        let n = self.included[image];
        if n == 0 {
            return Err(Error::EmptyResult(format!(
                "image mask set {image} excludes every sample"
            )));
        }
        let lth = g.layers * g.steps * g.heads;
        let base = (image * self.n_text + text) * 2 * lth;
        let mean = |b: usize| -> Vec<f64> {
            self.sums[base + b * lth..base + (b + 1) * lth]
                .iter()
                .map(|s| s / n as f64)
                .collect()
        };
        Ok(BranchScores {
            layers: g.layers,
            steps: g.steps,
            heads: g.heads,
            included: n,
            uncond: mean(0),
            cond: mean(1),
        })
    }
}

/// Incremental scorer fed with leading-axis slabs in order.
pub struct ScoreAccumulator<'a> {
    geometry: AttnGeometry,
    request: &'a ScoreRequest,
    sums: Vec<f64>,
    next_lead: usize,
}

impl<'a> ScoreAccumulator<'a> {
    pub fn new(geometry: AttnGeometry, request: &'a ScoreRequest) -> Result<Self> {
        request.check(&geometry)?;
        let lth = geometry.layers * geometry.steps * geometry.heads;
        Ok(Self {
            geometry,
            request,
            sums: vec![0.0; request.image.len() * request.text.len() * 2 * lth],
            next_lead: 0,
        })
    }

    pub fn push_slab(&mut self, slab: &Slab) -> Result<()> {
        let g = self.geometry;
        let full = g.dims();
        if slab.dims[1..] != full[1..] || slab.start != self.next_lead {
            return Err(Error::Input(format!(
                "slab at {} with dims {:?} does not continue a {:?} tensor at {}",
                slab.start, slab.dims, full, self.next_lead
            )));
        }
        self.push_blocks(&slab.data, slab.start * g.blocks_per_lead())?;
        self.next_lead += slab.dims[0];
        Ok(())
    }

    fn push_blocks(&mut self, data: &[f32], first_block: usize) -> Result<()> {
        let g = self.geometry;
        let req = self.request;
        let bl = g.block_len();
        let (n_img, n_txt) = (req.image.len(), req.text.len());
        let per_block: Vec<Vec<f64>> = data
            .par_chunks(bl)
            .enumerate()
            .map(|(k, block)| {
                let coords = g.block_coords(first_block + k);
                let n = coords.2 % g.samples;
                let masks: Vec<Option<&[f32]>> = req.image.iter().map(|m| m.active(n)).collect();
                let mut out = vec![0.0; n_img * n_txt];
                if masks.iter().all(Option::is_none) {
                    return Ok(out);
                }
                score_block(block, &g, &req.text, &masks, req.row_check, coords, &mut out)?;
                Ok(out)
            })
            .collect::<Result<_>>()?;
        let lth = g.layers * g.steps * g.heads;
        for (k, scores) in per_block.iter().enumerate() {
            let (l, t, s, h) = g.block_coords(first_block + k);
            let branch = usize::from(s >= g.samples);
            let idx = g.lth(l, t, h);
            for (pair, v) in scores.iter().enumerate() {
                self.sums[(pair * 2 + branch) * lth + idx] += v;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<ScoreSet> {
        let lead = self.geometry.dims()[0];
        if self.next_lead != lead {
            return Err(Error::Input(format!(
                "accumulator saw {} of {lead} leading indices",
                self.next_lead
            )));
        }
        Ok(ScoreSet {
            geometry: self.geometry,
            n_text: self.request.text.len(),
            included: self.request.image.iter().map(ImageMasks::included).collect(),
            sums: self.sums,
        })
    }
}

fn score_block(
    block: &[f32],
    g: &AttnGeometry,
    text: &[Vec<f32>],
    masks: &[Option<&[f32]>],
    check: RowCheck,
    coords: (usize, usize, usize, usize),
    out: &mut [f64],
) -> Result<()> {
    let w = g.text_tokens;
    let n_txt = text.len();
    let mut v = vec![0.0f64; n_txt];
    for (i, row) in block.chunks_exact(w).enumerate() {
        let mut scale = 1.0;
        if check == RowCheck::Validate {
            let mut sum = 0.0f64;
            for &a in row {
                if !a.is_finite() || a < 0.0 {
                    return Err(row_error(coords, i, format!("entry {a} is negative or non-finite")));
                }
                sum += a as f64;
            }
            let dev = (sum - 1.0).abs();
            if dev > ROW_RENORM_TOL {
                return Err(row_error(coords, i, format!("row sums to {sum}")));
            }
            if dev > ROW_TOL {
                scale = 1.0 / sum;
            }
        }
        for (g_idx, t) in text.iter().enumerate() {
            v[g_idx] = row.iter().zip(t).map(|(&a, &m)| a as f64 * m as f64).sum::<f64>() * scale;
        }
        for (m_idx, mask) in masks.iter().enumerate() {
            if let Some(mask) = mask {
                let mi = mask[i] as f64;
                if mi != 0.0 {
                    for g_idx in 0..n_txt {
                        out[m_idx * n_txt + g_idx] += mi * v[g_idx];
                    }
                }
            }
        }
    }
    Ok(())
}

fn row_error(c: (usize, usize, usize, usize), i: usize, msg: String) -> Error {
    Error::AttentionRow(format!(
        "layer {} step {} sample {} head {} image token {i}: {msg}",
        c.0, c.1, c.2, c.3
    ))
}

/// Scores every requested pair over an in-memory tensor.
pub fn score_templates_multi(attn: &Tensor, geometry: &AttnGeometry, request: &ScoreRequest) -> Result<ScoreSet> {
    if attn.dims != geometry.dims() {
        return Err(Error::Input(format!(
            "tensor dims {:?} do not match geometry {:?}",
            attn.dims,
            geometry.dims()
        )));
    }
    let mut acc = ScoreAccumulator::new(*geometry, request)?;
    acc.push_blocks(&attn.data, 0)?;
    acc.next_lead = attn.dims[0];
    acc.finish()
}

/// Single-pair template scores over an in-memory tensor.
pub fn score_templates(
    attn: &Tensor,
    geometry: &AttnGeometry,
    image: &ImageMasks,
    text: &[f32],
    row_check: RowCheck,
) -> Result<BranchScores> {
    let req = ScoreRequest::single(image.clone(), text.to_vec(), row_check);
    score_templates_multi(attn, geometry, &req)?.pair(0, 0)
}

/// Scores every requested pair while streaming `path` in slabs of `chunk`
/// leading-axis indices. Geometry comes from the header and the optional
/// `.meta.json` sidecar.
pub fn score_templates_streamed(path: &Path, chunk: usize, request: &ScoreRequest) -> Result<ScoreSet> {
    let reader = TensorReader::open(path)?;
    let meta = AxisMeta::load(path)?;
    let geometry = AttnGeometry::from_dims(&reader.header().dims_usize(), meta.as_ref())?;
    let mut acc = ScoreAccumulator::new(geometry, request)?;
    for slab in reader.slabs(chunk)? {
        acc.push_slab(&slab?)?;
    }
    acc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionMode {
    MeanTime,
    MaxTime,
    /// Value at the step of maximum activation, plus that step.
    MaxStepSelect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynopsisResult {
    pub mode: ReductionMode,
    pub layers: usize,
    pub heads: usize,
    pub steps: usize,
    pub samples_used: usize,
    /// `[L, H]` row-major.
    pub cond: Vec<f64>,
    pub uncond: Vec<f64>,
    /// `[L, T, H]` row-major.
    pub per_step_cond: Vec<f64>,
    pub per_step_uncond: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub argmax_step_cond: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub argmax_step_uncond: Option<Vec<usize>>,
}

impl SynopsisResult {
    pub fn get(&self, branch: Branch, layer: usize, head: usize) -> f64 {
        let m = match branch {
            Branch::Cond => &self.cond,
            Branch::Uncond => &self.uncond,
        };
        m[layer * self.heads + head]
    }
}

fn reduce_branch(v: &[f64], l: usize, t: usize, h: usize, mode: ReductionMode) -> (Vec<f64>, Option<Vec<usize>>) {
    let mut out = vec![0.0; l * h];
    let mut arg = vec![0usize; l * h];
    for li in 0..l {
        for hi in 0..h {
            let series = (0..t).map(|ti| v[(li * t + ti) * h + hi]);
            let k = li * h + hi;
            match mode {
                ReductionMode::MeanTime => out[k] = series.sum::<f64>() / t as f64,
                ReductionMode::MaxTime | ReductionMode::MaxStepSelect => {
                    let (best_t, best) = series
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |b, (ti, x)| if x > b.1 { (ti, x) } else { b });
                    out[k] = best;
                    arg[k] = best_t;
                }
            }
        }
    }
    let arg = (mode == ReductionMode::MaxStepSelect).then_some(arg);
    (out, arg)
}

pub fn reduce_synopsis(scores: &BranchScores, mode: ReductionMode) -> SynopsisResult {
    let (l, t, h) = (scores.layers, scores.steps, scores.heads);
    let (cond, argmax_step_cond) = reduce_branch(&scores.cond, l, t, h, mode);
    let (uncond, argmax_step_uncond) = reduce_branch(&scores.uncond, l, t, h, mode);
    SynopsisResult {
        mode,
        layers: l,
        heads: h,
        steps: t,
        samples_used: scores.included,
        cond,
        uncond,
        per_step_cond: scores.cond.clone(),
        per_step_uncond: scores.uncond.clone(),
        argmax_step_cond,
        argmax_step_uncond,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    pub score: f64,
}

impl HeadScore {
    /// `L2H8`-style label.
    pub fn label(&self) -> String {
        format!("L{}H{}", self.layer, self.head)
    }
}

/// Highest-scoring heads of an `[L, H]` matrix; ties go to the lower
/// `(layer, head)`.
pub fn topk_heads(matrix: &[f64], layers: usize, heads: usize, k: usize) -> Result<Vec<HeadScore>> {
    if matrix.len() != layers * heads {
        return Err(Error::Input(format!(
            "synopsis has {} entries, expected {layers}×{heads}",
            matrix.len()
        )));
    }
    if k > layers * heads {
        return Err(Error::Input(format!("k = {k} exceeds {} heads", layers * heads)));
    }
    let mut all: Vec<HeadScore> = matrix
        .iter()
        .enumerate()
        .map(|(i, &score)| HeadScore {
            layer: i / heads,
            head: i % heads,
            score,
        })
        .collect();
    all.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.layer.cmp(&b.layer))
            .then(a.head.cmp(&b.head))
    });
    all.truncate(k);
    Ok(all)
}

/// `[L, H]` matrix as CSV: header `layer,h0,h1,…`, one row per layer.
pub fn heatmap_csv(matrix: &[f64], layers: usize, heads: usize) -> String {
    let mut s = String::from("layer");
    for h in 0..heads {
        s.push_str(&format!(",h{h}"));
    }
    s.push('\n');
    for l in 0..layers {
        s.push_str(&l.to_string());
        for h in 0..heads {
            s.push_str(&format!(",{}", matrix[l * heads + h]));
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QkMap {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word: Option<String>,
    pub scaled: bool,
    pub logits: Vec<f64>,
}

/// `logits_i = (pos_i · Wq) · (word · Wk)ᵀ`, divided by `√d_h` when `scaled`.
pub fn qk_logit_map(
    pos_emb: &DMatrix<f64>,
    wq: &DMatrix<f64>,
    wk: &DMatrix<f64>,
    word: &DVector<f64>,
    scaled: bool,
) -> Result<QkMap> {
    let d = pos_emb.ncols();
    if wq.nrows() != d || wk.nrows() != d || word.len() != d || wq.ncols() != wk.ncols() {
        return Err(Error::Input(format!(
            "QK shapes disagree: pos {}×{d}, Wq {}×{}, Wk {}×{}, word {}",
            pos_emb.nrows(),
            wq.nrows(),
            wq.ncols(),
            wk.nrows(),
            wk.ncols(),
            word.len()
        )));
    }
    let dh = wq.ncols();
    let q = pos_emb * wq;
    let k = wk.tr_mul(word);
    let mut logits = q * k;
    if scaled {
        logits /= (dh as f64).sqrt();
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("QK logits are not finite".into()));
    }
    Ok(QkMap {
        layer: None,
        head: None,
        word: None,
        scaled,
        logits: logits.iter().copied().collect(),
    })
}

/// Image and text masks for one prompt, as stored next to its attention dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptMasks {
    #[serde(default)]
    pub prompt: String,
    pub image_tokens: usize,
    /// Target name → one mask per sample.
    pub image: BTreeMap<String, Vec<Vec<f32>>>,
    /// Group name → multi-hot vector over text tokens.
    pub text: BTreeMap<String, Vec<f32>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{render_scene, SceneSpec};
    use crate::geometry::{Color, RelationLabel};
    use crate::raster::{parse_objects, RasterParams};

    fn geom(l: usize, t: usize, n: usize, h: usize, s: usize, w: usize) -> AttnGeometry {
        AttnGeometry {
            layers: l,
            steps: t,
            samples: n,
            heads: h,
            image_tokens: s,
            text_tokens: w,
            layout: AttnLayout::LayerLeading,
        }
    }

    #[test]
    fn uniform_attention_gives_k_over_w() {
        let g = geom(2, 3, 2, 2, 4, 5);
        let attn = Tensor::new(g.dims(), vec![0.2; g.dims().iter().product()]).unwrap();
        let img = ImageMasks::shared(vec![0.25; 4], 2).unwrap();
        let text = vec![1.0, 0.0, 1.0, 1.0, 0.0];
        let s = score_templates(&attn, &g, &img, &text, RowCheck::Validate).unwrap();
        for v in s.cond.iter().chain(&s.uncond) {
            assert!((v - 0.6).abs() < 1e-6);
        }
        let zero = Tensor::zeros(g.dims());
        let s = score_templates(&zero, &g, &img, &text, RowCheck::Off).unwrap();
        assert!(s.cond.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_unit_entry() {
        let g = geom(2, 1, 1, 2, 4, 3);
        let mut attn = Tensor::zeros(g.dims());
        // layer 1, step 0, conditional sample (index 1), head 0, image 2, text 1
        let idx = ((((1 * 1 + 0) * 2 + 1) * 2 + 0) * 4 + 2) * 3 + 1;
        attn.data[idx] = 1.0;
        let img = ImageMasks::shared(vec![0.0, 0.0, 1.0, 0.0], 1).unwrap();
        let s = score_templates(&attn, &g, &img, &[0.0, 1.0, 0.0], RowCheck::Off).unwrap();
        for l in 0..2 {
            for h in 0..2 {
                let expected = if (l, h) == (1, 0) { 1.0 } else { 0.0 };
                assert_eq!(s.at(Branch::Cond, l, 0, h), expected);
                assert_eq!(s.at(Branch::Uncond, l, 0, h), 0.0);
            }
        }
    }

    #[test]
    fn excluded_samples_and_empty_result() {
        let g = geom(1, 1, 2, 1, 2, 2);
        let mut attn = Tensor::zeros(g.dims());
        // uncond sample 0 rows [1,0]; uncond sample 1 rows [0,1]
        attn.data[..8].copy_from_slice(&[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let img = ImageMasks::new(2, vec![vec![0.5, 0.5], vec![0.0, 0.0]]).unwrap();
        let s = score_templates(&attn, &g, &img, &[1.0, 0.0], RowCheck::Off).unwrap();
        assert_eq!(s.included, 1);
        assert_eq!(s.uncond, vec![1.0]);
        let none = ImageMasks::new(2, vec![vec![0.0; 2]; 2]).unwrap();
        assert!(matches!(
            score_templates(&attn, &g, &none, &[1.0, 0.0], RowCheck::Off),
            Err(Error::EmptyResult(_))
        ));
    }

    #[test]
    fn row_validation() {
        let g = geom(1, 1, 1, 1, 1, 2);
        let img = ImageMasks::shared(vec![1.0], 1).unwrap();
        let run = |vals: [f32; 4]| {
            let attn = Tensor::new(g.dims(), vals.to_vec()).unwrap();
            score_templates(&attn, &g, &img, &[1.0, 0.0], RowCheck::Validate)
        };
        assert!(run([0.5, 0.5, 0.5, 0.5]).is_ok());
        let s = run([0.5, 0.505, 0.5, 0.5]).unwrap();
        assert!((s.uncond[0] - 0.5 / 1.005).abs() < 1e-6);
        assert!(matches!(run([0.5, 0.6, 0.5, 0.5]), Err(Error::AttentionRow(_))));
        assert!(matches!(run([1.5, -0.5, 0.5, 0.5]), Err(Error::AttentionRow(_))));
    }

    #[test]
    fn sample_leading_layout_matches() {
        let g = geom(2, 2, 2, 3, 4, 3);
        let n: usize = g.dims().iter().product();
        let data: Vec<f32> = (0..n).map(|i| ((i * 37) % 11) as f32 / 10.0).collect();
        let attn = Tensor::new(g.dims(), data.clone()).unwrap();
        let mut gs = g;
        gs.layout = AttnLayout::SampleLeading;
        let mut moved = vec![0.0f32; n];
        let bl = 12;
        for l in 0..2 {
            for t in 0..2 {
                for s in 0..4 {
                    for h in 0..3 {
                        let src = (((l * 2 + t) * 4 + s) * 3 + h) * bl;
                        let dst = (((s * 2 + l) * 2 + t) * 3 + h) * bl;
                        moved[dst..dst + bl].copy_from_slice(&data[src..src + bl]);
                    }
                }
            }
        }
        let moved = Tensor::new(gs.dims(), moved).unwrap();
        let img = ImageMasks::new(4, vec![vec![0.1, 0.2, 0.3, 0.4], vec![0.4, 0.3, 0.2, 0.1]]).unwrap();
        let text = vec![1.0, 0.0, 1.0];
        let a = score_templates(&attn, &g, &img, &text, RowCheck::Off).unwrap();
        let b = score_templates(&moved, &gs, &img, &text, RowCheck::Off).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reductions() {
        let scores = BranchScores {
            layers: 1,
            steps: 3,
            heads: 2,
            included: 1,
            cond: vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0],
            uncond: vec![0.0; 6],
        };
        let mean = reduce_synopsis(&scores, ReductionMode::MeanTime);
        assert_eq!(mean.cond, vec![2.0, 5.0]);
        let max = reduce_synopsis(&scores, ReductionMode::MaxTime);
        assert_eq!(max.cond, vec![3.0, 5.0]);
        assert!(max.argmax_step_cond.is_none());
        let sel = reduce_synopsis(&scores, ReductionMode::MaxStepSelect);
        assert_eq!(sel.cond, vec![3.0, 5.0]);
        assert_eq!(sel.argmax_step_cond, Some(vec![2, 0]));
    }

    #[test]
    fn topk_ordering() {
        let mut m = vec![0.0; 12 * 12];
        m[2 * 12 + 8] = 1.0;
        let top = topk_heads(&m, 12, 12, 1).unwrap();
        assert_eq!(top[0].label(), "L2H8");
        let eq = vec![0.5; 6];
        let top = topk_heads(&eq, 2, 3, 3).unwrap();
        let ids: Vec<_> = top.iter().map(|h| (h.layer, h.head)).collect();
        assert_eq!(ids, vec![(0, 0), (0, 1), (0, 2)]);
        assert_eq!(topk_heads(&eq, 2, 3, 6).unwrap().len(), 6);
        assert!(topk_heads(&eq, 2, 3, 7).is_err());
    }

    #[test]
    fn qk_identity_peak() {
        let s = 8;
        let pos = DMatrix::<f64>::identity(s, s);
        let eye = DMatrix::<f64>::identity(s, s);
        let word = pos.row(5).transpose();
        let map = qk_logit_map(&pos, &eye, &eye, &word, false).unwrap();
        let best = map.logits.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(best, 5);
        let zero = qk_logit_map(&pos, &eye, &eye, &DVector::zeros(s), true).unwrap();
        assert!(zero.logits.iter().all(|&v| v == 0.0));
        assert!(qk_logit_map(&pos, &eye, &eye, &DVector::zeros(3), true).is_err());
    }

    #[test]
    fn pooled_masks() {
        let full = pool_mask(&vec![true; 128 * 128], 128, 128, (8, 8)).unwrap();
        assert!(full.iter().all(|&v| (v - 1.0 / 64.0).abs() < 1e-7));
        let mut bits = vec![false; 128 * 128];
        for y in 20..28 {
            for x in 36..44 {
                bits[y * 128 + x] = true;
            }
        }
        let one = pool_mask(&bits, 128, 128, (8, 8)).unwrap();
        assert_eq!(one[8 + 2], 1.0);
        assert_eq!(one.iter().sum::<f32>(), 1.0);
        assert!(pool_mask(&bits, 128, 128, (7, 8)).is_err());
    }

    #[test]
    fn circle_mask_from_detections() {
        let spec = SceneSpec {
            shape1: ShapeKind::Circle,
            shape2: ShapeKind::Square,
            color1: Color::Red,
            color2: Color::Blue,
            pos1: (64, 64),
            pos2: (20, 110),
            radius: 16,
            canvas: 128,
            shape1_on_top: false,
            occluding: false,
            overlap_ratio: 0.0,
            relation: RelationLabel::UpperRight,
            caption: String::new(),
            paraphrase: 0,
            color1_dropped: false,
            color2_dropped: false,
        };
        let dets = parse_objects(&render_scene(&spec), &RasterParams::default());
        let m = image_mask_from_detections(&dets, (128, 128), (8, 8), MaskTarget::Shape(ShapeKind::Circle)).unwrap();
        // the central 2×2 cells hold the quarter-discs; analytic coverage of
        // each central cell by a r = 16 disc centred on its corner is π·16²/4
        let central: f32 = [27, 28, 35, 36].iter().map(|&i| m[i]).sum();
        assert!(central > 0.75, "{central}");
        for i in [27, 28, 35, 36] {
            assert!((m[i] - central / 4.0).abs() < 1e-6);
        }
        let bg = image_mask_from_detections(&dets, (128, 128), (8, 8), MaskTarget::Background).unwrap();
        assert!((bg.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        let tri =
            image_mask_from_detections(&dets, (128, 128), (8, 8), MaskTarget::Shape(ShapeKind::Triangle)).unwrap();
        assert!(tri.iter().all(|&v| v == 0.0));
    }
}
