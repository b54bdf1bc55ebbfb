//! On-disk dataset: `images/NNNNNN.{png,atns}` plus one `labels.jsonl` line per sample.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Color, RelationLabel, ShapeKind};
use crate::tensor_io::{self, DType};

use super::{render_scene, sample_indexed, GenConfig, SceneSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Png,
    Atns,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Atns => "atns",
        }
    }
}

/// One line of `labels.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub index: usize,
    /// Image path relative to the dataset root.
    pub image: String,
    pub shape1: ShapeKind,
    pub shape2: ShapeKind,
    pub color1: Color,
    pub color2: Color,
    pub location1: (i32, i32),
    pub location2: (i32, i32),
    pub spatial_relationship: RelationLabel,
    pub occluding: bool,
    pub shape1_on_top: bool,
    pub overlap_ratio: f64,
    pub caption: String,
    pub color1_dropped: bool,
    pub color2_dropped: bool,
}

impl LabelRecord {
    pub fn from_spec(index: usize, image: String, spec: &SceneSpec) -> Self {
        Self {
            index,
            image,
            shape1: spec.shape1,
            shape2: spec.shape2,
            color1: spec.color1,
            color2: spec.color2,
            location1: spec.pos1,
            location2: spec.pos2,
            spatial_relationship: spec.relation,
            occluding: spec.occluding,
            shape1_on_top: spec.shape1_on_top,
            overlap_ratio: spec.overlap_ratio,
            caption: spec.caption.clone(),
            color1_dropped: spec.color1_dropped,
            color2_dropped: spec.color2_dropped,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub samples: usize,
    pub occluding: usize,
    pub labels: PathBuf,
}

pub fn save_image(img: &RgbImage, path: &Path, format: ImageFormat) -> Result<()> {
    match format {
        ImageFormat::Png => img.save(path).map_err(Error::from),
        ImageFormat::Atns => {
            let (w, h) = img.dimensions();
            let data: Vec<f32> = img.as_raw().iter().map(|&v| v as f32).collect();
            tensor_io::write_tensor(path, &[h as usize, w as usize, 3], DType::F32, &data)
        }
    }
}

/// Loads a PNG (any color type, converted to RGB8) or an `[H, W, 3]` ATNS image.
pub fn load_image(path: &Path) -> Result<RgbImage> {
    let is_atns = path.extension().is_some_and(|e| e == "atns");
    if is_atns {
        let t = tensor_io::read_tensor(path)?;
        if t.dims.len() != 3 || t.dims[2] != 3 {
            return Err(Error::Input(format!(
                "{}: expected [H, W, 3] image tensor, got {:?}",
                path.display(),
                t.dims
            )));
        }
        let raw: Vec<u8> = t.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        RgbImage::from_raw(t.dims[1] as u32, t.dims[0] as u32, raw)
            .ok_or_else(|| Error::Input("image buffer size mismatch".into()))
    } else {
        Ok(image::open(path)?.to_rgb8())
    }
}

/// Generates `n` samples into `out_dir`. Sample `i` depends only on
/// `(config, i)`, so the output is identical regardless of thread count.
pub fn generate_dataset(config: &GenConfig, n: usize, out_dir: &Path, format: ImageFormat) -> Result<DatasetSummary> {
    config.validate()?;
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io_at(&images, e))?;

    let records: Vec<LabelRecord> = (0..n)
        .into_par_iter()
        .map(|index| {
            let wrap = |e: Error| Error::Sample {
                index,
                source: Box::new(e),
            };
            let spec = sample_indexed(config, index as u64).map_err(wrap)?;
            let rel = format!("images/{index:06}.{}", format.extension());
            save_image(&render_scene(&spec), &out_dir.join(&rel), format).map_err(wrap)?;
            Ok(LabelRecord::from_spec(index, rel, &spec))
        })
        .collect::<Result<_>>()?;

    let labels = out_dir.join("labels.jsonl");
    let file = fs::File::create(&labels).map_err(|e| Error::io_at(&labels, e))?;
    let mut out = BufWriter::new(file);
    for record in &records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;

    Ok(DatasetSummary {
        samples: n,
        occluding: records.iter().filter(|r| r.occluding).count(),
        labels,
    })
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
