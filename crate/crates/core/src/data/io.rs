//! Dataset directories: `images/NNNNNN.png` plus `annotations.jsonl`.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::{ColorType, DynamicImage};
use serde::{Deserialize, Serialize};

use super::{Dataset, DetectionSample};
use crate::detector::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const ANNOTATIONS: &str = "annotations.jsonl";
const IMAGES: &str = "images";

#[derive(Serialize, Deserialize)]
struct AnnotationLine {
    file: String,
    boxes: Vec<[f64; 4]>,
    labels: Vec<usize>,
}

fn to_bytes(image: &Tensor) -> (Vec<u8>, u32, u32, ColorType) {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut bytes = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = image.data()[(ch * h + y) * w + x];
                bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let color = if c == 1 { ColorType::L8 } else { ColorType::Rgb8 };
    (bytes, w as u32, h as u32, color)
}

fn from_image(img: DynamicImage) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, raw) = match img {
        DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
        other => (3, other.into_rgb8().into_raw()),
    };
    let mut data = vec![0.0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(ch * h + y) * w + x] = raw[(y * w + x) * c + ch] as f32 / 255.0;
            }
        }
    }
    Tensor::new(vec![c, h, w], data)
}

/// Writes images as lossless 8-bit PNGs and one JSON annotation per line.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let img_dir = dir.join(IMAGES);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let ann_path = dir.join(ANNOTATIONS);
    let file = fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut out = BufWriter::new(file);
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.image.rank() != 3 || !matches!(s.image.shape()[0], 1 | 3) {
            return Err(Error::shape("save_dataset", format!("image {i} has shape {:?}", s.image.shape())));
        }
        let name = format!("{i:06}.png");
        let path = img_dir.join(&name);
        let (bytes, w, h, color) = to_bytes(&s.image);
        image::save_buffer(&path, &bytes, w, h, color).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let line = AnnotationLine {
            file: format!("{IMAGES}/{name}"),
            boxes: s.boxes.iter().map(|b| [b.x1, b.y1, b.x2, b.y2]).collect(),
            labels: s.labels.clone(),
        };
        let json = serde_json::to_string(&line).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(out, "{json}").map_err(|e| Error::io(&ann_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&ann_path, e))
}

/// Reads a directory written by [`save_dataset`]. Every PNG under `images/`
/// must have exactly one annotation line, and every box must be valid and
/// inside its image.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let ann_path = dir.join(ANNOTATIONS);
    let file = fs::File::open(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut samples = Vec::new();
    let mut seen = BTreeSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&ann_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ann: AnnotationLine = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{} line {}: {e}", ann_path.display(), n + 1)))?;
        if ann.boxes.len() != ann.labels.len() {
            return Err(Error::Format(format!(
                "{}: {} boxes but {} labels",
                ann.file,
                ann.boxes.len(),
                ann.labels.len()
            )));
        }
        if !seen.insert(ann.file.clone()) {
            return Err(Error::Format(format!("{}: duplicate annotation line", ann.file)));
        }
        let path = dir.join(&ann.file);
        let img = image::open(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let image = from_image(img)?;
        let (h, w) = (image.shape()[1] as f64, image.shape()[2] as f64);
        let boxes = ann
            .boxes
            .iter()
            .map(|b| {
                let bb = BBox::new(b[0], b[1], b[2], b[3]).map_err(|e| Error::Format(format!("{}: {e}", ann.file)))?;
                if !bb.within(w, h) {
                    return Err(Error::Format(format!("{}: box {b:?} outside the image", ann.file)));
                }
                Ok(bb)
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(DetectionSample {
            image,
            boxes,
            labels: ann.labels,
        });
    }
    let img_dir = dir.join(IMAGES);
    let entries = fs::read_dir(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut on_disk: Vec<String> = Vec::new();
    for e in entries {
        let e = e.map_err(|err| Error::io(&img_dir, err))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            on_disk.push(format!("{IMAGES}/{name}"));
        }
    }
    on_disk.sort();
    if let Some(missing) = on_disk.iter().find(|f| !seen.contains(*f)) {
        return Err(Error::Format(format!("{missing}: no annotation line")));
    }
    Ok(Dataset::new(samples))
}
