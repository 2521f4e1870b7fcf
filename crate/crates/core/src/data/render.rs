//! Shape rendering, fog corruption and domain presets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, DetectionSample};
use crate::detector::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn label(self) -> usize {
        self as usize
    }
}

/// A filled shape on the integer pixel lattice. `size` is the radius of a
/// circle or the half-extent of a square or triangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
}

impl Shape {
    /// Coverage test at the pixel center `(x + 0.5, y + 0.5)`.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let px = x as f64 + 0.5 - self.cx;
        let py = y as f64 + 0.5 - self.cy;
        let s = self.size;
        match self.kind {
            ShapeKind::Circle => px * px + py * py <= s * s,
            ShapeKind::Square => px >= -s && px < s && py >= -s && py < s,
            ShapeKind::Triangle => {
                // apex (0, -s), base corners (-s, s) and (s, s)
                if py < -s || py >= s {
                    return false;
                }
                let half = (py + s) * 0.5;
                px >= -half && px < half
            }
        }
    }

    /// Tightest rectangle around the covered pixels: pixels `xmin..=xmax`
    /// give `x1 = xmin`, `x2 = xmax + 1`. `None` if nothing is covered.
    pub fn mask_box(&self, width: usize, height: usize) -> Option<BBox> {
        let s = self.size.ceil() as isize + 1;
        let (cx, cy) = (self.cx.floor() as isize, self.cy.floor() as isize);
        let clamp = |v: isize, lim: usize| v.clamp(0, lim as isize - 1) as usize;
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in clamp(cy - s, height)..=clamp(cy + s, height) {
            for x in clamp(cx - s, width)..=clamp(cx + s, width) {
                if self.covers(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| BBox {
            x1: x0 as f64,
            y1: y0 as f64,
            x2: (x1 + 1) as f64,
            y2: (y1 + 1) as f64,
        })
    }
}

/// Rendering statistics of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    pub image_size: usize,
    pub channels: usize,
    pub background: [f32; 3],
    pub background_jitter: f32,
    /// Stripe texture: cycles across the image and amplitude.
    pub texture_freq: f64,
    pub texture_amp: f32,
    pub palette: Vec<[f32; 3]>,
    pub color_jitter: f32,
    /// Inclusive range of objects per image.
    pub objects: (usize, usize),
    /// Inclusive integer range of shape half-extents, before `scale`.
    pub size: (usize, usize),
    pub scale: f64,
    pub brightness: (f32, f32),
    pub contrast: (f32, f32),
    pub noise: f32,
    pub fog_beta: f64,
    pub airlight: f32,
}

const CLEAR_PALETTE: [[f32; 3]; 5] = [
    [0.92, 0.30, 0.22],
    [0.25, 0.82, 0.32],
    [0.30, 0.45, 0.95],
    [0.92, 0.85, 0.25],
    [0.85, 0.40, 0.88],
];

impl DomainParams {
    /// Clear-weather source rendering.
    pub fn clear() -> Self {
        Self {
            image_size: 64,
            channels: 3,
            background: [0.22, 0.26, 0.30],
            background_jitter: 0.06,
            texture_freq: 3.0,
            texture_amp: 0.05,
            palette: CLEAR_PALETTE.to_vec(),
            color_jitter: 0.06,
            objects: (1, 4),
            size: (5, 11),
            scale: 1.0,
            brightness: (-0.04, 0.04),
            contrast: (0.9, 1.1),
            noise: 0.02,
            fog_beta: 0.0,
            airlight: 0.8,
        }
    }

    /// The `fog-v1` target: clear rendering seen through fog.
    pub fn fog_v1() -> Self {
        Self {
            fog_beta: 2.0,
            airlight: 0.8,
            ..Self::clear()
        }
    }

    /// The `style-v1` source: flat synthetic-looking renders.
    pub fn style_v1_source() -> Self {
        Self {
            texture_amp: 0.02,
            noise: 0.0,
            ..Self::clear()
        }
    }

    /// The `style-v1` target: rotated palette, denser texture, noisier and
    /// 30% larger objects.
    pub fn style_v1_target() -> Self {
        let rot = |c: [f32; 3]| [c[2], c[0], c[1]];
        Self {
            background: rot([0.22, 0.26, 0.30]),
            texture_freq: 7.0,
            texture_amp: 0.10,
            palette: CLEAR_PALETTE.iter().map(|&c| rot(c)).collect(),
            noise: 0.04,
            scale: 1.3,
            ..Self::clear()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.image_size >= 16
            && matches!(self.channels, 1 | 3)
            && !self.palette.is_empty()
            && self.objects.0 >= 1
            && self.objects.0 <= self.objects.1
            && self.size.0 >= 2
            && self.size.0 <= self.size.1
            && self.scale > 0.0
            && self.fog_beta >= 0.0
            && (0.0..=1.0).contains(&self.airlight);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid domain parameters {self:?}")))
        }
    }
}

/// Named domain-pair presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Fog,
    Style,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fog" | "fog-v1" => Ok(Self::Fog),
            "style" | "style-v1" => Ok(Self::Style),
            other => Err(Error::InvalidArgument(format!("unknown scenario {other:?}"))),
        }
    }
}

impl Scenario {
    pub fn preset_name(self) -> &'static str {
        match self {
            Self::Fog => "fog-v1",
            Self::Style => "style-v1",
        }
    }
}

/// Rounds to the nearest multiple of 1/255, the values an 8-bit PNG holds.
pub fn quantize(v: f32) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() as u8) as f32 / 255.0
}

/// Synthetic depth: 1 at the top row falling linearly to 0.5 at the bottom.
pub fn depth_ramp(height: usize, width: usize) -> Vec<f64> {
    let mut d = Vec::with_capacity(height * width);
    for y in 0..height {
        let v = if height > 1 {
            1.0 - 0.5 * y as f64 / (height - 1) as f64
        } else {
            1.0
        };
        d.extend(std::iter::repeat(v).take(width));
    }
    d
}

/// Attenuation fog: `t = exp(-beta d)`, `out = in t + A (1 - t)`, clamped to
/// `[0, 1]`. `depth` holds one value per pixel of a `[C, H, W]` image.
pub fn apply_fog(image: &Tensor, depth: &[f64], beta: f64, airlight: f32) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || depth.len() != s[1] * s[2] {
        return Err(Error::shape(
            "apply_fog",
            format!("image {s:?} with {} depth values", depth.len()),
        ));
    }
    if !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("fog beta {beta} must be non-negative")));
    }
    let hw = depth.len();
    let a = airlight as f64;
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let t = (-beta * depth[i % hw]).exp();
            ((v as f64) * t + a * (1.0 - t)).clamp(0.0, 1.0) as f32
        })
        .collect();
    Tensor::new(s.to_vec(), data)
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn luminance(c: [f32; 3]) -> f32 {
    (c[0] + c[1] + c[2]) / 3.0
}

/// Renders image `index` of the stream identified by `seed`.
pub fn render_sample(params: &DomainParams, seed: u64, index: usize) -> Result<DetectionSample> {
    params.validate()?;
    let mut rng = sample_rng(seed, index);
    let n = params.image_size;
    let ch = params.channels;

    let bj: f32 = rng.gen_range(-params.background_jitter..=params.background_jitter);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut rgb = vec![0.0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let u = (x as f64 * ca + y as f64 * sa) / n as f64;
            let tex = params.texture_amp * (std::f64::consts::TAU * params.texture_freq * u + phase).sin() as f32;
            for c in 0..3 {
                rgb[(c * n + y) * n + x] = params.background[c] + bj + tex;
            }
        }
    }

    let count = rng.gen_range(params.objects.0..=params.objects.1);
    let mut shapes: Vec<(Shape, BBox)> = Vec::new();
    let mut tries = 0;
    while shapes.len() < count && tries < 100 {
        tries += 1;
        let kind = ShapeKind::ALL[rng.gen_range(0..3)];
        let half = rng.gen_range(params.size.0..=params.size.1) as f64;
        let size = (half * params.scale).round().max(2.0);
        let lo = size as usize + 1;
        if 2 * lo >= n {
            continue;
        }
        let cx = rng.gen_range(lo..=n - lo) as f64;
        let cy = rng.gen_range(lo..=n - lo) as f64;
        let shape = Shape { kind, cx, cy, size };
        let Some(bbox) = shape.mask_box(n, n) else { continue };
        let clear = shapes.iter().all(|(_, b)| {
            bbox.x2 + 2.0 <= b.x1 || b.x2 + 2.0 <= bbox.x1 || bbox.y2 + 2.0 <= b.y1 || b.y2 + 2.0 <= bbox.y1
        });
        if clear {
            shapes.push((shape, bbox));
        }
    }
    if shapes.is_empty() {
        return Err(Error::InvalidArgument("could not place any shape".into()));
    }

    let bg_lum = luminance(params.background);
    for (shape, bbox) in &shapes {
        let mut color = params.palette[rng.gen_range(0..params.palette.len())];
        for c in &mut color {
            *c += rng.gen_range(-params.color_jitter..=params.color_jitter);
        }
        if (luminance(color) - bg_lum).abs() < 0.15 {
            color = color.map(|c| c + 0.3);
        }
        for y in bbox.y1 as usize..bbox.y2 as usize {
            for x in bbox.x1 as usize..bbox.x2 as usize {
                if shape.covers(x, y) {
                    for c in 0..3 {
                        rgb[(c * n + y) * n + x] = color[c];
                    }
                }
            }
        }
    }

    let bright: f32 = rng.gen_range(params.brightness.0..=params.brightness.1);
    let contrast: f32 = rng.gen_range(params.contrast.0..=params.contrast.1);
    for v in &mut rgb {
        let noise = params.noise * rng.sample::<f32, _>(StandardNormal);
        *v = ((*v - 0.5) * contrast + 0.5 + bright + noise).clamp(0.0, 1.0);
    }
    let data = if ch == 3 {
        rgb
    } else {
        (0..n * n)
            .map(|i| (rgb[i] + rgb[n * n + i] + rgb[2 * n * n + i]) / 3.0)
            .collect()
    };
    let mut image = Tensor::new(vec![ch, n, n], data)?;
    if params.fog_beta > 0.0 {
        image = apply_fog(&image, &depth_ramp(n, n), params.fog_beta, params.airlight)?;
    }
    image.data_mut().iter_mut().for_each(|v| *v = quantize(*v));
    Ok(DetectionSample {
        image,
        boxes: shapes.iter().map(|(_, b)| *b).collect(),
        labels: shapes.iter().map(|(s, _)| s.kind.label()).collect(),
    })
}

/// `count` images with 1-4 shapes each; sample `i` depends only on
/// `(seed, i, params)`.
pub fn gen_shapes_dataset(count: usize, seed: u64, params: &DomainParams) -> Result<Dataset> {
    (0..count)
        .map(|i| render_sample(params, seed, i))
        .collect::<Result<Vec<_>>>()
        .map(Dataset::new)
}

/// Source and target training sets for a scenario. Fog targets are fogged
/// copies of the source images with identical annotations; style targets
/// are independent draws from the shifted rendering.
pub fn make_domain_pair(scenario: Scenario, count: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    match scenario {
        Scenario::Fog => {
            let clear = DomainParams::clear();
            let fog = DomainParams::fog_v1();
            let source = gen_shapes_dataset(count, seed, &clear)?;
            let n = clear.image_size;
            let depth = depth_ramp(n, n);
            let samples = source
                .samples
                .iter()
                .map(|s| {
                    let mut image = apply_fog(&s.image, &depth, fog.fog_beta, fog.airlight)?;
                    image.data_mut().iter_mut().for_each(|v| *v = quantize(*v));
                    Ok(DetectionSample {
                        image,
                        boxes: s.boxes.clone(),
                        labels: s.labels.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((source, Dataset::new(samples)))
        }
        Scenario::Style => {
            let source = gen_shapes_dataset(count, seed, &DomainParams::style_v1_source())?;
            let target = gen_shapes_dataset(count, seed ^ 0x5354_594c_4500_0001, &DomainParams::style_v1_target())?;
            Ok((source, target))
        }
    }
}

/// `count` standard-normal points in `dim` dimensions and the same points
/// shifted by `delta`, as two `[count, dim]` tensors.
pub fn gen_gaussian_pair(dim: usize, delta: &[f64], count: usize, seed: u64) -> Result<(Tensor, Tensor)> {
    if delta.len() != dim || dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "delta has {} components for dimension {dim}",
            delta.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s: Vec<f64> = (0..count * dim).map(|_| rng.sample(StandardNormal)).collect();
    let t: Vec<f64> = s.iter().enumerate().map(|(i, v)| v + delta[i % dim]).collect();
    Ok((
        Tensor::from_f64(vec![count, dim], &s)?,
        Tensor::from_f64(vec![count, dim], &t)?,
    ))
}
