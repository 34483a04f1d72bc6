//! Procedural datasets.
//!
//! In-distribution scenes hold 1-4 flat-colored shapes (disk, square,
//! triangle, cross for classes 1-4) on a textured, noisy background that
//! covers about 73% of the pixels. Two out-of-distribution families have an
//! implicit all-background ground truth: Gaussian white noise and structured
//! procedural textures.
//!
//! All randomness comes from ChaCha8 ([`rand_chacha::ChaCha8Rng`]). Each item
//! gets its own generator keyed by `(seed, family)` with the item index as the
//! ChaCha stream id, so items are independent of generation order and of the
//! worker count, and streams are identical on every platform.

use std::borrow::Cow;
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imageio::{self, dequantize, quantize, tensor_to_rgb8};
use crate::metrics::write_bytes;
use crate::par;
use crate::tensor::{LabelField, TensorField};
use crate::IGNORE_LABEL;

/// Gaussian white noise parameters, in image units.
pub const NOISE_MEAN: f64 = 0.5;
pub const NOISE_STD: f64 = 0.25;

/// Human-readable noise model, echoed into reports.
pub fn noise_model_description() -> String {
    format!("gaussian mean={NOISE_MEAN} std={NOISE_STD} clipped to [0,1]")
}

const FAMILY_SCENE: u64 = 0x5343_454e_4553_0001;
const FAMILY_NOISE: u64 = 0x4e4f_4953_4500_0002;
const FAMILY_TEXTURE: u64 = 0x5445_5854_5552_0003;

/// Per-item generator: ChaCha8 keyed by `(seed, family)`, stream = `index`.
pub fn item_rng(seed: u64, family: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ family.rotate_left(17));
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    InDistribution,
    Noise,
    Texture,
}

impl DatasetKind {
    pub fn is_ood(self) -> bool {
        !matches!(self, DatasetKind::InDistribution)
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::InDistribution => "in_distribution",
            DatasetKind::Noise => "noise",
            DatasetKind::Texture => "texture",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Background plus shape classes.
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub bg_fraction: f64,
    pub color_jitter: f64,
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            num_classes: 5,
            min_shapes: 1,
            max_shapes: 4,
            bg_fraction: 0.73,
            color_jitter: 0.08,
            noise_amplitude: 0.04,
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 64 {
            return Err(Error::invalid(format!(
                "num_classes must be in 2..=64, got {}",
                self.num_classes
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::invalid("scene images must be at least 16x16"));
        }
        if !(self.bg_fraction > 0.0 && self.bg_fraction < 1.0) {
            return Err(Error::invalid("background fraction must lie in (0, 1)"));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::invalid("min_shapes exceeds max_shapes"));
        }
        if !(self.color_jitter >= 0.0 && self.noise_amplitude >= 0.0) {
            return Err(Error::invalid("jitter and noise amplitudes must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    const CYCLE: [ShapeKind; 4] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
    ];

    /// Shape drawn for foreground class `class >= 1`.
    pub fn for_class(class: usize) -> ShapeKind {
        Self::CYCLE[(class - 1) % 4]
    }

    /// Bounding extent giving roughly `area` pixels.
    fn extent_for_area(self, area: f64) -> f64 {
        match self {
            ShapeKind::Disk => 2.0 * (area / PI).sqrt(),
            ShapeKind::Square => area.sqrt(),
            ShapeKind::Triangle => (2.0 * area).sqrt(),
            ShapeKind::Cross => (9.0 * area / 5.0).sqrt(),
        }
    }

    /// Whether offset `(dx, dy)` from the center lies inside a shape of extent `e`.
    fn contains(self, dx: f64, dy: f64, e: f64) -> bool {
        let h = e / 2.0;
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= h * h,
            ShapeKind::Square => dx.abs() <= h && dy.abs() <= h,
            ShapeKind::Triangle => {
                // apex up, base at dy = +h
                if dy < -h || dy > h {
                    return false;
                }
                let half_width = (dy + h) / 2.0;
                dx.abs() <= half_width
            }
            ShapeKind::Cross => {
                let arm = e / 6.0;
                (dx.abs() <= arm && dy.abs() <= h) || (dy.abs() <= arm && dx.abs() <= h)
            }
        }
    }
}

/// Base color of foreground class `class >= 1`.
pub fn class_color(class: usize) -> [f64; 3] {
    const BASE: [[f64; 3]; 4] = [
        [0.85, 0.20, 0.20],
        [0.20, 0.75, 0.25],
        [0.20, 0.30, 0.85],
        [0.90, 0.85, 0.20],
    ];
    if class >= 1 && class <= 4 {
        return BASE[class - 1];
    }
    let hue = ((class as f64) * 0.618_033_988_75).fract();
    hsv_to_rgb(hue, 0.75, 0.85)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// 256-entry RGB palette for label PNGs: black background, class colors,
/// white for the ignore label.
pub fn label_palette() -> Vec<u8> {
    let mut pal = Vec::with_capacity(256 * 3);
    for i in 0..256usize {
        let rgb = match i {
            0 => [0.0, 0.0, 0.0],
            255 => [1.0, 1.0, 1.0],
            c => class_color(c),
        };
        pal.extend(rgb.iter().map(|v| quantize(*v)));
    }
    pal
}

const PLACEMENT_TRIES: usize = 60;
const SCENE_TRIES: usize = 40;
const BG_TOLERANCE: f64 = 0.15;

struct Placed {
    class: usize,
    shape: ShapeKind,
    cx: f64,
    cy: f64,
    extent: f64,
}

fn rasterize(shape: &Placed, h: usize, w: usize, mut visit: impl FnMut(usize, usize)) {
    let r = shape.extent / 2.0 + 1.0;
    let y0 = (shape.cy - r).floor().max(0.0) as usize;
    let y1 = ((shape.cy + r).ceil() as usize).min(h);
    let x0 = (shape.cx - r).floor().max(0.0) as usize;
    let x1 = ((shape.cx + r).ceil() as usize).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - shape.cx;
            let dy = y as f64 + 0.5 - shape.cy;
            if shape.shape.contains(dx, dy, shape.extent) {
                visit(y, x);
            }
        }
    }
}

/// Places shapes and returns the label mask, or `None` if placement failed.
fn try_layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Option<(LabelField, Vec<Placed>)> {
    let (h, w) = (spec.height, spec.width);
    let n = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let mut mask = LabelField::filled(h, w, 0);
    if n == 0 {
        return Some((mask, Vec::new()));
    }
    // occupancy dilated by one pixel keeps shapes from touching
    let mut occupied = vec![false; h * w];
    let fg_target = (1.0 - spec.bg_fraction) * (h * w) as f64 * rng.random_range(0.8..1.2);
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.6..1.4)).collect();
    let wsum: f64 = weights.iter().sum();
    let mut placed = Vec::with_capacity(n);
    for weight in weights {
        let class = rng.random_range(1..spec.num_classes);
        let shape = ShapeKind::for_class(class);
        let mut extent = shape.extent_for_area(fg_target * weight / wsum).max(4.0);
        let mut ok = false;
        for attempt in 0..PLACEMENT_TRIES {
            if attempt > 0 && attempt % 15 == 0 {
                extent = (extent * 0.85).max(4.0);
            }
            let half = extent / 2.0;
            if extent > (h.min(w) as f64) - 2.0 {
                extent = (h.min(w) as f64) - 2.0;
                continue;
            }
            let cx = rng.random_range(half + 1.0..=w as f64 - half - 1.0);
            let cy = rng.random_range(half + 1.0..=h as f64 - half - 1.0);
            let cand = Placed {
                class,
                shape,
                cx,
                cy,
                extent,
            };
            let mut clash = false;
            let mut pixels = Vec::new();
            rasterize(&cand, h, w, |y, x| {
                clash |= occupied[y * w + x];
                pixels.push((y, x));
            });
            if clash || pixels.is_empty() {
                continue;
            }
            for &(y, x) in &pixels {
                mask.set(y, x, class as u8);
                for (ny, nx) in neighbors(y, x, h, w) {
                    occupied[ny * w + nx] = true;
                }
            }
            placed.push(cand);
            ok = true;
            break;
        }
        if !ok {
            return None;
        }
    }
    Some((mask, placed))
}

fn neighbors(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let ys = y.saturating_sub(1)..=(y + 1).min(h - 1);
    ys.flat_map(move |ny| (x.saturating_sub(1)..=(x + 1).min(w - 1)).map(move |nx| (ny, nx)))
}

fn background_fraction(mask: &LabelField) -> f64 {
    mask.data().iter().filter(|v| **v == 0).count() as f64 / mask.len() as f64
}

/// One scene: `(3, H, W)` image in `[0, 1]` and its label mask.
pub fn gen_scene(spec: &SceneSpec, index: u64) -> Result<(TensorField, LabelField)> {
    spec.validate()?;
    let mut rng = item_rng(spec.seed, FAMILY_SCENE, index);
    let (h, w) = (spec.height, spec.width);
    let mut layout = None;
    for _ in 0..SCENE_TRIES {
        if let Some((mask, placed)) = try_layout(spec, &mut rng) {
            let frac = background_fraction(&mask);
            if placed.is_empty() || (frac - spec.bg_fraction).abs() <= BG_TOLERANCE {
                layout = Some((mask, placed));
                break;
            }
        }
    }
    let (mask, placed) = layout.ok_or_else(|| {
        Error::Generation(format!(
            "could not place shapes for scene {index} within {SCENE_TRIES} attempts"
        ))
    })?;

    let mut image = TensorField::zeros(3, h, w);
    paint_background(&mut image, &mut rng);
    for shape in &placed {
        let base = class_color(shape.class);
        let jitter: Vec<f64> = (0..3)
            .map(|_| rng.random_range(-1.0..=1.0) * spec.color_jitter)
            .collect();
        rasterize(shape, h, w, |y, x| {
            for c in 0..3 {
                image.set(c, y, x, base[c] + jitter[c]);
            }
        });
    }
    if spec.noise_amplitude > 0.0 {
        let noise = Normal::new(0.0, spec.noise_amplitude)
            .map_err(|e| Error::invalid(format!("noise amplitude: {e}")))?;
        for v in image.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    for v in image.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok((image, mask))
}

/// Desaturated base tone with a linear gradient and a faint low-frequency ripple.
fn paint_background(image: &mut TensorField, rng: &mut ChaCha8Rng) {
    let (_, h, w) = image.shape();
    let gray = rng.random_range(0.3..0.6);
    let tint: Vec<f64> = (0..3).map(|_| rng.random_range(-0.05..0.05)).collect();
    let angle = rng.random_range(0.0..2.0 * PI);
    let slope = rng.random_range(0.0..0.15);
    let ripple_period = rng.random_range(8.0..20.0);
    let ripple_angle = rng.random_range(0.0..PI);
    let ripple_phase = rng.random_range(0.0..2.0 * PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let (cr, sr) = (ripple_angle.cos(), ripple_angle.sin());
    let scale = h.max(w) as f64;
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            let grad = slope * ((fx * ca + fy * sa) / scale - 0.5);
            let ripple = 0.04 * (2.0 * PI * (fx * cr + fy * sr) / ripple_period + ripple_phase).sin();
            for c in 0..3 {
                image.set(c, y, x, gray + tint[c] + grad + ripple);
            }
        }
    }
}

/// Gaussian white noise, `N(0.5, 0.25^2)` per sample, clipped to `[0, 1]`.
pub fn gen_noise(seed: u64, index: u64, height: usize, width: usize) -> Result<TensorField> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("noise images need a positive size"));
    }
    let mut rng = item_rng(seed, FAMILY_NOISE, index);
    let normal = Normal::new(NOISE_MEAN, NOISE_STD).expect("valid noise parameters");
    let data = (0..3 * height * width)
        .map(|_| normal.sample(&mut rng).clamp(0.0, 1.0))
        .collect();
    TensorField::from_vec(3, height, width, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureFamily {
    Grating,
    Checkerboard,
    ValueNoise,
    Rings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextureParams {
    pub family: TextureFamily,
    /// Orientation in radians.
    pub angle: f64,
    /// Spatial period in pixels.
    pub period: f64,
    pub phase: f64,
    /// Ring center as fractions of the image size.
    pub center: (f64, f64),
    pub palette: [[f64; 3]; 2],
    /// Lattice values for value noise, drawn once per texture.
    pub lattice_seed: u64,
}

fn far_from_classes(c: &[f64; 3]) -> bool {
    (1..=4).all(|k| {
        let b = class_color(k);
        let d2: f64 = c.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        d2.sqrt() > 0.3
    })
}

fn random_palette(rng: &mut ChaCha8Rng) -> [[f64; 3]; 2] {
    loop {
        let a = [rng.random(), rng.random(), rng.random()];
        let b = [rng.random(), rng.random(), rng.random()];
        let gap: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        if gap > 0.35 && far_from_classes(&a) && far_from_classes(&b) {
            return [a, b];
        }
    }
}

/// Draws the texture description for item `index`.
pub fn texture_params(seed: u64, index: u64) -> TextureParams {
    let mut rng = item_rng(seed, FAMILY_TEXTURE, index);
    let family = match rng.random_range(0..4) {
        0 => TextureFamily::Grating,
        1 => TextureFamily::Checkerboard,
        2 => TextureFamily::ValueNoise,
        _ => TextureFamily::Rings,
    };
    TextureParams {
        family,
        angle: rng.random_range(0.0..PI),
        period: rng.random_range(4.0..16.0),
        phase: rng.random_range(0.0..2.0 * PI),
        center: (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
        palette: random_palette(&mut rng),
        lattice_seed: rng.random(),
    }
}

/// Renders a texture into a `(3, H, W)` tensor.
pub fn render_texture(p: &TextureParams, height: usize, width: usize) -> TensorField {
    let (ca, sa) = (p.angle.cos(), p.angle.sin());
    let lattice = (p.family == TextureFamily::ValueNoise)
        .then(|| ValueNoise::new(p.lattice_seed, height, width, p.period));
    let mut out = TensorField::zeros(3, height, width);
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f64, y as f64);
            let u = fx * ca + fy * sa;
            let t = match p.family {
                TextureFamily::Grating => 0.5 + 0.5 * (2.0 * PI * u / p.period + p.phase).sin(),
                TextureFamily::Checkerboard => {
                    let v = -fx * sa + fy * ca;
                    let cell = p.period / 2.0;
                    let parity = ((u / cell).floor() as i64 + (v / cell).floor() as i64).rem_euclid(2);
                    parity as f64
                }
                TextureFamily::ValueNoise => lattice.as_ref().map_or(0.5, |l| l.sample(fx, fy)),
                TextureFamily::Rings => {
                    let dx = fx - p.center.0 * width as f64;
                    let dy = fy - p.center.1 * height as f64;
                    let r = (dx * dx + dy * dy).sqrt();
                    0.5 + 0.5 * (2.0 * PI * r / p.period + p.phase).sin()
                }
            };
            for c in 0..3 {
                let v = p.palette[0][c] * (1.0 - t) + p.palette[1][c] * t;
                out.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    out
}

struct ValueNoise {
    octaves: Vec<(f64, usize, Vec<f64>)>,
}

impl ValueNoise {
    const OCTAVES: usize = 3;

    fn new(seed: u64, height: usize, width: usize, period: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let octaves = (0..Self::OCTAVES)
            .map(|o| {
                let cell = (period / f64::from(1 << o)).max(1.0);
                let cols = (width as f64 / cell).ceil() as usize + 2;
                let rows = (height as f64 / cell).ceil() as usize + 2;
                let grid = (0..rows * cols).map(|_| rng.random()).collect();
                (cell, cols, grid)
            })
            .collect();
        Self { octaves }
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        let mut total = 0.0;
        let mut norm = 0.0;
        let mut amp = 1.0;
        for (cell, cols, grid) in &self.octaves {
            let gx = x / cell;
            let gy = y / cell;
            let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
            let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
            let (tx, ty) = (smooth(gx.fract()), smooth(gy.fract()));
            let at = |r: usize, c: usize| grid[r * cols + c];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            total += amp * (top * (1.0 - ty) + bottom * ty);
            norm += amp;
            amp *= 0.5;
        }
        total / norm
    }
}

pub fn gen_texture(seed: u64, index: u64, height: usize, width: usize) -> Result<TensorField> {
    if height < 8 || width < 8 {
        return Err(Error::invalid("texture images must be at least 8x8"));
    }
    Ok(render_texture(&texture_params(seed, index), height, width))
}

/// Rounds an image through 8-bit storage.
pub fn quantize_image(image: &mut TensorField) {
    for v in image.data_mut() {
        *v = dequantize(quantize(*v));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub image: TensorField,
    /// `None` for OOD items: the ground truth is all background.
    pub mask: Option<LabelField>,
}

impl Item {
    /// Ground-truth labels, materialized for OOD items.
    pub fn labels(&self) -> Cow<'_, LabelField> {
        match &self.mask {
            Some(m) => Cow::Borrowed(m),
            None => Cow::Owned(LabelField::filled(self.image.height(), self.image.width(), 0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub kind: DatasetKind,
    pub items: Vec<Item>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// What produced a dataset; hashed into the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    Scenes {
        spec: SceneSpec,
        first_index: u64,
        count: usize,
    },
    Noise {
        seed: u64,
        height: usize,
        width: usize,
        count: usize,
    },
    Texture {
        seed: u64,
        height: usize,
        width: usize,
        count: usize,
    },
}

impl GeneratorSpec {
    pub fn kind(&self) -> DatasetKind {
        match self {
            GeneratorSpec::Scenes { .. } => DatasetKind::InDistribution,
            GeneratorSpec::Noise { .. } => DatasetKind::Noise,
            GeneratorSpec::Texture { .. } => DatasetKind::Texture,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            GeneratorSpec::Scenes { spec, .. } => spec.seed,
            GeneratorSpec::Noise { seed, .. } | GeneratorSpec::Texture { seed, .. } => *seed,
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("generator spec serializes"))
    }

    /// Generates every item, quantized to 8 bits.
    pub fn generate(&self, id: &str) -> Result<Dataset> {
        let items: Vec<Result<Item>> = match self {
            GeneratorSpec::Scenes {
                spec,
                first_index,
                count,
            } => {
                spec.validate()?;
                par::map_range(*count, |i| {
                    let (mut image, mask) = gen_scene(spec, first_index + i as u64)?;
                    quantize_image(&mut image);
                    Ok(Item {
                        image,
                        mask: Some(mask),
                    })
                })
            }
            GeneratorSpec::Noise {
                seed,
                height,
                width,
                count,
            } => par::map_range(*count, |i| {
                let mut image = gen_noise(*seed, i as u64, *height, *width)?;
                quantize_image(&mut image);
                Ok(Item { image, mask: None })
            }),
            GeneratorSpec::Texture {
                seed,
                height,
                width,
                count,
            } => par::map_range(*count, |i| {
                let mut image = gen_texture(*seed, i as u64, *height, *width)?;
                quantize_image(&mut image);
                Ok(Item { image, mask: None })
            }),
        };
        Ok(Dataset {
            id: id.to_string(),
            kind: self.kind(),
            items: items.into_iter().collect::<Result<_>>()?,
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub image: String,
    /// Relative mask path; absent when the ground truth is all background.
    pub mask: Option<String>,
    pub all_background: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub config_hash: Option<String>,
    pub dataset_id: String,
    pub kind: DatasetKind,
    pub generator_seed: u64,
    pub spec_hash: String,
    pub generator: GeneratorSpec,
    pub height: usize,
    pub width: usize,
    pub num_classes: Option<usize>,
    pub items: Vec<ManifestItem>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        bytes
    }

    /// Content hash of the serialized manifest. Paths inside are relative,
    /// so the hash does not depend on where the dataset lives.
    pub fn content_hash(&self) -> String {
        sha256_hex(&self.to_json())
    }
}

fn generator_dims(g: &GeneratorSpec) -> (usize, usize, Option<usize>) {
    match g {
        GeneratorSpec::Scenes { spec, .. } => (spec.height, spec.width, Some(spec.num_classes)),
        GeneratorSpec::Noise { height, width, .. } | GeneratorSpec::Texture { height, width, .. } => {
            (*height, *width, None)
        }
    }
}

/// Writes `<dir>/{images,masks}/NNNNN.png` and `<dir>/manifest.json`.
pub fn save_dataset(
    dataset: &Dataset,
    generator: &GeneratorSpec,
    dir: &Path,
    config_hash: Option<&str>,
) -> Result<DatasetManifest> {
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    if dataset.items.iter().any(|i| i.mask.is_some()) {
        std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    }
    let provenance = provenance_text(config_hash);
    let palette = label_palette();
    let entries: Vec<Result<ManifestItem>> = par::map_range(dataset.items.len(), |i| {
        let item = &dataset.items[i];
        let name = format!("{i:05}.png");
        let (h, w) = (item.image.height() as u32, item.image.width() as u32);
        let rgb = tensor_to_rgb8(&item.image)?;
        imageio::write_rgb(&images_dir.join(&name), w, h, &rgb, Some(&provenance))?;
        let mask = match &item.mask {
            Some(m) => {
                imageio::write_indexed(
                    &masks_dir.join(&name),
                    m.width() as u32,
                    m.height() as u32,
                    m.data(),
                    &palette,
                    Some(&provenance),
                )?;
                Some(format!("masks/{name}"))
            }
            None => None,
        };
        Ok(ManifestItem {
            image: format!("images/{name}"),
            all_background: mask.is_none(),
            mask,
        })
    });
    let (height, width, num_classes) = generator_dims(generator);
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        tool_version: crate::TOOL_VERSION.to_string(),
        config_hash: config_hash.map(str::to_string),
        dataset_id: dataset.id.clone(),
        kind: dataset.kind,
        generator_seed: generator.seed(),
        spec_hash: generator.hash(),
        generator: generator.clone(),
        height,
        width,
        num_classes,
        items: entries.into_iter().collect::<Result<_>>()?,
    };
    write_bytes(&dir.join(MANIFEST_FILE), &manifest.to_json())?;
    Ok(manifest)
}

pub fn provenance_text(config_hash: Option<&str>) -> String {
    match config_hash {
        Some(h) => format!("{}; config {h}", crate::TOOL_VERSION),
        None => crate::TOOL_VERSION.to_string(),
    }
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "{}: manifest format version {} (expected {MANIFEST_VERSION})",
            path.display(),
            manifest.format_version
        )));
    }
    Ok(manifest)
}

fn item_error(path: &Path, e: Error) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => Error::Format(format!("item {}: {other}", path.display())),
    }
}

/// Loads a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Dataset)> {
    let manifest = read_manifest(dir)?;
    let (h, w) = (manifest.height, manifest.width);
    let k = manifest.num_classes;
    let items: Vec<Result<Item>> = par::map(&manifest.items, |entry| {
        let img_path: PathBuf = dir.join(&entry.image);
        let png = imageio::read_png(&img_path).map_err(|e| item_error(&img_path, e))?;
        if png.samples != 3 || png.width as usize != w || png.height as usize != h {
            return Err(Error::Format(format!(
                "item {}: expected a {w}x{h} RGB image",
                img_path.display()
            )));
        }
        let image = imageio::rgb8_to_tensor(h, w, &png.data)?;
        let mask = match &entry.mask {
            Some(rel) => {
                let mask_path = dir.join(rel);
                let png = imageio::read_png(&mask_path).map_err(|e| item_error(&mask_path, e))?;
                if png.samples != 1 || png.width as usize != w || png.height as usize != h {
                    return Err(Error::Format(format!(
                        "item {}: expected a {w}x{h} label image",
                        mask_path.display()
                    )));
                }
                let limit = k.unwrap_or(256);
                if png.data.iter().any(|v| *v != IGNORE_LABEL && usize::from(*v) >= limit) {
                    return Err(Error::Format(format!(
                        "item {}: label outside 0..{limit}",
                        mask_path.display()
                    )));
                }
                Some(LabelField::from_vec(h, w, png.data)?)
            }
            None if entry.all_background => None,
            None => {
                return Err(Error::Format(format!(
                    "item {}: no mask and not marked all-background",
                    img_path.display()
                )))
            }
        };
        Ok(Item { image, mask })
    });
    let dataset = Dataset {
        id: manifest.dataset_id.clone(),
        kind: manifest.kind,
        items: items.into_iter().collect::<Result<_>>()?,
    };
    Ok((manifest, dataset))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_shapes_gives_all_background() {
        let spec = SceneSpec {
            min_shapes: 0,
            max_shapes: 0,
            ..SceneSpec::default()
        };
        let (_, mask) = gen_scene(&spec, 3).unwrap();
        assert_eq!(background_fraction(&mask), 1.0);
    }

    #[test]
    fn scenes_are_deterministic() {
        let spec = SceneSpec::default();
        assert_eq!(gen_scene(&spec, 5).unwrap(), gen_scene(&spec, 5).unwrap());
        assert_ne!(gen_scene(&spec, 5).unwrap().1, gen_scene(&spec, 6).unwrap().1);
    }

    #[test]
    fn scene_statistics() {
        let spec = SceneSpec::default();
        let mut total = 0.0;
        for i in 0..200 {
            let (image, mask) = gen_scene(&spec, i).unwrap();
            let frac = background_fraction(&mask);
            assert!((frac - 0.73).abs() <= 0.15, "scene {i}: {frac}");
            assert!(mask.data().iter().all(|v| usize::from(*v) < spec.num_classes));
            assert!(image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            total += frac;
        }
        let mean = total / 200.0;
        assert!((0.68..=0.78).contains(&mean), "mean background fraction {mean}");
    }

    #[test]
    fn scene_spec_validation() {
        let bad = [
            SceneSpec { num_classes: 1, ..SceneSpec::default() },
            SceneSpec { height: 8, ..SceneSpec::default() },
            SceneSpec { bg_fraction: 1.0, ..SceneSpec::default() },
            SceneSpec { min_shapes: 3, max_shapes: 2, ..SceneSpec::default() },
        ];
        for spec in bad {
            assert!(matches!(gen_scene(&spec, 0), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn extra_classes_reuse_shapes_with_new_colors() {
        assert_eq!(ShapeKind::for_class(5), ShapeKind::Disk);
        assert_ne!(class_color(5), class_color(1));
        let spec = SceneSpec { num_classes: 8, ..SceneSpec::default() };
        let (_, mask) = gen_scene(&spec, 1).unwrap();
        assert!(mask.data().iter().all(|v| *v < 8));
    }

    #[test]
    fn impossible_layout_is_a_generation_error() {
        let spec = SceneSpec {
            height: 16,
            width: 16,
            min_shapes: 40,
            max_shapes: 40,
            ..SceneSpec::default()
        };
        assert!(matches!(gen_scene(&spec, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn noise_statistics_and_determinism() {
        let img = gen_noise(1, 0, 64, 64).unwrap();
        let mean = img.data().iter().sum::<f64>() / img.data().len() as f64;
        assert!((0.45..=0.55).contains(&mean), "{mean}");
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(img, gen_noise(1, 0, 64, 64).unwrap());
        assert_ne!(img, gen_noise(1, 1, 64, 64).unwrap());
        assert!(gen_noise(1, 0, 0, 4).is_err());
    }

    fn autocorrelation(row: &[f64], lag: usize) -> f64 {
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let n = row.len() - lag;
        (0..n).map(|i| (row[i] - mean) * (row[i + lag] - mean)).sum::<f64>() / n as f64
    }

    #[test]
    fn grating_is_periodic_along_its_axis() {
        let mut p = texture_params(3, 0);
        p.family = TextureFamily::Grating;
        p.angle = 0.0;
        p.period = 7.0;
        let img = render_texture(&p, 16, 64);
        let row: Vec<f64> = (0..64).map(|x| img.get(0, 5, x)).collect();
        let best = (2..20)
            .max_by(|a, b| autocorrelation(&row, *a).total_cmp(&autocorrelation(&row, *b)))
            .unwrap();
        assert!(best.abs_diff(7) <= 1, "peak at lag {best}");
        // constant along the orthogonal axis
        assert!((0..16).all(|y| img.get(1, y, 9) == img.get(1, 0, 9)));
    }

    #[test]
    fn textures_cover_all_families_and_are_deterministic() {
        let mut seen = std::collections::HashSet::new();
        for i in 0..64 {
            let t = gen_texture(2, i, 32, 32).unwrap();
            assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(t, gen_texture(2, i, 32, 32).unwrap());
            let p = texture_params(2, i);
            assert!(p.palette.iter().all(far_from_classes));
            seen.insert(format!("{:?}", p.family));
        }
        assert_eq!(seen.len(), 4);
        assert!(gen_texture(2, 0, 4, 32).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let gen = GeneratorSpec::Scenes {
            spec: SceneSpec::default(),
            first_index: 0,
            count: 3,
        };
        let ds = gen.generate("train").unwrap();
        let manifest = save_dataset(&ds, &gen, dir.path(), Some("abc")).unwrap();
        let (m2, back) = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest, m2);
        assert_eq!(back, ds);

        let again = tempfile::tempdir().unwrap();
        save_dataset(&back, &gen, again.path(), Some("abc")).unwrap();
        for rel in ["images/00001.png", "masks/00001.png", "manifest.json"] {
            assert_eq!(
                std::fs::read(dir.path().join(rel)).unwrap(),
                std::fs::read(again.path().join(rel)).unwrap()
            );
        }
    }

    #[test]
    fn ood_round_trip_keeps_implicit_background() {
        let dir = tempfile::tempdir().unwrap();
        let gen = GeneratorSpec::Noise { seed: 4, height: 16, width: 16, count: 2 };
        let ds = gen.generate("noise").unwrap();
        save_dataset(&ds, &gen, dir.path(), None).unwrap();
        assert!(!dir.path().join("masks").exists());
        let (m, back) = load_dataset(dir.path()).unwrap();
        assert!(m.items.iter().all(|i| i.all_background && i.mask.is_none()));
        assert!(back.items[0].labels().data().iter().all(|v| *v == 0));
        assert_eq!(back, ds);
    }

    #[test]
    fn empty_dataset_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let gen = GeneratorSpec::Texture { seed: 1, height: 16, width: 16, count: 0 };
        let ds = gen.generate("texture").unwrap();
        let m = save_dataset(&ds, &gen, dir.path(), None).unwrap();
        assert!(m.items.is_empty());
        assert!(load_dataset(dir.path()).unwrap().1.is_empty());
    }

    #[test]
    fn spec_hash_tracks_spec() {
        let a = GeneratorSpec::Scenes { spec: SceneSpec::default(), first_index: 0, count: 4 };
        let b = GeneratorSpec::Scenes {
            spec: SceneSpec { seed: 8, ..SceneSpec::default() },
            first_index: 0,
            count: 4,
        };
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn missing_or_corrupt_items_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let gen = GeneratorSpec::Scenes { spec: SceneSpec::default(), first_index: 0, count: 2 };
        save_dataset(&gen.generate("x").unwrap(), &gen, dir.path(), None).unwrap();
        std::fs::write(dir.path().join("masks/00001.png"), b"junk").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("00001.png"), "{err}");
        std::fs::remove_file(dir.path().join("images/00000.png")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("00000.png"));
    }
}
