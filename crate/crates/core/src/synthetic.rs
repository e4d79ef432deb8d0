//! Procedural face sketches with per-pixel labels.
//!
//! Faces are layered back to front (hair, skin, then the parts) in a local
//! frame that is jittered by a seeded similarity transform. A single
//! `expression` value bends brows and lips and opens the mouth together, so
//! component geometry is correlated across the face.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

pub const NUM_CLASSES: usize = 11;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "background",
    "skin",
    "l-brow",
    "r-brow",
    "l-eye",
    "r-eye",
    "nose",
    "u-lip",
    "inner-mouth",
    "l-lip",
    "hair",
];

pub mod class {
    pub const BACKGROUND: u8 = 0;
    pub const SKIN: u8 = 1;
    pub const L_BROW: u8 = 2;
    pub const R_BROW: u8 = 3;
    pub const L_EYE: u8 = 4;
    pub const R_EYE: u8 = 5;
    pub const NOSE: u8 = 6;
    pub const U_LIP: u8 = 7;
    pub const INNER_MOUTH: u8 = 8;
    pub const L_LIP: u8 = 9;
    pub const HAIR: u8 = 10;
}

/// Canvas size the local face geometry is authored for.
const REFERENCE_SIZE: f64 = 96.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PoseJitter {
    /// Maximum translation in pixels (at the reference size), each axis.
    pub max_shift: f64,
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
}

impl Default for PoseJitter {
    fn default() -> Self {
        Self {
            max_shift: 3.0,
            max_rotation_deg: 8.0,
            scale_range: (0.88, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    /// RGB base color per class.
    pub base: [[f64; 3]; NUM_CLASSES],
    /// Per-sample shift of each base color channel.
    pub jitter: f64,
    /// Per-pixel noise amplitude.
    pub noise: f64,
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            base: [
                [0.45, 0.55, 0.60],
                [0.87, 0.70, 0.58],
                [0.33, 0.22, 0.15],
                [0.33, 0.22, 0.15],
                [0.93, 0.93, 0.95],
                [0.93, 0.93, 0.95],
                [0.78, 0.58, 0.48],
                [0.78, 0.33, 0.36],
                [0.32, 0.07, 0.09],
                [0.78, 0.33, 0.36],
                [0.22, 0.14, 0.09],
            ],
            jitter: 0.06,
            noise: 0.04,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaceSketchParams {
    pub seed: u64,
    /// 0 = neutral, 1 = broad open smile.
    pub expression: f64,
    /// Square canvas side in pixels.
    pub size: usize,
    pub pose: PoseJitter,
    pub palette: Palette,
}

impl FaceSketchParams {
    pub fn new(seed: u64, expression: f64) -> Self {
        Self {
            seed,
            expression,
            size: 96,
            pose: PoseJitter::default(),
            palette: Palette::default(),
        }
    }
}

/// A rendered face with labels and edge ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `1 x 3 x H x W`, values in `[0, 1]`.
    pub image: Tensor,
    pub labels: LabelMap,
    pub edge: LabelMap,
}

impl Sample {
    pub fn new(image: Tensor, labels: LabelMap) -> Self {
        let edge = derive_edge_gt(&labels);
        Self { image, labels, edge }
    }
}

/// Shapes in the face-local frame (reference pixels, y pointing down).
#[derive(Clone, Debug)]
enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    /// Tapered arched band, used for the brows.
    Arch { cx: f64, cy: f64, half_width: f64, arch: f64, half_thickness: f64 },
    /// Region between two curves of the mouth, `|x - cx| < half_width`.
    Mouth { part: MouthPart, geom: MouthGeometry },
}

#[derive(Clone, Copy, Debug)]
enum MouthPart {
    Upper,
    Inner,
    Lower,
}

#[derive(Clone, Copy, Debug)]
struct MouthGeometry {
    cy: f64,
    half_width: f64,
    smile: f64,
    opening: f64,
    upper: f64,
    lower: f64,
}

impl MouthGeometry {
    /// (centerline y, half opening, upper lip thickness, lower lip thickness) at `x`.
    fn profile(&self, x: f64) -> Option<(f64, f64, f64, f64)> {
        let t = x / self.half_width;
        if t.abs() >= 1.0 {
            return None;
        }
        let line = self.cy + self.smile * (1.0 - t * t) - self.smile / 2.0;
        let half_open = 0.5 * self.opening * (1.0 - t * t).sqrt();
        Some((line, half_open, self.upper * (1.0 - 0.5 * t * t), self.lower * (1.0 - 0.6 * t * t)))
    }
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
            Shape::Arch {
                cx,
                cy,
                half_width,
                arch,
                half_thickness,
            } => {
                let t = (x - cx) / half_width;
                if t.abs() > 1.0 {
                    return false;
                }
                let center = cy - arch * (1.0 - t * t);
                (y - center).abs() <= half_thickness * (1.0 - 0.35 * t * t)
            }
            Shape::Mouth { part, geom } => match geom.profile(x) {
                None => false,
                Some((line, half_open, up, low)) => {
                    let top = line - half_open;
                    let bottom = line + half_open;
                    match part {
                        MouthPart::Inner => y > top && y < bottom,
                        MouthPart::Upper => y <= top && y >= top - up,
                        MouthPart::Lower => y >= bottom && y <= bottom + low,
                    }
                }
            },
        }
    }

    /// Points on or around the shape's outline, for the canvas check.
    fn outline(&self) -> Vec<(f64, f64)> {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => (0..64)
                .map(|i| {
                    let a = i as f64 * std::f64::consts::TAU / 64.0;
                    (cx + rx * a.cos(), cy + ry * a.sin())
                })
                .collect(),
            Shape::Arch {
                cx,
                cy,
                half_width,
                arch,
                half_thickness,
            } => {
                let (top, bot) = (cy - arch - half_thickness, cy + half_thickness);
                vec![
                    (cx - half_width, top),
                    (cx + half_width, top),
                    (cx - half_width, bot),
                    (cx + half_width, bot),
                ]
            }
            Shape::Mouth { geom, .. } => {
                let spread = 0.5 * (geom.smile + geom.opening);
                let (top, bot) = (geom.cy - spread - geom.upper, geom.cy + spread + geom.lower);
                vec![
                    (-geom.half_width, top),
                    (geom.half_width, top),
                    (-geom.half_width, bot),
                    (geom.half_width, bot),
                ]
            }
        }
    }
}

/// Layered components, back to front.
fn face_layers(expression: f64) -> Vec<(u8, &'static str, Shape)> {
    let e = expression.clamp(0.0, 1.0);
    let brow = |cx: f64| Shape::Arch {
        cx,
        cy: -13.5 - 2.0 * e,
        half_width: 8.5,
        arch: 1.0 + 2.5 * e,
        half_thickness: 2.9,
    };
    let eye = |cx: f64| Shape::Ellipse {
        cx,
        cy: -3.0,
        rx: 7.5,
        ry: 4.4 - 1.0 * e,
    };
    let mouth = MouthGeometry {
        cy: 28.0,
        half_width: 12.0 + 2.0 * e,
        smile: 3.5 * e,
        opening: 3.6 + 5.4 * e,
        upper: 5.0,
        lower: 6.0,
    };
    vec![
        (class::HAIR, "hair", Shape::Ellipse { cx: 0.0, cy: -8.0, rx: 38.0, ry: 36.0 }),
        (class::SKIN, "skin", Shape::Ellipse { cx: 0.0, cy: 4.0, rx: 29.0, ry: 39.0 }),
        (class::L_BROW, "l-brow", brow(-13.0)),
        (class::R_BROW, "r-brow", brow(13.0)),
        (class::L_EYE, "l-eye", eye(-13.0)),
        (class::R_EYE, "r-eye", eye(13.0)),
        (class::NOSE, "nose", Shape::Ellipse { cx: 0.0, cy: 9.0, rx: 4.5, ry: 7.5 }),
        (class::U_LIP, "u-lip", Shape::Mouth { part: MouthPart::Upper, geom: mouth }),
        (class::INNER_MOUTH, "inner-mouth", Shape::Mouth { part: MouthPart::Inner, geom: mouth }),
        (class::L_LIP, "l-lip", Shape::Mouth { part: MouthPart::Lower, geom: mouth }),
    ]
}

/// Similarity transform from the face-local frame to canvas pixels.
struct Pose {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
    scale: f64,
}

impl Pose {
    fn to_canvas(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.cx + self.scale * (self.cos * x - self.sin * y),
            self.cy + self.scale * (self.sin * x + self.cos * y),
        )
    }

    fn to_local(&self, px: f64, py: f64) -> (f64, f64) {
        let (dx, dy) = ((px - self.cx) / self.scale, (py - self.cy) / self.scale);
        (self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy)
    }
}

/// Render one labeled face. Deterministic in `params`.
pub fn generate_sample(params: &FaceSketchParams) -> Result<Sample> {
    let size = params.size;
    let unit = size as f64 / REFERENCE_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let jitter = &params.pose;
    let sym = |rng: &mut ChaCha8Rng, r: f64| if r > 0.0 { rng.gen_range(-r..r) } else { 0.0 };
    let shift_x = sym(&mut rng, jitter.max_shift) * unit;
    let shift_y = sym(&mut rng, jitter.max_shift) * unit;
    let angle = sym(&mut rng, jitter.max_rotation_deg).to_radians();
    let (s0, s1) = jitter.scale_range;
    let scale = if s1 > s0 { rng.gen_range(s0..s1) } else { s0 } * unit;
    let pose = Pose {
        cx: size as f64 / 2.0 + shift_x,
        cy: size as f64 / 2.0 + shift_y,
        cos: angle.cos(),
        sin: angle.sin(),
        scale,
    };

    let layers = face_layers(params.expression);
    for (_, name, shape) in &layers {
        for (x, y) in shape.outline() {
            let (px, py) = pose.to_canvas(x, y);
            if px < 0.0 || py < 0.0 || px > size as f64 || py > size as f64 {
                return Err(Error::Generation {
                    component: name.to_string(),
                });
            }
        }
    }

    let pal = &params.palette;
    let mut colors = pal.base;
    for c in colors.iter_mut() {
        for v in c.iter_mut() {
            *v += sym(&mut rng, pal.jitter);
        }
    }
    // Background gets its own random hue plus a soft vertical gradient.
    for v in colors[class::BACKGROUND as usize].iter_mut() {
        *v = rng.gen_range(0.15..0.85);
    }
    let gradient = sym(&mut rng, 0.15);
    // Iris offset follows gaze jitter.
    let gaze = sym(&mut rng, 1.5);

    let mut labels = LabelMap::new(size, size);
    let mut image = Tensor::zeros(1, 3, size, size);
    let plane = size * size;
    for py in 0..size {
        for px in 0..size {
            let (x, y) = pose.to_local(px as f64 + 0.5, py as f64 + 0.5);
            let mut label = class::BACKGROUND;
            for (cls, _, shape) in &layers {
                if shape.contains(x, y) {
                    label = *cls;
                }
            }
            labels.set(py, px, label);
            let mut rgb = colors[label as usize];
            if label == class::BACKGROUND {
                let g = gradient * (py as f64 / size as f64 - 0.5);
                rgb.iter_mut().for_each(|v| *v += g);
            }
            if label == class::L_EYE || label == class::R_EYE {
                let ex = if label == class::L_EYE { -13.0 } else { 13.0 };
                let (dx, dy) = (x - ex - gaze, y + 3.0);
                if dx * dx + dy * dy < 2.8 * 2.8 {
                    rgb = [0.18, 0.12, 0.08];
                }
            }
            let idx = py * size + px;
            for (ch, v) in rgb.iter().enumerate() {
                image.data[ch * plane + idx] = (v + sym(&mut rng, pal.noise)).clamp(0.0, 1.0);
            }
        }
    }
    Ok(Sample::new(image, labels))
}

/// Binary mask of pixels whose label differs from any in-bounds 4-neighbour.
pub fn derive_edge_gt(labels: &LabelMap) -> LabelMap {
    let (h, w) = (labels.h, labels.w);
    let mut edge = LabelMap::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let v = labels.get(y, x);
            let differs = (y > 0 && labels.get(y - 1, x) != v)
                || (y + 1 < h && labels.get(y + 1, x) != v)
                || (x > 0 && labels.get(y, x - 1) != v)
                || (x + 1 < w && labels.get(y, x + 1) != v);
            edge.set(y, x, differs as u8);
        }
    }
    edge
}

/// Rotation range (degrees, open interval) used by [`augment`].
pub const AUGMENT_ROTATION_DEG: f64 = 30.0;
/// Scale range (open interval) used by [`augment`].
pub const AUGMENT_SCALE: (f64, f64) = (0.75, 1.25);

/// Draw a rotation angle in degrees and a scale factor from `seed`.
pub fn sample_augmentation(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |lo: f64, hi: f64| loop {
        let v = rng.gen_range(lo..hi);
        if v > lo {
            break v;
        }
    };
    let angle = draw(-AUGMENT_ROTATION_DEG, AUGMENT_ROTATION_DEG);
    let scale = draw(AUGMENT_SCALE.0, AUGMENT_SCALE.1);
    (angle, scale)
}

/// Random rotation and scale about the canvas centre.
pub fn augment(sample: &Sample, seed: u64) -> Sample {
    let (angle, scale) = sample_augmentation(seed);
    augment_with(sample, angle, scale)
}

/// Rotate by `angle_deg` and scale by `scale` about the canvas centre. The
/// image is resampled bilinearly, labels by nearest neighbour; uncovered
/// areas become black background. The edge mask is re-derived from the
/// transformed labels.
pub fn augment_with(sample: &Sample, angle_deg: f64, scale: f64) -> Sample {
    let (h, w) = (sample.labels.h, sample.labels.w);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let plane = h * w;
    let mut labels = LabelMap::new(h, w);
    let mut image = Tensor::zeros(1, 3, h, w);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = ((x as f64 - cx) / scale, (y as f64 - cy) / scale);
            let sx = cx + cos * dx + sin * dy;
            let sy = cy - sin * dx + cos * dy;
            let (nx, ny) = (sx.round(), sy.round());
            if nx >= 0.0 && ny >= 0.0 && nx < w as f64 && ny < h as f64 {
                labels.set(y, x, sample.labels.get(ny as usize, nx as usize));
            }
            if sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64 {
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                for ch in 0..3 {
                    let src = sample.image.plane(0, ch);
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    image.data[ch * plane + y * w + x] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    Sample::new(image, labels)
}

/// Dataset-level bookkeeping for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub seed: u64,
    pub split: Split,
    pub expression: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            _ => None,
        }
    }
}

/// Seeds and expressions for a dataset of `train + val` samples.
pub fn dataset_manifest(train: usize, val: usize, seed: u64) -> Vec<ManifestEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..train + val)
        .map(|i| ManifestEntry {
            seed: rng.gen(),
            expression: rng.gen_range(0.0..=1.0),
            split: if i < train { Split::Train } else { Split::Val },
        })
        .collect()
}

/// Render every manifest entry at the given canvas size.
pub fn render_manifest(entries: &[ManifestEntry], size: usize) -> Result<Vec<Sample>> {
    entries
        .iter()
        .map(|e| {
            generate_sample(&FaceSketchParams {
                size,
                ..FaceSketchParams::new(e.seed, e.expression)
            })
        })
        .collect()
}
