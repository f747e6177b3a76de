//! Label-co-transforming augmentation and dataset expansion.
//!
//! Geometric transforms move the image, every mask and every box together.
//! Photometric transforms touch pixels only and leave labels untouched.

use std::collections::BTreeMap;

use image::codecs::jpeg::JpegEncoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotationError, AnnotationSet, BinaryMask, BoxAnnotation, DefectClass, MaskAnnotation, Rect};
use crate::dataset::{DatasetManifest, Lineage, ManifestEntry, Split};
use crate::raster::Plane;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("augmentation rate {0} is below 1")]
    RateTooSmall(u32),
    #[error("entry {0} is not an original")]
    NotOriginal(String),
    #[error("invalid transform: {0}")]
    InvalidSpec(String),
    #[error("label geometry {label_w}x{label_h} does not match image {width}x{height}")]
    LabelMismatch {
        label_w: u32,
        label_h: u32,
        width: u32,
        height: u32,
    },
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error("jpeg round trip failed: {0}")]
    Codec(#[from] image::ImageError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum TransformKind {
    /// Clockwise quarter turns, 1..=3.
    Rotate90 { quarter_turns: u8 },
    /// Rotation about the image center, degrees clockwise.
    RotateSmall { angle_degrees: f64 },
    /// Horizontal shear about the image center: x' = x + factor * y.
    Shear { factor: f64 },
    FlipH,
    FlipV,
    /// Zoom about the image center; the frame size is kept.
    Scale { factor: f64 },
    Translate { dx: i32, dy: i32 },
    GaussianNoise { sigma: f64 },
    JpegCompress { quality: u8 },
    Blur { radius: u32 },
    Sharpen,
    Emboss,
}

impl TransformKind {
    pub fn is_geometric(&self) -> bool {
        matches!(
            self,
            TransformKind::Rotate90 { .. }
                | TransformKind::RotateSmall { .. }
                | TransformKind::Shear { .. }
                | TransformKind::FlipH
                | TransformKind::FlipV
                | TransformKind::Scale { .. }
                | TransformKind::Translate { .. }
        )
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: String| Err(AugmentError::InvalidSpec(m));
        match *self {
            TransformKind::Rotate90 { quarter_turns } if !(1..=3).contains(&quarter_turns) => {
                bad(format!("quarter_turns {quarter_turns} not in 1..=3"))
            }
            TransformKind::RotateSmall { angle_degrees } if !angle_degrees.is_finite() || angle_degrees.abs() >= 90.0 => {
                bad(format!("angle {angle_degrees} must be finite and below 90 degrees"))
            }
            TransformKind::Shear { factor } if !factor.is_finite() || factor.abs() >= 1.0 => {
                bad(format!("shear factor {factor} must lie in (-1, 1)"))
            }
            TransformKind::Scale { factor } if !(factor.is_finite() && factor > 0.0) => {
                bad(format!("scale factor {factor} must be positive"))
            }
            TransformKind::GaussianNoise { sigma } if !(sigma.is_finite() && sigma >= 0.0) => {
                bad(format!("sigma {sigma} must be non-negative"))
            }
            TransformKind::JpegCompress { quality } if !(1..=100).contains(&quality) => {
                bad(format!("jpeg quality {quality} not in 1..=100"))
            }
            TransformKind::Blur { radius } if radius > 32 => bad(format!("blur radius {radius} above 32")),
            _ => Ok(()),
        }
    }
}

/// One transform step; `seed` drives the stochastic kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    #[serde(default)]
    pub seed: u64,
}

impl TransformSpec {
    pub fn new(kind: TransformKind) -> Self {
        TransformSpec { kind, seed: 0 }
    }
}

impl From<TransformKind> for TransformSpec {
    fn from(kind: TransformKind) -> Self {
        TransformSpec::new(kind)
    }
}

/// A box removed because a transform pushed it entirely out of frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedBox {
    pub image_id: String,
    pub step: usize,
    pub class: DefectClass,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformLog {
    pub dropped_boxes: Vec<DroppedBox>,
}

#[derive(Debug, Clone)]
pub struct Augmented {
    pub image: Plane,
    pub labels: AnnotationSet,
    pub dropped: Vec<DroppedBox>,
}

/// Applies a composite transform left to right to an image and its labels.
pub fn apply_transform(image: &Plane, labels: &AnnotationSet, specs: &[TransformSpec]) -> Result<Augmented, AugmentError> {
    for s in specs {
        s.kind.validate()?;
    }
    for m in &labels.masks {
        if m.width != image.width() || m.height != image.height() {
            return Err(AugmentError::LabelMismatch {
                label_w: m.width,
                label_h: m.height,
                width: image.width(),
                height: image.height(),
            });
        }
    }
    let mut img = image.clone();
    let mut out = labels.clone();
    let mut dropped = Vec::new();
    for (step, spec) in specs.iter().enumerate() {
        if spec.kind.is_geometric() {
            let geom = Geometric::new(&spec.kind, img.width(), img.height());
            let masks = out
                .masks
                .iter()
                .map(|m| Ok(MaskAnnotation::from_mask(m.class, &geom.warp_mask(&m.to_mask()?))))
                .collect::<Result<Vec<_>, AnnotationError>>()?;
            let mut boxes = Vec::with_capacity(out.boxes.len());
            for b in &out.boxes {
                match geom.map_box(b.rect()) {
                    Some(r) => boxes.push(BoxAnnotation { x: r.x, y: r.y, w: r.w, h: r.h, ..b.clone() }),
                    None => dropped.push(DroppedBox {
                        image_id: out.image_id.clone(),
                        step,
                        class: b.class,
                        x: b.x,
                        y: b.y,
                        w: b.w,
                        h: b.h,
                    }),
                }
            }
            img = geom.warp_image(&img);
            out.masks = masks;
            out.boxes = boxes;
        } else {
            img = photometric(&img, spec)?;
        }
    }
    Ok(Augmented {
        image: img,
        labels: out,
        dropped,
    })
}

fn photometric(img: &Plane, spec: &TransformSpec) -> Result<Plane, AugmentError> {
    Ok(match spec.kind {
        TransformKind::GaussianNoise { sigma } => {
            if sigma == 0.0 {
                return Ok(img.clone());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let normal = Normal::new(0.0f32, sigma as f32).map_err(|e| AugmentError::InvalidSpec(e.to_string()))?;
            let mut out = img.clone();
            for v in out.data_mut() {
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
            out
        }
        TransformKind::JpegCompress { quality } => {
            let gray = img.to_gray8();
            let mut buf = Vec::new();
            JpegEncoder::new_with_quality(&mut buf, quality).encode_image(&gray)?;
            let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)?;
            Plane::from_gray8(&decoded.to_luma8())
        }
        TransformKind::Blur { radius } => img.box_mean(radius),
        TransformKind::Sharpen => img.convolve3x3([[0.0, -1.0, 0.0], [-1.0, 5.0, -1.0], [0.0, -1.0, 0.0]]),
        TransformKind::Emboss => img.convolve3x3([[-2.0, -1.0, 0.0], [-1.0, 1.0, 1.0], [0.0, 1.0, 2.0]]),
        _ => unreachable!("geometric kinds are handled by Geometric"),
    })
}

/// 2x2 linear part of an affine map about the image center.
#[derive(Debug, Clone, Copy)]
struct Affine {
    m: [[f64; 2]; 2],
    inv: [[f64; 2]; 2],
}

impl Affine {
    fn new(m: [[f64; 2]; 2]) -> Self {
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
        Affine { m, inv }
    }

    fn apply(a: &[[f64; 2]; 2], x: f64, y: f64) -> (f64, f64) {
        (a[0][0] * x + a[0][1] * y, a[1][0] * x + a[1][1] * y)
    }
}

enum Geometric {
    Rotate90 { turns: u8, width: u32, height: u32 },
    FlipH { width: u32, height: u32 },
    FlipV { width: u32, height: u32 },
    Translate { dx: i64, dy: i64, width: u32, height: u32 },
    Affine { map: Affine, width: u32, height: u32 },
}

impl Geometric {
    fn new(kind: &TransformKind, width: u32, height: u32) -> Self {
        match *kind {
            TransformKind::Rotate90 { quarter_turns } => Geometric::Rotate90 {
                turns: quarter_turns % 4,
                width,
                height,
            },
            TransformKind::FlipH => Geometric::FlipH { width, height },
            TransformKind::FlipV => Geometric::FlipV { width, height },
            TransformKind::Translate { dx, dy } => Geometric::Translate {
                dx: dx as i64,
                dy: dy as i64,
                width,
                height,
            },
            TransformKind::RotateSmall { angle_degrees } => {
                let (s, c) = angle_degrees.to_radians().sin_cos();
                Geometric::Affine {
                    map: Affine::new([[c, -s], [s, c]]),
                    width,
                    height,
                }
            }
            TransformKind::Shear { factor } => Geometric::Affine {
                map: Affine::new([[1.0, factor], [0.0, 1.0]]),
                width,
                height,
            },
            TransformKind::Scale { factor } => Geometric::Affine {
                map: Affine::new([[factor, 0.0], [0.0, factor]]),
                width,
                height,
            },
            _ => unreachable!("photometric kind"),
        }
    }

    fn output_size(&self) -> (u32, u32) {
        match *self {
            Geometric::Rotate90 { turns, width, height } if turns % 2 == 1 => (height, width),
            Geometric::Rotate90 { width, height, .. }
            | Geometric::FlipH { width, height }
            | Geometric::FlipV { width, height }
            | Geometric::Translate { width, height, .. }
            | Geometric::Affine { width, height, .. } => (width, height),
        }
    }

    /// Source pixel for an output pixel under the integer-exact transforms.
    fn source_pixel(&self, c: u32, r: u32) -> Option<(u32, u32)> {
        match *self {
            Geometric::Rotate90 { turns, width, height } => {
                let (mut sc, mut sr) = (c, r);
                // undo one clockwise turn at a time; dims alternate
                let (mut w, mut h) = self.output_size();
                for _ in 0..turns {
                    // output of one turn is (h_in x w_in); in(c, r) with c = r_out, r = h_in - 1 - c_out
                    let (pc, pr) = (sr, w - 1 - sc);
                    sc = pc;
                    sr = pr;
                    std::mem::swap(&mut w, &mut h);
                }
                debug_assert_eq!((w, h), (width, height));
                Some((sc, sr))
            }
            Geometric::FlipH { width, .. } => Some((width - 1 - c, r)),
            Geometric::FlipV { height, .. } => Some((c, height - 1 - r)),
            Geometric::Translate { dx, dy, width, height } => {
                let (sc, sr) = (c as i64 - dx, r as i64 - dy);
                ((0..width as i64).contains(&sc) && (0..height as i64).contains(&sr)).then_some((sc as u32, sr as u32))
            }
            Geometric::Affine { .. } => unreachable!(),
        }
    }

    /// Continuous source point of the output pixel center under an affine map.
    fn affine_source(map: &Affine, width: u32, height: u32, c: u32, r: u32) -> (f64, f64) {
        let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
        let (u, v) = Affine::apply(&map.inv, c as f64 + 0.5 - cx, r as f64 + 0.5 - cy);
        (u + cx, v + cy)
    }

    fn warp_image(&self, img: &Plane) -> Plane {
        let (ow, oh) = self.output_size();
        match self {
            Geometric::Affine { map, width, height } => Plane::from_fn(ow, oh, |c, r| {
                let (u, v) = Self::affine_source(map, *width, *height, c, r);
                bilinear(img, u - 0.5, v - 0.5)
            }),
            _ => Plane::from_fn(ow, oh, |c, r| match self.source_pixel(c, r) {
                Some((sc, sr)) => img.get(sc, sr),
                None => 0.0,
            }),
        }
    }

    /// Nearest-neighbour warp at pixel centers.
    fn warp_mask(&self, mask: &BinaryMask) -> BinaryMask {
        let (ow, oh) = self.output_size();
        match self {
            Geometric::Affine { map, width, height } => BinaryMask::from_fn(ow, oh, |c, r| {
                let (u, v) = Self::affine_source(map, *width, *height, c, r);
                u >= 0.0 && v >= 0.0 && u < *width as f64 && v < *height as f64 && mask.get(u as u32, v as u32)
            }),
            _ => BinaryMask::from_fn(ow, oh, |c, r| self.source_pixel(c, r).is_some_and(|(sc, sr)| mask.get(sc, sr))),
        }
    }

    /// Axis-aligned hull of the transformed box, clipped to the output frame.
    fn map_box(&self, b: Rect) -> Option<Rect> {
        let (ow, oh) = self.output_size();
        let (x0, y0, x1, y1) = (b.x as f64, b.y as f64, b.right() as f64, b.bottom() as f64);
        let corners = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)];
        let mapped: Vec<(f64, f64)> = corners.iter().map(|&(x, y)| self.map_point(x, y)).collect();
        let min_x = mapped.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let max_x = mapped.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let min_y = mapped.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let max_y = mapped.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        const EPS: f64 = 1e-9;
        let left = ((min_x + EPS).floor()).max(0.0);
        let top = ((min_y + EPS).floor()).max(0.0);
        let right = ((max_x - EPS).ceil()).min(ow as f64);
        let bottom = ((max_y - EPS).ceil()).min(oh as f64);
        if right - left < 1.0 || bottom - top < 1.0 {
            return None;
        }
        Some(Rect::new(left as u32, top as u32, (right - left) as u32, (bottom - top) as u32))
    }

    /// Forward map of a continuous point (pixel-corner coordinates).
    fn map_point(&self, x: f64, y: f64) -> (f64, f64) {
        match *self {
            Geometric::Rotate90 { turns, width, height } => {
                let (mut px, mut py) = (x, y);
                let (mut w, mut h) = (width as f64, height as f64);
                for _ in 0..turns {
                    let (nx, ny) = (h - py, px);
                    px = nx;
                    py = ny;
                    std::mem::swap(&mut w, &mut h);
                }
                (px, py)
            }
            Geometric::FlipH { width, .. } => (width as f64 - x, y),
            Geometric::FlipV { height, .. } => (x, height as f64 - y),
            Geometric::Translate { dx, dy, .. } => (x + dx as f64, y + dy as f64),
            Geometric::Affine { ref map, width, height } => {
                let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
                let (u, v) = Affine::apply(&map.m, x - cx, y - cy);
                (u + cx, v + cy)
            }
        }
    }
}

/// Bilinear sample in pixel-index space; outside the frame reads as 0.
fn bilinear(img: &Plane, x: f64, y: f64) -> f32 {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = x.floor() as i64;
    let y0 = y.floor() as i64;
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    let at = |c: i64, r: i64| -> f32 {
        if c < 0 || r < 0 || c >= w || r >= h {
            0.0
        } else {
            img.get(c as u32, r as u32)
        }
    };
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
    let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Parameter ranges the random spec generator draws from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    pub rotate_small_degrees: f64,
    pub shear: f64,
    pub scale: (f64, f64),
    pub translate_px: i32,
    pub noise_sigma: f64,
    pub jpeg_quality: (u8, u8),
    pub blur_radius: (u32, u32),
    /// Maximum number of chained steps per augmented sample.
    pub max_steps: usize,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            rotate_small_degrees: 5.0,
            shear: 0.1,
            scale: (0.9, 1.1),
            translate_px: 8,
            noise_sigma: 0.05,
            jpeg_quality: (40, 95),
            blur_radius: (1, 2),
            max_steps: 2,
        }
    }
}

impl AugmentRanges {
    /// Draws one random transform step.
    pub fn sample(&self, rng: &mut impl Rng) -> TransformSpec {
        let kind = match rng.random_range(0..12u8) {
            0 => TransformKind::Rotate90 {
                quarter_turns: rng.random_range(1..=3),
            },
            1 => TransformKind::RotateSmall {
                angle_degrees: rng.random_range(-self.rotate_small_degrees..=self.rotate_small_degrees),
            },
            2 => TransformKind::Shear {
                factor: rng.random_range(-self.shear..=self.shear),
            },
            3 => TransformKind::FlipH,
            4 => TransformKind::FlipV,
            5 => TransformKind::Scale {
                factor: rng.random_range(self.scale.0..=self.scale.1),
            },
            6 => TransformKind::Translate {
                dx: rng.random_range(-self.translate_px..=self.translate_px),
                dy: rng.random_range(-self.translate_px..=self.translate_px),
            },
            7 => TransformKind::GaussianNoise {
                sigma: rng.random_range(0.0..=self.noise_sigma),
            },
            8 => TransformKind::JpegCompress {
                quality: rng.random_range(self.jpeg_quality.0..=self.jpeg_quality.1),
            },
            9 => TransformKind::Blur {
                radius: rng.random_range(self.blur_radius.0..=self.blur_radius.1),
            },
            10 => TransformKind::Sharpen,
            _ => TransformKind::Emboss,
        };
        TransformSpec { kind, seed: rng.next_u64() }
    }

    pub fn sample_composite(&self, rng: &mut impl Rng) -> Vec<TransformSpec> {
        let steps = rng.random_range(1..=self.max_steps.max(1));
        (0..steps).map(|_| self.sample(rng)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    /// Output size as a multiple of the base size, originals included.
    pub rate: u32,
    pub seed: u64,
    #[serde(default)]
    pub ranges: AugmentRanges,
}

impl AugmentationPlan {
    pub fn new(rate: u32, seed: u64) -> Self {
        AugmentationPlan {
            rate,
            seed,
            ranges: AugmentRanges::default(),
        }
    }
}

/// Per-sample seed from (plan seed, parent id, copy index); independent of
/// iteration order so expansion can run in any order.
pub fn derive_seed(plan_seed: u64, parent_id: &str, index: u32) -> u64 {
    // FNV-1a over the id, then splitmix64 finalization
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in parent_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h ^ plan_seed.rotate_left(17) ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn augmented_id(parent_id: &str, index: u32) -> String {
    format!("{parent_id}~aug{index:02}")
}

/// Expands original entries to `rate * |base|` entries: every original plus
/// `rate - 1` augmented children each.
pub fn expand_dataset(base: &[ManifestEntry], plan: &AugmentationPlan) -> Result<Vec<ManifestEntry>, AugmentError> {
    if plan.rate < 1 {
        return Err(AugmentError::RateTooSmall(plan.rate));
    }
    if let Some(e) = base.iter().find(|e| !e.lineage.is_original()) {
        return Err(AugmentError::NotOriginal(e.image_id.clone()));
    }
    let mut out = Vec::with_capacity(base.len() * plan.rate as usize);
    for entry in base {
        out.push(entry.clone());
        for k in 1..plan.rate {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, &entry.image_id, k));
            out.push(ManifestEntry {
                image_id: augmented_id(&entry.image_id, k),
                resolution: entry.resolution,
                crop_region: entry.crop_region,
                lineage: Lineage::Augmented {
                    parent_image_id: entry.image_id.clone(),
                    transform: plan.ranges.sample_composite(&mut rng),
                },
            });
        }
    }
    Ok(out)
}

/// Expands the training originals of a manifest; test entries are carried
/// over untouched and augmented children are always assigned to Train.
pub fn expand_manifest(manifest: &DatasetManifest, plan: &AugmentationPlan) -> Result<DatasetManifest, AugmentError> {
    let train: Vec<ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.lineage.is_original() && manifest.split_of(&e.image_id) == Some(Split::Train))
        .cloned()
        .collect();
    let expanded = expand_dataset(&train, plan)?;
    let mut out = DatasetManifest::new(format!("{}-x{}", manifest.dataset_id, plan.rate), manifest.split_seed);
    out.split = manifest
        .split
        .iter()
        .filter(|(id, _)| manifest.entries.iter().any(|e| &e.image_id == *id && e.lineage.is_original()))
        .map(|(k, v)| (k.clone(), *v))
        .collect();
    for e in &expanded {
        out.split.entry(e.image_id.clone()).or_insert(Split::Train);
    }
    out.entries = expanded;
    out.entries.extend(
        manifest
            .entries
            .iter()
            .filter(|e| e.lineage.is_original() && manifest.split_of(&e.image_id) == Some(Split::Test))
            .cloned(),
    );
    Ok(out)
}

/// Ids whose accuracy is below `threshold`, worst first.
pub fn select_for_augmentation(eval: &BTreeMap<String, f64>, threshold: f64) -> Vec<String> {
    let mut low: Vec<(&String, f64)> = eval.iter().filter(|(_, &a)| a < threshold).map(|(k, &a)| (k, a)).collect();
    low.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    low.into_iter().map(|(k, _)| k.clone()).collect()
}
