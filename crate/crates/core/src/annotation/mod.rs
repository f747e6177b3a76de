//! Canonical annotation data model: defect classes, image records, masks,
//! boxes and per-image annotation sets.
//!
//! Masks are stored as row-major run-length encodings whose first run counts
//! background pixels, so two equal masks always serialize to equal bytes.

mod geometry;
mod rle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use geometry::{grid_bbox, mask_to_bbox, polygon_to_mask};
pub use rle::{rle_decode, rle_encode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnotationError {
    #[error("run lengths sum to {actual}, expected {expected} ({width}x{height})")]
    SumMismatch {
        expected: u64,
        actual: u64,
        width: u32,
        height: u32,
    },
    #[error("zero-length run at position {0}")]
    ZeroRun(usize),
    #[error("degenerate polygon: {0} vertices, need at least 3")]
    DegeneratePolygon(usize),
    #[error("empty dimensions {width}x{height}")]
    EmptyDimensions { width: u32, height: u32 },
    #[error("{class} is a {actual:?} class, expected {expected:?}")]
    WrongTask {
        class: DefectClass,
        expected: Task,
        actual: Task,
    },
    #[error("box ({x},{y},{w},{h}) does not fit a {width}x{height} image")]
    BoxOutOfFrame {
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        width: u32,
        height: u32,
    },
    #[error("box score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("mask is {got_w}x{got_h}, image is {width}x{height}")]
    MaskDimensions {
        got_w: u32,
        got_h: u32,
        width: u32,
        height: u32,
    },
    #[error("more than one mask for {0}")]
    DuplicateMask(DefectClass),
    #[error("elapsed labeling time is only allowed on human annotations")]
    ElapsedOnNonHuman,
    #[error("elapsed labeling time {0} must be finite and non-negative")]
    BadElapsed(f64),
    #[error("model boxes need a score, human boxes must not carry one")]
    ScoreProvenance,
}

/// Recognition task a defect class is modeled with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    Segmentation,
    Detection,
}

/// Macroscale defect of interest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DefectClass {
    /// Parasitic polycrystalline growth; measured by areal spread.
    PolycrystallineDefect,
    /// Localized bright hot spot on the growth surface.
    CenterDefect,
    /// Rough segment of the crystal outline.
    EdgeDefect,
}

impl DefectClass {
    pub const ALL: [DefectClass; 3] = [
        DefectClass::PolycrystallineDefect,
        DefectClass::CenterDefect,
        DefectClass::EdgeDefect,
    ];

    pub fn task(self) -> Task {
        match self {
            DefectClass::PolycrystallineDefect => Task::Segmentation,
            DefectClass::CenterDefect | DefectClass::EdgeDefect => Task::Detection,
        }
    }

    pub fn is_segmentation(self) -> bool {
        self.task() == Task::Segmentation
    }

    pub fn segmentation_classes() -> impl Iterator<Item = DefectClass> {
        Self::ALL.into_iter().filter(|c| c.task() == Task::Segmentation)
    }

    pub fn detection_classes() -> impl Iterator<Item = DefectClass> {
        Self::ALL.into_iter().filter(|c| c.task() == Task::Detection)
    }
}

impl std::fmt::Display for DefectClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DefectClass::PolycrystallineDefect => "PolycrystallineDefect",
            DefectClass::CenterDefect => "CenterDefect",
            DefectClass::EdgeDefect => "EdgeDefect",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImageStatus {
    Raw,
    Filtered,
    Preprocessed,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    Blackout,
    Noise,
}

/// One captured frame of a growth run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub growth_run_id: String,
    /// Unix seconds.
    pub captured_at: i64,
    pub width: u32,
    pub height: u32,
    pub storage_path: String,
    pub status: ImageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reject_reason: Option<RejectReason>,
}

impl ImageRecord {
    pub fn is_valid(&self) -> bool {
        self.width >= 1
            && self.height >= 1
            && (self.status == ImageStatus::Rejected) == self.reject_reason.is_some()
    }

    pub fn reject(&mut self, reason: RejectReason) {
        self.status = ImageStatus::Rejected;
        self.reject_reason = Some(reason);
    }
}

/// Axis-aligned integer rectangle: top-left corner plus size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Rect { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.w >= 1 && self.h >= 1 && self.right() <= width as u64 && self.bottom() <= height as u64
    }

    pub fn intersection_area(&self, other: &Rect) -> u64 {
        let x0 = self.x.max(other.x) as u64;
        let y0 = self.y.max(other.y) as u64;
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        if x1 <= x0 || y1 <= y0 {
            0
        } else {
            (x1 - x0) * (y1 - y0)
        }
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn contains(&self, col: u32, row: u32) -> bool {
        col >= self.x && (col as u64) < self.right() && row >= self.y && (row as u64) < self.bottom()
    }
}

/// Dense binary grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![value; width as usize * height as usize],
        }
    }

    /// Panics if `bits.len() != width * height`.
    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width as usize * height as usize, "mask length must equal width*height");
        BinaryMask { width, height, bits }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(c, r));
            }
        }
        BinaryMask { width, height, bits }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, col: u32, row: u32) -> bool {
        self.bits[row as usize * self.width as usize + col as usize]
    }

    #[inline]
    pub fn set(&mut self, col: u32, row: u32, value: bool) {
        let w = self.width as usize;
        self.bits[row as usize * w + col as usize] = value;
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// Foreground pixel coordinates as (col, row).
    pub fn foreground(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| ((i as u32) % w, (i as u32) / w))
    }
}

/// Per-class pixel mask of a segmentation defect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskAnnotation {
    pub class: DefectClass,
    pub width: u32,
    pub height: u32,
    pub rle: Vec<u32>,
}

impl MaskAnnotation {
    pub fn from_mask(class: DefectClass, mask: &BinaryMask) -> Self {
        MaskAnnotation {
            class,
            width: mask.width(),
            height: mask.height(),
            rle: rle_encode(mask),
        }
    }

    pub fn empty(class: DefectClass, width: u32, height: u32) -> Self {
        Self::from_mask(class, &BinaryMask::new(width, height))
    }

    pub fn to_mask(&self) -> Result<BinaryMask, AnnotationError> {
        rle_decode(&self.rle, self.width, self.height)
    }

    pub fn foreground_count(&self) -> u64 {
        self.rle.iter().skip(1).step_by(2).map(|&r| r as u64).sum()
    }

    pub fn validate(&self) -> Result<(), AnnotationError> {
        if self.class.task() != Task::Segmentation {
            return Err(AnnotationError::WrongTask {
                class: self.class,
                expected: Task::Segmentation,
                actual: self.class.task(),
            });
        }
        if self.width == 0 || self.height == 0 {
            return Err(AnnotationError::EmptyDimensions {
                width: self.width,
                height: self.height,
            });
        }
        if let Some(pos) = self.rle.iter().skip(1).position(|&r| r == 0) {
            return Err(AnnotationError::ZeroRun(pos + 1));
        }
        let actual: u64 = self.rle.iter().map(|&r| r as u64).sum();
        let expected = self.width as u64 * self.height as u64;
        if actual != expected {
            return Err(AnnotationError::SumMismatch {
                expected,
                actual,
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }
}

/// Bounding box of a detection defect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub class: DefectClass,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BoxAnnotation {
    pub fn new(class: DefectClass, rect: Rect) -> Self {
        BoxAnnotation {
            class,
            x: rect.x,
            y: rect.y,
            w: rect.w,
            h: rect.h,
            score: None,
        }
    }

    pub fn scored(class: DefectClass, rect: Rect, score: f64) -> Self {
        BoxAnnotation {
            score: Some(score),
            ..Self::new(class, rect)
        }
    }

    pub fn rect(&self) -> Rect {
        Rect::new(self.x, self.y, self.w, self.h)
    }

    pub fn validate(&self, width: u32, height: u32) -> Result<(), AnnotationError> {
        if self.class.task() != Task::Detection {
            return Err(AnnotationError::WrongTask {
                class: self.class,
                expected: Task::Detection,
                actual: self.class.task(),
            });
        }
        if !self.rect().fits(width, height) {
            return Err(AnnotationError::BoxOutOfFrame {
                x: self.x,
                y: self.y,
                w: self.w,
                h: self.h,
                width,
                height,
            });
        }
        if let Some(s) = self.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(AnnotationError::ScoreOutOfRange(s));
            }
        }
        Ok(())
    }
}

/// Who produced an annotation set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id")]
pub enum Source {
    HumanLabeler(String),
    Model(String),
    Consensus,
}

impl Source {
    pub fn is_human(&self) -> bool {
        matches!(self, Source::HumanLabeler(_))
    }

    /// Stable identifier used for ordering and file names.
    pub fn key(&self) -> String {
        match self {
            Source::HumanLabeler(id) => format!("human-{id}"),
            Source::Model(id) => format!("model-{id}"),
            Source::Consensus => "consensus".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReviewState {
    Draft,
    CrowdReviewed,
    ExpertApproved,
    ReturnedForRelabel,
}

/// A complete labeling of one image by one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub image_id: String,
    pub source: Source,
    pub masks: Vec<MaskAnnotation>,
    pub boxes: Vec<BoxAnnotation>,
    pub review_state: ReviewState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_labeling_seconds: Option<f64>,
    /// Model the set was pre-annotated from, when it started as a model draft.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeded_from: Option<Source>,
}

impl AnnotationSet {
    pub fn blank(image_id: impl Into<String>, source: Source) -> Self {
        AnnotationSet {
            image_id: image_id.into(),
            source,
            masks: Vec::new(),
            boxes: Vec::new(),
            review_state: ReviewState::Draft,
            elapsed_labeling_seconds: None,
            seeded_from: None,
        }
    }

    pub fn mask_for(&self, class: DefectClass) -> Option<&MaskAnnotation> {
        self.masks.iter().find(|m| m.class == class)
    }

    /// Decoded mask for `class`, or an empty grid of the given size when absent.
    pub fn mask_or_empty(
        &self,
        class: DefectClass,
        width: u32,
        height: u32,
    ) -> Result<BinaryMask, AnnotationError> {
        match self.mask_for(class) {
            Some(m) => m.to_mask(),
            None => Ok(BinaryMask::new(width, height)),
        }
    }

    pub fn boxes_for(&self, class: DefectClass) -> impl Iterator<Item = &BoxAnnotation> {
        self.boxes.iter().filter(move |b| b.class == class)
    }

    /// Replaces (or inserts) the mask of `mask.class`.
    pub fn set_mask(&mut self, mask: MaskAnnotation) {
        self.masks.retain(|m| m.class != mask.class);
        self.masks.push(mask);
        self.masks.sort_by_key(|m| m.class);
    }

    /// Checks every annotation-core invariant against the image size.
    pub fn validate(&self, width: u32, height: u32) -> Result<(), AnnotationError> {
        let mut seen = Vec::new();
        for m in &self.masks {
            m.validate()?;
            if m.width != width || m.height != height {
                return Err(AnnotationError::MaskDimensions {
                    got_w: m.width,
                    got_h: m.height,
                    width,
                    height,
                });
            }
            if seen.contains(&m.class) {
                return Err(AnnotationError::DuplicateMask(m.class));
            }
            seen.push(m.class);
        }
        for b in &self.boxes {
            b.validate(width, height)?;
            let model = matches!(self.source, Source::Model(_));
            if b.score.is_some() != model {
                return Err(AnnotationError::ScoreProvenance);
            }
        }
        if let Some(e) = self.elapsed_labeling_seconds {
            if !self.source.is_human() {
                return Err(AnnotationError::ElapsedOnNonHuman);
            }
            if !e.is_finite() || e < 0.0 {
                return Err(AnnotationError::BadElapsed(e));
            }
        }
        Ok(())
    }
}
