//! Growth-run capture manifests and preprocessing: time-window resampling,
//! blackout/noise rejection, crop/denoise/resize/normalize and the
//! train/test split.

use std::collections::BTreeSet;

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{ImageRecord, ImageStatus, Rect, RejectReason};
use crate::raster::{Plane, RasterError};

pub const SUPPORTED_RESOLUTIONS: [u32; 2] = [256, 512];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("frames are not sorted by capture time (index {0})")]
    UnsortedInput(usize),
    #[error("could not read image {image_id}: {reason}")]
    UnreadableImage { image_id: String, reason: String },
    #[error("crop region ({x},{y},{w},{h}) outside {width}x{height} image")]
    CropOutOfBounds {
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        width: u32,
        height: u32,
    },
    #[error("unsupported target resolution {0}, expected 256 or 512")]
    UnsupportedResolution(u32),
    #[error("need at least 2 images to split, got {0}")]
    TooFewImages(usize),
    #[error("split ratio {ratio} over {n} images leaves one side empty")]
    DegenerateRatio { ratio: f64, n: usize },
    #[error("invalid preprocessing config: {0}")]
    InvalidConfig(String),
}

/// Capture record of one growth run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthRunManifest {
    pub growth_run_id: String,
    pub capture_interval_seconds: u32,
    pub duration_hours: f64,
    pub frames: Vec<ImageRecord>,
}

impl GrowthRunManifest {
    pub fn new(growth_run_id: impl Into<String>, capture_interval_seconds: u32, mut frames: Vec<ImageRecord>) -> Self {
        frames.sort_by(|a, b| a.captured_at.cmp(&b.captured_at).then_with(|| a.image_id.cmp(&b.image_id)));
        let duration_hours = match (frames.first(), frames.last()) {
            (Some(a), Some(b)) => (b.captured_at - a.captured_at) as f64 / 3600.0,
            _ => 0.0,
        };
        GrowthRunManifest {
            growth_run_id: growth_run_id.into(),
            capture_interval_seconds,
            duration_hours,
            frames,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.capture_interval_seconds > 0
            && self.frames.windows(2).all(|w| w[0].captured_at <= w[1].captured_at)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub window_seconds: u32,
    pub blackout_luminance_max: f64,
    pub noise_variance_max: f64,
    pub target_resolutions: BTreeSet<u32>,
    pub pool_size: usize,
    pub split_ratio: f64,
    pub split_seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            window_seconds: 900,
            blackout_luminance_max: 0.02,
            noise_variance_max: 0.01,
            target_resolutions: SUPPORTED_RESOLUTIONS.into_iter().collect(),
            pool_size: 300,
            split_ratio: 0.9,
            split_seed: 0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: &str| Err(IngestError::InvalidConfig(m.to_string()));
        if self.window_seconds == 0 {
            return bad("window_seconds must be positive");
        }
        if !(0.0..=1.0).contains(&self.blackout_luminance_max) {
            return bad("blackout_luminance_max must lie in [0, 1]");
        }
        if !(self.noise_variance_max >= 0.0) {
            return bad("noise_variance_max must be non-negative");
        }
        if self.target_resolutions.is_empty() {
            return bad("target_resolutions must not be empty");
        }
        if let Some(r) = self.target_resolutions.iter().find(|r| !SUPPORTED_RESOLUTIONS.contains(r)) {
            return Err(IngestError::UnsupportedResolution(*r));
        }
        if self.pool_size == 0 {
            return bad("pool_size must be positive");
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad("split_ratio must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Keeps the first frame of every non-empty window `[t0 + k*w, t0 + (k+1)*w)`.
pub fn resample_sequence(frames: &[ImageRecord], window_seconds: u32) -> Result<Vec<ImageRecord>, IngestError> {
    if let Some(i) = frames.windows(2).position(|w| w[1].captured_at < w[0].captured_at) {
        return Err(IngestError::UnsortedInput(i + 1));
    }
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    let window = window_seconds.max(1) as i64;
    let t0 = first.captured_at;
    let mut last_bucket = None;
    let mut kept = Vec::new();
    for f in frames {
        let bucket = (f.captured_at - t0).div_euclid(window);
        if last_bucket != Some(bucket) {
            last_bucket = Some(bucket);
            kept.push(f.clone());
        }
    }
    Ok(kept)
}

/// Outcome of frame filtering; `kept` and `rejected` partition the input.
#[derive(Debug, Clone, Default)]
pub struct FilterOutcome {
    pub kept: Vec<ImageRecord>,
    pub rejected: Vec<ImageRecord>,
}

/// Why a frame would be rejected, if at all.
pub fn classify_frame(pixels: &GrayImage, config: &PreprocessConfig) -> Option<RejectReason> {
    let plane = Plane::from_gray8(pixels);
    if plane.mean() < config.blackout_luminance_max {
        Some(RejectReason::Blackout)
    } else if plane.residual_variance() > config.noise_variance_max {
        Some(RejectReason::Noise)
    } else {
        None
    }
}

/// Rejects blacked-out and noisy frames. `load` fetches pixel data for a record.
pub fn filter_frames<F>(frames: &[ImageRecord], config: &PreprocessConfig, mut load: F) -> Result<FilterOutcome, IngestError>
where
    F: FnMut(&ImageRecord) -> Result<GrayImage, String>,
{
    let mut out = FilterOutcome::default();
    for frame in frames {
        let pixels = load(frame).map_err(|reason| IngestError::UnreadableImage {
            image_id: frame.image_id.clone(),
            reason,
        })?;
        let mut rec = frame.clone();
        match classify_frame(&pixels, config) {
            Some(reason) => {
                rec.reject(reason);
                out.rejected.push(rec);
            }
            None => {
                rec.status = ImageStatus::Filtered;
                rec.reject_reason = None;
                out.kept.push(rec);
            }
        }
    }
    Ok(out)
}

/// Crop, optional 3x3 median denoise, area-average resize to a square
/// `target_resolution` and scaling of 8-bit values into [0, 1].
pub fn preprocess_image(
    image: &GrayImage,
    crop_region: Rect,
    target_resolution: u32,
    denoise: bool,
) -> Result<Plane, IngestError> {
    if !SUPPORTED_RESOLUTIONS.contains(&target_resolution) {
        return Err(IngestError::UnsupportedResolution(target_resolution));
    }
    let raw = Plane::from_gray8_raw(image);
    let cropped = raw.crop(crop_region).map_err(|e| match e {
        RasterError::OutOfBounds { x, y, w, h, width, height } => IngestError::CropOutOfBounds { x, y, w, h, width, height },
        other => IngestError::InvalidConfig(other.to_string()),
    })?;
    let cleaned = if denoise { cropped.median3x3() } else { cropped };
    let mut out = cleaned.resize_area(target_resolution, target_resolution);
    for v in out.data_mut() {
        *v = (*v / 255.0).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Seeded shuffle then cut at `round(ratio * n)`.
pub fn split_dataset(image_ids: &[String], split_ratio: f64, split_seed: u64) -> Result<(Vec<String>, Vec<String>), IngestError> {
    let n = image_ids.len();
    if n < 2 {
        return Err(IngestError::TooFewImages(n));
    }
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(IngestError::DegenerateRatio { ratio: split_ratio, n });
    }
    let n_train = (split_ratio * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(IngestError::DegenerateRatio { ratio: split_ratio, n });
    }
    let mut ids = image_ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    ids.shuffle(&mut rng);
    let test = ids.split_off(n_train);
    Ok((ids, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;
    use proptest::prelude::*;
    use rand::Rng;

    fn rec(id: &str, t: i64) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            growth_run_id: "run".into(),
            captured_at: t,
            width: 8,
            height: 8,
            storage_path: format!("{id}.png"),
            status: ImageStatus::Raw,
            reject_reason: None,
        }
    }

    #[test]
    fn resample_examples() {
        let frames: Vec<_> = (0..30).map(|m| rec(&format!("f{m}"), m * 60)).collect();
        let kept = resample_sequence(&frames, 900).unwrap();
        let ids: Vec<_> = kept.iter().map(|f| f.image_id.as_str()).collect();
        assert_eq!(ids, ["f0", "f15"]);
        assert!(resample_sequence(&[], 900).unwrap().is_empty());
        assert_eq!(resample_sequence(&frames[..1], 900).unwrap(), frames[..1].to_vec());
        let unsorted = vec![rec("a", 60), rec("b", 0)];
        assert!(matches!(resample_sequence(&unsorted, 900), Err(IngestError::UnsortedInput(1))));
    }

    proptest! {
        #[test]
        fn resample_bounds(gaps in proptest::collection::vec(0i64..400, 1..200), window in 30u32..2000) {
            let mut t = 1_700_000_000i64;
            let frames: Vec<_> = gaps.iter().enumerate().map(|(i, g)| { t += g; rec(&i.to_string(), t) }).collect();
            let kept = resample_sequence(&frames, window).unwrap();
            let span = frames.last().unwrap().captured_at - frames[0].captured_at;
            let max_windows = (span / window as i64) + 1;
            prop_assert!(kept.len() as i64 <= max_windows);
            let t0 = frames[0].captured_at;
            for pair in kept.windows(2) {
                let (ka, kb) = ((pair[0].captured_at - t0) / window as i64, (pair[1].captured_at - t0) / window as i64);
                prop_assert!(kb > ka);
            }
            // every window holding a frame is represented exactly once
            let buckets: BTreeSet<i64> = frames.iter().map(|f| (f.captured_at - t0) / window as i64).collect();
            prop_assert_eq!(buckets.len(), kept.len());
        }

        #[test]
        fn resample_regular_cadence_spacing(cadence in 1u32..120, mult in 1u32..20, n in 1usize..400) {
            let window = cadence * mult;
            let frames: Vec<_> = (0..n).map(|i| rec(&i.to_string(), i as i64 * cadence as i64)).collect();
            let kept = resample_sequence(&frames, window).unwrap();
            for pair in kept.windows(2) {
                prop_assert_eq!(pair[1].captured_at - pair[0].captured_at, window as i64);
            }
        }
    }

    /// Brute-force residual variance with an explicit clamped 3x3 window.
    fn residual_variance_oracle(img: &GrayImage) -> f64 {
        let (w, h) = (img.width() as i64, img.height() as i64);
        let px = |c: i64, r: i64| img.get_pixel(c.clamp(0, w - 1) as u32, r.clamp(0, h - 1) as u32)[0] as f64 / 255.0;
        let mut res = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let mut s = 0.0;
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        s += px(c + dc, r + dr);
                    }
                }
                res.push(px(c, r) - s / 9.0);
            }
        }
        let m = res.iter().sum::<f64>() / res.len() as f64;
        res.iter().map(|v| (v - m).powi(2)).sum::<f64>() / res.len() as f64
    }

    #[test]
    fn filter_examples() {
        let cfg = PreprocessConfig {
            blackout_luminance_max: 0.02,
            noise_variance_max: 0.01,
            ..Default::default()
        };
        let black = GrayImage::new(32, 32);
        let gray = GrayImage::from_pixel(32, 32, Luma([128]));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noisy = GrayImage::from_fn(32, 32, |_, _| {
            if rng.random_bool(0.5) {
                Luma([if rng.random_bool(0.5) { 0 } else { 255 }])
            } else {
                Luma([128])
            }
        });
        let oracle = residual_variance_oracle(&noisy);
        assert!(oracle > 0.01, "oracle residual variance {oracle}");
        assert!((Plane::from_gray8(&noisy).residual_variance() - oracle).abs() < 1e-6);

        let frames = vec![rec("black", 0), rec("gray", 60), rec("noisy", 120)];
        let out = filter_frames(&frames, &cfg, |r| {
            Ok(match r.image_id.as_str() {
                "black" => black.clone(),
                "gray" => gray.clone(),
                _ => noisy.clone(),
            })
        })
        .unwrap();
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.kept[0].image_id, "gray");
        assert_eq!(out.rejected[0].reject_reason, Some(RejectReason::Blackout));
        assert_eq!(out.rejected[1].reject_reason, Some(RejectReason::Noise));
        assert!(out.rejected.iter().chain(&out.kept).all(|r| r.is_valid()));

        // idempotent on the kept set
        let again = filter_frames(&out.kept, &cfg, |_| Ok(gray.clone())).unwrap();
        assert!(again.rejected.is_empty());

        let err = filter_frames(&frames, &cfg, |_| Err("missing".into())).unwrap_err();
        assert!(matches!(err, IngestError::UnreadableImage { ref image_id, .. } if image_id == "black"));
    }

    #[test]
    fn preprocess_examples() {
        let white = GrayImage::from_pixel(256, 256, Luma([255]));
        let out = preprocess_image(&white, Rect::new(0, 0, 256, 256), 256, false).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));

        let blocks = GrayImage::from_fn(512, 512, |c, r| Luma([((c / 2 * 7 + r / 2 * 13) % 256) as u8]));
        let out = preprocess_image(&blocks, Rect::new(0, 0, 512, 512), 256, false).unwrap();
        for (c, r) in [(0u32, 0u32), (17, 101), (255, 255), (128, 3)] {
            let expected = ((c * 7 + r * 13) % 256) as f32 / 255.0;
            assert!((out.get(c, r) - expected).abs() < 1e-6);
        }

        let src = GrayImage::new(512, 512);
        assert!(matches!(
            preprocess_image(&src, Rect::new(500, 500, 100, 100), 256, false),
            Err(IngestError::CropOutOfBounds { .. })
        ));
        assert!(matches!(
            preprocess_image(&src, Rect::new(0, 0, 10, 10), 128, false),
            Err(IngestError::UnsupportedResolution(128))
        ));
    }

    #[test]
    fn preprocess_denoise_and_range() {
        let mut img = GrayImage::from_pixel(64, 64, Luma([100]));
        img.put_pixel(10, 10, Luma([255]));
        let out = preprocess_image(&img, Rect::new(0, 0, 64, 64), 256, true).unwrap();
        assert!(out.data().iter().all(|&v| (v - 100.0 / 255.0).abs() < 1e-6));
    }

    #[test]
    fn split_examples() {
        let ids: Vec<String> = (0..300).map(|i| format!("img{i:03}")).collect();
        let (train, test) = split_dataset(&ids, 0.9, 42).unwrap();
        assert_eq!((train.len(), test.len()), (270, 30));
        assert_eq!(split_dataset(&ids, 0.9, 42).unwrap(), (train, test));
        assert!(matches!(split_dataset(&ids, 0.999, 1), Err(IngestError::DegenerateRatio { .. })));
        assert!(matches!(split_dataset(&ids[..1], 0.5, 1), Err(IngestError::TooFewImages(1))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn split_partitions(n in 2usize..400, ratio in 0.01f64..0.99, seed in any::<u64>()) {
            let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
            match split_dataset(&ids, ratio, seed) {
                Ok((train, test)) => {
                    prop_assert_eq!(train.len(), (ratio * n as f64).round() as usize);
                    prop_assert_eq!(train.len() + test.len(), n);
                    let all: BTreeSet<_> = train.iter().chain(&test).cloned().collect();
                    prop_assert_eq!(all.len(), n);
                    prop_assert!(!train.is_empty() && !test.is_empty());
                }
                Err(IngestError::DegenerateRatio { .. }) => {
                    let t = (ratio * n as f64).round() as usize;
                    prop_assert!(t == 0 || t == n);
                }
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
    }
}
