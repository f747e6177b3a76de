//! Procedural growth-surface scenes with exact ground truth, rendered at any
//! resolution, plus a simulated labeling crowd.
//!
//! A scene is a dark holder (0.08) carrying a bright crystal disk (0.50).
//! Polycrystalline patches (0.25) sit on the holder away from the crystal,
//! center defects are Gaussian hot spots inside the crystal and edge defects
//! are small disks straddling the crystal outline.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotation::{
    polygon_to_mask, AnnotationSet, BinaryMask, BoxAnnotation, DefectClass, MaskAnnotation, Rect, ReviewState, Source,
};
use crate::augment::derive_seed;
use crate::backend::{BackendError, InMemoryData};
use crate::orchestrator::{ImageSource, LabelSource, OrchestratorError, SampleSource};
use crate::labeling::{apply_review, merge_consensus, ConsensusConfig, LabelingError, PreAnnotatedBatch, ReviewDecision};
use crate::raster::Plane;

pub const HOLDER: f32 = 0.08;
pub const POLY: f32 = 0.25;
pub const CRYSTAL: f32 = 0.50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spot {
    pub cx: f64,
    pub cy: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

/// Scene geometry in normalized [0, 1] frame coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub crystal: (f64, f64, f64),
    pub patches: Vec<Vec<(f64, f64)>>,
    pub spots: Vec<Spot>,
    pub bumps: Vec<Bump>,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    /// Crowd labels for this scene are systematically wrong.
    pub mislabeled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub images: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub mislabeled_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            images: 60,
            seed: 7,
            noise_sigma: 0.02,
            mislabeled_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub scenes: BTreeMap<String, Scene>,
}

pub fn image_id(index: usize) -> String {
    format!("syn-{index:04}")
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn generate_scene(rng: &mut ChaCha8Rng, noise_sigma: f64) -> Scene {
    let (cx, cy) = (rng.random_range(0.46..0.54), rng.random_range(0.46..0.54));
    let r = rng.random_range(0.26..0.31);

    let mut bumps = Vec::new();
    let mut angles: Vec<f64> = Vec::new();
    let n_bumps = rng.random_range(1..=3);
    while bumps.len() < n_bumps {
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let clear = angles.iter().all(|&b| {
            let d = (a - b).rem_euclid(std::f64::consts::TAU);
            d.min(std::f64::consts::TAU - d) > 0.8
        });
        if clear {
            angles.push(a);
            bumps.push(Bump {
                cx: cx + r * a.cos(),
                cy: cy + r * a.sin(),
                radius: rng.random_range(0.02..0.03),
            });
        }
    }

    let mut spots: Vec<Spot> = Vec::new();
    let n_spots = rng.random_range(1..=3);
    while spots.len() < n_spots {
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let d = 0.6 * r * rng.random::<f64>().sqrt();
        let p = (cx + d * a.cos(), cy + d * a.sin());
        let sigma: f64 = rng.random_range(0.012..0.016);
        if spots.iter().all(|s| dist(p, (s.cx, s.cy)) > 6.0 * sigma.max(s.sigma)) {
            spots.push(Spot {
                cx: p.0,
                cy: p.1,
                sigma,
                amplitude: rng.random_range(0.42..0.48),
            });
        }
    }

    let mut patches: Vec<Vec<(f64, f64)>> = Vec::new();
    let mut placed: Vec<((f64, f64), f64)> = Vec::new();
    let n_patches = rng.random_range(1..=2);
    let mut tries = 0;
    while patches.len() < n_patches && tries < 1000 {
        tries += 1;
        let pr = rng.random_range(0.04..0.07);
        let p = (rng.random_range(pr + 0.01..1.0 - pr - 0.01), rng.random_range(pr + 0.01..1.0 - pr - 0.01));
        if dist(p, (cx, cy)) < r + 0.03 + pr + 0.03 || placed.iter().any(|&(q, qr)| dist(p, q) < pr + qr + 0.02) {
            continue;
        }
        let k = 6;
        let poly = (0..k)
            .map(|i| {
                let a = (i as f64 + rng.random_range(-0.3..0.3)) * std::f64::consts::TAU / k as f64;
                let rr = pr * rng.random_range(0.7..1.0);
                (p.0 + rr * a.cos(), p.1 + rr * a.sin())
            })
            .collect();
        placed.push((p, pr));
        patches.push(poly);
    }
    assert!(!patches.is_empty(), "scene generator could not place a patch");

    Scene {
        crystal: (cx, cy, r),
        patches,
        spots,
        bumps,
        noise_sigma,
        noise_seed: rng.random(),
        mislabeled: false,
    }
}

impl Scene {
    fn in_crystal(&self, x: f64, y: f64) -> bool {
        let (cx, cy, r) = self.crystal;
        dist((x, y), (cx, cy)) <= r
    }

    fn in_bump(&self, x: f64, y: f64) -> bool {
        self.bumps.iter().any(|b| dist((x, y), (b.cx, b.cy)) <= b.radius)
    }

    pub fn poly_mask(&self, res: u32) -> BinaryMask {
        let s = res as f64;
        let mut out = BinaryMask::new(res, res);
        for patch in &self.patches {
            let scaled: Vec<(f64, f64)> = patch.iter().map(|&(x, y)| (x * s, y * s)).collect();
            let m = polygon_to_mask(&scaled, res, res).expect("patches have six vertices");
            for (c, r) in m.foreground() {
                out.set(c, r, true);
            }
        }
        out
    }

    pub fn render(&self, res: u32) -> Plane {
        let s = res as f64;
        let poly = self.poly_mask(res);
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed ^ res as u64);
        let noise = Normal::new(0.0, self.noise_sigma.max(0.0)).expect("finite sigma");
        Plane::from_fn(res, res, |c, r| {
            let (x, y) = ((c as f64 + 0.5) / s, (r as f64 + 0.5) / s);
            let base = if self.in_crystal(x, y) || self.in_bump(x, y) {
                let glow: f64 = self
                    .spots
                    .iter()
                    .map(|sp| sp.amplitude * (-(dist((x, y), (sp.cx, sp.cy)).powi(2)) / (2.0 * sp.sigma * sp.sigma)).exp())
                    .sum();
                CRYSTAL as f64 + glow
            } else if poly.get(c, r) {
                POLY as f64
            } else {
                HOLDER as f64
            };
            (base + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32
        })
    }

    fn spot_box(&self, sp: &Spot, res: u32) -> Option<Rect> {
        let s = res as f64;
        let x0 = ((sp.cx - 2.0 * sp.sigma) * s).floor().max(0.0);
        let y0 = ((sp.cy - 2.0 * sp.sigma) * s).floor().max(0.0);
        let x1 = ((sp.cx + 2.0 * sp.sigma) * s).ceil().min(s);
        let y1 = ((sp.cy + 2.0 * sp.sigma) * s).ceil().min(s);
        (x1 > x0 && y1 > y0).then(|| Rect::new(x0 as u32, y0 as u32, (x1 - x0) as u32, (y1 - y0) as u32))
    }

    /// Tight box of the bump pixels lying outside the crystal disk.
    fn bump_box(&self, b: &Bump, res: u32) -> Option<Rect> {
        let s = res as f64;
        let lo = |v: f64| (((v - b.radius) * s).floor().max(0.0)) as u32;
        let hi = |v: f64| (((v + b.radius) * s).ceil().min(s)) as u32;
        let mut m = BinaryMask::new(res, res);
        for r in lo(b.cy)..hi(b.cy) {
            for c in lo(b.cx)..hi(b.cx) {
                let (x, y) = ((c as f64 + 0.5) / s, (r as f64 + 0.5) / s);
                if dist((x, y), (b.cx, b.cy)) <= b.radius && !self.in_crystal(x, y) {
                    m.set(c, r, true);
                }
            }
        }
        crate::annotation::grid_bbox(&m)
    }

    pub fn ground_truth(&self, image_id: &str, res: u32) -> AnnotationSet {
        let mut set = AnnotationSet::blank(image_id, Source::Consensus);
        set.set_mask(MaskAnnotation::from_mask(DefectClass::PolycrystallineDefect, &self.poly_mask(res)));
        for sp in &self.spots {
            if let Some(r) = self.spot_box(sp, res) {
                set.boxes.push(BoxAnnotation::new(DefectClass::CenterDefect, r));
            }
        }
        for b in &self.bumps {
            if let Some(r) = self.bump_box(b, res) {
                set.boxes.push(BoxAnnotation::new(DefectClass::EdgeDefect, r));
            }
        }
        set.review_state = ReviewState::ExpertApproved;
        set
    }

    /// What the crowd believes: the truth, or for mislabeled scenes a patch
    /// mask shifted a quarter frame and no boxes at all.
    pub fn crowd_truth(&self, image_id: &str, res: u32) -> AnnotationSet {
        let mut set = self.ground_truth(image_id, res);
        if self.mislabeled {
            let m = self.poly_mask(res);
            let shift = res / 4;
            let moved = BinaryMask::from_fn(res, res, |c, r| {
                let sc = (c + res - shift) % res;
                let sr = (r + res - shift) % res;
                m.get(sc, sr)
            });
            set.set_mask(MaskAnnotation::from_mask(DefectClass::PolycrystallineDefect, &moved));
            set.boxes.clear();
        }
        set
    }
}

impl SyntheticCorpus {
    pub fn generate(config: &SyntheticConfig) -> Self {
        let mut scenes = BTreeMap::new();
        for i in 0..config.images {
            let id = image_id(i);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &id, 0));
            scenes.insert(id, generate_scene(&mut rng, config.noise_sigma));
        }
        let n_bad = (config.mislabeled_fraction * config.images as f64).round() as usize;
        // spread mislabeled scenes evenly through the id order
        for k in 0..n_bad {
            let idx = (k * config.images) / n_bad + config.images / (2 * n_bad).max(1);
            if let Some(s) = scenes.get_mut(&image_id(idx.min(config.images - 1))) {
                s.mislabeled = true;
            }
        }
        SyntheticCorpus { scenes }
    }

    pub fn ids(&self) -> Vec<String> {
        self.scenes.keys().cloned().collect()
    }

    pub fn scene(&self, id: &str) -> Option<&Scene> {
        self.scenes.get(id)
    }

    pub fn render(&self, id: &str, res: u32) -> Result<Plane, BackendError> {
        self.scene(id).map(|s| s.render(res)).ok_or_else(|| BackendError::Data(format!("unknown image {id}")))
    }

    pub fn ground_truth(&self, id: &str, res: u32) -> Result<AnnotationSet, BackendError> {
        self.scene(id)
            .map(|s| s.ground_truth(id, res))
            .ok_or_else(|| BackendError::Data(format!("unknown image {id}")))
    }

    /// Rendered images with exact ground truth.
    pub fn labeled(&self, dataset_id: &str, ids: &[String], res: u32) -> Result<InMemoryData, BackendError> {
        let samples = ids
            .iter()
            .map(|id| Ok((self.render(id, res)?, self.ground_truth(id, res)?)))
            .collect::<Result<Vec<_>, BackendError>>()?;
        Ok(InMemoryData::new(dataset_id, res, samples))
    }
}

/// Labelers that know each scene's crowd truth and make small independent
/// slips: one-pixel mask dilation/erosion and one-pixel box jitter.
#[derive(Debug, Clone)]
pub struct SimulatedCrowd {
    pub labelers: usize,
    pub resolution: u32,
    pub slip_probability: f64,
    pub seed: u64,
    pub consensus: ConsensusConfig,
}

impl SimulatedCrowd {
    pub fn new(resolution: u32, seed: u64) -> Self {
        SimulatedCrowd {
            labelers: 3,
            resolution,
            slip_probability: 0.3,
            seed,
            consensus: ConsensusConfig::default(),
        }
    }

    /// Exact labelers: every submission equals the crowd truth.
    pub fn exact(resolution: u32) -> Self {
        SimulatedCrowd {
            slip_probability: 0.0,
            ..Self::new(resolution, 0)
        }
    }

    fn slip(&self, truth: &AnnotationSet, labeler: usize, rng: &mut ChaCha8Rng) -> AnnotationSet {
        let mut set = truth.clone();
        set.source = Source::HumanLabeler(format!("sim-{labeler}"));
        set.review_state = ReviewState::Draft;
        if self.slip_probability <= 0.0 {
            return set;
        }
        for m in set.masks.iter_mut() {
            if rng.random::<f64>() < self.slip_probability {
                let grid = m.to_mask().expect("generated masks decode");
                let grow = rng.random::<bool>();
                let out = BinaryMask::from_fn(grid.width(), grid.height(), |c, r| {
                    let mut any = false;
                    let mut all = true;
                    for dr in -1i64..=1 {
                        for dc in -1i64..=1 {
                            let (nc, nr) = (c as i64 + dc, r as i64 + dr);
                            let v = nc >= 0
                                && nr >= 0
                                && nc < grid.width() as i64
                                && nr < grid.height() as i64
                                && grid.get(nc as u32, nr as u32);
                            any |= v;
                            all &= v;
                        }
                    }
                    if grow {
                        any
                    } else {
                        all
                    }
                });
                *m = MaskAnnotation::from_mask(m.class, &out);
            }
        }
        let res = self.resolution;
        for b in set.boxes.iter_mut() {
            if rng.random::<f64>() < self.slip_probability {
                let dx: i64 = rng.random_range(-1..=1);
                let dy: i64 = rng.random_range(-1..=1);
                let x = (b.x as i64 + dx).clamp(0, (res - b.w) as i64);
                let y = (b.y as i64 + dy).clamp(0, (res - b.h) as i64);
                b.x = x as u32;
                b.y = y as u32;
            }
        }
        set
    }

    /// Crowd submissions, consensus and both review steps for one image.
    pub fn label_image(&self, corpus: &SyntheticCorpus, image_id: &str) -> Result<AnnotationSet, LabelingError> {
        let scene = corpus
            .scene(image_id)
            .ok_or_else(|| LabelingError::InvalidParameter(format!("unknown image {image_id}")))?;
        let truth = scene.crowd_truth(image_id, self.resolution);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, image_id, 1));
        let subs: Vec<AnnotationSet> = (0..self.labelers.max(1)).map(|l| self.slip(&truth, l, &mut rng)).collect();
        let merged = merge_consensus(&subs, &self.consensus)?.merged;
        let reviewed = apply_review(merged, ReviewDecision::CrowdApprove)?;
        apply_review(reviewed, ReviewDecision::ExpertApprove)
    }

    pub fn label_batch(&self, corpus: &SyntheticCorpus, batch: &PreAnnotatedBatch) -> Result<Vec<AnnotationSet>, LabelingError> {
        batch.batch.image_ids.iter().map(|id| self.label_image(corpus, id)).collect()
    }
}

impl SampleSource for SyntheticCorpus {
    fn sample(&self, image_id: &str, resolution: u32) -> Result<(Plane, AnnotationSet), BackendError> {
        Ok((self.render(image_id, resolution)?, self.ground_truth(image_id, resolution)?))
    }
}

/// Renders corpus scenes as the pipeline's unlabeled images.
pub struct SyntheticImages<'a> {
    pub corpus: &'a SyntheticCorpus,
    pub resolution: u32,
}

impl ImageSource for SyntheticImages<'_> {
    fn image(&self, image_id: &str) -> Result<Plane, OrchestratorError> {
        self.corpus
            .render(image_id, self.resolution)
            .map_err(|e| OrchestratorError::Image(e.to_string()))
    }
}

/// A simulated crowd plus expert answering pipeline batches.
pub struct CrowdLabels<'a> {
    pub corpus: &'a SyntheticCorpus,
    pub crowd: SimulatedCrowd,
}

impl LabelSource for CrowdLabels<'_> {
    fn label(&mut self, batch: &PreAnnotatedBatch) -> Result<Vec<AnnotationSet>, OrchestratorError> {
        Ok(self.crowd.label_batch(self.corpus, batch)?)
    }
}
