//! Built-in trainable backend: per-intensity posterior segmentation, a bright
//! peak detector for center defects and a contour-protrusion detector for
//! edge defects.

use std::collections::{BTreeMap, VecDeque};

use parking_lot::Mutex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    check_resolution, BackendError, BackendKind, LabeledData, ModelBackend, ModelHandle, Prediction, ProbabilityMap,
    TrainingHyperparams,
};
use crate::annotation::{AnnotationSet, BoxAnnotation, DefectClass, Rect, Task};
use crate::raster::Plane;

const BINS: usize = 256;
/// Gaussian smoothing of the class histograms, in bins.
const HIST_SIGMA: f64 = 2.0;
const CANDIDATE_RADIUS: u32 = 2;
const EDGE_MARGIN: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationParams {
    /// P(class | intensity) at each of the 256 intensity levels.
    pub posterior: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakParams {
    pub threshold: f64,
    pub box_w: u32,
    pub box_h: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourParams {
    pub margin: f64,
    pub min_area: u32,
    pub mean_area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceParams {
    pub resolution: u32,
    pub segmentation: BTreeMap<DefectClass, SegmentationParams>,
    pub center: Option<PeakParams>,
    pub edge: Option<ContourParams>,
}

/// Deterministic classical backend. Models live in memory and can be
/// exported as JSON.
pub struct ReferenceClassical {
    lineage: String,
    classes: Vec<DefectClass>,
    state: Mutex<State>,
    train_lock: Mutex<()>,
}

#[derive(Default)]
struct State {
    version: u64,
    models: BTreeMap<String, ReferenceParams>,
}

impl ReferenceClassical {
    pub fn new(lineage: impl Into<String>) -> Self {
        Self::with_classes(lineage, DefectClass::ALL.to_vec())
    }

    pub fn with_classes(lineage: impl Into<String>, classes: Vec<DefectClass>) -> Self {
        ReferenceClassical {
            lineage: lineage.into(),
            classes,
            state: Mutex::new(State::default()),
            train_lock: Mutex::new(()),
        }
    }

    pub fn params(&self, model: &ModelHandle) -> Result<ReferenceParams, BackendError> {
        self.state
            .lock()
            .models
            .get(&model.model_id)
            .cloned()
            .ok_or_else(|| BackendError::UntrainedModel(model.model_id.clone()))
    }

    /// Fits parameters without registering a model.
    pub fn fit(&self, data: &dyn LabeledData) -> Result<ReferenceParams, BackendError> {
        if data.is_empty() {
            return Err(BackendError::EmptyTrainingSet);
        }
        let stats: Vec<SampleStats> = (0..data.len())
            .into_par_iter()
            .map(|i| {
                let (image, labels) = data.sample(i)?;
                SampleStats::collect(&image, &labels, &self.classes)
            })
            .collect::<Result<_, _>>()?;
        let mut total = SampleStats::default();
        for s in stats {
            total.merge(s);
        }
        let mut params = ReferenceParams {
            resolution: data.resolution(),
            segmentation: BTreeMap::new(),
            center: None,
            edge: None,
        };
        for &class in &self.classes {
            match class {
                c if c.task() == Task::Segmentation => {
                    let (fg, bg) = total.seg.get(&c).ok_or(BackendError::ClassUnrepresented(c))?;
                    if fg.iter().sum::<u64>() == 0 {
                        return Err(BackendError::ClassUnrepresented(c));
                    }
                    params.segmentation.insert(
                        c,
                        SegmentationParams {
                            posterior: posterior_table(fg, bg),
                        },
                    );
                }
                DefectClass::CenterDefect => {
                    if total.center_boxes.is_empty() {
                        return Err(BackendError::ClassUnrepresented(class));
                    }
                    let n = total.center_boxes.len() as f64;
                    let box_w = (total.center_boxes.iter().map(|r| r.0 as f64).sum::<f64>() / n).round().max(1.0) as u32;
                    let box_h = (total.center_boxes.iter().map(|r| r.1 as f64).sum::<f64>() / n).round().max(1.0) as u32;
                    params.center = Some(PeakParams {
                        threshold: stump(&total.peaks_pos, &total.peaks_neg),
                        box_w,
                        box_h,
                    });
                }
                DefectClass::EdgeDefect => {
                    if total.edge_areas.is_empty() {
                        return Err(BackendError::ClassUnrepresented(class));
                    }
                    let min = *total.edge_areas.iter().min().unwrap_or(&1);
                    let mean = total.edge_areas.iter().sum::<u64>() as f64 / total.edge_areas.len() as f64;
                    params.edge = Some(ContourParams {
                        margin: EDGE_MARGIN,
                        min_area: ((min as f64 * 0.25).floor() as u32).max(1),
                        mean_area: mean,
                    });
                }
                _ => unreachable!("every class is handled"),
            }
        }
        Ok(params)
    }
}

#[derive(Default)]
struct SampleStats {
    seg: BTreeMap<DefectClass, (Vec<u64>, Vec<u64>)>,
    peaks_pos: Vec<u64>,
    peaks_neg: Vec<u64>,
    center_boxes: Vec<(u32, u32)>,
    edge_areas: Vec<u64>,
}

fn bin_of(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) * (BINS - 1) as f32).round() as usize).min(BINS - 1)
}

fn bin_value(i: usize) -> f64 {
    i as f64 / (BINS - 1) as f64
}

impl SampleStats {
    fn collect(image: &Plane, labels: &AnnotationSet, classes: &[DefectClass]) -> Result<Self, BackendError> {
        let mut s = SampleStats::default();
        let (w, h) = (image.width(), image.height());
        for &class in classes {
            match class.task() {
                Task::Segmentation => {
                    let mask = labels
                        .mask_or_empty(class, w, h)
                        .map_err(|e| BackendError::Data(e.to_string()))?;
                    if mask.width() != w || mask.height() != h {
                        return Err(BackendError::Data(format!("{class} mask does not match image size")));
                    }
                    let mut fg = vec![0u64; BINS];
                    let mut bg = vec![0u64; BINS];
                    let smoothed = image.median3x3();
                    for (&v, &m) in smoothed.data().iter().zip(mask.bits()) {
                        if m {
                            fg[bin_of(v)] += 1;
                        } else {
                            bg[bin_of(v)] += 1;
                        }
                    }
                    s.seg.insert(class, (fg, bg));
                }
                Task::Detection if class == DefectClass::CenterDefect => {
                    let gts: Vec<Rect> = labels.boxes_for(class).map(|b| b.rect()).collect();
                    s.center_boxes.extend(gts.iter().map(|r| (r.w, r.h)));
                    let mut pos = vec![0u64; BINS];
                    let mut neg = vec![0u64; BINS];
                    for (c, r, v) in peak_candidates(&image.box_mean(1), CANDIDATE_RADIUS) {
                        if gts.iter().any(|g| g.contains(c, r)) {
                            pos[bin_of(v)] += 1;
                        } else {
                            neg[bin_of(v)] += 1;
                        }
                    }
                    s.peaks_pos = pos;
                    s.peaks_neg = neg;
                }
                Task::Detection => {
                    s.edge_areas.extend(labels.boxes_for(class).map(|b| b.rect().area()));
                }
            }
        }
        Ok(s)
    }

    fn merge(&mut self, other: SampleStats) {
        for (class, (fg, bg)) in other.seg {
            let e = self.seg.entry(class).or_insert_with(|| (vec![0; BINS], vec![0; BINS]));
            add_into(&mut e.0, &fg);
            add_into(&mut e.1, &bg);
        }
        if self.peaks_pos.is_empty() {
            self.peaks_pos = vec![0; BINS];
            self.peaks_neg = vec![0; BINS];
        }
        add_into(&mut self.peaks_pos, &other.peaks_pos);
        add_into(&mut self.peaks_neg, &other.peaks_neg);
        self.center_boxes.extend(other.center_boxes);
        self.edge_areas.extend(other.edge_areas);
    }
}

fn add_into(acc: &mut [u64], other: &[u64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

fn smooth_hist(h: &[u64]) -> Vec<f64> {
    let radius = (3.0 * HIST_SIGMA).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * HIST_SIGMA * HIST_SIGMA)).exp())
        .collect();
    (0..BINS as i64)
        .map(|i| {
            (-radius..=radius)
                .filter(|d| (0..BINS as i64).contains(&(i + d)))
                .map(|d| kernel[(d + radius) as usize] * h[(i + d) as usize] as f64)
                .sum()
        })
        .collect()
}

/// Foreground share of the smoothed pixel counts at each intensity level.
/// Counts are not class-normalized, so the training prior is kept. Levels
/// no training pixel comes near copy the nearest level that has data.
fn posterior_table(fg: &[u64], bg: &[u64]) -> Vec<f64> {
    let (f, b) = (smooth_hist(fg), smooth_hist(bg));
    let total: f64 = f.iter().chain(&b).sum();
    let known: Vec<Option<f64>> = f
        .iter()
        .zip(&b)
        .map(|(&f, &b)| (f + b > 1e-9 * total.max(1.0)).then(|| f / (f + b)))
        .collect();
    let defined: Vec<usize> = (0..BINS).filter(|&i| known[i].is_some()).collect();
    (0..BINS)
        .map(|i| match known[i] {
            Some(p) => p,
            None => defined
                .iter()
                .min_by_key(|&&j| (j.abs_diff(i), j))
                .map_or(0.0, |&j| known[j].unwrap_or(0.0)),
        })
        .collect()
}

/// Threshold minimizing the balanced error rate (miss rate plus false-alarm
/// rate) over peak candidates; among equally good cuts the one in the widest
/// empty gap wins. Candidates at or above the threshold are positive.
fn stump(pos: &[u64], neg: &[u64]) -> f64 {
    let (np, nn) = (pos.iter().sum::<u64>().max(1) as f64, neg.iter().sum::<u64>().max(1) as f64);
    // cut i places the threshold between bin i-1 and bin i
    let mut best: (f64, usize, usize) = (f64::INFINITY, 0, 0);
    let mut missed = 0u64;
    let mut alarms: u64 = neg.iter().sum();
    let mut last_occupied: Option<usize> = None;
    for i in 0..=BINS {
        let err = missed as f64 / np + alarms as f64 / nn;
        let next_occupied = (i..BINS).find(|&j| pos[j] + neg[j] > 0);
        let gap = match (last_occupied, next_occupied) {
            (Some(a), Some(b)) => b - a,
            _ => BINS,
        };
        if err < best.0 - 1e-12 || ((err - best.0).abs() <= 1e-12 && gap > best.2) {
            best = (err, i, gap);
        }
        if i < BINS {
            missed += pos[i];
            alarms -= neg[i];
            if pos[i] + neg[i] > 0 {
                last_occupied = Some(i);
            }
        }
    }
    let cut = best.1;
    let below = (0..cut).rev().find(|&j| pos[j] + neg[j] > 0);
    let above = (cut..BINS).find(|&j| pos[j] + neg[j] > 0);
    match (below, above) {
        (Some(a), Some(b)) => (bin_value(a) + bin_value(b)) / 2.0,
        (None, Some(b)) => bin_value(b) - 0.5 / (BINS - 1) as f64,
        (Some(a), None) => bin_value(a) + 0.5 / (BINS - 1) as f64,
        (None, None) => 0.5,
    }
}

fn max_filter(p: &Plane, radius: u32) -> Plane {
    let r = radius as i64;
    let horizontal = Plane::from_fn(p.width(), p.height(), |c, row| {
        (-r..=r).map(|d| p.get_clamped(c as i64 + d, row as i64)).fold(f32::NEG_INFINITY, f32::max)
    });
    Plane::from_fn(p.width(), p.height(), |c, row| {
        (-r..=r)
            .map(|d| horizontal.get_clamped(c as i64, row as i64 + d))
            .fold(f32::NEG_INFINITY, f32::max)
    })
}

/// Local maxima of `smooth` within a (2r+1)^2 window, one per plateau
/// neighborhood, in descending value order.
fn peak_candidates(smooth: &Plane, radius: u32) -> Vec<(u32, u32, f32)> {
    let maxf = max_filter(smooth, radius);
    let mut cands: Vec<(u32, u32, f32)> = Vec::new();
    for r in 0..smooth.height() {
        for c in 0..smooth.width() {
            let v = smooth.get(c, r);
            if v >= maxf.get(c, r) {
                cands.push((c, r, v));
            }
        }
    }
    cands.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.1, a.0).cmp(&(b.1, b.0))));
    suppress(cands, radius)
}

fn suppress(cands: Vec<(u32, u32, f32)>, radius: u32) -> Vec<(u32, u32, f32)> {
    let mut kept: Vec<(u32, u32, f32)> = Vec::new();
    for cand in cands {
        let near = kept
            .iter()
            .any(|k| k.0.abs_diff(cand.0) <= radius && k.1.abs_diff(cand.1) <= radius);
        if !near {
            kept.push(cand);
        }
    }
    kept
}

fn detect_peaks(image: &Plane, params: &PeakParams) -> Vec<BoxAnnotation> {
    let smooth = image.box_mean(1);
    let above: Vec<_> = peak_candidates(&smooth, CANDIDATE_RADIUS)
        .into_iter()
        .filter(|c| c.2 as f64 >= params.threshold)
        .collect();
    let nms = (params.box_w.min(params.box_h) / 2).max(CANDIDATE_RADIUS);
    let (w, h) = (image.width() as f64, image.height() as f64);
    suppress(above, nms)
        .into_iter()
        .filter_map(|(c, r, v)| {
            let x0 = (c as f64 + 0.5 - params.box_w as f64 / 2.0).round().clamp(0.0, w);
            let y0 = (r as f64 + 0.5 - params.box_h as f64 / 2.0).round().clamp(0.0, h);
            let x1 = (x0 + params.box_w as f64).min(w);
            let y1 = (y0 + params.box_h as f64).min(h);
            (x1 > x0 && y1 > y0).then(|| {
                BoxAnnotation::scored(
                    DefectClass::CenterDefect,
                    Rect::new(x0 as u32, y0 as u32, (x1 - x0) as u32, (y1 - y0) as u32),
                    (v as f64).clamp(0.0, 1.0),
                )
            })
        })
        .collect()
}

/// Otsu threshold over a 256-bin histogram.
fn otsu(image: &Plane) -> f32 {
    let mut h = [0u64; BINS];
    for &v in image.data() {
        h[bin_of(v)] += 1;
    }
    let n = image.data().len() as f64;
    let sum: f64 = h.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0, mut best, mut best_t) = (0f64, 0f64, -1f64, 0usize);
    for (t, &c) in h.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = n - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    (best_t as f32 + 0.5) / (BINS - 1) as f32
}

/// 8-connected components of `on`, each as a list of pixel indices.
fn components(on: &[bool], width: u32, height: u32) -> Vec<Vec<usize>> {
    let (w, h) = (width as i64, height as i64);
    let mut seen = vec![false; on.len()];
    let mut out = Vec::new();
    for start in 0..on.len() {
        if !on[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (c, r) = ((i as i64) % w, (i as i64) / w);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nc, nr) = (c + dc, r + dr);
                    if nc < 0 || nr < 0 || nc >= w || nr >= h {
                        continue;
                    }
                    let j = (nr * w + nc) as usize;
                    if on[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Algebraic least-squares circle through points; returns (cx, cy, r).
fn fit_circle(points: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    if points.len() < 3 {
        return None;
    }
    let n = points.len() as f64;
    let (mx, my) = (
        points.iter().map(|p| p.0).sum::<f64>() / n,
        points.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let (mut suu, mut svv, mut suv, mut suuu, mut svvv, mut suvv, mut svuu) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (u, v) = (x - mx, y - my);
        suu += u * u;
        svv += v * v;
        suv += u * v;
        suuu += u * u * u;
        svvv += v * v * v;
        suvv += u * v * v;
        svuu += v * u * u;
    }
    let det = suu * svv - suv * suv;
    if det.abs() < 1e-12 {
        return None;
    }
    let b1 = 0.5 * (suuu + suvv);
    let b2 = 0.5 * (svvv + svuu);
    let uc = (b1 * svv - b2 * suv) / det;
    let vc = (suu * b2 - suv * b1) / det;
    let r = (uc * uc + vc * vc + (suu + svv) / n).sqrt();
    Some((uc + mx, vc + my, r))
}

fn detect_protrusions(image: &Plane, params: &ContourParams) -> Vec<BoxAnnotation> {
    let (w, h) = (image.width(), image.height());
    let t = otsu(image);
    let on: Vec<bool> = image.data().iter().map(|&v| v > t).collect();
    let Some(body) = components(&on, w, h).into_iter().max_by(|a, b| a.len().cmp(&b.len()).then(b[0].cmp(&a[0]))) else {
        return Vec::new();
    };
    let mut inside = vec![false; on.len()];
    body.iter().for_each(|&i| inside[i] = true);
    let center = |i: usize| ((i % w as usize) as f64 + 0.5, (i / w as usize) as f64 + 0.5);
    let boundary: Vec<(f64, f64)> = body
        .iter()
        .filter(|&&i| {
            let (c, r) = ((i % w as usize) as i64, (i / w as usize) as i64);
            [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dc, dr)| {
                let (nc, nr) = (c + dc, r + dr);
                nc < 0 || nr < 0 || nc >= w as i64 || nr >= h as i64 || !inside[(nr * w as i64 + nc) as usize]
            })
        })
        .map(|&i| center(i))
        .collect();
    let mut pts = boundary.clone();
    let mut circle = match fit_circle(&pts) {
        Some(c) => c,
        None => return Vec::new(),
    };
    for _ in 0..4 {
        let kept: Vec<(f64, f64)> = boundary
            .iter()
            .copied()
            .filter(|p| (((p.0 - circle.0).powi(2) + (p.1 - circle.1).powi(2)).sqrt() - circle.2).abs() <= 1.5)
            .collect();
        if kept.len() < 10 || kept.len() == pts.len() {
            break;
        }
        pts = kept;
        match fit_circle(&pts) {
            Some(c) => circle = c,
            None => break,
        }
    }
    let (cx, cy, radius) = circle;
    let mut outside = vec![false; on.len()];
    for &i in &body {
        let (x, y) = center(i);
        if ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() > radius + params.margin {
            outside[i] = true;
        }
    }
    let mut boxes: Vec<BoxAnnotation> = components(&outside, w, h)
        .into_iter()
        .filter(|comp| comp.len() as u32 >= params.min_area)
        .map(|comp| {
            let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
            for &i in &comp {
                let (c, r) = ((i % w as usize) as u32, (i / w as usize) as u32);
                x0 = x0.min(c);
                y0 = y0.min(r);
                x1 = x1.max(c);
                y1 = y1.max(r);
            }
            let score = 1.0 - (-(comp.len() as f64) / params.mean_area.max(1.0)).exp();
            BoxAnnotation::scored(DefectClass::EdgeDefect, Rect::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1), score)
        })
        .collect();
    boxes.sort_by_key(|b| b.rect());
    boxes
}

/// Posterior of the local median, interpolated between intensity levels.
fn segment(image: &Plane, params: &SegmentationParams) -> Vec<f64> {
    let table = &params.posterior;
    let last = table.len().saturating_sub(1);
    image
        .median3x3()
        .data()
        .iter()
        .map(|&v| {
            let x = v.clamp(0.0, 1.0) as f64 * last as f64;
            let i = (x.floor() as usize).min(last);
            let j = (i + 1).min(last);
            let t = x - i as f64;
            (table[i] * (1.0 - t) + table[j] * t).clamp(0.0, 1.0)
        })
        .collect()
}

/// Runs a fitted model on one image.
pub fn predict_with(params: &ReferenceParams, image_id: &str, image: &Plane) -> Prediction {
    let mut pred = Prediction::empty(image_id);
    for (&class, sp) in &params.segmentation {
        pred.probability_maps
            .insert(class, ProbabilityMap::new(image.width(), image.height(), segment(image, sp)));
    }
    if let Some(p) = &params.center {
        pred.boxes.extend(detect_peaks(image, p));
    }
    if let Some(p) = &params.edge {
        pred.boxes.extend(detect_protrusions(image, p));
    }
    pred
}

impl ModelBackend for ReferenceClassical {
    fn kind(&self) -> BackendKind {
        BackendKind::ReferenceClassical
    }

    fn train(&self, data: &dyn LabeledData, hp: &TrainingHyperparams) -> Result<ModelHandle, BackendError> {
        hp.validate()?;
        let _exclusive = self.train_lock.lock();
        let params = self.fit(data)?;
        let mut state = self.state.lock();
        state.version += 1;
        let handle = ModelHandle {
            model_id: format!("{}-v{}", self.lineage, state.version),
            backend_kind: BackendKind::ReferenceClassical,
            version: state.version,
            training_manifest_id: data.dataset_id().to_string(),
            resolution: data.resolution(),
        };
        state.models.insert(handle.model_id.clone(), params);
        Ok(handle)
    }

    fn predict(&self, model: &ModelHandle, image_id: &str, image: &Plane) -> Result<Prediction, BackendError> {
        let params = self.params(model)?;
        check_resolution(model, image)?;
        Ok(predict_with(&params, image_id, image))
    }

    fn export_params(&self, model: &ModelHandle) -> Result<Vec<u8>, BackendError> {
        let params = self.params(model)?;
        serde_json::to_vec_pretty(&params).map_err(|e| BackendError::BadParams(e.to_string()))
    }

    fn import_params(&self, model: &ModelHandle, params: &[u8]) -> Result<(), BackendError> {
        let parsed: ReferenceParams = serde_json::from_slice(params).map_err(|e| BackendError::BadParams(e.to_string()))?;
        if parsed.resolution != model.resolution {
            return Err(BackendError::BadParams(format!(
                "parameters are for {} px, handle says {}",
                parsed.resolution, model.resolution
            )));
        }
        let mut state = self.state.lock();
        state.version = state.version.max(model.version);
        state.models.insert(model.model_id.clone(), parsed);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{BinaryMask, MaskAnnotation, Source};
    use crate::backend::InMemoryData;
    use crate::metrics::EvalConfig;

    const BG: f32 = 0.08;
    const FG: f32 = 0.7;

    /// Dark frame with bright 10x10 patches and labels to match.
    fn two_tone(id: &str, size: u32, patches: &[(u32, u32)]) -> (Plane, AnnotationSet) {
        let inside = |c: u32, r: u32| patches.iter().any(|&(x, y)| c >= x && c < x + 10 && r >= y && r < y + 10);
        let image = Plane::from_fn(size, size, |c, r| if inside(c, r) { FG } else { BG });
        let mut labels = AnnotationSet::blank(id, Source::Consensus);
        labels.set_mask(MaskAnnotation::from_mask(
            DefectClass::PolycrystallineDefect,
            &BinaryMask::from_fn(size, size, inside),
        ));
        (image, labels)
    }

    fn seg_only() -> ReferenceClassical {
        ReferenceClassical::with_classes("ref", vec![DefectClass::PolycrystallineDefect])
    }

    fn two_tone_data() -> InMemoryData {
        InMemoryData::new(
            "two-tone",
            64,
            vec![
                two_tone("a", 64, &[(5, 5), (40, 30)]),
                two_tone("b", 64, &[(20, 44)]),
                two_tone("c", 64, &[(50, 2), (3, 50)]),
            ],
        )
    }

    #[test]
    fn background_frame_predicts_nothing() {
        let be = seg_only();
        let m = be.train(&two_tone_data(), &TrainingHyperparams::default()).unwrap();
        let params = be.params(&m).unwrap();
        let sp = &params.segmentation[&DefectClass::PolycrystallineDefect];
        // the median clips patch corners into the background tone, so only a
        // handful of foreground pixels leak there
        assert!(sp.posterior[bin_of(FG)] > 0.99);
        assert!(sp.posterior[bin_of(BG)] < 0.01);
        assert!(sp.posterior[0] < 0.01);
        assert!(sp.posterior[BINS - 1] > 0.99);
        let blank = Plane::new(64, 64, BG);
        let pred = be.predict(&m, "blank", &blank).unwrap();
        let map = &pred.probability_maps[&DefectClass::PolycrystallineDefect];
        assert!(map.values.iter().all(|&p| p < 0.01));
        assert!(pred.boxes.is_empty());
    }

    #[test]
    fn bright_patches_segment_cleanly() {
        let be = seg_only();
        let m = be.train(&two_tone_data(), &TrainingHyperparams::default()).unwrap();
        let test = InMemoryData::new("t", 64, vec![two_tone("x", 64, &[(12, 17), (33, 40)])]);
        let ev = be.evaluate(&m, &test, &EvalConfig::default()).unwrap();
        assert!(ev.report.value(DefectClass::PolycrystallineDefect).unwrap() >= 0.95);
    }

    #[test]
    fn training_errors() {
        let be = ReferenceClassical::new("ref");
        let empty = InMemoryData::new("e", 64, vec![]);
        assert!(matches!(be.train(&empty, &TrainingHyperparams::default()), Err(BackendError::EmptyTrainingSet)));
        assert!(matches!(
            be.train(&two_tone_data(), &TrainingHyperparams::default()),
            Err(BackendError::ClassUnrepresented(DefectClass::CenterDefect))
        ));
        let hp = TrainingHyperparams {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(matches!(seg_only().train(&two_tone_data(), &hp), Err(BackendError::HyperparamOutOfRange(_))));
    }

    #[test]
    fn untrained_and_resolution_errors() {
        let be = seg_only();
        let ghost = ModelHandle {
            model_id: "nope".into(),
            backend_kind: BackendKind::ReferenceClassical,
            version: 0,
            training_manifest_id: "x".into(),
            resolution: 64,
        };
        assert!(matches!(be.predict(&ghost, "a", &Plane::new(64, 64, 0.0)), Err(BackendError::UntrainedModel(_))));
        let m = be.train(&two_tone_data(), &TrainingHyperparams::default()).unwrap();
        assert!(matches!(
            be.predict(&m, "a", &Plane::new(128, 128, 0.0)),
            Err(BackendError::ResolutionMismatch { .. })
        ));
    }

    #[test]
    fn deterministic_params_and_versions() {
        let a = seg_only();
        let b = seg_only();
        let ma = a.train(&two_tone_data(), &TrainingHyperparams::default()).unwrap();
        let mb = b.train(&two_tone_data(), &TrainingHyperparams::default()).unwrap();
        assert_eq!(a.export_params(&ma).unwrap(), b.export_params(&mb).unwrap());
        let ma2 = a.train(&two_tone_data(), &TrainingHyperparams::default()).unwrap();
        assert_eq!((ma.version, ma2.version), (1, 2));
        assert_ne!(ma.model_id, ma2.model_id);

        let c = seg_only();
        c.import_params(&ma, &a.export_params(&ma).unwrap()).unwrap();
        let img = two_tone("q", 64, &[(1, 1)]).0;
        assert_eq!(c.predict(&ma, "q", &img).unwrap(), a.predict(&ma, "q", &img).unwrap());
    }

    #[test]
    fn posterior_and_stump_basics() {
        let mut fg = vec![0u64; BINS];
        let mut bg = vec![0u64; BINS];
        fg[100] = 10;
        bg[100] = 30;
        bg[20] = 5;
        let t = posterior_table(&fg, &bg);
        // same smoothing on both sides of bin 100, so the ratio survives
        assert!((t[100] - 0.25).abs() < 1e-12);
        assert_eq!(t[20], 0.0);
        // far from all data: copies the nearest level with data
        assert!((t[BINS - 1] - t[106]).abs() < 1e-12);
        let p = segment(&Plane::new(1, 1, bin_value(100) as f32), &SegmentationParams { posterior: t });
        assert!((p[0] - 0.25).abs() < 1e-6);

        let mut pos = vec![0u64; BINS];
        let mut neg = vec![0u64; BINS];
        neg[100] = 40;
        neg[120] = 3;
        pos[200] = 5;
        let t = stump(&pos, &neg);
        assert!(t > bin_value(120) && t < bin_value(200));
        assert!((t - (bin_value(120) + bin_value(200)) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn circle_fit_recovers_circle() {
        let pts: Vec<(f64, f64)> = (0..36)
            .map(|k| {
                let a = k as f64 * std::f64::consts::TAU / 36.0;
                (20.0 + 7.0 * a.cos(), 11.0 + 7.0 * a.sin())
            })
            .collect();
        let (cx, cy, r) = fit_circle(&pts).unwrap();
        assert!((cx - 20.0).abs() < 1e-9 && (cy - 11.0).abs() < 1e-9 && (r - 7.0).abs() < 1e-9);
    }

    #[test]
    fn peak_and_protrusion_detectors() {
        // disk of radius 20 with one bump and one bright spot
        let image = Plane::from_fn(64, 64, |c, r| {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            let d = ((x - 32.0).powi(2) + (y - 32.0).powi(2)).sqrt();
            let bump = ((x - 52.0).powi(2) + (y - 32.0).powi(2)).sqrt() <= 4.0;
            let spot = (-((x - 28.0).powi(2) + (y - 30.0).powi(2)) / 8.0).exp();
            if d <= 20.0 || bump {
                (0.4 + 0.55 * spot) as f32
            } else {
                0.08
            }
        });
        let peaks = detect_peaks(
            &image,
            &PeakParams {
                threshold: 0.7,
                box_w: 8,
                box_h: 8,
            },
        );
        assert_eq!(peaks.len(), 1);
        assert_eq!(peaks[0].rect(), Rect::new(24, 26, 8, 8));
        let bumps = detect_protrusions(
            &image,
            &ContourParams {
                margin: EDGE_MARGIN,
                min_area: 3,
                mean_area: 20.0,
            },
        );
        assert_eq!(bumps.len(), 1);
        let b = bumps[0].rect();
        assert!(b.x >= 52 && b.right() <= 56 && b.y >= 28 && b.bottom() <= 36, "{b:?}");
    }
}
