//! Uncertainty scoring and batch selection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::DefectClass;
use crate::backend::Prediction;
use crate::raster::Plane;

pub const FEATURE_BINS: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("no score for image {0}")]
    MissingScore(String),
    #[error("no feature vector for image {0}")]
    MissingFeature(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub image_id: String,
    pub score: f64,
    pub per_class_scores: BTreeMap<DefectClass, f64>,
}

fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.log2() };
    term(p) + term(1.0 - p)
}

/// Segmentation classes score the mean binary entropy of their maps.
/// Detection classes score `4p(1-p)` on the mean box confidence, or 0.5 with no boxes.
pub fn score_uncertainty(pred: &Prediction) -> Result<UncertaintyScore, SelectionError> {
    let mut per_class = BTreeMap::new();
    for (&class, map) in &pred.probability_maps {
        if let Some(&bad) = map.values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(SelectionError::ProbabilityOutOfRange(bad));
        }
        let s = if map.values.is_empty() {
            0.0
        } else {
            map.values.iter().map(|&p| binary_entropy(p)).sum::<f64>() / map.values.len() as f64
        };
        per_class.insert(class, s);
    }
    for class in DefectClass::detection_classes() {
        let scores: Vec<f64> = pred.boxes.iter().filter(|b| b.class == class).map(|b| b.score.unwrap_or(0.0)).collect();
        if let Some(&bad) = scores.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(SelectionError::ProbabilityOutOfRange(bad));
        }
        let s = if scores.is_empty() {
            0.5
        } else {
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            4.0 * mean * (1.0 - mean)
        };
        per_class.insert(class, s);
    }
    let score = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(UncertaintyScore {
        image_id: pred.image_id.clone(),
        score,
        per_class_scores: per_class,
    })
}

/// Default descriptor: normalized 64-bin gray histogram.
pub fn histogram_features(image: &Plane) -> Vec<f64> {
    image.histogram(FEATURE_BINS)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Picks `take` of `ties` by farthest-first traversal seeded with `chosen`.
fn farthest_first(ties: &[&String], take: usize, chosen: &[String], features: &BTreeMap<String, Vec<f64>>) -> Vec<String> {
    let feat = |id: &str| features[id].as_slice();
    let mut refs: Vec<&[f64]> = chosen.iter().map(|id| feat(id)).collect();
    let mut remaining: Vec<&String> = ties.to_vec();
    let mut out = Vec::with_capacity(take);
    if refs.is_empty() && take > 0 {
        // start from one end of the widest pair
        let spread = |id: &String| remaining.iter().map(|o| dist(feat(id), feat(o))).fold(0.0, f64::max);
        let mut best = 0;
        for i in 1..remaining.len() {
            if spread(remaining[i]) > spread(remaining[best]) {
                best = i;
            }
        }
        let first = remaining.remove(best);
        refs.push(feat(first));
        out.push(first.clone());
    }
    while out.len() < take {
        let gap = |id: &String| refs.iter().map(|r| dist(feat(id), r)).fold(f64::INFINITY, f64::min);
        let mut best = 0;
        for i in 1..remaining.len() {
            if gap(remaining[i]) > gap(remaining[best]) {
                best = i;
            }
        }
        let next = remaining.remove(best);
        refs.push(feat(next));
        out.push(next.clone());
    }
    out
}

/// Top-`k` by score. Exact ties at the cut are broken by farthest-first
/// traversal over `features`, or by image id when no features are given.
pub fn select_batch(
    pool: &[String],
    scores: &BTreeMap<String, f64>,
    features: Option<&BTreeMap<String, Vec<f64>>>,
    k: usize,
) -> Result<Vec<String>, SelectionError> {
    for id in pool {
        if !scores.contains_key(id) {
            return Err(SelectionError::MissingScore(id.clone()));
        }
        if let Some(f) = features {
            if !f.contains_key(id) {
                return Err(SelectionError::MissingFeature(id.clone()));
            }
        }
    }
    if k >= pool.len() {
        return Ok(pool.to_vec());
    }
    let mut ranked: Vec<&String> = pool.iter().collect();
    ranked.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    ranked.dedup();
    let mut selected: Vec<String> = Vec::with_capacity(k);
    let mut i = 0;
    while selected.len() < k && i < ranked.len() {
        let level = scores[ranked[i]];
        let j = ranked[i..].iter().position(|id| scores[*id] != level).map_or(ranked.len(), |p| i + p);
        let group = &ranked[i..j];
        let room = k - selected.len();
        if group.len() <= room {
            selected.extend(group.iter().map(|s| (*s).clone()));
        } else {
            let picked = match features {
                Some(f) => farthest_first(group, room, &selected, f),
                None => group[..room].iter().map(|s| (*s).clone()).collect(),
            };
            selected.extend(picked);
        }
        i = j;
    }
    Ok(selected)
}
