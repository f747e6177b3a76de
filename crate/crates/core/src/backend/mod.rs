//! Trainer/predictor contract plus the built-in and HTTP-backed implementations.

mod external;
mod reference;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotationSet, BinaryMask, BoxAnnotation, DefectClass, MaskAnnotation, Source};
use crate::metrics::{self, EvalConfig, Evaluation, MetricsError, TestSample};
use crate::raster::Plane;

pub use external::{ExternalBackend, ExternalConfig};
pub use reference::{ReferenceClassical, ReferenceParams};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("no training example for {0}")]
    ClassUnrepresented(DefectClass),
    #[error("hyperparameter out of range: {0}")]
    HyperparamOutOfRange(String),
    #[error("model expects {expected}x{expected} input, got {width}x{height}")]
    ResolutionMismatch { expected: u32, width: u32, height: u32 },
    #[error("model {0} is not trained")]
    UntrainedModel(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("request timed out")]
    Timeout,
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("remote error: {0}")]
    RemoteError(String),
    #[error("training data: {0}")]
    Data(String),
    #[error("invalid model parameters: {0}")]
    BadParams(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(width: u32, height: u32, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), (width * height) as usize, "probability map size");
        ProbabilityMap { width, height, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub probability_maps: BTreeMap<DefectClass, ProbabilityMap>,
    pub boxes: Vec<BoxAnnotation>,
}

impl Prediction {
    pub fn empty(image_id: impl Into<String>) -> Self {
        Prediction {
            image_id: image_id.into(),
            probability_maps: BTreeMap::new(),
            boxes: Vec::new(),
        }
    }

    /// Checks grid sizes, probability ranges, box frames and scores.
    pub fn validate(&self, width: u32, height: u32) -> Result<(), String> {
        for (class, map) in &self.probability_maps {
            if !class.is_segmentation() {
                return Err(format!("probability map for detection class {class}"));
            }
            if map.width != width || map.height != height || map.values.len() != (width * height) as usize {
                return Err(format!("{class} map is {}x{}, expected {width}x{height}", map.width, map.height));
            }
            if let Some(p) = map.values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(format!("{class} probability {p} outside [0, 1]"));
            }
        }
        for b in &self.boxes {
            if b.class.is_segmentation() {
                return Err(format!("box for segmentation class {}", b.class));
            }
            if b.score.is_none() {
                return Err("box without score".into());
            }
            b.validate(width, height).map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    /// Thresholded masks and scored boxes as a model-sourced annotation set.
    pub fn to_annotation_set(&self, model_id: &str, width: u32, height: u32, threshold: f64) -> AnnotationSet {
        let mut set = AnnotationSet::blank(self.image_id.clone(), Source::Model(model_id.to_string()));
        for &class in self.probability_maps.keys() {
            let mask: BinaryMask = metrics::binarize(self, class, width, height, threshold);
            set.set_mask(MaskAnnotation::from_mask(class, &mask));
        }
        set.boxes = self.boxes.clone();
        set
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    SparseCategoricalCrossEntropy,
    Focal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingHyperparams {
    pub epochs: u32,
    pub batch_size: u32,
    pub learning_rate: f64,
    pub loss: LossKind,
}

impl Default for TrainingHyperparams {
    fn default() -> Self {
        TrainingHyperparams {
            epochs: 30,
            batch_size: 20,
            learning_rate: 1e-4,
            loss: LossKind::SparseCategoricalCrossEntropy,
        }
    }
}

impl TrainingHyperparams {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !(30..=45).contains(&self.epochs) {
            return Err(BackendError::HyperparamOutOfRange(format!("epochs {} not in [30, 45]", self.epochs)));
        }
        if self.batch_size == 0 {
            return Err(BackendError::HyperparamOutOfRange("batch_size must be positive".into()));
        }
        if !(6e-6..=3e-4).contains(&self.learning_rate) {
            return Err(BackendError::HyperparamOutOfRange(format!(
                "learning_rate {} not in [6e-6, 3e-4]",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum BackendKind {
    ReferenceClassical,
    External { endpoint: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelHandle {
    pub model_id: String,
    pub backend_kind: BackendKind,
    pub version: u64,
    pub training_manifest_id: String,
    pub resolution: u32,
}

/// Labeled images at a single resolution.
pub trait LabeledData: Sync {
    fn dataset_id(&self) -> &str;
    fn resolution(&self) -> u32;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn image_id(&self, index: usize) -> String;
    fn sample(&self, index: usize) -> Result<(Plane, AnnotationSet), BackendError>;
    /// Location an out-of-process trainer can read the data from.
    fn dataset_uri(&self) -> Option<String> {
        None
    }
}

#[derive(Debug, Clone, Default)]
pub struct InMemoryData {
    pub dataset_id: String,
    pub resolution: u32,
    pub samples: Vec<(Plane, AnnotationSet)>,
    pub uri: Option<String>,
}

impl InMemoryData {
    pub fn new(dataset_id: impl Into<String>, resolution: u32, samples: Vec<(Plane, AnnotationSet)>) -> Self {
        InMemoryData {
            dataset_id: dataset_id.into(),
            resolution,
            samples,
            uri: None,
        }
    }
}

impl LabeledData for InMemoryData {
    fn dataset_id(&self) -> &str {
        &self.dataset_id
    }
    fn resolution(&self) -> u32 {
        self.resolution
    }
    fn len(&self) -> usize {
        self.samples.len()
    }
    fn image_id(&self, index: usize) -> String {
        self.samples[index].1.image_id.clone()
    }
    fn sample(&self, index: usize) -> Result<(Plane, AnnotationSet), BackendError> {
        Ok(self.samples[index].clone())
    }
    fn dataset_uri(&self) -> Option<String> {
        self.uri.clone()
    }
}

pub trait ModelBackend: Send + Sync {
    fn kind(&self) -> BackendKind;

    /// Fits a new model version on `data`.
    fn train(&self, data: &dyn LabeledData, hp: &TrainingHyperparams) -> Result<ModelHandle, BackendError>;

    fn predict(&self, model: &ModelHandle, image_id: &str, image: &Plane) -> Result<Prediction, BackendError>;

    /// Predicts every sample and scores against its labels.
    fn evaluate(&self, model: &ModelHandle, data: &dyn LabeledData, config: &EvalConfig) -> Result<Evaluation, BackendError> {
        let mut predictions = BTreeMap::new();
        let mut tests = Vec::with_capacity(data.len());
        for i in 0..data.len() {
            let (image, labels) = data.sample(i)?;
            let id = labels.image_id.clone();
            predictions.insert(id.clone(), self.predict(model, &id, &image)?);
            tests.push(TestSample {
                image_id: id,
                width: image.width(),
                height: image.height(),
                ground_truth: labels,
            });
        }
        Ok(metrics::evaluate(
            data.dataset_id(),
            data.resolution(),
            data.len(),
            &predictions,
            &tests,
            config,
        )?)
    }

    /// Serialized parameters of a trained model.
    fn export_params(&self, model: &ModelHandle) -> Result<Vec<u8>, BackendError>;

    /// Makes a previously exported model available for prediction.
    fn import_params(&self, model: &ModelHandle, params: &[u8]) -> Result<(), BackendError>;
}

pub(crate) fn check_resolution(model: &ModelHandle, image: &Plane) -> Result<(), BackendError> {
    if image.width() != model.resolution || image.height() != model.resolution {
        return Err(BackendError::ResolutionMismatch {
            expected: model.resolution,
            width: image.width(),
            height: image.height(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::Rect;

    #[test]
    fn hyperparam_ranges() {
        TrainingHyperparams::default().validate().unwrap();
        let bad = TrainingHyperparams {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(BackendError::HyperparamOutOfRange(_))));
        let bad = TrainingHyperparams {
            epochs: 46,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn prediction_validation() {
        let mut p = Prediction::empty("a");
        p.probability_maps
            .insert(DefectClass::PolycrystallineDefect, ProbabilityMap::new(2, 1, vec![0.2, 1.3]));
        assert!(p.validate(2, 1).unwrap_err().contains("1.3"));
        let mut p = Prediction::empty("a");
        p.boxes.push(BoxAnnotation::scored(DefectClass::CenterDefect, Rect::new(1, 1, 4, 4), 0.5));
        assert!(p.validate(4, 4).is_err());
        p.validate(8, 8).unwrap();
        p.boxes[0].score = None;
        assert!(p.validate(8, 8).is_err());
    }

    #[test]
    fn prediction_to_annotation_set_validates() {
        let mut p = Prediction::empty("a");
        p.probability_maps
            .insert(DefectClass::PolycrystallineDefect, ProbabilityMap::new(2, 2, vec![0.9, 0.1, 0.5, 0.51]));
        p.boxes.push(BoxAnnotation::scored(DefectClass::EdgeDefect, Rect::new(0, 0, 1, 1), 0.7));
        let set = p.to_annotation_set("m-v1", 2, 2, 0.5);
        set.validate(2, 2).unwrap();
        let m = set.mask_for(DefectClass::PolycrystallineDefect).unwrap().to_mask().unwrap();
        assert_eq!(m.bits(), &[true, false, false, true]);
    }
}
