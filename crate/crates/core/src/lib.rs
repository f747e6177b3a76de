//! Core of a human-in-the-loop defect annotation pipeline for crystal growth
//! imagery: annotation model, preprocessing, consensus labeling, active
//! selection, augmentation, evaluation, model backends and the training loop.

pub mod annotation;
pub mod augment;
pub mod backend;
pub mod dataset;
pub mod ingest;
pub mod labeling;
pub mod metrics;
pub mod orchestrator;
pub mod raster;
pub mod selection;
pub mod store;
pub mod synthetic;

pub use annotation::{
    AnnotationError, AnnotationSet, BinaryMask, BoxAnnotation, DefectClass, ImageRecord, ImageStatus, MaskAnnotation,
    Rect, RejectReason, ReviewState, Source, Task,
};
pub use backend::{LabeledData, ModelBackend, ModelHandle, Prediction};
pub use dataset::{DatasetManifest, ManifestEntry, Split};
pub use metrics::MetricsReport;
pub use raster::Plane;
