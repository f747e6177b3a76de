//! Resolution x augmentation-rate experiment grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::annotation::AnnotationSet;
use crate::augment::{apply_transform, expand_manifest, AugmentationPlan};
use crate::backend::{BackendError, LabeledData, ModelBackend, ModelHandle, TrainingHyperparams};
use crate::dataset::{DatasetManifest, Lineage, ManifestEntry, Split};
use crate::metrics::{report_csv, EvalConfig, MetricsReport};
use crate::raster::Plane;

/// Labeled originals at any supported resolution.
pub trait SampleSource: Sync {
    fn sample(&self, image_id: &str, resolution: u32) -> Result<(Plane, AnnotationSet), BackendError>;
}

/// Manifest entries backed by a sample source; augmented children are
/// materialized from their parent on demand.
pub struct ManifestData<'a> {
    dataset_id: String,
    resolution: u32,
    entries: Vec<ManifestEntry>,
    source: &'a dyn SampleSource,
}

impl<'a> ManifestData<'a> {
    pub fn new(dataset_id: impl Into<String>, resolution: u32, entries: Vec<ManifestEntry>, source: &'a dyn SampleSource) -> Self {
        ManifestData {
            dataset_id: dataset_id.into(),
            resolution,
            entries,
            source,
        }
    }
}

impl LabeledData for ManifestData<'_> {
    fn dataset_id(&self) -> &str {
        &self.dataset_id
    }
    fn resolution(&self) -> u32 {
        self.resolution
    }
    fn len(&self) -> usize {
        self.entries.len()
    }
    fn image_id(&self, index: usize) -> String {
        self.entries[index].image_id.clone()
    }
    fn sample(&self, index: usize) -> Result<(Plane, AnnotationSet), BackendError> {
        let entry = &self.entries[index];
        match &entry.lineage {
            Lineage::Original => self.source.sample(&entry.image_id, self.resolution),
            Lineage::Augmented {
                parent_image_id,
                transform,
            } => {
                let (image, labels) = self.source.sample(parent_image_id, self.resolution)?;
                let out = apply_transform(&image, &labels, transform).map_err(|e| BackendError::Data(e.to_string()))?;
                let mut labels = out.labels;
                labels.image_id = entry.image_id.clone();
                Ok((out.image, labels))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub resolutions: Vec<u32>,
    pub rates: Vec<u32>,
    pub augment_seed: u64,
    pub hyperparams: TrainingHyperparams,
    pub eval: EvalConfig,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            resolutions: vec![256, 512],
            rates: vec![2, 5, 10],
            augment_seed: 0,
            hyperparams: TrainingHyperparams::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub resolution: u32,
    pub rate: u32,
    pub train_size: usize,
    pub test_size: usize,
    pub model: ModelHandle,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    /// Ordered by resolution, then rate.
    pub cells: Vec<GridCell>,
}

impl ExperimentGrid {
    pub fn cell(&self, resolution: u32, rate: u32) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.resolution == resolution && c.rate == rate)
    }

    pub fn csv(&self) -> String {
        report_csv(&self.cells.iter().map(|c| c.report.clone()).collect::<Vec<_>>())
    }
}

/// Trains and evaluates one model per (resolution, rate) cell. The reported
/// dataset size is `rate` times the number of originals, matching how the
/// expanded dataset sizes are quoted; the test split is never augmented.
pub fn run_experiment_grid(
    base: &DatasetManifest,
    source: &dyn SampleSource,
    backend_for: &(dyn Fn(&str) -> Box<dyn ModelBackend> + Sync),
    config: &GridConfig,
) -> Result<ExperimentGrid, OrchestratorError> {
    if config.resolutions.is_empty() || config.rates.is_empty() {
        return Err(OrchestratorError::InvalidConfig("grid needs at least one resolution and one rate".into()));
    }
    base.validate().map_err(|e| OrchestratorError::InvalidConfig(e.to_string()))?;
    let mut cells_spec = Vec::new();
    for &res in &config.resolutions {
        for &rate in &config.rates {
            cells_spec.push((res, rate));
        }
    }
    let cells = cells_spec
        .par_iter()
        .map(|&(res, rate)| run_cell(base, source, backend_for, config, res, rate))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ExperimentGrid { cells })
}

fn run_cell(
    base: &DatasetManifest,
    source: &dyn SampleSource,
    backend_for: &(dyn Fn(&str) -> Box<dyn ModelBackend> + Sync),
    config: &GridConfig,
    res: u32,
    rate: u32,
) -> Result<GridCell, OrchestratorError> {
    let mut at_res = DatasetManifest::new(format!("{}-{res}", base.dataset_id), base.split_seed);
    at_res.entries = base
        .entries
        .iter()
        .filter(|e| e.resolution == res && e.lineage.is_original())
        .cloned()
        .collect();
    if at_res.entries.is_empty() {
        return Err(OrchestratorError::InvalidConfig(format!("no originals at resolution {res}")));
    }
    at_res.split = base
        .split
        .iter()
        .filter(|(id, _)| at_res.entries.iter().any(|e| &e.image_id == *id))
        .map(|(k, v)| (k.clone(), *v))
        .collect();
    let originals = at_res.entries.len();
    let expanded = expand_manifest(&at_res, &AugmentationPlan::new(rate, config.augment_seed))?;
    let pick = |split: Split| -> Vec<ManifestEntry> {
        expanded
            .entries
            .iter()
            .filter(|e| expanded.split_of(&e.image_id) == Some(split))
            .cloned()
            .collect()
    };
    let train = ManifestData::new(expanded.dataset_id.clone(), res, pick(Split::Train), source);
    let test = ManifestData::new(format!("{}-test", at_res.dataset_id), res, pick(Split::Test), source);
    if test.is_empty() {
        return Err(OrchestratorError::InvalidConfig(format!("no test images at resolution {res}")));
    }
    let backend = backend_for(&format!("grid-{res}-x{rate}"));
    let model = backend.train(&train, &config.hyperparams)?;
    let mut report = backend.evaluate(&model, &test, &config.eval)?.report;
    report.dataset_id = expanded.dataset_id.clone();
    report.dataset_size = originals * rate as usize;
    log::info!("grid cell {res} x{rate}: mean {:.4}", report.mean_accuracy);
    Ok(GridCell {
        resolution: res,
        rate,
        train_size: train.len(),
        test_size: test.len(),
        model,
        report,
    })
}
