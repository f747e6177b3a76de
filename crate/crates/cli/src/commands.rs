//! Subcommand implementations over a data root:
//!
//! ```text
//! <root>/images/<id>.png      preprocessed frames
//! <root>/labels/<id>.json     expert-approved annotation sets
//! <root>/runs/<run>.json      growth-run capture manifests
//! <root>/models/<id>/         model registry
//! <root>/grid_report.csv, pipeline_state.json, relabel_<n>.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use defectloop_core::augment::{apply_transform, expand_dataset, AugmentationPlan};
use defectloop_core::backend::{BackendError, InMemoryData, ModelBackend, ReferenceClassical, TrainingHyperparams};
use defectloop_core::dataset::{DatasetManifest, Lineage, ManifestEntry, Split};
use defectloop_core::ingest::{
    filter_frames, preprocess_image, resample_sequence, split_dataset, GrowthRunManifest, PreprocessConfig,
};
use defectloop_core::metrics::EvalConfig;
use defectloop_core::orchestrator::{
    run_experiment_grid, GridConfig, Registry, SampleSource, GRID_REPORT_FILE, RELABEL_QUEUE_FILE, STATE_FILE,
};
use defectloop_core::raster::load_gray8;
use defectloop_core::selection::{histogram_features, score_uncertainty, select_batch};
use defectloop_core::store::{read_json, write_json_atomic};
use defectloop_core::synthetic::{SyntheticConfig, SyntheticCorpus};
use defectloop_core::{AnnotationSet, ImageRecord, ImageStatus, Plane, Rect, ReviewState};

use crate::service::list_ids;

pub struct DataRoot {
    root: PathBuf,
}

impl DataRoot {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataRoot { root: root.into() }
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.png"))
    }

    fn label_path(&self, id: &str) -> PathBuf {
        self.root.join("labels").join(format!("{id}.json"))
    }

    fn run_path(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(format!("{run_id}.json"))
    }

    fn save_image(&self, id: &str, plane: &Plane) -> Result<()> {
        let path = self.image_path(id);
        std::fs::create_dir_all(path.parent().expect("nested path"))?;
        plane.save_png(&path).with_context(|| format!("writing {}", path.display()))
    }

    fn save_labels(&self, set: &AnnotationSet) -> Result<()> {
        Ok(write_json_atomic(&self.label_path(&set.image_id), set)?)
    }

    pub fn labeled_ids(&self) -> Result<Vec<String>> {
        Ok(list_ids(&self.root.join("labels"), "json")?)
    }

    fn load_image(&self, id: &str, res: Option<u32>) -> Result<Plane> {
        let plane = Plane::load(&self.image_path(id)).with_context(|| format!("reading image {id}"))?;
        Ok(match res {
            Some(r) if plane.width() != r || plane.height() != r => plane.resize_area(r, r),
            _ => plane,
        })
    }

    fn load_labeled(&self, id: &str) -> Result<(Plane, AnnotationSet)> {
        let image = self.load_image(id, None)?;
        let labels: AnnotationSet = read_json(&self.label_path(id))?;
        labels
            .validate(image.width(), image.height())
            .with_context(|| format!("labels for {id} do not fit its image"))?;
        Ok((image, labels))
    }

    fn registry(&self) -> Result<Registry> {
        Ok(Registry::open(&self.root)?)
    }
}

fn is_augmented(id: &str) -> bool {
    id.contains("~aug")
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

// ---------------------------------------------------------------- synth

pub fn synth(root: &DataRoot, images: usize, seed: u64, resolution: u32) -> Result<()> {
    let corpus = SyntheticCorpus::generate(&SyntheticConfig {
        images,
        seed,
        ..SyntheticConfig::default()
    });
    for id in corpus.ids() {
        root.save_image(&id, &corpus.render(&id, resolution)?)?;
        let mut gt = corpus.ground_truth(&id, resolution)?;
        gt.review_state = ReviewState::ExpertApproved;
        root.save_labels(&gt)?;
    }
    eprintln!("wrote {images} synthetic scenes at {resolution}px to {}", root.path().display());
    Ok(())
}

// ---------------------------------------------------------------- ingest

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "tif", "tiff", "bmp"];

/// Capture time from a file name: the last run of digits is read as Unix
/// seconds when it has at least 9 digits, else as a frame index spaced
/// `interval` seconds apart. `None` when the name has no digits.
pub fn timestamp_from_name(stem: &str, interval: u32) -> Option<i64> {
    let digits: String = stem
        .rsplit(|c: char| !c.is_ascii_digit())
        .find(|s| !s.is_empty())?
        .to_string();
    let n: i64 = digits.parse().ok()?;
    Some(if digits.len() >= 9 { n } else { n * interval as i64 })
}

pub fn ingest(root: &DataRoot, input: &Path, run_id: &str, interval: u32, config: &PreprocessConfig) -> Result<()> {
    config.validate()?;
    if interval == 0 {
        bail!("capture interval must be positive");
    }
    let mut frames = Vec::new();
    for entry in std::fs::read_dir(input).with_context(|| format!("listing {}", input.display()))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).context("non-utf8 file name")?.to_string();
        let captured_at = match timestamp_from_name(&stem, interval) {
            Some(t) => t,
            None => std::fs::metadata(&path)?
                .modified()?
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs() as i64)
                .unwrap_or(0),
        };
        let (width, height) = image::image_dimensions(&path).with_context(|| format!("reading {}", path.display()))?;
        frames.push(ImageRecord {
            image_id: format!("{run_id}-{stem}"),
            growth_run_id: run_id.to_string(),
            captured_at,
            width,
            height,
            storage_path: path.display().to_string(),
            status: ImageStatus::Raw,
            reject_reason: None,
        });
    }
    if frames.is_empty() {
        bail!("no images found in {}", input.display());
    }
    let manifest = GrowthRunManifest::new(run_id, interval, frames);
    let total = manifest.frames.len();
    let windowed = resample_sequence(&manifest.frames, config.window_seconds)?;
    let outcome = filter_frames(&windowed, config, |r| load_gray8(Path::new(&r.storage_path)).map_err(|e| e.to_string()))?;
    let mut kept = outcome.kept;
    kept.extend(outcome.rejected.iter().cloned());
    let out = GrowthRunManifest { frames: kept, ..manifest };
    write_json_atomic(&root.run_path(run_id), &out)?;
    eprintln!(
        "{run_id}: {total} frames, {} after windowing, {} rejected",
        windowed.len(),
        outcome.rejected.len()
    );
    Ok(())
}

// ---------------------------------------------------------------- preprocess

/// Largest centered square.
fn center_square(w: u32, h: u32) -> Rect {
    let s = w.min(h);
    Rect::new((w - s) / 2, (h - s) / 2, s, s)
}

pub fn preprocess(root: &DataRoot, run_id: &str, resolution: u32, crop: Option<Rect>, denoise: bool) -> Result<()> {
    let path = root.run_path(run_id);
    let mut manifest: GrowthRunManifest = read_json(&path).with_context(|| format!("run {run_id}; ingest it first"))?;
    let mut written = 0;
    for frame in manifest.frames.iter_mut().filter(|f| f.status == ImageStatus::Filtered) {
        let raw = load_gray8(Path::new(&frame.storage_path))?;
        let region = crop.unwrap_or_else(|| center_square(raw.width(), raw.height()));
        let plane = preprocess_image(&raw, region, resolution, denoise)?;
        root.save_image(&frame.image_id, &plane)?;
        frame.status = ImageStatus::Preprocessed;
        written += 1;
    }
    write_json_atomic(&path, &manifest)?;
    eprintln!("{run_id}: wrote {written} images at {resolution}px");
    Ok(())
}

// ---------------------------------------------------------------- models

fn labeled_data(root: &DataRoot, dataset_id: &str, ids: &[String]) -> Result<InMemoryData> {
    let samples = ids.iter().map(|id| root.load_labeled(id)).collect::<Result<Vec<_>>>()?;
    let res = samples.first().map(|(p, _)| p.width()).context("no labeled images")?;
    if let Some((p, l)) = samples.iter().find(|(p, _)| p.width() != res || p.height() != res) {
        bail!("{} is {}x{}; all images must be {res}x{res}", l.image_id, p.width(), p.height());
    }
    Ok(InMemoryData::new(dataset_id, res, samples))
}

pub fn train(root: &DataRoot, name: &str, hyperparams: &TrainingHyperparams) -> Result<()> {
    let ids = root.labeled_ids()?;
    let data = labeled_data(root, "labeled", &ids)?;
    let backend = ReferenceClassical::new(name);
    let handle = backend.train(&data, hyperparams)?;
    root.registry()?.save_model(&backend, &handle)?;
    print_json(&handle)
}

fn load_model(root: &DataRoot, model_id: &str) -> Result<(ReferenceClassical, defectloop_core::ModelHandle)> {
    let backend = ReferenceClassical::new("loaded");
    let handle = root.registry()?.load_model(&backend, model_id)?;
    Ok((backend, handle))
}

pub fn evaluate(root: &DataRoot, model_id: &str, eval: &EvalConfig) -> Result<()> {
    let (backend, handle) = load_model(root, model_id)?;
    let ids: Vec<String> = root.labeled_ids()?.into_iter().filter(|id| !is_augmented(id)).collect();
    let data = labeled_data(root, "evaluation", &ids)?;
    let evaluation = backend.evaluate(&handle, &data, eval)?;
    print_json(&evaluation.report)
}

/// Picks the `k` unlabeled images to label next: most uncertain under the
/// model, or the most diverse when no model is given.
pub fn select(root: &DataRoot, model_id: Option<&str>, k: usize) -> Result<()> {
    let labeled: std::collections::BTreeSet<String> = root.labeled_ids()?.into_iter().collect();
    let pool: Vec<String> = list_ids(&root.path().join("images"), "png")?
        .into_iter()
        .filter(|id| !labeled.contains(id))
        .collect();
    let model = model_id.map(|m| load_model(root, m)).transpose()?;
    let mut scores = BTreeMap::new();
    let mut features = BTreeMap::new();
    for id in &pool {
        let res = model.as_ref().map(|(_, h)| h.resolution);
        let image = root.load_image(id, res)?;
        let score = match &model {
            Some((backend, handle)) => score_uncertainty(&backend.predict(handle, id, &image)?)?.score,
            None => 0.5,
        };
        scores.insert(id.clone(), score);
        features.insert(id.clone(), histogram_features(&image));
    }
    let picked = select_batch(&pool, &scores, Some(&features), k)?;
    print_json(&picked)
}

// ---------------------------------------------------------------- augmentation

pub fn augment(root: &DataRoot, rate: u32, seed: u64) -> Result<()> {
    let originals: Vec<String> = root.labeled_ids()?.into_iter().filter(|id| !is_augmented(id)).collect();
    let mut base = Vec::with_capacity(originals.len());
    for id in &originals {
        let img = root.load_image(id, None)?;
        base.push(ManifestEntry::original(id.clone(), img.width(), Rect::new(0, 0, img.width(), img.height())));
    }
    let expanded = expand_dataset(&base, &AugmentationPlan::new(rate, seed))?;
    let mut written = 0;
    for entry in &expanded {
        if let Lineage::Augmented {
            parent_image_id,
            transform,
        } = &entry.lineage
        {
            let (image, labels) = root.load_labeled(parent_image_id)?;
            let out = apply_transform(&image, &labels, transform)?;
            let mut set = out.labels;
            set.image_id = entry.image_id.clone();
            root.save_image(&entry.image_id, &out.image)?;
            root.save_labels(&set)?;
            written += 1;
        }
    }
    eprintln!("{} originals, {written} augmented copies", originals.len());
    Ok(())
}

// ---------------------------------------------------------------- grid

/// Labeled originals on disk, usable only at their stored resolution.
struct DirectorySamples<'a>(&'a DataRoot);

impl SampleSource for DirectorySamples<'_> {
    fn sample(&self, image_id: &str, resolution: u32) -> Result<(Plane, AnnotationSet), BackendError> {
        let (image, labels) = self.0.load_labeled(image_id).map_err(|e| BackendError::Data(format!("{e:#}")))?;
        if image.width() != resolution || image.height() != resolution {
            return Err(BackendError::Data(format!(
                "{image_id} is stored at {}x{}, grid asked for {resolution}",
                image.width(),
                image.height()
            )));
        }
        Ok((image, labels))
    }
}

pub struct GridArgs {
    pub resolutions: Option<Vec<u32>>,
    pub rates: Vec<u32>,
    pub split_ratio: f64,
    pub split_seed: u64,
    pub augment_seed: u64,
    /// Use a generated corpus of this many scenes instead of the data root.
    pub synthetic: Option<usize>,
}

pub fn grid(root: &DataRoot, args: &GridArgs) -> Result<()> {
    let corpus;
    let dir_source = DirectorySamples(root);
    let (ids, source, stored_res): (Vec<String>, &dyn SampleSource, Option<u32>) = match args.synthetic {
        Some(n) => {
            corpus = SyntheticCorpus::generate(&SyntheticConfig {
                images: n,
                seed: args.split_seed,
                ..SyntheticConfig::default()
            });
            (corpus.ids(), &corpus, None)
        }
        None => {
            let ids: Vec<String> = root.labeled_ids()?.into_iter().filter(|id| !is_augmented(id)).collect();
            let first = ids.first().context("no labeled images; run synth or label some first")?;
            let res = root.load_image(first, None)?.width();
            (ids, &dir_source, Some(res))
        }
    };
    let resolutions = match (&args.resolutions, stored_res) {
        (Some(r), _) => r.clone(),
        (None, Some(r)) => vec![r],
        (None, None) => GridConfig::default().resolutions,
    };
    let (train, test) = split_dataset(&ids, args.split_ratio, args.split_seed)?;
    let mut base = DatasetManifest::new("grid", args.split_seed);
    for &res in &resolutions {
        base.entries
            .extend(ids.iter().map(|id| ManifestEntry::original(id.clone(), res, Rect::new(0, 0, res, res))));
    }
    base.split = train
        .iter()
        .map(|id| (id.clone(), Split::Train))
        .chain(test.iter().map(|id| (id.clone(), Split::Test)))
        .collect();
    let config = GridConfig {
        resolutions,
        rates: args.rates.clone(),
        augment_seed: args.augment_seed,
        ..GridConfig::default()
    };
    let backend_for = |name: &str| -> Box<dyn ModelBackend> { Box::new(ReferenceClassical::new(name)) };
    let grid = run_experiment_grid(&base, source, &backend_for, &config)?;
    let csv = grid.csv();
    root.registry()?.save_grid_csv(&csv)?;
    print!("{csv}");
    Ok(())
}

// ---------------------------------------------------------------- report

pub fn report(root: &DataRoot) -> Result<()> {
    let mut any = false;
    let state = root.path().join(STATE_FILE);
    if state.is_file() {
        println!("# {STATE_FILE}\n{}", std::fs::read_to_string(&state)?.trim_end());
        any = true;
    }
    let queue = root.path().join(RELABEL_QUEUE_FILE);
    if queue.is_file() {
        println!("# {RELABEL_QUEUE_FILE}\n{}", std::fs::read_to_string(&queue)?.trim_end());
        any = true;
    }
    let csv = root.path().join(GRID_REPORT_FILE);
    if csv.is_file() {
        println!("# {GRID_REPORT_FILE}\n{}", std::fs::read_to_string(&csv)?.trim_end());
        any = true;
    }
    let models = root.registry()?.list_models()?;
    if !models.is_empty() {
        println!("# models");
        for m in models {
            println!("{} v{} {}px ({})", m.model_id, m.version, m.resolution, m.training_manifest_id);
        }
        any = true;
    }
    if !any {
        bail!("nothing to report under {}", root.path().display());
    }
    Ok(())
}
