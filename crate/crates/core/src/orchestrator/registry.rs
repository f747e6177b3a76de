//! On-disk run directory: model registry, pipeline state and reports.

use std::path::{Path, PathBuf};

use super::{BatchLog, OrchestratorError, PipelineState, RelabelReport};
use crate::backend::{ModelBackend, ModelHandle};
use crate::store::{read_json, write_atomic, write_json_atomic, StoreError};

pub const STATE_FILE: &str = "pipeline_state.json";
pub const GRID_REPORT_FILE: &str = "grid_report.csv";
pub const RELABEL_QUEUE_FILE: &str = "relabel_queue.txt";

#[derive(Debug, Clone)]
pub struct Registry {
    root: PathBuf,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl Registry {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, OrchestratorError> {
        let root = root.into();
        std::fs::create_dir_all(root.join("models")).map_err(io(&root))?;
        Ok(Registry { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn model_dir(&self, model_id: &str) -> PathBuf {
        self.root.join("models").join(model_id)
    }

    pub fn save_model(&self, backend: &dyn ModelBackend, handle: &ModelHandle) -> Result<(), OrchestratorError> {
        let dir = self.model_dir(&handle.model_id);
        let params = backend.export_params(handle)?;
        write_atomic(&dir.join("params"), &params)?;
        write_json_atomic(&dir.join("meta.json"), handle)?;
        Ok(())
    }

    /// Reads a stored model and installs its parameters into `backend`.
    pub fn load_model(&self, backend: &dyn ModelBackend, model_id: &str) -> Result<ModelHandle, OrchestratorError> {
        let dir = self.model_dir(model_id);
        let handle: ModelHandle = read_json(&dir.join("meta.json"))?;
        let path = dir.join("params");
        let params = std::fs::read(&path).map_err(io(&path))?;
        backend.import_params(&handle, &params)?;
        Ok(handle)
    }

    pub fn list_models(&self) -> Result<Vec<ModelHandle>, OrchestratorError> {
        let dir = self.root.join("models");
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(io(&dir))? {
            let entry = entry.map_err(io(&dir))?;
            let meta = entry.path().join("meta.json");
            if meta.is_file() {
                out.push(read_json::<ModelHandle>(&meta)?);
            }
        }
        out.sort_by(|a, b| a.version.cmp(&b.version).then_with(|| a.model_id.cmp(&b.model_id)));
        Ok(out)
    }

    pub fn save_state(&self, state: &PipelineState) -> Result<(), OrchestratorError> {
        Ok(write_json_atomic(&self.root.join(STATE_FILE), state)?)
    }

    pub fn load_state(&self) -> Result<PipelineState, OrchestratorError> {
        Ok(read_json(&self.root.join(STATE_FILE))?)
    }

    pub fn save_log(&self, log: &[BatchLog]) -> Result<(), OrchestratorError> {
        Ok(write_json_atomic(&self.root.join("pipeline_log.json"), log)?)
    }

    /// Writes `relabel_<iter>.json` and the newline-delimited relabel queue.
    pub fn save_relabel(&self, report: &RelabelReport) -> Result<(), OrchestratorError> {
        write_json_atomic(&self.root.join(format!("relabel_{}.json", report.iteration)), report)?;
        let mut queue = report.image_ids.join("\n");
        if !queue.is_empty() {
            queue.push('\n');
        }
        write_atomic(&self.root.join(RELABEL_QUEUE_FILE), queue.as_bytes())?;
        Ok(())
    }

    pub fn load_relabel(&self, iteration: u32) -> Result<RelabelReport, OrchestratorError> {
        Ok(read_json(&self.root.join(format!("relabel_{iteration}.json")))?)
    }

    pub fn save_grid_csv(&self, csv: &str) -> Result<(), OrchestratorError> {
        Ok(write_atomic(&self.root.join(GRID_REPORT_FILE), csv.as_bytes())?)
    }
}
