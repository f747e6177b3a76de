//! Client for out-of-process trainers speaking the JSON-over-HTTP protocol.

use std::collections::BTreeMap;
use std::time::Duration;

use base64::Engine;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{
    check_resolution, BackendError, BackendKind, LabeledData, ModelBackend, ModelHandle, Prediction, ProbabilityMap,
    TrainingHyperparams,
};
use crate::annotation::{BoxAnnotation, DefectClass};
use crate::raster::Plane;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalConfig {
    pub endpoint: String,
    pub timeout_ms: u64,
    pub retries: u32,
    pub classes: Vec<DefectClass>,
}

impl ExternalConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        ExternalConfig {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            timeout_ms: 30_000,
            retries: 3,
            classes: DefectClass::ALL.to_vec(),
        }
    }
}

#[derive(Serialize)]
struct TrainRequest<'a> {
    dataset_uri: &'a str,
    classes: &'a [DefectClass],
    hyperparams: &'a TrainingHyperparams,
}

#[derive(Deserialize)]
struct TrainResponse {
    model_id: String,
}

#[derive(Serialize)]
struct PredictRequest<'a> {
    model_id: &'a str,
    image: String,
}

#[derive(Deserialize)]
struct PredictResponse {
    #[serde(default)]
    probability_maps: BTreeMap<DefectClass, ProbabilityMap>,
    #[serde(default)]
    boxes: Vec<BoxAnnotation>,
}

#[derive(Deserialize)]
struct ErrorBody {
    #[serde(alias = "message")]
    error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
}

pub struct ExternalBackend {
    config: ExternalConfig,
    agent: ureq::Agent,
    version: Mutex<u64>,
    train_lock: Mutex<()>,
}

impl ExternalBackend {
    pub fn new(config: ExternalConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        ExternalBackend {
            config,
            agent,
            version: Mutex::new(0),
            train_lock: Mutex::new(()),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.endpoint, path)
    }

    /// Issues a request, retrying transport failures, and decodes a 2xx JSON body.
    fn call<T: serde::de::DeserializeOwned>(
        &self,
        send: impl Fn() -> Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<T, BackendError> {
        let mut attempt = 0;
        let mut response = loop {
            match send() {
                Ok(r) => break r,
                Err(e) if attempt < self.config.retries => {
                    log::debug!("external backend attempt {attempt} failed: {e}");
                    attempt += 1;
                }
                Err(ureq::Error::Timeout(_)) => return Err(BackendError::Timeout),
                Err(e) => return Err(BackendError::BackendUnavailable(e.to_string())),
            }
        };
        let status = response.status();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => BackendError::Timeout,
                other => BackendError::MalformedResponse(other.to_string()),
            })?;
        if !status.is_success() {
            let msg = serde_json::from_str::<ErrorBody>(&text)
                .map(|b| b.error)
                .unwrap_or_else(|_| format!("HTTP {status}: {text}"));
            return Err(BackendError::RemoteError(msg));
        }
        serde_json::from_str(&text).map_err(|e| BackendError::MalformedResponse(e.to_string()))
    }

    pub fn health(&self) -> Result<Health, BackendError> {
        self.call(|| self.agent.get(&self.url("/health")).call())
    }
}

impl ModelBackend for ExternalBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::External {
            endpoint: self.config.endpoint.clone(),
        }
    }

    fn train(&self, data: &dyn LabeledData, hp: &TrainingHyperparams) -> Result<ModelHandle, BackendError> {
        hp.validate()?;
        if data.is_empty() {
            return Err(BackendError::EmptyTrainingSet);
        }
        let uri = data
            .dataset_uri()
            .ok_or_else(|| BackendError::Data(format!("dataset {} has no uri for a remote trainer", data.dataset_id())))?;
        let _exclusive = self.train_lock.lock();
        let body = TrainRequest {
            dataset_uri: &uri,
            classes: &self.config.classes,
            hyperparams: hp,
        };
        let resp: TrainResponse = self.call(|| self.agent.post(&self.url("/train")).send_json(&body))?;
        if resp.model_id.is_empty() {
            return Err(BackendError::MalformedResponse("empty model_id".into()));
        }
        let mut version = self.version.lock();
        *version += 1;
        Ok(ModelHandle {
            model_id: resp.model_id,
            backend_kind: self.kind(),
            version: *version,
            training_manifest_id: data.dataset_id().to_string(),
            resolution: data.resolution(),
        })
    }

    fn predict(&self, model: &ModelHandle, image_id: &str, image: &Plane) -> Result<Prediction, BackendError> {
        check_resolution(model, image)?;
        let png = image.encode_png().map_err(|e| BackendError::Data(e.to_string()))?;
        let body = PredictRequest {
            model_id: &model.model_id,
            image: base64::engine::general_purpose::STANDARD.encode(png),
        };
        let resp: PredictResponse = self.call(|| self.agent.post(&self.url("/predict")).send_json(&body))?;
        let pred = Prediction {
            image_id: image_id.to_string(),
            probability_maps: resp.probability_maps,
            boxes: resp.boxes,
        };
        pred.validate(image.width(), image.height()).map_err(BackendError::MalformedResponse)?;
        Ok(pred)
    }

    fn export_params(&self, model: &ModelHandle) -> Result<Vec<u8>, BackendError> {
        // weights stay with the remote service; the handle is the reference
        serde_json::to_vec_pretty(model).map_err(|e| BackendError::BadParams(e.to_string()))
    }

    fn import_params(&self, model: &ModelHandle, params: &[u8]) -> Result<(), BackendError> {
        let stored: ModelHandle = serde_json::from_slice(params).map_err(|e| BackendError::BadParams(e.to_string()))?;
        if stored.model_id != model.model_id {
            return Err(BackendError::BadParams(format!("parameters name model {}", stored.model_id)));
        }
        let mut version = self.version.lock();
        *version = (*version).max(model.version);
        Ok(())
    }
}
