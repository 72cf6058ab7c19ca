//! Interchangeable segmentation backends that turn an [`RgbPatch`] into a
//! per-pixel malignancy probability map.
//!
//! ONNX models must take a single `1x3x256x256` float input and return a
//! single `1x1x256x256` logit map; the sigmoid is applied here.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tract_onnx::prelude::*;

use crate::grid::Grid2;
use crate::preprocess::RgbPatch;

pub const MODEL_INPUT_SHAPE: [usize; 4] = [1, 3, 256, 256];
pub const MODEL_OUTPUT_SHAPE: [usize; 4] = [1, 1, 256, 256];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("invalid backend spec: {0}")]
    InvalidSpec(String),
    #[error("failed to load model: {0}")]
    ModelLoadFailure(String),
    #[error("model shape mismatch: {0}")]
    ModelShapeMismatch(String),
    #[error("oracle backend needs the patch's ground-truth malignant mask")]
    MissingMaskForOracle,
    #[error("inference failed: {0}")]
    Inference(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    R,
    G,
    B,
}

impl Channel {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    /// Probability 1 exactly on ground-truth malignant pixels.
    OracleGroundtruth,
    Constant { value: f64 },
    /// Fusion channel value where it exceeds `threshold`, else 0.
    IntensityHeuristic { channel: Channel, threshold: f64 },
    Onnx { model_path: PathBuf },
}

fn default_pixel_threshold() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    #[serde(flatten)]
    pub kind: BackendKind,
    /// Probability at or above which a pixel counts as predicted malignant.
    #[serde(default = "default_pixel_threshold")]
    pub pixel_threshold: f64,
}

impl BackendSpec {
    pub fn new(kind: BackendKind) -> Self {
        Self {
            kind,
            pixel_threshold: default_pixel_threshold(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.pixel_threshold > 0.0 && self.pixel_threshold < 1.0) {
            return Err(BackendError::InvalidSpec(format!(
                "pixel threshold {} outside (0, 1)",
                self.pixel_threshold
            )));
        }
        match self.kind {
            BackendKind::Constant { value } if !(0.0..=1.0).contains(&value) => Err(
                BackendError::InvalidSpec(format!("constant {value} outside [0, 1]")),
            ),
            BackendKind::IntensityHeuristic { threshold, .. } if !(0.0..=1.0).contains(&threshold) => {
                Err(BackendError::InvalidSpec(format!(
                    "heuristic threshold {threshold} outside [0, 1]"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Parses the compact CLI form: `oracle`, `constant:<v>`,
/// `heuristic:<r|g|b>:<threshold>`, or `onnx:<path>`.
impl std::str::FromStr for BackendSpec {
    type Err = BackendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BackendError::InvalidSpec(format!("cannot parse backend {s:?}"));
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad());
        let kind = match s.split(':').collect::<Vec<_>>().as_slice() {
            ["oracle"] | ["oracle_groundtruth"] => BackendKind::OracleGroundtruth,
            ["constant", v] => BackendKind::Constant { value: num(v)? },
            ["heuristic", c, t] | ["intensity_heuristic", c, t] => BackendKind::IntensityHeuristic {
                channel: match *c {
                    "r" => Channel::R,
                    "g" => Channel::G,
                    "b" => Channel::B,
                    _ => return Err(bad()),
                },
                threshold: num(t)?,
            },
            _ => match s.strip_prefix("onnx:") {
                Some(path) if !path.is_empty() => BackendKind::Onnx {
                    model_path: PathBuf::from(path),
                },
                _ => return Err(bad()),
            },
        };
        let spec = BackendSpec::new(kind);
        spec.validate()?;
        Ok(spec)
    }
}

type Plan = TypedSimplePlan<TypedModel>;

/// A loaded ONNX graph validated against the model I/O contract.
#[derive(Clone)]
pub struct OnnxModel {
    plan: Arc<Plan>,
    input_dims: [usize; 4],
    sha256: String,
}

impl fmt::Debug for OnnxModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OnnxModel")
            .field("input_dims", &self.input_dims)
            .field("sha256", &self.sha256)
            .finish()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl OnnxModel {
    pub fn input_dims(&self) -> [usize; 4] {
        self.input_dims
    }

    pub fn sha256(&self) -> &str {
        &self.sha256
    }

    /// Runs the graph on a planar `3x256x256` image, returning raw logits.
    pub fn logits(&self, planar: &[f32]) -> Result<Vec<f32>, BackendError> {
        let err = |e: TractError| BackendError::Inference(e.to_string());
        let input = Tensor::from_shape(&MODEL_INPUT_SHAPE, planar).map_err(err)?;
        let out = self.plan.run(tvec!(input.into())).map_err(err)?;
        let view = out[0].to_array_view::<f32>().map_err(err)?;
        if view.shape() != MODEL_OUTPUT_SHAPE {
            return Err(BackendError::ModelShapeMismatch(format!(
                "output shape {:?}",
                view.shape()
            )));
        }
        Ok(view.iter().copied().collect())
    }
}

/// Loads and validates an ONNX segmentation model.
pub fn load_onnx(path: &Path) -> Result<OnnxModel, BackendError> {
    let load = |e: TractError| BackendError::ModelLoadFailure(format!("{}: {e}", path.display()));
    let shape = |msg: String| BackendError::ModelShapeMismatch(msg);

    let bytes = std::fs::read(path)
        .map_err(|e| BackendError::ModelLoadFailure(format!("{}: {e}", path.display())))?;
    let model = tract_onnx::onnx()
        .model_for_read(&mut bytes.as_slice())
        .map_err(load)?;
    let inputs = model.input_outlets().map_err(load)?.len();
    let outputs = model.output_outlets().map_err(load)?.len();
    if inputs != 1 || outputs != 1 {
        return Err(shape(format!(
            "expected 1 input and 1 output, found {inputs} and {outputs}"
        )));
    }
    let declared = model.input_fact(0).map_err(load)?.shape.as_concrete_finite().map_err(load)?;
    if let Some(d) = declared {
        if d.as_slice() != MODEL_INPUT_SHAPE {
            return Err(shape(format!("input shape {d:?}, expected {MODEL_INPUT_SHAPE:?}")));
        }
    }
    let typed = model
        .with_input_fact(0, f32::fact(MODEL_INPUT_SHAPE).into())
        .and_then(|m| m.into_optimized())
        .map_err(|e| shape(e.to_string()))?;
    let out_fact = typed.output_fact(0).map_err(load)?;
    match out_fact.shape.as_concrete() {
        Some(s) if s == MODEL_OUTPUT_SHAPE => {}
        other => {
            return Err(shape(format!(
                "output shape {other:?}, expected {MODEL_OUTPUT_SHAPE:?}"
            )))
        }
    }
    let plan = typed.into_runnable().map_err(load)?;
    Ok(OnnxModel {
        plan: Arc::new(plan),
        input_dims: MODEL_INPUT_SHAPE,
        sha256: hex(&Sha256::digest(&bytes)),
    })
}

/// Per-pixel probabilities and the thresholded binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probability: Grid2<f32>,
    pub mask: Grid2<u8>,
}

/// A ready-to-use backend. Immutable after construction and shareable
/// across threads.
#[derive(Debug, Clone)]
pub struct Backend {
    spec: BackendSpec,
    model: Option<OnnxModel>,
    fingerprint: String,
}

impl Backend {
    pub fn load(spec: BackendSpec) -> Result<Self, BackendError> {
        spec.validate()?;
        let model = match &spec.kind {
            BackendKind::Onnx { model_path } => Some(load_onnx(model_path)?),
            _ => None,
        };
        let mut h = Sha256::new();
        let mut identity = spec.clone();
        if let BackendKind::Onnx { model_path } = &mut identity.kind {
            // identify the model by content, not location
            *model_path = PathBuf::new();
        }
        h.update(serde_json::to_vec(&identity).expect("spec serializes"));
        if let Some(m) = &model {
            h.update(m.sha256.as_bytes());
        }
        Ok(Self {
            spec,
            model,
            fingerprint: hex(&h.finalize()[..16]),
        })
    }

    pub fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    /// Stable identity of the spec and, for ONNX, the model contents.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn predict(&self, patch: &RgbPatch) -> Result<Prediction, BackendError> {
        let (h, w) = patch.image.shape();
        let probability: Vec<f32> = match &self.spec.kind {
            BackendKind::OracleGroundtruth => {
                let m = patch
                    .malignant
                    .as_ref()
                    .ok_or(BackendError::MissingMaskForOracle)?;
                m.data().iter().map(|&v| if v != 0 { 1.0 } else { 0.0 }).collect()
            }
            BackendKind::Constant { value } => vec![*value as f32; h * w],
            BackendKind::IntensityHeuristic { channel, threshold } => {
                let t = *threshold as f32;
                patch
                    .image
                    .channel(channel.index())
                    .iter()
                    .map(|&v| if v > t { v } else { 0.0 })
                    .collect()
            }
            BackendKind::Onnx { .. } => {
                let model = self.model.as_ref().expect("onnx backend holds a model");
                if [1, 3, h, w] != model.input_dims {
                    return Err(BackendError::ModelShapeMismatch(format!(
                        "patch is {h}x{w}, model expects {:?}",
                        model.input_dims
                    )));
                }
                model
                    .logits(patch.image.planar())?
                    .into_iter()
                    .map(|x| 1.0 / (1.0 + (-x).exp()))
                    .collect()
            }
        };
        let t = self.spec.pixel_threshold as f32;
        let mask = probability.iter().map(|&p| u8::from(p >= t)).collect();
        Ok(Prediction {
            probability: Grid2::new(h, w, probability),
            mask: Grid2::new(h, w, mask),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_cli_forms() {
        assert_eq!(
            "constant:0.25".parse::<BackendSpec>().unwrap().kind,
            BackendKind::Constant { value: 0.25 }
        );
        assert_eq!(
            "heuristic:g:0.6".parse::<BackendSpec>().unwrap().kind,
            BackendKind::IntensityHeuristic {
                channel: Channel::G,
                threshold: 0.6
            }
        );
        assert!("constant:2".parse::<BackendSpec>().is_err());
        assert!("nope".parse::<BackendSpec>().is_err());
        assert!(matches!(
            "onnx:/tmp/x.onnx".parse::<BackendSpec>().unwrap().kind,
            BackendKind::Onnx { .. }
        ));
    }

    #[test]
    fn spec_json_shape() {
        let spec: BackendSpec = serde_json::from_str(r#"{"kind":"constant","value":0.3}"#).unwrap();
        assert_eq!(spec.pixel_threshold, 0.5);
        let bad = BackendSpec {
            kind: BackendKind::OracleGroundtruth,
            pixel_threshold: 1.0,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn missing_model_file() {
        let err = load_onnx(Path::new("/nonexistent/model.onnx")).unwrap_err();
        assert!(matches!(err, BackendError::ModelLoadFailure(_)));
    }
}
