//! Model checkpoints as safetensors files and pretrained backbone import.
//!
//! A checkpoint stores every parameter and buffer as an F64 tensor under its
//! module path (`plin.*`, `cdn.*`) and the canonical pipeline config in the
//! header metadata, so a model can be rebuilt from the file alone.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{ArrayD, Axis, IxDyn};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::config::{BackboneConfig, PipelineConfig};
use crate::error::{Error, Result};
use crate::model::PatchClassifier;
use crate::nn::Module;

pub const FORMAT_VERSION: &str = "1";

fn ckpt_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {e}", path.display()))
}

/// Every parameter of `module` as little-endian F64 bytes.
fn state_bytes<M: Module + ?Sized>(module: &M) -> Vec<(String, Vec<usize>, Vec<u8>)> {
    let mut out = Vec::new();
    module.visit_params(&mut |p| {
        let bytes = p.value.iter().flat_map(|v| v.to_le_bytes()).collect();
        out.push((p.name.clone(), p.value.shape().to_vec(), bytes));
    });
    out
}

fn to_f64(view: &TensorView<'_>) -> Result<ArrayD<f64>> {
    let data = view.data();
    let values: Vec<f64> = match view.dtype() {
        Dtype::F64 => data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        other => return Err(Error::Checkpoint(format!("unsupported tensor dtype {other:?}"))),
    };
    ArrayD::from_shape_vec(IxDyn(view.shape()), values).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Serializes `model` with its config in the header metadata.
pub fn to_bytes(model: &PatchClassifier) -> Result<Vec<u8>> {
    let state = state_bytes(model);
    let views = state
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F64, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let metadata = HashMap::from([
        ("format_version".to_string(), FORMAT_VERSION.to_string()),
        ("config".to_string(), model.config.to_canonical_json()),
    ]);
    safetensors::serialize(views, &Some(metadata)).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save(model: &PatchClassifier, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let bytes = to_bytes(model)?;
    // Write then rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("safetensors.tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| ckpt_err(path, e))
}

fn config_from(bytes: &[u8]) -> Result<PipelineConfig> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta = meta
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("missing header metadata".into()))?;
    match meta.get("format_version").map(String::as_str) {
        Some(FORMAT_VERSION) => {}
        other => return Err(Error::Checkpoint(format!("unsupported format version {other:?}"))),
    }
    let json = meta
        .get("config")
        .ok_or_else(|| Error::Checkpoint("missing config metadata".into()))?;
    serde_json::from_str(json).map_err(|e| Error::Checkpoint(format!("bad config metadata: {e}")))
}

/// The pipeline config stored in a checkpoint.
pub fn read_config(path: &Path) -> Result<PipelineConfig> {
    config_from(&read(path)?).map_err(|e| ckpt_err(path, e))
}

/// Copies every tensor of `tensors` into the parameter of the same name.
/// Every parameter must be present with a matching shape.
fn load_state<M: Module + ?Sized>(module: &mut M, tensors: &SafeTensors<'_>) -> Result<()> {
    let mut failure = None;
    module.visit_params_mut(&mut |p| {
        if failure.is_some() {
            return;
        }
        let loaded = tensors
            .tensor(&p.name)
            .map_err(|_| Error::Checkpoint(format!("missing tensor {}", p.name)))
            .and_then(|v| to_f64(&v));
        match loaded {
            Ok(value) if value.shape() == p.value.shape() => p.value = value,
            Ok(value) => {
                failure = Some(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    value.shape(),
                    p.value.shape()
                )))
            }
            Err(e) => failure = Some(e),
        }
    });
    failure.map_or(Ok(()), Err)
}

pub fn from_bytes(bytes: &[u8]) -> Result<PatchClassifier> {
    let config = config_from(bytes)?;
    let mut model = PatchClassifier::new(config)?;
    let tensors = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    load_state(&mut model, &tensors)?;
    Ok(model)
}

pub fn load(path: &Path) -> Result<PatchClassifier> {
    from_bytes(&read(path)?).map_err(|e| match e {
        Error::Checkpoint(msg) => ckpt_err(path, msg),
        other => other,
    })
}

/// Loads torchvision-named EfficientNet `features.*` weights into the patch
/// backbone. Squeeze-excite 1x1 convolutions become dense weights and a
/// colour stem is summed over its input channels. The classifier stays at its
/// fresh initialization. Returns the number of tensors loaded.
pub fn load_pretrained_backbone(model: &mut PatchClassifier, path: &Path) -> Result<usize> {
    if !matches!(model.config.backbone.config, BackboneConfig::EffnetB3(_)) {
        return Err(Error::Checkpoint("pretrained weights need the effnet-b3 backbone".into()));
    }
    let bytes = read(path)?;
    let tensors = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e))?;
    let mut loaded = 0;
    let mut failure = None;
    model.plin.visit_params_mut(&mut |p| {
        let Some(source) = p.name.strip_prefix("plin.").filter(|n| n.starts_with("features.")) else {
            return;
        };
        if failure.is_some() {
            return;
        }
        let mut value = match tensors.tensor(source).map_err(|e| ckpt_err(path, e)).and_then(|v| to_f64(&v)) {
            Ok(v) => v,
            Err(_) => {
                failure = Some(ckpt_err(path, format!("missing tensor {source}")));
                return;
            }
        };
        let want = p.value.shape().to_vec();
        if value.ndim() == 4 && want.len() == 2 && value.shape()[2..] == [1, 1] {
            value = value
                .into_shape_with_order(IxDyn(&want))
                .unwrap_or_else(|_| ArrayD::zeros(IxDyn(&[0])));
        }
        if value.ndim() == 4 && want.len() == 4 && value.shape()[1] != want[1] && want[1] == 1 {
            value = value.sum_axis(Axis(1)).insert_axis(Axis(1));
        }
        if value.shape() != want.as_slice() {
            failure = Some(ckpt_err(
                path,
                format!("tensor {source} has shape {:?}, expected {want:?}", value.shape()),
            ));
            return;
        }
        p.value = value;
        loaded += 1;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    model.config.backbone.pretrained = true;
    Ok(loaded)
}
