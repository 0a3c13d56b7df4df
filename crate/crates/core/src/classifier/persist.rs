//! Versioned JSON model files with a dimension header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ClassifierModel, Hyperparams, Parameters};
use crate::error::{Error, Result};
use crate::graph::NODE_FEATURES;

pub const MODEL_FORMAT: &str = "mmga-classifier";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub node_features: usize,
    pub hidden: usize,
    pub head_layers: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    dims: ModelDims,
    hyper: Hyperparams,
    params: Parameters,
}

pub fn model_to_json(model: &ClassifierModel) -> Result<String> {
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        dims: ModelDims {
            node_features: NODE_FEATURES,
            hidden: model.hyper.hidden_size,
            head_layers: model.params.head_mlp.len(),
        },
        hyper: model.hyper.clone(),
        params: model.params.clone(),
    };
    serde_json::to_string(&file).map_err(|e| Error::ModelLoad(e.to_string()))
}

pub fn model_from_json(text: &str) -> Result<ClassifierModel> {
    let file: ModelFile =
        serde_json::from_str(text).map_err(|e| Error::ModelLoad(format!("malformed model: {e}")))?;
    if file.format != MODEL_FORMAT {
        return Err(Error::ModelLoad(format!("unknown format `{}`", file.format)));
    }
    if file.version != MODEL_VERSION {
        return Err(Error::ModelLoad(format!(
            "unsupported version {} (expected {MODEL_VERSION})",
            file.version
        )));
    }
    if file.dims.node_features != NODE_FEATURES
        || file.dims.hidden != file.hyper.hidden_size
        || file.dims.head_layers != file.params.head_mlp.len()
    {
        return Err(Error::ModelLoad(format!(
            "dimension header {:?} disagrees with the stored model",
            file.dims
        )));
    }
    file.params
        .check_dims(file.dims.hidden)
        .map_err(|e| Error::ModelLoad(e.to_string()))?;
    Ok(ClassifierModel {
        hyper: file.hyper,
        params: file.params,
    })
}

pub fn save_model(path: &Path, model: &ClassifierModel) -> Result<()> {
    fs::write(path, model_to_json(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ClassifierModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text)
}
