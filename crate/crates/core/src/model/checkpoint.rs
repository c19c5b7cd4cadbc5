use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Precision, Scalar, Tensor};

use super::{count_complexity, param_specs, ModelConfig, ParamSpec, SsTransformer};

/// Where a set of weights came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: String,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub precision: Precision,
}

impl CheckpointMeta {
    pub fn untrained(precision: Precision) -> Self {
        Self { phase: "init".into(), epochs: 0, final_loss: None, precision }
    }
}

/// Serialized model: configuration plus every named tensor as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    config: ModelConfig,
    params: Vec<ParamSpec>,
    total_params: u64,
    training: CheckpointMeta,
}

const META: &str = "meta.json";
const WEIGHTS: &str = "weights.bin";

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl Checkpoint {
    pub fn from_model<S: Scalar>(model: &SsTransformer<S>, meta: CheckpointMeta) -> Self {
        let tensors = model
            .names()
            .iter()
            .cloned()
            .zip(model.params().iter().map(Tensor::cast::<f32>))
            .collect();
        Self { config: model.config().clone(), tensors, meta }
    }

    pub fn to_model<S: Scalar>(&self) -> Result<SsTransformer<S>> {
        SsTransformer::from_params(
            self.config.clone(),
            self.tensors.iter().map(|(n, t)| (n.clone(), t.cast::<S>())).collect(),
        )
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Concatenated little-endian `f32` values in layout order.
    pub fn weight_bytes(&self) -> Vec<u8> {
        let total: usize = self.tensors.iter().map(|(_, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(total * 4);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Writes `meta.json` and `weights.bin` into `dir`, each via write-then-rename.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let file = CheckpointFile {
            config: self.config.clone(),
            params: self
                .tensors
                .iter()
                .map(|(name, t)| ParamSpec { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
            total_params: count_complexity(&self.config).total_params(),
            training: self.meta.clone(),
        };
        write_atomic(&dir.join(WEIGHTS), &self.weight_bytes())?;
        write_atomic(&dir.join(META), &serde_json::to_vec_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(META);
        let weights_path = dir.join(WEIGHTS);
        for p in [&meta_path, &weights_path] {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.clone()));
            }
        }
        let corrupt = |message: String| Error::Corrupt { path: dir.to_path_buf(), message };
        let file: CheckpointFile =
            serde_json::from_slice(&fs::read(&meta_path)?).map_err(|e| corrupt(format!("meta.json: {e}")))?;
        file.config.validate()?;
        let expected = param_specs(&file.config);
        if expected != file.params {
            return Err(corrupt("parameter names or shapes differ from the configured layout".into()));
        }
        let declared = count_complexity(&file.config).total_params();
        if declared != file.total_params {
            return Err(corrupt(format!("declares {} parameters, layout has {declared}", file.total_params)));
        }
        let bytes = fs::read(&weights_path)?;
        let needed = declared as usize * 4;
        if bytes.len() != needed {
            return Err(corrupt(format!("weights.bin holds {} bytes, expected {needed}", bytes.len())));
        }
        let mut values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut tensors = Vec::with_capacity(expected.len());
        for spec in expected {
            let n: usize = spec.shape.iter().product();
            let data: Vec<f32> = values.by_ref().take(n).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(corrupt(format!("{} contains non-finite values", spec.name)));
            }
            tensors.push((spec.name, Tensor::new(&spec.shape, data)?));
        }
        Ok(Self { config: file.config, tensors, meta: file.training })
    }
}
