//! Self-describing JSON model files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::unet::{TinyNetConfig, TinyUNet};
use super::{IntensityTransform, Trainable};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::pfgm::PfgmConfig;
use crate::scalar::Real;

pub const MODEL_FORMAT: &str = "pocgm-tiny-unet";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub architecture: TinyNetConfig,
    /// Maps intensities into the `[0, 1]` network range.
    pub transform: IntensityTransform,
    pub pfgm: PfgmConfig,
    pub params: Vec<f64>,
}

impl ModelFile {
    pub fn from_model<T: Real>(model: &TinyUNet<T>, transform: IntensityTransform, pfgm: PfgmConfig) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            architecture: *model.config(),
            transform,
            pfgm: PfgmConfig {
                sigma_data: model.sigma_data(),
                ..pfgm
            },
            params: model.params().iter().map(|p| p.as_f64()).collect(),
        }
    }

    pub fn model<T: Real>(&self) -> Result<TinyUNet<T>> {
        TinyUNet::from_params(
            self.architecture,
            self.pfgm.sigma_data,
            self.params.iter().map(|&p| T::lit(p)).collect(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::invalid("model file", format!("{} does not exist", path.display())));
        }
        let file: ModelFile = read_json(path)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::malformed(
                path,
                format!("unsupported model {} v{}", file.format, file.version),
            ));
        }
        Ok(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_is_lossless_for_f32() {
        let cfg = TinyNetConfig {
            base_channels: 4,
            depth: 1,
            patch: 8,
            condition_injection: true,
        };
        let net = TinyUNet::<f32>::new(cfg, 0.5, 11).unwrap();
        let file = ModelFile::from_model(&net, IntensityTransform::from_range(-1.0, 2.0).unwrap(), PfgmConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        file.save(&p).unwrap();
        let back = ModelFile::load(&p).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.model::<f32>().unwrap(), net);
    }

    #[test]
    fn missing_file_names_path() {
        let err = ModelFile::load(Path::new("/nonexistent/model.json")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/model.json"));
    }
}
