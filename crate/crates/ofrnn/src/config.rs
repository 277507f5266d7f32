use std::fs;
use std::path::Path;

use ofrnn_core::pipeline::PipelineConfig;

use crate::{Error, Result};

/// JSON configuration; missing fields take their defaults.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let config: PipelineConfig = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })?;
    config.validate()?;
    Ok(config)
}
