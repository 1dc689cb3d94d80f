use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;

pub const MODEL_FILE: &str = "model.mtt";
pub const CHECKPOINT_META: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub iteration: usize,
    /// Hex digest of the configuration the weights were trained with.
    pub config_hash: String,
    pub seed: u64,
    pub config: Config,
}

/// Write `model.mtt` and `checkpoint.json` into `dir`.
pub fn save_checkpoint(dir: &Path, model: &Model<f32>, iteration: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.save(&dir.join(MODEL_FILE))?;
    let meta = CheckpointMeta {
        iteration,
        config_hash: format!("{:016x}", model.cfg.hash()),
        seed: model.seed,
        config: model.cfg.clone(),
    };
    let path = dir.join(CHECKPOINT_META);
    std::fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&path, e))
}

/// Load a checkpoint written by [`save_checkpoint`]. `path` may be the
/// directory or the `model.mtt` inside it.
pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let dir = if path.is_dir() { path } else { path.parent().unwrap_or(Path::new(".")) };
    let meta_path = dir.join(CHECKPOINT_META);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    meta.config.validate()?;
    let expect = format!("{:016x}", meta.config.hash());
    if expect != meta.config_hash {
        return Err(Error::Data(format!(
            "{}: config hash {} does not match stored {}",
            meta_path.display(),
            expect,
            meta.config_hash
        )));
    }
    let weights = if path.is_dir() { dir.join(MODEL_FILE) } else { path.to_path_buf() };
    let model = Model::load(&meta.config, meta.seed, &weights)?;
    Ok((model, meta))
}
