//! On-disk dataset: one `.mtt` file per sample plus `manifest.json`.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::mtt;
use crate::data::scene::gen_scene;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::par::{self, Parallelism};
use crate::rng;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

/// What to generate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub train: usize,
    pub val: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            train: 200,
            val: 50,
            height: 64,
            width: 64,
            classes: 5,
            min_objects: 3,
            max_objects: 6,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(format!(
                "--classes must be at least 2 (background plus one object class), got {}",
                self.classes
            )));
        }
        if self.classes > 255 {
            return Err(Error::config(format!("--classes must be at most 255, got {}", self.classes)));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::config(format!("image size {}x{} is too small", self.height, self.width)));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::config("min_objects exceeds max_objects"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub name: String,
    pub count: usize,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub generator: GenSpec,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub splits: Vec<SplitInfo>,
}

impl Manifest {
    pub fn split(&self, name: &str) -> Result<&SplitInfo> {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Data(format!("manifest has no split {name:?}")))
    }

    pub fn load(root: &Path) -> Result<Manifest> {
        let path = root.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "{}: format version {} unsupported (expected {FORMAT_VERSION})",
                path.display(),
                m.format_version
            )));
        }
        for s in &m.splits {
            if s.files.len() != s.count {
                return Err(Error::Data(format!(
                    "split {}: count {} but {} files listed",
                    s.name,
                    s.count,
                    s.files.len()
                )));
            }
        }
        Ok(m)
    }
}

/// Seed of the sample with global index `id` (validation indices follow
/// the training ones).
pub fn sample_seed(seed: u64, id: usize) -> u64 {
    seed ^ id as u64
}

pub fn gen_sample(spec: &GenSpec, id: usize) -> Result<Sample> {
    let seed = sample_seed(spec.seed, id);
    let n = rng::stream(seed, "objects").gen_range(spec.min_objects..=spec.max_objects);
    gen_scene(seed, spec.height, spec.width, spec.classes, n)
        .map_err(|e| Error::Data(format!("sample {id}: {e}")))
}

/// Generate both splits in memory.
pub fn generate(spec: &GenSpec, mode: Parallelism) -> Result<(Vec<Sample>, Vec<Sample>)> {
    spec.validate()?;
    let all = par::map_range(spec.train + spec.val, mode, |id| gen_sample(spec, id))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut train = all;
    let val = train.split_off(spec.train);
    Ok((train, val))
}

fn file_name(i: usize) -> String {
    format!("sample_{i:05}.mtt")
}

/// Generate and write a dataset under `root`.
pub fn write_dataset(root: &Path, spec: &GenSpec, mode: Parallelism) -> Result<Manifest> {
    spec.validate()?;
    let mut splits = Vec::new();
    for (name, count, offset) in [("train", spec.train, 0), ("val", spec.val, spec.train)] {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let files: Vec<String> = (0..count).map(file_name).collect();
        par::map_range(count, mode, |i| -> Result<()> {
            let s = gen_sample(spec, offset + i)?;
            mtt::write_mtt(&dir.join(&files[i]), &s.to_named())
        })
        .into_iter()
        .collect::<Result<()>>()?;
        splits.push(SplitInfo {
            name: name.into(),
            count,
            files,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        generator: spec.clone(),
        classes: spec.classes,
        height: spec.height,
        width: spec.width,
        splits,
    };
    let path = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Load a split in manifest order. Every listed file is checked for
/// existence before any is parsed.
pub fn load_dataset(root: &Path, split: &str) -> Result<Vec<Sample>> {
    let manifest = Manifest::load(root)?;
    let info = manifest.split(split)?;
    let dir = root.join(split);
    let paths: Vec<PathBuf> = info.files.iter().map(|f| dir.join(f)).collect();
    if let Some(missing) = paths.iter().find(|p| !p.is_file()) {
        return Err(Error::Data(format!(
            "manifest lists {} but it is missing on disk",
            missing.display()
        )));
    }
    paths
        .iter()
        .zip(&info.files)
        .map(|(p, name)| {
            let entries = mtt::read_mtt(p).map_err(|e| Error::Data(format!("sample {name}: {e}")))?;
            let s = Sample::from_named(&entries, manifest.height, manifest.width)
                .map_err(|e| Error::Data(format!("sample {name}: {e}")))?;
            if let Some(bad) = s.semseg.iter().find(|&&c| c as usize >= manifest.classes && c != crate::data::IGNORE_LABEL) {
                return Err(Error::Data(format!("sample {name}: label {bad} outside 0..{}", manifest.classes)));
            }
            Ok(s)
        })
        .collect()
}
