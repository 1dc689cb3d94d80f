//! Experiment configuration. Every section deserializes from JSON with
//! defaults for missing keys; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Parallelism;
use crate::task::Task;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptInit {
    Zeros,
    Random,
    Ones,
}

/// How task-unified prompts combine with task-specific ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnifiedMode {
    None,
    UnifiedOnly,
    Concat,
    Add,
    CrossPromptAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Total transformer layers.
    pub layers: usize,
    /// First prompted layer, 1-based inclusive.
    pub prompt_start: usize,
    /// Last prompted layer, 1-based inclusive.
    pub prompt_end: usize,
    /// Task-specific prompts per task per layer.
    pub prompts: usize,
    pub tap_layers: Vec<usize>,
    pub shared_encoder: bool,
    pub prompt_init: PromptInit,
    pub unified_mode: UnifiedMode,
    pub n_unified: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_h: 64,
            image_w: 64,
            in_channels: 3,
            patch_size: 8,
            dim: 64,
            heads: 4,
            mlp_ratio: 4.0,
            layers: 8,
            prompt_start: 5,
            prompt_end: 8,
            prompts: 2,
            tap_layers: vec![2, 4, 6],
            shared_encoder: true,
            prompt_init: PromptInit::Zeros,
            unified_mode: UnifiedMode::None,
            n_unified: 0,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch_size, self.image_w / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Number of prompted layers.
    pub fn prompt_layers(&self) -> usize {
        self.prompt_end + 1 - self.prompt_start
    }

    pub fn is_prompt_layer(&self, layer: usize) -> bool {
        (self.prompt_start..=self.prompt_end).contains(&layer)
    }

    /// Whether the prompts fed to `layer` differ between tasks.
    pub fn task_dependent_layer(&self, layer: usize) -> bool {
        if !self.shared_encoder {
            return true;
        }
        self.is_prompt_layer(layer)
            && self.prompts > 0
            && self.unified_mode != UnifiedMode::UnifiedOnly
    }

    /// Prompt tokens entering a prompted layer.
    pub fn prompt_tokens(&self) -> usize {
        match self.unified_mode {
            UnifiedMode::None | UnifiedMode::CrossPromptAttention => self.prompts,
            UnifiedMode::UnifiedOnly => self.n_unified,
            UnifiedMode::Concat => self.prompts + self.n_unified,
            UnifiedMode::Add => self.prompts,
        }
    }

    /// Number of feature scales handed to fusion (taps plus final output).
    pub fn num_scales(&self) -> usize {
        self.tap_layers.len() + 1
    }

    /// Spatial upsampling factor applied to each scale before fusion: the
    /// earliest tap is upsampled most, the last tap and the final output
    /// stay at the patch grid.
    pub fn scale_factors(&self) -> Vec<usize> {
        let taps = self.tap_layers.len();
        let mut f: Vec<usize> = (0..taps).map(|j| 1 << (taps - 1 - j)).collect();
        f.push(1);
        f
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_h == 0 || self.image_w == 0 {
            return Err(Error::config("image and patch sizes must be positive"));
        }
        if self.image_h % p != 0 || self.image_w % p != 0 {
            return Err(Error::config(format!(
                "image {}x{} is not divisible by patch size {p}",
                self.image_h, self.image_w
            )));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.in_channels == 0 || self.mlp_ratio <= 0.0 || self.layers == 0 {
            return Err(Error::config("in_channels, mlp_ratio and layers must be positive"));
        }
        if self.prompt_start < 1 || self.prompt_start > self.prompt_end || self.prompt_end > self.layers {
            return Err(Error::config(format!(
                "prompt layer range {}..={} must satisfy 1 <= start <= end <= {}",
                self.prompt_start, self.prompt_end, self.layers
            )));
        }
        if self.tap_layers.is_empty() {
            return Err(Error::config("tap_layers must not be empty"));
        }
        if self.tap_layers.windows(2).any(|w| w[0] >= w[1])
            || self.tap_layers.iter().any(|&l| l < 1 || l > self.layers)
        {
            return Err(Error::config(format!(
                "tap_layers {:?} must be strictly increasing within 1..={}",
                self.tap_layers, self.layers
            )));
        }
        match self.unified_mode {
            UnifiedMode::None | UnifiedMode::CrossPromptAttention => {}
            UnifiedMode::UnifiedOnly | UnifiedMode::Concat => {
                if self.n_unified == 0 {
                    return Err(Error::config("unified prompt modes need n_unified > 0"));
                }
            }
            UnifiedMode::Add => {
                if self.n_unified != self.prompts {
                    return Err(Error::config(format!(
                        "add mode needs prompts == n_unified, got {} and {}",
                        self.prompts, self.n_unified
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// No fusion: fused features are zero.
    None,
    Fixed,
    Learnable,
    CrossTaskAttention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// `scales × tasks` weights for fixed mode; `None` means `1/T` everywhere.
    pub fixed_weights: Option<Vec<Vec<f64>>>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mode: FusionMode::Fixed,
            fixed_weights: None,
        }
    }
}

impl FusionConfig {
    /// The fixed weight matrix as `scales × tasks`.
    pub fn weight_matrix(&self, scales: usize, tasks: usize) -> Vec<Vec<f64>> {
        match &self.fixed_weights {
            Some(w) => w.clone(),
            None => vec![vec![1.0 / tasks as f64; tasks]; scales],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    Zeros,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub stages: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Attention across tasks inside each up-sampling stage.
    pub cross_task: bool,
    pub num_classes: usize,
    pub head_init: HeadInit,
    /// Initial bias of the depth head, in meters.
    pub depth_bias_init: f64,
    /// Auxiliary prediction heads on the coarsest fused scale.
    pub aux_heads: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            stages: 2,
            dim: 16,
            heads: 1,
            mlp_ratio: 2.0,
            cross_task: true,
            num_classes: 5,
            head_init: HeadInit::Zeros,
            depth_bias_init: 3.0,
            aux_heads: false,
        }
    }
}

impl DecoderConfig {
    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// Per-task loss weights and the label value excluded from segmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub seg: f64,
    pub depth: f64,
    pub normals: f64,
    pub edge: f64,
    pub partseg: f64,
    pub sal: f64,
    pub ignore_index: u32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            seg: 1.0,
            depth: 1.0,
            normals: 10.0,
            edge: 50.0,
            partseg: 2.0,
            sal: 5.0,
            ignore_index: 255,
        }
    }
}

impl LossWeights {
    pub fn weight(&self, task: Task) -> f64 {
        match task {
            Task::Semseg => self.seg,
            Task::Depth => self.depth,
            Task::Normal => self.normals,
            Task::Edge => self.edge,
            Task::Saliency => self.sal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.seg, self.depth, self.normals, self.edge, self.partseg, self.sal];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Evaluate on the validation split every this many iterations (0: only at the end).
    pub eval_every: usize,
    pub hflip: bool,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 1e-6,
            poly_power: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            eval_every: 0,
            hflip: true,
            parallelism: Parallelism::Rayon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub tasks: Vec<Task>,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            tasks: Task::NYUD.to_vec(),
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            decoder: DecoderConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
        }
    }
}

impl Config {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn from_json(text: &str) -> Result<Config> {
        let cfg: Config = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Stable 64-bit digest of the canonical JSON form.
    pub fn hash(&self) -> u64 {
        crate::rng::fnv1a(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::config("at least one task is required"));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].contains(t) {
                return Err(Error::config(format!("task {t} listed twice")));
            }
        }
        self.encoder.validate()?;
        self.loss.validate()?;

        let scales = self.encoder.num_scales();
        let tasks = self.num_tasks();
        if let Some(w) = &self.fusion.fixed_weights {
            if w.len() != scales || w.iter().any(|r| r.len() != tasks) {
                return Err(Error::config(format!(
                    "fusion.fixed_weights must be {scales}x{tasks}"
                )));
            }
            if w.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::config("fusion.fixed_weights must be finite"));
            }
        }

        let d = &self.decoder;
        if d.stages + 1 != self.encoder.tap_layers.len() {
            return Err(Error::config(format!(
                "decoder.stages ({}) must be one less than the number of tap layers ({})",
                d.stages,
                self.encoder.tap_layers.len()
            )));
        }
        if d.dim == 0 || d.heads == 0 || d.dim % d.heads != 0 || d.mlp_ratio <= 0.0 {
            return Err(Error::config("decoder dim must be a positive multiple of heads"));
        }
        if d.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }

        let t = &self.train;
        if t.iterations == 0 || t.batch_size == 0 {
            return Err(Error::config("iterations and batch_size must be positive"));
        }
        if !(t.lr > 0.0) || t.weight_decay < 0.0 || t.poly_power < 0.0 {
            return Err(Error::config("lr must be positive; weight_decay and poly_power non-negative"));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.adam_eps > 0.0) {
            return Err(Error::config("adam betas must lie in [0, 1) and eps be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
        assert_eq!(Config::default().encoder.scale_factors(), vec![4, 2, 1, 1]);
    }

    #[test]
    fn missing_keys_take_defaults() {
        let cfg = Config::from_json(r#"{"encoder": {"prompts": 5}}"#).unwrap();
        assert_eq!(cfg.encoder.prompts, 5);
        assert_eq!(cfg.encoder.layers, 8);
        assert_eq!(cfg.train.iterations, 2000);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = Config::from_json(r#"{"encoder": {"prompt_count": 5}}"#).unwrap_err();
        assert!(err.is_usage());
        assert!(Config::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn inverted_prompt_range_rejected() {
        let err = Config::from_json(r#"{"encoder": {"prompt_start": 7, "prompt_end": 6}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn add_mode_needs_matching_counts() {
        let json = r#"{"encoder": {"unified_mode": "add", "prompts": 5, "n_unified": 1}}"#;
        assert!(matches!(Config::from_json(json), Err(Error::Config(_))));
        let json = r#"{"encoder": {"unified_mode": "add", "prompts": 2, "n_unified": 2}}"#;
        Config::from_json(json).unwrap();
    }

    #[test]
    fn indivisible_image_rejected() {
        let json = r#"{"encoder": {"image_h": 60}}"#;
        assert!(matches!(Config::from_json(json), Err(Error::Config(_))));
    }

    #[test]
    fn fixed_weight_shape_checked() {
        let json = r#"{"fusion": {"fixed_weights": [[0.25, 0.25, 0.25, 0.25]]}}"#;
        assert!(matches!(Config::from_json(json), Err(Error::Config(_))));
    }

    #[test]
    fn json_round_trip() {
        let cfg = Config::default();
        let back = Config::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }
}
