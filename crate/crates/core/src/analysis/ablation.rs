use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::config::{Config, FusionMode, PromptInit, UnifiedMode};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::training::train;

/// The configuration dimension an ablation grid varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Positions,
    Counts,
    UnifiedMode,
    Init,
    FusionWeights,
    SharedEncoder,
}

impl Axis {
    pub const ALL: [Axis; 6] = [
        Axis::Positions,
        Axis::Counts,
        Axis::UnifiedMode,
        Axis::Init,
        Axis::FusionWeights,
        Axis::SharedEncoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Positions => "positions",
            Axis::Counts => "counts",
            Axis::UnifiedMode => "unified_mode",
            Axis::Init => "init",
            Axis::FusionWeights => "fusion_weights",
            Axis::SharedEncoder => "shared_encoder",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Axis> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation axis {s:?}")))
    }
}

/// One grid point: its label and the full configuration it trains.
#[derive(Clone, Debug)]
pub struct Setting {
    pub label: String,
    pub config: Config,
}

fn parse_enum<T: serde::de::DeserializeOwned>(axis: Axis, v: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(v.to_string()))
        .map_err(|_| Error::config(format!("invalid {axis} value {v:?}")))
}

fn apply(base: &Config, axis: Axis, value: &str) -> Result<Config> {
    let mut cfg = base.clone();
    let bad = || Error::config(format!("invalid {axis} value {value:?}"));
    match axis {
        Axis::Positions => {
            if value == "none" {
                cfg.encoder.prompts = 0;
            } else {
                let (a, b) = value.split_once('-').ok_or_else(bad)?;
                cfg.encoder.prompt_start = a.trim().parse().map_err(|_| bad())?;
                cfg.encoder.prompt_end = b.trim().parse().map_err(|_| bad())?;
            }
        }
        Axis::Counts => cfg.encoder.prompts = value.parse().map_err(|_| bad())?,
        Axis::UnifiedMode => {
            let mode: UnifiedMode = parse_enum(axis, value)?;
            cfg.encoder.unified_mode = mode;
            if matches!(mode, UnifiedMode::UnifiedOnly | UnifiedMode::Concat | UnifiedMode::Add) {
                cfg.encoder.n_unified = cfg.encoder.prompts;
            }
        }
        Axis::Init => cfg.encoder.prompt_init = parse_enum::<PromptInit>(axis, value)?,
        Axis::FusionWeights => match value {
            "none" | "learnable" | "cross_task_attention" | "fixed" => {
                cfg.fusion.mode = parse_enum::<FusionMode>(axis, value)?;
                cfg.fusion.fixed_weights = None;
            }
            _ => {
                // per-task weights, shared by every scale
                let w = value
                    .split(':')
                    .map(|x| x.trim().parse::<f64>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()?;
                if w.len() != cfg.num_tasks() {
                    return Err(Error::config(format!(
                        "fusion weights {value:?} need one value per task ({})",
                        cfg.num_tasks()
                    )));
                }
                cfg.fusion.mode = FusionMode::Fixed;
                cfg.fusion.fixed_weights = Some(vec![w; cfg.encoder.num_scales()]);
            }
        },
        Axis::SharedEncoder => cfg.encoder.shared_encoder = value.parse().map_err(|_| bad())?,
    }
    cfg.validate()
        .map_err(|e| Error::config(format!("{axis}={value}: {e}")))?;
    Ok(cfg)
}

/// Turn axis values into validated configurations; any invalid value fails
/// before anything trains.
pub fn parse_axis_values(base: &Config, axis: Axis, values: &[String]) -> Result<Vec<Setting>> {
    if values.is_empty() {
        return Err(Error::config("no values given for the ablation axis"));
    }
    values
        .iter()
        .map(|v| {
            Ok(Setting {
                label: v.clone(),
                config: apply(base, axis, v)?,
            })
        })
        .collect()
}

/// One CSV row: a trained (setting, seed) pair, or the per-setting median
/// when `seed` is `None`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridRow {
    pub setting: String,
    pub seed: Option<u64>,
    pub total_loss: f64,
    pub task_losses: Vec<f64>,
    pub metrics: Vec<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn median_row(label: &str, rows: &[GridRow]) -> GridRow {
    let col = |f: &dyn Fn(&GridRow) -> f64| median(&rows.iter().map(f).collect::<Vec<_>>());
    let width = rows[0].metrics.len();
    GridRow {
        setting: label.to_string(),
        seed: None,
        total_loss: col(&|r| r.total_loss),
        task_losses: (0..width).map(|i| col(&|r| r.task_losses[i])).collect(),
        metrics: (0..width).map(|i| col(&|r| r.metrics[i])).collect(),
    }
}

/// Train one model per (setting, seed), evaluate each on `val` and emit the
/// rows of every setting followed by its median row.
pub fn run_ablation_grid(
    base: &Config,
    axis: Axis,
    values: &[String],
    seeds: &[u64],
    train_set: &[Sample],
    val: &[Sample],
    mut progress: impl FnMut(&GridRow),
) -> Result<Vec<GridRow>> {
    let settings = parse_axis_values(base, axis, values)?;
    if seeds.is_empty() {
        return Err(Error::config("at least one seed is required"));
    }
    let mut out = Vec::new();
    for s in &settings {
        let mut rows = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = s.config.clone();
            cfg.train.seed = seed;
            let mut model = Model::<f32>::new(&cfg, seed)?;
            let run = train(&mut model, train_set, Some(val))?;
            let rep = run.final_eval().expect("final evaluation runs when val is given");
            let row = GridRow {
                setting: s.label.clone(),
                seed: Some(seed),
                total_loss: rep.total_loss,
                task_losses: rep.task_losses.iter().map(|&(_, l)| l).collect(),
                metrics: rep.metrics.iter().map(|&(_, m)| m).collect(),
            };
            progress(&row);
            rows.push(row);
        }
        let med = median_row(&s.label, &rows);
        out.extend(rows);
        out.push(med);
    }
    Ok(out)
}

pub fn write_grid_csv(path: &Path, axis: Axis, base: &Config, rows: &[GridRow]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec![axis.name().to_string(), "seed".into(), "total_loss".into()];
    header.extend(base.tasks.iter().map(|t| format!("{t}_loss")));
    header.extend(base.tasks.iter().map(|t| format!("{t}_{}", t.metric_name())));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.setting.clone(),
            r.seed.map_or_else(|| "median".to_string(), |s| s.to_string()),
            r.total_loss.to_string(),
        ];
        rec.extend(r.task_losses.iter().map(|v| v.to_string()));
        rec.extend(r.metrics.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
