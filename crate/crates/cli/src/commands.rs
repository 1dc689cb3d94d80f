use std::fs;
use std::io::Write;
use std::path::Path;

use log::info;
use promptmt::analysis::{self, Axis};
use promptmt::config::Config;
use promptmt::data::{self, GenSpec, Manifest, Sample};
use promptmt::eval::{evaluate, EvalReport};
use promptmt::model::Model;
use promptmt::par::Parallelism;
use promptmt::task::Task;
use promptmt::training::{self, load_checkpoint};
use promptmt::{Error, Result};
use serde_json::Value;

use crate::{AblateArgs, AnalyzeArgs, ConfigArgs, EvalArgs, GenArgs, Mode, TrainArgs};

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || usage(format!("--size must look like 64x64, got {s:?}"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?))
}

fn mode(sequential: bool) -> Parallelism {
    if sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Rayon
    }
}

pub fn gen(a: GenArgs) -> Result<()> {
    let (height, width) = parse_size(&a.size)?;
    let spec = GenSpec {
        train: a.train,
        val: a.val,
        height,
        width,
        classes: a.classes,
        min_objects: a.min_objects,
        max_objects: a.max_objects,
        seed: a.seed,
    };
    spec.validate()?;
    let m = data::write_dataset(&a.out, &spec, mode(a.sequential))?;
    info!(
        "wrote {} train and {} val samples to {}",
        m.split("train")?.count,
        m.split("val")?.count,
        a.out.display()
    );
    Ok(())
}

/// Set `path` (dot-separated) inside a JSON object, creating objects on the way.
fn set_key(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| usage(format!("--set {path}: {p:?} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(usage("--set needs a key"))
}

fn build_config(a: &ConfigArgs) -> Result<Config> {
    let mut value = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            serde_json::from_str::<Value>(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        set_key(&mut value, k, v)?;
    }
    let mut cfg: Config = serde_json::from_value(value).map_err(|e| usage(e.to_string()))?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if a.sequential {
        cfg.train.parallelism = Parallelism::Sequential;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Take class count and image size from the dataset manifest.
fn align_with_data(cfg: &mut Config, m: &Manifest) -> Result<()> {
    let enc = &mut cfg.encoder;
    if (enc.image_h, enc.image_w) != (m.height, m.width) {
        info!("image size {}x{} taken from the dataset", m.height, m.width);
        enc.image_h = m.height;
        enc.image_w = m.width;
    }
    if cfg.decoder.num_classes != m.classes {
        info!("{} classes taken from the dataset", m.classes);
        cfg.decoder.num_classes = m.classes;
    }
    cfg.validate()
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = build_config(&a.cfg)?;
    let manifest = Manifest::load(&a.data)?;
    align_with_data(&mut cfg, &manifest)?;
    let train_set = data::load_dataset(&a.data, "train")?;
    let val = if manifest.split("val").map_or(0, |s| s.count) > 0 {
        Some(data::load_dataset(&a.data, "val")?)
    } else {
        None
    };
    let mut model = Model::<f32>::new(&cfg, cfg.train.seed)?;
    info!(
        "training {} parameters for {} iterations on {} samples",
        model.num_parameters(),
        cfg.train.iterations,
        train_set.len()
    );
    let every = a.log_every;
    let run = training::train_with(&mut model, &train_set, val.as_deref(), Some(&a.out), |row| {
        if every > 0 && (row.iteration + 1) % every == 0 {
            info!("iter {:>6}  lr {:.3e}  loss {:.4}", row.iteration + 1, row.lr, row.total_loss);
        }
    })?;
    if let Some(rep) = run.final_eval() {
        for (t, v) in &rep.metrics {
            info!("val {t} {} = {v:.4}", t.metric_name());
        }
        info!("val total loss = {:.4}", rep.total_loss);
    }
    info!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn metric_header(tasks: &[Task]) -> Vec<String> {
    let mut h = vec!["total_loss".to_string()];
    h.extend(tasks.iter().map(|t| format!("{t}_loss")));
    h.extend(tasks.iter().map(|t| format!("{t}_{}", t.metric_name())));
    h
}

fn metric_fields(rep: &EvalReport) -> Vec<String> {
    let mut r = vec![rep.total_loss.to_string()];
    r.extend(rep.task_losses.iter().map(|(_, v)| v.to_string()));
    r.extend(rep.metrics.iter().map(|(_, v)| v.to_string()));
    r
}

fn csv_writer(out: Option<&Path>) -> Result<csv::Writer<Box<dyn Write>>> {
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(fs::File::create(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?),
        None => Box::new(std::io::stdout()),
    };
    Ok(csv::Writer::from_writer(sink))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("writing csv: {e}"))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let manifest = Manifest::load(&a.data)?;
    let model = match (&a.model, &a.config) {
        (Some(p), _) => load_checkpoint(p)?.0,
        (None, cfg_path) => {
            let mut cfg = build_config(&ConfigArgs {
                config: cfg_path.clone(),
                set: Vec::new(),
                seed: a.seed,
                iterations: None,
                batch_size: None,
                lr: None,
                sequential: false,
            })?;
            align_with_data(&mut cfg, &manifest)?;
            Model::new(&cfg, cfg.train.seed)?
        }
    };
    let samples = data::load_dataset(&a.data, &a.split)?;
    let rep = evaluate(&model, &samples, &model.own_prompts(), model.cfg.train.parallelism)?;
    let mut w = csv_writer(a.out.as_deref())?;
    w.write_record(["task", "metric", "value"]).map_err(csv_err)?;
    w.write_record(["all", "total_loss", &rep.total_loss.to_string()]).map_err(csv_err)?;
    for (&(task, loss), &(_, metric)) in rep.task_losses.iter().zip(&rep.metrics) {
        w.write_record([task.name(), "loss", &loss.to_string()]).map_err(csv_err)?;
        w.write_record([task.name(), task.metric_name(), &metric.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let axis: Axis = a.axis.parse()?;
    let mut cfg = build_config(&a.cfg)?;
    let manifest = Manifest::load(&a.data)?;
    align_with_data(&mut cfg, &manifest)?;
    // reject bad values before loading data or training anything
    analysis::parse_axis_values(&cfg, axis, &a.values)?;
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let first = a.cfg.seed.unwrap_or(0);
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|i| first + i).collect();
    let train_set = data::load_dataset(&a.data, "train")?;
    let val = data::load_dataset(&a.data, "val")?;
    let rows = analysis::run_ablation_grid(&cfg, axis, &a.values, &seeds, &train_set, &val, |r| {
        info!("{axis}={} seed {:?}: total loss {:.4}", r.setting, r.seed, r.total_loss);
    })?;
    analysis::write_grid_csv(&a.out, axis, &cfg, &rows)?;
    info!("{} rows written to {}", rows.len(), a.out.display());
    Ok(())
}

fn task_index(model: &Model<f32>, name: &str) -> Result<usize> {
    let t = Task::from_name(name).ok_or_else(|| usage(format!("unknown task {name:?}")))?;
    model
        .tasks()
        .iter()
        .position(|&x| x == t)
        .ok_or_else(|| usage(format!("the model has no {t} task")))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

pub fn analyze(a: AnalyzeArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&a.model)?;
    let samples: Vec<Sample> = data::load_dataset(&a.data, &a.split)?;
    create_dir(&a.out)?;
    let par = model.cfg.train.parallelism;
    let tasks: Vec<usize> = match &a.task {
        Some(name) => vec![task_index(&model, name)?],
        None => (0..model.tasks().len()).collect(),
    };
    match a.mode {
        Mode::Attn => {
            let enc = &model.cfg.encoder;
            let layers: Vec<usize> = match a.layer {
                Some(l) => vec![l],
                None => (enc.prompt_start..=enc.prompt_end).collect(),
            };
            let sample = samples
                .get(a.sample)
                .ok_or_else(|| usage(format!("--sample {} but the split has {}", a.sample, samples.len())))?;
            let image = model.image_tensor(sample);
            for &t in &tasks {
                for &l in &layers {
                    let map = analysis::prompt_attention_map(&model, &image, t, l)?;
                    let stem = format!("attn_{}_layer{l}", model.tasks()[t]);
                    let (h, w) = map.grid;
                    let n = map.mean.shape()[0];
                    let mut named = vec![promptmt::data::mtt::NamedTensor::from_tensor("mean", &map.mean)];
                    for q in 0..n {
                        let plane = &map.mean.data()[q * h * w..(q + 1) * h * w];
                        analysis::write_pgm(&a.out.join(format!("{stem}_prompt{q}.pgm")), h, w, plane)?;
                        for (hd, head) in map.per_head.iter().enumerate() {
                            let plane = &head.data()[q * h * w..(q + 1) * h * w];
                            analysis::write_pgm(&a.out.join(format!("{stem}_prompt{q}_head{hd}.pgm")), h, w, plane)?;
                        }
                    }
                    for (hd, head) in map.per_head.iter().enumerate() {
                        named.push(promptmt::data::mtt::NamedTensor::from_tensor(&format!("head{hd}"), head));
                    }
                    promptmt::data::mtt::write_mtt(&a.out.join(format!("{stem}.mtt")), &named)?;
                }
            }
            info!("attention maps written to {}", a.out.display());
        }
        Mode::Corr => {
            let layers: Vec<usize> = (1..=model.cfg.encoder.layers).collect();
            let table = analysis::task_feature_correlation(&model, &samples, &layers, par)?;
            let path = a.out.join("correlation.csv");
            let mut w = csv_writer(Some(&path))?;
            let names = model.tasks();
            let mut header = vec!["layer".to_string()];
            header.extend(table.pairs.iter().map(|&(x, y)| format!("{}~{}", names[x], names[y])));
            header.push("mean".into());
            w.write_record(&header).map_err(csv_err)?;
            for (i, &l) in table.layers.iter().enumerate() {
                let mut row = vec![l.to_string()];
                row.extend(table.values[i].iter().map(|v| v.to_string()));
                row.push(table.layer_mean(l).map_or_else(String::new, |v| v.to_string()));
                w.write_record(&row).map_err(csv_err)?;
            }
            w.flush().map_err(|e| Error::Data(e.to_string()))?;
            info!("correlation table written to {}", path.display());
        }
        Mode::Swap => {
            let path = a.out.join("swap.csv");
            let mut w = csv_writer(Some(&path))?;
            let mut header = vec!["prompts".to_string()];
            header.extend(metric_header(model.tasks()));
            w.write_record(&header).map_err(csv_err)?;
            let mut wrote_baseline = false;
            for &src in &tasks {
                let table = analysis::prompt_swap_eval(&model, &samples, src, par)?;
                if !wrote_baseline {
                    let mut row = vec!["own".to_string()];
                    row.extend(metric_fields(&table.baseline));
                    w.write_record(&row).map_err(csv_err)?;
                    wrote_baseline = true;
                }
                let mut row = vec![model.tasks()[src].to_string()];
                row.extend(metric_fields(&table.swapped));
                w.write_record(&row).map_err(csv_err)?;
            }
            w.flush().map_err(|e| Error::Data(e.to_string()))?;
            info!("prompt swap table written to {}", path.display());
        }
    }
    Ok(())
}

pub fn params(a: ConfigArgs) -> Result<()> {
    let cfg = build_config(&a)?;
    let model = Model::<f32>::new(&cfg, cfg.train.seed)?;
    for (group, n) in analysis::parameter_counts(&model) {
        println!("{group}\t{n}");
    }
    Ok(())
}
