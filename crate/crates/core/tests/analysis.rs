use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use promptmt::analysis::{
    cosine, median, parameter_counts, parse_axis_values, prompt_attention_map, prompt_swap_eval, run_ablation_grid,
    task_feature_correlation, write_grid_csv, write_pgm, Axis,
};
use promptmt::config::{Config, EncoderConfig, FusionMode, HeadInit, PromptInit, UnifiedMode};
use promptmt::data::{generate, GenSpec, Sample};
use promptmt::eval::evaluate;
use promptmt::model::Model;
use promptmt::numerics::Tensor;
use promptmt::par::Parallelism;
use promptmt::task::Task;

fn tiny(prompts: usize) -> Config {
    let mut cfg = Config::default();
    cfg.encoder = EncoderConfig {
        image_h: 16,
        image_w: 16,
        patch_size: 4,
        dim: 16,
        heads: 2,
        layers: 4,
        prompt_start: 3,
        prompt_end: 4,
        prompts,
        tap_layers: vec![1, 2, 3],
        prompt_init: PromptInit::Random,
        ..EncoderConfig::default()
    };
    cfg.decoder.dim = 8;
    cfg.decoder.heads = 2;
    cfg.train.iterations = 3;
    cfg.train.batch_size = 2;
    cfg.train.parallelism = Parallelism::Sequential;
    cfg
}

fn samples(n: usize) -> Vec<Sample> {
    let spec = GenSpec {
        train: n,
        val: 2,
        height: 16,
        width: 16,
        ..GenSpec::default()
    };
    generate(&spec, Parallelism::Sequential).unwrap().0
}

#[test]
fn attention_maps_are_renormalised() {
    let m = Model::<f64>::new(&tiny(3), 1).unwrap();
    let img = m.image_tensor(&samples(1)[0]);
    for layer in [3, 4] {
        let a = prompt_attention_map(&m, &img, 2, layer).unwrap();
        assert_eq!(a.mean.shape(), &[3, 4, 4]);
        assert_eq!(a.per_head.len(), 2);
        for map in std::iter::once(&a.mean).chain(&a.per_head) {
            for row in map.data().chunks(16) {
                assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-6);
            }
        }
    }
    assert!(prompt_attention_map(&m, &img, 0, 2).is_err());
    assert!(prompt_attention_map(&m, &img, 9, 3).is_err());
    let bare = Model::<f64>::new(&tiny(0), 1).unwrap();
    assert!(prompt_attention_map(&bare, &img, 0, 3).is_err());
}

#[test]
fn identical_prompts_give_identical_maps() {
    let mut m = Model::<f64>::new(&tiny(2), 2).unwrap();
    let id = m.encoder.bank.specific[1][0];
    let v = m.store.value_mut(id).data_mut();
    let (first, second) = v.split_at_mut(16);
    second.copy_from_slice(first);
    let img = m.image_tensor(&samples(1)[0]);
    let a = prompt_attention_map(&m, &img, 1, 3).unwrap();
    let rows: Vec<&[f64]> = a.mean.data().chunks(16).collect();
    assert_eq!(rows[0], rows[1]);
}

/// LayerNorm and a row-vector product, evaluated directly from the weights.
fn ln(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * gamma[i] + beta[i])
        .collect()
}

#[test]
fn two_patch_map_matches_hand_softmax() {
    let mut cfg = tiny(1);
    cfg.encoder.image_h = 8;
    cfg.encoder.image_w = 4;
    cfg.encoder.dim = 4;
    cfg.encoder.heads = 1;
    cfg.encoder.prompt_start = 1;
    cfg.encoder.tap_layers = vec![1, 2, 3];
    let m = Model::<f64>::new(&cfg, 3).unwrap();
    let img = Tensor::from_fn(&[8, 4, 3], |i| ((i * 13) % 7) as f64 / 7.0);

    // tokens entering layer 1: cls, two embedded patches, one prompt
    let w = &m.encoder.weights[0];
    let val = |id| m.store.value(id).data().to_vec();
    let (pw, pb, pos, cls) = (val(w.patch.w), val(w.patch.b), val(w.pos), val(w.cls));
    let mut tokens = vec![cls];
    for p in 0..2 {
        let mut pix = Vec::new();
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    pix.push(img.data()[((p * 4 + y) * 4 + x) * 3 + c]);
                }
            }
        }
        tokens.push((0..4).map(|j| pb[j] + pos[p * 4 + j] + (0..48).map(|i| pix[i] * pw[i * 4 + j]).sum::<f64>()).collect());
    }
    tokens.push(val(m.encoder.bank.specific[0][0]));

    let block = &w.layers[0];
    let (qw, qb) = (val(block.qkv.w), val(block.qkv.b));
    let proj = |x: &[f64], off: usize| -> Vec<f64> {
        (0..4).map(|j| qb[off + j] + (0..4).map(|i| x[i] * qw[i * 12 + off + j]).sum::<f64>()).collect()
    };
    let normed: Vec<Vec<f64>> = tokens.iter().map(|t| ln(t, &val(block.ln1.gamma), &val(block.ln1.beta))).collect();
    let q = proj(&normed[3], 0);
    let logits: Vec<f64> = normed
        .iter()
        .map(|t| proj(t, 4).iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / 2.0)
        .collect();
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    let probs: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
    let want = [probs[1] / (probs[1] + probs[2]), probs[2] / (probs[1] + probs[2])];

    let a = prompt_attention_map(&m, &img, 0, 1).unwrap();
    assert_eq!(a.grid, (2, 1));
    for (got, want) in a.mean.data().iter().zip(want) {
        assert_abs_diff_eq!(*got, want, epsilon = 1e-9);
    }
}

#[test]
fn pgm_output() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pgm");
    write_pgm(&path, 2, 2, &[0.0, 0.5, 1.0, 0.25]).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
    assert_eq!(&bytes[bytes.len() - 4..], &[0, 128, 255, 64]);
    assert!(write_pgm(&path, 3, 2, &[0.0; 4]).is_err());
}

#[test]
fn cosine_cases() {
    assert_eq!(cosine(&[1.0, 0.0, 2.0], &[0.0, 5.0, 0.0]), 0.0);
    assert_eq!(cosine(&[0.0; 3], &[1.0, 2.0, 3.0]), 0.0);
    assert_eq!(cosine(&[0.3, -1.7, 2.9], &[0.3, -1.7, 2.9]), 1.0);
    assert_eq!(cosine(&[1.0, 2.0], &[-2.0, -4.0]), -1.0);
}

proptest! {
    #[test]
    fn cosine_matches_brute_force(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..50)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(na > 1e-6 && nb > 1e-6);
        let c = cosine(&a, &b);
        prop_assert!((c - dot / (na * nb)).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert_eq!(c.to_bits(), cosine(&b, &a).to_bits());
    }
}

#[test]
fn promptless_branches_correlate_perfectly() {
    let m = Model::<f32>::new(&tiny(0), 4).unwrap();
    let t = task_feature_correlation(&m, &samples(3), &[1, 2, 3, 4], Parallelism::Sequential).unwrap();
    assert_eq!(t.pairs.len(), 6);
    assert!(t.values.iter().flatten().all(|&v| v == 1.0));
    assert_eq!(t.layer_mean(4), Some(1.0));
}

#[test]
fn correlation_table_is_symmetric_and_bounded() {
    let m = Model::<f32>::new(&tiny(2), 5).unwrap();
    let t = task_feature_correlation(&m, &samples(2), &[2, 4], Parallelism::Sequential).unwrap();
    for &l in &[2, 4] {
        for a in 0..4 {
            for b in 0..4 {
                let v = t.get(l, a, b).unwrap();
                assert!((-1.0..=1.0).contains(&v));
                assert_eq!(v.to_bits(), t.get(l, b, a).unwrap().to_bits());
            }
        }
    }
    // prompts only enter from layer 3, so layer 2 is still task-agnostic
    assert_eq!(t.layer_mean(2), Some(1.0));
    assert!(t.layer_mean(4).unwrap() < 1.0);
    assert!(task_feature_correlation(&m, &samples(1), &[9], Parallelism::Sequential).is_err());
    assert!(task_feature_correlation(&m, &[], &[1], Parallelism::Sequential).is_err());
}

#[test]
fn swapping_in_own_prompts_changes_nothing() {
    let mut cfg = tiny(2);
    cfg.tasks = vec![Task::Depth];
    cfg.fusion.fixed_weights = None;
    let m = Model::<f32>::new(&cfg, 6).unwrap();
    let s = prompt_swap_eval(&m, &samples(2), 0, Parallelism::Sequential).unwrap();
    assert_eq!(s.baseline, s.swapped);
    assert_eq!(s.baseline.total_loss.to_bits(), s.swapped.total_loss.to_bits());
}

#[test]
fn promptless_swaps_are_all_identical() {
    let m = Model::<f32>::new(&tiny(0), 7).unwrap();
    let data = samples(2);
    let base = evaluate(&m, &data, &m.own_prompts(), Parallelism::Sequential).unwrap();
    for src in 0..4 {
        assert_eq!(prompt_swap_eval(&m, &data, src, Parallelism::Sequential).unwrap().swapped, base);
    }
    assert!(prompt_swap_eval(&m, &data, 4, Parallelism::Sequential).is_err());
}

#[test]
fn random_prompts_make_swaps_differ() {
    let mut cfg = tiny(2);
    cfg.decoder.head_init = HeadInit::Random;
    let m = Model::<f32>::new(&cfg, 8).unwrap();
    let s = prompt_swap_eval(&m, &samples(2), 1, Parallelism::Sequential).unwrap();
    assert_ne!(s.baseline.total_loss, s.swapped.total_loss);
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn axis_values_become_configs() {
    let base = Config::default();
    let s = parse_axis_values(&base, Axis::Positions, &strings(&["1-4", "5-8", "1-8", "none"])).unwrap();
    assert_eq!((s[0].config.encoder.prompt_start, s[0].config.encoder.prompt_end), (1, 4));
    assert_eq!(s[3].config.encoder.prompts, 0);

    let s = parse_axis_values(&base, Axis::Counts, &strings(&["0", "1", "2", "5"])).unwrap();
    assert_eq!(s.iter().map(|x| x.config.encoder.prompts).collect::<Vec<_>>(), vec![0, 1, 2, 5]);

    let s = parse_axis_values(&base, Axis::UnifiedMode, &strings(&["concat", "unified_only", "cross_prompt_attention"])).unwrap();
    assert_eq!(s[0].config.encoder.unified_mode, UnifiedMode::Concat);
    assert_eq!(s[0].config.encoder.n_unified, base.encoder.prompts);

    let s = parse_axis_values(&base, Axis::FusionWeights, &strings(&["0.25:0.25:0:0", "none"])).unwrap();
    let w = s[0].config.fusion.weight_matrix(4, 4);
    assert!(w.iter().all(|row| row == &[0.25, 0.25, 0.0, 0.0]));
    assert_eq!(s[1].config.fusion.mode, FusionMode::None);

    let s = parse_axis_values(&base, Axis::SharedEncoder, &strings(&["false"])).unwrap();
    assert!(!s[0].config.encoder.shared_encoder);
    let s = parse_axis_values(&base, Axis::Init, &strings(&["ones", "random"])).unwrap();
    assert_eq!(s[0].config.encoder.prompt_init, PromptInit::Ones);
}

#[test]
fn invalid_axis_values_are_rejected() {
    let base = Config::default();
    for (axis, v) in [
        (Axis::Positions, "5"),
        (Axis::Positions, "6-3"),
        (Axis::Positions, "0-9"),
        (Axis::Counts, "two"),
        (Axis::UnifiedMode, "sideways"),
        (Axis::FusionWeights, "0.5:0.5"),
        (Axis::SharedEncoder, "maybe"),
        (Axis::Init, "gaussian"),
    ] {
        assert!(parse_axis_values(&base, axis, &strings(&[v])).is_err(), "{axis:?} {v}");
    }
    assert!(parse_axis_values(&base, Axis::Counts, &[]).is_err());
    assert!("colour".parse::<Axis>().is_err());
    assert_eq!("fusion_weights".parse::<Axis>().unwrap(), Axis::FusionWeights);
}

#[test]
fn median_cases() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    assert!(median(&[]).is_nan());
}

#[test]
fn parameter_groups_add_up() {
    let m = Model::<f32>::new(&tiny(2), 0).unwrap();
    let counts = parameter_counts(&m);
    let (last, total) = counts.last().unwrap();
    assert_eq!(last, "total");
    assert_eq!(*total, counts[..counts.len() - 1].iter().map(|c| c.1).sum::<usize>());
    assert_eq!(*total, m.num_parameters());
    let prompts = counts.iter().find(|c| c.0 == "prompts").unwrap().1;
    assert_eq!(prompts, 4 * 2 * 2 * 16);
}

#[test]
fn grid_rows_are_reproducible() {
    let data = samples(4);
    let (tr, va) = (&data[..3], &data[3..]);
    let mut seen = 0;
    let rows = run_ablation_grid(&tiny(1), Axis::Counts, &strings(&["1", "1"]), &[0, 1], tr, va, |_| seen += 1).unwrap();
    assert_eq!(seen, 4);
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0], rows[3]);
    assert_eq!(rows[1], rows[4]);
    assert_eq!(rows[2].seed, None);
    assert_eq!(rows[2].total_loss, median(&[rows[0].total_loss, rows[1].total_loss]));
    assert_ne!(rows[0].total_loss, rows[1].total_loss);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.csv");
    write_grid_csv(&path, Axis::Counts, &tiny(1), &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("counts,seed,total_loss,semseg_loss"));
    assert_eq!(text.lines().count(), 7);
    assert!(text.lines().nth(3).unwrap().starts_with("1,median,"));
}

#[test]
fn bad_grid_values_fail_before_training() {
    let data = samples(2);
    let mut trained = 0;
    let r = run_ablation_grid(&tiny(1), Axis::Counts, &strings(&["1", "x"]), &[0], &data, &data, |_| trained += 1);
    assert!(r.is_err());
    assert_eq!(trained, 0);
}

#[test]
fn random_features_are_not_correlated_by_construction() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a: Vec<f64> = (0..4000).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..4000).map(|_| rng.gen_range(-1.0..1.0)).collect();
    assert!(cosine(&a, &b).abs() < 0.1);
}
