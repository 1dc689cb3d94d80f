use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use promptmt::losses::{bce_logits, combine, cross_entropy_map, l1_map, sigmoid};
use promptmt::metrics::{self, f_beta, ThresholdCounts};
use promptmt::numerics::{grad_check, Graph, Tensor};
use promptmt::config::LossWeights;
use promptmt::task::Task;

fn scalar_loss(build: impl FnOnce(&mut Graph<f64>, promptmt::numerics::Var) -> promptmt::numerics::Var, x: Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(x);
    let l = build(&mut g, v);
    g.value(l).item()
}

#[test]
fn cross_entropy_hand_values() {
    // uniform logits over 4 classes give ln 4 per pixel
    let x = Tensor::zeros(&[2, 4]);
    let l = scalar_loss(|g, v| cross_entropy_map(g, v, &[1, 3], 255).unwrap(), x);
    assert_abs_diff_eq!(l, 4f64.ln(), epsilon = 1e-12);

    let x = Tensor::new(&[2, 2], vec![2.0, 0.0, 0.0, 0.0]).unwrap();
    let l = scalar_loss(|g, v| cross_entropy_map(g, v, &[0, 255], 255).unwrap(), x);
    assert_abs_diff_eq!(l, (1.0 + (-2f64).exp()).ln(), epsilon = 1e-12);
}

#[test]
fn cross_entropy_all_ignored_is_an_error() {
    let mut g = Graph::<f64>::new();
    let v = g.constant(Tensor::ones(&[3, 2]));
    assert!(cross_entropy_map(&mut g, v, &[255, 255, 255], 255).is_err());
}

#[test]
fn l1_respects_mask() {
    let x = Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let gt = [0.0f32, 0.0, 0.0, 0.0];
    let l = scalar_loss(|g, v| l1_map(g, v, &gt, Some(&[1, 0, 1, 0])).unwrap(), x.clone());
    assert_abs_diff_eq!(l, 2.0, epsilon = 1e-12);
    let l = scalar_loss(|g, v| l1_map(g, v, &gt, None).unwrap(), x);
    assert_abs_diff_eq!(l, 2.5, epsilon = 1e-12);
}

#[test]
fn l1_per_row_mask_covers_channels() {
    let x = Tensor::new(&[2, 3], vec![1.0, 1.0, 1.0, 5.0, 5.0, 5.0]).unwrap();
    let gt = [0.0f32; 6];
    let l = scalar_loss(|g, v| l1_map(g, v, &gt, Some(&[1, 0])).unwrap(), x);
    assert_abs_diff_eq!(l, 1.0, epsilon = 1e-12);
}

#[test]
fn bce_matches_closed_form() {
    let z = [-3.0, -0.5, 0.0, 0.7, 40.0];
    let y = [0u8, 1, 1, 0, 1];
    let expect: f64 = z
        .iter()
        .zip(&y)
        .map(|(&z, &y)| {
            let p: f64 = sigmoid(z);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / 5.0;
    let l = scalar_loss(|g, v| bce_logits(g, v, &y).unwrap(), Tensor::new(&[5], z.to_vec()).unwrap());
    assert_abs_diff_eq!(l, expect, epsilon = 1e-12);
}

#[test]
fn sigmoid_is_stable_at_extremes() {
    assert_eq!(sigmoid(-1000.0f64), 0.0);
    assert_eq!(sigmoid(1000.0f64), 1.0);
    assert_abs_diff_eq!(sigmoid(0.0f64), 0.5);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let x = Tensor::from_fn(&[3, 4], |i| ((i * 7 % 5) as f64 - 2.0) * 0.3);
    let ce = grad_check(|g, v| cross_entropy_map(g, v, &[0, 255, 2], 255), &x, 1e-6).unwrap();
    assert!(ce.max_rel_error < 1e-6, "{ce:?}");
    let gt: Vec<f32> = (0..12).map(|i| i as f32 * 0.1 + 0.05).collect();
    let l1 = grad_check(|g, v| l1_map(g, v, &gt, None), &x, 1e-6).unwrap();
    assert!(l1.max_rel_error < 1e-6, "{l1:?}");
    let y: Vec<u8> = (0..12).map(|i| (i % 3 == 0) as u8).collect();
    let b = grad_check(|g, v| bce_logits(g, v, &y), &x, 1e-6).unwrap();
    assert!(b.max_rel_error < 1e-6, "{b:?}");
}

#[test]
fn combine_weights_each_task() {
    let w = LossWeights::default();
    let per = [(Task::Semseg, 2.0), (Task::Edge, 0.1)];
    assert_abs_diff_eq!(combine(&per, &w), w.seg * 2.0 + w.edge * 0.1, epsilon = 1e-12);
}

#[test]
fn miou_hand_example() {
    // class 0: inter 1, union 3; class 1: inter 1, union 2; class 2 absent from gt
    let pred = [0, 1, 1, 2];
    let gt = [0, 1, 0, 0];
    let m = metrics::miou(&pred, &gt, 3, 255).unwrap();
    assert_abs_diff_eq!(m, (1.0 / 3.0 + 0.5) / 2.0, epsilon = 1e-12);
}

#[test]
fn miou_ignores_label_and_rejects_out_of_range() {
    assert_eq!(metrics::miou(&[1, 0], &[1, 255], 2, 255).unwrap(), 1.0);
    assert!(metrics::miou(&[5], &[0], 2, 255).is_err());
    assert!(metrics::miou(&[0], &[0, 1], 2, 255).is_err());
}

#[test]
fn rmse_and_angle_hand_values() {
    assert_abs_diff_eq!(metrics::rmse(&[1.0, 3.0], &[0.0, 0.0], None).unwrap(), 5f64.sqrt(), epsilon = 1e-12);
    assert_abs_diff_eq!(
        metrics::rmse(&[1.0, 3.0], &[0.0, 0.0], Some(&[true, false])).unwrap(),
        1.0,
        epsilon = 1e-12
    );
    assert_abs_diff_eq!(metrics::angle_deg([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]), 90.0, epsilon = 1e-9);
    assert_abs_diff_eq!(metrics::angle_deg([0.0, 0.0, 2.0], [0.0, 0.0, 1.0]), 0.0, epsilon = 1e-6);
    assert_abs_diff_eq!(metrics::angle_deg([1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]), 180.0, epsilon = 1e-6);
}

#[test]
fn f_beta_edge_cases() {
    assert_eq!(f_beta(0, 0, 5, 0.3), 0.0);
    assert_eq!(f_beta(0, 0, 0, 1.0), 0.0);
    assert_abs_diff_eq!(f_beta(5, 0, 0, 0.3), 1.0);
    assert_abs_diff_eq!(f_beta(1, 1, 1, 1.0), 0.5);
}

#[test]
fn threshold_is_inclusive() {
    // a score exactly on a threshold counts as positive there
    let mut c = ThresholdCounts::new(3, 4);
    c.add(&[0.5], &[true]).unwrap();
    let conf = c.confusion();
    assert_eq!(conf, vec![(1, 0, 0), (1, 0, 0), (0, 0, 1)]);
}

#[test]
fn max_f_without_positives_is_flagged() {
    let f = metrics::max_f(&[0.9, 0.1], &[false, false]).unwrap();
    assert!(f.undefined);
    assert_eq!(f.value, 0.0);
}

#[test]
fn perfect_edge_map_scores_one() {
    let s = [0.9, 0.1, 0.8];
    let y = [true, false, true];
    assert_abs_diff_eq!(metrics::ods_f(&[(&s, &y)]).unwrap(), 1.0);
}

proptest! {
    #[test]
    fn miou_is_a_fraction(labels in prop::collection::vec((0u32..4, 0u32..4), 1..64)) {
        let (pred, gt): (Vec<u32>, Vec<u32>) = labels.into_iter().unzip();
        let m = metrics::miou(&pred, &gt, 4, 255).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert_eq!(metrics::miou(&gt, &gt, 4, 255).unwrap(), 1.0);
    }

    #[test]
    fn threshold_counts_merge_like_concatenation(
        a in prop::collection::vec((0.0f64..1.0, any::<bool>()), 0..40),
        b in prop::collection::vec((0.0f64..1.0, any::<bool>()), 0..40),
    ) {
        let split = |v: &[(f64, bool)]| -> (Vec<f64>, Vec<bool>) { v.iter().cloned().unzip() };
        let (sa, ga) = split(&a);
        let (sb, gb) = split(&b);
        let mut x = ThresholdCounts::edge();
        x.add(&sa, &ga).unwrap();
        let mut y = ThresholdCounts::edge();
        y.add(&sb, &gb).unwrap();
        x.merge(&y);
        let mut whole = ThresholdCounts::edge();
        whole.add(&[sa, sb].concat(), &[ga, gb].concat()).unwrap();
        prop_assert_eq!(x, whole);
    }

    #[test]
    fn f_scores_are_fractions(v in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..60)) {
        let (s, g): (Vec<f64>, Vec<bool>) = v.into_iter().unzip();
        let f = metrics::max_f(&s, &g).unwrap().value;
        prop_assert!((0.0..=1.0).contains(&f));
        let o = metrics::ods_f(&[(&s, &g)]).unwrap();
        prop_assert!((0.0..=1.0).contains(&o));
    }

    #[test]
    fn cross_entropy_is_nonnegative(logits in prop::collection::vec(-20.0f64..20.0, 6), labels in prop::collection::vec(0u8..3, 2)) {
        let l = scalar_loss(|g, v| cross_entropy_map(g, v, &labels, 255).unwrap(), Tensor::new(&[2, 3], logits).unwrap());
        prop_assert!(l >= 0.0 && l.is_finite());
    }
}

#[test]
fn cross_entropy_two_class_example() {
    let x = Tensor::new(&[1, 2], vec![3f64.ln(), 0.0]).unwrap();
    let l = scalar_loss(|g, v| cross_entropy_map(g, v, &[0], 255).unwrap(), x);
    assert_abs_diff_eq!(l, -(0.75f64).ln(), epsilon = 1e-12);
}

#[test]
fn cross_entropy_vanishes_for_confident_correct_logits() {
    let x = Tensor::new(&[1, 3], vec![25.0, 0.0, 0.0]).unwrap();
    let l = scalar_loss(|g, v| cross_entropy_map(g, v, &[0], 255).unwrap(), x);
    assert!(l < 1e-6);
}

#[test]
fn l1_examples() {
    let l = scalar_loss(|g, v| l1_map(g, v, &[0.0, 1.0], None).unwrap(), Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
    assert_abs_diff_eq!(l, 1.5, epsilon = 1e-12);
    let gt = [0.25f32, -2.0, 7.0];
    let pred = Tensor::from_fn(&[3], |i| gt[i] as f64 + 0.5);
    assert_abs_diff_eq!(scalar_loss(|g, v| l1_map(g, v, &gt, None).unwrap(), pred), 0.5, epsilon = 1e-12);
    let mut g = Graph::<f64>::new();
    let v = g.constant(Tensor::zeros(&[2]));
    assert!(l1_map(&mut g, v, &[0.0, 0.0], Some(&[0, 0])).is_err());
}

#[test]
fn unit_losses_sum_to_nyud_weight_total() {
    let w = LossWeights::default();
    let per: Vec<(Task, f64)> = Task::NYUD.iter().map(|&t| (t, 1.0)).collect();
    assert_abs_diff_eq!(combine(&per, &w), 62.0);
    assert_abs_diff_eq!(combine(&[(Task::Semseg, 0.7)], &w), 0.7);
    assert_eq!(combine(&[], &w), 0.0);
}

#[test]
fn miou_two_by_two_example() {
    let m = metrics::miou(&[0, 1, 1, 1], &[0, 0, 1, 1], 2, 255).unwrap();
    assert_abs_diff_eq!(m, 7.0 / 12.0, epsilon = 1e-12);
    assert_eq!(metrics::miou(&[1, 1], &[0, 0], 2, 255).unwrap(), 0.0);
}

#[test]
fn rmse_examples() {
    assert_abs_diff_eq!(metrics::rmse(&[0.0, 0.0], &[3.0, 4.0], None).unwrap(), 12.5f64.sqrt(), epsilon = 1e-12);
    assert_abs_diff_eq!(metrics::rmse(&[1.5, 2.5], &[1.0, 2.0], None).unwrap(), 0.5, epsilon = 1e-12);
    assert!(metrics::rmse(&[1.0], &[1.0], Some(&[false])).is_err());
}

#[test]
fn f_measure_examples() {
    let gt = [true, false, true, false];
    let exact: Vec<f64> = gt.iter().map(|&b| b as u8 as f64).collect();
    assert_abs_diff_eq!(metrics::max_f(&exact, &gt).unwrap().value, 1.0);
    assert_abs_diff_eq!(metrics::ods_f(&[(&exact, &gt)]).unwrap(), 1.0);
    assert_eq!(metrics::ods_f(&[(&[0.0; 4], &gt)]).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn angular_error_is_bounded(v in prop::collection::vec(-1.0f64..1.0, 6..=6)) {
        let gt = [0.0, 0.0, 1.0, 0.6, 0.8, 0.0];
        let e = metrics::mean_angular_error(&v, &gt, None).unwrap();
        prop_assert!((0.0..=180.0).contains(&e));
    }
}
