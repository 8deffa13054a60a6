use caidd_core::autograd::Graph;
use caidd_core::experts::{ExpertConfig, Experts};
use caidd_core::losses::*;
use caidd_core::rng::Rng;
use caidd_core::synthfaces::make_dataset;
use caidd_core::{Error, Tensor};
use std::f64::consts::PI;

fn batch(seed: u64, n: usize) -> Tensor {
    Tensor::stack_batch(&make_dataset(n, n, seed, 16).unwrap().images()).unwrap()
}

#[test]
fn identity_loss_endpoints() {
    let v = [0.3, -1.2, 0.5];
    assert!(identity_loss(&v, &v).unwrap().abs() < 1e-12);
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    assert!((identity_loss(&v, &neg).unwrap() - 2.0).abs() < 1e-12);
    assert!((identity_loss(&[1.0, 0.0], &[0.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!(matches!(identity_loss(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Degenerate(_))));
}

#[test]
fn gaze_loss_angles() {
    let x = [1.0, 0.0, 0.0];
    let y = [0.0, 1.0, 0.0];
    assert!(gaze_loss(&x, &x, GazeMode::Angular).unwrap().abs() < 1e-12);
    assert!((gaze_loss(&x, &y, GazeMode::Angular).unwrap() - PI / 2.0).abs() < 1e-12);
    assert!((gaze_loss(&x, &[-1.0, 0.0, 0.0], GazeMode::Angular).unwrap() - PI).abs() < 1e-12);
    assert!((gaze_loss(&x, &y, GazeMode::L2).unwrap() - 2f64.sqrt()).abs() < 1e-12);
    assert!(matches!(gaze_loss(&[2.0, 0.0, 0.0], &x, GazeMode::Angular), Err(Error::Contract(_))));
}

#[test]
fn tape_gaze_angle_agrees_with_arccos_form() {
    let mut rng = Rng::seed_from(4);
    let unit = |rng: &mut Rng| {
        let v: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.into_iter().map(|a| a / n).collect::<Vec<_>>()
    };
    for _ in 0..50 {
        let (a, b) = (unit(&mut rng), unit(&mut rng));
        let mut g = Graph::new();
        let va = g.constant(Tensor::new(&[1, 3], a.clone()).unwrap());
        let vb = g.constant(Tensor::new(&[1, 3], b.clone()).unwrap());
        let l = gaze_loss_on(&mut g, va, vb, GazeMode::Angular).unwrap();
        let want = gaze_loss(&a, &b, GazeMode::Angular).unwrap();
        assert!((g.value(l).item() - want).abs() < 1e-9);
    }
}

#[test]
fn tape_gaze_gradient_is_finite_at_zero_angle() {
    let mut g = Graph::new();
    let a = g.param(Tensor::new(&[1, 3], vec![0.0, 0.0, 1.0]).unwrap());
    let b = g.constant(Tensor::new(&[1, 3], vec![0.0, 0.0, 1.0]).unwrap());
    let l = gaze_loss_on(&mut g, a, b, GazeMode::Angular).unwrap();
    assert!(g.backward(l).get(a).unwrap().is_finite());
}

#[test]
fn dice_of_identical_hard_masks_is_near_zero() {
    let m = Tensor::from_fn(&[2, 4, 4], |i| if (i / 4) % 2 == 0 { 1.0 } else { 0.0 });
    assert!(parse_loss(&m, &m, ParseMode::Dice).unwrap() < 1e-6);
    assert_eq!(parse_loss(&m, &m, ParseMode::L1).unwrap(), 0.0);
    let other = m.map(|v| 1.0 - v);
    assert!((parse_loss(&m, &other, ParseMode::Dice).unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn weights_reject_negative_values() {
    let w = LossWeights {
        lambda_id: -1.0,
        ..LossWeights::default()
    };
    assert!(matches!(w.validate(), Err(Error::Config { .. })));
}

#[test]
fn total_recomposes_from_terms_on_random_batches() {
    let experts = Experts::new(ExpertConfig::default(), 16).unwrap();
    let w = LossWeights::default();
    let mut rng = Rng::seed_from(31);
    for seed in 0..5 {
        let x0 = batch(100 + seed, 3);
        let reference = experts.build_condition(&batch(200 + seed, 3)).unwrap();
        let eps_true = rng.normal_tensor(x0.shape());
        let eps_pred = rng.normal_tensor(x0.shape());
        let l = total_loss(&eps_true, &eps_pred, &x0, &reference, &w, &experts, LossModes::default()).unwrap();
        let want = l.l_diff + 1.0 * l.l_id + 0.5 * l.l_parse + 0.1 * l.l_gaze;
        assert!((l.l_total - want).abs() < 1e-9, "{} vs {}", l.l_total, want);
        for (_, v) in l.terms() {
            assert!(v.is_finite());
        }
    }
}

#[test]
fn tape_terms_match_per_item_scalar_helpers() {
    let experts = Experts::new(ExpertConfig::default(), 16).unwrap();
    let w = LossWeights::default();
    let x0 = batch(7, 4);
    let reference = experts.build_condition(&batch(8, 4)).unwrap();
    let mut rng = Rng::seed_from(3);
    let eps_true = rng.normal_tensor(x0.shape());
    let eps_pred = rng.normal_tensor(x0.shape());
    for modes in [
        LossModes::default(),
        LossModes {
            parse: ParseMode::L1,
            gaze: GazeMode::L2,
        },
    ] {
        let a = total_loss(&eps_true, &eps_pred, &x0, &reference, &w, &experts, modes).unwrap();
        let b = breakdown_by_terms(&eps_true, &eps_pred, &x0, &reference, &w, &experts, modes).unwrap();
        for ((name, x), (_, y)) in a.terms().iter().zip(b.terms()) {
            assert!((x - y).abs() < 1e-9, "{}: {} vs {}", name, x, y);
        }
    }
}

#[test]
fn zero_weights_leave_only_the_diffusion_term() {
    let experts = Experts::new(ExpertConfig::default(), 16).unwrap();
    let x0 = batch(9, 2);
    let reference = experts.build_condition(&x0).unwrap();
    let mut rng = Rng::seed_from(6);
    let e1 = rng.normal_tensor(x0.shape());
    let e2 = rng.normal_tensor(x0.shape());
    let l = total_loss(&e1, &e2, &x0, &reference, &LossWeights::ZERO, &experts, LossModes::default()).unwrap();
    assert_eq!(l.l_total, l.l_diff);
    assert!((l.l_diff - diffusion_loss(&e1, &e2).unwrap()).abs() < 1e-12);
}

#[test]
fn identical_image_gives_zero_identity_and_gaze_terms() {
    let experts = Experts::new(ExpertConfig::default(), 16).unwrap();
    let x0 = batch(10, 2);
    let reference = experts.build_condition(&x0).unwrap();
    let e = Tensor::zeros(x0.shape());
    let l = total_loss(&e, &e, &x0, &reference, &LossWeights::default(), &experts, LossModes::default()).unwrap();
    assert!(l.l_id.abs() < 1e-9);
    assert!(l.l_gaze.abs() < 1e-6);
    assert_eq!(l.l_diff, 0.0);
}

#[test]
fn clean_estimate_inverts_forward_diffusion() {
    let sched = caidd_core::schedule::ScheduleConfig::default().build().unwrap();
    let x0 = batch(11, 2);
    let mut rng = Rng::seed_from(2);
    let eps = rng.normal_tensor(x0.shape());
    let ts = [10, 300];
    let x_t = caidd_core::schedule::forward_diffuse_batch(&x0, &ts, &eps, &sched).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x_t);
    let ev = g.constant(eps);
    let est = x0_estimate_on(&mut g, xv, ev, &ts, &sched).unwrap();
    assert!(g.value(est).max_abs_diff(&x0) < 1e-9);
}

#[test]
fn diffusion_loss_matches_elementwise_summation() {
    let mut rng = Rng::seed_from(40);
    let a = rng.normal_tensor(&[2, 3, 5, 5]);
    let b = rng.normal_tensor(&[2, 3, 5, 5]);
    let mut sum = 0.0;
    for i in 0..a.len() {
        let d = a.data()[i] - b.data()[i];
        sum += d * d;
    }
    assert!((diffusion_loss(&a, &b).unwrap() - sum / a.len() as f64).abs() < 1e-9);
}

#[test]
fn half_overlapping_masks_give_dice_one_half() {
    // one region, 8 pixels on each side, 4 shared
    let a = Tensor::from_fn(&[1, 4, 4], |i| (i < 8) as u8 as f64);
    let b = Tensor::from_fn(&[1, 4, 4], |i| (4..12).contains(&i) as u8 as f64);
    assert!((parse_loss(&a, &b, ParseMode::Dice).unwrap() - 0.5).abs() < 1e-6);
    let c = Tensor::from_fn(&[1, 4, 4], |i| (i >= 8) as u8 as f64);
    assert!((parse_loss(&a, &c, ParseMode::Dice).unwrap() - 1.0).abs() < 1e-6);
}
