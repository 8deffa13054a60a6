use caidd_core::rng::Rng;
use caidd_core::schedule::{forward_diffuse, x0_estimate_raw, ScheduleConfig};
use caidd_core::Tensor;

#[test]
fn alpha_bar_matches_the_closed_form() {
    let s = ScheduleConfig::default().build().unwrap();
    let f = |t: f64| ((t / 1000.0 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
    for t in [1, 100, 500, 900] {
        assert!((s.alpha_bar(t) - f(t as f64) / f(0.0)).abs() < 1e-9, "t = {}", t);
    }
    assert!((s.alpha_bar(500) - 0.494).abs() < 5e-3);
}

#[test]
fn forward_variance_matches_one_minus_alpha_bar() {
    let s = ScheduleConfig::default().build().unwrap();
    let x0 = Tensor::zeros(&[1, 1, 4, 4]);
    let mut rng = Rng::seed_from(12);
    let n = 10_000;
    let mut sum = [0.0f64; 16];
    let mut sq = [0.0f64; 16];
    for _ in 0..n {
        let eps = rng.normal_tensor(x0.shape());
        let xt = forward_diffuse(&x0, 500, &eps, &s).unwrap();
        for (k, v) in xt.data().iter().enumerate() {
            sum[k] += v;
            sq[k] += v * v;
        }
    }
    let want = 1.0 - s.alpha_bar(500);
    for k in 0..16 {
        let mean = sum[k] / n as f64;
        let var = sq[k] / n as f64 - mean * mean;
        assert!((var - want).abs() / want < 0.05, "pixel {}: {} vs {}", k, var, want);
    }
}

#[test]
fn clean_estimate_inverts_the_forward_process() {
    let s = ScheduleConfig::default().build().unwrap();
    let mut rng = Rng::seed_from(3);
    let x0 = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.uniform_range(-1.0, 1.0));
    for t in [1, 250, 500, 900] {
        let eps = rng.normal_tensor(x0.shape());
        let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
        let back = x0_estimate_raw(&xt, &eps, t, &s).unwrap();
        assert!(back.max_abs_diff(&x0) < 1e-5, "t = {}", t);
    }
}
