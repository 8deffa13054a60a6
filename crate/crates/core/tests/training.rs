use caidd_core::denoiser::DenoiserConfig;
use caidd_core::sampler::{blank_target, AblationOverrides, SampleRequest, Sampler};
use caidd_core::synthfaces::make_dataset;
use caidd_core::rng::Rng;
use caidd_core::trainer::{fit, sample_timesteps, LossLog, TrainConfig, Trainer};
use caidd_core::{Error, Tensor};

fn tiny(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        learning_rate: 1e-3,
        warmup_steps: Some(2),
        seed: 5,
        target_dropout: 0.5,
        denoiser: DenoiserConfig {
            image_size: 16,
            base_channels: 8,
            time_embed_dim: 16,
            n_heads: 2,
            d_head: 4,
            res_blocks: 1,
            norm_groups: 4,
            ..DenoiserConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn data() -> Vec<Tensor> {
    make_dataset(3, 2, 11, 16).unwrap().images()
}

#[test]
fn same_seed_gives_identical_losses_and_parameters() {
    let (mut a, mut b) = (LossLog::default(), LossLog::default());
    let ca = fit(&data(), &tiny(6), &mut a).unwrap();
    let cb = fit(&data(), &tiny(6), &mut b).unwrap();
    assert_eq!(a.steps, b.steps);
    assert_eq!(ca.params, cb.params);
    assert_eq!(a.steps.len(), 6);
    let mut other = tiny(6);
    other.seed = 6;
    let mut c = LossLog::default();
    fit(&data(), &other, &mut c).unwrap();
    assert_ne!(a.steps, c.steps);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let mut full = LossLog::default();
    let end = fit(&data(), &tiny(6), &mut full).unwrap();
    let mut first = Trainer::new(tiny(6), &data()).unwrap();
    for _ in 0..3 {
        first.step().unwrap();
    }
    let ckpt = first.checkpoint();
    let mut resumed = Trainer::resume(&ckpt, &data()).unwrap();
    let mut tail = LossLog::default();
    let last = resumed.fit(&mut tail).unwrap();
    assert_eq!(tail.steps.len(), 3);
    for (x, y) in full.steps[3..].iter().zip(&tail.steps) {
        assert_eq!(x.step, y.step);
        for ((_, p), (_, q)) in x.losses.terms().iter().zip(y.losses.terms()) {
            assert!((p - q).abs() <= 1e-6);
        }
    }
    assert_eq!(end.params, last.params);
}

#[test]
fn warmup_ramps_the_learning_rate() {
    let mut log = LossLog::default();
    fit(&data(), &tiny(4), &mut log).unwrap();
    let lrs: Vec<f64> = log.steps.iter().map(|s| s.lr).collect();
    assert_eq!(lrs, vec![5e-4, 1e-3, 1e-3, 1e-3]);
}

#[test]
fn losses_recompose_every_step() {
    let mut log = LossLog::default();
    fit(&data(), &tiny(4), &mut log).unwrap();
    for s in &log.steps {
        let l = s.losses;
        assert!((l.l_total - (l.l_diff + l.l_id + 0.5 * l.l_parse + 0.1 * l.l_gaze)).abs() < 1e-9);
    }
}

#[test]
fn warmup_longer_than_the_run_is_rejected() {
    let mut cfg = tiny(4);
    cfg.warmup_steps = Some(4);
    assert!(matches!(Trainer::new(cfg, &data()), Err(Error::Config { field, .. }) if field == "warmup_steps"));
}

#[test]
fn wrong_image_size_is_rejected() {
    let wrong = make_dataset(2, 1, 1, 32).unwrap().images();
    assert!(matches!(Trainer::new(tiny(3), &wrong), Err(Error::Config { field, .. }) if field == "image_size"));
}

#[test]
fn sampling_is_deterministic_and_bounded() {
    let ckpt = fit(&data(), &tiny(3), &mut LossLog::default()).unwrap();
    let imgs = data();
    let req = SampleRequest {
        source: imgs[0].clone(),
        target: imgs[1].clone(),
        seed: 3,
        steps: 10,
        overrides: AblationOverrides::default(),
    };
    let s = Sampler::new(&ckpt).unwrap();
    let a = s.sample(&req).unwrap();
    let b = s.sample(&req).unwrap();
    assert_eq!(a, b);
    assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let c = s.sample(&SampleRequest { seed: 4, ..req.clone() }).unwrap();
    assert_ne!(a, c);
    let bad = SampleRequest {
        target: blank_target(32),
        ..req.clone()
    };
    assert!(matches!(s.sample(&bad), Err(Error::Config { .. })));
    assert!(s.sample(&SampleRequest { steps: 0, ..req }).is_err());
}

#[test]
fn disabling_cross_attention_at_sampling_ignores_the_source() {
    let ckpt = fit(&data(), &tiny(3), &mut LossLog::default()).unwrap();
    let imgs = data();
    let s = Sampler::new(&ckpt).unwrap();
    let overrides = AblationOverrides {
        disable_cross_attention: Some(true),
        ..AblationOverrides::default()
    };
    let mk = |src: &Tensor| SampleRequest {
        source: src.clone(),
        target: imgs[2].clone(),
        seed: 1,
        steps: 5,
        overrides,
    };
    assert_eq!(s.sample(&mk(&imgs[0])).unwrap(), s.sample(&mk(&imgs[1])).unwrap());
}

#[test]
fn training_timesteps_are_uniform_over_deciles() {
    let mut rng = Rng::seed_from(17);
    let n = 100_000;
    let mut bins = [0usize; 10];
    for t in sample_timesteps(&mut rng, n, 1000) {
        assert!((1..=1000).contains(&t));
        bins[(t - 1) / 100] += 1;
    }
    for (i, &c) in bins.iter().enumerate() {
        let frac = c as f64 / n as f64;
        assert!((frac - 0.1).abs() / 0.1 < 0.02, "decile {} holds {}", i, frac);
    }
}

#[test]
fn expert_encoders_stay_frozen_through_a_step() {
    let ds = data();
    let mut tr = Trainer::new(tiny(3), &ds).unwrap();
    let probe = &ds[1];
    let before = (
        tr.experts().encode_identity(probe).unwrap(),
        tr.experts().encode_parsing(probe).unwrap(),
        tr.experts().encode_gaze(probe).unwrap(),
    );
    let params_before = tr.params().clone();
    tr.step().unwrap();
    assert_ne!(&params_before, tr.params());
    let after = (
        tr.experts().encode_identity(probe).unwrap(),
        tr.experts().encode_parsing(probe).unwrap(),
        tr.experts().encode_gaze(probe).unwrap(),
    );
    assert_eq!(before, after);
}

#[test]
fn zero_steps_returns_the_initial_state() {
    let ds = data();
    let init = Trainer::new(tiny(0), &ds).unwrap().checkpoint();
    let mut log = LossLog::default();
    let ckpt = fit(&ds, &tiny(0), &mut log).unwrap();
    assert!(log.steps.is_empty());
    assert_eq!(ckpt.step, 0);
    assert_eq!(ckpt.params, init.params);
}

fn requests(imgs: &[Tensor]) -> Vec<SampleRequest> {
    (0..4)
        .map(|i| SampleRequest {
            source: imgs[i % 3].clone(),
            target: imgs[(i + 1) % 3].clone(),
            seed: 10 + i as u64,
            steps: 6,
            overrides: AblationOverrides::default(),
        })
        .collect()
}

#[test]
fn batched_sampling_equals_single_calls_in_order() {
    let ckpt = fit(&data(), &tiny(3), &mut LossLog::default()).unwrap();
    let reqs = requests(&data());
    let batch = caidd_core::sampler::sample_batch(&reqs, &ckpt).unwrap();
    for (r, out) in reqs.iter().zip(&batch) {
        assert_eq!(&caidd_core::sampler::sample(r, &ckpt).unwrap(), out);
    }
    assert_eq!(caidd_core::sampler::sample_batch(&reqs[..1], &ckpt).unwrap()[0], batch[0]);
    let reversed: Vec<SampleRequest> = reqs.iter().rev().cloned().collect();
    let back = caidd_core::sampler::sample_batch(&reversed, &ckpt).unwrap();
    assert!(back.iter().rev().eq(batch.iter()));
    let mut bad = reqs.clone();
    bad[2].steps = 5000;
    let err = caidd_core::sampler::sample_batch(&bad, &ckpt).unwrap_err().to_string();
    assert!(err.contains("request 2"), "{}", err);
}

#[test]
fn distinct_seeds_give_distinct_samples() {
    let ckpt = fit(&data(), &tiny(3), &mut LossLog::default()).unwrap();
    let imgs = data();
    let s = Sampler::new(&ckpt).unwrap();
    let outs: Vec<Tensor> = (0..8)
        .map(|seed| {
            s.sample(&SampleRequest {
                source: imgs[0].clone(),
                target: imgs[1].clone(),
                seed,
                steps: 4,
                overrides: AblationOverrides::default(),
            })
            .unwrap()
        })
        .collect();
    for i in 0..8 {
        for j in i + 1..8 {
            assert_ne!(outs[i], outs[j], "seeds {} and {}", i, j);
        }
    }
}
