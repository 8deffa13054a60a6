use caidd_core::attention::{concat_project, cross_attention, cross_attention_with_weights, AttentionParams, AttentionShape, ConditionTokens, Modality};
use caidd_core::experts::{ExpertConfig, Experts};
use caidd_core::rng::Rng;
use caidd_core::synthfaces::make_dataset;
use caidd_core::Tensor;

fn setup(seed: u64) -> (AttentionParams, ConditionTokens, Tensor) {
    let experts = Experts::new(ExpertConfig::default(), 16).unwrap();
    let data = make_dataset(2, 2, seed, 16).unwrap();
    let bundle = experts.build_condition(&Tensor::stack_batch(&data.images()).unwrap()).unwrap();
    let mut rng = Rng::seed_from(seed);
    let params = AttentionParams::init(
        AttentionShape {
            channels: 8,
            d_id: 128,
            d_parse: 64,
            n_heads: 2,
            d_head: 8,
        },
        &mut rng,
    )
    .unwrap();
    let tokens = concat_project(&bundle, &params).unwrap();
    let f = rng.normal_tensor(&[2, 8, 4, 4]);
    (params, tokens, f)
}

#[test]
fn weights_sum_to_one_per_query() {
    let (params, tokens, f) = setup(1);
    let (_, w) = cross_attention_with_weights(&f, &tokens, &params).unwrap();
    assert_eq!(w.shape(), &[2, 2, 16, 7]);
    for row in w.data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn output_is_invariant_to_token_order() {
    let (params, tokens, f) = setup(2);
    let base = cross_attention(&f, &tokens, &params).unwrap();
    let mut rng = Rng::seed_from(77);
    for _ in 0..5 {
        let mut order: Vec<usize> = (0..tokens.len()).collect();
        rng.shuffle(&mut order);
        let out = cross_attention(&f, &tokens.permuted(&order).unwrap(), &params).unwrap();
        assert!(out.max_abs_diff(&base) < 1e-6);
    }
}

#[test]
fn single_token_returns_its_projected_value() {
    let (params, tokens, f) = setup(3);
    let dm = tokens.tokens.shape()[2];
    let mut one = Vec::new();
    for b in 0..2 {
        one.extend_from_slice(&tokens.tokens.data()[b * 7 * dm..b * 7 * dm + dm]);
    }
    let single = ConditionTokens {
        tokens: Tensor::new(&[2, 1, dm], one.clone()).unwrap(),
        modality_tags: vec![Modality::Identity],
    };
    let (out, w) = cross_attention_with_weights(&f, &single, &params).unwrap();
    assert!(w.data().iter().all(|&v| v == 1.0));
    let w_v = params.get("w_v").unwrap();
    let w_o = params.get("w_o").unwrap();
    let c = 8;
    for b in 0..2 {
        let tok = &one[b * dm..(b + 1) * dm];
        let v: Vec<f64> = (0..dm).map(|i| (0..dm).map(|j| w_v.data()[i * dm + j] * tok[j]).sum()).collect();
        for ch in 0..c {
            let delta: f64 = (0..dm).map(|j| w_o.data()[ch * dm + j] * v[j]).sum();
            for p in 0..16 {
                let i = (b * c + ch) * 16 + p;
                assert!((out.data()[i] - (f.data()[i] + delta)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn zero_output_projection_is_the_identity_map() {
    let (mut params, tokens, f) = setup(4);
    let w_o = params.get_mut("w_o").unwrap();
    *w_o = Tensor::zeros(w_o.shape());
    let out = cross_attention(&f, &tokens, &params).unwrap();
    assert_eq!(out, f);
}
