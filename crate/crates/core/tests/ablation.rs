use caidd_core::ablation::{grid, run_variant, sample_plan, standard_placements, AblationSpec, EvalPlan, Variant};
use caidd_core::denoiser::{DenoiserConfig, Resolution};
use caidd_core::synthfaces::make_dataset;
use caidd_core::trainer::TrainConfig;

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(Variant::parse(v.name()).unwrap(), v);
    }
    let err = Variant::parse("no_nose").unwrap_err().to_string();
    assert!(err.contains("no_cross_attention"), "{}", err);
}

#[test]
fn variants_flip_only_their_switch() {
    let base = TrainConfig::default();
    assert_eq!(Variant::Full.apply(&base), base);
    assert!(Variant::NoCrossAttention.apply(&base).denoiser.disable_cross_attention);
    assert!(Variant::NoIdentity.apply(&base).denoiser.disable_identity_token);
    let noexp = Variant::NoExpertLosses.apply(&base);
    assert!(noexp.weights.is_zero());
    assert_eq!(noexp.denoiser, base.denoiser);
}

#[test]
fn grid_is_the_full_product_in_order() {
    let g = grid(&Variant::ALL, &standard_placements());
    assert_eq!(g.len(), 12);
    assert_eq!(g[0].name(), "full@high");
    assert_eq!(g[2].name(), "full@low+mid+high");
    assert_eq!(g[4].name(), "no_cross_attention@mid+high");
    let cfg = g[1].config(&TrainConfig::default());
    assert_eq!(cfg.denoiser.attention_placements, vec![Resolution::Mid, Resolution::High]);
}

#[test]
fn severed_variant_ignores_the_source() {
    let ds = make_dataset(3, 3, 4, 16).unwrap().images();
    let base = TrainConfig {
        steps: 2,
        batch_size: 2,
        warmup_steps: Some(1),
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
    };
    let spec = AblationSpec {
        variant: Variant::NoCrossAttention,
        placements: vec![Resolution::High],
    };
    let plan = EvalPlan {
        sources: vec![ds[0].clone(), ds[1].clone()],
        targets: vec![ds[2].clone(), ds[2].clone()],
        seed: 9,
        steps: 4,
    };
    let row = run_variant(&base, &spec, &ds, &plan, "digest").unwrap();
    assert!(row.ssim().is_finite() && row.fid().is_finite() && row.id_similarity().is_finite());
    let outs = sample_plan(&row.checkpoint, &plan, Default::default()).unwrap();
    let swapped = EvalPlan {
        sources: vec![ds[1].clone(), ds[0].clone()],
        ..plan
    };
    let pair = sample_plan(&row.checkpoint, &swapped, Default::default()).unwrap();
    assert_eq!(outs, pair);
}
