//! Analytic gradients against central finite differences.

use caidd_core::attention::{concat_project_on, cross_attention_on, AttentionShape, AttentionVars, EmbeddingVars, TokenSelection};
use caidd_core::autograd::Graph;
use caidd_core::denoiser::{Denoiser, DenoiserConfig};
use caidd_core::experts::{ConditionBundle, ExpertConfig, Experts};
use caidd_core::losses::{total_loss_on, x0_estimate_on, LossModes, LossWeights};
use caidd_core::params::{ParamBuilder, ParamSet};
use caidd_core::rng::Rng;
use caidd_core::schedule::{forward_diffuse_batch, ScheduleConfig};
use caidd_core::synthfaces::make_dataset;
use caidd_core::Tensor;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Picks `n` (parameter, flat index) pairs spread over the named tensors.
fn coords(params: &ParamSet, names: &[String], n: usize, rng: &mut Rng) -> Vec<(String, usize)> {
    (0..n)
        .map(|k| {
            let name = &names[k % names.len()];
            let len = params.get(name).unwrap().len();
            (name.clone(), rng.below(len))
        })
        .collect()
}

fn check(params: &ParamSet, grads: &[Tensor], picks: &[(String, usize)], mut loss: impl FnMut(&ParamSet) -> f64) {
    let mut worst = 0.0f64;
    let mut informative = 0;
    for (name, i) in picks {
        let id = params.id(name).unwrap();
        let analytic = grads[id].data()[*i];
        let mut p = params.clone();
        p.get_mut(name).unwrap().data_mut()[*i] += H;
        let up = loss(&p);
        p.get_mut(name).unwrap().data_mut()[*i] -= 2.0 * H;
        let down = loss(&p);
        let numeric = (up - down) / (2.0 * H);
        let e = rel_err(analytic, numeric);
        if analytic.abs() > 1e-6 {
            informative += 1;
        }
        assert!(e < TOL, "{}[{}]: analytic {} numeric {} (rel {})", name, i, analytic, numeric, e);
        worst = worst.max(e);
    }
    eprintln!("worst relative error over {} coordinates: {:.2e}", picks.len(), worst);
    assert!(informative >= 20, "only {} coordinates had a non-negligible gradient", informative);
}

fn attention_setup() -> (ParamSet, ConditionBundle, Tensor, Tensor) {
    let experts = Experts::new(ExpertConfig::default(), 16).unwrap();
    let data = make_dataset(2, 2, 4, 16).unwrap();
    let bundle = experts.build_condition(&Tensor::stack_batch(&data.images()).unwrap()).unwrap();
    let mut rng = Rng::seed_from(9);
    let shape = AttentionShape {
        channels: 6,
        d_id: 128,
        d_parse: 64,
        n_heads: 2,
        d_head: 4,
    };
    let mut b = ParamBuilder::new(&mut rng);
    shape.register(&mut b, "a", TokenSelection::ALL).unwrap();
    let mut params = b.finish();
    // non-zero biases so their gradients are exercised from a generic point
    for name in ["a.id_b", "a.parse_b", "a.gaze_b"] {
        let t = params.get_mut(name).unwrap();
        *t = Tensor::from_fn(t.shape(), |i| 0.05 * ((i % 7) as f64 - 3.0));
    }
    let f = rng.normal_tensor(&[2, 6, 4, 4]);
    let probe = rng.normal_tensor(&[2, 6, 4, 4]);
    (params, bundle, f, probe)
}

fn attention_loss(params: &ParamSet, bundle: &ConditionBundle, f: &Tensor, probe: &Tensor, g: &mut Graph) -> (caidd_core::autograd::Var, caidd_core::params::Bound) {
    let bound = params.bind(g);
    let vars = AttentionVars::from_bound(&bound, "a", 2, 4).unwrap();
    let emb = EmbeddingVars::constant(g, bundle);
    let (tokens, _) = concat_project_on(g, &vars, emb, TokenSelection::ALL).unwrap();
    let fv = g.constant(f.clone());
    let (out, _) = cross_attention_on(g, &vars, fv, tokens).unwrap();
    let pv = g.constant(probe.clone());
    let prod = g.mul(out, pv).unwrap();
    (g.sum(prod), bound)
}

#[test]
fn cross_attention_parameter_gradients_match_finite_differences() {
    let (params, bundle, f, probe) = attention_setup();
    let mut g = Graph::new();
    let (loss, bound) = attention_loss(&params, &bundle, &f, &probe, &mut g);
    let grads = bound.gradients(&g.backward(loss), &params);
    let names: Vec<String> = params.names().to_vec();
    let picks = coords(&params, &names, 40, &mut Rng::seed_from(3));
    check(&params, &grads, &picks, |p| {
        let mut g = Graph::new();
        let (l, _) = attention_loss(p, &bundle, &f, &probe, &mut g);
        g.value(l).item()
    });
}

#[test]
fn cross_attention_input_gradient_matches_finite_differences() {
    let (params, bundle, f, probe) = attention_setup();
    let eval = |f: &Tensor, want_grad: bool| {
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let vars = AttentionVars::from_bound(&bound, "a", 2, 4).unwrap();
        let emb = EmbeddingVars::constant(&mut g, &bundle);
        let (tokens, _) = concat_project_on(&mut g, &vars, emb, TokenSelection::ALL).unwrap();
        let fv = g.param(f.clone());
        let (out, _) = cross_attention_on(&mut g, &vars, fv, tokens).unwrap();
        let pv = g.constant(probe.clone());
        let prod = g.mul(out, pv).unwrap();
        let l = g.sum(prod);
        let grad = want_grad.then(|| g.backward(l).get(fv).unwrap().clone());
        (g.value(l).item(), grad)
    };
    let grad = eval(&f, true).1.unwrap();
    let mut rng = Rng::seed_from(11);
    for _ in 0..20 {
        let i = rng.below(f.len());
        let mut up = f.clone();
        up.data_mut()[i] += H;
        let mut down = f.clone();
        down.data_mut()[i] -= H;
        let numeric = (eval(&up, false).0 - eval(&down, false).0) / (2.0 * H);
        let e = rel_err(grad.data()[i], numeric);
        assert!(e < TOL, "f[{}]: analytic {} numeric {}", i, grad.data()[i], numeric);
    }
}

struct Chain {
    denoiser: Denoiser,
    experts: Experts,
    x_t: Tensor,
    target: Tensor,
    eps: Tensor,
    ts: Vec<usize>,
    bundle: ConditionBundle,
    schedule: caidd_core::schedule::NoiseSchedule,
}

impl Chain {
    fn new() -> Self {
        let ecfg = ExpertConfig::default();
        let cfg = DenoiserConfig {
            image_size: 16,
            base_channels: 8,
            time_embed_dim: 32,
            n_heads: 2,
            d_head: 8,
            res_blocks: 1,
            norm_groups: 4,
            ..DenoiserConfig::default()
        };
        let denoiser = Denoiser::new(cfg, &ecfg).unwrap();
        let experts = Experts::new(ecfg, 16).unwrap();
        let data = make_dataset(2, 2, 21, 16).unwrap();
        let x0 = Tensor::stack_batch(&data.images()).unwrap();
        let bundle = experts.build_condition(&x0).unwrap();
        let schedule = ScheduleConfig::default().build().unwrap();
        let mut rng = Rng::seed_from(5);
        let eps = rng.normal_tensor(x0.shape());
        // small timesteps keep the clean-image estimate inside the clamp
        let ts = vec![20, 45];
        let x_t = forward_diffuse_batch(&x0, &ts, &eps, &schedule).unwrap();
        Self {
            denoiser,
            experts,
            x_t,
            target: x0,
            eps,
            ts,
            bundle,
            schedule,
        }
    }

    /// Total loss with `eps_pred` either from the network or given directly.
    fn loss(&self, g: &mut Graph, params: &ParamSet, direct: Option<Tensor>) -> (caidd_core::autograd::Var, caidd_core::params::Bound, caidd_core::autograd::Var) {
        let bound = params.bind(g);
        let xv = g.constant(self.x_t.clone());
        let eps_pred = match direct {
            Some(e) => g.param(e),
            None => {
                let tv = g.constant(self.target.clone());
                let emb = EmbeddingVars::constant(g, &self.bundle);
                self.denoiser.forward_on(g, &bound, xv, &self.ts, tv, emb).unwrap()
            }
        };
        let x0_hat = x0_estimate_on(g, xv, eps_pred, &self.ts, &self.schedule).unwrap();
        let et = g.constant(self.eps.clone());
        let vars = total_loss_on(g, et, eps_pred, Some(x0_hat), &self.bundle, &LossWeights::default(), &self.experts, LossModes::default()).unwrap();
        (vars.l_total, bound, eps_pred)
    }
}

#[test]
fn total_loss_gradient_through_denoiser_and_experts() {
    let chain = Chain::new();
    let params = chain.denoiser.init_params(13).unwrap();
    let mut g = Graph::new();
    let (loss, bound, _) = chain.loss(&mut g, &params, None);
    let grads = bound.gradients(&g.backward(loss), &params);
    let attn = chain.denoiser.attention_param_names(&params);
    let others: Vec<String> = params.names().iter().filter(|n| !n.contains(".attn.")).cloned().collect();
    let mut rng = Rng::seed_from(17);
    let mut picks = coords(&params, &attn, 12, &mut rng);
    picks.extend(coords(&params, &others, 12, &mut rng));
    check(&params, &grads, &picks, |p| {
        let mut g = Graph::new();
        let (l, _, _) = chain.loss(&mut g, p, None);
        g.value(l).item()
    });
}

#[test]
fn total_loss_gradient_with_respect_to_predicted_noise() {
    let chain = Chain::new();
    let params = chain.denoiser.init_params(13).unwrap();
    let eps_pred = chain.denoiser.predict(&params, &chain.x_t, &chain.ts, &chain.target, &chain.bundle).unwrap();
    let mut g = Graph::new();
    let (loss, _, ev) = chain.loss(&mut g, &params, Some(eps_pred.clone()));
    let grad = g.backward(loss).get(ev).unwrap().clone();
    let eval = |e: Tensor| {
        let mut g = Graph::new();
        let (l, _, _) = chain.loss(&mut g, &params, Some(e));
        g.value(l).item()
    };
    let mut rng = Rng::seed_from(23);
    for _ in 0..24 {
        let i = rng.below(eps_pred.len());
        let mut up = eps_pred.clone();
        up.data_mut()[i] += H;
        let mut down = eps_pred.clone();
        down.data_mut()[i] -= H;
        let numeric = (eval(up) - eval(down)) / (2.0 * H);
        let e = rel_err(grad.data()[i], numeric);
        assert!(e < TOL, "eps[{}]: analytic {} numeric {} (rel {})", i, grad.data()[i], numeric, e);
    }
}
