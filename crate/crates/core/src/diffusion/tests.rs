use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::network::{Hierarchy, ModelConfig};
use crate::numerics::Tape;

fn rand_images(b: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(vec![b, size, size, 1], -1.0, 1.0, &mut rng)
}

fn small_model(seed: u64) -> Denoiser {
    let cfg = ModelConfig {
        image_size: 16,
        d_model: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        time_embed_dim: 16,
        n_super: 2,
        subs_per_super: 2,
        ..ModelConfig::default()
    };
    let mut model = Denoiser::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..model.params().len() {
        let p = model.params().get(i);
        if p.name.starts_with("final.out") || p.name.starts_with("label.") {
            let shape = p.value.shape().to_vec();
            *model.params_mut().value_mut(i) = Tensor::uniform(shape, -0.5, 0.5, &mut rng);
        }
    }
    model
}

#[test]
fn schedule_invariants() {
    let s = NoiseSchedule::default();
    assert_eq!(s.steps(), 200);
    assert_eq!(s.alpha_bar(0), 1.0);
    for t in 1..=200 {
        assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
        assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        if t > 1 {
            assert!(s.beta(t) > s.beta(t - 1));
        }
        let c = s.posterior(t);
        assert!(c.x0.is_finite() && c.xt.is_finite() && c.variance.is_finite());
    }
    assert_eq!(s.posterior(1).variance, 0.0);
    assert!(NoiseSchedule::linear(10, 0.5, 0.1).is_err());
}

#[test]
fn q_sample_examples() {
    let s = NoiseSchedule::default();
    let x0 = rand_images(2, 4, 1);
    let zero = Tensor::zeros(x0.shape().to_vec());
    let xt = q_sample(&s, &x0, &[5, 100], &zero).unwrap();
    for i in 0..16 {
        assert_eq!(xt.data()[i], s.alpha_bar(5).sqrt() * x0.data()[i]);
        assert_eq!(xt.data()[16 + i], s.alpha_bar(100).sqrt() * x0.data()[16 + i]);
    }
    assert!(matches!(q_sample(&s, &x0, &[0, 1], &zero), Err(Error::Contract(_))));
    assert!(matches!(q_sample(&s, &x0, &[201, 1], &zero), Err(Error::Contract(_))));
}

#[test]
fn estimate_inverts_q_sample() {
    let s = NoiseSchedule::default();
    for seed in 0..20 {
        let x0 = rand_images(3, 8, seed);
        let eps = crate::diffusion::gaussian(x0.shape(), &mut ChaCha8Rng::seed_from_u64(seed + 99));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<usize> = (0..3).map(|_| rng.random_range(1..=200)).collect();
        let xt = q_sample(&s, &x0, &t, &eps).unwrap();
        assert!(estimate_x0(&s, &xt, &t, &eps).unwrap().max_abs_diff(&x0) < 1e-12);
    }
    let xt = rand_images(1, 4, 3);
    let got = estimate_x0(&s, &xt, &[50], &Tensor::zeros(vec![1, 4, 4, 1])).unwrap();
    assert!(got.max_abs_diff(&xt.scale(1.0 / s.alpha_bar(50).sqrt())) < 1e-15);
}

#[test]
fn estimate_matches_fused_formula() {
    // Oracle: the numerator with a single rounding (fused multiply-add),
    // then one division.
    let s = NoiseSchedule::default();
    for seed in 0..20 {
        let xt = rand_images(1, 8, seed);
        let e = rand_images(1, 8, seed + 50);
        let t = 1 + (seed as usize * 37) % 200;
        let got = estimate_x0(&s, &xt, &[t], &e).unwrap();
        let (a, b) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
        for i in 0..64 {
            let oracle = (-b).mul_add(e.data()[i], xt.data()[i]) / a;
            assert!((got.data()[i] - oracle).abs() <= 1e-14 * (1.0 + oracle.abs()));
        }
    }
}

#[test]
fn refine_endpoints_and_fixed_point() {
    let splitter = BandSplitter::new(2.0, 8, 8).unwrap();
    let x = rand_images(2, 8, 4);
    let (h, l) = splitter.split(&x).unwrap();
    let pure = perceptual_refine(&x, 1.0, &splitter).unwrap();
    assert!(pure.max_abs_diff(&x.mul(&h.add_scalar(1.0)).unwrap()) < 1e-15);
    let degraded = perceptual_refine(&x, 0.0, &splitter).unwrap();
    assert!(degraded.max_abs_diff(&l) < 1e-15);
    let c = Tensor::full(vec![1, 8, 8, 1], 0.4);
    for gamma in [0.0, 0.3, 0.7, 1.0] {
        assert!(perceptual_refine(&c, gamma, &splitter).unwrap().max_abs_diff(&c) < 1e-9);
    }
}

#[test]
fn posterior_first_step_is_deterministic() {
    let s = NoiseSchedule::default();
    let (xt, x0) = (rand_images(1, 4, 1), rand_images(1, 4, 2));
    let a = posterior_step(&s, &xt, &x0, 1, &rand_images(1, 4, 3)).unwrap();
    let b = posterior_step(&s, &xt, &x0, 1, &rand_images(1, 4, 4)).unwrap();
    assert_eq!(a, b);
    // With ᾱ₀ = 1 the first step returns x̂₀ itself.
    assert!(a.max_abs_diff(&x0) < 1e-12);
}

#[test]
fn posterior_coefficients_preserve_a_constant() {
    let s = NoiseSchedule::default();
    for t in 1..=200 {
        let c = s.posterior(t);
        let xbar = 0.37;
        let mean = c.x0 * xbar + c.xt * s.alpha_bar(t).sqrt() * xbar;
        assert!((mean - s.alpha_bar(t - 1).sqrt() * xbar).abs() < 1e-12, "t={t}");
    }
}

#[test]
fn posterior_matches_scalar_gaussian_product() {
    // q(x_{t−1} | x_t, x₀) ∝ N(x_{t−1}; √ᾱ_{t−1}x₀, 1−ᾱ_{t−1}) · N(x_t; √α_t x_{t−1}, β_t).
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for t in 2..=200 {
        let (x0, xt): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0));
        let (ab_prev, alpha, beta) = (s.alpha_bar(t - 1), s.alpha(t), s.beta(t));
        let precision = 1.0 / (1.0 - ab_prev) + alpha / beta;
        let mean = (ab_prev.sqrt() * x0 / (1.0 - ab_prev) + alpha.sqrt() * xt / beta) / precision;
        let var = 1.0 / precision;
        let one = |v: f64| Tensor::full(vec![1, 1, 1, 1], v);
        let got = posterior_step(&s, &one(xt), &one(x0), t, &one(0.0)).unwrap();
        assert!((got.data()[0] - mean).abs() < 1e-12, "t={t}");
        assert!((s.posterior(t).variance - var).abs() < 1e-12 * var.max(1e-3));
        let shifted = posterior_step(&s, &one(xt), &one(x0), t, &one(1.0)).unwrap();
        assert!((shifted.data()[0] - got.data()[0] - var.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn kl_examples() {
    let p = rand_images(1, 4, 1);
    assert_eq!(kl_feature(&p, &p, 1.0).unwrap(), 0.0);
    assert!(kl_feature(&p.add_scalar(3.0), &p, 1.0).unwrap().abs() < 1e-15);
    let q = rand_images(1, 4, 2);
    assert!(kl_feature(&p, &q, 1.0).unwrap() > 0.0);
    assert!(kl_feature(&p, &q, 0.0).is_err());
}

#[test]
fn kl_matches_hand_computation() {
    // Two 2×2 single-channel maps, temperature 0.5, written out directly.
    let p = [0.3, -0.2, 0.9, 0.1];
    let q = [-0.4, 0.5, 0.2, 0.0];
    let soft = |m: &[f64]| {
        let e: Vec<f64> = m.iter().map(|v| (v / 0.5).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect::<Vec<_>>()
    };
    let (pp, qq) = (soft(&p), soft(&q));
    let oracle: f64 = pp.iter().zip(&qq).map(|(a, b)| a * (a / b).ln()).sum();
    let t = |m: &[f64]| Tensor::new(vec![2, 2, 1], m.to_vec()).unwrap();
    assert!((kl_feature(&t(&p), &t(&q), 0.5).unwrap() - oracle).abs() < 1e-14);
}

#[test]
fn kl_averages_channels() {
    let p = rand_images(1, 4, 5).reshape(vec![4, 2, 2]).unwrap();
    let q = rand_images(1, 4, 6).reshape(vec![4, 2, 2]).unwrap();
    let chan = |x: &Tensor, c: usize| {
        Tensor::new(vec![4, 2, 1], x.data().iter().skip(c).step_by(2).cloned().collect()).unwrap()
    };
    let per: f64 = (0..2).map(|c| kl_feature(&chan(&p, c), &chan(&q, c), 1.0).unwrap()).sum::<f64>() / 2.0;
    assert!((kl_feature(&p, &q, 1.0).unwrap() - per).abs() < 1e-14);
}

#[test]
fn loss_weights_collapse_to_noise_loss() {
    let model = small_model(1);
    let h = *model.hierarchy();
    let x0 = rand_images(2, 16, 7);
    let eps = rand_images(2, 16, 8);
    let conds = [TieredCondition::full(0, &h), TieredCondition::full(3, &h)];
    let batch = Batch {
        x0: &x0,
        conds: &conds,
        t: &[3, 120],
        eps: &eps,
    };
    let splitter = Rc::new(BandSplitter::new(2.0, 16, 16).unwrap());
    let s = NoiseSchedule::default();
    let zero = LossConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        ..LossConfig::default()
    };
    let parts = loss_total(&model, &model.frozen(), &batch, &s, &zero, 0.7, &splitter).unwrap();
    assert_eq!(parts.total_value(), parts.org);
    assert!(parts.high_pix > 0.0 && parts.rec > 0.0);
}

#[test]
fn loss_matches_recomputation_from_public_ops() {
    let model = small_model(2);
    let h = *model.hierarchy();
    let x0 = rand_images(2, 16, 9);
    let eps = rand_images(2, 16, 10);
    let conds = [TieredCondition::full(1, &h), TieredCondition::full(2, &h).sub_only()];
    let t = [40, 7];
    let batch = Batch {
        x0: &x0,
        conds: &conds,
        t: &t,
        eps: &eps,
    };
    let splitter = Rc::new(BandSplitter::new(2.0, 16, 16).unwrap());
    let s = NoiseSchedule::default();
    let cfg = LossConfig {
        lambda1: 0.5,
        lambda2: 2.0,
        ..LossConfig::default()
    };
    let p = model.frozen();
    let parts = loss_total(&model, &p, &batch, &s, &cfg, 0.7, &splitter).unwrap();

    let xt = q_sample(&s, &x0, &t, &eps).unwrap();
    let eps_hat = model.predict(&p, &xt, &t, &conds).unwrap();
    let d = eps_hat.sub(&eps).unwrap();
    let org = d.sum_squares() / d.len() as f64;
    let x0t = estimate_x0(&s, &xt, &t, &eps_hat).unwrap();
    let (hi, _) = splitter.split(&x0t).unwrap();
    let enhanced = x0t.mul(&hi.add_scalar(1.0)).unwrap();
    let high_pix = kl_feature(&enhanced, &x0t, 1.0).unwrap();
    let rec = kl_feature(&perceptual_refine(&x0t, 0.7, &splitter).unwrap(), &x0t, 1.0).unwrap();
    assert!((parts.org - org).abs() < 1e-12);
    assert!((parts.high_pix - high_pix).abs() < 1e-12);
    assert!((parts.rec - rec).abs() < 1e-12);
    assert!((parts.total_value() - (org + 0.5 * high_pix + 2.0 * rec)).abs() < 1e-12);
}

#[test]
fn frequency_terms_use_only_refinement_stage_items() {
    let model = small_model(4);
    let h = *model.hierarchy();
    let x0 = rand_images(4, 16, 12);
    let eps = rand_images(4, 16, 13);
    let conds: Vec<_> = (0..4).map(|i| TieredCondition::full(i, &h)).collect();
    let t = [3, 120, 41, 40];
    let batch = Batch {
        x0: &x0,
        conds: &conds,
        t: &t,
        eps: &eps,
    };
    let splitter = Rc::new(BandSplitter::new(2.0, 16, 16).unwrap());
    let s = NoiseSchedule::default();
    let p = model.frozen();
    let parts = loss_total(&model, &p, &batch, &s, &LossConfig::default(), 0.7, &splitter).unwrap();

    // Items 0 and 3 are at or below the default limit of 40.
    let xt = q_sample(&s, &x0, &t, &eps).unwrap();
    let x0t = estimate_x0(&s, &xt, &t, &model.predict(&p, &xt, &t, &conds).unwrap()).unwrap();
    let mut kept = x0t.data()[..256].to_vec();
    kept.extend_from_slice(&x0t.data()[3 * 256..]);
    let kept = Tensor::new(vec![2, 16, 16, 1], kept).unwrap();
    let (hi, _) = splitter.split(&kept).unwrap();
    let high_pix = kl_feature(&kept.mul(&hi.add_scalar(1.0)).unwrap(), &kept, 1.0).unwrap();
    let rec = kl_feature(&perceptual_refine(&kept, 0.7, &splitter).unwrap(), &kept, 1.0).unwrap();
    assert!((parts.high_pix - high_pix).abs() < 1e-12);
    assert!((parts.rec - rec).abs() < 1e-12);

    let late = Batch { t: &[41, 200, 90, 150], ..batch };
    let parts = loss_total(&model, &p, &late, &s, &LossConfig::default(), 0.7, &splitter).unwrap();
    assert_eq!((parts.high_pix, parts.rec), (0.0, 0.0));
    assert_eq!(parts.total_value(), parts.org);

    let every = LossConfig { frequency_max_t: 200, ..LossConfig::default() };
    let parts = loss_total(&model, &p, &late, &s, &every, 0.7, &splitter).unwrap();
    assert!(parts.high_pix > 0.0 && parts.rec > 0.0);
}

#[test]
fn frequency_stage_gradient_matches_finite_differences() {
    let model = small_model(5);
    let h = *model.hierarchy();
    let x0 = rand_images(3, 16, 14);
    let eps = rand_images(3, 16, 15);
    let conds: Vec<_> = (0..3).map(|i| TieredCondition::full(i, &h)).collect();
    let t = [30, 150, 5];
    let splitter = Rc::new(BandSplitter::new(2.0, 16, 16).unwrap());
    let s = NoiseSchedule::default();
    let cfg = LossConfig { lambda1: 3.0, lambda2: 3.0, ..LossConfig::default() };
    let idx = model.params().iter().position(|p| p.name == "final.out.bias").unwrap();
    let loss_at = |bias: &Tensor| {
        let mut vars: Vec<Var> = model.params().iter().map(|p| Var::constant(p.value.clone())).collect();
        vars[idx] = Var::constant(bias.clone());
        let batch = Batch { x0: &x0, conds: &conds, t: &t, eps: &eps };
        loss_total(&model, &Bound::from_vars(vars), &batch, &s, &cfg, 0.7, &splitter).unwrap().total_value()
    };
    let tape = Tape::new();
    let bias = model.params().get(idx).value.clone();
    let mut vars: Vec<Var> = model.params().iter().map(|p| Var::constant(p.value.clone())).collect();
    let bv = tape.param(bias.clone());
    vars[idx] = bv.clone();
    let batch = Batch { x0: &x0, conds: &conds, t: &t, eps: &eps };
    let g = loss_total(&model, &Bound::from_vars(vars), &batch, &s, &cfg, 0.7, &splitter)
        .unwrap()
        .total
        .backward()
        .unwrap()
        .wrt(&bv);
    for j in 0..bias.len() {
        let (mut a, mut b) = (bias.clone(), bias.clone());
        a.data_mut()[j] += 1e-5;
        b.data_mut()[j] -= 1e-5;
        let fd = (loss_at(&a) - loss_at(&b)) / 2e-5;
        let an = g.data()[j];
        assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "element {j}: {fd} vs {an}");
    }
}

#[test]
fn composite_zero_case() {
    // A model that always predicts zero noise, paired with zero true noise
    // on a constant batch, gives zero on every term.
    let model = Denoiser::new(&ModelConfig {
        image_size: 16,
        ..ModelConfig::default()
    })
    .unwrap();
    let h = *model.hierarchy();
    let x0 = Tensor::full(vec![2, 16, 16, 1], 0.25);
    let eps = Tensor::zeros(vec![2, 16, 16, 1]);
    let conds = [TieredCondition::full(0, &h), TieredCondition::full(5, &h)];
    let batch = Batch {
        x0: &x0,
        conds: &conds,
        t: &[10, 90],
        eps: &eps,
    };
    let splitter = Rc::new(BandSplitter::new(2.0, 16, 16).unwrap());
    let parts = loss_total(
        &model,
        &model.frozen(),
        &batch,
        &NoiseSchedule::default(),
        &LossConfig::default(),
        0.7,
        &splitter,
    )
    .unwrap();
    assert_eq!(parts.org, 0.0);
    assert!(parts.high_pix.abs() < 1e-12 && parts.rec.abs() < 1e-12);
}

#[test]
fn cfg_scale_endpoints() {
    let model = small_model(3);
    let h = *model.hierarchy();
    let p = model.frozen();
    let x = rand_images(2, 16, 11);
    let t = [50, 50];
    let conds = [TieredCondition::full(0, &h), TieredCondition::full(3, &h)];
    let cond = model.predict(&p, &x, &t, &conds).unwrap();
    let null = model.predict(&p, &x, &t, &[TieredCondition::NULL; 2]).unwrap();
    assert!(cfg_predict(&model, &p, &x, &t, &conds, 1.0).unwrap().max_abs_diff(&cond) < 1e-12);
    assert!(cfg_predict(&model, &p, &x, &t, &conds, 0.0).unwrap().max_abs_diff(&null) < 1e-12);
    let nulls = [TieredCondition::NULL; 2];
    assert!(cfg_predict(&model, &p, &x, &t, &nulls, 4.0).unwrap().max_abs_diff(&null) < 1e-12);
}

#[test]
fn tiered_reduces_to_single_guidance() {
    let model = small_model(4);
    let h = *model.hierarchy();
    let p = model.frozen();
    let x = rand_images(2, 16, 12);
    let t = [120, 3];
    let conds = [TieredCondition::full(1, &h), TieredCondition::full(2, &h)];
    let sub: Vec<_> = conds.iter().map(|c| c.sub_only()).collect();
    let tiered = tiered_cfg_predict(&model, &p, &x, &t, &conds, 2.5, 0.0).unwrap();
    let single = cfg_predict(&model, &p, &x, &t, &sub, 2.5).unwrap();
    assert!(tiered.data().iter().zip(single.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    let uncond = tiered_cfg_predict(&model, &p, &x, &t, &conds, 0.0, 0.0).unwrap();
    let null = model.predict(&p, &x, &t, &[TieredCondition::NULL; 2]).unwrap();
    assert!(uncond.max_abs_diff(&null) < 1e-12);
    assert!(matches!(
        tiered_cfg_predict(&model, &p, &x, &t, &[TieredCondition::NULL; 2], 1.0, 1.0),
        Err(Error::Contract(_))
    ));
}

#[test]
fn tiered_guidance_is_affine_in_scales() {
    let model = small_model(5);
    let h = *model.hierarchy();
    let p = model.frozen();
    let x = rand_images(1, 16, 13);
    let t = [77];
    let conds = [TieredCondition::full(3, &h)];
    let f = |a: f64, b: f64| tiered_cfg_predict(&model, &p, &x, &t, &conds, a, b).unwrap();
    // f(a, b) = f(0,0) + a·(f(1,0) − f(0,0)) + b·(f(0,1) − f(0,0)).
    let (f00, f10, f01) = (f(0.0, 0.5), f(1.0, 0.5), f(0.0, 1.5));
    let predicted = f00
        .add(&f10.sub(&f00).unwrap().scale(2.5))
        .unwrap()
        .add(&f01.sub(&f00).unwrap().scale(-0.3))
        .unwrap();
    assert!(f(2.5, 0.2).max_abs_diff(&predicted) < 1e-10);
}

#[test]
fn respacing() {
    let s = NoiseSchedule::default();
    assert_eq!(s.respaced(200).unwrap(), (1..=200).rev().collect::<Vec<_>>());
    let short = s.respaced(10).unwrap();
    assert_eq!(short.first(), Some(&200));
    assert_eq!(short.last(), Some(&20));
    assert_eq!(s.respaced(1).unwrap(), vec![200]);
    assert!(s.respaced(0).is_err());
    for (t, prev) in [(100, 80), (20, 0)] {
        let c = s.posterior_between(t, prev);
        let xbar = 0.5;
        let mean = c.x0 * xbar + c.xt * s.alpha_bar(t).sqrt() * xbar;
        assert!((mean - s.alpha_bar(prev).sqrt() * xbar).abs() < 1e-12);
    }
}

/// Plain single-condition DDPM written directly from the public ops.
fn plain_ddpm(model: &Denoiser, conds: &[TieredCondition], w: f64, seed: u64) -> Tensor {
    let s = NoiseSchedule::default();
    let p = model.frozen();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = model.config().image_size;
    let shape = [conds.len(), size, size, 1];
    let sub: Vec<_> = conds.iter().map(|c| c.sub_only()).collect();
    let mut x = gaussian(&shape, &mut rng);
    for t in (1..=s.steps()).rev() {
        let ts = vec![t; conds.len()];
        let eps = cfg_predict(model, &p, &x, &ts, &sub, w).unwrap();
        let x0 = estimate_x0(&s, &x, &ts, &eps).unwrap().map(|v| v.clamp(-1.0, 1.0));
        let noise = if t > 1 { gaussian(&shape, &mut rng) } else { Tensor::zeros(shape.to_vec()) };
        x = posterior_step(&s, &x, &x0, t, &noise).unwrap();
    }
    x
}

#[test]
fn disabled_guidance_reproduces_plain_sampler() {
    let model = small_model(6);
    let h = *model.hierarchy();
    let conds = [TieredCondition::full(1, &h), TieredCondition::full(3, &h)];
    let g = GuidanceConfig {
        t_split: 0,
        w_sub: 1.5,
        w_super: 0.0,
        ..GuidanceConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let out = guided_sample(&model, &model.frozen(), &NoiseSchedule::default(), &g, &conds, &mut rng).unwrap();
    let plain = plain_ddpm(&model, &conds, 1.5, 21);
    assert!(out.images.data().iter().zip(plain.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(out.trace.len(), 200);
    assert_eq!(out.trace[0].step, 200);
}

#[test]
fn sampler_is_deterministic() {
    let model = small_model(7);
    let h = *model.hierarchy();
    let conds = [TieredCondition::full(2, &h)];
    let g = GuidanceConfig {
        gamma: 0.5,
        steps: Some(25),
        ..GuidanceConfig::default()
    };
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        guided_sample(&model, &model.frozen(), &NoiseSchedule::default(), &g, &conds, &mut rng).unwrap()
    };
    let (a, b) = (run(), run());
    assert!(a.images.data().iter().zip(b.images.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a.trace, b.trace);
    let csv = trace_csv(&a.trace);
    assert!(csv.starts_with("step,hf_ratio,x0_min,x0_max\n200,"));
}

#[test]
fn sampler_reports_non_finite_step() {
    let mut model = small_model(8);
    let i = model.params().iter().position(|p| p.name == "final.out.bias").unwrap();
    model.params_mut().value_mut(i).data_mut()[0] = f64::NAN;
    let h = Hierarchy::new(2, 2).unwrap();
    let g = GuidanceConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = guided_sample(
        &model,
        &model.frozen(),
        &NoiseSchedule::default(),
        &g,
        &[TieredCondition::full(0, &h)],
        &mut rng,
    );
    assert!(matches!(r, Err(Error::NonFinite { step: 200 })));
}

#[test]
fn guidance_validation() {
    let s = NoiseSchedule::default();
    let bad = |g: GuidanceConfig| matches!(g.validate(&s), Err(Error::Config(_)));
    assert!(bad(GuidanceConfig { gamma: 1.5, ..Default::default() }));
    assert!(bad(GuidanceConfig { t_split: 201, ..Default::default() }));
    assert!(bad(GuidanceConfig { w_sub: f64::NAN, ..Default::default() }));
    assert!(bad(GuidanceConfig { d0: Some(0.0), ..Default::default() }));
    assert!(GuidanceConfig::default().validate(&s).is_ok());
}
