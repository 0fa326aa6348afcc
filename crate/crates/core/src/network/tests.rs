use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mha::multi_head_attention;
use super::*;
use crate::attention::{draw_samples, AttentionConfig};
use crate::numerics::gradcheck::{max_relative_error, weighted_sum};
use crate::numerics::{Tape, Tensor, Var};
use crate::Error;

fn small_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch: 2,
        d_model: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        time_embed_dim: 8,
        n_super: 2,
        subs_per_super: 3,
        ..ModelConfig::default()
    }
}

/// Replaces the zero-initialised output layer so gradients reach every
/// parameter.
fn randomise_output(model: &mut Denoiser, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..model.params().len() {
        if model.params().get(i).name.starts_with("final.out") {
            let shape = model.params().get(i).value.shape().to_vec();
            *model.params_mut().value_mut(i) = Tensor::uniform(shape, -0.5, 0.5, &mut rng);
        }
    }
}

fn batch_inputs(model: &Denoiser, b: usize, seed: u64) -> (Tensor, Vec<usize>, Vec<TieredCondition>) {
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(vec![b, cfg.image_size, cfg.image_size, cfg.channels], &mut rng);
    let t = (0..b).map(|_| rng.random_range(1..=200)).collect();
    let h = *model.hierarchy();
    let conds = (0..b)
        .map(|_| {
            let c = TieredCondition::full(rng.random_range(0..h.n_sub()), &h);
            c.dropped((rng.random_bool(0.3), rng.random_bool(0.3)))
        })
        .collect();
    (x, t, conds)
}

#[test]
fn output_shape_matches_input() {
    let cfg = ModelConfig {
        image_size: 16,
        ..ModelConfig::default()
    };
    let model = Denoiser::new(&cfg).unwrap();
    let (x, t, conds) = batch_inputs(&model, 2, 0);
    let y = model.predict(&model.frozen(), &x, &t, &conds).unwrap();
    assert_eq!(y.shape(), &[2, 16, 16, 1]);
}

#[test]
fn zero_initialised_output_predicts_zero() {
    let model = Denoiser::new(&ModelConfig::default()).unwrap();
    let (x, t, conds) = batch_inputs(&model, 3, 1);
    let y = model.predict(&model.frozen(), &x, &t, &conds).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn indivisible_patch_is_a_config_error() {
    let cfg = ModelConfig {
        image_size: 30,
        ..ModelConfig::default()
    };
    assert!(matches!(Denoiser::new(&cfg), Err(Error::Config(_))));
}

#[test]
fn wrong_input_shape_is_rejected() {
    let model = Denoiser::new(&small_config()).unwrap();
    let x = Tensor::zeros(vec![1, 8, 8, 1]);
    let r = model.predict(&model.frozen(), &x, &[1], &[TieredCondition::NULL]);
    assert!(matches!(r, Err(Error::Dimension(_))));
}

#[test]
fn hierarchy_parent_map_is_surjective() {
    let h = Hierarchy::default();
    assert_eq!(h.n_sub(), 20);
    let mut seen = vec![false; h.n_super];
    for s in 0..h.n_sub() {
        seen[h.parent_of(s)] = true;
    }
    assert!(seen.iter().all(|&s| s));
}

#[test]
fn condition_validation() {
    let h = Hierarchy::default();
    assert!(TieredCondition::full(7, &h).validate(&h).is_ok());
    let bad = TieredCondition {
        sub: Some(7),
        sup: Some(0),
    };
    assert!(matches!(bad.validate(&h), Err(Error::Contract(_))));
    let out = TieredCondition {
        sub: Some(20),
        sup: None,
    };
    assert!(matches!(out.validate(&h), Err(Error::Contract(_))));
}

#[test]
fn fully_dropped_embedding_is_the_null_sum() {
    let model = Denoiser::new(&ModelConfig::default()).unwrap();
    let h = *model.hierarchy();
    let null = model.embed_condition(&TieredCondition::NULL, (false, false)).unwrap();
    let sub = &model.params().by_name("label.sub_table").unwrap().value;
    let sup = &model.params().by_name("label.super_table").unwrap().value;
    for i in 0..64 {
        assert_eq!(null.data()[i], sub.data()[20 * 64 + i] + sup.data()[4 * 64 + i]);
    }
    for s in 0..h.n_sub() {
        let e = model
            .embed_condition(&TieredCondition::full(s, &h), (true, true))
            .unwrap();
        assert!(e.data().iter().zip(null.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn dropping_the_superclass_swaps_one_row() {
    let model = Denoiser::new(&ModelConfig::default()).unwrap();
    let h = *model.hierarchy();
    let sup = &model.params().by_name("label.super_table").unwrap().value;
    let c = TieredCondition::full(13, &h);
    let kept = model.embed_condition(&c, (false, false)).unwrap();
    let dropped = model.embed_condition(&c, (false, true)).unwrap();
    for i in 0..64 {
        let diff = sup.data()[2 * 64 + i] - sup.data()[4 * 64 + i];
        assert!((kept.data()[i] - dropped.data()[i] - diff).abs() < 1e-15);
    }
}

#[test]
fn embedding_matches_direct_table_reads() {
    let model = Denoiser::new(&ModelConfig::default()).unwrap();
    let h = *model.hierarchy();
    let sub = &model.params().by_name("label.sub_table").unwrap().value;
    let sup = &model.params().by_name("label.super_table").unwrap().value;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let s = rng.random_range(0..h.n_sub());
        let e = model
            .embed_condition(&TieredCondition::full(s, &h), (false, false))
            .unwrap();
        let p = h.parent_of(s);
        for i in 0..64 {
            assert_eq!(e.data()[i], sub.data()[s * 64 + i] + sup.data()[p * 64 + i]);
        }
    }
}

#[test]
fn subclass_only_embedder_ignores_superclass() {
    let cfg = ModelConfig {
        embedder: EmbedderKind::SubclassOnly,
        ..ModelConfig::default()
    };
    let model = Denoiser::new(&cfg).unwrap();
    assert!(model.params().by_name("label.super_table").is_none());
    let h = *model.hierarchy();
    let c = TieredCondition::full(3, &h);
    let a = model.embed_condition(&c, (false, false)).unwrap();
    let b = model.embed_condition(&c, (false, true)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn forward_is_deterministic_and_batch_equivariant() {
    let mut model = Denoiser::new(&ModelConfig::default()).unwrap();
    randomise_output(&mut model, 3);
    let p = model.frozen();
    let (x, t, conds) = batch_inputs(&model, 4, 2);
    let y1 = model.predict(&p, &x, &t, &conds).unwrap();
    let y2 = model.predict(&p, &x, &t, &conds).unwrap();
    assert!(y1.data().iter().zip(y2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let perm = [2, 0, 3, 1];
    let plane = 32 * 32;
    let mut xp = Vec::new();
    for &i in &perm {
        xp.extend_from_slice(&x.data()[i * plane..(i + 1) * plane]);
    }
    let xp = Tensor::new(vec![4, 32, 32, 1], xp).unwrap();
    let tp: Vec<usize> = perm.iter().map(|&i| t[i]).collect();
    let cp: Vec<TieredCondition> = perm.iter().map(|&i| conds[i]).collect();
    let yp = model.predict(&p, &xp, &tp, &cp).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        let a = &yp.data()[k * plane..(k + 1) * plane];
        let b = &y1.data()[i * plane..(i + 1) * plane];
        assert!(a.iter().zip(b).all(|(u, v)| (u - v).abs() < 1e-12));
    }
}

#[test]
fn label_gradient_touches_only_used_rows() {
    let mut model = Denoiser::new(&small_config()).unwrap();
    randomise_output(&mut model, 8);
    let h = *model.hierarchy();
    let conds = vec![TieredCondition::full(1, &h), TieredCondition::full(4, &h).sub_only()];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::randn(vec![2, 16, 16, 1], &mut rng);
    let t = [10, 150];
    let table = model.params().iter().position(|p| p.name == "label.sub_table").unwrap();

    let loss = |m: &Denoiser, p: &Bound| -> f64 {
        let y = m.forward(p, &Var::constant(x.clone()), &t, &conds).unwrap();
        weighted_sum(&y, 1).unwrap().value().item().unwrap()
    };
    let tape = Tape::new();
    let p = model.bind(&tape);
    let y = model.forward(&p, &Var::constant(x.clone()), &t, &conds).unwrap();
    let grads = weighted_sum(&y, 1).unwrap().backward().unwrap();
    let g = grads.wrt(&p.vars()[table]);
    let d = 8;
    for row in 0..7 {
        let norm: f64 = g.data()[row * d..(row + 1) * d].iter().map(|v| v * v).sum();
        if row == 1 || row == 4 {
            assert!(norm > 0.0, "row {row} should receive gradient");
        } else {
            assert_eq!(norm, 0.0, "row {row} should be untouched");
        }
    }
    // Finite-difference spot check on the used rows.
    let h_step = 1e-5;
    for &(row, col) in &[(1usize, 0usize), (1, 5), (4, 3)] {
        let mut plus = model.clone();
        plus.params_mut().value_mut(table).data_mut()[row * d + col] += h_step;
        let mut minus = model.clone();
        minus.params_mut().value_mut(table).data_mut()[row * d + col] -= h_step;
        let fd = (loss(&plus, &plus.frozen()) - loss(&minus, &minus.frozen())) / (2.0 * h_step);
        let an = g.data()[row * d + col];
        assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{fd} vs {an}");
    }
}

#[test]
fn model_gradient_matches_finite_differences() {
    let mut model = Denoiser::new(&small_config()).unwrap();
    randomise_output(&mut model, 2);
    let h = *model.hierarchy();
    let conds = vec![TieredCondition::full(2, &h), TieredCondition::NULL];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::randn(vec![2, 16, 16, 1], &mut rng);
    let inputs: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    let err = max_relative_error(
        &inputs,
        |v| {
            let p = Bound::from_vars(v.to_vec());
            weighted_sum(&model.forward(&p, &Var::constant(x.clone()), &[5, 77], &conds)?, 3)
        },
        1e-5,
    );
    assert!(err < 1e-6, "relative error {err:e}");
}

#[test]
fn fused_attention_gradient_matches_finite_differences() {
    for (mode, seeds) in [("dense", 0..20u64), ("pro", 20..60)] {
        for seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (b, l, heads, dh) = (2, 16, 2, 3);
            let shape = vec![b, l, heads * dh];
            let inputs: Vec<Tensor> = (0..3).map(|_| Tensor::randn(shape.clone(), &mut rng)).collect();
            let (samples, u) = if mode == "dense" {
                (vec![vec![(0..l).collect::<Vec<_>>(); l]; heads], l)
            } else {
                let cfg = AttentionConfig::new(2.0, seed).unwrap();
                let s = (0..heads)
                    .map(|h| draw_samples(&cfg.with_seed(seed + h as u64), l, l))
                    .collect();
                (s, cfg.selected_count(l).0)
            };
            let err = max_relative_error(
                &inputs,
                |v| weighted_sum(&multi_head_attention(&v[0], &v[1], &v[2], heads, &samples, u)?, seed),
                1e-5,
            );
            assert!(err < 1e-6, "{mode} seed {seed}: {err:e}");
        }
    }
}

/// Element count of the default architecture, written out by hand.
fn expected_counts(cfg: &ModelConfig, tiered: bool) -> (usize, usize) {
    let d = cfg.d_model;
    let pdim = cfg.patch * cfg.patch * cfg.channels;
    let hidden = d * cfg.mlp_ratio;
    let (n_sub, n_super) = (cfg.n_super * cfg.subs_per_super, cfg.n_super);
    let tables = (n_sub + 1) * d + if tiered { (n_super + 1) * d } else { 0 };
    let block_w = 6 * d * d + 4 * d * d + d * hidden + hidden * d;
    let block_b = 6 * d + 4 * d + hidden + d;
    let block_norm = 4 * d;
    let weights = pdim * d + cfg.time_embed_dim * d + d * d + cfg.depth * block_w + 2 * d * d + d * pdim;
    let small = d + 2 * d + tables + cfg.depth * (block_b + block_norm) + 2 * d + 2 * d + pdim;
    (small, weights + small)
}

#[test]
fn finetune_ratio_matches_element_count() {
    for (kind, tiered) in [(EmbedderKind::Tiered, true), (EmbedderKind::SubclassOnly, false)] {
        let cfg = ModelConfig {
            embedder: kind,
            ..ModelConfig::default()
        };
        let model = Denoiser::new(&cfg).unwrap();
        let full = finetune_mask(model.params(), FinetuneMode::Full);
        assert_eq!(full.ratio(), 1.0);
        let set = finetune_mask(model.params(), FinetuneMode::BiasNormEmbed);
        let (small, total) = expected_counts(&cfg, tiered);
        assert_eq!(set.total_elements, total);
        assert_eq!(set.selected_elements, small);
        assert!(set.ratio() < 0.10);
        for (p, &m) in model.params().iter().zip(&set.mask) {
            assert_eq!(m, p.role != Role::Weight, "{}", p.name);
            if p.name.contains(".weight") {
                assert!(!m);
            }
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let mut model = Denoiser::new(&small_config()).unwrap();
    randomise_output(&mut model, 1);
    let bytes = model.params().to_bytes();
    let back = ModelParams::from_bytes(&bytes).unwrap();
    assert_eq!(back.len(), model.params().len());
    for (a, b) in back.iter().zip(model.params().iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.role, b.role);
        assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(back.to_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.efd");
    model.params().save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let mut other = Denoiser::new(&small_config()).unwrap();
    other.set_params(ModelParams::load(&path).unwrap()).unwrap();
    assert_eq!(other.params(), model.params());
}

#[test]
fn checkpoint_errors_name_the_offset() {
    let model = Denoiser::new(&small_config()).unwrap();
    let bytes = model.params().to_bytes();
    match ModelParams::from_bytes(&bytes[..bytes.len() - 3]) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len() as u64 - 3),
        other => panic!("expected format error, got {other:?}"),
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(ModelParams::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(ModelParams::from_bytes(&bad), Err(Error::Format { offset: 4, .. })));
    let mut long = bytes;
    long.push(0);
    assert!(matches!(ModelParams::from_bytes(&long), Err(Error::Format { .. })));
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let mut model = Denoiser::new(&small_config()).unwrap();
    let other = Denoiser::new(&ModelConfig::default()).unwrap();
    assert!(matches!(
        model.set_params(other.params().clone()),
        Err(Error::Dimension(_))
    ));
}
