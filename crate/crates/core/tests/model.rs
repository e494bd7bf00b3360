use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use waveformer::autograd::{GeluKind, Tensor};
use waveformer::model::{
    forward_tokens, init_params, loss_and_gradients, loss_only, random_input, ForwardInput, ForwardOptions,
    ModelConfig, ModelParams, PositionalKind,
};

fn input<'a>(tokens: &'a Tensor, wide: &'a [f64], cfg: &ModelConfig) -> ForwardInput<'a> {
    ForwardInput {
        tokens,
        wide,
        pad_start: cfg.window_samples,
    }
}

fn perturbed(cfg: &ModelConfig, seed: u64, scale: f64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_params(cfg, seed)
        .unwrap()
        .try_map(|name, t| {
            let data = t
                .data()
                .iter()
                .map(|&v| {
                    let r: f64 = rng.random_range(-scale..scale);
                    if name.ends_with(".gain") {
                        v + r
                    } else {
                        r
                    }
                })
                .collect();
            Tensor::new(t.shape().to_vec(), data)
        })
        .unwrap()
}

/// Central differences on every `stride`-th scalar parameter.
fn worst_gradient_error(cfg: &ModelConfig, opts: &ForwardOptions, pad_start: usize, stride: usize) -> f64 {
    let params = perturbed(cfg, 21, 0.4);
    let (tokens, wide) = random_input(cfg, 8);
    let inp = ForwardInput {
        tokens: &tokens,
        wide: &wide,
        pad_start,
    };
    let targets: Vec<f64> = (0..cfg.d_class).map(|c| ((c + 1) % 2) as f64).collect();
    let (_, grads) = loss_and_gradients(&params, &inp, &targets, cfg, opts).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut flat = 0usize;
    for (pi, g) in grads.values().iter().enumerate() {
        for k in 0..g.numel() {
            flat += 1;
            if !flat.is_multiple_of(stride) {
                continue;
            }
            let shifted = |d: f64| {
                let mut p = params.clone();
                let mut vals = p.values_mut();
                let mut data = vals[pi].data().to_vec();
                data[k] += d;
                *vals[pi] = Tensor::new(vals[pi].shape().to_vec(), data).unwrap();
                loss_only(&p, &inp, &targets, cfg, opts).unwrap()
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            let a = g.data()[k];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences_across_variants() {
    let variants = [
        ModelConfig {
            gelu: GeluKind::Erf,
            ..ModelConfig::toy()
        },
        ModelConfig {
            positional: PositionalKind::Sinusoidal,
            ..ModelConfig::toy()
        },
        ModelConfig {
            mask_padding: true,
            ..ModelConfig::toy()
        },
    ];
    for cfg in variants {
        let err = worst_gradient_error(&cfg, &ForwardOptions::train(5), 6, 7);
        assert!(err < 1e-4, "{cfg:?}: {err}");
        let err = worst_gradient_error(&cfg, &ForwardOptions::eval(), 6, 7);
        assert!(err < 1e-4, "{cfg:?} eval: {err}");
    }
}

#[test]
fn class_output_is_invariant_to_patch_order_with_positions_carried_along() {
    let cfg = ModelConfig {
        window_samples: 20,
        ..ModelConfig::toy()
    };
    let params = perturbed(&cfg, 2, 0.3);
    let (tokens, wide) = random_input(&cfg, 4);
    let n = cfg.num_patches();
    let width = cfg.token_width();
    let perm = [3usize, 0, 4, 1, 2];
    assert_eq!(perm.len(), n);
    let mut shuffled_tokens = vec![0.0; n * width];
    for (dst, &src) in perm.iter().enumerate() {
        shuffled_tokens[dst * width..(dst + 1) * width].copy_from_slice(&tokens.data()[src * width..(src + 1) * width]);
    }
    let shuffled_tokens = Tensor::new(vec![n, width], shuffled_tokens).unwrap();
    let mut shuffled = params.clone();
    let pos = params.positional.as_ref().unwrap();
    let d = cfg.d_model;
    let mut pos_data = pos.data().to_vec();
    for (dst, &src) in perm.iter().enumerate() {
        pos_data[(dst + 1) * d..(dst + 2) * d].copy_from_slice(&pos.data()[(src + 1) * d..(src + 2) * d]);
    }
    shuffled.positional = Some(Tensor::new(pos.shape().to_vec(), pos_data).unwrap());

    let a = forward_tokens(&params, &input(&tokens, &wide, &cfg), &cfg, &ForwardOptions::eval()).unwrap();
    let b = forward_tokens(&shuffled, &input(&shuffled_tokens, &wide, &cfg), &cfg, &ForwardOptions::eval()).unwrap();
    for (x, y) in a.logits.iter().zip(&b.logits) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = ModelConfig::toy();
    let params = perturbed(&cfg, 9, 0.5);
    let (tokens, wide) = random_input(&cfg, 1);
    let opts = ForwardOptions {
        capture_attention: true,
        ..ForwardOptions::eval()
    };
    let out = forward_tokens(&params, &input(&tokens, &wide, &cfg), &cfg, &opts).unwrap();
    let maps = out.attention_maps.unwrap();
    assert_eq!(maps.len(), cfg.num_layers);
    for m in &maps {
        assert_eq!(m.shape(), &[cfg.num_heads, cfg.seq_len(), cfg.seq_len()]);
        for row in m.data().chunks(cfg.seq_len()) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn eval_is_deterministic_and_train_depends_on_seed() {
    let cfg = ModelConfig::toy();
    let params = perturbed(&cfg, 3, 0.3);
    let (tokens, wide) = random_input(&cfg, 2);
    let inp = input(&tokens, &wide, &cfg);
    let e1 = forward_tokens(&params, &inp, &cfg, &ForwardOptions::eval()).unwrap();
    let e2 = forward_tokens(&params, &inp, &cfg, &ForwardOptions::eval()).unwrap();
    assert_eq!(e1.probabilities, e2.probabilities);
    let t1 = forward_tokens(&params, &inp, &cfg, &ForwardOptions::train(1)).unwrap();
    let t1b = forward_tokens(&params, &inp, &cfg, &ForwardOptions::train(1)).unwrap();
    let t2 = forward_tokens(&params, &inp, &cfg, &ForwardOptions::train(2)).unwrap();
    assert_eq!(t1.probabilities, t1b.probabilities);
    assert_ne!(t1.probabilities, t2.probabilities);
    assert_ne!(t1.probabilities, e1.probabilities);
}

#[test]
fn padding_mask_changes_logits_only_when_enabled() {
    let plain = ModelConfig::toy();
    let masked = ModelConfig {
        mask_padding: true,
        ..ModelConfig::toy()
    };
    let params = perturbed(&plain, 6, 0.4);
    let (tokens, wide) = random_input(&plain, 3);
    let run = |cfg: &ModelConfig, pad_start: usize| {
        let inp = ForwardInput {
            tokens: &tokens,
            wide: &wide,
            pad_start,
        };
        forward_tokens(&params, &inp, cfg, &ForwardOptions::eval()).unwrap().logits
    };
    assert_eq!(run(&plain, 4), run(&plain, 12));
    assert_ne!(run(&masked, 4), run(&masked, 12));
    // A partially padded patch is still attended to.
    assert_eq!(run(&masked, 9), run(&masked, 12));
}

#[test]
fn truncated_normal_init_has_expected_spread() {
    let cfg = ModelConfig {
        d_model: 64,
        d_ff: 64,
        num_heads: 4,
        num_layers: 2,
        ..ModelConfig::toy()
    };
    let params = init_params(&cfg, 17).unwrap();
    let names = params.names();
    let mut weights = Vec::new();
    for (name, t) in names.iter().zip(params.values()) {
        if name.ends_with(".bias") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        } else if name.ends_with(".gain") {
            assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
        } else {
            weights.extend_from_slice(t.data());
        }
    }
    let sigma = 0.02;
    assert!(weights.iter().all(|w| w.abs() <= 2.0 * sigma));
    // Standard deviation of N(0, sigma) truncated to +-2 sigma.
    let phi2 = (-2.0f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mass = 0.954_499_736_103_641_6;
    let expected = sigma * (1.0 - 2.0 * 2.0 * phi2 / mass).sqrt();
    let n = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / n;
    let sd = (weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 5e-4, "{mean}");
    assert!((sd / expected - 1.0).abs() < 0.02, "{sd} vs {expected}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn parameter_count_matches_allocated_tensors(
        leads in 1usize..4,
        d_patch in 1usize..5,
        patches in 1usize..5,
        heads in 1usize..4,
        head_dim in 1usize..4,
        layers in 1usize..3,
        d_ff in 1usize..9,
        d_deep in 1usize..6,
        d_wide in 1usize..4,
        d_class in 1usize..5,
        sinusoidal in any::<bool>(),
    ) {
        let cfg = ModelConfig {
            num_leads: leads,
            d_patch,
            window_samples: d_patch * patches,
            num_heads: heads,
            d_model: heads * head_dim,
            num_layers: layers,
            d_ff,
            d_deep,
            d_wide,
            d_class,
            positional: if sinusoidal { PositionalKind::Sinusoidal } else { PositionalKind::Learned },
            ..ModelConfig::toy()
        };
        let params = init_params(&cfg, 0).unwrap();
        let allocated: usize = params.values().iter().map(|t| t.numel()).sum();
        prop_assert_eq!(cfg.parameter_count(), allocated);
        let (tokens, wide) = random_input(&cfg, 1);
        let out = forward_tokens(&params, &input(&tokens, &wide, &cfg), &cfg, &ForwardOptions::eval()).unwrap();
        prop_assert_eq!(out.probabilities.len(), d_class);
    }
}
