use cryoprompt::backbone::*;
use cryoprompt::numerics::{ops, Graph, ParameterStore, Tensor};
use cryoprompt::prompts::{Strategy, StrategyKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(cfg: &BackboneConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[cfg.channels, cfg.image_height, cfg.image_width], |_| rng.gen())
}

fn zero(store: &mut ParameterStore, name: &str) {
    let t = store.get_mut(name).unwrap();
    t.data_mut().iter_mut().for_each(|v| *v = 0.0);
}

fn two_patch() -> BackboneConfig {
    BackboneConfig { image_height: 8, image_width: 16, layers: 1, ..BackboneConfig::micro() }
}

#[test]
fn micro_grid_has_sixteen_tokens() {
    let cfg = BackboneConfig::micro();
    let store = init_store(&cfg, 0).unwrap();
    let grid = Backbone::new(&cfg, &store).patch_embed(&random_image(&cfg, 1)).unwrap();
    assert_eq!((grid.rows, grid.cols), (4, 4));
    assert_eq!(grid.tokens.shape(), &[16, cfg.embed_dim]);
}

#[test]
fn zero_image_and_projection_give_positions() {
    let cfg = BackboneConfig::micro();
    let mut store = init_store(&cfg, 3).unwrap();
    zero(&mut store, "embed/proj");
    let img = Tensor::zeros(&[1, 32, 32]);
    let grid = Backbone::new(&cfg, &store).patch_embed(&img).unwrap();
    assert!(grid.tokens.bit_eq(store.get("embed/pos").unwrap()));
}

#[test]
fn swapping_patches_swaps_projection_terms_only() {
    let cfg = two_patch();
    let store = init_store(&cfg, 5).unwrap();
    let img = random_image(&cfg, 6);
    let mut swapped = img.clone();
    for r in 0..8 {
        for c in 0..8 {
            swapped.data_mut().swap(r * 16 + c, r * 16 + 8 + c);
        }
    }
    let bb = Backbone::new(&cfg, &store);
    let (a, b) = (bb.patch_embed(&img).unwrap().tokens, bb.patch_embed(&swapped).unwrap().tokens);
    let pos = store.get("embed/pos").unwrap().data();
    let d = cfg.embed_dim;
    for j in 0..d {
        let proj = |t: &Tensor, row: usize| t.data()[row * d + j] - pos[row * d + j];
        assert!((proj(&a, 0) - proj(&b, 1)).abs() < 1e-12);
        assert!((proj(&a, 1) - proj(&b, 0)).abs() < 1e-12);
    }
}

#[test]
fn layer_with_silent_branches_is_identity() {
    let cfg = BackboneConfig::micro();
    let mut store = init_store(&cfg, 2).unwrap();
    for n in ["attn/out/weight", "attn/out/bias", "mlp/fc2/weight", "mlp/fc2/bias"] {
        zero(&mut store, &format!("encoder/1/{n}"));
    }
    let bb = Backbone::new(&cfg, &store);
    let grid = bb.patch_embed(&random_image(&cfg, 4)).unwrap();
    let out = bb.vit_layer(&grid, 1).unwrap();
    assert_eq!(out.tokens.shape(), grid.tokens.shape());
    assert!(out.tokens.bit_eq(&grid.tokens));
}

fn gelu_t(t: &Tensor) -> Tensor {
    t.map(ops::gelu)
}

#[test]
fn single_token_layer_matches_closed_form() {
    let cfg = BackboneConfig::micro();
    let store = init_store(&cfg, 8).unwrap();
    let p = |n: &str| store.get(&format!("encoder/1/{n}")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::from_fn(&[1, cfg.embed_dim], |_| rng.gen_range(-1.0..1.0));

    // One key: the softmax weight is 1, so attention is out(v(LN₁ x)).
    let n1 = ops::layer_norm(&x, p("norm1/gamma"), p("norm1/beta"), LN_EPS).unwrap();
    let v = ops::linear(&n1, p("attn/v/weight"), Some(p("attn/v/bias"))).unwrap();
    let a = ops::linear(&v, p("attn/out/weight"), Some(p("attn/out/bias"))).unwrap();
    let x1 = Tensor::from_fn(x.shape(), |i| x.data()[i] + a.data()[i]);
    let n2 = ops::layer_norm(&x1, p("norm2/gamma"), p("norm2/beta"), LN_EPS).unwrap();
    let h = gelu_t(&ops::linear(&n2, p("mlp/fc1/weight"), Some(p("mlp/fc1/bias"))).unwrap());
    let m = ops::linear(&h, p("mlp/fc2/weight"), Some(p("mlp/fc2/bias"))).unwrap();
    let expected: Vec<f64> = x1.data().iter().zip(m.data()).map(|(a, b)| a + b).collect();

    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let lv = LayerVars::bind(&mut g, &store, &cfg, 1).unwrap();
    let out = vit_layer(&mut g, xv, &lv).unwrap();
    for (got, want) in g.value(out).data().iter().zip(&expected) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn one_layer_encoder_is_one_vit_layer() {
    let cfg = BackboneConfig { layers: 1, ..BackboneConfig::micro() };
    let store = init_store(&cfg, 1).unwrap();
    let bb = Backbone::new(&cfg, &store);
    let img = random_image(&cfg, 2);
    let direct = bb.vit_layer(&bb.patch_embed(&img).unwrap(), 1).unwrap();
    assert!(bb.encode_image(&img, &Unadapted).unwrap().tokens.bit_eq(&direct.tokens));
}

#[test]
fn two_layer_encoder_is_manual_composition() {
    let cfg = BackboneConfig::micro();
    let store = init_store(&cfg, 11).unwrap();
    let bb = Backbone::new(&cfg, &store);
    let img = random_image(&cfg, 12);
    let manual = bb.vit_layer(&bb.vit_layer(&bb.patch_embed(&img).unwrap(), 1).unwrap(), 2).unwrap();
    assert!(bb.encode_image(&img, &Unadapted).unwrap().tokens.bit_eq(&manual.tokens));
}

#[test]
fn hooks_at_no_depth_change_nothing() {
    let cfg = BackboneConfig::micro();
    let store = init_store(&cfg, 13).unwrap();
    let bb = Backbone::new(&cfg, &store);
    let img = random_image(&cfg, 14);
    for kind in [StrategyKind::Prefix, StrategyKind::Encoder] {
        let hooks = Strategy {
            kind,
            params: ParameterStore::new(),
            depths: Default::default(),
            alpha: 0.5,
            prefix_tokens: 4,
            adapter_dim: 4,
            head_channels: (4, 8),
        };
        let a = bb.encode_image(&img, &hooks).unwrap();
        let b = bb.encode_image(&img, &Unadapted).unwrap();
        assert!(a.tokens.bit_eq(&b.tokens));
    }
}

#[test]
fn two_way_block_keeps_counts_and_passes_through_without_attention() {
    let cfg = BackboneConfig::micro();
    let mut store = init_store(&cfg, 15).unwrap();
    let bb = Backbone::new(&cfg, &store);
    let grid = bb.patch_embed(&random_image(&cfg, 16)).unwrap();
    let prompt = bb.grid_prompt().unwrap();
    let (i, p) = bb.two_way_block(&grid, &prompt, 1).unwrap();
    assert_eq!(i.tokens.shape(), grid.tokens.shape());
    assert_eq!(p.shape(), prompt.shape());

    for dir in ["image_to_prompt", "prompt_to_image"] {
        for n in ["weight", "bias"] {
            zero(&mut store, &format!("decoder/1/{dir}/attn/out/{n}"));
        }
    }
    let bb = Backbone::new(&cfg, &store);
    let (i, p) = bb.two_way_block(&grid, &prompt, 1).unwrap();
    assert!(i.tokens.bit_eq(&grid.tokens));
    assert!(p.bit_eq(&prompt));
}

/// Single-head cross-attention written out with explicit loops.
fn hand_cross(x: &[Vec<f64>], ctx: &[Vec<f64>], store: &ParameterStore, p: &str) -> Vec<Vec<f64>> {
    let get = |n: &str| store.get(&format!("{p}/{n}")).unwrap().data().to_vec();
    let d = x[0].len();
    let norm = |v: &[f64], which: &str| -> Vec<f64> {
        let (gm, bt) = (get(&format!("{which}/gamma")), get(&format!("{which}/beta")));
        let mean = v.iter().sum::<f64>() / d as f64;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / d as f64;
        (0..d).map(|j| (v[j] - mean) / (var + LN_EPS).sqrt() * gm[j] + bt[j]).collect()
    };
    let aff = |v: &[f64], which: &str| -> Vec<f64> {
        let (w, b) = (get(&format!("attn/{which}/weight")), get(&format!("attn/{which}/bias")));
        (0..d).map(|o| b[o] + (0..d).map(|i| w[o * d + i] * v[i]).sum::<f64>()).collect()
    };
    let keys: Vec<Vec<f64>> = ctx.iter().map(|c| aff(&norm(c, "norm_kv"), "k")).collect();
    let vals: Vec<Vec<f64>> = ctx.iter().map(|c| aff(&norm(c, "norm_kv"), "v")).collect();
    x.iter()
        .map(|row| {
            let q = aff(&norm(row, "norm_q"), "q");
            let s: Vec<f64> = keys
                .iter()
                .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let mix: Vec<f64> = (0..d).map(|j| (0..vals.len()).map(|t| e[t] / z * vals[t][j]).sum()).collect();
            let o = aff(&mix, "out");
            row.iter().zip(&o).map(|(a, b)| a + b).collect()
        })
        .collect()
}

#[test]
fn two_token_block_matches_hand_mixtures() {
    let cfg = BackboneConfig { heads: 1, ..two_patch() };
    let store = init_store(&cfg, 17).unwrap();
    let bb = Backbone::new(&cfg, &store);
    let grid = bb.patch_embed(&random_image(&cfg, 18)).unwrap();
    let prompt = bb.grid_prompt().unwrap();
    let rows = |t: &Tensor| t.data().chunks(cfg.embed_dim).map(<[f64]>::to_vec).collect::<Vec<_>>();
    let img1 = hand_cross(&rows(&grid.tokens), &rows(&prompt), &store, "decoder/1/image_to_prompt");
    let prm1 = hand_cross(&rows(&prompt), &img1, &store, "decoder/1/prompt_to_image");
    let (i, p) = bb.two_way_block(&grid, &prompt, 1).unwrap();
    for (got, want) in rows(&i.tokens).iter().flatten().zip(img1.iter().flatten()) {
        assert!((got - want).abs() < 1e-12);
    }
    for (got, want) in rows(&p).iter().flatten().zip(prm1.iter().flatten()) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn constant_mask_head_gives_its_bias() {
    let cfg = BackboneConfig::micro();
    let mut store = init_store(&cfg, 19).unwrap();
    zero(&mut store, "decoder/head/fc2/weight");
    store.get_mut("decoder/head/fc2/bias").unwrap().data_mut()[0] = -0.75;
    let bb = Backbone::new(&cfg, &store);
    let enc = bb.encode_image(&random_image(&cfg, 20), &Unadapted).unwrap();
    let l = bb.decode_mask(&enc).unwrap();
    assert_eq!(l.shape(), &[32, 32]);
    assert!(l.data().iter().all(|&v| v == -0.75));
}

#[test]
fn logits_are_constant_on_each_patch() {
    let cfg = BackboneConfig::micro();
    let store = init_store(&cfg, 21).unwrap();
    let bb = Backbone::new(&cfg, &store);
    let l = bb.decode_mask(&bb.encode_image(&random_image(&cfg, 22), &Unadapted).unwrap()).unwrap();
    for r in 0..32 {
        for c in 0..32 {
            let corner = l.data()[(r / 8 * 8) * 32 + c / 8 * 8];
            assert_eq!(l.data()[r * 32 + c].to_bits(), corner.to_bits());
        }
    }
}

#[test]
fn forward_is_a_deterministic_probability_map() {
    let cfg = BackboneConfig::toy();
    let store = init_store(&cfg, 23).unwrap();
    let img = random_image(&cfg, 24);
    let a = forward(&cfg, &store, &img, &Unadapted).unwrap();
    let b = forward(&cfg, &store, &img, &Unadapted).unwrap();
    assert_eq!(a.shape(), &[64, 64]);
    assert!(a.bit_eq(&b));
    assert!(a.data().iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn parameter_counts() {
    assert_eq!(count_params(&ParameterStore::new(), false), 0);
    for cfg in [BackboneConfig::toy(), BackboneConfig::micro(), BackboneConfig::wide()] {
        let store = init_store(&cfg, 0).unwrap();
        assert_eq!(count_params(&store, false), cfg.param_count());
        assert_eq!(count_params(&store, true), cfg.param_count());
    }
}

#[test]
fn wrong_image_size_is_a_shape_error() {
    let cfg = BackboneConfig::micro();
    let store = init_store(&cfg, 0).unwrap();
    let err = forward(&cfg, &store, &Tensor::zeros(&[1, 16, 32]), &Unadapted).unwrap_err();
    assert!(matches!(err, cryoprompt::Error::Shape { .. }));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn probabilities_stay_inside_unit_interval(seed in 0u64..1000, scale in 0.1f64..20.0) {
        let cfg = BackboneConfig::micro();
        let store = init_store(&cfg, seed).unwrap();
        let img = random_image(&cfg, seed + 1).map(|v| v * scale);
        let p = forward(&cfg, &store, &img, &Unadapted).unwrap();
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
    }
}
