//! Fusion pyramid: channel uniformity, additive structure, query
//! interaction, early heads, and dense-prompt injection.

use irstd_core::backbone::{Encoder, EncoderConfig};
use irstd_core::fpn::{FusedPyramid, FusionConfig, FusionFpn, MaskPrediction, PredictionStage};
use irstd_core::graph::{check_grads, Graph};
use irstd_core::nn::ParamStore;
use irstd_core::query::{labels, DenseQueryMap};
use irstd_core::Error;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

fn tiny_setup(seed: u64) -> (ParamStore, Encoder, FusionFpn) {
    let mut store = ParamStore::new(seed);
    let cfg = EncoderConfig {
        stem_downsample: 1,
        stage_channels: [4, 5, 6, 8],
        stage_depths: [1, 1, 1, 1],
        input_channels: 1,
    };
    let enc = Encoder::new(&mut store, cfg).unwrap();
    let fpn = FusionFpn::new(
        &mut store,
        &cfg,
        FusionConfig {
            fusion_channels: 6,
            d: 8,
            heads: 2,
        },
    )
    .unwrap();
    (store, enc, fpn)
}

/// 1x1-identity lateral: copies channel k -> k for k < min(cin, cout).
fn identity_lateral(cin: usize, cout: usize) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(&[cout, cin, 1, 1]), |ix| {
        if ix[0] == ix[1] {
            1.0
        } else {
            0.0
        }
    })
}

/// 3x3-identity kernel: centre tap copies channel k -> k.
fn identity_smooth(c: usize) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(&[c, c, 3, 3]), |ix| {
        if ix[0] == ix[1] && ix[2] == 1 && ix[3] == 1 {
            1.0
        } else {
            0.0
        }
    })
}

#[test]
fn every_fused_level_has_the_fusion_width() {
    assert_eq!(FusionConfig::default().fusion_channels, 256);
    let (_store, enc, fpn) = tiny_setup(1);
    let mut g = Graph::new();
    let x = g.constant(randn(&[2, 1, 16, 16], 1));
    let pyr = enc.encode(&mut g, x).unwrap();
    let fused = fpn.tiny_forward(&mut g, &pyr).unwrap();
    let shapes = fused.shapes(&g);
    assert_eq!(shapes[0], vec![2, 6, 16, 16]);
    assert_eq!(shapes[1], vec![2, 6, 8, 8]);
    assert_eq!(shapes[2], vec![2, 6, 4, 4]);
    assert_eq!(shapes[3], vec![2, 6, 2, 2]);
    assert!(!fused.prompt_injected);
    assert_eq!(g.shape(fused.top()), &[2, 6, 16, 16]);
}

#[test]
fn zeroed_top_down_path_recovers_each_projected_stage() {
    // With identity-like laterals, an identity smoothing kernel, and all
    // deeper laterals zeroed, level i must equal stage i embedded in the
    // fusion width.
    let (store, enc, fpn) = tiny_setup(2);
    let chans = [4usize, 5, 6, 8];
    let f = 6usize;
    store
        .get("fpn.smooth.weight")
        .unwrap()
        .set_value(identity_smooth(f));
    for target in 0..4 {
        for i in 0..4 {
            let w = if i == target {
                identity_lateral(chans[i], f)
            } else {
                ArrayD::zeros(IxDyn(&[f, chans[i], 1, 1]))
            };
            store
                .get(&format!("fpn.lateral{}.weight", i + 1))
                .unwrap()
                .set_value(w);
        }
        let mut g = Graph::new();
        let x = g.constant(randn(&[1, 1, 16, 16], 3));
        let pyr = enc.encode(&mut g, x).unwrap();
        let fused = fpn.tiny_forward(&mut g, &pyr).unwrap();
        let stage = g.value(pyr.stages[target]).clone();
        let level = g.value(fused.levels[target]);
        let hs = stage.shape()[2];
        let ws = stage.shape()[3];
        for c in 0..f {
            for i in 0..hs {
                for j in 0..ws {
                    let expect = if c < chans[target] {
                        stage[IxDyn(&[0, c, i, j])]
                    } else {
                        0.0
                    };
                    let got = level[IxDyn(&[0, c, i, j])];
                    assert!(
                        (got - expect).abs() < 1e-12,
                        "level {target} ch {c} ({i},{j}): {got} vs {expect}"
                    );
                }
            }
        }
    }
}

#[test]
fn query_interaction_returns_eight_tokens_and_keeps_level_shapes() {
    let (_store, enc, fpn) = tiny_setup(4);
    let mut g = Graph::new();
    let x = g.constant(randn(&[2, 1, 16, 16], 5));
    let pyr = enc.encode(&mut g, x).unwrap();
    let qe = g.constant(randn(&[2, 4, 8], 6));
    let qf = g.constant(randn(&[2, 4, 8], 7));
    let (fused, q_all) = fpn.forward(&mut g, &pyr, qe, qf).unwrap();
    assert_eq!(g.shape(q_all), &[2, 8, 8]);
    let shapes = fused.shapes(&g);
    assert_eq!(shapes[0], vec![2, 6, 16, 16]);
    assert_eq!(shapes[3], vec![2, 6, 2, 2]);
    assert!(g.value(q_all).iter().all(|v| v.is_finite()));
    // Token count through the interaction is visible in the self-attention
    // multiply bucket: 2*b*n^2*d per level with n = 8, over 4 levels.
    let expect_n2d = 4 * 2 * 2 * 64 * 8u64;
    assert_eq!(g.counts().get(labels::N2D), expect_n2d);
    // Dimension mismatch is rejected.
    let bad = g.constant(randn(&[2, 4, 7], 8));
    assert!(matches!(
        fpn.forward(&mut g, &pyr, bad, qf),
        Err(Error::Shape(_))
    ));
}

#[test]
fn ablated_queries_reduce_to_the_tiny_pyramid() {
    let (store, enc, fpn) = tiny_setup(9);
    for p in store.params() {
        if p.name().starts_with("fpn.attn.") {
            p.set_value(ArrayD::zeros(IxDyn(p.shape().as_slice())));
        }
    }
    let x = randn(&[1, 1, 16, 16], 10);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pyr = enc.encode(&mut g, xv).unwrap();
    let plain = fpn.tiny_forward(&mut g, &pyr).unwrap();
    let qe = g.constant(randn(&[1, 4, 8], 11));
    let qf = g.constant(randn(&[1, 4, 8], 12));
    let (fused, q_all) = fpn.forward(&mut g, &pyr, qe, qf).unwrap();
    for i in 0..4 {
        assert_eq!(
            g.value(plain.levels[i]),
            g.value(fused.levels[i]),
            "level {} differs with zeroed interaction",
            i + 1
        );
    }
    // Tokens also pass through unchanged.
    let mut expect = randn(&[1, 4, 8], 11).into_raw_vec_and_offset().0;
    expect.extend(randn(&[1, 4, 8], 12).into_raw_vec_and_offset().0);
    let got = g.value(q_all).iter().copied().collect::<Vec<_>>();
    assert_eq!(got, expect);
}

#[test]
fn early_encoder_head_shape_and_zero_mlp_rule() {
    let (store, _enc, fpn) = tiny_setup(13);
    let mut g = Graph::new();
    let src = g.constant(randn(&[2, 4, 8, 8], 14));
    let dense = DenseQueryMap::init(&mut g, src);
    let qe = g.constant(randn(&[2, 4, 8], 15));
    let pred = fpn.early_decode_encoder(&mut g, &dense, qe).unwrap();
    assert_eq!(g.shape(pred.logits), &[2, 1, 8, 8]);
    assert_eq!(pred.stage, PredictionStage::EarlyEncoder);
    assert_eq!(pred.threshold, 0.0);
    assert_eq!(pred.resolution(&g), (8, 8));
    // Zero MLP output -> all-zero logits (probability one half everywhere).
    for name in ["fpn.early_encoder.mlp.lin2.weight", "fpn.early_encoder.mlp.lin2.bias"] {
        let p = store.get(name).unwrap();
        p.set_value(ArrayD::zeros(IxDyn(p.shape().as_slice())));
    }
    let pred0 = fpn.early_decode_encoder(&mut g, &dense, qe).unwrap();
    assert!(g.value(pred0.logits).iter().all(|&v| v == 0.0));
    // Channel-count mismatch is rejected.
    let wrong = g.constant(randn(&[2, 5, 8, 8], 16));
    let dw = DenseQueryMap::init(&mut g, wrong);
    assert!(matches!(
        fpn.early_decode_encoder(&mut g, &dw, qe),
        Err(Error::Shape(_))
    ));
}

#[test]
fn early_fpn_head_computes_per_location_inner_products() {
    let (store, _enc, fpn) = tiny_setup(17);
    let f = 6usize;
    let v: Vec<f64> = (0..f).map(|k| 0.3 * (k as f64) - 0.7).collect();
    // Force the MLP output to exactly v…
    let lw = store.get("fpn.early_fpn.mlp.lin2.weight").unwrap();
    lw.set_value(ArrayD::zeros(IxDyn(lw.shape().as_slice())));
    store
        .get("fpn.early_fpn.mlp.lin2.bias")
        .unwrap()
        .set_value(ArrayD::from_shape_vec(IxDyn(&[f]), v.clone()).unwrap());
    // …and make every feature row of the top level equal v as well.
    let mut g = Graph::new();
    let top = g.constant(ArrayD::from_shape_fn(IxDyn(&[1, f, 3, 4]), |ix| v[ix[1]]));
    let rest = [
        g.constant(ArrayD::zeros(IxDyn(&[1, f, 2, 2]))),
        g.constant(ArrayD::zeros(IxDyn(&[1, f, 1, 1]))),
        g.constant(ArrayD::zeros(IxDyn(&[1, f, 1, 1]))),
    ];
    let fused = FusedPyramid {
        levels: [top, rest[0], rest[1], rest[2]],
        prompt_injected: false,
    };
    let qf = g.constant(randn(&[1, 4, 8], 18));
    let pred = fpn.early_decode_fpn(&mut g, &fused, qf).unwrap();
    assert_eq!(pred.stage, PredictionStage::EarlyFpn);
    let self_ip: f64 = v.iter().map(|x| x * x).sum();
    for val in g.value(pred.logits).iter() {
        assert!((val - self_ip).abs() < 1e-12, "{val} vs {self_ip}");
    }
}

#[test]
fn early_head_gradient_matches_finite_differences() {
    let (mut store, _enc, fpn) = tiny_setup(19);
    let tokens = store.make("test.tokens", &[4, 8], irstd_core::nn::Init::Normal(0.5));
    let map = randn(&[1, 4, 6, 6], 20);
    let build = |g: &mut Graph| {
        let src = g.constant(map.clone());
        let dense = DenseQueryMap::init(g, src);
        let t = g.param(&tokens);
        let q = g.broadcast_batch(t, 1);
        let pred = fpn.early_decode_encoder(g, &dense, q).unwrap();
        g.mean_all(pred.logits)
    };
    check_grads(&build, &[&tokens], 1e-5, 1e-5);
}

#[test]
fn prompt_injection_sets_the_flag_and_rejects_misuse() {
    let (_store, enc, fpn) = tiny_setup(21);
    let mut g = Graph::new();
    let x = g.constant(randn(&[1, 1, 16, 16], 22));
    let pyr = enc.encode(&mut g, x).unwrap();
    let qe = g.constant(randn(&[1, 4, 8], 23));
    let qf = g.constant(randn(&[1, 4, 8], 24));
    let (fused, q_all) = fpn.forward(&mut g, &pyr, qe, qf).unwrap();
    let q_fpn = g.narrow(q_all, 1, 4, 4);
    let pred = fpn.early_decode_fpn(&mut g, &fused, q_fpn).unwrap();
    let before = fused.shapes(&g);
    let injected = fpn.inject_dense_prompt(&mut g, &pred, fused).unwrap();
    assert!(injected.prompt_injected);
    assert_eq!(injected.shapes(&g), before);
    for l in &injected.levels {
        assert!(g.value(*l).iter().all(|v| v.is_finite()));
    }
    // Double injection is an error.
    assert!(matches!(
        fpn.inject_dense_prompt(&mut g, &pred, injected),
        Err(Error::Config(_))
    ));
    // Wrong-stage prediction is an error.
    let (fused2, _) = fpn.forward(&mut g, &pyr, qe, qf).unwrap();
    let src = g.constant(randn(&[1, 4, 16, 16], 25));
    let dense = DenseQueryMap::init(&mut g, src);
    let enc_pred = fpn.early_decode_encoder(&mut g, &dense, qe).unwrap();
    assert!(matches!(
        fpn.inject_dense_prompt(&mut g, &enc_pred, fused2),
        Err(Error::Config(_))
    ));
}

#[test]
fn zero_prediction_with_zero_bias_block_is_an_additive_identity() {
    let (_store, enc, fpn) = tiny_setup(26);
    let mut g = Graph::new();
    let x = g.constant(randn(&[1, 1, 16, 16], 27));
    let pyr = enc.encode(&mut g, x).unwrap();
    let fused = fpn.tiny_forward(&mut g, &pyr).unwrap();
    let before: Vec<_> = fused.levels.iter().map(|&l| g.value(l).clone()).collect();
    let zeros = g.constant(ArrayD::zeros(IxDyn(&[1, 1, 16, 16])));
    let pred = MaskPrediction::new(&g, zeros, PredictionStage::EarlyFpn).unwrap();
    let injected = fpn.inject_dense_prompt(&mut g, &pred, fused).unwrap();
    for (i, l) in injected.levels.iter().enumerate() {
        assert_eq!(g.value(*l), &before[i], "level {} moved", i + 1);
    }
}

#[test]
fn mask_predictions_validate_and_binarize() {
    let mut g = Graph::new();
    let neg = g.constant(ArrayD::from_elem(IxDyn(&[1, 1, 4, 4]), -5.0));
    let pos = g.constant(ArrayD::from_elem(IxDyn(&[1, 1, 4, 4]), 5.0));
    let p_neg = MaskPrediction::new(&g, neg, PredictionStage::Final).unwrap();
    let p_pos = MaskPrediction::new(&g, pos, PredictionStage::Final).unwrap();
    assert!(p_neg.binarize(&g)[0].iter().all(|&m| !m));
    assert!(p_pos.binarize(&g)[0].iter().all(|&m| m));
    // Higher threshold selects a subset.
    let mixed = g.constant(randn(&[2, 1, 5, 5], 1));
    let mut p = MaskPrediction::new(&g, mixed, PredictionStage::Final).unwrap();
    let low = p.binarize(&g);
    p.threshold = 0.4;
    let high = p.binarize(&g);
    for (lo, hi) in low.iter().zip(&high) {
        for (a, b) in lo.iter().zip(hi.iter()) {
            assert!(*a || !*b, "high-threshold mask not a subset");
        }
    }
    // Non-finite logits and wrong shapes are rejected.
    let nan = g.constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), f64::NAN));
    assert!(matches!(
        MaskPrediction::new(&g, nan, PredictionStage::Final),
        Err(Error::Training(_))
    ));
    let two_ch = g.constant(ArrayD::zeros(IxDyn(&[1, 2, 4, 4])));
    assert!(matches!(
        MaskPrediction::new(&g, two_ch, PredictionStage::Final),
        Err(Error::Shape(_))
    ));
}

#[test]
fn nearest_resize_picks_centre_aligned_pixels() {
    let mut g = Graph::new();
    let x = g.constant(ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 4]), |ix| {
        (ix[2] * 4 + ix[3]) as f64
    }));
    let y = g.nearest_resize(x, 2, 2);
    // Half-pixel centres of a 2x2 grid over a 4x4 source pick rows/cols 1,3.
    let v = g.value(y);
    assert_eq!(v[IxDyn(&[0, 0, 0, 0])], 5.0);
    assert_eq!(v[IxDyn(&[0, 0, 0, 1])], 7.0);
    assert_eq!(v[IxDyn(&[0, 0, 1, 0])], 13.0);
    assert_eq!(v[IxDyn(&[0, 0, 1, 1])], 15.0);
    // Identity when the target size matches.
    let same = g.nearest_resize(x, 4, 4);
    assert_eq!(g.value(same), g.value(x));
    // Gather is differentiable (pure scatter-add in reverse).
    let mut store = ParamStore::new(1);
    let p = store.make("t", &[1, 1, 4, 4], irstd_core::nn::Init::Normal(1.0));
    let build = |g: &mut Graph| {
        let xp = g.param(&p);
        let y = g.nearest_resize(xp, 3, 5);
        g.mean_all(y)
    };
    check_grads(&build, &[&p], 1e-5, 1e-9);
}

#[test]
fn fusion_config_validation() {
    assert!(FusionConfig::default().validate().is_ok());
    assert!(FusionConfig {
        fusion_channels: 0,
        d: 8,
        heads: 2
    }
    .validate()
    .is_err());
    assert!(FusionConfig {
        fusion_channels: 8,
        d: 9,
        heads: 2
    }
    .validate()
    .is_err());
}
