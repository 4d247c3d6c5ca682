use super::*;
use crate::tensor::{finite_difference_check, Tape, Tensor};
use rand::Rng;

/// Small geometry that keeps gradient checks fast.
fn micro(family: ModelFamily) -> ModelConfig {
    let mut cfg = ModelConfig::tiny(family);
    cfg.image_h = 8;
    cfg.image_w = 8;
    cfg.channels = 2;
    cfg.patch_size = 2;
    cfg.layers = 1;
    cfg.hidden_dim = 8;
    cfg.heads = 2;
    cfg.classes = 3;
    cfg.norm_mean = vec![0.5; 2];
    cfg.norm_std = vec![0.5; 2];
    match family {
        ModelFamily::Cnn => cfg.stem_widths = vec![4, 6],
        ModelFamily::Hybrid => {
            cfg.stem_widths = vec![4];
            cfg.stem_strides = vec![2];
            cfg.patch_size = 2; // 8 -> 4 -> 2x2 tokens
        }
        ModelFamily::T2tVit => {
            cfg.t2t_stages = vec![SoftSplit { kernel: 3, stride: 2, padding: 1 }];
            cfg.t2t_dim = 6;
        }
        ModelFamily::Vit => {}
    }
    cfg
}

fn random_batch(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor {
    let mut rng = crate::rng::rng_from(seed, &[1]);
    let n = batch * cfg.channels * cfg.image_h * cfg.image_w;
    Tensor::from_vec(
        vec![batch, cfg.channels, cfg.image_h, cfg.image_w],
        (0..n).map(|_| rng.gen::<f64>()).collect(),
    )
}

#[test]
fn patch_counts() {
    let cfg = ModelConfig::tiny(ModelFamily::Vit);
    assert_eq!(cfg.token_count(), 64); // 32x32, P=4

    let mut single = cfg.clone();
    single.image_h = 4;
    single.image_w = 4;
    assert_eq!(single.token_count(), 1); // H = W = P

    let mut bad = cfg;
    bad.image_h = 30;
    assert!(matches!(bad.validate(), Err(ConfigError::Indivisible { .. })));
}

#[test]
fn init_is_deterministic_and_matches_manifest() {
    let cfg = micro(ModelFamily::Vit);
    let a = init_parameters(&cfg, 7);
    let b = init_parameters(&cfg, 7);
    assert!(a.bit_identical(&b));
    let c = init_parameters(&cfg, 8);
    assert!(!a.bit_identical(&c));
    a.matches_manifest(&cfg.parameter_manifest()).unwrap();
    // truncation really clips attention weights at 2 sigma
    for (name, t) in a.iter() {
        if name.contains("attn.w") {
            assert!(t.data().iter().all(|v| v.abs() <= 0.04 + 1e-12));
        }
    }
}

#[test]
fn forward_shapes_and_determinism() {
    for family in [ModelFamily::Vit, ModelFamily::Cnn, ModelFamily::Hybrid, ModelFamily::T2tVit] {
        let cfg = micro(family);
        cfg.validate().unwrap();
        let model = Model::new(cfg.clone(), 5).unwrap();
        let x = random_batch(&cfg, 2, 11);
        let a = model.logits(&x);
        assert_eq!(a.shape(), &[2, 3], "{family:?}");
        let b = model.logits(&x);
        assert!(
            a.data().iter().zip(b.data().iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
            "{family:?} forward not deterministic"
        );
    }
}

#[test]
fn attention_single_token_is_projection_of_v() {
    // T=1: the attention weight is exactly 1, so output = (v)·Wo + bo
    let cfg = micro(ModelFamily::Vit);
    let model = Model::new(cfg, 3).unwrap();
    let tape = Tape::new();
    let bound = BoundParams::bind(&tape, &model.params, false);
    let tokens = tape.leaf(
        &Tensor::from_vec(vec![1, 1, 8], (0..8).map(|i| i as f64 * 0.1).collect()),
        false,
    );
    let w = AttentionWeights::from_bound(&bound, "block0.attn");
    let got = multi_head_self_attention(&tokens, &w, 2);
    let v = tokens.matmul(w.wv).add(w.bv);
    let want = v.matmul(w.wo).add(w.bo);
    assert!(got.tensor().max_abs_diff(&want.tensor()) < 1e-12);
}

#[test]
fn attention_zero_queries_average_values() {
    // zero Wq/bq make QK' identically 0: uniform attention = mean of V rows
    let tape = Tape::new();
    let d = 4;
    let eye = Tensor::from_vec(
        vec![d, d],
        (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect(),
    );
    let zeros_m = Tensor::zeros(vec![d, d]);
    let zeros_v = Tensor::zeros(vec![d]);
    let w = AttentionWeights {
        wq: &tape.leaf(&zeros_m, false),
        bq: &tape.leaf(&zeros_v, false),
        wk: &tape.leaf(&eye, false),
        bk: &tape.leaf(&zeros_v, false),
        wv: &tape.leaf(&eye, false),
        bv: &tape.leaf(&zeros_v, false),
        wo: &tape.leaf(&eye, false),
        bo: &tape.leaf(&zeros_v, false),
    };
    let tokens = tape.leaf(
        &Tensor::from_vec(vec![1, 2, d], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]),
        false,
    );
    let out = multi_head_self_attention(&tokens, &w, 1).tensor();
    for j in 0..d {
        let mean = (tokens.tensor().data()[j] + tokens.tensor().data()[d + j]) / 2.0;
        assert!((out.data()[j] - mean).abs() < 1e-12);
        assert!((out.data()[d + j] - mean).abs() < 1e-12);
    }
}

#[test]
fn attention_two_token_hand_case() {
    // D=1 view of a 2-token, h=1 case, expanded by hand:
    // q = k = v = x (identity weights, D=2 with one informative dim)
    let tape = Tape::new();
    let d = 2;
    let eye = Tensor::from_vec(vec![d, d], vec![1.0, 0.0, 0.0, 1.0]);
    let zeros_v = Tensor::zeros(vec![d]);
    let w = AttentionWeights {
        wq: &tape.leaf(&eye, false),
        bq: &tape.leaf(&zeros_v, false),
        wk: &tape.leaf(&eye, false),
        bk: &tape.leaf(&zeros_v, false),
        wv: &tape.leaf(&eye, false),
        bv: &tape.leaf(&zeros_v, false),
        wo: &tape.leaf(&eye, false),
        bo: &tape.leaf(&zeros_v, false),
    };
    let (a, b) = (0.7, -0.3);
    let tokens = tape.leaf(&Tensor::from_vec(vec![1, 2, d], vec![a, 0.0, b, 0.0]), false);
    let out = multi_head_self_attention(&tokens, &w, 1).tensor();
    // scores row for token0: [a*a, a*b] / sqrt(2); softmax then mix a and b
    let s = (2.0f64).sqrt();
    let row = |q: f64| {
        let (e0, e1) = ((q * a / s).exp(), (q * b / s).exp());
        (e0 * a + e1 * b) / (e0 + e1)
    };
    assert!((out.data()[0] - row(a)).abs() < 1e-12);
    assert!((out.data()[2] - row(b)).abs() < 1e-12);
}

#[test]
fn zeroed_block_is_identity() {
    let cfg = micro(ModelFamily::Vit);
    let mut params = init_parameters(&cfg, 2);
    for name in [
        "block0.attn.wq",
        "block0.attn.wk",
        "block0.attn.wv",
        "block0.attn.wo",
        "block0.mlp.w1",
        "block0.mlp.w2",
    ] {
        let shape = params.get(name).shape().to_vec();
        params.set(name, Tensor::zeros(shape));
    }
    let tape = Tape::new();
    let bound = BoundParams::bind(&tape, &params, false);
    let tokens = tape.leaf(
        &Tensor::from_vec(vec![1, 3, 8], (0..24).map(|i| (i as f64).sin()).collect()),
        false,
    );
    let out = transformer_block(&tokens, &bound, "block0", 2);
    assert_eq!(out.tensor().data(), tokens.tensor().data());
}

#[test]
fn block_preserves_shape() {
    let cfg = micro(ModelFamily::Vit);
    let model = Model::new(cfg, 9).unwrap();
    let tape = Tape::new();
    let bound = BoundParams::bind(&tape, &model.params, false);
    let tokens = tape.leaf(&random_batch_tokens(2, 5, 8, 42), false);
    let out = transformer_block(&tokens, &bound, "block0", 2);
    assert_eq!(out.shape(), vec![2, 5, 8]);
}

fn random_batch_tokens(b: usize, t: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = crate::rng::rng_from(seed, &[2]);
    Tensor::from_vec(vec![b, t, d], (0..b * t * d).map(|_| rng.gen::<f64>() - 0.5).collect())
}

#[test]
fn vit_patch_permutation_invariance_with_zero_positions() {
    let cfg = micro(ModelFamily::Vit);
    let mut params = init_parameters(&cfg, 4);
    let pos_shape = params.get("pos_embed").shape().to_vec();
    params.set("pos_embed", Tensor::zeros(pos_shape));
    let model = Model { config: cfg.clone(), params };

    let x = random_batch(&cfg, 1, 21);
    let base = model.logits(&x);

    // swap two patch blocks of the input image
    let p = cfg.patch_size;
    let mut data = x.to_vec();
    let (h, w, c) = (cfg.image_h, cfg.image_w, cfg.channels);
    for ch in 0..c {
        for i in 0..p {
            for j in 0..p {
                let a = ch * h * w + i * w + j; // patch (0,0)
                let b = ch * h * w + (p + i) * w + (p + j); // patch (1,1)
                data.swap(a, b);
            }
        }
    }
    let permuted = model.logits(&Tensor::from_vec(x.shape().to_vec(), data));
    assert!(base.max_abs_diff(&permuted) < 1e-9);

    // control: with positions restored the permutation changes the logits
    let with_pos = Model::new(cfg, 4).unwrap();
    let base2 = with_pos.logits(&x);
    let perm2 = with_pos.logits(&Tensor::from_vec(x.shape().to_vec(), {
        let mut d2 = x.to_vec();
        for ch in 0..c {
            for i in 0..p {
                for j in 0..p {
                    let a = ch * h * w + i * w + j;
                    let b = ch * h * w + (p + i) * w + (p + j);
                    d2.swap(a, b);
                }
            }
        }
        d2
    }));
    assert!(base2.max_abs_diff(&perm2) > 1e-9);
}

#[test]
fn soft_split_geometry_and_patching_equivalence() {
    // 8x8 map, k=3, s=2, p=1 -> 4x4 = 16 tokens of length C*9
    let tape = Tape::new();
    let map = tape.leaf(&random_batch_tokens(1, 2, 64, 3).reshaped(vec![1, 2, 8, 8]), false);
    let tokens = t2t_soft_split(&map, SoftSplit { kernel: 3, stride: 2, padding: 1 });
    assert_eq!(tokens.shape(), vec![1, 16, 18]);

    // k=s=P, p=0 reduces to non-overlapping patch extraction
    let split = t2t_soft_split(&map, SoftSplit { kernel: 2, stride: 2, padding: 0 });
    assert_eq!(split.shape(), vec![1, 16, 8]);
    let m = map.tensor();
    // token (0,0) is the [C,2,2] corner block in channel-major order
    let split_t = split.tensor();
    let tok0 = &split_t.data()[0..8];
    let want = [
        m.data()[0],
        m.data()[1],
        m.data()[8],
        m.data()[9],
        m.data()[64],
        m.data()[65],
        m.data()[72],
        m.data()[73],
    ];
    assert_eq!(tok0, &want);
}

#[test]
fn cnn_zero_input_zero_biases_zero_logits() {
    let mut cfg = micro(ModelFamily::Cnn);
    cfg.norm_mean = vec![0.0; 2];
    cfg.norm_std = vec![1.0; 2];
    let model = Model::new(cfg.clone(), 6).unwrap();
    let x = Tensor::zeros(vec![1, 2, 8, 8]);
    let logits = model.logits(&x);
    assert_eq!(logits.shape(), &[1, 3]);
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn hybrid_geometry() {
    // stride product 4 on 32x32 with 1x1 patching: 8x8 = 64 tokens
    let mut cfg = ModelConfig::tiny(ModelFamily::Hybrid);
    assert_eq!(cfg.token_count(), 64);
    // identity-style stem (stride 1) with P-patching matches the vit geometry
    cfg.stem_strides = vec![1, 1];
    cfg.patch_size = 4;
    assert_eq!(cfg.token_count(), ModelConfig::tiny(ModelFamily::Vit).token_count());
}

#[test]
fn every_family_gradient_matches_finite_differences() {
    for family in [ModelFamily::Vit, ModelFamily::Cnn, ModelFamily::Hybrid, ModelFamily::T2tVit] {
        let cfg = micro(family);
        let model = Model::new(cfg.clone(), 13).unwrap();
        let x = random_batch(&cfg, 1, 31);
        let err = finite_difference_check(
            |v| {
                let bound = BoundParams::bind(&v.tape, &model.params, false);
                model.forward_bound(&bound, v).cross_entropy(&[1])
            },
            &x,
            // deep compositions push the fd noise floor above what h=1e-5
            // resolves; 1e-4 balances truncation against roundoff
            1e-4,
        );
        assert!(err < 1e-4, "{family:?}: relative error {err}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let cfg = micro(ModelFamily::T2tVit);
    let model = Model::new(cfg, 17).unwrap();
    model.save(&path, 17).unwrap();
    let loaded = Model::load(&path).unwrap();
    assert!(model.params.bit_identical(&loaded.params));
    assert_eq!(loaded.config.family, ModelFamily::T2tVit);
}

#[test]
fn checkpoint_rejects_bad_magic_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model = Model::new(micro(ModelFamily::Vit), 1).unwrap();
    model.save(&path, 1).unwrap();

    let bytes = std::fs::read(&path).unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"NOTACKPT").unwrap();
    assert!(matches!(Model::load(&bad), Err(checkpoint::CheckpointError::BadMagic)));

    let truncated = dir.path().join("short.ckpt");
    std::fs::write(&truncated, &bytes[..bytes.len() - 9]).unwrap();
    assert!(matches!(
        Model::load(&truncated),
        Err(checkpoint::CheckpointError::Truncated { .. })
    ));
}
