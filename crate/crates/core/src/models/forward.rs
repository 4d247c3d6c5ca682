//! Forward passes for every model family, built from tape primitives.

use super::{ModelConfig, ParameterSet, SoftSplit, LAYER_NORM_EPS};
use crate::tensor::{Tape, Tensor, Var};
use std::collections::HashMap;

/// A [`ParameterSet`] registered as leaves on one tape.
pub struct BoundParams {
    vars: Vec<(String, Var)>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn bind(tape: &Tape, params: &ParameterSet, trainable: bool) -> BoundParams {
        let mut vars = Vec::with_capacity(params.len());
        let mut index = HashMap::with_capacity(params.len());
        for (name, tensor) in params.iter() {
            index.insert(name.to_string(), vars.len());
            vars.push((name.to_string(), tape.leaf(tensor, trainable)));
        }
        BoundParams { vars, index }
    }

    pub fn get(&self, name: &str) -> &Var {
        let &i = self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("missing bound parameter {name:?}"));
        &self.vars[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), v))
    }
}

/// Per-channel (x - mean) / std with constants registered on the tape.
fn normalize(cfg: &ModelConfig, x: &Var) -> Var {
    let tape = &x.tape;
    let c = cfg.channels;
    let mean = tape.leaf(&Tensor::from_vec(vec![c, 1, 1], cfg.norm_mean.clone()), false);
    let std = tape.leaf(&Tensor::from_vec(vec![c, 1, 1], cfg.norm_std.clone()), false);
    x.sub(&mean).div(&std)
}

/// Non-overlapping P×P patches of a B×C×H×W map, embedded to width D:
/// a conv with kernel and stride both P, flattened to B×N×D.
pub fn patch_embed(x: &Var, weight: &Var, bias: &Var, patch: usize) -> Var {
    let xs = x.shape();
    assert_eq!(xs.len(), 4, "patch_embed: input must be B×C×H×W, got {xs:?}");
    assert!(
        xs[2] % patch == 0 && xs[3] % patch == 0,
        "patch_embed: extents {}x{} not divisible by patch size {patch}",
        xs[2],
        xs[3]
    );
    let fmap = x.conv2d(weight, patch, 0); // [B, D, H/P, W/P]
    let fs = fmap.shape();
    let (b, d, n) = (fs[0], fs[1], fs[2] * fs[3]);
    fmap.reshape(&[b, d, n]).permute(&[0, 2, 1]).add(bias)
}

pub struct AttentionWeights<'a> {
    pub wq: &'a Var,
    pub bq: &'a Var,
    pub wk: &'a Var,
    pub bk: &'a Var,
    pub wv: &'a Var,
    pub bv: &'a Var,
    pub wo: &'a Var,
    pub bo: &'a Var,
}

impl<'a> AttentionWeights<'a> {
    pub fn from_bound(bound: &'a BoundParams, prefix: &str) -> AttentionWeights<'a> {
        AttentionWeights {
            wq: bound.get(&format!("{prefix}.wq")),
            bq: bound.get(&format!("{prefix}.bq")),
            wk: bound.get(&format!("{prefix}.wk")),
            bk: bound.get(&format!("{prefix}.bk")),
            wv: bound.get(&format!("{prefix}.wv")),
            bv: bound.get(&format!("{prefix}.bv")),
            wo: bound.get(&format!("{prefix}.wo")),
            bo: bound.get(&format!("{prefix}.bo")),
        }
    }
}

/// Scaled dot-product attention over `heads` head splits of the hidden dim.
pub fn multi_head_self_attention(tokens: &Var, w: &AttentionWeights, heads: usize) -> Var {
    let shape = tokens.shape();
    assert_eq!(shape.len(), 3, "attention: tokens must be B×T×D, got {shape:?}");
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    assert!(d % heads == 0, "attention: hidden dim {d} not divisible by {heads} heads");
    let dh = d / heads;

    let split = |v: Var| v.reshape(&[b, t, heads, dh]).permute(&[0, 2, 1, 3]); // [B,h,T,dh]
    let q = split(tokens.matmul(w.wq).add(w.bq));
    let k = split(tokens.matmul(w.wk).add(w.bk));
    let v = split(tokens.matmul(w.wv).add(w.bv));

    let scores = q.matmul(&k.permute(&[0, 1, 3, 2])).mul_scalar(1.0 / (dh as f64).sqrt());
    let attn = scores.softmax(3); // [B,h,T,T]
    let ctx = attn.matmul(&v).permute(&[0, 2, 1, 3]).reshape(&[b, t, d]);
    ctx.matmul(w.wo).add(w.bo)
}

/// Pre-norm block: x + MSA(LN(x)), then x + MLP(LN(x)).
pub fn transformer_block(tokens: &Var, bound: &BoundParams, prefix: &str, heads: usize) -> Var {
    let n1g = bound.get(&format!("{prefix}.norm1.gamma"));
    let n1b = bound.get(&format!("{prefix}.norm1.beta"));
    let attn_w = AttentionWeights::from_bound(bound, &format!("{prefix}.attn"));
    let attended = multi_head_self_attention(
        &tokens.layer_norm(n1g, n1b, LAYER_NORM_EPS),
        &attn_w,
        heads,
    );
    let x = tokens.add(&attended);

    let n2g = bound.get(&format!("{prefix}.norm2.gamma"));
    let n2b = bound.get(&format!("{prefix}.norm2.beta"));
    let w1 = bound.get(&format!("{prefix}.mlp.w1"));
    let b1 = bound.get(&format!("{prefix}.mlp.b1"));
    let w2 = bound.get(&format!("{prefix}.mlp.w2"));
    let b2 = bound.get(&format!("{prefix}.mlp.b2"));
    let hidden = x.layer_norm(n2g, n2b, LAYER_NORM_EPS).matmul(w1).add(b1).gelu();
    x.add(&hidden.matmul(w2).add(b2))
}

/// CLS token, positional embeddings, L blocks, final norm, head on CLS.
fn transformer_trunk(cfg: &ModelConfig, bound: &BoundParams, tokens: Var) -> Var {
    let shape = tokens.shape();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let cls = bound.get("cls_token").broadcast_to(&[b, 1, d]);
    let mut x = Var::concat(&[cls, tokens], 1);
    let pos = bound.get("pos_embed");
    assert_eq!(
        pos.shape(),
        vec![1, n + 1, d],
        "pos_embed shape {:?} does not cover {} tokens",
        pos.shape(),
        n + 1
    );
    x = x.add(pos);
    for i in 0..cfg.layers {
        x = transformer_block(&x, bound, &format!("block{i}"), cfg.heads);
    }
    let x = x.layer_norm(bound.get("norm.gamma"), bound.get("norm.beta"), LAYER_NORM_EPS);
    let cls_out = x.slice(&[0..b, 0..1, 0..d]).reshape(&[b, d]);
    cls_out.matmul(bound.get("head.weight")).add(bound.get("head.bias"))
}

pub fn vit_forward(cfg: &ModelConfig, bound: &BoundParams, x: &Var) -> Var {
    let x = normalize(cfg, x);
    let tokens = patch_embed(
        &x,
        bound.get("patch_embed.weight"),
        bound.get("patch_embed.bias"),
        cfg.patch_size,
    );
    transformer_trunk(cfg, bound, tokens)
}

/// Conv stem, residual stages with stride-2 downsampling, global average
/// pool, linear head.
pub fn cnn_forward(cfg: &ModelConfig, bound: &BoundParams, x: &Var) -> Var {
    let pad = cfg.stem_kernel / 2;
    let x = normalize(cfg, x);
    let conv = |v: &Var, name: &str, stride: usize| -> Var {
        let w = bound.get(&format!("{name}.weight"));
        let bias = bound.get(&format!("{name}.bias"));
        let c_out = w.shape()[0];
        v.conv2d(w, stride, pad).add(&bias.reshape(&[c_out, 1, 1]))
    };
    let mut h = conv(&x, "stem", 1).relu();
    for i in 0..cfg.stem_widths.len() {
        if i > 0 {
            h = conv(&h, &format!("stage{i}.down"), 2).relu();
        }
        let r = conv(&h, &format!("stage{i}.conv1"), 1).relu();
        let r = conv(&r, &format!("stage{i}.conv2"), 1);
        h = h.add(&r).relu();
    }
    let pooled = h.mean_axes(&[2, 3], false); // [B, C]
    pooled.matmul(bound.get("head.weight")).add(bound.get("head.bias"))
}

/// Conv-stem feature map patched into tokens, then the ViT trunk.
pub fn hybrid_forward(cfg: &ModelConfig, bound: &BoundParams, x: &Var) -> Var {
    let pad = cfg.stem_kernel / 2;
    let mut h = normalize(cfg, x);
    for (i, &stride) in cfg.stem_strides.iter().enumerate() {
        let w = bound.get(&format!("stem{i}.weight"));
        let bias = bound.get(&format!("stem{i}.bias"));
        let c_out = w.shape()[0];
        h = h.conv2d(w, stride, pad).add(&bias.reshape(&[c_out, 1, 1])).relu();
    }
    let tokens = patch_embed(
        &h,
        bound.get("patch_embed.weight"),
        bound.get("patch_embed.bias"),
        cfg.patch_size,
    );
    transformer_trunk(cfg, bound, tokens)
}

/// Overlapping k×k unfold with stride s and padding p, flattened to
/// B×T×(C·k²) tokens. Each token is the [C, k, k] neighborhood in
/// channel-major order.
pub fn t2t_soft_split(map: &Var, split: SoftSplit) -> Var {
    let shape = map.shape();
    assert_eq!(shape.len(), 4, "t2t_soft_split: input must be B×C×H×W, got {shape:?}");
    let (b, c, k) = (shape[0], shape[1], split.kernel);
    // unfold as a conv with a constant one-hot kernel
    let mut kernel = vec![0.0; c * k * k * c * k * k];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let o = ch * k * k + ki * k + kj;
                kernel[((o * c + ch) * k + ki) * k + kj] = 1.0;
            }
        }
    }
    let kernel =
        map.tape.leaf(&Tensor::from_vec(vec![c * k * k, c, k, k], kernel), false);
    let unfolded = map.conv2d(&kernel, split.stride, split.padding); // [B, C·k², H'', W'']
    let us = unfolded.shape();
    let t = us[2] * us[3];
    unfolded.reshape(&[b, c * k * k, t]).permute(&[0, 2, 1])
}

/// Soft-split stages (each: unfold, project, one transformer layer, fold
/// back to a map), then per-position embedding and the ViT trunk.
pub fn t2t_vit_forward(cfg: &ModelConfig, bound: &BoundParams, x: &Var) -> Var {
    let mut map = normalize(cfg, x);
    let sd = cfg.t2t_dim;
    let (mut h, mut w) = (cfg.image_h, cfg.image_w);
    for (i, stage) in cfg.t2t_stages.iter().enumerate() {
        let tokens = t2t_soft_split(&map, *stage);
        let tokens = tokens
            .matmul(bound.get(&format!("t2t{i}.proj.weight")))
            .add(bound.get(&format!("t2t{i}.proj.bias")));
        // single-head attention keeps the stage dim free of head constraints
        let tokens = transformer_block(&tokens, bound, &format!("t2t{i}.block"), 1);
        h = stage.output_extent(h).expect("validated config");
        w = stage.output_extent(w).expect("validated config");
        let b = tokens.shape()[0];
        map = tokens.permute(&[0, 2, 1]).reshape(&[b, sd, h, w]);
    }
    let b = map.shape()[0];
    let tokens = map.reshape(&[b, sd, h * w]).permute(&[0, 2, 1]);
    let tokens = tokens.matmul(bound.get("embed.weight")).add(bound.get("embed.bias"));
    transformer_trunk(cfg, bound, tokens)
}
