//! Toy-scale classifier zoo: ViT, CNN, CNN-ViT hybrid, and a simplified
//! two-stage T2T-ViT.
//!
//! All families share one parameter-naming manifest per config, a binary
//! checkpoint format, and a common forward entry point. Per-channel input
//! normalization lives inside the model so attacks operate in raw [0,1]
//! pixel space and the radius is comparable across families.

pub mod checkpoint;
mod forward;
mod init;
mod params;

pub use forward::{
    cnn_forward, hybrid_forward, multi_head_self_attention, patch_embed, t2t_soft_split,
    t2t_vit_forward, transformer_block, vit_forward, AttentionWeights, BoundParams,
};
pub use init::init_parameters;
pub use params::ParameterSet;

use crate::tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Vit,
    Cnn,
    Hybrid,
    T2tVit,
}

/// One soft-split (overlapping unfold) stage of the T2T pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftSplit {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl SoftSplit {
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: ModelFamily,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    /// Patch extent: on the image for vit, on the stem feature map for hybrid.
    pub patch_size: usize,
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    /// Soft-split stages (t2t_vit only).
    #[serde(default)]
    pub t2t_stages: Vec<SoftSplit>,
    /// Token width inside the T2T stages.
    #[serde(default)]
    pub t2t_dim: usize,
    /// Channel widths of the conv stem (cnn: one residual stage per width;
    /// hybrid: one stem conv per width).
    #[serde(default)]
    pub stem_widths: Vec<usize>,
    /// Per-conv strides of the hybrid stem.
    #[serde(default)]
    pub stem_strides: Vec<usize>,
    /// Hybrid stem kernel extent.
    #[serde(default = "default_stem_kernel")]
    pub stem_kernel: usize,
    /// Per-channel input normalization applied inside the forward pass.
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
}

fn default_stem_kernel() -> usize {
    3
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("image {h}x{w} not divisible by patch size {p}")]
    Indivisible { h: usize, w: usize, p: usize },
    #[error("hidden dim {d} not divisible by {h} heads")]
    HeadSplit { d: usize, h: usize },
    #[error("{0}")]
    Invalid(String),
}

impl ModelConfig {
    /// Desk-scale defaults per family on 32x32x3 inputs, 10 classes.
    pub fn tiny(family: ModelFamily) -> ModelConfig {
        let mut cfg = ModelConfig {
            family,
            image_h: 32,
            image_w: 32,
            channels: 3,
            patch_size: 4,
            layers: 2,
            hidden_dim: 64,
            heads: 4,
            mlp_ratio: 2,
            classes: 10,
            t2t_stages: vec![],
            t2t_dim: 0,
            stem_widths: vec![],
            stem_strides: vec![],
            stem_kernel: 3,
            norm_mean: vec![0.5; 3],
            norm_std: vec![0.5; 3],
        };
        match family {
            ModelFamily::Vit => {}
            ModelFamily::Cnn => {
                cfg.stem_widths = vec![16, 32];
            }
            ModelFamily::Hybrid => {
                cfg.stem_widths = vec![16, 32];
                cfg.stem_strides = vec![2, 2];
                cfg.patch_size = 1;
            }
            ModelFamily::T2tVit => {
                cfg.t2t_stages = vec![
                    SoftSplit { kernel: 7, stride: 4, padding: 2 },
                    SoftSplit { kernel: 3, stride: 2, padding: 1 },
                ];
                cfg.t2t_dim = 32;
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.classes == 0 || self.image_h == 0 || self.image_w == 0 || self.channels == 0 {
            return Err(ConfigError::Invalid("empty image or class count".into()));
        }
        if self.norm_mean.len() != self.channels || self.norm_std.len() != self.channels {
            return Err(ConfigError::Invalid(format!(
                "normalization constants must have one entry per channel ({})",
                self.channels
            )));
        }
        if self.norm_std.iter().any(|&s| s <= 0.0) {
            return Err(ConfigError::Invalid("normalization std must be positive".into()));
        }
        match self.family {
            ModelFamily::Vit => {
                self.check_transformer()?;
                if self.image_h % self.patch_size != 0 || self.image_w % self.patch_size != 0 {
                    return Err(ConfigError::Indivisible {
                        h: self.image_h,
                        w: self.image_w,
                        p: self.patch_size,
                    });
                }
            }
            ModelFamily::Cnn => {
                if self.stem_widths.is_empty() {
                    return Err(ConfigError::Invalid("cnn needs at least one stem width".into()));
                }
            }
            ModelFamily::Hybrid => {
                self.check_transformer()?;
                if self.stem_widths.is_empty()
                    || self.stem_widths.len() != self.stem_strides.len()
                {
                    return Err(ConfigError::Invalid(
                        "hybrid stem widths and strides must be non-empty and equal length".into(),
                    ));
                }
                let (fh, fw) = self.stem_output_extents()?;
                if fh % self.patch_size != 0 || fw % self.patch_size != 0 {
                    return Err(ConfigError::Indivisible { h: fh, w: fw, p: self.patch_size });
                }
            }
            ModelFamily::T2tVit => {
                self.check_transformer()?;
                if self.t2t_stages.is_empty() || self.t2t_dim == 0 {
                    return Err(ConfigError::Invalid(
                        "t2t_vit needs soft-split stages and a stage dim".into(),
                    ));
                }
                let _ = self.t2t_final_extents()?;
            }
        }
        Ok(())
    }

    fn check_transformer(&self) -> Result<(), ConfigError> {
        if self.hidden_dim % self.heads != 0 {
            return Err(ConfigError::HeadSplit { d: self.hidden_dim, h: self.heads });
        }
        if self.layers == 0 || self.mlp_ratio == 0 {
            return Err(ConfigError::Invalid("layers and mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn stem_output_extents(&self) -> Result<(usize, usize), ConfigError> {
        let (mut h, mut w) = (self.image_h, self.image_w);
        for &s in &self.stem_strides {
            if s == 0 {
                return Err(ConfigError::Invalid("stem stride must be >= 1".into()));
            }
            // stride-s conv with same padding
            h = h.div_ceil(s);
            w = w.div_ceil(s);
        }
        Ok((h, w))
    }

    pub fn t2t_final_extents(&self) -> Result<(usize, usize), ConfigError> {
        let (mut h, mut w) = (self.image_h, self.image_w);
        for (i, stage) in self.t2t_stages.iter().enumerate() {
            h = stage.output_extent(h).ok_or_else(|| {
                ConfigError::Invalid(format!("t2t stage {i}: kernel exceeds padded map"))
            })?;
            w = stage.output_extent(w).ok_or_else(|| {
                ConfigError::Invalid(format!("t2t stage {i}: kernel exceeds padded map"))
            })?;
        }
        Ok((h, w))
    }

    /// Token count of the transformer trunk (excluding CLS).
    pub fn token_count(&self) -> usize {
        match self.family {
            ModelFamily::Vit => (self.image_h / self.patch_size) * (self.image_w / self.patch_size),
            ModelFamily::Hybrid => {
                let (fh, fw) = self.stem_output_extents().expect("validated config");
                (fh / self.patch_size) * (fw / self.patch_size)
            }
            ModelFamily::T2tVit => {
                let (fh, fw) = self.t2t_final_extents().expect("validated config");
                fh * fw
            }
            ModelFamily::Cnn => 0,
        }
    }

    /// Full (name, shape) manifest for this architecture, in storage order.
    pub fn parameter_manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut m: Vec<(String, Vec<usize>)> = Vec::new();
        let d = self.hidden_dim;
        let push = |m: &mut Vec<(String, Vec<usize>)>, n: &str, s: Vec<usize>| {
            m.push((n.to_string(), s));
        };
        let push_block = |m: &mut Vec<(String, Vec<usize>)>, prefix: &str, dim: usize, ratio: usize| {
            for suffix in ["norm1.gamma", "norm1.beta"] {
                push(m, &format!("{prefix}.{suffix}"), vec![dim]);
            }
            for suffix in ["wq", "wk", "wv", "wo"] {
                push(m, &format!("{prefix}.attn.{suffix}"), vec![dim, dim]);
                push(m, &format!("{prefix}.attn.b{}", &suffix[1..]), vec![dim]);
            }
            for suffix in ["norm2.gamma", "norm2.beta"] {
                push(m, &format!("{prefix}.{suffix}"), vec![dim]);
            }
            push(m, &format!("{prefix}.mlp.w1"), vec![dim, ratio * dim]);
            push(m, &format!("{prefix}.mlp.b1"), vec![ratio * dim]);
            push(m, &format!("{prefix}.mlp.w2"), vec![ratio * dim, dim]);
            push(m, &format!("{prefix}.mlp.b2"), vec![dim]);
        };
        let push_trunk = |m: &mut Vec<(String, Vec<usize>)>, n_tokens: usize| {
            push(m, "cls_token", vec![1, 1, d]);
            push(m, "pos_embed", vec![1, n_tokens + 1, d]);
            for i in 0..self.layers {
                push_block(m, &format!("block{i}"), d, self.mlp_ratio);
            }
            push(m, "norm.gamma", vec![d]);
            push(m, "norm.beta", vec![d]);
            push(m, "head.weight", vec![d, self.classes]);
            push(m, "head.bias", vec![self.classes]);
        };

        match self.family {
            ModelFamily::Vit => {
                push(
                    &mut m,
                    "patch_embed.weight",
                    vec![d, self.channels, self.patch_size, self.patch_size],
                );
                push(&mut m, "patch_embed.bias", vec![d]);
                push_trunk(&mut m, self.token_count());
            }
            ModelFamily::Cnn => {
                let k = self.stem_kernel;
                let mut prev = self.channels;
                push(&mut m, "stem.weight", vec![self.stem_widths[0], prev, k, k]);
                push(&mut m, "stem.bias", vec![self.stem_widths[0]]);
                prev = self.stem_widths[0];
                for (i, &w) in self.stem_widths.iter().enumerate() {
                    if i > 0 {
                        push(&mut m, &format!("stage{i}.down.weight"), vec![w, prev, k, k]);
                        push(&mut m, &format!("stage{i}.down.bias"), vec![w]);
                    }
                    push(&mut m, &format!("stage{i}.conv1.weight"), vec![w, w, k, k]);
                    push(&mut m, &format!("stage{i}.conv1.bias"), vec![w]);
                    push(&mut m, &format!("stage{i}.conv2.weight"), vec![w, w, k, k]);
                    push(&mut m, &format!("stage{i}.conv2.bias"), vec![w]);
                    prev = w;
                }
                push(&mut m, "head.weight", vec![prev, self.classes]);
                push(&mut m, "head.bias", vec![self.classes]);
            }
            ModelFamily::Hybrid => {
                let k = self.stem_kernel;
                let mut prev = self.channels;
                for (i, &w) in self.stem_widths.iter().enumerate() {
                    push(&mut m, &format!("stem{i}.weight"), vec![w, prev, k, k]);
                    push(&mut m, &format!("stem{i}.bias"), vec![w]);
                    prev = w;
                }
                push(
                    &mut m,
                    "patch_embed.weight",
                    vec![d, prev, self.patch_size, self.patch_size],
                );
                push(&mut m, "patch_embed.bias", vec![d]);
                push_trunk(&mut m, self.token_count());
            }
            ModelFamily::T2tVit => {
                let sd = self.t2t_dim;
                let mut prev = self.channels;
                for (i, stage) in self.t2t_stages.iter().enumerate() {
                    let token_len = prev * stage.kernel * stage.kernel;
                    push(&mut m, &format!("t2t{i}.proj.weight"), vec![token_len, sd]);
                    push(&mut m, &format!("t2t{i}.proj.bias"), vec![sd]);
                    push_block(&mut m, &format!("t2t{i}.block"), sd, self.mlp_ratio);
                    prev = sd;
                }
                push(&mut m, "embed.weight", vec![sd, d]);
                push(&mut m, "embed.bias", vec![d]);
                push_trunk(&mut m, self.token_count());
            }
        }
        m
    }
}

/// A classifier: configuration plus trained (or freshly seeded) weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model, ConfigError> {
        config.validate()?;
        let params = init_parameters(&config, seed);
        Ok(Model { config, params })
    }

    /// Register the parameters on a tape and run the family forward pass.
    pub fn forward(&self, tape: &Tape, x: &Var, trainable: bool) -> Var {
        let bound = BoundParams::bind(tape, &self.params, trainable);
        self.forward_bound(&bound, x)
    }

    pub fn forward_bound(&self, bound: &BoundParams, x: &Var) -> Var {
        match self.config.family {
            ModelFamily::Vit => vit_forward(&self.config, bound, x),
            ModelFamily::Cnn => cnn_forward(&self.config, bound, x),
            ModelFamily::Hybrid => hybrid_forward(&self.config, bound, x),
            ModelFamily::T2tVit => t2t_vit_forward(&self.config, bound, x),
        }
    }

    /// No-grad logits, evaluated in fixed-size chunks.
    pub fn logits(&self, x: &Tensor) -> Tensor {
        let shape = x.shape().to_vec();
        let batch = shape[0];
        let per = shape[1..].iter().product::<usize>();
        let k = self.config.classes;
        let mut out = Vec::with_capacity(batch * k);
        // chunk size is fixed so results never depend on caller batching
        const CHUNK: usize = 32;
        let mut start = 0;
        while start < batch {
            let end = (start + CHUNK).min(batch);
            let mut chunk_shape = shape.clone();
            chunk_shape[0] = end - start;
            let chunk =
                Tensor::from_vec(chunk_shape, x.data()[start * per..end * per].to_vec());
            let tape = Tape::new();
            let xv = tape.leaf(&chunk, false);
            out.extend_from_slice(self.forward(&tape, &xv, false).tensor().data());
            start = end;
        }
        Tensor::from_vec(vec![batch, k], out)
    }

    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        argmax_rows(&self.logits(x))
    }

    pub fn save(&self, path: &std::path::Path, seed: u64) -> Result<(), checkpoint::CheckpointError> {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        checkpoint::save(path, "model", &config, seed, &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<Model, checkpoint::CheckpointError> {
        let (manifest, params) = checkpoint::load(path)?;
        if manifest.kind != "model" {
            return Err(checkpoint::CheckpointError::WrongKind {
                got: manifest.kind,
                expected: "model".into(),
            });
        }
        let config: ModelConfig = serde_json::from_value(manifest.config)?;
        let model = Model { config, params };
        if let Err(msg) = model.params.matches_manifest(&model.config.parameter_manifest()) {
            return Err(checkpoint::CheckpointError::Manifest(serde::de::Error::custom(msg)));
        }
        Ok(model)
    }
}

/// Row-wise argmax of a B×K matrix; first index wins ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let shape = logits.shape();
    assert_eq!(shape.len(), 2, "argmax_rows: want B×K, got {shape:?}");
    let (b, k) = (shape[0], shape[1]);
    (0..b)
        .map(|r| {
            let row = &logits.data()[r * k..(r + 1) * k];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests;
