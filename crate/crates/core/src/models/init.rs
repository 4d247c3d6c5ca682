//! Seeded parameter initialization.

use super::{ModelConfig, ParameterSet};
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Standard normal via Box-Muller (keeps the RNG stream deterministic and
/// platform-stable).
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Normal(0, std) truncated at ±2 std by resampling.
fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z = normal(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn is_zero_init(name: &str) -> bool {
    if name.ends_with(".bias") || name.ends_with(".beta") {
        return true;
    }
    matches!(
        name.rsplit('.').next(),
        Some("bq" | "bk" | "bv" | "bo" | "b1" | "b2")
    )
}

/// Build every parameter in manifest order, deterministically from the seed.
///
/// Attention/MLP/embedding weights are truncated normal (std 0.02); conv
/// kernels are fan-in-scaled normal; norms start at identity; biases at zero.
pub fn init_parameters(cfg: &ModelConfig, seed: u64) -> ParameterSet {
    let mut rng = rng::rng_from(seed, &[rng::stream_tag("init")]);
    let mut params = ParameterSet::new();
    for (name, shape) in cfg.parameter_manifest() {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = if name.ends_with(".gamma") {
            vec![1.0; n]
        } else if is_zero_init(&name) {
            vec![0.0; n]
        } else if shape.len() == 4 {
            // conv kernel: He initialization over fan-in
            let fan_in: usize = shape[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            (0..n).map(|_| normal(&mut rng) * std).collect()
        } else {
            (0..n).map(|_| trunc_normal(&mut rng, 0.02)).collect()
        };
        params.insert(name, Tensor::from_vec(shape, data));
    }
    params
}
