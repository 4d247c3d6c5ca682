//! White-box and transfer attacks under the ℓ∞ threat model.
//!
//! PGD iterates signed-gradient ascent clipped to the ε-ball (and to [0,1]
//! when enabled); FGSM is the single-step special case. The frequency-
//! constrained variant filters the PGD perturbation through a DCT
//! coefficient mask before re-applying it. Success uses the prediction-
//! change definition: the attack succeeds on an example when the prediction
//! on the adversarial input differs from the prediction on the clean input.

use crate::frequency::{filter_channels, FrequencyMask, MaskMode};
use crate::models::{argmax_rows, Model};
use crate::rng::{self, stream_tag};
use crate::tensor::{sign_of, Tape, Tensor};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Per-iterate evaluation of a model on a labelled batch.
pub struct AttackEval {
    /// Per-example cross-entropy against the given labels.
    pub losses: Vec<f64>,
    /// Argmax predictions.
    pub preds: Vec<usize>,
    /// Gradient of the summed loss with respect to the input (None when the
    /// caller asked for a value-only evaluation).
    pub grad: Option<Tensor>,
}

/// Anything PGD can attack: a differentiable classifier over batched inputs.
pub trait AttackTarget: Sync {
    fn num_classes(&self) -> usize;
    fn eval(&self, x: &Tensor, labels: &[usize], want_grad: bool) -> AttackEval;

    fn predict(&self, x: &Tensor) -> Vec<usize> {
        // labels are irrelevant for predictions; reuse eval with zeros
        self.eval(x, &vec![0; x.shape()[0]], false).preds
    }
}

/// Examples per work unit. Fixed so that results never depend on the rayon
/// thread count.
const CHUNK: usize = 16;

impl AttackTarget for Model {
    fn num_classes(&self) -> usize {
        self.config.classes
    }

    fn eval(&self, x: &Tensor, labels: &[usize], want_grad: bool) -> AttackEval {
        let shape = x.shape().to_vec();
        let batch = shape[0];
        assert_eq!(labels.len(), batch, "eval: {} labels for batch of {batch}", labels.len());
        let per: usize = shape[1..].iter().product();
        let starts: Vec<usize> = (0..batch).step_by(CHUNK).collect();
        let chunks: Vec<(Vec<f64>, Vec<usize>, Option<Vec<f64>>)> = starts
            .par_iter()
            .map(|&start| {
                let end = (start + CHUNK).min(batch);
                let mut chunk_shape = shape.clone();
                chunk_shape[0] = end - start;
                let chunk =
                    Tensor::from_vec(chunk_shape, x.data()[start * per..end * per].to_vec());
                let tape = Tape::new();
                let xv = tape.leaf(&chunk, want_grad);
                let logits = self.forward(&tape, &xv, false);
                let preds = argmax_rows(&logits.tensor());
                let loss_vec = logits.cross_entropy_per_example(&labels[start..end]);
                let losses = loss_vec.tensor().to_vec();
                let grad = if want_grad {
                    loss_vec.sum_all().backward();
                    Some(xv.grad().expect("input requires grad").to_vec())
                } else {
                    None
                };
                (losses, preds, grad)
            })
            .collect();

        let mut losses = Vec::with_capacity(batch);
        let mut preds = Vec::with_capacity(batch);
        let mut grad_data = if want_grad { Some(Vec::with_capacity(batch * per)) } else { None };
        for (l, p, g) in chunks {
            losses.extend(l);
            preds.extend(p);
            if let (Some(acc), Some(g)) = (grad_data.as_mut(), g) {
                acc.extend(g);
            }
        }
        AttackEval {
            losses,
            preds,
            grad: grad_data.map(|d| Tensor::from_vec(shape.clone(), d)),
        }
    }
}

/// Two-class (or K-class) affine classifier; the closed-form worst case of
/// PGD on it is an optimality oracle.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    /// [d, K]
    pub weight: Tensor,
    /// [K]
    pub bias: Tensor,
}

impl AttackTarget for LinearClassifier {
    fn num_classes(&self) -> usize {
        self.weight.shape()[1]
    }

    fn eval(&self, x: &Tensor, labels: &[usize], want_grad: bool) -> AttackEval {
        let tape = Tape::new();
        let xv = tape.leaf(x, want_grad);
        let w = tape.leaf(&self.weight, false);
        let b = tape.leaf(&self.bias, false);
        let logits = xv.matmul(&w).add(&b);
        let preds = argmax_rows(&logits.tensor());
        let loss_vec = logits.cross_entropy_per_example(labels);
        let losses = loss_vec.tensor().to_vec();
        let grad = if want_grad {
            loss_vec.sum_all().backward();
            Some(xv.grad().expect("input requires grad"))
        } else {
            None
        };
        AttackEval { losses, preds, grad }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// ℓ∞ radius in [0,1] pixel units.
    pub epsilon: f64,
    pub n_iter: usize,
    /// Step size; `None` selects 2.5·ε/n_iter.
    pub step_size: Option<f64>,
    pub random_start: bool,
    pub n_restarts: usize,
    /// DCT filter applied by the frequency-constrained attack.
    pub filter_mode: MaskMode,
    /// Filter corner; `None` scales the reference 32/192-of-224 split.
    pub filter_corner: Option<usize>,
    /// Re-project the filtered perturbation into the ε-ball (off by default:
    /// the frequency constraint is applied verbatim and may inflate ℓ∞).
    pub post_clip_filtered: bool,
    pub clamp_to_valid_range: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 0.01,
            n_iter: 40,
            step_size: None,
            random_start: true,
            n_restarts: 1,
            filter_mode: MaskMode::Full,
            filter_corner: None,
            post_clip_filtered: false,
            clamp_to_valid_range: true,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.epsilon < 0.0 {
            return Err(format!("attack epsilon must be >= 0, got {}", self.epsilon));
        }
        if self.n_iter < 1 {
            return Err("attack n_iter must be >= 1".into());
        }
        if self.n_restarts < 1 {
            return Err("attack n_restarts must be >= 1".into());
        }
        if self.n_iter > 1 && self.alpha() <= 0.0 && self.epsilon > 0.0 {
            return Err("attack step size must be positive for multi-step attacks".into());
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.step_size.unwrap_or(2.5 * self.epsilon / self.n_iter as f64)
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adversarial: Tensor,
    pub clean_pred: Vec<usize>,
    pub adv_pred: Vec<usize>,
    /// Prediction-change flags: adv_pred != clean_pred.
    pub success: Vec<bool>,
    /// Best-so-far loss per example, indexed by step (0 = clean input).
    pub loss_trajectory: Vec<Vec<f64>>,
    /// Achieved ℓ∞ distance per example.
    pub linf: Vec<f64>,
}

impl AttackResult {
    pub fn success_rate(&self) -> f64 {
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len().max(1) as f64
    }

    /// CSV rows: example_id, clean_pred, adv_pred, label, linf_dist, success.
    pub fn to_csv(&self, labels: &[usize]) -> String {
        let mut out = String::from("example_id,clean_pred,adv_pred,label,linf_dist,success\n");
        for i in 0..self.success.len() {
            out.push_str(&format!(
                "{},{},{},{},{:.9},{}\n",
                i,
                self.clean_pred[i],
                self.adv_pred[i],
                labels[i],
                self.linf[i],
                self.success[i] as u8
            ));
        }
        out
    }

    /// Per-step CSV of the best-so-far loss trajectories.
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("example_id,step,best_loss\n");
        for (i, traj) in self.loss_trajectory.iter().enumerate() {
            for (t, loss) in traj.iter().enumerate() {
                out.push_str(&format!("{i},{t},{loss:.9}\n"));
            }
        }
        out
    }
}

fn per_example_linf(adv: &Tensor, x0: &Tensor) -> Vec<f64> {
    let batch = x0.shape()[0];
    let per: usize = x0.shape()[1..].iter().product();
    (0..batch)
        .map(|e| {
            adv.data()[e * per..(e + 1) * per]
                .iter()
                .zip(&x0.data()[e * per..(e + 1) * per])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Clip each coordinate into [x0 − ε, x0 + ε], then into [0,1] if enabled.
fn project(x: &mut [f64], x0: &[f64], epsilon: f64, clamp01: bool) {
    for (v, &c) in x.iter_mut().zip(x0.iter()) {
        *v = v.clamp(c - epsilon, c + epsilon);
        if clamp01 {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Uniform random start in the ε-ball, seeded per example.
fn random_start(x0: &Tensor, cfg: &AttackConfig, restart: usize) -> Vec<f64> {
    let batch = x0.shape()[0];
    let per: usize = x0.shape()[1..].iter().product();
    let mut data = x0.to_vec();
    for e in 0..batch {
        let mut rng =
            rng::rng_from(cfg.seed, &[stream_tag("pgd_start"), restart as u64, e as u64]);
        for v in data[e * per..(e + 1) * per].iter_mut() {
            *v += (rng.gen::<f64>() * 2.0 - 1.0) * cfg.epsilon;
        }
    }
    project(&mut data, x0.data(), cfg.epsilon, cfg.clamp_to_valid_range);
    data
}

/// Projected gradient descent (Madry-style signed ascent), returning the
/// best-loss iterate across steps and restarts.
pub fn pgd(target: &dyn AttackTarget, x0: &Tensor, labels: &[usize], cfg: &AttackConfig) -> AttackResult {
    cfg.validate().expect("invalid attack config");
    let batch = x0.shape()[0];
    let per: usize = x0.shape()[1..].iter().product();
    let alpha = cfg.alpha();

    let clean = target.eval(x0, labels, false);
    let clean_pred = clean.preds;
    // candidate losses per restart and step (steps are 1-indexed; the clean
    // input is step 0 and is not a returned candidate)
    let mut best_loss = vec![f64::NEG_INFINITY; batch];
    let mut best_x = x0.to_vec();
    let mut step_best: Vec<Vec<f64>> = vec![vec![f64::NEG_INFINITY; batch]; cfg.n_iter];

    for restart in 0..cfg.n_restarts {
        let mut x = if cfg.random_start && cfg.epsilon > 0.0 {
            random_start(x0, cfg, restart)
        } else {
            x0.to_vec()
        };
        for step in 1..=cfg.n_iter {
            let eval = target.eval(&Tensor::from_vec(x0.shape().to_vec(), x.clone()), labels, true);
            let grad = eval.grad.expect("gradient requested");
            for (v, &g) in x.iter_mut().zip(grad.data().iter()) {
                *v += alpha * sign_of(g);
            }
            project(&mut x, x0.data(), cfg.epsilon, cfg.clamp_to_valid_range);
            // the freshly stepped iterate is the candidate for this step
            let stepped = target.eval(&Tensor::from_vec(x0.shape().to_vec(), x.clone()), labels, false);
            for e in 0..batch {
                if stepped.losses[e] > step_best[step - 1][e] {
                    step_best[step - 1][e] = stepped.losses[e];
                }
                if stepped.losses[e] > best_loss[e] {
                    best_loss[e] = stepped.losses[e];
                    best_x[e * per..(e + 1) * per].copy_from_slice(&x[e * per..(e + 1) * per]);
                }
            }
        }
    }

    let mut loss_trajectory: Vec<Vec<f64>> = (0..batch).map(|e| vec![clean.losses[e]]).collect();
    for step in 0..cfg.n_iter {
        for e in 0..batch {
            let prev = *loss_trajectory[e].last().unwrap();
            loss_trajectory[e].push(prev.max(step_best[step][e]));
        }
    }

    let adversarial = Tensor::from_vec(x0.shape().to_vec(), best_x);
    let adv_pred = target.predict(&adversarial);
    let success: Vec<bool> =
        adv_pred.iter().zip(clean_pred.iter()).map(|(a, c)| a != c).collect();
    let linf = per_example_linf(&adversarial, x0);
    AttackResult { adversarial, clean_pred, adv_pred, success, loss_trajectory, linf }
}

/// Single-step signed-gradient attack: x_adv = clamp(x0 + ε·sign(∇L)).
pub fn fgsm(target: &dyn AttackTarget, x0: &Tensor, labels: &[usize], cfg: &AttackConfig) -> AttackResult {
    let mut one_step = cfg.clone();
    one_step.n_iter = 1;
    one_step.step_size = Some(cfg.epsilon.max(f64::MIN_POSITIVE));
    one_step.random_start = false;
    one_step.n_restarts = 1;
    pgd(target, x0, labels, &one_step)
}

/// Eq.-3 style frequency-constrained attack: run PGD, filter the
/// perturbation through the DCT mask channel by channel, re-apply, and
/// re-evaluate success. The filtered ℓ∞ may exceed ε unless
/// `post_clip_filtered` is set.
pub fn frequency_filtered_attack(
    target: &dyn AttackTarget,
    x0: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    mask: &FrequencyMask,
) -> AttackResult {
    let shape = x0.shape().to_vec();
    assert_eq!(shape.len(), 4, "frequency attack: input must be B×C×H×W, got {shape:?}");
    assert_eq!(
        (shape[2], shape[3]),
        (mask.height, mask.width),
        "frequency attack: image {}x{} vs mask {}x{}",
        shape[2],
        shape[3],
        mask.height,
        mask.width
    );
    let base = pgd(target, x0, labels, cfg);
    let (batch, per) = (shape[0], shape[1] * shape[2] * shape[3]);

    let mut filtered = Vec::with_capacity(batch * per);
    for e in 0..batch {
        let delta = Tensor::from_vec(
            vec![shape[1], shape[2], shape[3]],
            base.adversarial.data()[e * per..(e + 1) * per]
                .iter()
                .zip(&x0.data()[e * per..(e + 1) * per])
                .map(|(a, b)| a - b)
                .collect(),
        );
        let kept = filter_channels(&delta, mask);
        filtered.extend(
            kept.data().iter().zip(&x0.data()[e * per..(e + 1) * per]).map(|(d, c)| c + d),
        );
    }
    if cfg.post_clip_filtered {
        project(&mut filtered, x0.data(), cfg.epsilon, cfg.clamp_to_valid_range);
    }
    let adversarial = Tensor::from_vec(shape, filtered);
    let adv_pred = target.predict(&adversarial);
    let success: Vec<bool> =
        adv_pred.iter().zip(base.clean_pred.iter()).map(|(a, c)| a != c).collect();
    let linf = per_example_linf(&adversarial, x0);
    AttackResult {
        adversarial,
        clean_pred: base.clean_pred,
        adv_pred,
        success,
        loss_trajectory: base.loss_trajectory,
        linf,
    }
}

/// Fraction of examples whose prediction the attack changed.
pub fn attack_success_rate(clean_preds: &[usize], adv_preds: &[usize]) -> f64 {
    assert_eq!(
        clean_preds.len(),
        adv_preds.len(),
        "attack_success_rate: {} clean vs {} adversarial predictions",
        clean_preds.len(),
        adv_preds.len()
    );
    if clean_preds.is_empty() {
        return 0.0;
    }
    clean_preds.iter().zip(adv_preds).filter(|(c, a)| c != a).count() as f64
        / clean_preds.len() as f64
}

/// Fraction of adversarial predictions that still match the labels.
pub fn robust_accuracy(adv_preds: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(adv_preds.len(), labels.len(), "robust_accuracy: length mismatch");
    if adv_preds.is_empty() {
        return 0.0;
    }
    adv_preds.iter().zip(labels).filter(|(a, y)| a == y).count() as f64 / adv_preds.len() as f64
}

/// FGSM transfer matrix: entry (i, j) is the ASR of examples generated on
/// source model i, evaluated on target model j against the target's own
/// clean predictions. The diagonal is the white-box FGSM ASR.
pub fn transfer_attack_matrix(
    models: &[&dyn AttackTarget],
    x0: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Vec<Vec<f64>> {
    let clean_preds: Vec<Vec<usize>> = models.iter().map(|m| m.predict(x0)).collect();
    models
        .iter()
        .map(|source| {
            let adv = fgsm(*source, x0, labels, cfg).adversarial;
            models
                .iter()
                .enumerate()
                .map(|(j, tgt)| attack_success_rate(&clean_preds[j], &tgt.predict(&adv)))
                .collect()
        })
        .collect()
}

/// Robust accuracy over an (ε, steps) grid. Within one ε row, higher step
/// counts continue from the previous iterate (warm start) and an example
/// counts as attacked from the first iterate that misclassifies it, so rows
/// are non-increasing by construction.
pub fn radius_step_sweep(
    target: &dyn AttackTarget,
    x0: &Tensor,
    labels: &[usize],
    radii: &[f64],
    step_counts: &[usize],
    cfg: &AttackConfig,
) -> Vec<Vec<f64>> {
    assert!(!radii.is_empty() && !step_counts.is_empty(), "radius_step_sweep: empty grid");
    assert!(
        step_counts.windows(2).all(|w| w[0] < w[1]),
        "radius_step_sweep: step counts must be strictly increasing"
    );
    let batch = x0.shape()[0];
    let clean = target.eval(x0, labels, false);

    radii
        .iter()
        .map(|&eps| {
            let mut row_cfg = cfg.clone();
            row_cfg.epsilon = eps;
            row_cfg.n_iter = *step_counts.last().unwrap();
            let alpha = row_cfg.alpha();
            // survived[e]: no iterate so far (including the clean input)
            // has misclassified example e
            let mut survived: Vec<bool> =
                clean.preds.iter().zip(labels).map(|(p, y)| p == y).collect();
            let mut x = if row_cfg.random_start && eps > 0.0 {
                random_start(x0, &row_cfg, 0)
            } else {
                x0.to_vec()
            };
            let mut row = Vec::with_capacity(step_counts.len());
            let mut done = 0;
            for &steps in step_counts {
                for _ in done..steps {
                    let eval =
                        target.eval(&Tensor::from_vec(x0.shape().to_vec(), x.clone()), labels, true);
                    let grad = eval.grad.expect("gradient requested");
                    for (v, &g) in x.iter_mut().zip(grad.data().iter()) {
                        *v += alpha * sign_of(g);
                    }
                    project(&mut x, x0.data(), eps, row_cfg.clamp_to_valid_range);
                    let stepped = target
                        .eval(&Tensor::from_vec(x0.shape().to_vec(), x.clone()), labels, false);
                    for e in 0..batch {
                        if stepped.preds[e] != labels[e] {
                            survived[e] = false;
                        }
                    }
                }
                done = steps;
                row.push(survived.iter().filter(|&&s| s).count() as f64 / batch.max(1) as f64);
            }
            row
        })
        .collect()
}

#[cfg(test)]
mod tests;
