use super::*;
use crate::models::{Model, ModelConfig, ModelFamily};
use rand::Rng;

/// Two-class linear model with a known worst case inside the ε-ball.
fn toy_linear(dim: usize, seed: u64) -> LinearClassifier {
    let mut rng = crate::rng::rng_from(seed, &[7]);
    let mut w = vec![0.0; dim * 2];
    for v in w.iter_mut() {
        *v = rng.gen::<f64>() * 2.0 - 1.0;
    }
    LinearClassifier {
        weight: Tensor::from_vec(vec![dim, 2], w),
        bias: Tensor::from_vec(vec![2], vec![0.1, -0.1]),
    }
}

fn toy_model() -> Model {
    let mut cfg = ModelConfig::tiny(ModelFamily::Cnn);
    cfg.image_h = 6;
    cfg.image_w = 6;
    cfg.channels = 1;
    cfg.classes = 3;
    cfg.stem_widths = vec![4];
    cfg.norm_mean = vec![0.5];
    cfg.norm_std = vec![0.5];
    Model::new(cfg, 23).unwrap()
}

fn toy_batch(b: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = crate::rng::rng_from(seed, &[8]);
    let x =
        Tensor::from_vec(vec![b, 1, 6, 6], (0..b * 36).map(|_| rng.gen::<f64>()).collect());
    let y = (0..b).map(|i| i % 3).collect();
    (x, y)
}

#[test]
fn fgsm_zero_epsilon_returns_clean_input() {
    let model = toy_model();
    let (x, y) = toy_batch(4, 1);
    let cfg = AttackConfig { epsilon: 0.0, ..AttackConfig::default() };
    let res = fgsm(&model, &x, &y, &cfg);
    assert_eq!(res.adversarial.data(), x.data());
    assert!(res.success.iter().all(|&s| !s));
    assert!(res.linf.iter().all(|&d| d == 0.0));
}

#[test]
fn fgsm_zero_gradient_returns_clean_input() {
    // constant logits: gradient identically zero, sign(0) = 0
    let flat = LinearClassifier {
        weight: Tensor::zeros(vec![4, 2]),
        bias: Tensor::from_vec(vec![2], vec![0.3, 0.1]),
    };
    let x = Tensor::from_vec(vec![2, 4], vec![0.5; 8]);
    let cfg = AttackConfig { epsilon: 0.1, ..AttackConfig::default() };
    let res = fgsm(&flat, &x, &[0, 1], &cfg);
    assert_eq!(res.adversarial.data(), x.data());
}

#[test]
fn fgsm_scalar_toy_saturates_at_valid_range() {
    // rising loss in x with positive w: x_adv = min(x0 + eps, 1)
    let m = LinearClassifier {
        weight: Tensor::from_vec(vec![1, 2], vec![-3.0, 3.0]),
        bias: Tensor::zeros(vec![2]),
    };
    // label 0, so loss rises as logit_1 - logit_0 = 6x rises
    let x = Tensor::from_vec(vec![1, 1], vec![0.95]);
    let cfg = AttackConfig { epsilon: 0.2, ..AttackConfig::default() };
    let res = fgsm(&m, &x, &[0], &cfg);
    assert!((res.adversarial.data()[0] - 1.0).abs() < 1e-12);
    let unclamped = AttackConfig { epsilon: 0.2, clamp_to_valid_range: false, ..cfg };
    let res = fgsm(&m, &x, &[0], &unclamped);
    assert!((res.adversarial.data()[0] - 1.15).abs() < 1e-12);
}

#[test]
fn pgd_iterates_stay_in_ball_and_range() {
    let model = toy_model();
    let (x, y) = toy_batch(6, 2);
    for eps in [0.01, 0.05, 0.3] {
        let cfg = AttackConfig { epsilon: eps, n_iter: 5, n_restarts: 2, seed: 9, ..AttackConfig::default() };
        let res = pgd(&model, &x, &y, &cfg);
        for &d in &res.linf {
            assert!(d <= eps + 1e-9, "linf {d} vs eps {eps}");
        }
        assert!(res.adversarial.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn pgd_single_step_collapses_to_fgsm() {
    let model = toy_model();
    let (x, y) = toy_batch(5, 3);
    let cfg = AttackConfig {
        epsilon: 0.05,
        n_iter: 1,
        step_size: Some(0.05),
        random_start: false,
        ..AttackConfig::default()
    };
    let a = pgd(&model, &x, &y, &cfg);
    let b = fgsm(&model, &x, &y, &cfg);
    assert_eq!(a.adversarial.data(), b.adversarial.data());
}

#[test]
fn pgd_trajectory_non_decreasing_and_deterministic() {
    let model = toy_model();
    let (x, y) = toy_batch(4, 4);
    let cfg = AttackConfig { epsilon: 0.1, n_iter: 6, n_restarts: 2, seed: 5, ..AttackConfig::default() };
    let a = pgd(&model, &x, &y, &cfg);
    for traj in &a.loss_trajectory {
        assert_eq!(traj.len(), 7);
        assert!(traj.windows(2).all(|w| w[1] >= w[0]));
    }
    let b = pgd(&model, &x, &y, &cfg);
    assert!(a
        .adversarial
        .data()
        .iter()
        .zip(b.adversarial.data())
        .all(|(p, q)| p.to_bits() == q.to_bits()));
    assert_eq!(a.loss_trajectory, b.loss_trajectory);
}

#[test]
fn pgd_reaches_linear_worst_case() {
    // In a 2-class affine model the CE loss is monotone in the margin
    // u = (w_other - w_label)·x, so the box maximum is the signed corner
    // x0 + eps*sign(w_other - w_label).
    let dim = 12;
    for seed in 0..20 {
        let m = toy_linear(dim, seed);
        let mut rng = crate::rng::rng_from(seed, &[9]);
        let x0: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>()).collect();
        let label = 0usize;
        let eps = 0.08;

        let w = m.weight.data();
        let diff: Vec<f64> = (0..dim).map(|i| w[i * 2 + 1] - w[i * 2]).collect();
        let corner: Vec<f64> =
            x0.iter().zip(&diff).map(|(c, d)| c + eps * crate::tensor::sign_of(*d)).collect();
        let margin = |x: &[f64]| -> f64 {
            let u: f64 = x.iter().zip(&diff).map(|(x, d)| x * d).sum();
            u + (m.bias.data()[1] - m.bias.data()[0])
        };
        let worst = (1.0 + margin(&corner).exp()).ln(); // softplus

        let cfg = AttackConfig {
            epsilon: eps,
            n_iter: 40,
            clamp_to_valid_range: false,
            seed,
            ..AttackConfig::default()
        };
        let res = pgd(&m, &Tensor::from_vec(vec![1, dim], x0), &[label], &cfg);
        let achieved = *res.loss_trajectory[0].last().unwrap();
        assert!(
            (achieved - worst).abs() < 1e-6,
            "seed {seed}: achieved {achieved} vs worst {worst}"
        );
    }
}

#[test]
fn frequency_full_pass_reproduces_pgd() {
    let model = toy_model();
    let (x, y) = toy_batch(3, 6);
    let cfg = AttackConfig { epsilon: 0.08, n_iter: 4, seed: 2, ..AttackConfig::default() };
    let mask = FrequencyMask::new(6, 6, MaskMode::Full, 0);
    let filtered = frequency_filtered_attack(&model, &x, &y, &cfg, &mask);
    let plain = pgd(&model, &x, &y, &cfg);
    assert!(filtered.adversarial.max_abs_diff(&plain.adversarial) < 1e-9);
}

#[test]
fn frequency_zero_mask_annihilates_perturbation() {
    let model = toy_model();
    let (x, y) = toy_batch(3, 7);
    let cfg = AttackConfig { epsilon: 0.08, n_iter: 4, seed: 2, ..AttackConfig::default() };
    let mask = FrequencyMask::custom(6, 6, vec![false; 36]);
    let res = frequency_filtered_attack(&model, &x, &y, &cfg, &mask);
    assert!(res.adversarial.max_abs_diff(&x) < 1e-9);
    assert!(res.success.iter().all(|&s| !s));
}

#[test]
fn frequency_partition_sums_to_unfiltered() {
    let model = toy_model();
    let (x, y) = toy_batch(2, 8);
    let cfg = AttackConfig { epsilon: 0.1, n_iter: 3, seed: 4, ..AttackConfig::default() };
    let low = FrequencyMask::new(6, 6, MaskMode::Low, 2);
    let high = FrequencyMask::new(6, 6, MaskMode::High, 3);
    let mid = FrequencyMask::complement_of(&[&low, &high]);

    let plain = pgd(&model, &x, &y, &cfg);
    let parts: Vec<Tensor> = [&low, &high, &mid]
        .iter()
        .map(|m| {
            frequency_filtered_attack(&model, &x, &y, &cfg, m)
                .adversarial
                .zip_map(&x, |a, b| a - b)
        })
        .collect();
    let total = parts[0].zip_map(&parts[1], |a, b| a + b).zip_map(&parts[2], |a, b| a + b);
    let delta = plain.adversarial.zip_map(&x, |a, b| a - b);
    assert!(total.max_abs_diff(&delta) < 1e-9);
}

#[test]
fn asr_counts() {
    assert_eq!(attack_success_rate(&[1, 2, 3], &[1, 0, 3]), 1.0 / 3.0);
    assert_eq!(attack_success_rate(&[1, 2], &[1, 2]), 0.0);
    assert_eq!(attack_success_rate(&[1, 2], &[2, 1]), 1.0);
    assert_eq!(robust_accuracy(&[1, 0, 2], &[1, 1, 2]), 2.0 / 3.0);
}

#[test]
#[should_panic(expected = "attack_success_rate")]
fn asr_length_mismatch() {
    let _ = attack_success_rate(&[1, 2, 3], &[1, 2]);
}

#[test]
fn transfer_matrix_shapes_and_symmetry() {
    let model = toy_model();
    let (x, y) = toy_batch(8, 9);
    let cfg = AttackConfig { epsilon: 0.2, seed: 3, ..AttackConfig::default() };

    // single model: 1x1 equal to white-box FGSM ASR
    let single = transfer_attack_matrix(&[&model], &x, &y, &cfg);
    let wb = fgsm(&model, &x, &y, &cfg).success_rate();
    assert_eq!(single, vec![vec![wb]]);

    // two copies: identical gradients, all four entries equal
    let twin = model.clone();
    let m = transfer_attack_matrix(&[&model, &twin], &x, &y, &cfg);
    assert_eq!(m[0][0], m[0][1]);
    assert_eq!(m, vec![vec![m[0][0]; 2]; 2]);

    // zero radius: all-zero matrix
    let cfg0 = AttackConfig { epsilon: 0.0, ..cfg };
    let z = transfer_attack_matrix(&[&model, &twin], &x, &y, &cfg0);
    assert!(z.iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn sweep_zero_radius_row_is_clean_accuracy() {
    let model = toy_model();
    let (x, y) = toy_batch(8, 10);
    let clean = model.predict(&x);
    let clean_acc =
        clean.iter().zip(&y).filter(|(p, y)| p == y).count() as f64 / y.len() as f64;
    let cfg = AttackConfig { seed: 11, ..AttackConfig::default() };
    let grid = radius_step_sweep(&model, &x, &y, &[0.0, 0.1], &[1, 3, 5], &cfg);
    assert_eq!(grid[0], vec![clean_acc; 3]);
    // warm-started rows are monotone non-increasing in steps
    for row in &grid {
        assert!(row.windows(2).all(|w| w[1] <= w[0]));
    }
}
