//! Invariants of the schedules, losses, data pipeline and file formats.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use netshrink::Tensor;
use netshrink_train::config::RunConfig;
use netshrink_train::data::{augment, generate_dataset, SyntheticDatasetSpec};
use netshrink_train::ops::{self, IGNORE_LABEL};
use netshrink_train::optim::{poly_lr, sgd_step};
use netshrink_train::OptimizerState;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn poly_lr_decays_from_base_to_zero(epochs in 1usize..400, base in 1e-4f64..1.0) {
        prop_assert_eq!(poly_lr(0, epochs, base), base);
        prop_assert_eq!(poly_lr(epochs, epochs, base), 0.0);
        let mut prev = base;
        for e in 0..=epochs {
            let lr = poly_lr(e, epochs, base);
            prop_assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
    }

    #[test]
    fn scatter_then_select_is_identity(n in 1usize..3, m in 1usize..8, hw in 1usize..5, keep in prop::collection::vec(any::<bool>(), 8), seed in any::<u64>()) {
        let mut idx: Vec<usize> = (0..m).filter(|&c| keep[c]).collect();
        if idx.is_empty() {
            idx.push(seed as usize % m);
        }
        let len = n * idx.len() * hw * hw;
        let x = tensor(&[n, idx.len(), hw, hw], (0..len).map(|i| (i as f64 * 0.37 + seed as f64 % 7.0).sin()).collect());
        let y = ops::channel_scatter(&x, &idx, m);
        prop_assert_eq!(y.shape(), &[n, m, hw, hw][..]);
        let back = ops::channel_scatter_backward(&y, &idx);
        prop_assert_eq!(back.data(), x.data());
        // Channels outside `idx` are zero.
        let plane = hw * hw;
        for b in 0..n {
            for c in (0..m).filter(|c| !idx.contains(c)) {
                let start = (b * m + c) * plane;
                prop_assert!(y.data()[start..start + plane].iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero_per_pixel(k in 2usize..5, hw in 1usize..4, logits in prop::collection::vec(-5.0f64..5.0, 64), labels in prop::collection::vec(0u8..6, 16)) {
        let pixels = hw * hw;
        let labels: Vec<u8> = labels[..pixels].iter().map(|&l| if l as usize >= k { IGNORE_LABEL } else { l }).collect();
        let x = tensor(&[1, k, hw, hw], logits[..k * pixels].to_vec());
        let (loss, g, count) = ops::softmax_cross_entropy(&x, &labels);
        prop_assert_eq!(count, labels.iter().filter(|&&l| l != IGNORE_LABEL).count());
        prop_assert!(loss >= 0.0);
        for p in 0..pixels {
            let col: Vec<f64> = (0..k).map(|c| g.data()[c * pixels + p]).collect();
            if labels[p] == IGNORE_LABEL {
                prop_assert!(col.iter().all(|v| *v == 0.0));
            } else {
                prop_assert!(col.iter().sum::<f64>().abs() < 1e-12);
                prop_assert!(col[labels[p] as usize] <= 0.0);
            }
        }
    }

    #[test]
    fn augment_keeps_size_and_label_set(seed in any::<u64>(), data_seed in 0u64..4) {
        let spec = SyntheticDatasetSpec { train_samples: 2, val_samples: 1, seed: data_seed, ..SyntheticDatasetSpec::small() };
        let d = generate_dataset(&spec).unwrap();
        let (h, w) = (spec.height, spec.width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (img, lab) = augment(d.train.image(0), d.train.label(0), h, w, &mut rng);
        prop_assert_eq!(img.len(), 3 * h * w);
        prop_assert_eq!(lab.len(), h * w);
        prop_assert!(lab.iter().all(|&l| (l as usize) < spec.n_classes || l == IGNORE_LABEL));
        prop_assert!(img.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sgd_without_gradient_or_decay_only_coasts(p0 in -3.0f64..3.0, v0 in -1.0f64..1.0, lr in 1e-4f64..0.5, mu in 0.0f64..0.99) {
        let mut params = [("w".to_string(), tensor(&[1], vec![p0]))].into_iter().collect();
        let grads = [("w".to_string(), tensor(&[1], vec![0.0]))].into_iter().collect();
        let mut vel = [("w".to_string(), tensor(&[1], vec![v0]))].into_iter().collect();
        sgd_step(&mut params, &grads, &mut vel, lr, mu, 0.0);
        prop_assert!((vel["w"].data()[0] - mu * v0).abs() < 1e-15);
        prop_assert!((params["w"].data()[0] - (p0 - lr * mu * v0)).abs() < 1e-12);
    }

    #[test]
    fn run_config_round_trips(epochs in 1usize..300, lr in 1e-5f64..1.0, rate in 0.0f64..0.95, seed in any::<u64>()) {
        let mut c = RunConfig::small();
        c.train.epochs = epochs;
        c.train.base_lr = lr;
        c.train.seed = seed;
        c.swd.final_rate = rate;
        c.slimming.final_rate = rate;
        let back = RunConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn optimizer_state_round_trips(values in prop::collection::vec(-1e6f64..1e6, 1..20), steps in any::<u32>()) {
        let n = values.len();
        let vel = [("layer.w".to_string(), tensor(&[n], values))].into_iter().collect();
        let state = OptimizerState::new(&vel, 3, steps as u64);
        let back = OptimizerState::from_json(&serde_json::to_string(&state).unwrap()).unwrap();
        prop_assert_eq!(back.velocity().unwrap(), vel);
        prop_assert_eq!(back, state);
    }
}
