mod common;

use common::{perturb_adapters, random_encoder_config, reference_encoder, rng};
use rand::Rng;
use stellarf::linalg::Matrix;
use stellarf::peft::{gaussian, Encoder, LoraLinear, Linear, Parameters, TrainPolicy};

fn random_mask<R: Rng>(r: &mut R, t: usize) -> Vec<bool> {
    (0..t).map(|_| r.random_bool(0.8)).collect()
}

#[test]
fn encoder_matches_straight_line_evaluation() {
    for seed in 0..50 {
        let mut r = rng(seed);
        let cfg = random_encoder_config(&mut r);
        let policy = TrainPolicy {
            train_qkv_base: false,
            enable_lora: r.random_bool(0.7),
            enable_adapter: r.random_bool(0.7),
        };
        let mut a = rng(seed + 1000);
        let mut enc = Encoder::<f64>::init(cfg, policy, &mut a, &mut r).unwrap();
        perturb_adapters(&mut enc, &mut r, 0.3);
        let t = r.random_range(1..6);
        let x = gaussian(&mut r, t, cfg.d_model, 1.0);
        let mask = random_mask(&mut r, t);
        let got = enc.forward(&x, &mask).unwrap();
        let want = reference_encoder(&enc, &x, &mask);
        assert!(got.max_abs_diff(&want) < 1e-10, "seed {seed}");
    }
}

#[test]
fn lora_merge_is_equivalent() {
    for seed in 0..100 {
        let mut r = rng(seed);
        let (d_in, d_out) = (r.random_range(1..12), r.random_range(1..12));
        let rank = r.random_range(0..6);
        let base = Linear::<f64>::random(&mut r, d_in, d_out, Some(0.1));
        let alpha = r.random_range(0.5..32.0);
        let mut l = LoraLinear::wrap(&mut r, base, rank, alpha);
        l.b.value = gaussian(&mut r, d_out, rank, 0.5);
        let merged = l.merged().unwrap();
        let rows = r.random_range(1..5);
        let x = gaussian(&mut r, rows, d_in, 1.0);
        let diff = l.forward(&x).unwrap().0.max_abs_diff(&merged.forward(&x).unwrap());
        assert!(diff < 1e-12, "seed {seed}: {diff}");
    }
}

#[test]
fn merged_encoder_matches_unmerged() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let cfg = random_encoder_config(&mut r);
        let mut a = rng(seed + 7);
        let mut enc = Encoder::<f64>::init(cfg, TrainPolicy::default(), &mut a, &mut r).unwrap();
        perturb_adapters(&mut enc, &mut r, 0.3);
        let x = gaussian(&mut r, 4, cfg.d_model, 1.0);
        let mask = [true; 4];
        let diff = enc
            .forward(&x, &mask)
            .unwrap()
            .max_abs_diff(&enc.merged().unwrap().forward(&x, &mask).unwrap());
        assert!(diff < 1e-12, "seed {seed}: {diff}");
    }
}

#[test]
fn fresh_adaptation_is_exactly_the_backbone() {
    for seed in 0..30 {
        let mut r = rng(seed);
        let cfg = random_encoder_config(&mut r);
        let mut a = rng(seed + 3);
        let on = Encoder::<f64>::init(cfg, TrainPolicy::default(), &mut a, &mut r).unwrap();
        let mut off = on.clone();
        off.set_policy(TrainPolicy::frozen());
        let x = gaussian(&mut r, 3, cfg.d_model, 2.0);
        assert_eq!(on.forward(&x, &[true; 3]).unwrap(), off.forward(&x, &[true; 3]).unwrap());
    }
}

#[test]
fn backward_touches_only_trainable_tensors() {
    let mut r = rng(5);
    let cfg = random_encoder_config(&mut r);
    let mut a = rng(6);
    let mut enc = Encoder::<f64>::init(cfg, TrainPolicy::default(), &mut a, &mut r).unwrap();
    let before = enc.frozen_digest();
    let x = gaussian(&mut r, 3, cfg.d_model, 1.0);
    enc.forward_recorded(&x, &[true; 3]).unwrap();
    enc.backward(&Matrix::from_fn(3, cfg.d_model, |_, _| 1.0)).unwrap();
    enc.visit("", &mut |name, p| {
        assert_eq!(p.grad.is_some(), p.trainable, "{name}");
    });
    assert_eq!(enc.frozen_digest(), before);
}

#[test]
fn outputs_stay_finite() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let cfg = random_encoder_config(&mut r);
        let mut a = rng(seed + 11);
        let enc = Encoder::<f64>::init(cfg, TrainPolicy::default(), &mut a, &mut r).unwrap();
        let x = gaussian(&mut r, 5, cfg.d_model, 50.0);
        assert!(enc.forward(&x, &[true, false, true, true, false]).unwrap().all_finite());
    }
}
