use otter_core::model::{ModelConfig, OtterModel};
use otter_core::trainer::{
    adamw_update, clip_global_norm, cosine_lr, global_norm, load_checkpoint, save_checkpoint, train, AdamWHyper,
    TrainConfig, TrainOptions,
};
use otter_core::verify::toy_samples;
use proptest::prelude::*;

const HYPER: AdamWHyper = AdamWHyper {
    beta1: 0.9,
    beta2: 0.999,
    eps: 1e-8,
    weight_decay: 0.01,
};

/// Under a constant gradient both bias-corrected moments are exact, so each
/// step moves by `lr·(g/(|g|+eps) + wd·θ)`.
#[test]
fn adamw_matches_constant_gradient_closed_form() {
    for &(theta0, g) in &[(0.5f64, 0.3f64), (-2.0, -1e-3), (1.0, 4.0), (0.0, -0.25)] {
        let mut theta = [theta0];
        let (mut m, mut v) = ([0.0], [0.0]);
        let mut want = theta0;
        for t in 1..=25u64 {
            let lr = 1e-3 * (1.0 + t as f64 / 10.0);
            adamw_update(&mut theta, &[g], &mut m, &mut v, t, lr, &HYPER);
            want -= lr * (g / (g.abs() + HYPER.eps) + HYPER.weight_decay * want);
            assert!((theta[0] - want).abs() < 1e-12, "θ0={theta0} g={g} t={t}");
        }
    }
}

#[test]
fn adamw_matches_general_recursion() {
    let grads = [0.3, -0.7, 0.05, 1.2, -0.4, 0.0, 2.5];
    let mut theta = [0.8f64];
    let (mut m, mut v) = ([0.0], [0.0]);
    let (mut tm, mut tv, mut want) = (0.0f64, 0.0f64, 0.8f64);
    for (i, &g) in grads.iter().enumerate() {
        let t = i as i32 + 1;
        adamw_update(&mut theta, &[g], &mut m, &mut v, t as u64, 0.01, &HYPER);
        tm = 0.9 * tm + 0.1 * g;
        tv = 0.999 * tv + 0.001 * g * g;
        let mh = tm / (1.0 - 0.9f64.powi(t));
        let vh = tv / (1.0 - 0.999f64.powi(t));
        want -= 0.01 * (mh / (vh.sqrt() + 1e-8) + 0.01 * want);
        assert!((theta[0] - want).abs() < 1e-12);
    }
}

#[test]
fn cosine_endpoints_are_exact() {
    let cfg = TrainConfig::default();
    assert_eq!(cosine_lr(0, 100, &cfg).unwrap(), cfg.lr);
    assert_eq!(cosine_lr(50, 100, &cfg).unwrap(), cfg.lr / 2.0);
    assert_eq!(cosine_lr(100, 100, &cfg).unwrap(), cfg.min_lr);
    let floored = TrainConfig {
        min_lr: 1e-6,
        ..TrainConfig::default()
    };
    assert_eq!(cosine_lr(100, 100, &floored).unwrap(), 1e-6);
    assert!(cosine_lr(0, 0, &cfg).is_err());
}

proptest! {
    #[test]
    fn cosine_is_monotone_and_bounded(total in 1usize..500, a in 0usize..500, b in 0usize..500) {
        let cfg = TrainConfig { lr: 3e-3, min_lr: 1e-4, ..TrainConfig::default() };
        let (lo, hi) = (a.min(b).min(total), a.max(b).min(total));
        let (x, y) = (cosine_lr(lo, total, &cfg).unwrap(), cosine_lr(hi, total, &cfg).unwrap());
        prop_assert!(x >= y);
        prop_assert!((cfg.min_lr..=cfg.lr).contains(&y));
    }

    #[test]
    fn clipping_bounds_the_norm(
        parts in prop::collection::vec(prop::collection::vec(-100.0f32..100.0, 1..20), 1..5),
        clip in 0.01f64..10.0,
    ) {
        let mut parts = parts;
        let before = global_norm(&parts.iter().map(Vec::as_slice).collect::<Vec<_>>());
        let mut views: Vec<&mut [f32]> = parts.iter_mut().map(Vec::as_mut_slice).collect();
        let factor = clip_global_norm(&mut views, clip);
        let after = global_norm(&parts.iter().map(Vec::as_slice).collect::<Vec<_>>());
        prop_assert!(after <= clip * (1.0 + 1e-6));
        if before <= clip {
            prop_assert_eq!(factor, 1.0);
        } else {
            prop_assert!((after - clip).abs() <= clip * 1e-5);
        }
    }
}

fn setup() -> (OtterModel<f32>, Vec<otter_core::seqformat::TokenizedSample>, TrainConfig) {
    let cfg = ModelConfig::tiny();
    let data = toy_samples(&cfg, 7, 1).unwrap();
    let tc = TrainConfig {
        lr: 2e-3,
        batch_size: 3,
        epochs: 3,
        ..TrainConfig::default()
    };
    (OtterModel::new(cfg, 4).unwrap(), data, tc)
}

#[test]
fn training_is_deterministic_and_resumable() {
    let (mut a, data, tc) = setup();
    let full = train(&mut a, &data, &tc, TrainOptions::default()).unwrap();
    assert_eq!(full.log.len(), tc.total_steps(data.len()));

    let (mut b, _, _) = setup();
    let again = train(&mut b, &data, &tc, TrainOptions::default()).unwrap();
    assert_eq!(full.log, again.log);

    let dir = tempfile::tempdir().unwrap();
    let (mut c, _, _) = setup();
    let first = train(
        &mut c,
        &data,
        &tc,
        TrainOptions {
            stop_after: Some(4),
            ..Default::default()
        },
    )
    .unwrap();
    save_checkpoint(dir.path(), &c, &first.state, &tc, &first.cursor).unwrap();
    let ck = load_checkpoint(dir.path()).unwrap();
    let mut d = ck.model;
    let rest = train(
        &mut d,
        &data,
        &ck.train_config,
        TrainOptions {
            resume: Some((ck.state, ck.cursor)),
            ..Default::default()
        },
    )
    .unwrap();
    let mut joined = first.log.clone();
    joined.extend(rest.log);
    assert_eq!(joined, full.log);
    assert_eq!(rest.state, full.state);
    for ((_, p), (_, q)) in a.params().iter().zip(d.params().iter()) {
        assert_eq!(p.tensor.data(), q.tensor.data(), "{}", p.name);
    }
}

#[test]
fn resume_rejects_a_different_dataset() {
    let (mut m, data, tc) = setup();
    let out = train(
        &mut m,
        &data,
        &tc,
        TrainOptions {
            stop_after: Some(1),
            ..Default::default()
        },
    )
    .unwrap();
    let err = train(
        &mut m,
        &data[..5],
        &tc,
        TrainOptions {
            resume: Some((out.state, out.cursor)),
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(err.to_string().contains("7 samples"), "{err}");
}
