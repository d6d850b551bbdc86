use aquaseg::dataio::{synthesize_frame, FrameBundle, Modality, ModalitySet, SyntheticSceneParams};
use aquaseg::model::{
    backward, forward, init_params, load_checkpoint, predict, read_checkpoint, save_checkpoint, softmax_ce_with_grad,
    write_checkpoint, HeadGradients, ModelConfig, Params,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params() -> Params {
    init_params(&ModelConfig::default(), 5).unwrap()
}

fn frame(seed: u64, index: u64) -> FrameBundle {
    let p = SyntheticSceneParams {
        seed,
        ..Default::default()
    };
    synthesize_frame(&p, index).unwrap()
}

/// Copy of `base` whose `modality` channel is replaced by uniform noise.
fn perturbed(base: &FrameBundle, modality: Modality, seed: u64) -> FrameBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = base.clone();
    out.modality_mut(modality).data.iter_mut().for_each(|v| *v = rng.random());
    out
}

fn assert_mask_invariance(modality: Modality) {
    let p = params();
    let mask = ModalitySet::only(modality);
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig::with_cases(100));
    runner
        .run(&(any::<u64>(), 0u64..1000, any::<u64>()), |(seed, index, noise)| {
            let a = frame(seed, index);
            let b = perturbed(&a, modality, noise);
            prop_assert_ne!(&a, &b);
            let (pa, _) = forward(&p, &a, mask).unwrap();
            let (pb, _) = forward(&p, &b, mask).unwrap();
            prop_assert!(pa == pb, "outputs differ under mask {}", mask);
            Ok(())
        })
        .unwrap();
}

#[test]
fn rgb_mask_hides_rgb_content() {
    assert_mask_invariance(Modality::Rgb);
}

#[test]
fn thermal_mask_hides_thermal_content() {
    assert_mask_invariance(Modality::Thermal);
}

#[test]
fn lidar_mask_hides_lidar_content() {
    assert_mask_invariance(Modality::Lidar);
}

#[test]
fn unmasked_outputs_depend_on_every_modality() {
    let p = params();
    let a = frame(1, 2);
    let (base, _) = forward(&p, &a, ModalitySet::EMPTY).unwrap();
    for m in Modality::ALL {
        let (other, _) = forward(&p, &perturbed(&a, m, 9), ModalitySet::EMPTY).unwrap();
        assert_ne!(base.joint, other.joint, "{m:?}");
    }
}

#[test]
fn predict_is_argmax_of_joint_logits() {
    let p = params();
    let a = frame(3, 4);
    let (preds, _) = forward(&p, &a, ModalitySet::EMPTY).unwrap();
    let labels = predict(&p, &a, ModalitySet::EMPTY).unwrap();
    let n = 64 * 64;
    for i in 0..n {
        let id = labels.ids[i] as usize;
        for k in 0..4 {
            assert!(preds.joint.data[id * n + i] >= preds.joint.data[k * n + i]);
        }
    }
}

#[test]
fn backward_matches_directional_finite_difference() {
    let cfg = ModelConfig {
        width: 32,
        height: 32,
        ..Default::default()
    };
    let mut p = init_params(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for t in p.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    }
    let scene = SyntheticSceneParams {
        width: 32,
        height: 32,
        ..Default::default()
    };
    let b = synthesize_frame(&scene, 0).unwrap();
    let loss = |p: &Params| {
        let (preds, _) = forward(p, &b, ModalitySet::EMPTY).unwrap();
        softmax_ce_with_grad(&preds.joint, &b.labels).unwrap().0
    };
    let (preds, cache) = forward(&p, &b, ModalitySet::EMPTY).unwrap();
    let (_, dz) = softmax_ce_with_grad(&preds.joint, &b.labels).unwrap();
    let up = HeadGradients {
        joint: dz,
        rgb: None,
        aux: None,
    };
    let g = backward(&p, &cache, &up).unwrap().flatten();

    let dir: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let along = |s: f64| {
        let mut q = p.clone();
        let mut k = 0;
        for t in q.tensors_mut() {
            for v in t.data_mut() {
                *v += s * dir[k];
                k += 1;
            }
        }
        loss(&q)
    };
    let h = 1e-6;
    let numeric = (along(h) - along(-h)) / (2.0 * h);
    let analytic: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
    assert!((numeric - analytic).abs() <= 1e-5 * analytic.abs().max(1.0), "{numeric} vs {analytic}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for multihead in [false, true] {
        let cfg = ModelConfig {
            multihead,
            ..Default::default()
        };
        let p = init_params(&cfg, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(q.config, p.config);
        assert_eq!(q.names(), p.names());
        let bits = |p: &Params| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&q), bits(&p));

        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        buf[0] ^= 0xff;
        assert!(read_checkpoint(&buf[..]).is_err());
    }
}

#[test]
fn invalid_model_configs_are_rejected() {
    let bad = [
        ModelConfig {
            stages: 0,
            channels: vec![],
            ..Default::default()
        },
        ModelConfig {
            channels: vec![8, 16],
            ..Default::default()
        },
        ModelConfig {
            width: 60,
            ..Default::default()
        },
    ];
    for cfg in bad {
        assert!(init_params(&cfg, 0).is_err(), "{cfg:?}");
    }
}
