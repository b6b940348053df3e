use inheritseg_core::datagen::{build_bundle, partition_classes, BundleConfig, LabelMap, LabeledSample, Layout};
use inheritseg_core::losses::{loss_seen, LossWeights};
use inheritseg_core::nets::{softmax_probs, Architecture, NetworkConfig, ParamTensors};
use inheritseg_core::training::{
    configure_ablation, train_prior, train_supervised, train_zeroshot, AblationSetting, OptimizerConfig, TrainState,
    ZeroShotOutcome,
};
use inheritseg_core::{SeededRng, Tensor3};

fn small_arch(size: usize, classes: usize) -> Architecture {
    Architecture::new(NetworkConfig {
        height: size,
        width: size,
        classes,
        backbone_widths: [4, 8, 8],
        head_hidden: 8,
        fusion_hidden: 4,
        discriminator_widths: [4, 8],
        ..NetworkConfig::default()
    })
    .unwrap()
}

fn small_bundle() -> inheritseg_core::datagen::DatasetBundle {
    build_bundle(&BundleConfig {
        n_prior: 8,
        n_target: 10,
        layout: Layout::abdominal_sized(32, 32),
        unseen: vec![2],
        ..BundleConfig::default()
    })
    .unwrap()
}

fn short(epochs: usize) -> OptimizerConfig {
    OptimizerConfig {
        epochs,
        batch_size: 4,
        ..OptimizerConfig::toy()
    }
}

fn run(setting: AblationSetting, epochs: usize, seed: u64) -> (ZeroShotOutcome, inheritseg_core::nets::SegmentationParams) {
    let arch = small_arch(32, 5);
    let b = small_bundle();
    let prior_data: Vec<&LabeledSample> = b.prior.iter().collect();
    let prior = train_prior(&arch, &prior_data, &short(2), 1).unwrap().params;
    let (seen, _) = partition_classes(5, &b.unseen).unwrap();
    let ab = configure_ablation(setting, &LossWeights::default());
    let out = train_zeroshot(&arch, &b.mirror_train(), &seen, prior.clone(), &ab, &short(epochs), seed, |_, _| Ok(())).unwrap();
    (out, prior)
}

#[test]
fn prior_converges_on_one_structure() {
    let arch = small_arch(16, 2);
    let mut rng = SeededRng::new(5);
    let data: Vec<LabeledSample> = (0..8)
        .map(|_| {
            let (cy, cx, r) = (rng.range(5.0, 11.0), rng.range(5.0, 11.0), rng.range(2.5, 4.0));
            let idx: Vec<usize> = (0..256)
                .map(|p| {
                    let (y, x) = ((p / 16) as f64, (p % 16) as f64);
                    usize::from((y - cy).powi(2) + (x - cx).powi(2) <= r * r)
                })
                .collect();
            let image = Tensor3::from_fn(1, 16, 16, |_, y, x| idx[y * 16 + x] as f64 + 0.05 * rng.normal());
            LabeledSample {
                image,
                label: LabelMap::from_indices(16, 16, &idx, vec!["background".into(), "disk".into()]).unwrap(),
            }
        })
        .collect();
    let refs: Vec<&LabeledSample> = data.iter().collect();
    let config = OptimizerConfig {
        epochs: 200,
        batch_size: 8,
        ..OptimizerConfig::toy()
    };
    let out = train_prior(&arch, &refs, &config, 3).unwrap();
    assert_eq!(out.history.len(), 200);
    let last = *out.history.last().unwrap();
    assert!(last < 0.1, "final loss {last}");
}

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let arch = small_arch(32, 5);
    let b = small_bundle();
    let prior_data: Vec<&LabeledSample> = b.prior.iter().collect();
    let init = arch.init_segmentation(8);
    let out = train_supervised(&arch, &prior_data, init.clone(), &short(0), 1).unwrap();
    assert_eq!(out.params, init);
    assert!(out.history.is_empty());

    let (zs, prior) = run(AblationSetting::G, 0, 4);
    let ab = configure_ablation(AblationSetting::G, &LossWeights::default());
    let fresh = TrainState::new(&arch, prior, &ab.switches, &short(0), 4);
    assert_eq!(zs.state.model, fresh.model);
    assert_eq!(zs.state.discriminator, fresh.discriminator);
    assert!(zs.history.is_empty());
}

#[test]
fn warm_start_begins_from_the_prior() {
    let (zs, prior) = run(AblationSetting::A, 0, 4);
    assert_eq!(zs.state.model, prior);
    let (zs, prior) = run(AblationSetting::B, 0, 4);
    assert_ne!(zs.state.model, prior);
}

#[test]
fn stage_two_is_deterministic() {
    let (a, _) = run(AblationSetting::G, 2, 11);
    let (b, _) = run(AblationSetting::G, 2, 11);
    assert_eq!(a.history, b.history);
    assert_eq!(a.state.model.fingerprint(), b.state.model.fingerprint());
    assert_eq!(a.state.discriminator.fingerprint(), b.state.discriminator.fingerprint());
    let (c, _) = run(AblationSetting::G, 2, 12);
    assert_ne!(a.state.model.fingerprint(), c.state.model.fingerprint());
}

#[test]
fn prior_frozen_and_discriminator_only_trained_with_adversarial_alignment() {
    let arch = small_arch(32, 5);
    for setting in AblationSetting::ALL {
        let (out, prior) = run(setting, 1, 2);
        assert_eq!(out.state.prior.fingerprint(), prior.fingerprint(), "{setting:?}");
        let ab = configure_ablation(setting, &LossWeights::default());
        let fresh = TrainState::new(&arch, prior, &ab.switches, &short(1), 2);
        let moved = out.state.discriminator != fresh.discriminator;
        assert_eq!(moved, ab.switches.rpa, "{setting:?}");
        assert_ne!(out.state.model, fresh.model, "{setting:?}");
    }
}

#[test]
fn history_has_one_record_per_step() {
    let (out, _) = run(AblationSetting::D, 3, 1);
    // 8 training images in batches of 4
    assert_eq!(out.history.len(), 3 * 2);
    for (i, r) in out.history.iter().enumerate() {
        assert_eq!(r.step, i as u64);
        assert_eq!(r.epoch, i / 2);
    }
}

#[test]
fn baseline_step_reduces_to_seen_loss() {
    let arch = small_arch(32, 5);
    let b = small_bundle();
    let train = b.mirror_train();
    let prior_data: Vec<&LabeledSample> = b.prior.iter().collect();
    let prior = train_prior(&arch, &prior_data, &short(2), 1).unwrap().params;
    let (seen, _) = partition_classes(5, &b.unseen).unwrap();
    let ab = configure_ablation(AblationSetting::A, &LossWeights::default());
    let config = OptimizerConfig {
        batch_size: train.len(),
        ..short(1)
    };
    let out = train_zeroshot(&arch, &train, &seen, prior.clone(), &ab, &config, 6, |_, _| Ok(())).unwrap();
    let first = out.history[0].losses;
    assert_eq!(first.seg, first.seen);
    assert_eq!((first.cross, first.adv, first.disc), (0.0, 0.0, 0.0));
    // one full batch through the warm-started model
    let mean: f64 = train
        .iter()
        .map(|s| {
            let f = arch.backbone_forward(&prior.backbone, &s.image).unwrap();
            let p = softmax_probs(&arch.segmentor_forward(&prior.head, f.output()).unwrap().logits);
            loss_seen(&p, &s.label.seen_view(&seen)).unwrap().value
        })
        .sum::<f64>()
        / train.len() as f64;
    assert!((first.seen - mean).abs() < 1e-9, "{} vs {mean}", first.seen);
}

#[test]
fn seen_loss_decreases() {
    let (out, _) = run(AblationSetting::C, 15, 3);
    let first = out.history[0].losses.seen;
    let last = out.history.last().unwrap().losses.seen;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn checkpoint_callback_follows_the_interval() {
    let arch = small_arch(32, 5);
    let b = small_bundle();
    let prior = arch.init_segmentation(1);
    let (seen, _) = partition_classes(5, &b.unseen).unwrap();
    let ab = configure_ablation(AblationSetting::C, &LossWeights::default());
    let config = OptimizerConfig {
        checkpoint_every: 2,
        ..short(5)
    };
    let mut epochs = Vec::new();
    train_zeroshot(&arch, &b.mirror_train(), &seen, prior, &ab, &config, 1, |s, h| {
        epochs.push((s.epoch, h.len()));
        Ok(())
    })
    .unwrap();
    assert_eq!(epochs, vec![(2, 4), (4, 8), (5, 10)]);
}

#[test]
fn no_seen_classes_is_rejected() {
    let arch = small_arch(32, 5);
    let b = small_bundle();
    let ab = configure_ablation(AblationSetting::G, &LossWeights::default());
    let err = train_zeroshot(&arch, &b.mirror_train(), &[], arch.init_segmentation(1), &ab, &short(1), 1, |_, _| Ok(()));
    assert!(err.is_err());
}
