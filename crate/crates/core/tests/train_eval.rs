use std::collections::BTreeSet;

use proptest::prelude::*;
use shelfnet::arch::*;
use shelfnet::tensor::{Sgd, SgdConfig, Shape4, Tape, Tensor4};
use shelfnet::train::*;

fn mini_net(width: usize, classes: usize, seed: u64) -> ExecutableNet<f32> {
    let g = build_shelf(&ShelfSpec::mini(Variant::Shelfnet, width, classes)).unwrap();
    ExecutableNet::instantiate(g, InitPolicy::default(), seed).unwrap()
}

fn shapes(first: usize, n: usize, size: usize) -> SampleBatch<f32> {
    synth_dataset(0, first, n, (size, size), 4, &SynthConfig::default()).unwrap()
}

fn toy_config(steps: usize, batch_size: usize, base_lr: f64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size,
        schedule: LrSchedule::new(base_lr, steps),
        sgd: SgdConfig::default(),
        loss: LossKind::CrossEntropy,
        seed: 0,
        eval_every: 0,
        augment: None,
    }
}

fn params_of(net: &ExecutableNet<f32>) -> Vec<Tensor4<f32>> {
    net.store().iter().map(|(_, p)| p.value.clone()).collect()
}

// ---- schedule ----

#[test]
fn poly_lr_endpoints_and_midpoint() {
    let s = LrSchedule::new(0.01, 1000);
    assert_eq!(poly_lr(&s, 0).unwrap(), 0.01);
    assert_eq!(poly_lr(&s, 1000).unwrap(), 0.0);
    let mid = poly_lr(&s, 500).unwrap();
    assert!((mid - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
    assert!((mid - 0.005_358_9).abs() < 1e-7);
    assert!(poly_lr(&s, 1001).is_err());
    assert!(poly_lr(&LrSchedule::new(0.01, 0), 0).is_err());
}

proptest! {
    #[test]
    fn poly_lr_is_monotone(base in 1e-4f64..1.0, total in 1usize..5000, a in 0usize..5000, b in 0usize..5000) {
        let s = LrSchedule::new(base, total);
        let (a, b) = (a.min(total), b.min(total));
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(poly_lr(&s, lo).unwrap() >= poly_lr(&s, hi).unwrap());
        prop_assert!(poly_lr(&s, hi).unwrap() >= 0.0);
    }
}

// ---- losses ----

fn log_softmax_nll(logits: &Tensor4<f64>, labels: &[u8]) -> Vec<f64> {
    let s = logits.shape();
    let mut out = Vec::new();
    for y in 0..s.h {
        for x in 0..s.w {
            let z: Vec<f64> = (0..s.c).map(|c| logits.at(0, c, y, x)).collect();
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let l = labels[y * s.w + x];
            out.push(if l == IGNORE_INDEX { f64::NAN } else { lse - z[l as usize] });
        }
    }
    out
}

fn ohem_case() -> (Tensor4<f64>, Vec<u8>) {
    let logits = Tensor4::from_fn(Shape4::new(1, 3, 3, 3), |_, c, y, x| ((c * 7 + y * 3 + x * 5) % 11) as f64 * 0.4 - 2.0);
    let labels = vec![0, 1, 2, 2, IGNORE_INDEX, 0, 1, 1, 2];
    (logits, labels)
}

fn tape_loss(logits: &Tensor4<f64>, labels: &[u8], kind: LossKind) -> f64 {
    let mut tape = Tape::new();
    let z = tape.leaf(logits.clone());
    let l = segmentation_loss(&mut tape, z, labels, kind).unwrap();
    tape.value(l).item()
}

#[test]
fn ohem_matches_hand_selection() {
    let (logits, labels) = ohem_case();
    let nll = log_softmax_nll(&logits, &labels);
    for (threshold, min_kept) in [(OHEM_THRESHOLD, 1), (OHEM_THRESHOLD, 6), (1.5, 2), (10.0, 3)] {
        let mut valid: Vec<(usize, f64)> = nll.iter().cloned().enumerate().filter(|(_, v)| !v.is_nan()).collect();
        let mut kept: Vec<f64> = valid.iter().filter(|(_, v)| *v > threshold).map(|(_, v)| *v).collect();
        if kept.len() < min_kept {
            valid.sort_by(|a, b| b.1.total_cmp(&a.1));
            kept = valid.iter().take(min_kept).map(|(_, v)| *v).collect();
        }
        let oracle = kept.iter().sum::<f64>() / kept.len() as f64;
        let got = tape_loss(&logits, &labels, LossKind::Ohem { threshold, min_kept: Some(min_kept) });
        assert!((got - oracle).abs() < 1e-12, "threshold {threshold} min_kept {min_kept}: {got} vs {oracle}");
    }
}

#[test]
fn ohem_with_zero_threshold_is_cross_entropy() {
    let (logits, labels) = ohem_case();
    let ce = tape_loss(&logits, &labels, LossKind::CrossEntropy);
    let ohem = tape_loss(&logits, &labels, LossKind::Ohem { threshold: 0.0, min_kept: Some(1) });
    assert!((ce - ohem).abs() < 1e-12);
}

#[test]
fn ohem_select_edge_cases() {
    assert!(ohem_select(&[1.0, 2.0], &[false, false], 0.5, 1).is_err());
    assert!(ohem_select(&[1.0], &[true], 0.5, 0).is_err());
    // Ties keep index order when topping up.
    let m = ohem_select(&[0.1, 0.2, 0.2, 0.05], &[true; 4], 5.0, 2).unwrap();
    assert_eq!(m, vec![false, true, true, false]);
}

// ---- metrics ----

#[test]
fn miou_hand_examples() {
    let truth = vec![0u8, 0, 1, 1];
    let mut cm = ConfusionMatrix::new(2, IGNORE_INDEX);
    cm.update(&[0, 0, 0, 0], &truth).unwrap();
    let iou = cm.iou();
    assert_eq!(iou, vec![Some(0.5), Some(0.0)]);
    assert_eq!(cm.miou(), 0.25);

    let mut perfect = ConfusionMatrix::new(3, IGNORE_INDEX);
    perfect.update(&truth, &truth).unwrap();
    assert_eq!(perfect.miou(), 1.0);
    assert_eq!(perfect.iou()[2], None);

    let mut ignored = ConfusionMatrix::new(2, IGNORE_INDEX);
    ignored.update(&[1, 1], &[0, IGNORE_INDEX]).unwrap();
    assert_eq!(ignored.total(), 1);
    assert!(ignored.update(&[0], &[0, 1]).is_err());
}

proptest! {
    #[test]
    fn miou_invariant_under_label_permutation(
        pairs in prop::collection::vec((0u8..4, 0u8..4), 1..200),
        perm in Just(vec![0u8, 1, 2, 3]).prop_shuffle(),
    ) {
        let (pred, truth): (Vec<u8>, Vec<u8>) = pairs.iter().cloned().unzip();
        let mut a = ConfusionMatrix::new(4, IGNORE_INDEX);
        a.update(&pred, &truth).unwrap();
        let p2: Vec<u8> = pred.iter().map(|&v| perm[v as usize]).collect();
        let t2: Vec<u8> = truth.iter().map(|&v| perm[v as usize]).collect();
        let mut b = ConfusionMatrix::new(4, IGNORE_INDEX);
        b.update(&p2, &t2).unwrap();
        prop_assert!((a.miou() - b.miou()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a.miou()));
    }
}

// ---- synthetic data ----

#[test]
fn synth_is_deterministic_and_sliceable() {
    let a = shapes(0, 6, 32);
    let b = shapes(0, 6, 32);
    assert_eq!(a.images, b.images);
    assert_eq!(a.labels, b.labels);
    let tail = shapes(4, 2, 32);
    assert_eq!(tail.images, a.select(&[4, 5]).images);
    assert!(a.labels.iter().all(|&l| (l as usize) < 4));
    assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_ne!(shapes(0, 1, 32).images, synth_dataset::<f32>(1, 0, 1, (32, 32), 4, &SynthConfig::default()).unwrap().images);
}

#[test]
fn synth_rejects_degenerate_sizes() {
    let cfg = SynthConfig::default();
    assert!(synth_dataset::<f32>(0, 0, 1, (6, 6), 4, &cfg).is_err());
    assert!(synth_dataset::<f32>(0, 0, 1, (33, 32), 4, &cfg).is_err());
    assert!(synth_dataset::<f32>(0, 0, 0, (32, 32), 4, &cfg).is_err());
    assert!(synth_dataset::<f32>(0, 0, 1, (32, 32), 1, &cfg).is_err());
}

#[test]
fn synth_class_frequencies_match_priors() {
    let k = 4;
    let cfg = SynthConfig::default();
    let batch = synth_dataset::<f32>(0, 0, 1000, (64, 64), k, &cfg).unwrap();
    let mut counts = vec![0usize; k];
    for &l in &batch.labels {
        counts[l as usize] += 1;
    }
    let expected = expected_class_frequencies(&cfg, k);
    assert!((expected.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for c in 0..k {
        let got = counts[c] as f64 / batch.labels.len() as f64;
        assert!((got / expected[c] - 1.0).abs() < 0.2, "class {c}: {got} vs prior {}", expected[c]);
    }
}

#[test]
fn dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let batch = shapes(0, 3, 32);
    save_dataset(dir.path(), &batch).unwrap();
    let back = load_dataset::<f32>(dir.path(), 4).unwrap();
    assert_eq!(back.labels, batch.labels);
    // Images are stored as 8-bit.
    assert!(back.images.max_abs_diff(&batch.images) <= 0.5 / 255.0 + 1e-6);
    assert!(load_dataset::<f32>(&dir.path().join("missing"), 4).is_err());
}

// ---- augmentation ----

#[test]
fn identity_policy_is_identity() {
    let batch = shapes(0, 3, 32);
    let out = augment(&batch, 7, &AugmentPolicy::default()).unwrap();
    assert_eq!(out.labels, batch.labels);
    assert!(out.images.max_abs_diff(&batch.images) < 1e-6);
}

#[test]
fn forced_flip_is_an_involution() {
    let batch = shapes(0, 2, 32);
    let policy = AugmentPolicy {
        force_flip: true,
        ..AugmentPolicy::default()
    };
    let once = augment(&batch, 1, &policy).unwrap();
    assert_eq!(once.images, batch.images.flip_horizontal());
    let twice = augment(&once, 2, &policy).unwrap();
    assert_eq!(twice.images, batch.images);
    assert_eq!(twice.labels, batch.labels);
}

#[test]
fn augment_labels_come_from_the_source() {
    let batch = shapes(0, 4, 32);
    for seed in 0..20 {
        let out = augment(&batch, seed, &AugmentPolicy::standard((24, 40))).unwrap();
        assert_eq!((out.height(), out.width()), (24, 40));
        for i in 0..batch.len() {
            let src: BTreeSet<u8> = batch.label_map(i).iter().copied().collect();
            assert!(out.label_map(i).iter().all(|l| *l == IGNORE_INDEX || src.contains(l)), "seed {seed} image {i}");
        }
    }
    let a = augment(&batch, 3, &AugmentPolicy::standard((32, 32))).unwrap();
    let b = augment(&batch, 3, &AugmentPolicy::standard((32, 32))).unwrap();
    assert_eq!(a, b);
    let bad = AugmentPolicy {
        scale_range: (2.0, 1.0),
        ..AugmentPolicy::default()
    };
    assert!(augment(&batch, 0, &bad).is_err());
}

/// On flat-colour data the class of a pixel can be read off its colour, so
/// labelling the augmented image must agree with augmenting the labels.
#[test]
fn augment_commutes_with_labelling_on_noise_free_data() {
    let cfg = SynthConfig {
        noise_free: true,
        ..SynthConfig::default()
    };
    let batch = synth_dataset::<f32>(2, 0, 4, (32, 32), 4, &cfg).unwrap();
    let colours: Vec<[f64; 3]> = (0..4).map(shelfnet::train::class_color).collect();
    let classify = |img: &Tensor4<f32>, i: usize, y: usize, x: usize| {
        let px = [0, 1, 2].map(|c| img.at(i, c, y, x) as f64);
        colours.iter().position(|col| col.iter().zip(&px).all(|(a, b)| (a - b).abs() < 1e-4))
    };
    for i in 0..batch.len() {
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(classify(&batch.images, i, y, x), Some(batch.label_map(i)[y * 32 + x] as usize));
            }
        }
    }
    let (mut checked, mut labelled) = (0, 0);
    for seed in 0..10 {
        let out = augment(&batch, seed, &AugmentPolicy::standard((32, 32))).unwrap();
        for i in 0..out.len() {
            for y in 0..32 {
                for x in 0..32 {
                    let l = out.label_map(i)[y * 32 + x];
                    if l == IGNORE_INDEX {
                        continue;
                    }
                    labelled += 1;
                    // Pixels blending two regions match no class colour.
                    if let Some(c) = classify(&out.images, i, y, x) {
                        assert_eq!(c, l as usize, "seed {seed} image {i} at ({y}, {x})");
                        checked += 1;
                    }
                }
            }
        }
    }
    assert!(checked as f64 > 0.7 * labelled as f64, "{checked} of {labelled}");
}

// ---- multi-scale ----

#[test]
fn single_scale_equals_predict() {
    let mut net = mini_net(4, 4, 1);
    let x = shapes(0, 2, 64).images;
    let plain = net.predict(&x).unwrap();
    assert_eq!(multi_scale_predict(&mut net, &x, &[1.0], false).unwrap(), plain);
    let one = multi_scale_predict(&mut net, &x, &[1.0, 0.5], true).unwrap();
    let two = multi_scale_predict(&mut net, &x, &[1.0, 0.5, 1.0, 0.5], true).unwrap();
    assert!(one.max_abs_diff(&two) < 1e-6);
    assert_eq!(multi_scale_predict(&mut net, &x, &[1.0, 1.0], false).unwrap(), plain);
    assert!(multi_scale_predict(&mut net, &x, &[], false).is_err());
    assert!(multi_scale_predict(&mut net, &x, &[0.0], false).is_err());
}

// ---- training ----

#[test]
fn zero_lr_leaves_parameters_unchanged() {
    let mut net = mini_net(4, 4, 0);
    let before = params_of(&net);
    let mut opt = Sgd::new(SgdConfig::default());
    let data = shapes(0, 4, 32);
    train_loop(&mut net, &mut opt, &data, None, &toy_config(3, 2, 0.0), 0, None).unwrap();
    assert_eq!(params_of(&net), before);
}

#[test]
fn training_is_deterministic_and_traced() {
    let data = shapes(0, 6, 32);
    let mut cfg = toy_config(4, 3, 0.05);
    cfg.eval_every = 2;
    cfg.augment = Some(AugmentPolicy::standard((32, 32)));
    let run = || {
        let mut net = mini_net(4, 4, 3);
        let mut opt = Sgd::new(SgdConfig::default());
        let mut trace = Vec::new();
        let rep = train_loop(&mut net, &mut opt, &data, Some(&data), &cfg, 0, Some(&mut trace)).unwrap();
        (rep, params_of(&net), String::from_utf8(trace).unwrap())
    };
    let (ra, pa, ta) = run();
    let (rb, pb, tb) = run();
    assert_eq!(ra.records, rb.records);
    assert_eq!(pa, pb);
    assert_eq!(ta, tb);
    let lines: Vec<serde_json::Value> = ta.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0]["step"], 0);
    assert!(lines[0].get("miou").is_none());
    assert!(lines[1]["miou"].is_f64());
    assert!(lines[3]["lr"].as_f64().unwrap() > 0.0);
}

#[test]
fn training_rejects_bad_configs() {
    let mut net = mini_net(4, 4, 0);
    let mut opt = Sgd::new(SgdConfig::default());
    let data = shapes(0, 2, 32);
    assert!(train_loop(&mut net, &mut opt, &data, None, &toy_config(1, 3, 0.1), 0, None).is_err());
    let three = synth_dataset::<f32>(0, 0, 2, (32, 32), 3, &SynthConfig::default()).unwrap();
    assert!(train_loop(&mut net, &mut opt, &three, None, &toy_config(1, 2, 0.1), 0, None).is_err());
    // Past the end of the schedule.
    assert!(train_loop(&mut net, &mut opt, &data, None, &toy_config(1, 2, 0.1), 1, None).is_err());
}

#[test]
fn huge_lr_reports_divergence() {
    let mut net = mini_net(4, 4, 0);
    let mut opt = Sgd::new(SgdConfig::default());
    let data = shapes(0, 2, 32);
    let err = train_loop(&mut net, &mut opt, &data, None, &toy_config(50, 2, 1e12), 0, None).unwrap_err();
    assert!(matches!(err, TrainError::Diverged { .. }), "{err}");
}

/// Overfits four images, then checks that multi-scale inference on the
/// trained net changes some predicted labels.
#[test]
fn overfits_four_images() {
    let data = shapes(0, 4, 64);
    let mut net = mini_net(8, 4, 0);
    let mut opt = Sgd::new(SgdConfig::default());
    let rep = train_loop(&mut net, &mut opt, &data, None, &toy_config(300, 4, 0.2), 0, None).unwrap();
    assert!(rep.final_loss < 0.05, "final loss {}", rep.final_loss);

    let single = shelfnet::tensor::kernels::argmax_channels(&net.predict(&data.images).unwrap());
    let multi = multi_scale_predict(&mut net, &data.images, &EVAL_SCALES, true).unwrap();
    let multi = shelfnet::tensor::kernels::argmax_channels(&multi);
    assert!(single.iter().zip(&multi).any(|(a, b)| a != b));
}

// ---- checkpoints ----

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let data = shapes(0, 4, 32);
    let mut net = mini_net(4, 4, 5);
    let mut opt = Sgd::new(SgdConfig::default());
    train_loop(&mut net, &mut opt, &data, None, &toy_config(2, 2, 0.05), 0, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    save_checkpoint(&path, &Checkpoint::capture(&net, &opt, 2)).unwrap();
    let ckpt = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(ckpt, Checkpoint::capture(&net, &opt, 2));
    let (mut back, back_opt) = ckpt.instantiate().unwrap();
    assert_eq!(net.predict(&data.images).unwrap(), back.predict(&data.images).unwrap());
    assert_eq!(params_of(&net), params_of(&back));
    assert_eq!(opt.velocities().count(), back_opt.velocities().count());
    assert_eq!(RngState::capture(net.rng()), RngState::capture(back.rng()));
    assert!(load_checkpoint::<f64>(&path).is_err());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let data = shapes(0, 6, 32);
    let cfg = |steps| TrainConfig {
        schedule: LrSchedule::new(0.05, 6),
        ..toy_config(steps, 2, 0.05)
    };
    let mut straight = mini_net(4, 4, 9);
    let mut opt = Sgd::new(SgdConfig::default());
    train_loop(&mut straight, &mut opt, &data, None, &cfg(6), 0, None).unwrap();

    let mut first = mini_net(4, 4, 9);
    let mut opt1 = Sgd::new(SgdConfig::default());
    train_loop(&mut first, &mut opt1, &data, None, &cfg(3), 0, None).unwrap();
    let bytes = Checkpoint::capture(&first, &opt1, 3).to_bytes();
    let ckpt = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    let (mut resumed, mut opt2) = ckpt.instantiate().unwrap();
    train_loop(&mut resumed, &mut opt2, &data, None, &cfg(3), ckpt.iteration as usize, None).unwrap();
    assert_eq!(params_of(&straight), params_of(&resumed));
}

#[test]
fn corrupt_checkpoints_are_rejected_without_side_effects() {
    let mut net = mini_net(4, 4, 0);
    let mut opt = Sgd::new(SgdConfig::default());
    let bytes = Checkpoint::capture(&net, &opt, 0).to_bytes();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes[..cut]), Err(TrainError::Corrupt(_))), "cut {cut}");
    }
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 1;
    assert!(matches!(Checkpoint::<f32>::from_bytes(&flipped), Err(TrainError::Corrupt(_))));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(Checkpoint::<f32>::from_bytes(&version), Err(TrainError::Version { found: 9, .. })));

    // A checkpoint missing one tensor leaves the target untouched.
    let other = mini_net(4, 4, 1);
    let mut ckpt = Checkpoint::capture(&other, &opt, 0);
    ckpt.tensors.retain(|(n, _)| !n.ends_with("/var"));
    let before = params_of(&net);
    assert!(matches!(ckpt.restore(&mut net, &mut opt), Err(TrainError::MissingTensor(_))));
    assert_eq!(params_of(&net), before);

    let wrong = mini_net(8, 4, 0);
    assert!(matches!(Checkpoint::capture(&wrong, &opt, 0).restore(&mut net, &mut opt), Err(TrainError::Incompatible(_))));
}

#[test]
fn shared_kernels_are_stored_once() {
    let opt = Sgd::<f32>::new(SgdConfig::default());
    let count = |shared: bool| {
        let mut spec = ShelfSpec::mini(Variant::Shelfnet, 4, 4);
        if !shared {
            spec = spec.unshared();
        }
        let net = ExecutableNet::<f32>::instantiate(build_shelf(&spec).unwrap(), InitPolicy::default(), 0).unwrap();
        let s_blocks = net.graph().nodes.iter().filter(|n| matches!(n.kind, BlockKind::SBlock { .. })).count();
        let ckpt = Checkpoint::capture(&net, &opt, 0);
        (ckpt.tensors.iter().filter(|(n, _)| n.starts_with("param/")).count(), s_blocks)
    };
    let (shared, s_blocks) = count(true);
    let (unshared, _) = count(false);
    assert_eq!(s_blocks, 12);
    assert_eq!(unshared - shared, s_blocks);
}

// ---- timing ----

#[test]
fn bench_reports_consistent_stats() {
    let mut net = mini_net(4, 4, 0);
    let one = bench_forward(&mut net, (64, 64), 1).unwrap();
    assert_eq!(one.repetitions, 1);
    assert_eq!(one.mean, one.median);
    let stats = bench_forward(&mut net, (64, 64), 5).unwrap();
    assert!(stats.min <= stats.median && stats.median <= stats.max);
    assert!(stats.mean >= stats.min && stats.mean <= stats.max);
    assert_eq!(stats.macs, shelfnet::analysis::count_flops(net.graph(), 64, 64).unwrap().total_macs);
    assert!(stats.macs_per_second > 0.0);
    assert!(bench_forward(&mut net, (64, 64), 0).is_err());
    assert!(bench_forward(&mut net, (60, 64), 1).is_err());
}

#[test]
fn bench_time_tracks_macs() {
    let mut net = mini_net(8, 4, 0);
    // Interleaved rounds and minima, so other tests sharing the CPU skew
    // both sizes alike.
    let (mut small, mut large) = (f64::INFINITY, f64::INFINITY);
    let mut macs = (0, 0);
    for _ in 0..5 {
        let s = bench_forward(&mut net, (64, 64), 3).unwrap();
        let l = bench_forward(&mut net, (128, 128), 3).unwrap();
        small = small.min(s.min);
        large = large.min(l.min);
        macs = (s.macs, l.macs);
    }
    let mac_ratio = macs.1 as f64 / macs.0 as f64;
    let time_ratio = large / small;
    assert!((3.9..=4.0).contains(&mac_ratio), "{mac_ratio}");
    assert!(time_ratio > mac_ratio / 2.0 && time_ratio < mac_ratio * 2.0, "time ratio {time_ratio} vs MAC ratio {mac_ratio}");
}
