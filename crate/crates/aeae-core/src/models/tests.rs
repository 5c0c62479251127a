use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;

use super::*;
use crate::data::{synth_shapes, ImageShape};
use crate::tensor::{allclose, finite_diff_grad};
use crate::CoreError;

fn shape(h: usize, w: usize, c: usize) -> ImageShape {
    ImageShape { h, w, c }
}

fn small_shapes(count: usize, seed: u64) -> (Vec<Tensor>, Vec<usize>) {
    let d = synth_shapes(12, count, seed).unwrap();
    (d.images().to_vec(), d.labels().unwrap().to_vec())
}

// ── architecture ────────────────────────────────────────────────────────

#[test]
fn autoencoder_output_matches_input_shape() {
    let model = build_autoencoder(shape(28, 28, 1), 32, 0).unwrap();
    let img = Tensor::full(&[1, 28, 28], 0.5);
    let out = reconstruct(&model, &img).unwrap();
    assert_eq!(out.shape(), &[1, 28, 28]);
    assert!(out.data().iter().all(|v| *v > 0.0 && *v < 1.0));
}

#[test]
fn autoencoder_layer_shapes_for_32x32x3() {
    // 32 filters on 32x32x3: conv -> pool halves to 16x16 -> conv ->
    // upsample restores 32x32 -> conv back to 3 channels.
    let model = build_autoencoder(shape(32, 32, 3), 32, 1).unwrap();
    assert_eq!(model.conv1.kernel.shape(), &[32, 3, 3, 3]);
    assert_eq!(model.conv2.kernel.shape(), &[32, 32, 3, 3]);
    assert_eq!(model.conv3.kernel.shape(), &[3, 32, 3, 3]);
    let img = Tensor::full(&[3, 32, 32], 0.25);
    let out = reconstruct(&model, &img).unwrap();
    assert_eq!(out.shape(), &[3, 32, 32]);
}

#[test]
fn autoencoder_param_count_matches_hand_total() {
    // 16 filters, 1 channel: (16*1*9+16) + (16*16*9+16) + (1*16*9+1).
    let model = build_autoencoder(shape(16, 16, 1), 16, 0).unwrap();
    assert_eq!(model.param_count(), 160 + 2320 + 145);

    // 64 filters on 3 channels is the published configuration: 40,451.
    let big = build_autoencoder(shape(8, 8, 3), 64, 0).unwrap();
    assert_eq!(big.param_count(), 40_451);
}

#[test]
fn autoencoder_rejects_odd_dims() {
    assert!(matches!(
        build_autoencoder(shape(15, 16, 1), 8, 0),
        Err(CoreError::DimensionError(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn autoencoder_shape_symmetry_over_even_sizes(half_h in 1usize..5, half_w in 1usize..5) {
        let (h, w) = (half_h * 2, half_w * 2);
        let model = build_autoencoder(shape(h, w, 1), 4, 3).unwrap();
        let img = Tensor::full(&[1, h, w], 0.4);
        let out = reconstruct(&model, &img).unwrap();
        prop_assert_eq!(out.shape(), &[1, h, w]);
    }
}

// ── prediction ──────────────────────────────────────────────────────────

#[test]
fn zeroed_head_predicts_uniformly() {
    let mut model = build_classifier(shape(12, 12, 1), 4, 4, 4, 7).unwrap();
    model.head_weight = Tensor::zeros(&[4, model.head_weight.shape()[1]]);
    model.head_bias = Tensor::zeros(&[4]);
    let img = Tensor::full(&[1, 12, 12], 0.3);
    let p = predict(&model, &img).unwrap();
    for v in &p {
        assert!((v - 0.25).abs() < 1e-12);
    }
    // Tie logits resolve to the lowest index.
    assert_eq!(predict_label(&model, &img).unwrap(), 0);
}

#[test]
fn prediction_vector_sums_to_one_and_tracks_logits() {
    let model = build_classifier(shape(12, 12, 1), 4, 8, 4, 11).unwrap();
    let (images, _) = small_shapes(6, 5);
    for img in &images {
        let p = predict(&model, img).unwrap();
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        let label = predict_label(&model, img).unwrap();
        let argmax_p =
            p.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
        assert_eq!(label, argmax_p);
    }
}

#[test]
fn predict_rejects_wrong_shape() {
    let model = build_classifier(shape(12, 12, 1), 4, 4, 4, 7).unwrap();
    let img = Tensor::full(&[1, 8, 8], 0.3);
    assert!(matches!(predict(&model, &img), Err(CoreError::ShapeMismatch(_))));
}

// ── training ────────────────────────────────────────────────────────────

#[test]
fn autoencoder_fits_constant_dataset() {
    let mut model = build_autoencoder(shape(8, 8, 1), 6, 1).unwrap();
    let images: Vec<Tensor> = (0..8).map(|_| Tensor::full(&[1, 8, 8], 0.35)).collect();
    let cfg = TrainConfig { learning_rate: 0.01, batch_size: 8, epochs: 60, seed: 1 };
    let report = train_autoencoder(&mut model, &images, &cfg).unwrap();
    let last = *report.epoch_loss.last().unwrap();
    assert!(last < 1e-4, "constant image should be easy to fit, got {last}");
}

#[test]
fn autoencoder_training_is_deterministic_per_seed() {
    let (images, _) = small_shapes(24, 2);
    let run = |seed: u64| {
        let mut model = build_autoencoder(shape(12, 12, 1), 4, seed).unwrap();
        let cfg = TrainConfig { learning_rate: 0.01, batch_size: 8, epochs: 2, seed };
        train_autoencoder(&mut model, &images, &cfg).unwrap().epoch_loss
    };
    let a = run(5);
    let b = run(5);
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    let c = run(6);
    assert_ne!(a.last().unwrap().to_bits(), c.last().unwrap().to_bits());
}

#[test]
fn autoencoder_loss_decreases_on_desk_data_for_seeds_0_to_4() {
    let (images, _) = small_shapes(32, 77);
    for seed in 0..5u64 {
        let mut model = build_autoencoder(shape(12, 12, 1), 6, seed).unwrap();
        let cfg = TrainConfig { learning_rate: 0.01, batch_size: 8, epochs: 5, seed };
        let report = train_autoencoder(&mut model, &images, &cfg).unwrap();
        let first = report.epoch_loss[0];
        let last = *report.epoch_loss.last().unwrap();
        assert!(last < first, "seed {seed}: loss went {first} -> {last}");
    }
}

#[test]
fn desk_autoencoder_reaches_small_reconstruction_error() {
    // Regression baseline for the synthetic benign set.
    let (images, _) = small_shapes(48, 3);
    let mut model = build_autoencoder(shape(12, 12, 1), 8, 3).unwrap();
    let cfg = TrainConfig { learning_rate: 0.01, batch_size: 16, epochs: 12, seed: 3 };
    let report = train_autoencoder(&mut model, &images, &cfg).unwrap();
    let last = *report.epoch_loss.last().unwrap();
    assert!(last < 0.01, "final mean per-image MSE {last} >= 0.01");

    // Held-out reconstruction stays within 5x of the training error.
    let probe = synth_shapes(12, 8, 991).unwrap();
    let mut worst: f64 = 0.0;
    for img in probe.images() {
        let recon = reconstruct(&model, img).unwrap();
        let mse: f64 = img
            .data()
            .iter()
            .zip(recon.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / img.len() as f64;
        worst = worst.max(mse);
    }
    assert!(worst < 5.0 * last.max(0.002), "held-out MSE {worst} too far from {last}");
}

#[test]
fn training_rejects_empty_and_out_of_range_inputs() {
    let mut ae = build_autoencoder(shape(8, 8, 1), 4, 0).unwrap();
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    assert!(matches!(
        train_autoencoder(&mut ae, &[], &cfg),
        Err(CoreError::NotEnoughData(_))
    ));
    let bad = vec![Tensor::full(&[1, 8, 8], 1.5)];
    assert!(train_autoencoder(&mut ae, &bad, &cfg).is_err());

    let mut clf = build_classifier(shape(8, 8, 1), 2, 2, 2, 0).unwrap();
    let img = vec![Tensor::full(&[1, 8, 8], 0.5)];
    assert!(matches!(
        train_classifier(&mut clf, &img, &[7], &cfg),
        Err(CoreError::LabelOutOfRange { .. })
    ));
}

#[test]
fn classifier_saturates_on_single_class_dataset() {
    let (images, _) = small_shapes(12, 9);
    let labels = vec![1usize; images.len()];
    let mut model = build_classifier(shape(12, 12, 1), 2, 4, 4, 2).unwrap();
    let cfg = TrainConfig { learning_rate: 0.005, batch_size: 4, epochs: 6, seed: 2 };
    train_classifier(&mut model, &images, &labels, &cfg).unwrap();
    assert_eq!(accuracy(&model, &images, &labels).unwrap(), 1.0);
}

#[test]
fn classifier_training_is_deterministic_per_seed() {
    let (images, labels) = small_shapes(24, 4);
    let run = || {
        let mut model = build_classifier(shape(12, 12, 1), 2, 4, 4, 8).unwrap();
        let cfg = TrainConfig { learning_rate: 0.005, batch_size: 8, epochs: 2, seed: 8 };
        train_classifier(&mut model, &images, &labels, &cfg).unwrap().epoch_loss
    };
    let a = run();
    let b = run();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

// ── Adam ────────────────────────────────────────────────────────────────

#[test]
fn adam_zero_gradient_leaves_parameters_unchanged() {
    let mut p = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
    let before = p.data().to_vec();
    let mut adam = AdamState::new(&[3]);
    let grads = vec![vec![0.0; 3]];
    adam.apply(&mut [&mut p], &grads, 0.01);
    adam.apply(&mut [&mut p], &grads, 0.01);
    assert_eq!(p.data(), &before[..]);
    assert_eq!(adam.step_count(), 2);
}

#[test]
fn adam_moves_against_gradient() {
    let mut p = Tensor::from_vec(vec![1.0]);
    let mut adam = AdamState::new(&[1]);
    adam.apply(&mut [&mut p], &[vec![2.5]], 0.1);
    assert!(p.data()[0] < 1.0);
}

// ── gradients through full networks ─────────────────────────────────────

#[test]
fn classifier_input_gradient_matches_finite_differences() {
    let model = build_classifier(shape(8, 8, 1), 2, 3, 4, 13).unwrap();
    let img = {
        let d = synth_shapes(8, 4, 55).unwrap();
        d.image(2).clone()
    };
    let mut tape = Tape::new();
    let xv = tape.var(img.clone().with_grad());
    let logits = model.logits_on_tape(&mut tape, xv).unwrap();
    let loss = tape.cross_entropy(logits, 1).unwrap();
    tape.backward(loss).unwrap();
    let analytic = tape.grad(xv).unwrap().to_vec();

    let numeric = finite_diff_grad(
        |probe| {
            let mut t = Tape::new();
            let pv = t.constant(probe.clone());
            let lg = model.logits_on_tape(&mut t, pv).unwrap();
            let l = t.cross_entropy(lg, 1).unwrap();
            t.data(l)[0]
        },
        &img,
        1e-4,
    )
    .unwrap();
    assert!(allclose(&analytic, numeric.data(), 1e-4, 1e-8));
}

// ── checkpoints ─────────────────────────────────────────────────────────

#[test]
fn autoencoder_checkpoint_roundtrips_bit_exactly() {
    let (images, _) = small_shapes(8, 21);
    let mut model = build_autoencoder(shape(12, 12, 1), 4, 21).unwrap();
    let cfg = TrainConfig { learning_rate: 0.01, batch_size: 4, epochs: 1, seed: 21 };
    train_autoencoder(&mut model, &images, &cfg).unwrap();

    let bytes = encode_autoencoder(&model);
    let back = decode_autoencoder(&bytes).unwrap();
    assert_eq!(model, back);

    let out_a = reconstruct(&model, &images[0]).unwrap();
    let out_b = reconstruct(&back, &images[0]).unwrap();
    assert_eq!(
        out_a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        out_b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn classifier_checkpoint_roundtrips_bit_exactly() {
    let model = build_classifier(shape(12, 12, 1), 3, 5, 4, 31).unwrap();
    let bytes = encode_classifier(&model);
    let back = decode_classifier(&bytes).unwrap();
    assert_eq!(model, back);
}

#[test]
fn truncated_checkpoint_is_a_corrupt_file() {
    let model = build_autoencoder(shape(8, 8, 1), 4, 0).unwrap();
    let bytes = encode_autoencoder(&model);
    let cut = &bytes[..bytes.len() - 5];
    assert!(matches!(decode_autoencoder(cut), Err(CoreError::CorruptCheckpoint(_))));
}

#[test]
fn wrong_magic_is_a_version_error() {
    let model = build_autoencoder(shape(8, 8, 1), 4, 0).unwrap();
    let mut bytes = encode_autoencoder(&model);
    bytes[0] = b'X';
    assert!(matches!(decode_autoencoder(&bytes), Err(CoreError::VersionMismatch(_))));

    // Future format version is also refused.
    let mut vbytes = encode_autoencoder(&model);
    vbytes[4..8].copy_from_slice(&99u32.to_le_bytes());
    assert!(matches!(decode_autoencoder(&vbytes), Err(CoreError::VersionMismatch(_))));
}

#[test]
fn trailing_garbage_is_a_corrupt_file() {
    let model = build_autoencoder(shape(8, 8, 1), 4, 0).unwrap();
    let mut bytes = encode_autoencoder(&model);
    bytes.push(0);
    assert!(matches!(decode_autoencoder(&bytes), Err(CoreError::CorruptCheckpoint(_))));
}

#[test]
fn checkpoint_kind_confusion_is_detected() {
    let ae = build_autoencoder(shape(8, 8, 1), 4, 0).unwrap();
    let bytes = encode_autoencoder(&ae);
    assert!(matches!(decode_classifier(&bytes), Err(CoreError::CorruptCheckpoint(_))));
}
