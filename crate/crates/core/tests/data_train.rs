mod common;

use common::random_arch;
use nash_core::data::{load_cifar10_dir, parse_cifar10_bin, synth_dataset, Dataset, SynthSpec};
use nash_core::quant::quantize_weight_parts;
use nash_core::search::Variant;
use nash_core::tensor::Tensor;
use nash_core::train::{build_final_model, train_model, LrSchedule, Model, TrainConfig};
use nash_core::NashError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn synth(n_per_class: usize, seed: u64) -> Dataset {
    synth_dataset(&SynthSpec { classes: 4, n_per_class, hw: 16, channels: 3, noise: 0.1 }, seed).unwrap()
}

/// Multinomial logistic regression on raw pixels, full-batch gradient descent.
fn linear_probe(train: &Dataset, test: &Dataset) -> f64 {
    let k = train.class_count;
    let f = train.images.numel() / train.len();
    let mut w = vec![0.0f64; k * f];
    let mut b = vec![0.0f64; k];
    let logits = |w: &[f64], b: &[f64], x: &[f32]| -> Vec<f64> {
        (0..k).map(|c| b[c] + w[c * f..(c + 1) * f].iter().zip(x).map(|(a, v)| a * *v as f64).sum::<f64>()).collect()
    };
    for _ in 0..150 {
        let mut gw = vec![0.0f64; k * f];
        let mut gb = vec![0.0f64; k];
        for i in 0..train.len() {
            let x = &train.images.data[i * f..(i + 1) * f];
            let z = logits(&w, &b, x);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..k {
                let g = e[c] / s - (train.labels[i] == c) as u8 as f64;
                gb[c] += g;
                for (gw, v) in gw[c * f..(c + 1) * f].iter_mut().zip(x) {
                    *gw += g * *v as f64;
                }
            }
        }
        let lr = 0.5 / train.len() as f64;
        w.iter_mut().zip(&gw).for_each(|(a, g)| *a -= lr * g);
        b.iter_mut().zip(&gb).for_each(|(a, g)| *a -= lr * g);
    }
    let hits = (0..test.len())
        .filter(|&i| {
            let z = logits(&w, &b, &test.images.data[i * f..(i + 1) * f]);
            let best = (0..k).max_by(|&a, &c| z[a].total_cmp(&z[c]).then(c.cmp(&a))).unwrap();
            best == test.labels[i]
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn synthetic_task_is_linearly_separable() {
    let acc = linear_probe(&synth(32, 1), &synth(32, 2));
    assert!(acc >= 0.8, "probe accuracy {acc}");
}

fn record(label: u8, pixel: u8) -> Vec<u8> {
    let mut r = vec![label];
    r.extend(std::iter::repeat(pixel).take(3072));
    r
}

#[test]
fn cifar_files_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = record(5, 255);
    a.extend(record(0, 51));
    std::fs::write(dir.path().join("data_batch_1.bin"), &a).unwrap();
    std::fs::write(dir.path().join("data_batch_2.bin"), record(9, 0)).unwrap();
    std::fs::write(dir.path().join("test_batch.bin"), record(3, 102)).unwrap();
    let (train, test) = load_cifar10_dir(dir.path()).unwrap();
    assert_eq!(train.labels, [5, 0, 9]);
    assert_eq!(train.images.shape, [3, 3, 32, 32]);
    assert!(train.images.data[..3072].iter().all(|&v| v == 1.0));
    assert!(train.images.data[3072..6144].iter().all(|&v| v == 51.0 / 255.0));
    assert_eq!(test.labels, [3]);

    let bad = dir.path().join("short.bin");
    std::fs::write(&bad, &record(1, 1)[..3072]).unwrap();
    let err = parse_cifar10_bin(&bad).unwrap_err();
    assert!(matches!(err, NashError::Format { .. }), "{err}");
    assert_eq!(err.exit_code(), 4);

    let missing = tempfile::tempdir().unwrap();
    assert!(load_cifar10_dir(missing.path()).is_err());
}

fn baseline(seed: u64, w: u8, a: u8) -> Model {
    let mut arch = random_arch(Variant::Original, w, a, &mut ChaCha8Rng::seed_from_u64(seed));
    arch.init_seed = seed;
    build_final_model(arch).unwrap()
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let mut m = baseline(0, 1, 1);
    let before = m.net.store.checksum();
    let cfg = TrainConfig { epochs: 2, lr: 0.0, ..TrainConfig::default() };
    train_model(&mut m, &synth(8, 0), &cfg, None).unwrap();
    assert_eq!(m.net.store.checksum(), before);
}

#[test]
fn same_seed_same_history() {
    let d = synth(8, 4);
    let cfg = TrainConfig { epochs: 3, seed: 12, ..TrainConfig::default() };
    let run = || {
        let mut m = build_final_model(random_arch(Variant::V2, 1, 2, &mut ChaCha8Rng::seed_from_u64(6))).unwrap();
        let h = train_model(&mut m, &d, &cfg, None).unwrap();
        (h, m.net.store.checksum())
    };
    assert_eq!(run(), run());
}

#[test]
fn toy_task_trains_above_ninety_percent() {
    let d = synth(16, 10);
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 16,
        schedule: LrSchedule::StepDecay { at_fraction: 0.75, factor: 0.1 },
        ..TrainConfig::default()
    };
    let mut accs: Vec<f64> = (0..5)
        .map(|seed| {
            let mut m = baseline(seed, 2, 2);
            let h = train_model(&mut m, &d, &TrainConfig { seed, ..cfg.clone() }, None).unwrap();
            h.last().unwrap().top1
        })
        .collect();
    accs.sort_by(f64::total_cmp);
    assert!(accs[2] > 0.9, "train accuracies {accs:?}");
}

#[test]
fn checkpoint_rebuild_is_forward_identical() {
    let mut m = build_final_model(random_arch(Variant::V1, 1, 1, &mut ChaCha8Rng::seed_from_u64(2))).unwrap();
    train_model(&mut m, &synth(8, 0), &TrainConfig { epochs: 1, ..TrainConfig::default() }, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path()).unwrap();
    let back = Model::load(dir.path()).unwrap();
    let x = Tensor::randn(&[3, 3, 16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let d = m.net.logits(&x).unwrap().max_abs_diff(&back.net.logits(&x).unwrap());
    assert!(d < 1e-6, "{d}");
    assert_eq!(back.arch, m.arch);
}

#[test]
fn trained_weights_requantize_to_themselves() {
    let mut m = build_final_model(random_arch(Variant::V4, 2, 2, &mut ChaCha8Rng::seed_from_u64(3))).unwrap();
    train_model(&mut m, &synth(8, 0), &TrainConfig { epochs: 2, ..TrainConfig::default() }, None).unwrap();
    let mut checked = 0;
    for cell in &m.net.cells {
        let layers = cell.backbone.iter().chain(cell.edges.iter().flat_map(|e| e.convs.iter().flatten()));
        for layer in layers {
            let w = m.net.store.get(layer.weight);
            let once = quantize_weight_parts(w, &layer.wspec).unwrap();
            let deq = Tensor::new(w.shape.clone(), once.dequantized()).unwrap();
            let twice = quantize_weight_parts(&deq, &layer.wspec).unwrap();
            for (a, b) in once.dequantized().iter().zip(twice.dequantized()) {
                assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
            }
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn v4_nas_convs_use_eight_bit_weights() {
    let m = build_final_model(random_arch(Variant::V4, 1, 1, &mut ChaCha8Rng::seed_from_u64(9))).unwrap();
    let mut nas = 0;
    for cell in &m.net.cells {
        assert!(cell.backbone.iter().all(|l| l.wspec.bits == 1));
        for conv in cell.edges.iter().flat_map(|e| e.convs.iter().flatten()) {
            assert_eq!(conv.wspec.bits, 8);
            nas += 1;
        }
    }
    let v1 = build_final_model(random_arch(Variant::V1, 1, 1, &mut ChaCha8Rng::seed_from_u64(9))).unwrap();
    for cell in &v1.net.cells {
        assert!(cell.edges.iter().flat_map(|e| e.convs.iter().flatten()).all(|c| c.wspec.bits == 1));
    }
    assert!(nas > 0 || m.net.cells.iter().all(|c| c.edges.iter().all(|e| e.convs.iter().all(Option::is_none))));
}
