use hsib_data::{extract_patches, HsiCube, LabelRaster, PatchSet};
use hsib_models::*;
use hsib_tensor::gradcheck::max_rel_error;
use hsib_tensor::{RngState, Tape};

fn build(spec: &ArchSpec) -> ModelGraph {
    ModelGraph::build(spec, &mut RngState::new(1)).unwrap()
}

#[test]
fn cnn2d_default_counts() {
    let m = build(&ArchSpec::cnn2d(16));
    let c = count_params(&m);
    let layers: Vec<usize> = c.layers.iter().map(|(_, n)| *n).collect();
    assert_eq!(layers, vec![50_050, 125_100, 250_100, 1_616]);
    assert_eq!(c.total, 426_866);
    assert_eq!(c.bn, 300);
    assert_eq!(ArchSpec::cnn2d(16).flatten_len().unwrap(), 2_500);
}

#[test]
fn pruned_counts() {
    for ((f1, f2, h), total, layers) in [
        ((15, 30, 30), 49_321, vec![15_015, 11_280, 22_530, 496]),
        ((10, 20, 20), 25_386, vec![10_010, 5_020, 10_020, 336]),
        ((5, 10, 10), 8_951, vec![5_005, 1_260, 2_510, 176]),
    ] {
        let spec = ArchSpec::cnn2d_widths(16, f1, f2, h);
        let m = build(&spec);
        let c = count_params(&m);
        assert_eq!(c.total, total);
        assert_eq!(c.layers.iter().map(|(_, n)| *n).collect::<Vec<_>>(), layers);
        assert_eq!(spec.total_params().unwrap(), total);
    }
}

#[test]
fn closed_forms_match_tensors() {
    // c_in*c_out*k^2 + c_out per conv, d_in*d_out + d_out per fc
    for spec in [
        ArchSpec::cnn2d(9),
        ArchSpec::cnn2d_widths(16, 7, 3, 11),
        ArchSpec::mlp(40, 16),
        ArchSpec::cnn1d(40, 16),
        ArchSpec::cnn1d(103, 9),
    ] {
        let m = build(&spec);
        let mut want = Vec::new();
        let [f1, f2] = spec.filters;
        let [k1, k2] = spec.kernels;
        match spec.kind {
            ModelKind::Cnn2d => {
                want.push(spec.in_channels * f1 * k1 * k1 + f1);
                want.push(f1 * f2 * k2 * k2 + f2);
            }
            ModelKind::Cnn1d => {
                want.push(f1 * k1 + f1);
                want.push(f1 * f2 * k2 + f2);
            }
            ModelKind::Mlp => {}
        }
        let flat = spec.flatten_len().unwrap();
        want.push(flat * spec.hidden + spec.hidden);
        want.push(spec.hidden * spec.classes + spec.classes);
        assert_eq!(count_params(&m).layers.iter().map(|(_, n)| *n).collect::<Vec<_>>(), want);
        m.check_consistency().unwrap();
    }
}

#[test]
fn spectral_model_sizes() {
    assert_eq!(ArchSpec::mlp(40, 16).total_params().unwrap(), 14_608);
    assert_eq!(ArchSpec::cnn1d(40, 16).total_params().unwrap(), 25_996);
}

#[test]
fn zero_width_is_rejected() {
    let spec = ArchSpec::cnn2d_widths(16, 0, 100, 100);
    assert!(ModelGraph::<f32>::build(&spec, &mut RngState::new(0)).is_err());
    let mut tiny = ArchSpec::cnn2d(16);
    tiny.patch = 7;
    assert!(tiny.validate().is_err());
}

#[test]
fn memory_conventions() {
    let m = build(&ArchSpec::cnn2d(16));
    let f32_mb = estimate_memory(&m, &uniform_dtype(&m, 4)).unwrap();
    assert!((f32_mb - 1.707464).abs() < 1e-9);
    assert_eq!(format!("{f32_mb:.2}"), "1.71");
    let dyn_mb = estimate_memory(&m, &fc_int8_dtype(&m)).unwrap();
    let oracle = ((50_050 + 125_100) * 4 + (250_100 + 1_616)) as f64 / 1e6;
    assert_eq!(dyn_mb, oracle);
    assert!((0.95..=0.96).contains(&dyn_mb));
    let p = build(&ArchSpec::cnn2d_widths(16, 15, 30, 30));
    let mb = estimate_memory(&p, &uniform_dtype(&p, 4)).unwrap();
    assert!((mb - 0.197284).abs() < 1e-9);
    let mut partial = uniform_dtype(&m, 4);
    partial.remove("fc2");
    assert!(matches!(estimate_memory(&m, &partial), Err(ModelError::MissingLayer(_))));
}

#[test]
fn forward_shapes_for_all_kinds() {
    for spec in [ArchSpec::cnn2d(16), ArchSpec::mlp(40, 9), ArchSpec::cnn1d(40, 9)] {
        let mut m = build(&spec);
        m.set_training(false);
        let shape = m.input_shape(3);
        let n: usize = shape.iter().product();
        let logits = m.logits(&vec![0.1; n], 3).unwrap();
        assert_eq!(logits.len(), 3 * spec.classes);
    }
}

#[test]
fn taps_have_expected_shapes() {
    let mut m = build(&ArchSpec::cnn2d(16));
    let mut t = Tape::new();
    let x = t.input(m.input_shape(2), vec![0.0; 2 * 40 * 19 * 19]).unwrap();
    let f = m.forward(&mut t, x).unwrap();
    assert_eq!(t.shape(f.taps.conv1.unwrap()), &[2, 50, 15, 15]);
    assert_eq!(t.shape(f.taps.conv2.unwrap()), &[2, 100, 11, 11]);
    assert_eq!(t.shape(f.taps.pool.unwrap()), &[2, 100, 5, 5]);
    assert_eq!(t.shape(f.taps.hidden.unwrap()), &[2, 100]);
    assert_eq!(t.shape(f.logits), &[2, 16]);
}

/// Every parameter of a narrow CNN2D against central differences in f64.
#[test]
fn cnn2d_gradients_match_finite_differences() {
    let spec = ArchSpec {
        in_channels: 3,
        filters: [4, 5],
        kernels: [3, 3],
        hidden: 6,
        classes: 3,
        patch: 9,
        ..ArchSpec::cnn2d(3)
    };
    let mut rng = RngState::new(5);
    let base = ModelGraph::<f64>::build(&spec, &mut rng).unwrap();
    let x: Vec<f64> = (0..2 * 3 * 81).map(|_| rng.normal()).collect();
    let labels = [0usize, 2];
    let loss_of = |m: &mut ModelGraph<f64>| -> (f64, Vec<Vec<f64>>) {
        let mut t = Tape::new();
        let xv = t.input(m.input_shape(2), x.clone()).unwrap();
        let f = m.forward(&mut t, xv).unwrap();
        let l = t.cross_entropy(f.logits, &labels).unwrap();
        let v = t.item(l);
        let g = t.backward(l).unwrap();
        let grads = m.named_params().iter().map(|(_, p)| g.for_tensor(p).unwrap().to_vec()).collect();
        (v, grads)
    };
    let mut m = base.clone();
    let (_, grads) = loss_of(&mut m);
    let count = m.named_params().len();
    assert_eq!(count, 12);
    for k in 0..count {
        let x0 = base.named_params()[k].1.data().to_vec();
        let err = max_rel_error(&x0, &grads[k], 1e-4, 1e-6, |p| {
            let mut mm = base.clone();
            mm.params_mut()[k].data_mut().copy_from_slice(p);
            loss_of(&mut mm).0
        });
        assert!(err < 1e-3, "{}: {err}", base.named_params()[k].0);
    }
}

fn toy_separable(n_side: usize) -> PatchSet {
    let (h, w) = (n_side, n_side);
    let mut data = vec![0.0f32; 2 * h * w];
    let mut labels = vec![0u16; h * w];
    let mut r = RngState::new(9);
    for p in 0..h * w {
        let cls = (p % 2) as u16;
        labels[p] = cls + 1;
        let s = if cls == 0 { -1.0 } else { 1.0 };
        data[p] = (s * (0.5 + r.unit())) as f32;
        data[h * w + p] = r.normal() as f32;
    }
    let cube = HsiCube::new(2, h, w, data).unwrap();
    let lab = LabelRaster::new(h, w, 2, labels).unwrap();
    extract_patches(&cube, &lab, 1).unwrap()
}

#[test]
fn separable_toy_reaches_full_train_accuracy() {
    let data = toy_separable(10);
    let mut spec = ArchSpec::mlp(2, 2);
    spec.hidden = 8;
    let mut m = build(&spec);
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 16,
        lr: 0.01,
        patience: None,
        ..Default::default()
    };
    let h = train(&mut m, &data, &cfg, &mut RngState::new(3)).unwrap();
    assert!(h.epochs.iter().all(|e| e.loss.is_finite()));
    let metrics = evaluate(&mut m, &data).unwrap();
    assert_eq!(metrics.top1, 100.0);
}

#[test]
fn training_is_deterministic_and_history_csv() {
    let data = toy_separable(8);
    let spec = ArchSpec::cnn1d(2, 2);
    assert!(spec.validate().is_err(), "cnn1d needs a longer spectrum");
    let run = || {
        let mut m = build(&ArchSpec::mlp(2, 2));
        let cfg = TrainConfig { epochs: 5, batch_size: 7, lr: 0.01, ..Default::default() };
        let h = train(&mut m, &data, &cfg, &mut RngState::new(11)).unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        buf
    };
    let a = run();
    assert_eq!(a, run());
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("epoch,loss,top1\n"));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn trailing_single_sample_is_merged() {
    let mut r = RngState::new(1);
    let b = epoch_batches(129, 128, &mut r);
    assert_eq!(b.len(), 1);
    assert_eq!(b[0].len(), 129);
    let b = epoch_batches(130, 128, &mut r);
    assert_eq!(b.iter().map(|v| v.len()).collect::<Vec<_>>(), vec![128, 2]);
}

#[test]
fn evaluation_rules() {
    let mut acc = MetricsAccumulator::new(3);
    acc.add(&[3.0, 1.0, 0.0, 0.0, 5.0, 1.0], &[0, 1]);
    let m = acc.finish().unwrap();
    assert_eq!((m.top1, m.top5), (100.0, 100.0));
    assert_eq!(m.confusion, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 0]]);

    // ties go to the lower index
    assert_eq!(rank_of(&[1.0, 1.0, 0.0], 0), 0);
    assert_eq!(rank_of(&[1.0, 1.0, 0.0], 1), 1);
    assert_eq!(argmax(&[2.0, 2.0]), 0);

    // k = K makes top-5 trivially perfect
    let mut acc = MetricsAccumulator::new(5);
    acc.add(&[0.0, 1.0, 2.0, 3.0, 4.0], &[0]);
    assert_eq!(acc.finish().unwrap().top5, 100.0);

    assert!(MetricsAccumulator::new(2).finish().is_err());
}

#[test]
fn random_logits_top1_near_chance() {
    let mut r = RngState::new(77);
    let mut acc = MetricsAccumulator::new(16);
    for i in 0..10_000 {
        let logits: Vec<f64> = (0..16).map(|_| r.unit()).collect();
        acc.add(&logits, &[i % 16]);
    }
    let m = acc.finish().unwrap();
    // binomial mean 6.25, sd ~0.24 points
    assert!((m.top1 - 6.25).abs() <= 2.0, "{}", m.top1);
    assert!((m.top5 - 31.25).abs() <= 2.0, "{}", m.top5);
}

#[test]
fn eval_is_batch_order_independent() {
    let data = toy_separable(6);
    let mut m = build(&ArchSpec::mlp(2, 2));
    let a = evaluate(&mut m, &data).unwrap();
    let rev: Vec<usize> = (0..data.len()).rev().collect();
    let b = evaluate(&mut m, &data.subset(&rev)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let mut m = build(&ArchSpec::cnn2d_widths(16, 5, 10, 10));
    // give BN non-trivial running stats
    let mut t = Tape::new();
    let mut r = RngState::new(2);
    let x: Vec<f32> = (0..3 * 40 * 361).map(|_| r.normal() as f32).collect();
    let xv = t.input(m.input_shape(3), x.clone()).unwrap();
    m.forward(&mut t, xv).unwrap();
    m.set_training(false);
    let before = m.logits(&x, 3).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let meta = CheckpointMeta {
        class_names: vec![],
        config_digest: "abc".into(),
        metrics: [("top1".to_string(), 88.0)].into(),
    };
    save_checkpoint(&m, &meta, &path).unwrap();
    let (mut back, man) = load_checkpoint(&path).unwrap();
    assert_eq!(man.config_digest, "abc");
    let after = back.logits(&x, 3).unwrap();
    assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));

    let err = load_checkpoint_for(&path, 9).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("16") && msg.contains('9'), "{msg}");

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(ModelError::Corrupt(_))));
    let mut flipped = bytes.clone();
    let k = flipped.len() - 20;
    flipped[k] ^= 1;
    std::fs::write(&path, &flipped).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(ModelError::Corrupt(_))));
}
