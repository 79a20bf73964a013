mod common;

use common::{quick, scene, spec, student_spec, teacher_spec, trained};
use hsib_data::PatchSet;
use hsib_distill::*;
use hsib_models::{evaluate, load_checkpoint, CheckpointMeta, ModelGraph, ModelKind};
use hsib_tensor::{RngState, Tape, Tensor};
use std::collections::BTreeMap;

fn data() -> (PatchSet, PatchSet) {
    scene(7, 24)
}

fn student(classes: usize, seed: u64) -> ModelGraph<f32> {
    ModelGraph::build(&student_spec(classes), &mut RngState::new(seed)).unwrap()
}

fn run(method: Method, teachers: Option<&TeacherBundle>, tr: &PatchSet, te: &PatchSet, epochs: usize) -> Result<DistillOutcome> {
    let cfg = DistillConfig::new(method);
    distill(
        student(tr.classes(), 11),
        teachers,
        DistillData { train: tr, eval: Some(te) },
        &cfg,
        &quick(epochs),
        &mut RngState::new(12),
    )
}

fn assert_sane(out: &DistillOutcome, epochs: usize, classes: usize) {
    assert_eq!(out.history.epochs.len(), epochs, "{}", out.method);
    for r in &out.history.epochs {
        assert!(r.loss.is_finite(), "{}: loss {}", out.method, r.loss);
        let t = r.top1.expect("eval top1");
        assert!((0.0..=100.0).contains(&t));
    }
    assert_eq!(out.student.spec, student_spec(classes));
    assert!(!out.student.is_training());
}

#[test]
fn offline_methods_need_a_teacher() {
    let (tr, te) = data();
    for m in Method::ALL.iter().filter(|m| m.needs_teacher()) {
        assert!(matches!(run(*m, None, &tr, &te, 1), Err(DistillError::NoTeacher(x)) if x == *m));
    }
    let t = trained(&teacher_spec(tr.classes()), &tr, 1, 1);
    let one = TeacherBundle::single(t);
    assert!(matches!(
        run(Method::CaMkd, Some(&one), &tr, &te, 1),
        Err(DistillError::TooFew { need: 2, got: 1, .. })
    ));
}

#[test]
fn online_and_self_methods_train_without_teachers() {
    let (tr, te) = data();
    for m in Method::ALL.iter().filter(|m| !m.needs_teacher()) {
        let out = run(*m, None, &tr, &te, 2).unwrap();
        assert_sane(&out, 2, tr.classes());
        match m.family() {
            Family::Online => {
                assert_eq!(out.branch_top1.len(), 3, "{m}");
                let (_, best) = out.best_branch().unwrap();
                assert!(best >= out.branch_top1[0]);
                // branch 0 is what gets deployed
                let mut s = out.student.clone();
                assert_eq!(evaluate(&mut s, &te).unwrap().top1, out.branch_top1[0]);
            }
            _ => assert!(out.branch_top1.is_empty()),
        }
    }
}

#[test]
fn offline_methods_train_from_frozen_teachers() {
    let (tr, te) = data();
    let spec = teacher_spec(tr.classes());
    let bundle = TeacherBundle::new(vec![trained(&spec, &tr, 1, 3), trained(&spec, &tr, 2, 3)]);
    let before: Vec<Vec<f32>> = bundle.teachers()[0]
        .named_params()
        .iter()
        .flat_map(|(_, p)| [p.data().to_vec()])
        .collect();
    for m in Method::ALL.iter().filter(|m| m.needs_teacher()) {
        let out = run(*m, Some(&bundle), &tr, &te, 2).unwrap();
        let epochs = if *m == Method::FitNets { 2 - hint_epochs(&out.config, 2) } else { 2 };
        assert_sane(&out, epochs, tr.classes());
    }
    let after: Vec<Vec<f32>> = bundle.teachers()[0]
        .named_params()
        .iter()
        .flat_map(|(_, p)| [p.data().to_vec()])
        .collect();
    assert_eq!(before, after);
}

#[test]
fn frozen_teacher_gets_no_gradient() {
    let (tr, _) = data();
    let mut t = ModelGraph::<f32>::build(&teacher_spec(tr.classes()), &mut RngState::new(3)).unwrap();
    t.set_trainable(false);
    t.set_training(false);
    let mut s = student(tr.classes(), 4);
    let idx: Vec<usize> = (0..8).collect();
    let b = hsib_models::Batch::gather(ModelKind::Cnn2d, &tr, &idx);
    let mut tape = Tape::new();
    let x = tape.input(b.shape.clone(), b.x.clone()).unwrap();
    let fs = s.forward(&mut tape, x).unwrap();
    let ft = t.forward(&mut tape, x).unwrap();
    let l = losses::soft_target_loss(&mut tape, fs.logits, ft.logits, &b.labels, 4.0, 0.1).unwrap();
    let g = tape.backward(l.total).unwrap();
    for (name, p) in t.named_params() {
        assert!(g.for_tensor(p).is_none(), "{name}");
        assert!(p.grad().is_none());
    }
    assert!(s.named_params().iter().all(|(_, p)| g.for_tensor(p).is_some()));
}

fn strictly_decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] < w[0])
}

#[test]
fn fitnets_hint_stage_loss_decreases() {
    let (tr, te) = data();
    let bundle = TeacherBundle::single(trained(&teacher_spec(tr.classes()), &tr, 1, 4));
    let cfg = DistillConfig {
        hint_epochs: Some(5),
        ..DistillConfig::new(Method::FitNets)
    };
    let out = distill(
        student(tr.classes(), 5),
        Some(&bundle),
        DistillData { train: &tr, eval: Some(&te) },
        &cfg,
        &quick(6),
        &mut RngState::new(6),
    )
    .unwrap();
    let (name, hint) = &out.stages[0];
    assert_eq!(name, "hint");
    let losses: Vec<f64> = hint.epochs.iter().map(|r| r.loss).collect();
    assert_eq!(losses.len(), 5);
    assert!(strictly_decreasing(&losses), "{losses:?}");
    assert_eq!(out.history.epochs.len(), 1);
}

#[test]
fn simkd_alignment_loss_decreases() {
    let (tr, te) = data();
    let bundle = TeacherBundle::single(trained(&teacher_spec(tr.classes()), &tr, 1, 4));
    let out = run(Method::SimKd, Some(&bundle), &tr, &te, 5).unwrap();
    let losses: Vec<f64> = out.history.epochs.iter().map(|r| r.loss).collect();
    assert!(strictly_decreasing(&losses), "{losses:?}");
}

#[test]
fn simkd_with_aligned_features_predicts_like_the_teacher() {
    let (tr, te) = data();
    let teacher = trained(&teacher_spec(tr.classes()), &tr, 1, 2);
    let h = teacher.dense(0).out_features();
    let mut eye = vec![0f32; h * h];
    (0..h).for_each(|i| eye[i * h + i] = 1.0);
    let p = Tensor::from_vec(vec![h, h], eye).unwrap();
    let pb = Tensor::from_vec(vec![h], vec![0.0; h]).unwrap();
    let mut folded = fold_projector(&teacher, &p, &pb, &teacher).unwrap();
    let mut t = teacher.clone();
    let idx: Vec<usize> = (0..te.len()).collect();
    let x = te.batch(&idx);
    assert_eq!(folded.logits(&x, te.len()).unwrap(), t.logits(&x, te.len()).unwrap());
    assert!(fold_projector(&teacher, &pb.clone().reshape(vec![1, h]).unwrap(), &pb, &teacher).is_err());
}

#[test]
fn ddgsd_needs_spatial_patches() {
    let (tr, te) = data();
    let mlp = spec(ModelKind::Mlp, [1, 1], tr.classes());
    let out = distill(
        ModelGraph::build(&mlp, &mut RngState::new(1)).unwrap(),
        None,
        DistillData { train: &tr, eval: Some(&te) },
        &DistillConfig::new(Method::Ddgsd),
        &quick(1),
        &mut RngState::new(1),
    );
    assert!(matches!(out, Err(DistillError::Unsupported { method: Method::Ddgsd, .. })));
}

#[test]
fn other_architectures_distill() {
    let (tr, te) = data();
    let bundle = TeacherBundle::single(trained(&teacher_spec(tr.classes()), &tr, 1, 2));
    for (kind, method, teachers) in [
        (ModelKind::Cnn1d, Method::SoftTargets, Some(&bundle)),
        (ModelKind::Mlp, Method::Cc, Some(&bundle)),
        (ModelKind::Mlp, Method::TfKd, None),
        (ModelKind::Cnn1d, Method::ClIlr, None),
    ] {
        let s = spec(kind, [4, 8], tr.classes());
        let out = distill(
            ModelGraph::build(&s, &mut RngState::new(2)).unwrap(),
            teachers,
            DistillData { train: &tr, eval: Some(&te) },
            &DistillConfig::new(method),
            &quick(1),
            &mut RngState::new(3),
        )
        .unwrap();
        assert!(out.history.epochs[0].loss.is_finite(), "{kind:?} {method}");
        assert_eq!(out.student.spec, s);
    }
    // feature-map methods need convolutional trunks on both sides
    let s = spec(ModelKind::Mlp, [1, 1], tr.classes());
    for method in [Method::At, Method::FitNets] {
        let out = distill(
            ModelGraph::build(&s, &mut RngState::new(2)).unwrap(),
            Some(&bundle),
            DistillData { train: &tr, eval: None },
            &DistillConfig::new(method),
            &quick(1),
            &mut RngState::new(3),
        );
        assert!(matches!(out, Err(DistillError::Unsupported { .. })), "{method}");
    }
}

#[test]
fn invalid_configs_fail_before_training() {
    let (tr, te) = data();
    for cfg in [
        DistillConfig {
            temperature: 0.0,
            ..DistillConfig::new(Method::TfKd)
        },
        DistillConfig {
            tfkd_a: 0.05,
            ..DistillConfig::new(Method::TfKd)
        },
        DistillConfig {
            alpha: 1.5,
            ..DistillConfig::new(Method::PsKd)
        },
    ] {
        let out = distill(
            student(tr.classes(), 1),
            None,
            DistillData { train: &tr, eval: Some(&te) },
            &cfg,
            &quick(1),
            &mut RngState::new(1),
        );
        assert!(matches!(out, Err(DistillError::Config(_))));
    }
    let few = DistillConfig {
        peers: 2,
        ..DistillConfig::new(Method::OkdDip)
    };
    let out = distill(
        student(tr.classes(), 1),
        None,
        DistillData { train: &tr, eval: None },
        &few,
        &quick(1),
        &mut RngState::new(1),
    );
    assert!(matches!(out, Err(DistillError::TooFew { need: 3, .. })));
}

#[test]
fn pskd_alpha_schedule() {
    assert_eq!(pskd_alpha(0.8, 1, 10), 0.0);
    assert!((pskd_alpha(0.8, 5, 10) - 0.4).abs() < 1e-12);
    assert!((pskd_alpha(0.8, 10, 10) - 0.8).abs() < 1e-12);
}

#[test]
fn partners_share_the_class_and_differ() {
    let labels = vec![0, 1, 0, 2, 1, 0];
    let mut by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by.entry(y).or_default().push(i);
    }
    let mut rng = RngState::new(9);
    for _ in 0..50 {
        let p = draw_partners(&labels, &by, &[0, 1, 2, 3, 4, 5], &mut rng);
        for (i, q) in p.iter().enumerate() {
            match q {
                Some(j) => {
                    assert_ne!(*j, i);
                    assert_eq!(labels[*j], labels[i]);
                }
                None => assert_eq!(labels[i], 2),
            }
        }
    }
}

#[test]
fn flips_are_involutions() {
    let x: Vec<f32> = (0..2 * 3 * 9).map(|v| v as f32).collect();
    let flips = [(true, false), (true, true)];
    let once = flip_views(&x, 2, 3, 3, &flips);
    assert_ne!(once, x);
    assert_eq!(flip_views(&once, 2, 3, 3, &flips), x);
    // horizontal flip of the first row of sample 0, channel 0
    assert_eq!(&once[0..3], &[2.0, 1.0, 0.0]);
    assert_eq!(flip_views(&x, 2, 3, 3, &[(false, false); 2]), x);
}

#[test]
fn outcome_writes_checkpoint_and_config_sidecar() {
    let (tr, te) = data();
    let out = run(Method::TfKd, None, &tr, &te, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let meta = CheckpointMeta {
        class_names: (0..tr.classes()).map(|c| format!("c{c}")).collect(),
        ..CheckpointMeta::default()
    };
    let (ckpt, side) = save_outcome(&out, dir.path(), "tfkd_student", &meta).unwrap();
    let (m, _) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(m.spec, out.student.spec);
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(side).unwrap()).unwrap();
    assert_eq!(doc["method"], "tfkd");
    assert_eq!(doc["family"], "Self");
    let cfg: DistillConfig = serde_json::from_value(doc["distill"].clone()).unwrap();
    assert_eq!(cfg, out.config);
    assert_eq!(doc["history"]["epochs"].as_array().unwrap().len(), 1);
}
