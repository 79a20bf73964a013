#![allow(dead_code)]

pub mod oracles;

use hsib_data::synth::{generate, SceneSpec};
use hsib_data::{preprocess, split_random, PatchSet, PreprocessConfig};
use hsib_models::{train, ArchSpec, ModelGraph, ModelKind, TrainConfig};
use hsib_tensor::gradcheck::max_rel_error;
use hsib_tensor::{RngState, Tape, Tensor, Var};

pub fn spec(kind: ModelKind, filters: [usize; 2], classes: usize) -> ArchSpec {
    ArchSpec {
        kind,
        in_channels: 6,
        filters,
        kernels: if kind == ModelKind::Cnn1d { [2, 1] } else { [3, 3] },
        hidden: 16,
        classes,
        patch: 9,
    }
}

pub fn teacher_spec(classes: usize) -> ArchSpec {
    spec(ModelKind::Cnn2d, [8, 12], classes)
}

pub fn student_spec(classes: usize) -> ArchSpec {
    spec(ModelKind::Cnn2d, [6, 10], classes)
}

/// Synthetic `side x side` scene split in half.
pub fn scene(seed: u64, side: usize) -> (PatchSet, PatchSet) {
    let ds = generate(&SceneSpec {
        height: side,
        width: side,
        unlabeled: 0.2,
        ..SceneSpec::small(seed)
    })
    .unwrap();
    let cfg = PreprocessConfig {
        pca_components: Some(6),
        patch_size: 9,
        ..PreprocessConfig::default()
    };
    let prepared = preprocess(&ds, &cfg, None).unwrap();
    let mask = split_random(&ds.labels, 0.5, seed).unwrap();
    prepared.patches.split(&mask)
}

pub fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        lr: 3e-3,
        patience: None,
        ..TrainConfig::default()
    }
}

pub fn trained(spec: &ArchSpec, data: &PatchSet, seed: u64, epochs: usize) -> ModelGraph<f32> {
    let mut m = ModelGraph::<f32>::build(spec, &mut RngState::new(seed)).unwrap();
    train(&mut m, data, &quick(epochs), &mut RngState::new(seed)).unwrap();
    m.set_training(false);
    m
}

/// Worst relative error of the tape gradient against central differences,
/// for the first `checked` inputs. Remaining inputs are held fixed.
pub fn gradcheck(
    inputs: &[(Vec<usize>, Vec<f64>)],
    checked: usize,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    gradcheck_frozen(inputs, checked, &f, |t, live, _| f(t, live))
}

/// Like [`gradcheck`] for losses with stop-gradient targets. `numeric`
/// receives the perturbed inputs plus constants holding the unperturbed
/// values, and must build the same objective with every detached target
/// taken from the constants.
pub fn gradcheck_frozen(
    inputs: &[(Vec<usize>, Vec<f64>)],
    checked: usize,
    analytic: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    numeric: impl Fn(&mut Tape<f64>, &[Var], &[Var]) -> Var,
) -> f64 {
    let build = |tape: &mut Tape<f64>, data: &[Vec<f64>]| -> Vec<Var> {
        inputs
            .iter()
            .zip(data)
            .map(|((s, _), d)| tape.variable(s.clone(), d.clone()).unwrap())
            .collect()
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let mut tape = Tape::new();
    let vars = build(&mut tape, &base);
    let loss = analytic(&mut tape, &vars);
    let g = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for k in 0..checked {
        let grad = g
            .wrt(vars[k])
            .map(|v| v.to_vec())
            .unwrap_or_else(|| vec![0.0; base[k].len()]);
        let e = max_rel_error(&base[k], &grad, 1e-5, 1e-6, |xs| {
            let mut data = base.clone();
            data[k] = xs.to_vec();
            let mut t = Tape::new();
            let vs = build(&mut t, &data);
            let frozen: Vec<Var> = inputs
                .iter()
                .zip(&base)
                .map(|((s, _), d)| t.input(s.clone(), d.clone()).unwrap())
                .collect();
            let l = numeric(&mut t, &vs, &frozen);
            t.item(l)
        });
        worst = worst.max(e);
    }
    worst
}

/// Gradient check over model parameters: `params` exposes the tensors,
/// `loss` builds the objective from the current values.
pub fn param_gradcheck<M>(
    model: &mut M,
    params: impl Fn(&mut M) -> Vec<&mut Tensor<f64>>,
    loss: impl Fn(&mut M, &mut Tape<f64>) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let l = loss(model, &mut tape);
    let g = tape.backward(l).unwrap();
    let mut x0 = Vec::new();
    let mut analytic = Vec::new();
    for p in params(model) {
        x0.extend_from_slice(p.data());
        match g.for_tensor(p) {
            Some(d) => analytic.extend_from_slice(d),
            None => analytic.extend(std::iter::repeat_n(0.0, p.len())),
        }
    }
    let set = |m: &mut M, xs: &[f64]| {
        let mut at = 0;
        for p in params(m) {
            let n = p.len();
            p.data_mut().copy_from_slice(&xs[at..at + n]);
            at += n;
        }
    };
    let e = max_rel_error(&x0, &analytic, 1e-5, 1e-6, |xs| {
        set(model, xs);
        let mut t = Tape::new();
        let l = loss(model, &mut t);
        t.item(l)
    });
    set(model, &x0);
    e
}

/// Tiny CNN2D used for whole-pipeline gradient checks.
pub fn toy_spec() -> ArchSpec {
    ArchSpec {
        kind: ModelKind::Cnn2d,
        in_channels: 2,
        filters: [3, 4],
        kernels: [2, 2],
        hidden: 5,
        classes: 3,
        patch: 5,
    }
}

pub fn toy_input(rng: &mut RngState, n: usize) -> Vec<f64> {
    (0..n * 2 * 25).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

/// [`param_gradcheck`] for objectives with stop-gradient targets: `capture`
/// records those targets at the unperturbed parameters and `numeric`
/// receives them as constants.
pub fn param_gradcheck_frozen<M>(
    model: &mut M,
    params: impl Fn(&mut M) -> Vec<&mut Tensor<f64>>,
    capture: impl Fn(&mut M) -> Vec<(Vec<usize>, Vec<f64>)>,
    analytic: impl Fn(&mut M, &mut Tape<f64>) -> Var,
    numeric: impl Fn(&mut M, &mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let frozen = capture(model);
    let mut tape = Tape::new();
    let l = analytic(model, &mut tape);
    let g = tape.backward(l).unwrap();
    let mut x0 = Vec::new();
    let mut grad = Vec::new();
    for p in params(model) {
        x0.extend_from_slice(p.data());
        match g.for_tensor(p) {
            Some(d) => grad.extend_from_slice(d),
            None => grad.extend(std::iter::repeat_n(0.0, p.len())),
        }
    }
    let set = |m: &mut M, xs: &[f64]| {
        let mut at = 0;
        for p in params(m) {
            let n = p.len();
            p.data_mut().copy_from_slice(&xs[at..at + n]);
            at += n;
        }
    };
    let e = max_rel_error(&x0, &grad, 1e-5, 1e-6, |xs| {
        set(model, xs);
        let mut t = Tape::new();
        let fz: Vec<Var> = frozen
            .iter()
            .map(|(s, d)| t.input(s.clone(), d.clone()).unwrap())
            .collect();
        let l = numeric(model, &mut t, &fz);
        t.item(l)
    });
    set(model, &x0);
    e
}
