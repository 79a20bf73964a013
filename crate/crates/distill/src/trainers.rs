//! Training loops for every method, all driven by [`hsib_models::fit`].

use std::cell::RefCell;
use std::collections::BTreeMap;

use hsib_data::PatchSet;
use hsib_models::{evaluate, fit, Batch, Forward, History, ModelGraph, ModelKind, TrainConfig, Trainable};
use hsib_tensor::{RngState, Tape, Tensor, Var};

use crate::config::{DistillConfig, Method};
use crate::error::{to_model_error, DistillError, Result};
use crate::losses;
use crate::multibranch::MultiBranch;
use crate::teacher::TeacherBundle;

#[derive(Debug, Clone, Copy)]
pub struct DistillData<'a> {
    pub train: &'a PatchSet,
    /// Scored after every epoch when present.
    pub eval: Option<&'a PatchSet>,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub method: Method,
    pub config: DistillConfig,
    pub train: TrainConfig,
    /// The deployable student.
    pub student: ModelGraph<f32>,
    pub history: History,
    /// Earlier stages (the FitNets hint stage), by name.
    pub stages: Vec<(String, History)>,
    /// Evaluation top-1 of every branch or peer of an online method.
    pub branch_top1: Vec<f64>,
}

impl DistillOutcome {
    /// Best branch or peer, `(index, top1)`.
    pub fn best_branch(&self) -> Option<(usize, f64)> {
        self.branch_top1
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Student plus auxiliary trainable tensors (regressors, projectors) that
/// are dropped at deployment.
struct WithAux {
    student: ModelGraph<f32>,
    aux: Vec<Tensor<f32>>,
}

impl Trainable for WithAux {
    fn trainable_params(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut p = self.student.trainable_params();
        p.extend(self.aux.iter_mut());
        p
    }

    fn set_training(&mut self, on: bool) {
        self.student.set_training(on)
    }
}

struct Peers(Vec<ModelGraph<f32>>);

impl Trainable for Peers {
    fn trainable_params(&mut self) -> Vec<&mut Tensor<f32>> {
        self.0.iter_mut().flat_map(|m| m.trainable_params()).collect()
    }

    fn set_training(&mut self, on: bool) {
        self.0.iter_mut().for_each(|m| m.set_training(on))
    }
}

/// Teacher forwards for a batch; inputs are re-gathered when a teacher is a
/// different architecture kind from the student.
struct TeacherRun<'a> {
    teachers: Vec<ModelGraph<f32>>,
    data: &'a PatchSet,
    student_kind: ModelKind,
}

impl TeacherRun<'_> {
    fn forward(&mut self, tape: &mut Tape<f32>, b: &Batch, x: Var) -> Result<Vec<Forward>> {
        let mut out = Vec::with_capacity(self.teachers.len());
        for t in &mut self.teachers {
            let xt = if t.spec.kind == self.student_kind {
                x
            } else {
                let g = Batch::gather(t.spec.kind, self.data, &b.indices);
                tape.input(g.shape, g.x)?
            };
            out.push(t.forward(tape, xt)?);
        }
        Ok(out)
    }
}

fn input(tape: &mut Tape<f32>, b: &Batch) -> Result<Var> {
    Ok(tape.input(b.shape.clone(), b.x.clone())?)
}

fn top1(model: &mut ModelGraph<f32>, eval: Option<&PatchSet>) -> hsib_models::Result<Option<f64>> {
    match eval {
        Some(e) => Ok(Some(evaluate(model, e)?.top1)),
        None => Ok(None),
    }
}

fn tap(v: Option<Var>, what: &str) -> Result<Var> {
    v.ok_or_else(|| DistillError::Shape(format!("model has no {what} activations")))
}

fn check_data(student: &ModelGraph<f32>, data: &PatchSet) -> Result<()> {
    let s = &student.spec;
    if data.channels() != s.in_channels || (s.kind == ModelKind::Cnn2d && data.patch_size() != s.patch) {
        return Err(DistillError::Shape(format!(
            "data has {} channels and patch {}, student expects {} and {}",
            data.channels(),
            data.patch_size(),
            s.in_channels,
            s.patch
        )));
    }
    if data.classes() > s.classes {
        return Err(DistillError::Shape(format!(
            "data has {} classes, student predicts {}",
            data.classes(),
            s.classes
        )));
    }
    Ok(())
}

fn resolve_teachers(method: Method, bundle: Option<&TeacherBundle>, classes: usize) -> Result<Vec<ModelGraph<f32>>> {
    if !method.needs_teacher() {
        return Ok(Vec::new());
    }
    let b = match bundle {
        Some(b) if !b.is_empty() => b,
        _ => return Err(DistillError::NoTeacher(method)),
    };
    let need = method.teachers_needed();
    if b.len() < need {
        return Err(DistillError::TooFew {
            method,
            what: "teachers",
            need,
            got: b.len(),
        });
    }
    for t in b.teachers() {
        if t.classes() != classes {
            return Err(DistillError::Shape(format!(
                "teacher predicts {} classes, student {classes}",
                t.classes()
            )));
        }
    }
    let take = if method == Method::CaMkd { b.len() } else { need };
    Ok(b.teachers()[..take].to_vec())
}

fn linear_init(rng: &mut RngState, out: usize, inp: usize) -> [Tensor<f32>; 2] {
    let bound = 1.0 / (inp as f64).sqrt();
    [
        rng.uniform_tensor(vec![out, inp], bound).with_grad(),
        rng.uniform_tensor(vec![out], bound).with_grad(),
    ]
}

/// Distills into `student` with the configured method.
///
/// Offline methods need `teachers`; online methods grow extra peers or
/// heads around the student and deploy branch 0; self methods train the
/// student alone.
pub fn distill(
    student: ModelGraph<f32>,
    teachers: Option<&TeacherBundle>,
    data: DistillData,
    cfg: &DistillConfig,
    train: &TrainConfig,
    rng: &mut RngState,
) -> Result<DistillOutcome> {
    cfg.validate(student.classes())?;
    check_data(&student, data.train)?;
    let teachers = resolve_teachers(cfg.method, teachers, student.classes())?;
    let tr = TeacherRun {
        teachers,
        data: data.train,
        student_kind: student.spec.kind,
    };
    let mut out = DistillOutcome {
        method: cfg.method,
        config: cfg.clone(),
        train: train.clone(),
        student: student.clone(),
        history: History::default(),
        stages: Vec::new(),
        branch_top1: Vec::new(),
    };
    use Method::*;
    match cfg.method {
        SoftTargets | At | Cc => {
            let (s, h) = response_family(student, tr, data, cfg, train, rng)?;
            out.student = s;
            out.history = h;
        }
        FitNets => {
            let (s, stages, h) = fitnets(student, tr, data, cfg, train, rng)?;
            out.student = s;
            out.stages = stages;
            out.history = h;
        }
        SimKd => {
            let (s, h) = simkd(student, tr, data, train, rng)?;
            out.student = s;
            out.history = h;
        }
        CaMkd => {
            let (s, h) = camkd(student, tr, data, cfg, train, rng)?;
            out.student = s;
            out.history = h;
        }
        Dml => {
            let (s, h, b) = dml(student, data, cfg, train, rng)?;
            out.student = s;
            out.history = h;
            out.branch_top1 = b;
        }
        One | ClIlr | OkdDip => {
            let (s, h, b) = branched(student, data, cfg, train, rng)?;
            out.student = s;
            out.history = h;
            out.branch_top1 = b;
        }
        TfKd | PsKd => {
            let (s, h) = single_model(student, data, cfg, train, rng)?;
            out.student = s;
            out.history = h;
        }
        CsKd => {
            let (s, h) = cskd(student, data, cfg, train, rng)?;
            out.student = s;
            out.history = h;
        }
        Ddgsd => {
            let (s, h) = ddgsd(student, data, cfg, train, rng)?;
            out.student = s;
            out.history = h;
        }
    }
    out.student.set_training(false);
    Ok(out)
}

/// Soft targets, optionally plus attention transfer or correlation
/// congruence.
fn response_family(
    mut student: ModelGraph<f32>,
    mut tr: TeacherRun,
    data: DistillData,
    cfg: &DistillConfig,
    train: &TrainConfig,
    rng: &mut RngState,
) -> Result<(ModelGraph<f32>, History)> {
    let kind = student.spec.kind;
    if cfg.method == Method::At && (kind == ModelKind::Mlp || tr.teachers[0].spec.kind == ModelKind::Mlp) {
        return Err(DistillError::Unsupported {
            method: Method::At,
            what: "models without convolutional feature maps".into(),
        });
    }
    let h = fit(
        &mut student,
        data.train,
        kind,
        train,
        rng,
        |m, tape, b, _| {
            (|| {
                let x = input(tape, b)?;
                let fs = m.forward(tape, x)?;
                let ft = tr.forward(tape, b, x)?.remove(0);
                let st = losses::soft_target_loss(tape, fs.logits, ft.logits, &b.labels, cfg.temperature, cfg.alpha)?;
                Ok(match cfg.method {
                    Method::At => {
                        let pairs = [
                            (tap(fs.taps.conv1, "conv1")?, tap(ft.taps.conv1, "conv1")?),
                            (tap(fs.taps.conv2, "conv2")?, tap(ft.taps.conv2, "conv2")?),
                        ];
                        let at = losses::at_loss(tape, &pairs)?;
                        let at = tape.mul_scalar(at, cfg.beta_at as f32)?;
                        tape.add(st.total, at)?
                    }
                    Method::Cc => {
                        let n = b.len() as f64;
                        let cc = losses::cc_loss(
                            tape,
                            tap(fs.taps.hidden, "hidden")?,
                            tap(ft.taps.hidden, "hidden")?,
                            cfg.rbf_delta,
                        )?;
                        let cc = tape.mul_scalar(cc, (cfg.lambda_cc * n * n) as f32)?;
                        tape.add(st.total, cc)?
                    }
                    _ => st.total,
                })
            })()
            .map_err(to_model_error)
        },
        |m, _| top1(m, data.eval),
    )?;
    Ok((student, h))
}

/// Hint stage length: explicit, or a quarter of the budget.
pub fn hint_epochs(cfg: &DistillConfig, total: usize) -> usize {
    cfg.hint_epochs.unwrap_or(total / 4).min(total)
}

fn fitnets(
    student: ModelGraph<f32>,
    mut tr: TeacherRun,
    data: DistillData,
    cfg: &DistillConfig,
    train: &TrainConfig,
    rng: &mut RngState,
) -> Result<(ModelGraph<f32>, Vec<(String, History)>, History)> {
    let kind = student.spec.kind;
    let tkind = tr.teachers[0].spec.kind;
    if kind == ModelKind::Mlp || tkind != kind {
        return Err(DistillError::Unsupported {
            method: Method::FitNets,
            what: "a student and teacher without matching convolutional trunks".into(),
        });
    }
    let cs = student.conv(1).out_channels();
    let ct = tr.teachers[0].conv(1).out_channels();
    let shape = if kind == ModelKind::Cnn2d {
        vec![ct, cs, 1, 1]
    } else {
        vec![ct, cs, 1]
    };
    let bound = 1.0 / (cs as f64).sqrt();
    let w = rng.uniform_tensor(shape, bound).with_grad();
    let bias = rng.uniform_tensor(vec![ct], bound).with_grad();
    let mut m = WithAux {
        student,
        aux: vec![w, bias],
    };
    let hint = hint_epochs(cfg, train.epochs);
    let stage1 = fit(
        &mut m,
        data.train,
        kind,
        &train.clone().with_epochs(hint),
        rng,
        |m, tape, b, _| {
            (|| {
                let x = input(tape, b)?;
                let fs = m.student.forward(tape, x)?;
                let ft = tr.forward(tape, b, x)?.remove(0);
                let (ps, pt) = (tap(fs.taps.pool, "pooled")?, tap(ft.taps.pool, "pooled")?);
                if tape.shape(ps)[2..] != tape.shape(pt)[2..] {
                    return Err(DistillError::Shape(format!(
                        "hint layers differ spatially: {:?} vs {:?}",
                        tape.shape(ps),
                        tape.shape(pt)
                    )));
                }
                let w = tape.param(&m.aux[0]);
                let bb = tape.param(&m.aux[1]);
                let r = if kind == ModelKind::Cnn2d {
                    tape.conv2d(ps, w, Some(bb))?
                } else {
                    tape.conv1d(ps, w, Some(bb))?
                };
                losses::hint_loss(tape, r, pt)
            })()
            .map_err(to_model_error)
        },
        |m, _| top1(&mut m.student, data.eval),
    )?;
    let mut student = m.student;
    let stage2 = fit(
        &mut student,
        data.train,
        kind,
        &train.clone().with_epochs(train.epochs - hint),
        rng,
        |m, tape, b, _| {
            (|| {
                let x = input(tape, b)?;
                let fs = m.forward(tape, x)?;
                let ft = tr.forward(tape, b, x)?.remove(0);
                Ok(losses::soft_target_loss(tape, fs.logits, ft.logits, &b.labels, cfg.temperature, cfg.alpha)?.total)
            })()
            .map_err(to_model_error)
        },
        |m, _| top1(m, data.eval),
    )?;
    Ok((student, vec![("hint".into(), stage1)], stage2))
}

/// Replaces the student classifier by `W_t P` and `W_t b_p + b_t`, the
/// teacher classifier applied to the projected features. The projector is
/// linear, so the composition is exact.
pub fn fold_projector(
    student: &ModelGraph<f32>,
    proj_w: &Tensor<f32>,
    proj_b: &Tensor<f32>,
    teacher: &ModelGraph<f32>,
) -> Result<ModelGraph<f32>> {
    let tc = teacher.dense(1);
    let (k, ht) = (tc.out_features(), tc.in_features());
    let hs = student.dense(0).out_features();
    if proj_w.shape() != [ht, hs] || proj_b.shape() != [ht] {
        return Err(DistillError::Shape(format!(
            "projector {:?} does not map {hs} to {ht} features",
            proj_w.shape()
        )));
    }
    let (wt, bt, p, pb) = (tc.weight.data(), tc.bias.data(), proj_w.data(), proj_b.data());
    let mut w = vec![0f32; k * hs];
    let mut b = vec![0f32; k];
    for c in 0..k {
        let mut acc_b = bt[c] as f64;
        for j in 0..ht {
            let t = wt[c * ht + j] as f64;
            acc_b += t * pb[j] as f64;
            for i in 0..hs {
                w[c * hs + i] += (t * p[j * hs + i] as f64) as f32;
            }
        }
        b[c] = acc_b as f32;
    }
    let mut out = student.clone();
    let d = out.dense_mut(1);
    d.weight = Tensor::from_vec(vec![k, hs], w)?.with_grad();
    d.bias = Tensor::from_vec(vec![k], b)?.with_grad();
    out.set_training(false);
    Ok(out)
}

fn simkd(
    student: ModelGraph<f32>,
    mut tr: TeacherRun,
    data: DistillData,
    train: &TrainConfig,
    rng: &mut RngState,
) -> Result<(ModelGraph<f32>, History)> {
    let kind = student.spec.kind;
    let hs = student.dense(0).out_features();
    let ht = tr.teachers[0].dense(0).out_features();
    let teacher = tr.teachers[0].clone();
    let mut m = WithAux {
        student,
        aux: linear_init(rng, ht, hs).into(),
    };
    let h = fit(
        &mut m,
        data.train,
        kind,
        train,
        rng,
        |m, tape, b, _| {
            (|| {
                let x = input(tape, b)?;
                let fs = m.student.forward(tape, x)?;
                let ft = tr.forward(tape, b, x)?.remove(0);
                let w = tape.param(&m.aux[0]);
                let bb = tape.param(&m.aux[1]);
                let proj = tape.linear(tap(fs.taps.hidden, "hidden")?, w, Some(bb))?;
                losses::mse(tape, proj, tap(ft.taps.hidden, "hidden")?)
            })()
            .map_err(to_model_error)
        },
        |m, _| {
            let mut d = fold_projector(&m.student, &m.aux[0], &m.aux[1], &teacher).map_err(to_model_error)?;
            top1(&mut d, data.eval)
        },
    )?;
    let s = fold_projector(&m.student, &m.aux[0], &m.aux[1], &teacher)?;
    Ok((s, h))
}

fn camkd(
    student: ModelGraph<f32>,
    mut tr: TeacherRun,
    data: DistillData,
    cfg: &DistillConfig,
    train: &TrainConfig,
    rng: &mut RngState,
) -> Result<(ModelGraph<f32>, History)> {
    let kind = student.spec.kind;
    let hs = student.dense(0).out_features();
    let ht = tr.teachers[0].dense(0).out_features();
    if tr.teachers.iter().any(|t| t.dense(0).out_features() != ht) {
        return Err(DistillError::Shape("CA-MKD teachers must share a hidden width".into()));
    }
    let mut m = WithAux {
        student,
        aux: linear_init(rng, ht, hs).into(),
    };
    let h = fit(
        &mut m,
        data.train,
        kind,
        train,
        rng,
        |m, tape, b, _| {
            (|| {
                let x = input(tape, b)?;
                let fs = m.student.forward(tape, x)?;
                let fts = tr.forward(tape, b, x)?;
                let w = tape.param(&m.aux[0]);
                let bb = tape.param(&m.aux[1]);
                let proj = tape.linear(tap(fs.taps.hidden, "hidden")?, w, Some(bb))?;
                let zt: Vec<Var> = fts.iter().map(|f| f.logits).collect();
                let ht: Vec<Var> = fts.iter().map(|f| tap(f.taps.hidden, "hidden")).collect::<Result<_>>()?;
                let p = losses::camkd_loss(
                    tape,
                    fs.logits,
                    &zt,
                    Some((proj, &ht)),
                    &b.labels,
                    cfg.temperature,
                    cfg.lambda_f,
                )?;
                Ok(p.total)
            })()
            .map_err(to_model_error)
        },
        |m, _| top1(&mut m.student, data.eval),
    )?;
    Ok((m.student, h))
}

/// Deep mutual learning at unit temperature.
pub const DML_TEMPERATURE: f64 = 1.0;

fn dml(
    student: ModelGraph<f32>,
    data: DistillData,
    cfg: &DistillConfig,
    train: &TrainConfig,
    rng: &mut RngState,
) -> Result<(ModelGraph<f32>, History, Vec<f64>)> {
    let kind = student.spec.kind;
    let spec = student.spec.clone();
    let mut peers = vec![student];
    for _ in 1..cfg.peers {
        peers.push(ModelGraph::build(&spec, rng)?);
    }
    let mut m = Peers(peers);
    let h = fit(
        &mut m,
        data.train,
        kind,
        train,
        rng,
        |m, tape, b, _| {
            (|| {
                let x = input(tape, b)?;
                let z: Vec<Var> = m
                    .0
                    .iter_mut()
                    .map(|p| Ok(p.forward(tape, x)?.logits))
                    .collect::<Result<_>>()?;
                Ok(losses::dml_loss(tape, &z, &b.labels, DML_TEMPERATURE)?.total)
            })()
            .map_err(to_model_error)
        },
        |m, _| top1(&mut m.0[0], data.eval),
    )?;
    let mut branch = Vec::new();
    if let Some(e) = data.eval {
        for p in &mut m.0 {
            branch.push(evaluate(p, e)?.top1);
        }
    }
    log_best(Method::Dml, &branch);
    Ok((m.0.swap_remove(0), h, branch))
}

fn branched(
    student: ModelGraph<f32>,
    data: DistillData,
    cfg: &DistillConfig,
    train: &TrainConfig,
    rng: &mut RngState,
) -> Result<(ModelGraph<f32>, History, Vec<f64>)> {
    let kind = student.spec.kind;
    let method = cfg.method;
    let need = if method == Method::OkdDip { 3 } else { 2 };
    if cfg.peers < need {
        return Err(DistillError::TooFew {
            method,
            what: "branches",
            need,
            got: cfg.peers,
        });
    }
    let mut mb = MultiBranch::new(
        student,
        cfg.peers,
        method == Method::One,
        (method == Method::OkdDip).then_some(cfg.attn_dim),
        rng,
    )?;
    let t = cfg.temperature;
    let h = fit(
        &mut mb,
        data.train,
        kind,
        train,
        rng,
        |m, tape, b, _| {
            (|| {
                let x = input(tape, b)?;
                let o = m.forward(tape, x)?;
                Ok(match method {
                    Method::One => {
                        let g = o.gate_logits.expect("gate");
                        losses::one_loss(tape, &o.logits, g, &b.labels, t)?.0.total
                    }
                    Method::ClIlr => losses::clilr_loss(tape, &o.logits, &b.labels, t)?.total,
                    _ => {
                        let a = m.attention.as_ref().expect("attention");
                        let wq = tape.param(&a.wq);
                        let wk = tape.param(&a.wk);
                        losses::okddip_loss(tape, o.logits[0], &o.logits[1..], &o.hidden[1..], wq, wk, &b.labels, t)?
                            .parts
                            .total
                    }
                })
            })()
            .map_err(to_model_error)
        },
        |m, _| top1(&mut m.deploy(), data.eval),
    )?;
    let mut branch = Vec::new();
    if let Some(e) = data.eval {
        for i in 0..mb.branches() {
            branch.push(evaluate(&mut mb.branch_model(i), e)?.top1);
        }
    }
    log_best(method, &branch);
    Ok((mb.deploy(), h, branch))
}

/// The deployed head is branch 0; the best head is only reported.
fn log_best(method: Method, top1: &[f64]) {
    if let Some((i, v)) = top1.iter().copied().enumerate().max_by(|a, b| a.1.total_cmp(&b.1)) {
        log::info!("{method}: deployed branch 0 at {:.2}, best branch {i} at {v:.2}", top1[0]);
    }
}

/// PS-KD mixing weight for (1-based) `epoch` of `total`; the first epoch
/// has no earlier snapshot and so uses plain labels.
pub fn pskd_alpha(alpha_final: f64, epoch: usize, total: usize) -> f64 {
    if epoch <= 1 || total == 0 {
        0.0
    } else {
        alpha_final * epoch as f64 / total as f64
    }
}

/// Softmax predictions of every training sample, `[n, K]`, in eval mode.
fn snapshot(model: &mut ModelGraph<f32>, data: &PatchSet) -> hsib_models::Result<Vec<f32>> {
    let was = model.is_training();
    model.set_training(false);
    let k = model.classes();
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len() * k);
    for chunk in idx.chunks(256) {
        let b = Batch::gather(model.spec.kind, data, chunk);
        let z = model.logits(&b.x, chunk.len())?;
        for row in z.chunks(k) {
            out.extend(hsib_tensor::softmax_t(row, 1.0)?);
        }
    }
    model.set_training(was);
    Ok(out)
}

/// TF-KD and PS-KD: one network, no partner inputs.
fn single_model(
    mut student: ModelGraph<f32>,
    data: DistillData,
    cfg: &DistillConfig,
    train: &TrainConfig,
    rng: &mut RngState,
) -> Result<(ModelGraph<f32>, History)> {
    let kind = student.spec.kind;
    let k = student.classes();
    let prev: RefCell<Option<Vec<f32>>> = RefCell::new(None);
    let total = train.epochs;
    let h = fit(
        &mut student,
        data.train,
        kind,
        train,
        rng,
        |m, tape, b, ctx| {
            (|| {
                let x = input(tape, b)?;
                let z = m.forward(tape, x)?.logits;
                Ok(match cfg.method {
                    Method::TfKd => {
                        losses::tfkd_loss(tape, z, &b.labels, cfg.tfkd_a, cfg.tfkd_beta, cfg.tfkd_temperature)?.total
                    }
                    _ => {
                        let alpha = pskd_alpha(cfg.pskd_alpha_t, ctx.epoch, total);
                        let snap = prev.borrow();
                        let rows: Option<Vec<f32>> = snap
                            .as_ref()
                            .map(|p| b.indices.iter().flat_map(|&i| p[i * k..(i + 1) * k].iter().copied()).collect());
                        losses::pskd_loss(tape, z, &b.labels, rows.as_deref(), alpha)?.total
                    }
                })
            })()
            .map_err(to_model_error)
        },
        |m, _| {
            if cfg.method == Method::PsKd {
                *prev.borrow_mut() = Some(snapshot(m, data.train)?);
            }
            top1(m, data.eval)
        },
    )?;
    Ok((student, h))
}

/// Same-class partners for CS-KD: a uniformly drawn different sample of
/// the anchor's class, or `None` for a singleton class.
pub fn draw_partners(labels: &[usize], by_class: &BTreeMap<usize, Vec<usize>>, anchors: &[usize], rng: &mut RngState) -> Vec<Option<usize>> {
    anchors
        .iter()
        .map(|&i| {
            let pool = &by_class[&labels[i]];
            if pool.len() < 2 {
                return None;
            }
            // draw from the pool minus the anchor itself
            let pos = pool.iter().position(|&j| j == i).expect("anchor in its class");
            let mut r = rng.below(pool.len() - 1);
            if r >= pos {
                r += 1;
            }
            Some(pool[r])
        })
        .collect()
}

/// Rows `a_0, b_0, a_1, b_1, ...` so one forward pass covers both inputs.
fn interleave(a: &[f32], b: &[f32], n: usize) -> Vec<f32> {
    let len = a.len() / n;
    let mut out = Vec::with_capacity(2 * a.len());
    for i in 0..n {
        out.extend_from_slice(&a[i * len..(i + 1) * len]);
        out.extend_from_slice(&b[i * len..(i + 1) * len]);
    }
    out
}

/// Splits interleaved `[2N, ...]` activations into the two `[N, ...]` halves.
fn deinterleave(tape: &mut Tape<f32>, v: Var) -> Result<(Var, Var)> {
    let s = tape.shape(v).to_vec();
    let mut shape = vec![s[0] / 2, 2];
    shape.extend_from_slice(&s[1..]);
    let r = tape.reshape(v, shape)?;
    Ok((tape.slice1(r, 0)?, tape.slice1(r, 1)?))
}

fn doubled_shape(shape: &[usize]) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[0] *= 2;
    s
}

fn cskd(
    mut student: ModelGraph<f32>,
    data: DistillData,
    cfg: &DistillConfig,
    train: &TrainConfig,
    rng: &mut RngState,
) -> Result<(ModelGraph<f32>, History)> {
    let kind = student.spec.kind;
    let labels = data.train.labels().to_vec();
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let lonely: Vec<usize> = by_class.iter().filter(|(_, v)| v.len() < 2).map(|(&c, _)| c).collect();
    if !lonely.is_empty() {
        log::warn!("CS-KD: classes {lonely:?} have a single training sample; their consistency term is skipped");
    }
    let h = fit(
        &mut student,
        data.train,
        kind,
        train,
        rng,
        |m, tape, b, ctx| {
            (|| {
                let partners = draw_partners(&labels, &by_class, &b.indices, ctx.rng);
                let has: Vec<bool> = partners.iter().map(Option::is_some).collect();
                let idx: Vec<usize> = partners.iter().zip(&b.indices).map(|(p, &i)| p.unwrap_or(i)).collect();
                let pb = Batch::gather(kind, data.train, &idx);
                let x = tape.input(doubled_shape(&b.shape), interleave(&b.x, &pb.x, b.len()))?;
                let z = m.forward(tape, x)?.logits;
                let (zx, zp) = deinterleave(tape, z)?;
                Ok(losses::cskd_loss(tape, zx, zp, &b.labels, &has, cfg.lambda_cs, cfg.temperature)?.total)
            })()
            .map_err(to_model_error)
        },
        |m, _| top1(m, data.eval),
    )?;
    Ok((student, h))
}

/// Flips each `[C, H, W]` sample horizontally and/or vertically.
pub fn flip_views(x: &[f32], n: usize, c: usize, hw: usize, flips: &[(bool, bool)]) -> Vec<f32> {
    let plane = hw * hw;
    let mut out = x.to_vec();
    for (s, &(hf, vf)) in flips.iter().enumerate().take(n) {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            for r in 0..hw {
                for q in 0..hw {
                    let sr = if vf { hw - 1 - r } else { r };
                    let sq = if hf { hw - 1 - q } else { q };
                    out[base + r * hw + q] = x[base + sr * hw + sq];
                }
            }
        }
    }
    out
}

fn ddgsd(
    mut student: ModelGraph<f32>,
    data: DistillData,
    cfg: &DistillConfig,
    train: &TrainConfig,
    rng: &mut RngState,
) -> Result<(ModelGraph<f32>, History)> {
    let kind = student.spec.kind;
    if kind != ModelKind::Cnn2d {
        return Err(DistillError::Unsupported {
            method: Method::Ddgsd,
            what: format!("{kind:?} students (spatial flips need 2-D patches)"),
        });
    }
    let (c, p) = (student.spec.in_channels, student.spec.patch);
    let h = fit(
        &mut student,
        data.train,
        kind,
        train,
        rng,
        |m, tape, b, ctx| {
            (|| {
                let n = b.len();
                let mut draw = || -> Vec<(bool, bool)> {
                    (0..n).map(|_| (ctx.rng.below(2) == 1, ctx.rng.below(2) == 1)).collect()
                };
                let (f1, f2) = (draw(), draw());
                let v1 = flip_views(&b.x, n, c, p, &f1);
                let v2 = flip_views(&b.x, n, c, p, &f2);
                let x = tape.input(doubled_shape(&b.shape), interleave(&v1, &v2, n))?;
                let f = m.forward(tape, x)?;
                let (z1, z2) = deinterleave(tape, f.logits)?;
                let g = losses::gap(tape, tap(f.taps.conv2, "conv2")?)?;
                let (g1, g2) = deinterleave(tape, g)?;
                Ok(losses::ddgsd_loss(tape, z1, z2, g1, g2, &b.labels, cfg.lambda_p, cfg.lambda_f, DDGSD_TEMPERATURE)?.total)
            })()
            .map_err(to_model_error)
        },
        |m, _| top1(m, data.eval),
    )?;
    Ok((student, h))
}

pub const DDGSD_TEMPERATURE: f64 = 1.0;

