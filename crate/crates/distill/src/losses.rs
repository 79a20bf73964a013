//! Differentiable distillation losses.
//!
//! Everything is generic over the element type so the same code can be
//! checked against finite differences in `f64`. Teacher-side inputs are
//! detached inside each loss; the caller never has to remember.
//!
//! Each loss returns [`LossParts`]: `kd` is the teacher-matching (or
//! consistency) term, already weighted, so the degenerate configurations
//! can be checked for an exact zero.

use hsib_tensor::{Real, Tape, Tensor, Var};

use crate::config::Method;
use crate::error::{DistillError, Result};

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    /// Hard-label cross entropy, when the loss has one.
    pub ce: Option<Var>,
    pub kd: Var,
}

pub(crate) fn konst<T: Real>(tape: &mut Tape<T>, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
    Ok(tape.constant(&Tensor::from_vec(shape, data)?))
}

fn zero<T: Real>(tape: &mut Tape<T>) -> Result<Var> {
    konst(tape, vec![1], vec![T::zero()])
}

fn rows_cols<T: Real>(tape: &Tape<T>, v: Var) -> Result<(usize, usize)> {
    match tape.shape(v) {
        [n, k] => Ok((*n, *k)),
        s => Err(DistillError::Shape(format!("expected [N, K] logits, got {s:?}"))),
    }
}

fn same_shape<T: Real>(tape: &Tape<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(DistillError::Shape(format!(
            "{what}: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

fn scale<T: Real>(tape: &mut Tape<T>, v: Var, c: f64) -> Result<Var> {
    Ok(tape.mul_scalar(v, T::lit(c))?)
}

fn mean_rows<T: Real>(tape: &mut Tape<T>, rows: Var) -> Result<Var> {
    Ok(tape.mean(rows)?)
}

/// Per-row `KL(target || student) = sum_k exp(lt) (lt - ls)` from
/// log-probabilities, shape `[N]`. Identical inputs give exactly zero.
pub fn kl_rows<T: Real>(tape: &mut Tape<T>, lt: Var, ls: Var) -> Result<Var> {
    same_shape(tape, lt, ls, "kl")?;
    let pt = tape.exp(lt)?;
    let d = tape.sub(lt, ls)?;
    let e = tape.mul(pt, d)?;
    let axis = tape.shape(e).len() - 1;
    Ok(tape.sum_axis(e, axis)?)
}

/// Batch mean of [`kl_rows`].
pub fn kl_logp<T: Real>(tape: &mut Tape<T>, lt: Var, ls: Var) -> Result<Var> {
    let r = kl_rows(tape, lt, ls)?;
    mean_rows(tape, r)
}

/// `T^2 KL(softmax(z_t/T) || softmax(z_s/T))`, teacher detached.
pub fn response_kd<T: Real>(tape: &mut Tape<T>, zs: Var, zt: Var, t: f64) -> Result<Var> {
    same_shape(tape, zs, zt, "logits")?;
    let zt = tape.detach(zt);
    let lt = tape.log_softmax(zt, T::lit(t))?;
    let ls = tape.log_softmax(zs, T::lit(t))?;
    let kl = kl_logp(tape, lt, ls)?;
    scale(tape, kl, t * t)
}

/// `alpha CE(z_s, y) + (1 - alpha) T^2 KL(p_t^T || p_s^T)`.
pub fn soft_target_loss<T: Real>(
    tape: &mut Tape<T>,
    zs: Var,
    zt: Var,
    labels: &[usize],
    t: f64,
    alpha: f64,
) -> Result<LossParts> {
    let ce = tape.cross_entropy(zs, labels)?;
    let kd = response_kd(tape, zs, zt, t)?;
    let kd = scale(tape, kd, 1.0 - alpha)?;
    let a = scale(tape, ce, alpha)?;
    let total = tape.add(a, kd)?;
    Ok(LossParts { total, ce: Some(ce), kd })
}

/// FitNets hint objective `1/2 sum (r - F_t)^2 / N`.
pub fn hint_loss<T: Real>(tape: &mut Tape<T>, regressed: Var, ft: Var) -> Result<Var> {
    same_shape(tape, regressed, ft, "hint")?;
    let n = tape.shape(ft)[0];
    let ft = tape.detach(ft);
    let d = tape.sub(regressed, ft)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    scale(tape, s, 0.5 / n as f64)
}

/// Channel-summed squared activations, flattened to `[N, spatial]`.
pub fn attention_map<T: Real>(tape: &mut Tape<T>, a: Var) -> Result<Var> {
    let s = tape.shape(a).to_vec();
    if s.len() < 3 {
        return Err(DistillError::Shape(format!("attention needs [N, C, ...] maps, got {s:?}")));
    }
    let sq = tape.square(a)?;
    let q = tape.sum_axis(sq, 1)?;
    let spatial: usize = s[2..].iter().product();
    Ok(tape.reshape(q, vec![s[0], spatial])?)
}

/// `m * sqrt(x + (1 - m))` for a 0/1 mask: the square root where the mask
/// is set and an exact zero, with zero gradient, elsewhere.
fn masked_sqrt<T: Real>(tape: &mut Tape<T>, x: Var, mask: &[T]) -> Result<Var> {
    let n = mask.len();
    let pad = konst(tape, vec![n], mask.iter().map(|&m| T::one() - m).collect())?;
    let mv = konst(tape, vec![n], mask.to_vec())?;
    let shifted = tape.add(x, pad)?;
    let r = tape.sqrt(shifted)?;
    Ok(tape.mul(r, mv)?)
}

/// Row-wise L2 normalization restricted to rows with `mask` set; masked
/// rows come out as zeros.
fn normalize_masked<T: Real>(tape: &mut Tape<T>, q: Var, mask: &[T]) -> Result<Var> {
    let sq = tape.square(q)?;
    let n2 = tape.sum_axis(sq, 1)?;
    let norm = masked_sqrt(tape, n2, mask)?;
    let pad = konst(tape, vec![mask.len()], mask.iter().map(|&m| T::one() - m).collect())?;
    let safe = tape.add(norm, pad)?;
    let inv = tape.recip(safe)?;
    let mv = konst(tape, vec![mask.len()], mask.to_vec())?;
    let inv = tape.mul(inv, mv)?;
    Ok(tape.scale_rows(q, inv)?)
}

fn row_sq_norms<T: Real>(v: &[T], cols: usize) -> Vec<T> {
    v.chunks(cols).map(|r| r.iter().map(|&x| x * x).sum()).collect()
}

/// Attention transfer over `(student, teacher)` tap pairs:
/// `sum_taps mean_n || Q_s/|Q_s| - Q_t/|Q_t| ||_2`.
///
/// Samples whose map is all zero on either side are left out of that tap
/// (with a warning); a tap with no usable sample is skipped entirely.
pub fn at_loss<T: Real>(tape: &mut Tape<T>, pairs: &[(Var, Var)]) -> Result<Var> {
    let mut total = zero(tape)?;
    for (i, &(s, t)) in pairs.iter().enumerate() {
        let t = tape.detach(t);
        let qs = attention_map(tape, s)?;
        let qt = attention_map(tape, t)?;
        same_shape(tape, qs, qt, "attention maps")?;
        let (n, hw) = rows_cols(tape, qs)?;
        let ns = row_sq_norms(tape.value(qs), hw);
        let nt = row_sq_norms(tape.value(qt), hw);
        let mask: Vec<T> = ns
            .iter()
            .zip(&nt)
            .map(|(&a, &b)| if a > T::zero() && b > T::zero() { T::one() } else { T::zero() })
            .collect();
        let usable = mask.iter().filter(|&&m| m > T::zero()).count();
        if usable == 0 {
            log::warn!("attention tap {i}: every map is zero, skipping");
            continue;
        }
        if usable < n {
            log::warn!("attention tap {i}: {} zero maps skipped", n - usable);
        }
        let us = normalize_masked(tape, qs, &mask)?;
        let ut = normalize_masked(tape, qt, &mask)?;
        let d = tape.sub(us, ut)?;
        let d2 = tape.square(d)?;
        let d2 = tape.sum_axis(d2, 1)?;
        // the norm is not differentiable at 0; identical rows contribute
        // exactly 0 with zero gradient
        let live: Vec<T> = tape
            .value(d2)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if v > T::zero() { m } else { T::zero() })
            .collect();
        let dist = masked_sqrt(tape, d2, &live)?;
        let term = tape.mean(dist)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Rows scaled to unit L2 norm (`eps` guards all-zero rows).
pub fn l2_normalize<T: Real>(tape: &mut Tape<T>, f: Var) -> Result<Var> {
    let sq = tape.square(f)?;
    let n2 = tape.sum_axis(sq, 1)?;
    let n2 = tape.add_scalar(n2, T::lit(1e-12))?;
    let n = tape.sqrt(n2)?;
    let inv = tape.recip(n)?;
    Ok(tape.scale_rows(f, inv)?)
}

/// Gaussian RBF Gram matrix `exp(-|f_i - f_j|^2 / (2 delta^2))` of `[b, D]`
/// rows. Distances come from the Gram matrix with the diagonal read off it
/// directly, so self-distances are exactly zero.
pub fn rbf_kernel<T: Real>(tape: &mut Tape<T>, f: Var, delta: f64) -> Result<Var> {
    let (b, _) = rows_cols(tape, f)?;
    let ft = tape.transpose(f)?;
    let g = tape.matmul(f, ft)?;
    let mut eye = vec![T::zero(); b * b];
    (0..b).for_each(|i| eye[i * b + i] = T::one());
    let eye = konst(tape, vec![b, b], eye)?;
    let gd = tape.mul(g, eye)?;
    let diag = tape.sum_axis(gd, 1)?;
    let col = tape.reshape(diag, vec![b, 1])?;
    let ones = konst(tape, vec![1, b], vec![T::one(); b])?;
    let ri = tape.matmul(col, ones)?;
    let rj = tape.transpose(ri)?;
    let g2 = scale(tape, g, 2.0)?;
    let s = tape.add(ri, rj)?;
    let d = tape.sub(s, g2)?;
    let e = scale(tape, d, -1.0 / (2.0 * delta * delta))?;
    Ok(tape.exp(e)?)
}

/// Correlation congruence `(1/b^2) |K_t - K_s|_F^2` on L2-normalized
/// embeddings.
pub fn cc_loss<T: Real>(tape: &mut Tape<T>, fs: Var, ft: Var, delta: f64) -> Result<Var> {
    let (b, _) = rows_cols(tape, fs)?;
    let (bt, _) = rows_cols(tape, ft)?;
    if b < 2 || bt != b {
        return Err(DistillError::TooFew {
            method: Method::Cc,
            what: "samples per batch",
            need: 2,
            got: b.min(bt),
        });
    }
    let ft = tape.detach(ft);
    let ns = l2_normalize(tape, fs)?;
    let nt = l2_normalize(tape, ft)?;
    let ks = rbf_kernel(tape, ns, delta)?;
    let kt = rbf_kernel(tape, nt, delta)?;
    let d = tape.sub(kt, ks)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    scale(tape, s, 1.0 / (b * b) as f64)
}

/// Mean squared error, target detached.
pub fn mse<T: Real>(tape: &mut Tape<T>, x: Var, target: Var) -> Result<Var> {
    same_shape(tape, x, target, "mse")?;
    let target = tape.detach(target);
    let d = tape.sub(x, target)?;
    let sq = tape.square(d)?;
    Ok(tape.mean(sq)?)
}

/// Per-row log-softmax of plain values, matching the tape's arithmetic.
fn ce_per_sample<T: Real>(logits: &[T], k: usize, labels: &[usize]) -> Result<Vec<T>> {
    logits
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| Ok(-hsib_tensor::log_softmax_t(row, T::one())?[y]))
        .collect()
}

/// CA-MKD reliability weights `softmax_k(-CE(z_k, y))` per sample, laid
/// out `[N, m]`.
pub fn camkd_weights<T: Real>(tape: &Tape<T>, teachers: &[Var], labels: &[usize]) -> Result<Vec<T>> {
    let m = teachers.len();
    let (n, k) = rows_cols(tape, teachers[0])?;
    let ces: Vec<Vec<T>> = teachers
        .iter()
        .map(|&z| ce_per_sample(tape.value(z), k, labels))
        .collect::<Result<_>>()?;
    let mut w = Vec::with_capacity(n * m);
    for i in 0..n {
        let neg: Vec<T> = ces.iter().map(|c| -c[i]).collect();
        w.extend(hsib_tensor::softmax_t(&neg, T::one())?);
    }
    Ok(w)
}

/// `sum_n w_n r_n / N` for a constant weight vector.
fn weighted_mean<T: Real>(tape: &mut Tape<T>, rows: Var, w: Vec<T>) -> Result<Var> {
    let n = w.len();
    let wv = konst(tape, vec![n], w)?;
    let p = tape.mul(rows, wv)?;
    let s = tape.sum(p)?;
    scale(tape, s, 1.0 / n as f64)
}

/// Per-row mean squared difference, `[N]`.
fn mse_rows<T: Real>(tape: &mut Tape<T>, x: Var, target: Var) -> Result<Var> {
    same_shape(tape, x, target, "feature")?;
    let d = tape.sub(x, target)?;
    let sq = tape.square(d)?;
    Ok(tape.mean_axis(sq, 1)?)
}

/// CA-MKD: `CE + sum_k w_k T^2 KL(p_k^T || p_s^T) + lambda_f sum_k w_k |P F_s - F_k|^2`
/// with per-sample teacher weights. `features` holds the projected
/// student features and each teacher's features.
pub fn camkd_loss<T: Real>(
    tape: &mut Tape<T>,
    zs: Var,
    teachers: &[Var],
    features: Option<(Var, &[Var])>,
    labels: &[usize],
    t: f64,
    lambda_f: f64,
) -> Result<LossParts> {
    if teachers.is_empty() {
        return Err(DistillError::TooFew {
            method: Method::CaMkd,
            what: "teachers",
            need: 1,
            got: 0,
        });
    }
    let m = teachers.len();
    let dt: Vec<Var> = teachers.iter().map(|&z| tape.detach(z)).collect();
    let w = camkd_weights(tape, &dt, labels)?;
    let wk = |k: usize| -> Vec<T> { w.iter().skip(k).step_by(m).copied().collect() };
    let ce = tape.cross_entropy(zs, labels)?;
    let ls = tape.log_softmax(zs, T::lit(t))?;
    let mut kd = zero(tape)?;
    for (k, &z) in dt.iter().enumerate() {
        same_shape(tape, zs, z, "teacher logits")?;
        let lt = tape.log_softmax(z, T::lit(t))?;
        let rows = kl_rows(tape, lt, ls)?;
        let term = weighted_mean(tape, rows, wk(k))?;
        kd = tape.add(kd, term)?;
    }
    kd = scale(tape, kd, t * t)?;
    if let Some((proj, feats)) = features {
        if feats.len() != m {
            return Err(DistillError::Shape(format!("{} teacher feature sets for {m} teachers", feats.len())));
        }
        let mut ft = zero(tape)?;
        for (k, &f) in feats.iter().enumerate() {
            let f = tape.detach(f);
            let rows = mse_rows(tape, proj, f)?;
            let term = weighted_mean(tape, rows, wk(k))?;
            ft = tape.add(ft, term)?;
        }
        let ft = scale(tape, ft, lambda_f)?;
        kd = tape.add(kd, ft)?;
    }
    let total = tape.add(ce, kd)?;
    Ok(LossParts { total, ce: Some(ce), kd })
}

fn too_few(method: Method, what: &'static str, need: usize, got: usize) -> DistillError {
    DistillError::TooFew { method, what, need, got }
}

/// Deep mutual learning over `m` peers, summed so one backward pass updates
/// every peer simultaneously:
/// `sum_i CE_i + 1/(m-1) sum_{j != i} KL(p_j || p_i)` with `p_j` detached.
pub fn dml_loss<T: Real>(tape: &mut Tape<T>, logits: &[Var], labels: &[usize], t: f64) -> Result<LossParts> {
    let m = logits.len();
    if m < 2 {
        return Err(too_few(Method::Dml, "peers", 2, m));
    }
    let lps: Vec<Var> = logits
        .iter()
        .map(|&z| tape.log_softmax(z, T::lit(t)))
        .collect::<std::result::Result<_, _>>()?;
    let det: Vec<Var> = lps.iter().map(|&l| tape.detach(l)).collect();
    let mut ce_sum = zero(tape)?;
    let mut kd = zero(tape)?;
    for i in 0..m {
        let ce = tape.cross_entropy(logits[i], labels)?;
        ce_sum = tape.add(ce_sum, ce)?;
        for j in (0..m).filter(|&j| j != i) {
            let kl = kl_logp(tape, det[j], lps[i])?;
            let kl = scale(tape, kl, t * t / (m - 1) as f64)?;
            kd = tape.add(kd, kl)?;
        }
    }
    let total = tape.add(ce_sum, kd)?;
    Ok(LossParts { total, ce: Some(ce_sum), kd })
}

/// `z_e = sum_i g_i z_i` for gate probabilities `g: [N, m]`.
pub fn ensemble<T: Real>(tape: &mut Tape<T>, logits: &[Var], gate: Var) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (i, &z) in logits.iter().enumerate() {
        let gi = tape.slice1(gate, i)?;
        let s = tape.scale_rows(z, gi)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    acc.ok_or_else(|| too_few(Method::One, "branches", 1, 0))
}

/// ONE: every branch learns from the detached gated ensemble,
/// `sum_i CE_i + T^2 KL(p_e^T || p_i^T)`, plus CE on the ensemble itself so
/// the gate gets a training signal.
pub fn one_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: &[Var],
    gate_logits: Var,
    labels: &[usize],
    t: f64,
) -> Result<(LossParts, Var)> {
    let m = logits.len();
    let (_, gm) = rows_cols(tape, gate_logits)?;
    if m == 0 || gm != m {
        return Err(DistillError::Shape(format!("{m} branches but gate has {gm} outputs")));
    }
    let g = tape.softmax(gate_logits, T::one())?;
    let ze = ensemble(tape, logits, g)?;
    let ze_det = tape.detach(ze);
    let lt = tape.log_softmax(ze_det, T::lit(t))?;
    let mut ce_sum = tape.cross_entropy(ze, labels)?;
    let mut kd = zero(tape)?;
    for &z in logits {
        let ce = tape.cross_entropy(z, labels)?;
        ce_sum = tape.add(ce_sum, ce)?;
        let ls = tape.log_softmax(z, T::lit(t))?;
        let kl = kl_logp(tape, lt, ls)?;
        kd = tape.add(kd, kl)?;
    }
    kd = scale(tape, kd, t * t)?;
    let total = tape.add(ce_sum, kd)?;
    Ok((LossParts { total, ce: Some(ce_sum), kd }, ze))
}

/// `ln mean_j exp(l_j)` elementwise over equally shaped log-probability
/// buffers, max-shifted. Identical inputs come back unchanged.
pub fn log_mean_exp<T: Real>(parts: &[&[T]]) -> Vec<T> {
    let len = parts[0].len();
    let cnt = T::from_usize(parts.len()).expect("count");
    (0..len)
        .map(|e| {
            let mx = parts.iter().map(|p| p[e]).fold(T::neg_infinity(), T::max);
            let s: T = parts.iter().map(|p| (p[e] - mx).exp()).sum();
            mx + (s / cnt).ln()
        })
        .collect()
}

/// CL-ILR: each head learns from the mean soft prediction of the other
/// heads, `sum_i CE_i + T^2 KL(mean_{j != i} p_j^T || p_i^T)`.
pub fn clilr_loss<T: Real>(tape: &mut Tape<T>, logits: &[Var], labels: &[usize], t: f64) -> Result<LossParts> {
    let m = logits.len();
    if m < 2 {
        return Err(too_few(Method::ClIlr, "heads", 2, m));
    }
    let lps: Vec<Var> = logits
        .iter()
        .map(|&z| tape.log_softmax(z, T::lit(t)))
        .collect::<std::result::Result<_, _>>()?;
    let shape = tape.shape(lps[0]).to_vec();
    let vals: Vec<Vec<T>> = lps.iter().map(|&l| tape.value(l).to_vec()).collect();
    let mut ce_sum = zero(tape)?;
    let mut kd = zero(tape)?;
    for i in 0..m {
        let others: Vec<&[T]> = (0..m).filter(|&j| j != i).map(|j| vals[j].as_slice()).collect();
        let lt = konst(tape, shape.clone(), log_mean_exp(&others))?;
        let ce = tape.cross_entropy(logits[i], labels)?;
        ce_sum = tape.add(ce_sum, ce)?;
        let kl = kl_logp(tape, lt, lps[i])?;
        kd = tape.add(kd, kl)?;
    }
    kd = scale(tape, kd, t * t)?;
    let total = tape.add(ce_sum, kd)?;
    Ok(LossParts { total, ce: Some(ce_sum), kd })
}

/// Attention weights `A = softmax(<W_q f_i, W_k f_j> / sqrt(d))` over peers,
/// `[N, P, P]`, from per-peer features `[N, h]` and `W: [d, h]`.
pub fn peer_attention<T: Real>(tape: &mut Tape<T>, features: &[Var], wq: Var, wk: Var) -> Result<Var> {
    let d = tape.shape(wq)[0];
    let qs: Vec<Var> = features
        .iter()
        .map(|&f| tape.linear(f, wq, None))
        .collect::<std::result::Result<_, _>>()?;
    let ks: Vec<Var> = features
        .iter()
        .map(|&f| tape.linear(f, wk, None))
        .collect::<std::result::Result<_, _>>()?;
    let q = tape.stack(&qs)?;
    let k = tape.stack(&ks)?;
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let s = scale(tape, s, 1.0 / (d as f64).sqrt())?;
    Ok(tape.softmax(s, T::one())?)
}

pub struct OkdDipParts {
    pub parts: LossParts,
    /// Tier-1 peer distillation alone.
    pub tier1: Var,
    /// Tier-2 leader distillation alone.
    pub tier2: Var,
    pub attention: Var,
}

/// OKDDip two-tier distillation.
///
/// Tier 1: peer `i` learns from `t_i = sum_j A_ij p_j` with the peer
/// predictions detached and the attention differentiable. Tier 2: the
/// leader learns from the detached mean peer prediction.
#[allow(clippy::too_many_arguments)]
pub fn okddip_loss<T: Real>(
    tape: &mut Tape<T>,
    leader: Var,
    peers: &[Var],
    peer_features: &[Var],
    wq: Var,
    wk: Var,
    labels: &[usize],
    t: f64,
) -> Result<OkdDipParts> {
    let p = peers.len();
    if p < 2 {
        return Err(too_few(Method::OkdDip, "secondary peers", 2, p));
    }
    if peer_features.len() != p {
        return Err(DistillError::Shape(format!("{} feature sets for {p} peers", peer_features.len())));
    }
    let (n, k) = rows_cols(tape, peers[0])?;
    let a = peer_attention(tape, peer_features, wq, wk)?;
    let lps: Vec<Var> = peers
        .iter()
        .map(|&z| tape.log_softmax(z, T::lit(t)))
        .collect::<std::result::Result<_, _>>()?;
    let vals: Vec<Vec<T>> = lps.iter().map(|&l| tape.value(l).to_vec()).collect();

    // ln t_i = mx + ln( (A E)_i / (A 1)_i ), E = exp(l - mx) per (sample, class)
    let mut mx = vec![T::neg_infinity(); n * k];
    for v in &vals {
        for (m, &x) in mx.iter_mut().zip(v) {
            *m = m.max(x);
        }
    }
    let mut e = vec![T::zero(); n * p * k];
    let mut mx3 = vec![T::zero(); n * p * k];
    for s in 0..n {
        for (j, v) in vals.iter().enumerate() {
            for c in 0..k {
                let at = (s * p + j) * k + c;
                e[at] = (v[s * k + c] - mx[s * k + c]).exp();
                mx3[at] = mx[s * k + c];
            }
        }
    }
    let ev = konst(tape, vec![n, p, k], e)?;
    let ones = konst(tape, vec![n, p, k], vec![T::one(); n * p * k])?;
    let mxv = konst(tape, vec![n, p, k], mx3)?;
    let ae = tape.matmul(a, ev)?;
    let a1 = tape.matmul(a, ones)?;
    let ratio = tape.div(ae, a1)?;
    let lr = tape.ln(ratio)?;
    let lq = tape.add(lr, mxv)?;

    let mut ce_sum = tape.cross_entropy(leader, labels)?;
    let mut tier1 = zero(tape)?;
    for i in 0..p {
        let ce = tape.cross_entropy(peers[i], labels)?;
        ce_sum = tape.add(ce_sum, ce)?;
        let lt = tape.slice1(lq, i)?;
        let kl = kl_logp(tape, lt, lps[i])?;
        tier1 = tape.add(tier1, kl)?;
    }
    let tier1 = scale(tape, tier1, t * t)?;

    let refs: Vec<&[T]> = vals.iter().map(|v| v.as_slice()).collect();
    let mean_peer = konst(tape, vec![n, k], log_mean_exp(&refs))?;
    let ll = tape.log_softmax(leader, T::lit(t))?;
    let tier2 = kl_logp(tape, mean_peer, ll)?;
    let tier2 = scale(tape, tier2, t * t)?;

    let kd = tape.add(tier1, tier2)?;
    let total = tape.add(ce_sum, kd)?;
    Ok(OkdDipParts {
        parts: LossParts { total, ce: Some(ce_sum), kd },
        tier1,
        tier2,
        attention: a,
    })
}

/// TF-KD virtual teacher: `a` on the true class, `(1 - a)/(K - 1)` elsewhere.
pub fn virtual_teacher<T: Real>(label: usize, classes: usize, a: f64) -> Result<Vec<T>> {
    crate::config::check_tfkd_a(a, classes)?;
    if label >= classes {
        return Err(DistillError::Shape(format!("label {label} for {classes} classes")));
    }
    let off = (1.0 - a) / (classes - 1) as f64;
    Ok((0..classes).map(|k| T::lit(if k == label { a } else { off })).collect())
}

/// TF-KD: `CE + beta T^2 KL(p^d || p_s^T)`.
///
/// For `a < 1` the virtual teacher enters as logits `ln p^d` through the
/// same log-softmax as the student, so a student whose tempered
/// distribution equals `p^d` gives an exact zero. At `a = 1` the target is
/// the one-hot label and the term is `-T^2 ln p_s^T(y)`.
pub fn tfkd_loss<T: Real>(
    tape: &mut Tape<T>,
    zs: Var,
    labels: &[usize],
    a: f64,
    beta: f64,
    t: f64,
) -> Result<LossParts> {
    let (n, k) = rows_cols(tape, zs)?;
    let mut pd = Vec::with_capacity(n * k);
    for &y in labels {
        pd.extend(virtual_teacher::<T>(y, k, a)?);
    }
    let ce = tape.cross_entropy(zs, labels)?;
    let ls = tape.log_softmax(zs, T::lit(t))?;
    let kl = if a < 1.0 {
        let zd = konst(tape, vec![n, k], pd.iter().map(|p| p.ln()).collect())?;
        let lt = tape.log_softmax(zd, T::one())?;
        kl_logp(tape, lt, ls)?
    } else {
        let q = konst(tape, vec![n, k], pd)?;
        let prod = tape.mul(q, ls)?;
        let s = tape.sum(prod)?;
        scale(tape, s, -1.0 / n as f64)?
    };
    let kd = scale(tape, kl, beta * t * t)?;
    let total = tape.add(ce, kd)?;
    Ok(LossParts { total, ce: Some(ce), kd })
}

/// CS-KD: `CE(z(x), y) + lambda T^2 KL(p(x')^T || p(x)^T)` with `x'` a
/// different sample of the same class. Rows with `has_pair = false`
/// contribute CE only.
pub fn cskd_loss<T: Real>(
    tape: &mut Tape<T>,
    zx: Var,
    zpair: Var,
    labels: &[usize],
    has_pair: &[bool],
    lambda: f64,
    t: f64,
) -> Result<LossParts> {
    same_shape(tape, zx, zpair, "pair logits")?;
    let ce = tape.cross_entropy(zx, labels)?;
    let zp = tape.detach(zpair);
    let lt = tape.log_softmax(zp, T::lit(t))?;
    let ls = tape.log_softmax(zx, T::lit(t))?;
    let rows = kl_rows(tape, lt, ls)?;
    let mask = has_pair.iter().map(|&h| if h { T::one() } else { T::zero() }).collect();
    let kl = weighted_mean(tape, rows, mask)?;
    let kd = scale(tape, kl, lambda * t * t)?;
    let total = tape.add(ce, kd)?;
    Ok(LossParts { total, ce: Some(ce), kd })
}

/// `(1 - alpha) onehot + alpha p_prev`.
pub fn pskd_target<T: Real>(onehot: &[T], p_prev: &[T], alpha: f64) -> Vec<T> {
    let a = T::lit(alpha);
    onehot
        .iter()
        .zip(p_prev)
        .map(|(&y, &p)| (T::one() - a) * y + a * p)
        .collect()
}

/// PS-KD: cross entropy against `(1 - alpha_t) onehot + alpha_t p_prev`,
/// computed as `(1 - alpha_t) CE_hard + alpha_t CE_soft`. `kd` is the
/// difference from plain CE. With `alpha_t = 0` or no snapshot the loss is
/// plain CE.
pub fn pskd_loss<T: Real>(
    tape: &mut Tape<T>,
    zs: Var,
    labels: &[usize],
    p_prev: Option<&[T]>,
    alpha_t: f64,
) -> Result<LossParts> {
    let ce = tape.cross_entropy(zs, labels)?;
    let prev = match p_prev {
        Some(p) if alpha_t > 0.0 => p,
        _ => {
            let kd = zero(tape)?;
            return Ok(LossParts { total: ce, ce: Some(ce), kd });
        }
    };
    let (n, k) = rows_cols(tape, zs)?;
    if prev.len() != n * k {
        return Err(DistillError::Shape(format!("{} snapshot values for [{n}, {k}]", prev.len())));
    }
    let q = konst(tape, vec![n, k], prev.to_vec())?;
    let ls = tape.log_softmax(zs, T::one())?;
    let prod = tape.mul(q, ls)?;
    let s = tape.sum(prod)?;
    let soft = scale(tape, s, -1.0 / n as f64)?;
    let diff = tape.sub(soft, ce)?;
    let kd = scale(tape, diff, alpha_t)?;
    let total = tape.add(ce, kd)?;
    Ok(LossParts { total, ce: Some(ce), kd })
}

/// Global average pooling of `[N, C, ...]` to `[N, C]`.
pub fn gap<T: Real>(tape: &mut Tape<T>, f: Var) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    if s.len() < 3 {
        return Err(DistillError::Shape(format!("gap needs [N, C, ...], got {s:?}")));
    }
    let r = tape.reshape(f, vec![s[0], s[1], s[2..].iter().product()])?;
    Ok(tape.mean_axis(r, 2)?)
}

/// DDGSD on two views,
/// `CE_1 + CE_2 + lambda_p (KL(p1||p2) + KL(p2||p1)) + lambda_f |g1 - g2|^2`,
/// with the target side of each KL detached and the feature distance
/// averaged over samples.
#[allow(clippy::too_many_arguments)]
pub fn ddgsd_loss<T: Real>(
    tape: &mut Tape<T>,
    z1: Var,
    z2: Var,
    g1: Var,
    g2: Var,
    labels: &[usize],
    lambda_p: f64,
    lambda_f: f64,
    t: f64,
) -> Result<LossParts> {
    same_shape(tape, z1, z2, "view logits")?;
    same_shape(tape, g1, g2, "view features")?;
    let c1 = tape.cross_entropy(z1, labels)?;
    let c2 = tape.cross_entropy(z2, labels)?;
    let ce = tape.add(c1, c2)?;
    let l1 = tape.log_softmax(z1, T::lit(t))?;
    let l2 = tape.log_softmax(z2, T::lit(t))?;
    let d1 = tape.detach(l1);
    let d2 = tape.detach(l2);
    let k12 = kl_logp(tape, d1, l2)?;
    let k21 = kl_logp(tape, d2, l1)?;
    let pred = tape.add(k12, k21)?;
    let pred = scale(tape, pred, lambda_p)?;
    let d = tape.sub(g1, g2)?;
    let sq = tape.square(d)?;
    let rows = tape.sum_axis(sq, 1)?;
    let feat = tape.mean(rows)?;
    let feat = scale(tape, feat, lambda_f)?;
    let kd = tape.add(pred, feat)?;
    let total = tape.add(ce, kd)?;
    Ok(LossParts { total, ce: Some(ce), kd })
}
