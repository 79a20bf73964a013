//! Stop-gradient objectives written out term by term, with every detached
//! target supplied as a constant. Central differences of these give the
//! gradient the tape should produce.

use hsib_distill::losses::{kl_logp, peer_attention};
use hsib_tensor::{Tape, Var};

pub fn lsm(t: &mut Tape<f64>, z: Var, temp: f64) -> Var {
    t.log_softmax(z, temp).unwrap()
}

pub fn sum_vars(t: &mut Tape<f64>, vs: &[Var]) -> Var {
    vs.iter().skip(1).fold(vs[0], |a, &b| t.add(a, b).unwrap())
}

pub fn dml(t: &mut Tape<f64>, live: &[Var], frozen: &[Var], y: &[usize]) -> Var {
    let m = live.len();
    let mut terms = Vec::new();
    for i in 0..m {
        terms.push(t.cross_entropy(live[i], y).unwrap());
        let li = lsm(t, live[i], 1.0);
        for j in (0..m).filter(|&j| j != i) {
            let lj = lsm(t, frozen[j], 1.0);
            let kl = kl_logp(t, lj, li).unwrap();
            terms.push(t.mul_scalar(kl, 1.0 / (m - 1) as f64).unwrap());
        }
    }
    sum_vars(t, &terms)
}

fn gated(t: &mut Tape<f64>, zs: &[Var], g: Var) -> Var {
    let p = t.softmax(g, 1.0).unwrap();
    let parts: Vec<Var> = (0..zs.len())
        .map(|i| {
            let gi = t.slice1(p, i).unwrap();
            t.scale_rows(zs[i], gi).unwrap()
        })
        .collect();
    sum_vars(t, &parts)
}

/// Branches follow the frozen gated ensemble; the live ensemble gets CE.
pub fn one(t: &mut Tape<f64>, live: &[Var], gate: Var, frozen: &[Var], frozen_gate: Var, y: &[usize], temp: f64) -> Var {
    let ens = gated(t, live, gate);
    let fe = gated(t, frozen, frozen_gate);
    let le = lsm(t, fe, temp);
    let mut terms = vec![t.cross_entropy(ens, y).unwrap()];
    for &z in live {
        terms.push(t.cross_entropy(z, y).unwrap());
        let li = lsm(t, z, temp);
        let kl = kl_logp(t, le, li).unwrap();
        terms.push(t.mul_scalar(kl, temp * temp).unwrap());
    }
    sum_vars(t, &terms)
}

fn mean_prob(t: &mut Tape<f64>, zs: &[Var], temp: f64) -> Var {
    let probs: Vec<Var> = zs.iter().map(|&z| t.softmax(z, temp).unwrap()).collect();
    let s = sum_vars(t, &probs);
    let m = t.mul_scalar(s, 1.0 / zs.len() as f64).unwrap();
    t.ln(m).unwrap()
}

pub fn clilr(t: &mut Tape<f64>, live: &[Var], frozen: &[Var], y: &[usize], temp: f64) -> Var {
    let m = live.len();
    let mut terms = Vec::new();
    for i in 0..m {
        terms.push(t.cross_entropy(live[i], y).unwrap());
        let others: Vec<Var> = (0..m).filter(|&j| j != i).map(|j| frozen[j]).collect();
        let lt = mean_prob(t, &others, temp);
        let li = lsm(t, live[i], temp);
        let kl = kl_logp(t, lt, li).unwrap();
        terms.push(t.mul_scalar(kl, temp * temp).unwrap());
    }
    sum_vars(t, &terms)
}

/// Tier 1 with live attention over frozen peer probabilities, tier 2 from
/// the frozen mean peer.
#[allow(clippy::too_many_arguments)]
pub fn okddip(
    t: &mut Tape<f64>,
    leader: Var,
    peers: &[Var],
    feats: &[Var],
    wq: Var,
    wk: Var,
    frozen_peers: &[Var],
    y: &[usize],
    temp: f64,
) -> Var {
    let a = peer_attention(t, feats, wq, wk).unwrap();
    let probs: Vec<Var> = frozen_peers.iter().map(|&z| t.softmax(z, temp).unwrap()).collect();
    let p = t.stack(&probs).unwrap();
    let tgt = t.matmul(a, p).unwrap();
    let mut terms = vec![t.cross_entropy(leader, y).unwrap()];
    for (i, &z) in peers.iter().enumerate() {
        terms.push(t.cross_entropy(z, y).unwrap());
        let ti = t.slice1(tgt, i).unwrap();
        let lt = t.ln(ti).unwrap();
        let li = lsm(t, z, temp);
        let kl = kl_logp(t, lt, li).unwrap();
        terms.push(t.mul_scalar(kl, temp * temp).unwrap());
    }
    let lm = mean_prob(t, frozen_peers, temp);
    let l0 = lsm(t, leader, temp);
    let kl = kl_logp(t, lm, l0).unwrap();
    terms.push(t.mul_scalar(kl, temp * temp).unwrap());
    sum_vars(t, &terms)
}

/// Two views: KL targets frozen, spatial means of `[N, C, H, W]` maps live.
#[allow(clippy::too_many_arguments)]
pub fn ddgsd(
    t: &mut Tape<f64>,
    z: [Var; 2],
    frozen: [Var; 2],
    maps: [Var; 2],
    y: &[usize],
    lp: f64,
    lf: f64,
) -> Var {
    let c1 = t.cross_entropy(z[0], y).unwrap();
    let c2 = t.cross_entropy(z[1], y).unwrap();
    let (l1, l2) = (lsm(t, z[0], 1.0), lsm(t, z[1], 1.0));
    let (f1, f2) = (lsm(t, frozen[0], 1.0), lsm(t, frozen[1], 1.0));
    let k12 = kl_logp(t, f1, l2).unwrap();
    let k21 = kl_logp(t, f2, l1).unwrap();
    let kk = t.add(k12, k21).unwrap();
    let kk = t.mul_scalar(kk, lp).unwrap();
    let s = t.shape(maps[0]).to_vec();
    let flat = vec![s[0], s[1], s[2..].iter().product()];
    let m1 = t.reshape(maps[0], flat.clone()).unwrap();
    let m1 = t.mean_axis(m1, 2).unwrap();
    let m2 = t.reshape(maps[1], flat).unwrap();
    let m2 = t.mean_axis(m2, 2).unwrap();
    let d = t.sub(m1, m2).unwrap();
    let d = t.square(d).unwrap();
    let d = t.sum(d).unwrap();
    let d = t.mul_scalar(d, lf / s[0] as f64).unwrap();
    sum_vars(t, &[c1, c2, kk, d])
}
