//! Exact expectations of every estimator on [`DiscreteJoint`] by brute-force
//! enumeration of all sample outcomes.
//!
//! Values are on the MI scale, i.e. the expectation of the same per-draw
//! realization the Monte Carlo estimators average. Nothing here samples.

use crate::ais::{geo, DiscreteKernel, Schedule};
use crate::models::DiscreteJoint;
use crate::multisample::Variant;
use crate::stats::{logmeanexp, logsumexp, softmax};
use crate::variational::{CriticTable, QTable};
use crate::{Error, Result};

use super::{contrast, eubo_reduce, reverse_reduce};

/// Largest number of outcome terms any single call will visit.
pub const LIMIT: u128 = 10_000_000;

fn guard(terms: u128) -> Result<()> {
    if terms > LIMIT {
        Err(Error::TooLarge { terms, limit: LIMIT })
    } else {
        Ok(())
    }
}

fn pow(base: usize, e: usize) -> u128 {
    (0..e).fold(1u128, |a, _| a.saturating_mul(base as u128))
}

/// One outcome of a slot: its probability, log-weight, and the first and
/// last chain states.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Atom {
    p: f64,
    w: f64,
    start: usize,
    end: usize,
}

/// Visits the Cartesian product of `lists`, passing the joint probability and
/// the chosen atoms.
fn product(lists: &[&[Atom]], f: &mut dyn FnMut(f64, &[Atom])) {
    fn rec(lists: &[&[Atom]], p: f64, chosen: &mut Vec<Atom>, f: &mut dyn FnMut(f64, &[Atom])) {
        let Some((first, rest)) = lists.split_first() else {
            f(p, chosen);
            return;
        };
        for a in first.iter() {
            chosen.push(*a);
            rec(rest, p * a.p, chosen, f);
            chosen.pop();
        }
    }
    rec(lists, 1.0, &mut Vec::with_capacity(lists.len()), f);
}

/// Per-observation quantities.
struct Row {
    px: f64,
    post: Vec<f64>,
    logq: Vec<f64>,
    /// `log p(x, z)`.
    logp: Vec<f64>,
    /// `log p(x|z)`.
    known: Vec<f64>,
}

impl Row {
    fn f(&self, z: usize) -> f64 {
        self.logp[z] - self.logq[z]
    }
}

fn rows(model: &DiscreteJoint, q: &QTable) -> Result<Vec<Row>> {
    if q.nx != model.nx() || q.nz != model.nz() {
        return Err(Error::Dimension { expected: model.nx() * model.nz(), got: q.nx * q.nz });
    }
    Ok((0..model.nx())
        .filter(|&x| model.px()[x] > 0.0)
        .map(|x| {
            let logp: Vec<f64> = (0..model.nz()).map(|z| model.p(x, z).ln()).collect();
            Row {
                px: model.px()[x],
                post: model.posterior_row(x),
                logq: (0..model.nz()).map(|z| q.log_q(x, z)).collect(),
                known: (0..model.nz()).map(|z| logp[z] - model.pz()[z].ln()).collect(),
                logp,
            }
        })
        .collect())
}

/// Expectation of `g(x, z)` under `p(x, z)`.
fn joint_mean(rows: &[Row], g: impl Fn(&Row, usize) -> f64) -> f64 {
    rows.iter()
        .map(|r| r.px * (0..r.post.len()).filter(|&z| r.post[z] > 0.0).map(|z| r.post[z] * g(r, z)).sum::<f64>())
        .sum()
}

/// Exact mutual information.
pub fn mi(model: &DiscreteJoint) -> f64 {
    let mut s = 0.0;
    for x in 0..model.nx() {
        for z in 0..model.nz() {
            let p = model.p(x, z);
            if p > 0.0 {
                s += p * (p / (model.px()[x] * model.pz()[z])).ln();
            }
        }
    }
    s
}

pub fn ba_lower(model: &DiscreteJoint, q: &QTable) -> Result<f64> {
    Ok(joint_mean(&rows(model, q)?, |r, z| r.known[z] - r.f(z)))
}

pub fn ba_upper(model: &DiscreteJoint, q: &QTable) -> Result<f64> {
    let rs = rows(model, q)?;
    let elbo: f64 = rs.iter().map(|r| r.px * (0..r.logq.len()).map(|z| r.logq[z].exp() * r.f(z)).sum::<f64>()).sum();
    Ok(joint_mean(&rs, |r, z| r.known[z]) - elbo)
}

/// `E_x KL(p(z|x) ‖ q(z|x))`, the BA lower bound's gap.
pub fn posterior_kl(model: &DiscreteJoint, q: &QTable) -> Result<f64> {
    Ok(joint_mean(&rows(model, q)?, |r, z| r.post[z].ln() - r.logq[z]))
}

/// The joint `z_0` as a slot whose probability is accounted for outside.
fn point(r: &Row, z0: usize) -> Vec<Atom> {
    vec![Atom { p: 1.0, w: r.f(z0), start: z0, end: z0 }]
}

fn static_atoms(r: &Row) -> Vec<Atom> {
    (0..r.logq.len()).map(|z| Atom { p: r.logq[z].exp(), w: r.f(z), start: z, end: z }).collect()
}

fn posterior_atoms(r: &Row) -> Vec<Atom> {
    (0..r.post.len()).filter(|&z| r.post[z] > 0.0).map(|z| Atom { p: r.post[z], w: r.f(z), start: z, end: z }).collect()
}

/// `E_x E[known(x, z_0) - reduce(atoms)]` with slot 0 the joint draw and the
/// remaining slots drawn from `rest(row, z_0)`.
fn positive_slot(
    rows: &[Row],
    first: impl Fn(&Row, usize) -> Vec<Atom>,
    rest: impl Fn(&Row, usize) -> Vec<Vec<Atom>>,
    value: impl Fn(&[Atom]) -> f64,
) -> f64 {
    let mut total = 0.0;
    for r in rows {
        for z0 in 0..r.post.len() {
            if r.post[z0] == 0.0 {
                continue;
            }
            let head = first(r, z0);
            let tail = rest(r, z0);
            let mut lists: Vec<&[Atom]> = vec![&head];
            lists.extend(tail.iter().map(|v| v.as_slice()));
            let mut e = 0.0;
            product(&lists, &mut |p, a| e += p * (r.known[z0] - value(a)));
            total += r.px * r.post[z0] * e;
        }
    }
    total
}

/// `E_x [E_known(x) - E reduce(atoms)]` with all slots independent of the joint `z`.
fn free_slots(rows: &[Row], lists: impl Fn(&Row) -> Vec<Vec<Atom>>, value: impl Fn(&[Atom]) -> f64) -> f64 {
    let mut total = joint_mean(rows, |r, z| r.known[z]);
    for r in rows {
        let ls = lists(r);
        let refs: Vec<&[Atom]> = ls.iter().map(|v| v.as_slice()).collect();
        let mut e = 0.0;
        product(&refs, &mut |p, a| e += p * value(a));
        total -= r.px * e;
    }
    total
}

fn weights(a: &[Atom]) -> Vec<f64> {
    a.iter().map(|a| a.w).collect()
}

pub fn iwae_upper(model: &DiscreteJoint, q: &QTable, k: usize) -> Result<f64> {
    super::check_k(k)?;
    guard(model.nx() as u128 * pow(model.nz(), k))?;
    let rs = rows(model, q)?;
    Ok(free_slots(&rs, |r| vec![static_atoms(r); k], |a| logmeanexp(&weights(a))))
}

pub fn iwae_lower(model: &DiscreteJoint, q: &QTable, k: usize) -> Result<f64> {
    super::check_k(k)?;
    guard(model.nx() as u128 * pow(model.nz(), k))?;
    let rs = rows(model, q)?;
    Ok(positive_slot(&rs, |r, z0| point(r, z0), |r, _| vec![static_atoms(r); k - 1], |a| eubo_reduce(&weights(a))))
}

/// `(lower_mi, upper_mi)` of reverse IWAE.
pub fn riwae(model: &DiscreteJoint, q: &QTable, k: usize) -> Result<(f64, f64)> {
    super::check_k(k)?;
    guard(model.nx() as u128 * pow(model.nz(), k))?;
    let rs = rows(model, q)?;
    let red = |a: &[Atom]| reverse_reduce(&weights(a));
    let upper = free_slots(
        &rs,
        |r| {
            let mut v = vec![static_atoms(r)];
            v.extend(std::iter::repeat_n(posterior_atoms(r), k - 1));
            v
        },
        red,
    );
    let lower = positive_slot(&rs, |r, z0| point(r, z0), |r, _| vec![posterior_atoms(r); k - 1], red);
    Ok((lower, upper))
}

/// GIWAE with a critic table, enumerating every `K`-tuple.
pub fn giwae(model: &DiscreteJoint, q: &QTable, critic: &CriticTable, k: usize) -> Result<f64> {
    super::check_k(k)?;
    guard(model.nx() as u128 * pow(model.nz(), k))?;
    let rs = rows(model, q)?;
    let mut total = 0.0;
    for (x, r) in (0..model.nx()).filter(|&x| model.px()[x] > 0.0).zip(&rs) {
        let tail = vec![static_atoms(r); k - 1];
        for z0 in 0..r.post.len() {
            if r.post[z0] == 0.0 {
                continue;
            }
            let head = point(r, z0);
            let mut lists: Vec<&[Atom]> = vec![&head];
            lists.extend(tail.iter().map(|v| v.as_slice()));
            let mut e = 0.0;
            product(&lists, &mut |p, a| {
                let t: Vec<f64> = a.iter().map(|a| critic.get(x, a.end)).collect();
                e += p * contrast(&t);
            });
            total += r.px * r.post[z0] * (r.known[z0] - r.f(z0) + e);
        }
    }
    Ok(total)
}

/// Number of ways to write `n` as an ordered sum of `parts` non-negative integers.
fn compositions(n: usize, parts: usize) -> u128 {
    // C(n + parts - 1, parts - 1)
    let mut c: u128 = 1;
    for i in 0..(parts as u128 - 1) {
        c = c * (n as u128 + 1 + i) / (i + 1);
    }
    c
}

fn for_each_composition(n: usize, parts: usize, f: &mut dyn FnMut(&[usize])) {
    fn rec(left: usize, idx: usize, c: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if idx + 1 == c.len() {
            c[idx] = left;
            f(c);
            return;
        }
        for v in 0..=left {
            c[idx] = v;
            rec(left - v, idx + 1, c, f);
        }
    }
    let mut c = vec![0; parts];
    rec(n, 0, &mut c, f);
}

/// GIWAE at large `K`, summing over the multinomial counts of the `K - 1`
/// base samples instead of over ordered tuples.
pub fn giwae_multinomial(model: &DiscreteJoint, q: &QTable, critic: &CriticTable, k: usize) -> Result<f64> {
    super::check_k(k)?;
    let nz = model.nz();
    guard(model.nx() as u128 * nz as u128 * compositions(k - 1, nz))?;
    let rs = rows(model, q)?;
    let mut ln_fact = vec![0.0; k + 1];
    for i in 1..=k {
        ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
    }
    let mut total = 0.0;
    for (x, r) in (0..model.nx()).filter(|&x| model.px()[x] > 0.0).zip(&rs) {
        // Expected contrast given z_0, for each z_0.
        let mut e = vec![0.0; nz];
        for_each_composition(k - 1, nz, &mut |c| {
            let mut lp = ln_fact[k - 1];
            for j in 0..nz {
                if c[j] > 0 {
                    lp += c[j] as f64 * r.logq[j] - ln_fact[c[j]];
                }
            }
            let p = lp.exp();
            if p == 0.0 {
                return;
            }
            for (z0, ez) in e.iter_mut().enumerate() {
                let t0 = critic.get(x, z0);
                let d: Vec<f64> = (0..nz).map(|j| critic.get(x, j) - t0).collect();
                let m = (0..nz).filter(|&j| c[j] > 0).map(|j| d[j]).fold(0.0, f64::max);
                let mut s = (-m).exp();
                for j in 0..nz {
                    if c[j] > 0 {
                        s += c[j] as f64 * (d[j] - m).exp();
                    }
                }
                *ez += p * -(m + (s / k as f64).ln());
            }
        });
        for z0 in 0..nz {
            if r.post[z0] > 0.0 {
                total += r.px * r.post[z0] * (r.known[z0] - r.f(z0) + e[z0]);
            }
        }
    }
    Ok(total)
}

/// `E KL(p(s | z_{1:K}) ‖ softmax_s T(x, z_s))` under the symmetric extended
/// target, where one uniformly chosen slot holds the posterior draw.
pub fn giwae_index_kl(model: &DiscreteJoint, q: &QTable, critic: &CriticTable, k: usize) -> Result<f64> {
    super::check_k(k)?;
    guard(model.nx() as u128 * pow(model.nz(), k))?;
    let rs = rows(model, q)?;
    let mut total = 0.0;
    for (x, r) in (0..model.nx()).filter(|&x| model.px()[x] > 0.0).zip(&rs) {
        let atoms = static_atoms(r);
        let lists = vec![atoms.as_slice(); k];
        let mut e = 0.0;
        product(&lists, &mut |pq, a| {
            // p_tgt(z) = pq · mean_s p(z_s|x) / q(z_s|x)
            let ratios: Vec<f64> = a.iter().map(|a| r.post[a.end] / a.p).collect();
            let p = pq * ratios.iter().sum::<f64>() / k as f64;
            if p == 0.0 {
                return;
            }
            let w: Vec<f64> = a.iter().map(|a| a.w).collect();
            let t: Vec<f64> = a.iter().map(|a| critic.get(x, a.end)).collect();
            let ps = softmax(&w);
            let lt = logsumexp(&t);
            let kl: f64 = (0..k).filter(|&s| ps[s] > 0.0).map(|s| ps[s] * (ps[s].ln() - (t[s] - lt))).sum();
            e += p * kl;
        });
        total += r.px * e;
    }
    Ok(total)
}

/// Generalized MINE-DV: `BA + E_p[T] - log E_{p(x)q(z|x)}[e^T]`.
pub fn mine_dv(model: &DiscreteJoint, q: &QTable, critic: &CriticTable) -> Result<f64> {
    let rs = rows(model, q)?;
    let xs: Vec<usize> = (0..model.nx()).filter(|&x| model.px()[x] > 0.0).collect();
    let pos = joint_mean(&rs, |r, z| r.known[z] - r.f(z));
    let t: f64 = xs.iter().zip(&rs).map(|(&x, r)| r.px * (0..model.nz()).map(|z| r.post[z] * critic.get(x, z)).sum::<f64>()).sum();
    let terms: Vec<f64> = xs
        .iter()
        .zip(&rs)
        .flat_map(|(&x, r)| (0..model.nz()).map(move |z| r.px.ln() + r.logq[z] + critic.get(x, z)))
        .collect();
    Ok(pos + t - logsumexp(&terms))
}

/// Generalized MINE-F: `BA + E_p[T] - E_{p(x)q(z|x)}[e^T] + 1`.
pub fn mine_f(model: &DiscreteJoint, q: &QTable, critic: &CriticTable) -> Result<f64> {
    let rs = rows(model, q)?;
    let xs: Vec<usize> = (0..model.nx()).filter(|&x| model.px()[x] > 0.0).collect();
    let pos = joint_mean(&rs, |r, z| r.known[z] - r.f(z));
    let t: f64 = xs.iter().zip(&rs).map(|(&x, r)| r.px * (0..model.nz()).map(|z| r.post[z] * critic.get(x, z)).sum::<f64>()).sum();
    let neg: f64 = xs
        .iter()
        .zip(&rs)
        .map(|(&x, r)| r.px * (0..model.nz()).map(|z| (r.logq[z] + critic.get(x, z)).exp()).sum::<f64>())
        .sum();
    Ok(pos + t - neg + 1.0)
}

/// `log Z(x) = log Σ_z q(z|x) e^{T(x,z)}` for every `x`.
pub fn log_partition(model: &DiscreteJoint, q: &QTable, critic: &CriticTable) -> Vec<f64> {
    (0..model.nx())
        .map(|x| logsumexp(&(0..model.nz()).map(|z| q.log_q(x, z) + critic.get(x, z)).collect::<Vec<_>>()))
        .collect()
}

/// Exact IBAL: the BA bound at `π(z|x) ∝ q(z|x) e^{T(x,z)}`.
pub fn ibal(model: &DiscreteJoint, q: &QTable, critic: &CriticTable) -> Result<f64> {
    let rs = rows(model, q)?;
    let lz = log_partition(model, q, critic);
    let xs: Vec<usize> = (0..model.nx()).filter(|&x| model.px()[x] > 0.0).collect();
    let mut s = 0.0;
    for (&x, r) in xs.iter().zip(&rs) {
        for z in 0..model.nz() {
            if r.post[z] > 0.0 {
                s += r.px * r.post[z] * (r.logq[z] + critic.get(x, z) - lz[x] - model.pz()[z].ln());
            }
        }
    }
    Ok(s)
}

/// `KL(p(x) ‖ π(x))` with `π(x) ∝ p(x) Z(x)`, computed directly.
pub fn ibal_marginal_kl(model: &DiscreteJoint, q: &QTable, critic: &CriticTable) -> f64 {
    let lz = log_partition(model, q, critic);
    let px = model.px();
    let lognorm = logsumexp(&(0..model.nx()).filter(|&x| px[x] > 0.0).map(|x| px[x].ln() + lz[x]).collect::<Vec<_>>());
    (0..model.nx())
        .filter(|&x| px[x] > 0.0)
        .map(|x| {
            let log_pi = px[x].ln() + lz[x] - lognorm;
            px[x] * (px[x].ln() - log_pi)
        })
        .sum()
}

/// Transition matrices `K_t` for `t = 1..T-1`, each invariant for `π_t`.
fn kernels<K: DiscreteKernel>(r: &Row, sched: &Schedule, kernel: &K) -> Vec<Vec<f64>> {
    (0..sched.len())
        .map(|t| {
            let logpi: Vec<f64> = (0..r.logq.len()).map(|z| geo(r.logq[z], r.logp[z], sched.beta(t))).collect();
            kernel.matrix(&logpi)
        })
        .collect()
}

/// All forward chain paths from the base.
fn forward_atoms(r: &Row, sched: &Schedule, mats: &[Vec<f64>]) -> Vec<Atom> {
    let n = r.logq.len();
    let tt = sched.len();
    let mut out = Vec::new();
    fn rec(
        r: &Row,
        sched: &Schedule,
        mats: &[Vec<f64>],
        t: usize,
        z: usize,
        p: f64,
        w: f64,
        start: usize,
        out: &mut Vec<Atom>,
    ) {
        let n = r.logq.len();
        let w = w + (sched.beta(t) - sched.beta(t - 1)) * r.f(z);
        if t == sched.len() {
            out.push(Atom { p, w, start, end: z });
            return;
        }
        let m = &mats[t];
        for j in 0..n {
            let pj = m[z * n + j];
            if pj > 0.0 {
                rec(r, sched, mats, t + 1, j, p * pj, w, start, out);
            }
        }
    }
    for z0 in 0..n {
        let p = r.logq[z0].exp();
        if p > 0.0 && tt > 0 {
            rec(r, sched, mats, 1, z0, p, 0.0, z0, &mut out);
        }
    }
    out
}

/// All backward chain paths from `start`; `end` is the final `z_0`.
fn backward_atoms(r: &Row, sched: &Schedule, mats: &[Vec<f64>], start: usize) -> Vec<Atom> {
    let mut out = Vec::new();
    fn rec(r: &Row, sched: &Schedule, mats: &[Vec<f64>], t: usize, z: usize, p: f64, w: f64, start: usize, out: &mut Vec<Atom>) {
        let n = r.logq.len();
        let w = w + (sched.beta(t) - sched.beta(t - 1)) * r.f(z);
        if t == 1 {
            out.push(Atom { p, w, start, end: z });
            return;
        }
        let m = &mats[t - 1];
        for j in 0..n {
            let pj = m[z * n + j];
            if pj > 0.0 {
                rec(r, sched, mats, t - 1, j, p * pj, w, start, out);
            }
        }
    }
    rec(r, sched, mats, sched.len(), start, 1.0, 0.0, start, &mut out);
    out
}

fn backward_from_posterior(r: &Row, sched: &Schedule, mats: &[Vec<f64>]) -> Vec<Atom> {
    let mut out = Vec::new();
    for z in 0..r.post.len() {
        if r.post[z] > 0.0 {
            out.extend(backward_atoms(r, sched, mats, z).into_iter().map(|a| Atom { p: a.p * r.post[z], ..a }));
        }
    }
    out
}

/// Exact `(lower_mi, upper_mi)` of a multi-sample AIS variant with `k`
/// chains, schedule `sched` and an enumerable kernel.
pub fn multisample_ais<K: DiscreteKernel>(
    model: &DiscreteJoint,
    q: &QTable,
    variant: Variant,
    sched: &Schedule,
    kernel: &K,
    k: usize,
) -> Result<(f64, f64)> {
    super::check_k(k)?;
    let paths = pow(model.nz(), sched.len());
    guard((model.nx() * model.nz()) as u128 * pow(paths.min(u32::MAX as u128) as usize, k))?;
    let rs = rows(model, q)?;
    let mats: Vec<Vec<Vec<f64>>> = rs.iter().map(|r| kernels(r, sched, kernel)).collect();
    let idx = |r: &Row| rs.iter().position(|o| std::ptr::eq(o, r)).expect("row of rs");
    let fwd = |r: &Row| forward_atoms(r, sched, &mats[idx(r)]);
    let bwd = |r: &Row, s: usize| backward_atoms(r, sched, &mats[idx(r)], s);
    let bpost = |r: &Row| backward_from_posterior(r, sched, &mats[idx(r)]);
    let lme = |a: &[Atom]| logmeanexp(&weights(a));
    let rev = |a: &[Atom]| reverse_reduce(&weights(a));
    let eubo = |a: &[Atom]| eubo_reduce(&weights(a));
    Ok(match variant {
        Variant::Im => {
            let upper = free_slots(&rs, |r| vec![fwd(r); k], lme);
            let lower = positive_slot(&rs, |r, z0| bwd(r, z0), |r, _| vec![fwd(r); k - 1], eubo);
            (lower, upper)
        }
        Variant::Ir => {
            let upper = free_slots(
                &rs,
                |r| {
                    let mut v = vec![fwd(r)];
                    v.extend(std::iter::repeat_n(bpost(r), k - 1));
                    v
                },
                rev,
            );
            let lower = positive_slot(&rs, |r, z0| bwd(r, z0), |r, _| vec![bpost(r); k - 1], rev);
            (lower, upper)
        }
        Variant::Cr => {
            // Forward chain to endpoint e, then k - 1 backward chains from e.
            let mut elbo = 0.0;
            for r in &rs {
                let mut e = 0.0;
                for a in fwd(r) {
                    let b = bwd(r, a.end);
                    let head = [a];
                    let mut lists: Vec<&[Atom]> = vec![&head];
                    lists.extend(std::iter::repeat_n(b.as_slice(), k - 1));
                    product(&lists, &mut |p, c| e += p * rev(c));
                }
                elbo += r.px * e;
            }
            let upper = joint_mean(&rs, |r, z| r.known[z]) - elbo;
            let lower = positive_slot(&rs, |r, z0| bwd(r, z0), |r, z0| vec![bwd(r, z0); k - 1], rev);
            (lower, upper)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ais::{ExactDiscrete, Metropolis};
    use crate::rng;

    fn instance(seed: u64, nx: usize, nz: usize) -> (DiscreteJoint, QTable) {
        let mut r = rng::stream(seed, 0, 0);
        (DiscreteJoint::random(nx, nz, 0.6, &mut r).unwrap(), QTable::random(nx, nz, &mut r))
    }

    #[test]
    fn posterior_q_makes_ba_exact() {
        let (m, _) = instance(1, 4, 5);
        let q = QTable::posterior(&m);
        assert!((ba_lower(&m, &q).unwrap() - mi(&m)).abs() < 1e-12);
        assert!((ba_upper(&m, &q).unwrap() - mi(&m)).abs() < 1e-12);
        assert!((mi(&m) - m.mi_from_entropies()).abs() < 1e-12);
    }

    #[test]
    fn iwae_is_monotone_and_capped() {
        let (m, q) = instance(2, 3, 6);
        let ba = ba_lower(&m, &q).unwrap();
        let eubo1 = ba_upper(&m, &q).unwrap();
        let mut prev_lo = ba;
        let mut prev_hi = eubo1;
        for k in 1..=4 {
            let lo = iwae_lower(&m, &q, k).unwrap();
            let hi = iwae_upper(&m, &q, k).unwrap();
            assert!(lo >= prev_lo - 1e-12 && hi <= prev_hi + 1e-12);
            assert!(lo <= ba + (k as f64).ln() + 1e-12);
            assert!(hi >= eubo1 - (k as f64).ln() - 1e-12);
            assert!(lo <= mi(&m) + 1e-12 && hi >= mi(&m) - 1e-12);
            prev_lo = lo;
            prev_hi = hi;
        }
        assert!((iwae_lower(&m, &q, 1).unwrap() - ba).abs() < 1e-12);
    }

    #[test]
    fn optimal_critic_giwae_equals_iwae() {
        let (m, q) = instance(3, 3, 4);
        let t = CriticTable::optimal(&m, &q).map(|x, _, v| v + x as f64);
        for k in 1..=3 {
            let a = giwae(&m, &q, &t, k).unwrap();
            let b = iwae_lower(&m, &q, k).unwrap();
            assert!((a - b).abs() < 1e-10);
            assert!((giwae_multinomial(&m, &q, &t, k).unwrap() - a).abs() < 1e-10);
        }
    }

    #[test]
    fn multinomial_matches_tuples_for_any_critic() {
        let (m, q) = instance(4, 2, 4);
        let mut r = rng::stream(4, 1, 0);
        let t = CriticTable::new(2, 4, (0..8).map(|_| rand::Rng::random::<f64>(&mut r) * 3.0).collect()).unwrap();
        for k in 1..=4 {
            assert!((giwae_multinomial(&m, &q, &t, k).unwrap() - giwae(&m, &q, &t, k).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn index_kl_identity() {
        let (m, q) = instance(5, 3, 4);
        let t = CriticTable::new(3, 4, (0..12).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        for k in 1..=3 {
            let gap = iwae_lower(&m, &q, k).unwrap() - giwae(&m, &q, &t, k).unwrap();
            assert!((gap - giwae_index_kl(&m, &q, &t, k).unwrap()).abs() < 1e-10, "k={k}");
        }
    }

    #[test]
    fn energy_ladder_and_identities() {
        let (m, q) = instance(6, 4, 5);
        let t = CriticTable::new(4, 5, (0..20).map(|i| (i as f64 * 1.3).cos()).collect()).unwrap();
        let (f, dv, ib) = (mine_f(&m, &q, &t).unwrap(), mine_dv(&m, &q, &t).unwrap(), ibal(&m, &q, &t).unwrap());
        assert!(f <= dv + 1e-12 && dv <= ib + 1e-12 && ib <= mi(&m) + 1e-12);
        assert!((ib - dv - ibal_marginal_kl(&m, &q, &t)).abs() < 1e-10);
        let ba = ba_lower(&m, &q).unwrap();
        assert!(ib - ba <= posterior_kl(&m, &q).unwrap() + 1e-12);
        let opt = CriticTable::optimal(&m, &q);
        assert!((ibal(&m, &q, &opt).unwrap() - mi(&m)).abs() < 1e-10);
        let zero = CriticTable::new(4, 5, vec![0.0; 20]).unwrap();
        assert!((mine_f(&m, &q, &zero).unwrap() - ba).abs() < 1e-12);
        assert!((mine_dv(&m, &q, &zero).unwrap() - ba).abs() < 1e-12);
        assert!((ibal(&m, &q, &zero.map(|_, _, _| 2.5)).unwrap() - ba).abs() < 1e-12);
    }

    #[test]
    fn ais_with_one_step_is_iwae() {
        let (m, q) = instance(7, 3, 4);
        let s = Schedule::linear(1).unwrap();
        for k in 1..=3 {
            let (lo, hi) = multisample_ais(&m, &q, Variant::Im, &s, &Metropolis, k).unwrap();
            assert!((lo - iwae_lower(&m, &q, k).unwrap()).abs() < 1e-12);
            assert!((hi - iwae_upper(&m, &q, k).unwrap()).abs() < 1e-12);
            let (rl, rh) = multisample_ais(&m, &q, Variant::Ir, &s, &Metropolis, k).unwrap();
            let (a, b) = riwae(&m, &q, k).unwrap();
            assert!((rl - a).abs() < 1e-12 && (rh - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ais_sandwich_tightens_with_perfect_transitions() {
        let (m, q) = instance(8, 3, 4);
        let truth = mi(&m);
        let mut prev = f64::INFINITY;
        for t in [1, 2, 4] {
            let s = Schedule::linear(t).unwrap();
            let (lo, hi) = multisample_ais(&m, &q, Variant::Im, &s, &ExactDiscrete, 1).unwrap();
            assert!(lo <= truth + 1e-12 && hi >= truth - 1e-12);
            assert!(hi - lo < prev);
            prev = hi - lo;
        }
    }

    #[test]
    fn variants_bracket_and_k1_agree() {
        let (m, q) = instance(9, 2, 3);
        let truth = mi(&m);
        let s = Schedule::linear(3).unwrap();
        let one = multisample_ais(&m, &q, Variant::Im, &s, &Metropolis, 1).unwrap();
        for v in [Variant::Im, Variant::Ir, Variant::Cr] {
            let (a, b) = multisample_ais(&m, &q, v, &s, &Metropolis, 1).unwrap();
            assert!((a - one.0).abs() < 1e-12 && (b - one.1).abs() < 1e-12);
            for k in 2..=3 {
                let (lo, hi) = multisample_ais(&m, &q, v, &s, &Metropolis, k).unwrap();
                assert!(lo <= truth + 1e-12 && hi >= truth - 1e-12, "{v:?} {k}");
                assert!(lo >= one.0 - 1e-12 && hi <= one.1 + 1e-12, "{v:?} {k}");
            }
        }
    }

    #[test]
    fn size_guard() {
        let (m, q) = instance(10, 8, 8);
        assert!(matches!(iwae_lower(&m, &q, 9), Err(Error::TooLarge { .. })));
    }
}
