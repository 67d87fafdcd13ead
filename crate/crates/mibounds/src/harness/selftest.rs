//! Oracle checks: Monte Carlo estimators against exact enumeration on random
//! discrete models, exact identities, and the one-chain / one-step reductions.

use std::fmt;

use rand::Rng;
use serde::Serialize;

use crate::ais::{Hmc, Metropolis, Schedule};
use crate::bounds::{self, enumerate, BoundEstimate};
use crate::energy::{self, IbalMode};
use crate::models::{DiscreteJoint, LinearGaussianVae};
use crate::multisample::{self, Sides, Variant};
use crate::rng;
use crate::task::{MiTask, PriorProposal};
use crate::variational::{ConstantCritic, CriticTable, MlpCritic, QTable};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Tolerance for identities that hold exactly up to rounding.
pub const EXACT_TOL: f64 = 1e-10;
/// Monte Carlo agreement threshold in standard errors.
pub const MC_SIGMAS: f64 = 4.0;

fn mc(name: String, est: &BoundEstimate, exact: f64) -> Check {
    let diff = est.value - exact;
    let passed = if est.std_error > 0.0 { diff.abs() <= MC_SIGMAS * est.std_error } else { diff.abs() <= EXACT_TOL };
    Check { name, passed, detail: format!("mc {:.6} ± {:.2e}, exact {exact:.6}, z = {:.2}", est.value, est.std_error, diff / est.std_error) }
}

fn close(name: String, a: f64, b: f64) -> Check {
    Check { passed: (a - b).abs() <= EXACT_TOL, detail: format!("{a:.12} vs {b:.12}"), name }
}

fn le(name: String, chain: &[f64]) -> Check {
    let passed = chain.windows(2).all(|w| w[0] <= w[1] + EXACT_TOL);
    Check { name, passed, detail: format!("{chain:.6?}") }
}

fn same(name: String, a: f64, b: f64) -> Check {
    Check { passed: a.to_bits() == b.to_bits(), detail: format!("{a:?} vs {b:?}"), name }
}

/// A random discrete instance sized so that `K`-chain, `T`-step enumeration
/// stays under the enumeration limit.
pub struct Instance {
    pub model: DiscreteJoint,
    pub q: QTable,
    pub critic: CriticTable,
    pub k: usize,
    pub t: usize,
}

impl Instance {
    pub fn random(seed: u64, index: u64) -> Result<Instance> {
        let mut r = rng::stream(seed, index, rng::AUX + 21);
        let k = r.random_range(1..=3);
        let t = r.random_range(1..=3);
        let nx = r.random_range(2..=8usize);
        let mut nz = r.random_range(2..=8usize);
        while nz > 2 && (nx * nz) as f64 * (nz as f64).powi((t * k) as i32) > 1e6 {
            nz -= 1;
        }
        let alpha = r.random_range(0.5..2.0);
        let model = DiscreteJoint::random(nx, nz, alpha, &mut r)?;
        let q = QTable::random(nx, nz, &mut r);
        let critic = CriticTable::new(nx, nz, (0..nx * nz).map(|_| r.random_range(-2.0..2.0)).collect())?;
        Ok(Instance { model, q, critic, k, t })
    }
}

/// Every Monte Carlo estimator's mean against its enumerated expectation.
pub fn mc_vs_enumeration(inst: &Instance, n: usize, seed: u64, tag: &str) -> Result<Vec<Check>> {
    let (m, q, c, k) = (&inst.model, &inst.q, &inst.critic, inst.k);
    let task = MiTask::new(m, q);
    let sched = Schedule::linear(inst.t)?;
    let mut out = vec![
        mc(format!("{tag} ba_lower"), &bounds::ba_lower(&task, n, seed)?, enumerate::ba_lower(m, q)?),
        mc(format!("{tag} ba_upper"), &bounds::ba_upper(&task, n, seed)?, enumerate::ba_upper(m, q)?),
        mc(format!("{tag} iwae_lower K={k}"), &bounds::iwae_lower_mi(&task, k, n, seed)?.0, enumerate::iwae_lower(m, q, k)?),
        mc(format!("{tag} iwae_upper K={k}"), &bounds::iwae_upper_mi(&task, k, n, seed)?, enumerate::iwae_upper(m, q, k)?),
        mc(format!("{tag} giwae K={k}"), &bounds::giwae_lower(&task, c, k, n, seed)?.0, enumerate::giwae(m, q, c, k)?),
        mc(format!("{tag} mine_dv"), &energy::mine_dv(&task, c, n, seed)?, enumerate::mine_dv(m, q, c)?),
        mc(format!("{tag} mine_f"), &energy::mine_f(&task, c, n, seed)?, enumerate::mine_f(m, q, c)?),
    ];
    let (rl, ru) = enumerate::riwae(m, q, k)?;
    let p = bounds::riwae_bounds(&task, k, n, seed)?;
    out.push(mc(format!("{tag} riwae_lower K={k}"), &p.lower_mi, rl));
    out.push(mc(format!("{tag} riwae_upper K={k}"), &p.upper_mi, ru));
    for v in [Variant::Im, Variant::Ir, Variant::Cr] {
        let (lo, hi) = enumerate::multisample_ais(m, q, v, &sched, &Metropolis, k)?;
        let e = multisample::run(&task, v, &sched, &Metropolis, k, n, seed, Sides::Both)?;
        let name = format!("{tag} {v} K={k} T={}", inst.t);
        out.push(mc(format!("{name} lower"), e.lower_mi.as_ref().expect("both sides"), lo));
        out.push(mc(format!("{name} upper"), e.upper_mi.as_ref().expect("both sides"), hi));
    }
    Ok(out)
}

/// Deterministic identities between enumerated quantities.
pub fn exact_identities(inst: &Instance, tag: &str) -> Result<Vec<Check>> {
    let (m, q, c) = (&inst.model, &inst.q, &inst.critic);
    let mi = enumerate::mi(m);
    let ba = enumerate::ba_lower(m, q)?;
    let opt = CriticTable::optimal(m, q);
    let zero = CriticTable::new(m.nx(), m.nz(), vec![0.0; m.nx() * m.nz()])?;
    let (f, dv, ib) = (enumerate::mine_f(m, q, c)?, enumerate::mine_dv(m, q, c)?, enumerate::ibal(m, q, c)?);
    let mut out = Vec::new();
    for k in 1..=3 {
        out.push(close(format!("{tag} giwae at T* = iwae K={k}"), enumerate::giwae(m, q, &opt, k)?, enumerate::iwae_lower(m, q, k)?));
        out.push(close(format!("{tag} constant-critic giwae = ba K={k}"), enumerate::giwae(m, q, &zero, k)?, ba));
        let gap = enumerate::iwae_lower(m, q, k)? - enumerate::giwae(m, q, c, k)?;
        out.push(close(format!("{tag} iwae - giwae = index KL K={k}"), gap, enumerate::giwae_index_kl(m, q, c, k)?));
    }
    out.push(close(format!("{tag} constant-critic mine_dv = ba"), enumerate::mine_dv(m, q, &zero)?, ba));
    out.push(close(format!("{tag} constant-critic mine_f = ba"), enumerate::mine_f(m, q, &zero)?, ba));
    out.push(close(format!("{tag} constant-critic ibal = ba"), enumerate::ibal(m, q, &zero.map(|_, _, _| 1.7))?, ba));
    out.push(le(format!("{tag} mine_f <= mine_dv <= ibal <= mi"), &[f, dv, ib, mi]));
    out.push(close(format!("{tag} ibal - mine_dv = marginal KL"), ib - dv, enumerate::ibal_marginal_kl(m, q, c)));
    out.push(le(format!("{tag} ibal - ba <= posterior KL"), &[ib - ba, enumerate::posterior_kl(m, q)?]));
    out.push(close(format!("{tag} ibal at T* = mi"), enumerate::ibal(m, q, &opt)?, mi));
    Ok(out)
}

/// One-chain and one-step reductions, compared bit for bit on shared seeds.
pub fn reduction_lattice(seed: u64, n: usize) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let m = LinearGaussianVae::random(3, 8, seed, 0.5)?;
    let task = MiTask::new(&m, &PriorProposal);
    let hmc = Hmc::fixed(5, 0.1);
    let s1 = Schedule::linear(1)?;
    let s = Schedule::sigmoid(20, 4.0)?;
    let k = 4;

    let ais = multisample::ais(&task, &s, &hmc, n, seed)?;
    let im1 = multisample::im_ais(&task, &s, &hmc, 1, n, seed)?;
    let cr1 = multisample::cr_ais(&task, &s, &hmc, 1, n, seed)?;
    let lo = |e: &multisample::MultiEstimate| e.lower_mi.as_ref().expect("both sides").value;
    let hi = |e: &multisample::MultiEstimate| e.upper_mi.as_ref().expect("both sides").value;
    out.push(same("im_ais(K=1) = ais, upper".into(), hi(&im1), hi(&ais)));
    out.push(same("im_ais(K=1) = ais, lower".into(), lo(&im1), lo(&ais)));
    out.push(same("cr_ais(K=1) = ais, upper".into(), hi(&cr1), hi(&ais)));
    out.push(same("cr_ais(K=1) = ais, lower".into(), lo(&cr1), lo(&ais)));

    let im_t1 = multisample::im_ais(&task, &s1, &hmc, k, n, seed)?;
    out.push(same(format!("im_ais(T=1) = iwae_upper, K={k}"), hi(&im_t1), bounds::iwae_upper_mi(&task, k, n, seed)?.value));
    out.push(same(format!("im_ais(T=1) = iwae_lower, K={k}"), lo(&im_t1), bounds::iwae_lower_mi(&task, k, n, seed)?.0.value));
    let ir_t1 = multisample::ir_ais(&task, &s1, &hmc, k, n, seed)?;
    let riwae = bounds::riwae_bounds(&task, k, n, seed)?;
    out.push(same(format!("ir_ais(T=1) = riwae_upper, K={k}"), hi(&ir_t1), riwae.upper_mi.value));
    out.push(same(format!("ir_ais(T=1) = riwae_lower, K={k}"), lo(&ir_t1), riwae.lower_mi.value));

    let ba = bounds::ba_lower(&task, n, seed)?.value;
    let critic = MlpCritic::new(8, 3, &[16, 16], seed);
    out.push(same("giwae(K=1) = ba_lower".into(), bounds::giwae_lower(&task, &critic, 1, n, seed)?.0.value, ba));
    out.push(same(
        "giwae(K=1, constant critic) = ba_lower".into(),
        bounds::giwae_lower(&task, &ConstantCritic(3.0), 1, n, seed)?.0.value,
        ba,
    ));
    let q = crate::variational::ConditionalGaussian::standard(8, 3);
    for kk in [1, k] {
        let v = energy::eval_ibal_ais(&m, &q, &critic, &s1, &hmc, kk, n, seed, IbalMode::ApproxLower)?.value;
        out.push(same(format!("ibal approx_lower(T=1) = ba_lower, K={kk}"), v, ba));
    }
    Ok(out)
}

/// The full suite: `instances` random discrete models with `n` outer draws
/// each, plus the reduction lattice.
pub fn run(seed: u64, instances: u64, n: usize) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for i in 0..instances {
        let inst = Instance::random(seed, i)?;
        let tag = format!("instance {i} ({}x{}, K={}, T={})", inst.model.nx(), inst.model.nz(), inst.k, inst.t);
        out.extend(mc_vs_enumeration(&inst, n, seed.wrapping_add(i), &tag)?);
        out.extend(exact_identities(&inst, &tag)?);
    }
    out.extend(reduction_lattice(seed, n.min(2000))?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let checks = run(1, 3, 4000).unwrap();
        let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
        assert!(failed.is_empty(), "{failed:#?}");
        assert!(checks.len() > 60);
    }

    #[test]
    fn instances_respect_enumeration_budget() {
        for i in 0..50 {
            let inst = Instance::random(9, i).unwrap();
            let (nx, nz) = (inst.model.nx(), inst.model.nz());
            assert!((nx * nz) as f64 * (nz as f64).powi((inst.t * inst.k) as i32) <= 1e6 || nz == 2);
        }
    }
}
