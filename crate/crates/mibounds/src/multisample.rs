//! Multi-sample AIS in an extended state space: independent (IM), independent
//! reverse (IR) and coupled reverse (CR) wirings of `K` chains, plus BDMC.
//!
//! Chain `k` of outer draw `i` always runs on `rng::slot(seed, i, k)`, so with
//! `K = 1` every variant reduces to single-sample AIS and with `T = 1` IM and
//! IR reduce to IWAE and reverse IWAE on the same seed.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::ais::{ais_backward, ais_forward, ChainStats, Kernel, Schedule};
use crate::bounds::{ba_term, check_k, contrast, eubo_reduce, log_weight, require, reverse_reduce, BoundEstimate, Direction};
use crate::models::Capabilities;
use crate::rng;
use crate::stats::{logmeanexp, try_per_draw};
use crate::task::Task;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Variant {
    Im,
    Ir,
    Cr,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Im => "im_ais",
            Variant::Ir => "ir_ais",
            Variant::Cr => "cr_ais",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "im" | "im_ais" => Ok(Variant::Im),
            "ir" | "ir_ais" => Ok(Variant::Ir),
            "cr" | "cr_ais" => Ok(Variant::Cr),
            _ => Err(Error::Config(format!("unknown AIS variant '{s}'"))),
        }
    }
}

/// Which side(s) of the sandwich to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sides {
    Both,
    Lower,
    Upper,
}

impl Sides {
    fn lower(self) -> bool {
        self != Sides::Upper
    }
    fn upper(self) -> bool {
        self != Sides::Lower
    }
}

/// Bounds on `log Z` and the MI bounds they imply. A side that was not
/// requested is `None`.
#[derive(Debug, Clone, Serialize)]
pub struct MultiEstimate {
    pub lower_logz: Option<BoundEstimate>,
    pub upper_logz: Option<BoundEstimate>,
    /// `known - lower_logz`.
    pub upper_mi: Option<BoundEstimate>,
    /// `known - upper_logz`.
    pub lower_mi: Option<BoundEstimate>,
    pub stats: ChainStats,
}

impl MultiEstimate {
    /// `upper_mi - lower_mi`, if both sides were computed.
    pub fn mi_gap(&self) -> Option<f64> {
        Some(self.upper_mi.as_ref()?.value - self.lower_mi.as_ref()?.value)
    }
}

struct Row {
    known: f64,
    lower: f64,
    upper: f64,
    lower_mi: f64,
    stats: ChainStats,
}

/// Runs `variant` with `k` chains of schedule `sched` on `n` outer draws.
#[allow(clippy::too_many_arguments)]
pub fn run<T, K>(task: &T, variant: Variant, sched: &Schedule, kernel: &K, k: usize, n: usize, seed: u64, sides: Sides) -> Result<MultiEstimate>
where
    T: Task,
    K: Kernel<T::Base, T::Target, T::Z>,
{
    check_k(k)?;
    let many_posteriors = variant == Variant::Ir && k > 1;
    if sides.upper() || many_posteriors {
        require(task, Capabilities::EXACT_POSTERIOR_SAMPLE, variant.as_str())?;
    }
    let rows = try_per_draw(n, |i| {
        let (x, z) = task.draw(&mut rng::joint(seed, i))?;
        let base = task.base(&x);
        let target = task.target(&x);
        let known = task.known(&x, &z);
        // Lower MI realizations are written as `BA + (f(z) - w_0) + ...`, which
        // equals `known - upper` and makes the one-step cases bit-identical to
        // the static estimators.
        let ba = ba_term(task, &base, &z);
        let f = log_weight::<T>(&base, &target, &z);
        let mut lower_mi = f64::NAN;
        let mut stats = ChainStats::default();
        let slot = |j: usize| rng::slot(seed, i, j);
        let fwd = |j: usize, stats: &mut ChainStats| {
            let c = ais_forward(&base, &target, sched, kernel, &mut slot(j), false);
            stats.merge(&c.stats);
            c
        };
        let (mut lower, mut upper) = (f64::NAN, f64::NAN);
        match variant {
            Variant::Im => {
                let rest: Vec<f64> = (1..k).map(|j| fwd(j, &mut stats).log_weight).collect();
                if sides.lower() {
                    let mut w = vec![fwd(0, &mut stats).log_weight];
                    w.extend_from_slice(&rest);
                    lower = logmeanexp(&w);
                }
                if sides.upper() {
                    let c = ais_backward(&base, &target, sched, kernel, z.clone(), &mut slot(0), false);
                    stats.merge(&c.stats);
                    let mut w = vec![c.log_weight];
                    w.extend_from_slice(&rest);
                    upper = eubo_reduce(&w);
                    lower_mi = ba + ((f - w[0]) + contrast(&w));
                }
            }
            Variant::Ir => {
                let mut rest = Vec::with_capacity(k);
                for j in 1..k {
                    let mut r = slot(j);
                    let zp = task.sample_posterior(&x, &mut r)?;
                    let c = ais_backward(&base, &target, sched, kernel, zp, &mut r, false);
                    stats.merge(&c.stats);
                    rest.push(c.log_weight);
                }
                if sides.lower() {
                    let mut w = vec![fwd(0, &mut stats).log_weight];
                    w.extend_from_slice(&rest);
                    lower = reverse_reduce(&w);
                }
                if sides.upper() {
                    let c = ais_backward(&base, &target, sched, kernel, z.clone(), &mut slot(0), false);
                    stats.merge(&c.stats);
                    let mut w = vec![c.log_weight];
                    w.extend_from_slice(&rest);
                    upper = reverse_reduce(&w);
                    lower_mi = ba + (f - upper);
                }
            }
            Variant::Cr => {
                if sides.lower() {
                    let f = fwd(0, &mut stats);
                    let mut w = vec![f.log_weight];
                    for j in 1..k {
                        let c = ais_backward(&base, &target, sched, kernel, f.end.clone(), &mut slot(j), false);
                        stats.merge(&c.stats);
                        w.push(c.log_weight);
                    }
                    lower = reverse_reduce(&w);
                }
                if sides.upper() {
                    let mut w = Vec::with_capacity(k);
                    for j in 0..k {
                        let c = ais_backward(&base, &target, sched, kernel, z.clone(), &mut slot(j), false);
                        stats.merge(&c.stats);
                        w.push(c.log_weight);
                    }
                    upper = reverse_reduce(&w);
                    lower_mi = ba + (f - upper);
                }
            }
        }
        Ok(Row { known, lower, upper, lower_mi, stats })
    })?;
    let mut stats = ChainStats::default();
    rows.iter().for_each(|r| stats.merge(&r.stats));
    let known: Vec<f64> = rows.iter().map(|r| r.known).collect();
    let name = variant.as_str();
    let t = sched.len();
    let est = |dir, vals: Vec<f64>, suffix: &str| BoundEstimate::from_draws(&format!("{name}_{suffix}"), dir, vals, k, t, seed);
    let lower_logz = if sides.lower() {
        Some(est(Direction::LowerLogZ, rows.iter().map(|r| r.lower).collect(), "elbo")?)
    } else {
        None
    };
    let upper_logz = if sides.upper() {
        Some(est(Direction::UpperLogZ, rows.iter().map(|r| r.upper).collect(), "eubo")?)
    } else {
        None
    };
    Ok(MultiEstimate {
        upper_mi: lower_logz.as_ref().map(|b| b.to_mi(&known, &format!("{name}_upper"))).transpose()?,
        lower_mi: if sides.upper() {
            Some(est(Direction::LowerMi, rows.iter().map(|r| r.lower_mi).collect(), "lower")?)
        } else {
            None
        },
        lower_logz,
        upper_logz,
        stats,
    })
}

/// Single-sample AIS: one forward chain and one backward chain from the
/// joint `z`.
pub fn ais<T, K>(task: &T, sched: &Schedule, kernel: &K, n: usize, seed: u64) -> Result<MultiEstimate>
where
    T: Task,
    K: Kernel<T::Base, T::Target, T::Z>,
{
    let mut m = run(task, Variant::Im, sched, kernel, 1, n, seed, Sides::Both)?;
    for b in [&mut m.lower_logz, &mut m.upper_logz, &mut m.upper_mi, &mut m.lower_mi].into_iter().flatten() {
        b.estimator = b.estimator.replacen("im_ais", "ais", 1);
    }
    Ok(m)
}

pub fn im_ais<T, K>(task: &T, sched: &Schedule, kernel: &K, k: usize, n: usize, seed: u64) -> Result<MultiEstimate>
where
    T: Task,
    K: Kernel<T::Base, T::Target, T::Z>,
{
    run(task, Variant::Im, sched, kernel, k, n, seed, Sides::Both)
}

/// Needs `k - 1` extra exact posterior samples per draw.
pub fn ir_ais<T, K>(task: &T, sched: &Schedule, kernel: &K, k: usize, n: usize, seed: u64) -> Result<MultiEstimate>
where
    T: Task,
    K: Kernel<T::Base, T::Target, T::Z>,
{
    run(task, Variant::Ir, sched, kernel, k, n, seed, Sides::Both)
}

pub fn cr_ais<T, K>(task: &T, sched: &Schedule, kernel: &K, k: usize, n: usize, seed: u64) -> Result<MultiEstimate>
where
    T: Task,
    K: Kernel<T::Base, T::Target, T::Z>,
{
    run(task, Variant::Cr, sched, kernel, k, n, seed, Sides::Both)
}

/// IM-AIS lower bound on `log Z` paired with the CR-AIS upper bound.
pub fn bdmc<T, K>(task: &T, sched: &Schedule, kernel: &K, k: usize, n: usize, seed: u64) -> Result<MultiEstimate>
where
    T: Task,
    K: Kernel<T::Base, T::Target, T::Z>,
{
    let lo = run(task, Variant::Im, sched, kernel, k, n, seed, Sides::Lower)?;
    let hi = run(task, Variant::Cr, sched, kernel, k, n, seed, Sides::Upper)?;
    let mut stats = lo.stats;
    stats.merge(&hi.stats);
    Ok(MultiEstimate {
        lower_logz: lo.lower_logz,
        upper_mi: lo.upper_mi,
        upper_logz: hi.upper_logz,
        lower_mi: hi.lower_mi,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ais::{ExactDiscrete, Hmc, Metropolis, Perfect};
    use crate::bounds::{self, enumerate};
    use crate::models::{DiscreteJoint, JointModel, LinearGaussianVae};
    use crate::task::{MiTask, PriorProposal};
    use crate::variational::QTable;

    fn discrete() -> (DiscreteJoint, QTable) {
        let mut r = rng::stream(21, 0, 0);
        (DiscreteJoint::random(3, 4, 0.7, &mut r).unwrap(), QTable::random(3, 4, &mut r))
    }

    #[test]
    fn k1_variants_equal_single_sample_ais() {
        let (m, q) = discrete();
        let t = MiTask::new(&m, &q);
        let s = Schedule::linear(4).unwrap();
        let a = ais(&t, &s, &Metropolis, 200, 3).unwrap();
        for v in [Variant::Im, Variant::Ir, Variant::Cr] {
            let b = run(&t, v, &s, &Metropolis, 1, 200, 3, Sides::Both).unwrap();
            assert_eq!(b.upper_mi.unwrap().draws, a.upper_mi.as_ref().unwrap().draws, "{v}");
            assert_eq!(b.lower_mi.unwrap().draws, a.lower_mi.as_ref().unwrap().draws, "{v}");
        }
    }

    #[test]
    fn one_step_equals_iwae_and_riwae() {
        let (m, q) = discrete();
        let t = MiTask::new(&m, &q);
        let s = Schedule::linear(1).unwrap();
        for k in [1, 3, 8] {
            let im = im_ais(&t, &s, &Metropolis, k, 150, 8).unwrap();
            assert_eq!(im.upper_mi.unwrap().draws, bounds::iwae_upper_mi(&t, k, 150, 8).unwrap().draws);
            assert_eq!(im.lower_mi.unwrap().draws, bounds::iwae_lower_mi(&t, k, 150, 8).unwrap().0.draws);
            let ir = ir_ais(&t, &s, &Metropolis, k, 150, 8).unwrap();
            let r = bounds::riwae_bounds(&t, k, 150, 8).unwrap();
            assert_eq!(ir.upper_mi.unwrap().draws, r.upper_mi.draws);
            assert_eq!(ir.lower_mi.unwrap().draws, r.lower_mi.draws);
        }
    }

    #[test]
    fn bdmc_is_its_constituents() {
        let (m, q) = discrete();
        let t = MiTask::new(&m, &q);
        let s = Schedule::linear(3).unwrap();
        let b = bdmc(&t, &s, &Metropolis, 2, 100, 5).unwrap();
        let im = im_ais(&t, &s, &Metropolis, 2, 100, 5).unwrap();
        let cr = cr_ais(&t, &s, &Metropolis, 2, 100, 5).unwrap();
        assert_eq!(b.lower_logz.unwrap().draws, im.lower_logz.unwrap().draws);
        assert_eq!(b.upper_logz.unwrap().draws, cr.upper_logz.unwrap().draws);
    }

    #[test]
    fn monte_carlo_matches_enumeration() {
        let (m, q) = discrete();
        let t = MiTask::new(&m, &q);
        let s = Schedule::linear(2).unwrap();
        for v in [Variant::Im, Variant::Ir, Variant::Cr] {
            let (lo, hi) = enumerate::multisample_ais(&m, &q, v, &s, &Metropolis, 2).unwrap();
            let e = run(&t, v, &s, &Metropolis, 2, 20000, 11, Sides::Both).unwrap();
            let l = e.lower_mi.unwrap();
            let u = e.upper_mi.unwrap();
            assert!((l.value - lo).abs() < 4.0 * l.std_error, "{v} lower {} vs {lo}", l.value);
            assert!((u.value - hi).abs() < 4.0 * u.std_error, "{v} upper {} vs {hi}", u.value);
        }
    }

    #[test]
    fn exact_kernel_long_chain_closes_gap() {
        let (m, q) = discrete();
        let t = MiTask::new(&m, &q);
        let s = Schedule::linear(50).unwrap();
        let e = im_ais(&t, &s, &ExactDiscrete, 2, 2000, 2).unwrap();
        let truth = enumerate::mi(&m);
        assert!(e.mi_gap().unwrap() < 0.05);
        assert!((e.lower_mi.unwrap().value - truth).abs() < 0.05);
    }

    #[test]
    fn linear_vae_sandwich_with_hmc() {
        let m = LinearGaussianVae::random(2, 5, 7, 0.5).unwrap();
        let mi = m.analytic_mi().unwrap();
        let t = MiTask::new(&m, &PriorProposal);
        let gap = |tt: usize| {
            let e = bdmc(&t, &Schedule::linear(tt).unwrap(), &Hmc::fixed(5, 0.1), 2, 100, 4).unwrap();
            let lo = e.lower_mi.unwrap();
            let hi = e.upper_mi.unwrap();
            assert!(lo.value <= mi + 3.0 * lo.std_error && hi.value >= mi - 3.0 * hi.std_error);
            hi.value - lo.value
        };
        let (g100, g1000) = (gap(100), gap(1000));
        assert!(g1000 < g100 && g1000 < 0.3, "{g100} {g1000}");
    }

    #[test]
    fn perfect_kernel_cr_upper_nonincreasing_in_k() {
        let m = LinearGaussianVae::random(2, 4, 1, 0.7).unwrap();
        let t = MiTask::new(&m, &PriorProposal);
        let s = Schedule::linear(3).unwrap();
        let vals: Vec<BoundEstimate> =
            [1, 2, 4, 8].iter().map(|&k| cr_ais(&t, &s, &Perfect, k, 2000, 6).unwrap().upper_logz.unwrap()).collect();
        for w in vals.windows(2) {
            let se = (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt();
            assert!(w[1].value <= w[0].value + 3.0 * se);
        }
    }

    #[test]
    fn reverse_variant_needs_posterior_samples() {
        assert_eq!("cr-ais".parse::<Variant>().unwrap(), Variant::Cr);
        assert!("xx".parse::<Variant>().is_err());
    }
}
