//! Bounds that need no MCMC: BA, IWAE, reverse IWAE, GIWAE and InfoNCE.
//!
//! Every multi-sample estimator puts the joint `z` (a posterior draw) in slot
//! 0 and draws slot `k` from its own stream, so estimators with the same seed
//! share samples and their `K = 1` cases coincide bit for bit.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::density::{LogDensity, Sample};
use crate::models::Capabilities;
use crate::rng;
use crate::stats::{logmeanexp, try_per_draw, Summary};
use crate::task::Task;
use crate::variational::{Critic, CriticAt};
use crate::{Error, Result};

pub mod enumerate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    #[serde(rename = "LOWER_MI")]
    LowerMi,
    #[serde(rename = "UPPER_MI")]
    UpperMi,
    #[serde(rename = "LOWER_LOGZ")]
    LowerLogZ,
    #[serde(rename = "UPPER_LOGZ")]
    UpperLogZ,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::LowerMi => "LOWER_MI",
            Direction::UpperMi => "UPPER_MI",
            Direction::LowerLogZ => "LOWER_LOGZ",
            Direction::UpperLogZ => "UPPER_LOGZ",
        })
    }
}

/// A bound averaged over `n_outer` draws, in nats.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundEstimate {
    pub estimator: String,
    pub value: f64,
    pub std_error: f64,
    pub direction: Direction,
    /// Only the expectation, not each realization, is a bound.
    pub stochastic: bool,
    /// Not a guaranteed bound even in expectation.
    pub approximate: bool,
    pub n_outer: usize,
    pub k: usize,
    pub t: usize,
    pub seed: u64,
    /// Per-draw realizations in draw order.
    #[serde(skip)]
    pub draws: Vec<f64>,
}

impl BoundEstimate {
    pub fn from_draws(estimator: &str, direction: Direction, draws: Vec<f64>, k: usize, t: usize, seed: u64) -> Result<Self> {
        let s = Summary::of(&draws);
        if !s.mean.is_finite() {
            return Err(Error::Degenerate(format!("{estimator}: non-finite estimate")));
        }
        Ok(BoundEstimate {
            estimator: estimator.to_string(),
            value: s.mean,
            std_error: s.std_error,
            direction,
            stochastic: true,
            approximate: false,
            n_outer: draws.len(),
            k,
            t,
            seed,
            draws,
        })
    }

    pub fn ci95(&self) -> (f64, f64) {
        (self.value - 1.96 * self.std_error, self.value + 1.96 * self.std_error)
    }

    pub fn renamed(mut self, name: &str) -> Self {
        self.estimator = name.to_string();
        self
    }

    /// `known - self`, turning a log-partition bound into the opposite MI bound.
    pub(crate) fn to_mi(&self, known: &[f64], name: &str) -> Result<Self> {
        let direction = match self.direction {
            Direction::LowerLogZ => Direction::UpperMi,
            Direction::UpperLogZ => Direction::LowerMi,
            d => return Err(Error::Parameter(format!("{d} is already an MI bound"))),
        };
        let draws = known.iter().zip(&self.draws).map(|(k, w)| k - w).collect();
        let mut b = BoundEstimate::from_draws(name, direction, draws, self.k, self.t, self.seed)?;
        b.approximate = self.approximate;
        Ok(b)
    }
}

/// A GIWAE-style value split into the BA term and the contrastive term,
/// computed on the same draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecomposedBound {
    pub ba_term: f64,
    pub ba_std_error: f64,
    pub contrastive_term: f64,
    pub contrastive_std_error: f64,
    /// `ba_term + contrastive_term`.
    pub total: f64,
    pub total_std_error: f64,
}

impl DecomposedBound {
    fn of(ba: &[f64], contrastive: &[f64]) -> Self {
        let a = Summary::of(ba);
        let c = Summary::of(contrastive);
        let t: Vec<f64> = ba.iter().zip(contrastive).map(|(a, c)| a + c).collect();
        DecomposedBound {
            ba_term: a.mean,
            ba_std_error: a.std_error,
            contrastive_term: c.mean,
            contrastive_std_error: c.std_error,
            total: a.mean + c.mean,
            total_std_error: Summary::of(&t).std_error,
        }
    }
}

/// `v[0] - log mean exp(v)`, computed from differences to `v[0]` so that
/// equal entries give exactly zero.
pub fn contrast(v: &[f64]) -> f64 {
    if v.len() == 1 {
        return -0.0;
    }
    let d: Vec<f64> = v.iter().map(|a| a - v[0]).collect();
    -logmeanexp(&d)
}

/// Upper bound on `log Z` from weights whose slot 0 came from the target.
pub fn eubo_reduce(w: &[f64]) -> f64 {
    w[0] - contrast(w)
}

/// `-log mean exp(-w)`, the reduction for reverse-weight estimators.
pub fn reverse_reduce(w: &[f64]) -> f64 {
    let neg: Vec<f64> = w.iter().map(|a| -a).collect();
    -logmeanexp(&neg)
}

pub(crate) fn require<T: Task>(task: &T, cap: Capabilities, what: &str) -> Result<()> {
    if task.capabilities().contains(cap) {
        Ok(())
    } else {
        Err(Error::Unsupported(format!("{what} needs {cap:?}")))
    }
}

pub(crate) fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Parameter("K must be at least 1".into()));
    }
    Ok(())
}

/// `log q(z|x) - log p(z)`, the BA realization. Computed directly rather
/// than as `known - (log target - log base)` so that `q = p(z)` gives exactly
/// zero.
pub(crate) fn ba_term<T: Task>(task: &T, base: &T::Base, z: &T::Z) -> f64 {
    base.log_density(z) - task.log_prior(z)
}

/// `log target - log base` at `z`.
pub(crate) fn log_weight<T: Task>(base: &T::Base, target: &T::Target, z: &T::Z) -> f64 {
    target.log_density(z) - base.log_density(z)
}

struct Draw<T: Task> {
    x: T::X,
    z: T::Z,
    base: T::Base,
    target: T::Target,
    known: f64,
}

fn outer<T: Task>(task: &T, seed: u64, i: u64) -> Result<Draw<T>> {
    let (x, z) = task.draw(&mut rng::joint(seed, i))?;
    let base = task.base(&x);
    let target = task.target(&x);
    let known = task.known(&x, &z);
    Ok(Draw { x, z, base, target, known })
}

/// Weights for slot 0 = joint `z` and slots `1..k` from the base.
fn positive_weights<T: Task>(d: &Draw<T>, k: usize, seed: u64, i: u64) -> (Vec<T::Z>, Vec<f64>) {
    let mut zs = Vec::with_capacity(k);
    zs.push(d.z.clone());
    for j in 1..k {
        zs.push(d.base.sample(&mut rng::slot(seed, i, j)));
    }
    let w = zs.iter().map(|z| log_weight::<T>(&d.base, &d.target, z)).collect();
    (zs, w)
}

/// BA lower bound on MI: `E[log q(z|x) - log p(z)]` for MI tasks.
pub fn ba_lower<T: Task>(task: &T, n: usize, seed: u64) -> Result<BoundEstimate> {
    require(task, Capabilities::LOGP_PRIOR, "ba_lower")?;
    let draws = try_per_draw(n, |i| {
        let d = outer(task, seed, i)?;
        Ok(ba_term(task, &d.base, &d.z))
    })?;
    BoundEstimate::from_draws("ba_lower", Direction::LowerMi, draws, 1, 0, seed)
}

/// BA upper bound on MI: `E[log p(x|z)] - E[ELBO(x)]`.
pub fn ba_upper<T: Task>(task: &T, n: usize, seed: u64) -> Result<BoundEstimate> {
    require(task, Capabilities::LOGP_LIKELIHOOD, "ba_upper")?;
    let draws = try_per_draw(n, |i| {
        let d = outer(task, seed, i)?;
        let z = d.base.sample(&mut rng::slot(seed, i, 0));
        Ok(d.known - log_weight::<T>(&d.base, &d.target, &z))
    })?;
    BoundEstimate::from_draws("ba_upper", Direction::UpperMi, draws, 1, 0, seed)
}

/// IWAE ELBO on `log Z` with `k` base samples, as an upper bound on MI.
pub fn iwae_upper_mi<T: Task>(task: &T, k: usize, n: usize, seed: u64) -> Result<BoundEstimate> {
    check_k(k)?;
    require(task, Capabilities::LOGP_LIKELIHOOD, "iwae_upper")?;
    let draws = try_per_draw(n, |i| {
        let d = outer(task, seed, i)?;
        let w: Vec<f64> = (0..k)
            .map(|j| log_weight::<T>(&d.base, &d.target, &d.base.sample(&mut rng::slot(seed, i, j))))
            .collect();
        Ok(d.known - logmeanexp(&w))
    })?;
    BoundEstimate::from_draws("iwae_upper", Direction::UpperMi, draws, k, 0, seed)
}

/// IWAE EUBO with the joint `z` plus `k - 1` base samples, as a lower bound on
/// MI, with its BA / contrastive split.
pub fn iwae_lower_mi<T: Task>(task: &T, k: usize, n: usize, seed: u64) -> Result<(BoundEstimate, DecomposedBound)> {
    check_k(k)?;
    require(task, Capabilities::LOGP_LIKELIHOOD, "iwae_lower")?;
    let parts = try_per_draw(n, |i| {
        let d = outer(task, seed, i)?;
        let (_, w) = positive_weights(&d, k, seed, i);
        let ba = ba_term(task, &d.base, &d.z);
        let c = contrast(&w);
        Ok((ba + c, ba, c))
    })?;
    split("iwae_lower", parts, k, seed)
}

fn split(name: &str, parts: Vec<(f64, f64, f64)>, k: usize, seed: u64) -> Result<(BoundEstimate, DecomposedBound)> {
    let ba: Vec<f64> = parts.iter().map(|p| p.1).collect();
    let c: Vec<f64> = parts.iter().map(|p| p.2).collect();
    let dec = DecomposedBound::of(&ba, &c);
    let b = BoundEstimate::from_draws(name, Direction::LowerMi, parts.into_iter().map(|p| p.0).collect(), k, 0, seed)?;
    Ok((b, dec))
}

/// Generalized IWAE: SNIS over critic values instead of importance weights.
/// Realization is `BA + T(x, z_0) - log mean_k exp T(x, z_k)`.
pub fn giwae_lower<T, C>(task: &T, critic: &C, k: usize, n: usize, seed: u64) -> Result<(BoundEstimate, DecomposedBound)>
where
    T: Task,
    C: Critic<T::X, T::Z>,
{
    check_k(k)?;
    require(task, Capabilities::LOGP_PRIOR, "giwae")?;
    let parts = try_per_draw(n, |i| {
        let d = outer(task, seed, i)?;
        let (zs, _) = positive_weights(&d, k, seed, i);
        let at = critic.at(&d.x);
        let tv: Vec<f64> = zs.iter().map(|z| at.value(z)).collect();
        let ba = ba_term(task, &d.base, &d.z);
        let c = contrast(&tv);
        Ok((ba + c, ba, c))
    })?;
    split("giwae", parts, k, seed)
}

/// Lower and upper MI bounds from reverse importance weights with `k - 1`
/// extra exact posterior samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiPair {
    pub lower_mi: BoundEstimate,
    pub upper_mi: BoundEstimate,
}

/// Reverse IWAE: slot 0 from the base (lower `log Z`) or the joint `z` (upper
/// `log Z`), slots `1..k` from the exact posterior.
pub fn riwae_bounds<T: Task>(task: &T, k: usize, n: usize, seed: u64) -> Result<MiPair> {
    check_k(k)?;
    if k > 1 {
        require(task, Capabilities::EXACT_POSTERIOR_SAMPLE, "riwae")?;
    }
    let rows = try_per_draw(n, |i| {
        let d = outer(task, seed, i)?;
        let mut extra = Vec::with_capacity(k);
        for j in 1..k {
            let z = task.sample_posterior(&d.x, &mut rng::slot(seed, i, j))?;
            extra.push(log_weight::<T>(&d.base, &d.target, &z));
        }
        let z0 = d.base.sample(&mut rng::slot(seed, i, 0));
        let mut lo = vec![log_weight::<T>(&d.base, &d.target, &z0)];
        lo.extend_from_slice(&extra);
        let f = log_weight::<T>(&d.base, &d.target, &d.z);
        let mut hi = vec![f];
        hi.extend_from_slice(&extra);
        Ok((d.known - reverse_reduce(&lo), ba_term(task, &d.base, &d.z) + (f - reverse_reduce(&hi))))
    })?;
    let (up, low): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
    Ok(MiPair {
        lower_mi: BoundEstimate::from_draws("riwae_lower", Direction::LowerMi, low, k, 0, seed)?,
        upper_mi: BoundEstimate::from_draws("riwae_upper", Direction::UpperMi, up, k, 0, seed)?,
    })
}

/// String ids accepted by the CLI and config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorId {
    BaLower,
    BaUpper,
    IwaeLower,
    IwaeUpper,
    Giwae,
    Infonce,
    SInfonce,
    Riwae,
    Ais,
    ImAis,
    IrAis,
    CrAis,
    Bdmc,
    MineDv,
    MineF,
}

impl EstimatorId {
    pub const ALL: [EstimatorId; 15] = [
        EstimatorId::BaLower,
        EstimatorId::BaUpper,
        EstimatorId::IwaeLower,
        EstimatorId::IwaeUpper,
        EstimatorId::Giwae,
        EstimatorId::Infonce,
        EstimatorId::SInfonce,
        EstimatorId::Riwae,
        EstimatorId::Ais,
        EstimatorId::ImAis,
        EstimatorId::IrAis,
        EstimatorId::CrAis,
        EstimatorId::Bdmc,
        EstimatorId::MineDv,
        EstimatorId::MineF,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorId::BaLower => "ba_lower",
            EstimatorId::BaUpper => "ba_upper",
            EstimatorId::IwaeLower => "iwae_lower",
            EstimatorId::IwaeUpper => "iwae_upper",
            EstimatorId::Giwae => "giwae",
            EstimatorId::Infonce => "infonce",
            EstimatorId::SInfonce => "s_infonce",
            EstimatorId::Riwae => "riwae",
            EstimatorId::Ais => "ais",
            EstimatorId::ImAis => "im_ais",
            EstimatorId::IrAis => "ir_ais",
            EstimatorId::CrAis => "cr_ais",
            EstimatorId::Bdmc => "bdmc",
            EstimatorId::MineDv => "mine_dv",
            EstimatorId::MineF => "mine_f",
        }
    }

    /// Uses annealing (`T` applies).
    pub fn annealed(&self) -> bool {
        matches!(self, EstimatorId::Ais | EstimatorId::ImAis | EstimatorId::IrAis | EstimatorId::CrAis | EstimatorId::Bdmc)
    }

    /// Needs a critic.
    pub fn needs_critic(&self) -> bool {
        matches!(self, EstimatorId::Giwae | EstimatorId::Infonce | EstimatorId::MineDv | EstimatorId::MineF)
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        if key == "giwae_upper" {
            return Err(Error::Unsupported(
                "giwae_upper: a GIWAE upper bound on MI gives no benefit over the IWAE upper bound; use iwae_upper".into(),
            ));
        }
        EstimatorId::ALL
            .iter()
            .find(|e| e.as_str() == key)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown estimator '{s}'")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DiscreteJoint, JointModel, LinearGaussianVae};
    use crate::task::{MiTask, PosteriorProposal, PriorProposal};
    use crate::variational::{ConstantCritic, QTable};
    use proptest::prelude::*;

    fn discrete() -> (DiscreteJoint, QTable) {
        let mut r = rng::stream(5, 0, 0);
        let m = DiscreteJoint::random(4, 5, 0.7, &mut r).unwrap();
        let q = QTable::random(4, 5, &mut r);
        (m, q)
    }

    #[test]
    fn k1_reductions_are_exact() {
        let (m, q) = discrete();
        let t = MiTask::new(&m, &q);
        let ba = ba_lower(&t, 300, 9).unwrap();
        let (iw, dec) = iwae_lower_mi(&t, 1, 300, 9).unwrap();
        assert_eq!(ba.draws, iw.draws);
        assert_eq!(dec.contrastive_term, 0.0);
        let (gi, _) = giwae_lower(&t, &ConstantCritic(0.3), 1, 300, 9).unwrap();
        assert_eq!(gi.draws, ba.draws);
        assert_eq!(iwae_upper_mi(&t, 1, 300, 9).unwrap().draws, ba_upper(&t, 300, 9).unwrap().draws);
        let r = riwae_bounds(&t, 1, 300, 9).unwrap();
        assert_eq!(r.lower_mi.draws, ba.draws);
        assert_eq!(r.upper_mi.draws, ba_upper(&t, 300, 9).unwrap().draws);
    }

    #[test]
    fn constant_critic_gives_ba_for_any_k() {
        let (m, q) = discrete();
        let t = MiTask::new(&m, &q);
        let ba = ba_lower(&t, 200, 2).unwrap();
        for k in [2, 7, 50] {
            let (g, dec) = giwae_lower(&t, &ConstantCritic(-1.7), k, 200, 2).unwrap();
            assert_eq!(g.draws, ba.draws);
            assert_eq!(dec.contrastive_term, 0.0);
        }
    }

    #[test]
    fn posterior_proposal_closes_ba_gap() {
        let m = LinearGaussianVae::random(2, 3, 1, 0.5).unwrap();
        let mi = m.analytic_mi().unwrap();
        let t = MiTask::new(&m, &PosteriorProposal);
        let lo = ba_lower(&t, 2000, 1).unwrap();
        let hi = ba_upper(&t, 2000, 1).unwrap();
        // With q = p(z|x) every realization of ba_lower is log p(x|z) - log p(x)
        // + log p(z) - log p(z) exactly, and ba_upper matches in expectation.
        assert!((lo.value - mi).abs() < 4.0 * lo.std_error);
        assert!((hi.value - mi).abs() < 4.0 * hi.std_error);
    }

    #[test]
    fn structured_infonce_saturates_at_log_k() {
        let m = LinearGaussianVae::random(4, 30, 3, 0.1).unwrap();
        assert!(m.analytic_mi().unwrap() > 15.0);
        let t = MiTask::new(&m, &PriorProposal);
        let (b, dec) = iwae_lower_mi(&t, 100, 200, 4).unwrap();
        assert_eq!(dec.ba_term, 0.0);
        assert!((b.value - 100f64.ln()).abs() < 0.05, "{}", b.value);
    }

    #[test]
    fn giwae_upper_is_rejected() {
        let e = "giwae_upper".parse::<EstimatorId>().unwrap_err();
        assert!(matches!(e, Error::Unsupported(_)));
        for id in EstimatorId::ALL {
            assert_eq!(id.as_str().parse::<EstimatorId>().unwrap(), id);
        }
        assert!("im-ais".parse::<EstimatorId>().is_ok());
    }

    #[test]
    fn k_zero_is_a_parameter_error() {
        let (m, q) = discrete();
        let t = MiTask::new(&m, &q);
        assert!(matches!(iwae_upper_mi(&t, 0, 10, 1), Err(Error::Parameter(_))));
    }

    proptest! {
        #[test]
        fn contrast_is_log_softmax_plus_log_k(v in prop::collection::vec(-30.0f64..30.0, 1..20)) {
            let k = v.len() as f64;
            let l = crate::stats::logsumexp(&v);
            prop_assert!((contrast(&v) - (v[0] - l + k.ln())).abs() < 1e-9);
            prop_assert!(contrast(&v) <= k.ln() + 1e-12);
            prop_assert!((eubo_reduce(&v) - logmeanexp(&v)).abs() < 1e-9);
            prop_assert!(reverse_reduce(&v) <= logmeanexp(&v) + 1e-12);
        }

        #[test]
        fn permuting_slots_preserves_reductions(v in prop::collection::vec(-10.0f64..10.0, 2..10), s in 0usize..100) {
            let mut p = v.clone();
            let r = s % p.len();
            p.rotate_left(r);
            prop_assert!((logmeanexp(&p) - logmeanexp(&v)).abs() < 1e-12);
            prop_assert!((reverse_reduce(&p) - reverse_reduce(&v)).abs() < 1e-12);
        }
    }
}
