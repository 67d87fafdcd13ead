//! Geometric annealing paths and single-chain AIS.
//!
//! Convention: at step `t` the increment `(β_t - β_{t-1})·(log π_T - log π_0)`
//! is accumulated at `z_{t-1}`, then `z_{t-1}` moves under a kernel that
//! leaves `π_t` invariant. The move at `β_T = 1` never affects a weight and is
//! skipped, so a chain of length `T` visits `z_0..z_{T-1}` and makes `T-1`
//! moves. The backward chain starts from a target sample playing the role of
//! `z_{T-1}` and runs the same kernels in reverse order.

use serde::{Deserialize, Serialize};

use crate::density::{LogDensity, Sample};
use crate::rng::Stream;
use crate::{error::param, Result};

mod discrete;
mod hmc;
mod perfect;

pub use discrete::{DiscreteKernel, ExactDiscrete, Metropolis};
pub use hmc::{adapt_step_size, Adaptation, Hmc, StepSizes};
pub use perfect::{perfect_transition_gap, symmetrized_kl, GapMeasurement, Perfect};

/// `(1-β)·a + β·b`, exact at the endpoints even when one side is `-inf`.
#[inline]
pub fn geo(a: f64, b: f64, beta: f64) -> f64 {
    if beta == 0.0 {
        a
    } else if beta == 1.0 {
        b
    } else {
        (1.0 - beta) * a + beta * b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Sigmoid,
}

impl std::str::FromStr for ScheduleKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "sigmoid" => Ok(ScheduleKind::Sigmoid),
            _ => Err(param(format!("unknown schedule '{s}' (linear|sigmoid)"))),
        }
    }
}

/// `β_0 = 0 < β_1 < .. < β_T = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    kind: ScheduleKind,
}

pub const SIGMOID_DELTA: f64 = 4.0;

impl Schedule {
    pub fn linear(t: usize) -> Result<Self> {
        if t == 0 {
            return Err(param("T must be at least 1"));
        }
        let mut betas: Vec<f64> = (0..=t).map(|i| i as f64 / t as f64).collect();
        betas[t] = 1.0;
        Ok(Schedule { betas, kind: ScheduleKind::Linear })
    }

    /// `σ(δ(2t/T - 1))` rescaled to hit 0 and 1 exactly.
    pub fn sigmoid(t: usize, delta: f64) -> Result<Self> {
        if t == 0 {
            return Err(param("T must be at least 1"));
        }
        if !(delta > 0.0) {
            return Err(param("sigmoid delta must be positive"));
        }
        let s = |u: f64| 1.0 / (1.0 + (-u).exp());
        let (lo, hi) = (s(-delta), s(delta));
        let mut betas: Vec<f64> = (0..=t)
            .map(|i| (s(delta * (2.0 * i as f64 / t as f64 - 1.0)) - lo) / (hi - lo))
            .collect();
        betas[0] = 0.0;
        betas[t] = 1.0;
        Ok(Schedule { betas, kind: ScheduleKind::Sigmoid })
    }

    pub fn new(kind: ScheduleKind, t: usize) -> Result<Self> {
        match kind {
            ScheduleKind::Linear => Schedule::linear(t),
            ScheduleKind::Sigmoid => Schedule::sigmoid(t, SIGMOID_DELTA),
        }
    }

    /// Number of intermediate distributions `T`.
    pub fn len(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub proposals: u64,
    pub accepts: u64,
    pub divergences: u64,
    /// Sum of Metropolis acceptance probabilities.
    pub accept_prob: f64,
}

impl ChainStats {
    pub fn merge(&mut self, o: &ChainStats) {
        self.proposals += o.proposals;
        self.accepts += o.accepts;
        self.divergences += o.divergences;
        self.accept_prob += o.accept_prob;
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            f64::NAN
        } else {
            self.accept_prob / self.proposals as f64
        }
    }
}

/// A transition leaving `π_β ∝ base^(1-β)·target^β` invariant. Kernels are
/// reversible, so the same step serves forward and backward chains.
pub trait Kernel<B, T, Z>: Sync {
    fn step(&self, base: &B, target: &T, beta: f64, z: &mut Z, rng: &mut Stream, stats: &mut ChainStats);
}

#[derive(Debug, Clone)]
pub struct ChainRecord<Z> {
    pub log_weight: f64,
    /// `increments[t-1]` is the contribution of step `t`.
    pub increments: Vec<f64>,
    /// `z_0..z_{T-1}` in forward index order, only when recording.
    pub states: Vec<Z>,
    /// Last state visited: `z_{T-1}` forward, `z_0` backward.
    pub end: Z,
    pub stats: ChainStats,
}

fn log_ratio<Z, B: LogDensity<Z>, T: LogDensity<Z>>(base: &B, target: &T, z: &Z) -> f64 {
    target.log_density(z) - base.log_density(z)
}

/// Forward chain from `z_0 ~ base`. `E[log_weight] ≤ log Z_target`.
pub fn ais_forward<Z, B, T, K>(base: &B, target: &T, sched: &Schedule, kernel: &K, rng: &mut Stream, record: bool) -> ChainRecord<Z>
where
    Z: Clone,
    B: LogDensity<Z> + Sample<Z>,
    T: LogDensity<Z>,
    K: Kernel<B, T, Z>,
{
    let z0 = base.sample(rng);
    ais_forward_from(base, target, sched, kernel, z0, rng, record)
}

/// Forward chain from a given `z_0` (assumed to be a base draw).
pub fn ais_forward_from<Z, B, T, K>(
    base: &B,
    target: &T,
    sched: &Schedule,
    kernel: &K,
    z0: Z,
    rng: &mut Stream,
    record: bool,
) -> ChainRecord<Z>
where
    Z: Clone,
    B: LogDensity<Z>,
    T: LogDensity<Z>,
    K: Kernel<B, T, Z>,
{
    let tt = sched.len();
    let mut z = z0;
    let mut stats = ChainStats::default();
    let mut w = 0.0;
    let mut increments = Vec::with_capacity(tt);
    let mut states = Vec::new();
    for t in 1..=tt {
        if record {
            states.push(z.clone());
        }
        let inc = (sched.beta(t) - sched.beta(t - 1)) * log_ratio(base, target, &z);
        w += inc;
        increments.push(inc);
        if t < tt {
            kernel.step(base, target, sched.beta(t), &mut z, rng, &mut stats);
        }
    }
    ChainRecord { log_weight: w, increments, states, end: z, stats }
}

/// Backward chain from `z_start`, a draw from the normalized target.
/// `E[log_weight] ≥ log Z_target`.
pub fn ais_backward<Z, B, T, K>(
    base: &B,
    target: &T,
    sched: &Schedule,
    kernel: &K,
    z_start: Z,
    rng: &mut Stream,
    record: bool,
) -> ChainRecord<Z>
where
    Z: Clone,
    B: LogDensity<Z>,
    T: LogDensity<Z>,
    K: Kernel<B, T, Z>,
{
    let tt = sched.len();
    let mut z = z_start;
    let mut stats = ChainStats::default();
    let mut w = 0.0;
    let mut increments = vec![0.0; tt];
    let mut states = Vec::new();
    for t in (1..=tt).rev() {
        if record {
            states.push(z.clone());
        }
        let inc = (sched.beta(t) - sched.beta(t - 1)) * log_ratio(base, target, &z);
        w += inc;
        increments[t - 1] = inc;
        if t > 1 {
            kernel.step(base, target, sched.beta(t - 1), &mut z, rng, &mut stats);
        }
    }
    states.reverse();
    ChainRecord { log_weight: w, increments, states, end: z, stats }
}

/// `Σ_t [log π̃_t(z_{t-1}) - log π̃_{t-1}(z_{t-1})]` over recorded states; the
/// telescoped form of the AIS weight.
pub fn telescoped_weight<Z, B: LogDensity<Z>, T: LogDensity<Z>>(base: &B, target: &T, sched: &Schedule, states: &[Z]) -> f64 {
    let mut w = 0.0;
    for t in 1..=sched.len() {
        let z = &states[t - 1];
        let (a, b) = (base.log_density(z), target.log_density(z));
        w += geo(a, b, sched.beta(t)) - geo(a, b, sched.beta(t - 1));
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{DiagGaussian, Gaussian, GaussianForm};
    use crate::rng;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn bridge() -> (DiagGaussian, Gaussian) {
        let base = DiagGaussian { mean: vec![0.0, 0.5], log_std: vec![0.0, -0.3] };
        let target = Gaussian::from_precision(vec![1.0, -1.0], &DMatrix::from_row_slice(2, 2, &[3.0, 0.5, 0.5, 2.0]), 0.7).unwrap();
        (base, target)
    }

    #[test]
    fn schedules_are_valid() {
        for t in [1, 2, 7, 100] {
            for s in [Schedule::linear(t).unwrap(), Schedule::sigmoid(t, 4.0).unwrap()] {
                assert_eq!(s.len(), t);
                assert_eq!(s.beta(0), 0.0);
                assert_eq!(s.beta(t), 1.0);
                assert!(s.betas().windows(2).all(|w| w[1] > w[0]));
            }
        }
        assert!(Schedule::linear(0).is_err());
    }

    #[test]
    fn identical_endpoints_give_zero_weight() {
        let base = DiagGaussian { mean: vec![0.2], log_std: vec![0.1] };
        let target = base.clone();
        let hmc = Hmc::fixed(10, 0.3);
        let s = Schedule::linear(20).unwrap();
        let mut r = rng::stream(1, 0, 0);
        let f = ais_forward(&base, &target, &s, &hmc, &mut r, false);
        assert_eq!(f.log_weight, 0.0);
        assert_eq!(f.stats.accepts, f.stats.proposals);
        let b = ais_backward(&base, &target, &s, &hmc, vec![0.4], &mut r, false);
        assert_eq!(b.log_weight, 0.0);
    }

    #[test]
    fn single_step_backward_is_eubo_sample() {
        let (base, target) = bridge();
        let s = Schedule::linear(1).unwrap();
        let z = vec![0.3, -0.2];
        let b = ais_backward(&base, &target, &s, &Perfect, z.clone(), &mut rng::stream(0, 0, 0), false);
        assert_eq!(b.log_weight, target.log_density(&z) - base.log_density(&z));
    }

    #[test]
    fn log_weight_two_ways() {
        let (base, target) = bridge();
        let hmc = Hmc::fixed(5, 0.2);
        for kind in [ScheduleKind::Linear, ScheduleKind::Sigmoid] {
            let s = Schedule::new(kind, 50).unwrap();
            let mut r = rng::stream(2, 0, 0);
            let f = ais_forward(&base, &target, &s, &hmc, &mut r, true);
            let direct = telescoped_weight(&base, &target, &s, &f.states);
            assert!((f.log_weight - direct).abs() < 1e-10);
            let sum: f64 = f.increments.iter().sum();
            assert!((f.log_weight - sum).abs() < 1e-10);
            let b = ais_backward(&base, &target, &s, &hmc, vec![1.0, -1.0], &mut r, true);
            let direct = telescoped_weight(&base, &target, &s, &b.states);
            assert!((b.log_weight - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn full_ratio_with_exact_kernel() {
        // With exact transitions the extended-space ratio can be written out
        // with normalized densities: π̃_T(z_{T-1}) Π π_t(z_{t-1}) /
        // (π_0(z_0) Π π_t(z_t)), which must equal the accumulated weight.
        let (base, target) = bridge();
        let s = Schedule::linear(6).unwrap();
        let mut r = rng::stream(5, 0, 0);
        let f = ais_forward(&base, &target, &s, &Perfect, &mut r, true);
        let norm = |beta: f64| {
            let nat = crate::density::Natural::mix(&base.natural(), &target.natural(), beta);
            Gaussian::from_natural(&nat, 0.0).unwrap()
        };
        let tt = s.len();
        let mut lr = target.log_density(&f.states[tt - 1]) - base.log_density(&f.states[0]);
        for t in 1..tt {
            let p = norm(s.beta(t));
            lr += p.log_density(&f.states[t - 1]) - p.log_density(&f.states[t]);
        }
        assert!((lr - f.log_weight).abs() < 1e-10, "{lr} vs {}", f.log_weight);
    }

    proptest! {
        #[test]
        fn increments_sum_to_weight(seed in 0u64..500, t in 1usize..40) {
            let (base, target) = bridge();
            let s = Schedule::sigmoid(t, 4.0).unwrap();
            let f = ais_forward(&base, &target, &s, &Hmc::fixed(3, 0.25), &mut rng::stream(seed, 0, 0), true);
            prop_assert_eq!(f.increments.len(), t);
            prop_assert_eq!(f.states.len(), t);
            let direct = telescoped_weight(&base, &target, &s, &f.states);
            prop_assert!((direct - f.log_weight).abs() < 1e-9);
        }
    }
}
