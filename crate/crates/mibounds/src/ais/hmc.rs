use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{geo, ChainStats, Kernel};
use crate::density::{GradLogDensity, Sample};
use crate::rng::Stream;

/// Energy differences beyond this count as divergent trajectories.
const DIVERGENCE: f64 = 1000.0;
/// Each trajectory scales its step size by a uniform factor in `1 ± JITTER`,
/// which breaks resonances between trajectory length and target scales.
pub const JITTER: f64 = 0.1;

/// Step size as a function of β: fixed, or piecewise-linear in
/// `u = ln(β + β_min)` over an adapted grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StepSizes {
    Fixed(f64),
    Grid { betas: Vec<f64>, log_eps: Vec<f64> },
}

const BETA_MIN: f64 = 1e-4;

impl StepSizes {
    pub fn at(&self, beta: f64) -> f64 {
        match self {
            StepSizes::Fixed(e) => *e,
            StepSizes::Grid { betas, log_eps } => {
                let u = |b: f64| (b + BETA_MIN).ln();
                let x = u(beta);
                if beta <= betas[0] {
                    return log_eps[0].exp();
                }
                for i in 1..betas.len() {
                    if beta <= betas[i] {
                        let (x0, x1) = (u(betas[i - 1]), u(betas[i]));
                        let a = (x - x0) / (x1 - x0);
                        return ((1.0 - a) * log_eps[i - 1] + a * log_eps[i]).exp();
                    }
                }
                log_eps[log_eps.len() - 1].exp()
            }
        }
    }
}

/// Hamiltonian Monte Carlo with identity mass and `leapfrog` steps per move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hmc {
    pub leapfrog: usize,
    pub step: StepSizes,
}

impl Hmc {
    pub fn fixed(leapfrog: usize, eps: f64) -> Self {
        Hmc { leapfrog, step: StepSizes::Fixed(eps) }
    }

    /// One Metropolis-corrected trajectory at nominal step size `eps`.
    /// Returns the acceptance probability (0 for divergent trajectories).
    pub fn transition<B: GradLogDensity, T: GradLogDensity>(
        &self,
        base: &B,
        target: &T,
        beta: f64,
        eps: f64,
        z: &mut Vec<f64>,
        rng: &mut Stream,
        stats: &mut ChainStats,
    ) -> f64 {
        let d = z.len();
        let mut gb = vec![0.0; d];
        let mut gt = vec![0.0; d];
        let mut grad_u = vec![0.0; d];
        // U = -log π̃_β, returns U and fills grad_u.
        let mut energy = |z: &[f64], grad_u: &mut [f64]| -> f64 {
            let lb = if beta < 1.0 { base.log_density_grad(z, &mut gb) } else { 0.0 };
            let lt = if beta > 0.0 { target.log_density_grad(z, &mut gt) } else { 0.0 };
            for i in 0..d {
                let a = if beta < 1.0 { gb[i] } else { 0.0 };
                let b = if beta > 0.0 { gt[i] } else { 0.0 };
                grad_u[i] = -geo(a, b, beta);
            }
            -geo(lb, lt, beta)
        };
        let eps = eps * (1.0 + JITTER * (2.0 * rng.random::<f64>() - 1.0));
        let p0: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let u0 = energy(z, &mut grad_u);
        let k0: f64 = 0.5 * p0.iter().map(|a| a * a).sum::<f64>();
        let mut q = z.clone();
        let mut p = p0;
        let mut ok = u0.is_finite();
        for i in 0..d {
            p[i] -= 0.5 * eps * grad_u[i];
        }
        let mut u1 = u0;
        for l in 0..self.leapfrog {
            for i in 0..d {
                q[i] += eps * p[i];
            }
            u1 = energy(&q, &mut grad_u);
            if !u1.is_finite() || grad_u.iter().any(|g| !g.is_finite()) {
                ok = false;
                break;
            }
            let c = if l + 1 == self.leapfrog { 0.5 * eps } else { eps };
            for i in 0..d {
                p[i] -= c * grad_u[i];
            }
        }
        stats.proposals += 1;
        let k1: f64 = 0.5 * p.iter().map(|a| a * a).sum::<f64>();
        let dh = (u1 + k1) - (u0 + k0);
        if !ok || !dh.is_finite() || dh > DIVERGENCE {
            stats.divergences += 1;
            return 0.0;
        }
        let a = (-dh).exp().min(1.0);
        stats.accept_prob += a;
        let u: f64 = rng.random::<f64>();
        if u < a {
            stats.accepts += 1;
            *z = q;
        }
        a
    }
}

impl<B: GradLogDensity + Sync, T: GradLogDensity + Sync> Kernel<B, T, Vec<f64>> for Hmc {
    fn step(&self, base: &B, target: &T, beta: f64, z: &mut Vec<f64>, rng: &mut Stream, stats: &mut ChainStats) {
        let eps = self.step.at(beta);
        self.transition(base, target, beta, eps, z, rng, stats);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adaptation {
    pub step: StepSizes,
    /// Mean acceptance probability over post-warmup moves at the frozen sizes.
    pub acceptance: Vec<f64>,
    pub divergences: u64,
    pub warning: Option<String>,
}

/// Tune step sizes toward `target_accept` on a grid of β values.
///
/// A single chain starts from a base draw and walks up the grid. At each grid
/// point `warmup` Robbins–Monro updates of `log ε` are made, the average over
/// the second half is frozen, and `check` further moves measure the realized
/// acceptance at the frozen size. Nothing adapts after this returns.
#[allow(clippy::too_many_arguments)]
pub fn adapt_step_size<B, T>(
    leapfrog: usize,
    base: &B,
    target: &T,
    grid: usize,
    eps0: f64,
    target_accept: f64,
    warmup: usize,
    check: usize,
    rng: &mut Stream,
) -> Adaptation
where
    B: GradLogDensity + Sample<Vec<f64>>,
    T: GradLogDensity,
{
    let g = grid.max(2);
    let betas: Vec<f64> = (0..g)
        .map(|i| {
            let lo = BETA_MIN.ln();
            let hi = (1.0 + BETA_MIN).ln();
            let u = lo + (hi - lo) * i as f64 / (g - 1) as f64;
            (u.exp() - BETA_MIN).clamp(0.0, 1.0)
        })
        .collect();
    let hmc = Hmc::fixed(leapfrog, eps0);
    let mut z = base.sample(rng);
    let mut log_eps = eps0.ln();
    let mut frozen = Vec::with_capacity(g);
    let mut acceptance = Vec::with_capacity(g);
    let mut stats = ChainStats::default();
    let mut warning = None;
    for &beta in &betas {
        let mut tail = Vec::new();
        for it in 0..warmup {
            let a = hmc.transition(base, target, beta, log_eps.exp(), &mut z, rng, &mut stats);
            let rate = 0.5 / ((it + 1) as f64).sqrt();
            log_eps = (log_eps + rate * (a - target_accept)).clamp(-30.0, 5.0);
            if it >= warmup / 2 {
                tail.push(log_eps);
            }
        }
        if !tail.is_empty() {
            log_eps = tail.iter().sum::<f64>() / tail.len() as f64;
        }
        frozen.push(log_eps);
        let mut s = ChainStats::default();
        for _ in 0..check {
            hmc.transition(base, target, beta, log_eps.exp(), &mut z, rng, &mut s);
        }
        let acc = s.acceptance_rate();
        if check > 0 && (acc < 0.01 || acc > 0.999) && warning.is_none() && beta > 0.0 {
            warning = Some(format!("acceptance pinned at {acc:.3} for beta = {beta:.4}"));
        }
        acceptance.push(acc);
        stats.divergences += s.divergences;
    }
    Adaptation { step: StepSizes::Grid { betas, log_eps: frozen }, acceptance, divergences: stats.divergences, warning }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{DiagGaussian, Gaussian, LogDensity};
    use crate::rng;
    use crate::stats::Summary;
    use nalgebra::DMatrix;

    fn target() -> Gaussian {
        Gaussian::from_precision(vec![1.0, -0.5], &DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]), 0.0).unwrap()
    }

    #[test]
    fn leaves_gaussian_invariant() {
        let base = DiagGaussian::standard(2);
        let t = target();
        let cov = t.covariance();
        let hmc = Hmc::fixed(10, 0.25);
        let n = 100_000;
        let out: Vec<Vec<f64>> = (0..n as u64)
            .map(|i| {
                let mut r = rng::stream(7, i, 0);
                let mut z = t.sample(&mut r);
                let mut s = ChainStats::default();
                hmc.step(&base, &t, 1.0, &mut z, &mut r, &mut s);
                z
            })
            .collect();
        for i in 0..2 {
            let v: Vec<f64> = out.iter().map(|z| z[i]).collect();
            let s = Summary::of(&v);
            assert!((s.mean - t.mean()[i]).abs() < 4.0 * s.std_error, "mean {i}");
            let sq: Vec<f64> = out.iter().map(|z| (z[i] - t.mean()[i]).powi(2)).collect();
            let s2 = Summary::of(&sq);
            assert!((s2.mean - cov[(i, i)]).abs() < 4.0 * s2.std_error, "var {i}");
        }
    }

    #[test]
    fn base_equals_target_accepts_everything() {
        let b = DiagGaussian { mean: vec![0.3], log_std: vec![-0.5] };
        let mut r = rng::stream(1, 0, 0);
        let mut z = b.sample(&mut r);
        let mut s = ChainStats::default();
        for beta in [0.0, 0.3, 1.0] {
            for _ in 0..50 {
                Hmc::fixed(20, 0.05).step(&b, &b, beta, &mut z, &mut r, &mut s);
            }
        }
        assert!(s.acceptance_rate() > 0.99);
    }

    #[test]
    fn adaptation_reaches_band() {
        let base = DiagGaussian::standard(2);
        let t = target();
        for seed in 0..4 {
            let a = adapt_step_size(20, &base, &t, 6, 0.1, 0.65, 400, 400, &mut rng::stream(seed, 0, 0));
            for acc in &a.acceptance {
                assert!((0.55..=0.75).contains(acc), "{:?}", a.acceptance);
            }
            assert!(a.warning.is_none());
        }
    }

    #[test]
    fn adaptation_recovers_from_huge_initial_step() {
        let base = DiagGaussian::standard(2);
        let t = target();
        let a = adapt_step_size(20, &base, &t, 3, 30.0, 0.65, 400, 400, &mut rng::stream(4, 0, 0));
        let last = *a.acceptance.last().unwrap();
        assert!((0.55..=0.75).contains(&last), "{:?}", a.acceptance);
    }

    #[test]
    fn divergent_trajectory_is_rejected_and_counted() {
        let base = DiagGaussian::standard(1);
        let t = Gaussian::from_precision(vec![0.0], &DMatrix::from_element(1, 1, 1e6), 0.0).unwrap();
        let mut z = vec![0.01];
        let before = z.clone();
        let mut s = ChainStats::default();
        let mut r = rng::stream(0, 0, 0);
        Hmc::fixed(20, 10.0).step(&base, &t, 1.0, &mut z, &mut r, &mut s);
        assert_eq!(s.divergences, 1);
        assert_eq!(z, before);
        assert!(t.log_density(&z).is_finite());
    }

    #[test]
    fn grid_interpolation_hits_nodes() {
        let s = StepSizes::Grid { betas: vec![0.0, 0.5, 1.0], log_eps: vec![0.0, -1.0, -2.0] };
        assert!((s.at(0.5) - (-1.0f64).exp()).abs() < 1e-12);
        assert!((s.at(1.0) - (-2.0f64).exp()).abs() < 1e-12);
        let mid = s.at(0.75);
        assert!(mid < (-1.0f64).exp() && mid > (-2.0f64).exp());
    }
}
