use rand::Rng;

use super::{geo, ChainStats, Kernel};
use crate::density::{sample_index, FiniteSupport};
use crate::rng::Stream;
use crate::stats::softmax;

/// Kernels on finite supports that can also report their transition matrix,
/// which is what the exact chain enumeration uses.
pub trait DiscreteKernel {
    /// Row-major `n × n` matrix `K[i][j] = P(j | i)` for log-weights `logpi`.
    fn matrix(&self, logpi: &[f64]) -> Vec<f64>;
}

fn intermediate<B: FiniteSupport, T: FiniteSupport>(base: &B, target: &T, beta: f64) -> Vec<f64> {
    (0..base.support()).map(|z| geo(base.log_density(&z), target.log_density(&z), beta)).collect()
}

/// Metropolis with a uniform proposal over the whole support.
#[derive(Debug, Clone, Copy, Default)]
pub struct Metropolis;

impl<B: FiniteSupport + Sync, T: FiniteSupport + Sync> Kernel<B, T, usize> for Metropolis {
    fn step(&self, base: &B, target: &T, beta: f64, z: &mut usize, rng: &mut Stream, stats: &mut ChainStats) {
        let n = base.support();
        let j = rng.random_range(0..n);
        let lj = geo(base.log_density(&j), target.log_density(&j), beta);
        let li = geo(base.log_density(z), target.log_density(z), beta);
        let a = if lj >= li { 1.0 } else { (lj - li).exp() };
        stats.proposals += 1;
        stats.accept_prob += a;
        let u: f64 = rng.random::<f64>();
        if u < a {
            stats.accepts += 1;
            *z = j;
        }
    }
}

impl DiscreteKernel for Metropolis {
    fn matrix(&self, logpi: &[f64]) -> Vec<f64> {
        let n = logpi.len();
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            let mut stay = 1.0;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let a = if logpi[j] >= logpi[i] { 1.0 } else { (logpi[j] - logpi[i]).exp() };
                let p = a / n as f64;
                k[i * n + j] = p;
                stay -= p;
            }
            k[i * n + i] = stay;
        }
        k
    }
}

/// Independent exact draw from the normalized intermediate.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactDiscrete;

impl<B: FiniteSupport + Sync, T: FiniteSupport + Sync> Kernel<B, T, usize> for ExactDiscrete {
    fn step(&self, base: &B, target: &T, beta: f64, z: &mut usize, rng: &mut Stream, stats: &mut ChainStats) {
        let p = softmax(&intermediate(base, target, beta));
        *z = sample_index(&p, rng);
        stats.proposals += 1;
        stats.accepts += 1;
        stats.accept_prob += 1.0;
    }
}

impl DiscreteKernel for ExactDiscrete {
    fn matrix(&self, logpi: &[f64]) -> Vec<f64> {
        let n = logpi.len();
        let p = softmax(logpi);
        (0..n * n).map(|k| p[k % n]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::Discrete;
    use crate::rng;

    #[test]
    fn metropolis_matrix_is_stochastic_and_reversible() {
        let lp = vec![-0.3, -2.0, -1.1, f64::NEG_INFINITY];
        let k = Metropolis.matrix(&lp);
        let p = softmax(&lp);
        for i in 0..4 {
            let s: f64 = k[i * 4..i * 4 + 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-14);
            for j in 0..4 {
                assert!((p[i] * k[i * 4 + j] - p[j] * k[j * 4 + i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn metropolis_sampling_matches_matrix() {
        let base = Discrete::new(vec![-1.0, -0.5, -2.0]);
        let target = Discrete::new(vec![0.2, -3.0, 0.0]);
        let beta = 0.4;
        let lp = intermediate(&base, &target, beta);
        let k = Metropolis.matrix(&lp);
        let n = 200_000;
        let mut r = rng::stream(1, 0, 0);
        let mut counts = [0usize; 3];
        let mut s = ChainStats::default();
        for _ in 0..n {
            let mut z = 1;
            Metropolis.step(&base, &target, beta, &mut z, &mut r, &mut s);
            counts[z] += 1;
        }
        for j in 0..3 {
            let p = k[3 + j];
            let f = counts[j] as f64 / n as f64;
            assert!((f - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt() + 1e-12, "{j}: {f} vs {p}");
        }
    }
}
