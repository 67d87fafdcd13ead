use nalgebra::DVector;

use super::{ais_backward, ais_forward, ChainStats, Kernel, Schedule};
use crate::density::{gaussian_kl, Gaussian, GaussianForm, LogDensity, Natural, Sample};
use crate::rng::{self, Stream};
use crate::stats::{per_draw, Summary};
use crate::{Error, Result};

/// Exact draws from each Gaussian intermediate, independent of the current
/// state. Only defined when both endpoints are Gaussian in `z`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Perfect;

impl<B: GaussianForm + Sync, T: GaussianForm + Sync> Kernel<B, T, Vec<f64>> for Perfect {
    fn step(&self, base: &B, target: &T, beta: f64, z: &mut Vec<f64>, rng: &mut Stream, stats: &mut ChainStats) {
        let nat = Natural::mix(&base.natural(), &target.natural(), beta);
        let g = Gaussian::from_natural(&nat, 0.0).expect("geometric mixture of Gaussians is Gaussian");
        *z = g.sample(rng);
        stats.proposals += 1;
        stats.accepts += 1;
        stats.accept_prob += 1.0;
    }
}

fn moments(n: &Natural) -> Result<(DVector<f64>, nalgebra::DMatrix<f64>)> {
    let c = nalgebra::Cholesky::new(n.precision.clone()).ok_or_else(|| Error::Unsupported("non-Gaussian endpoint".into()))?;
    Ok((c.solve(&n.shift), c.inverse()))
}

/// `KL(π_T ‖ π_0) + KL(π_0 ‖ π_T)` between the normalized endpoints.
pub fn symmetrized_kl<B: GaussianForm, T: GaussianForm>(base: &B, target: &T) -> Result<f64> {
    let (m0, s0) = moments(&base.natural())?;
    let (m1, s1) = moments(&target.natural())?;
    Ok(gaussian_kl(&m1, &s1, &m0, &s0) + gaussian_kl(&m0, &s0, &m1, &s1))
}

#[derive(Debug, Clone, Copy)]
pub struct GapMeasurement {
    pub t: usize,
    /// Per-pair `w_bwd - w_fwd`.
    pub gap: Summary,
    pub forward: Summary,
    pub backward: Summary,
    /// `symmetrized KL / T`.
    pub expected: f64,
}

/// EUBO − ELBO of single-chain AIS with exact transitions on a linear
/// schedule, over `n` independent forward/backward pairs.
pub fn perfect_transition_gap<B, T>(base: &B, target: &T, t: usize, n: usize, seed: u64) -> Result<GapMeasurement>
where
    B: GaussianForm + LogDensity<Vec<f64>> + Sample<Vec<f64>> + Sync,
    T: GaussianForm + LogDensity<Vec<f64>> + Sync,
{
    let sched = Schedule::linear(t)?;
    let post = Gaussian::from_natural(&target.natural(), 0.0).ok_or_else(|| Error::Unsupported("non-Gaussian target".into()))?;
    let pairs = per_draw(n, |i| {
        let mut r = rng::slot(seed, i, 0);
        let f = ais_forward(base, target, &sched, &Perfect, &mut r, false);
        let mut r = rng::slot(seed, i, 1);
        let z = post.sample(&mut r);
        let b = ais_backward(base, target, &sched, &Perfect, z, &mut r, false);
        (f.log_weight, b.log_weight)
    });
    let fw: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let bw: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let gap: Vec<f64> = pairs.iter().map(|p| p.1 - p.0).collect();
    Ok(GapMeasurement {
        t,
        gap: Summary::of(&gap),
        forward: Summary::of(&fw),
        backward: Summary::of(&bw),
        expected: symmetrized_kl(base, target)? / t as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::DiagGaussian;
    use nalgebra::DMatrix;

    fn shifted() -> (DiagGaussian, Gaussian) {
        let base = DiagGaussian::standard(1);
        let target = Gaussian::from_precision(vec![3.0], &DMatrix::identity(1, 1), 2.0).unwrap();
        (base, target)
    }

    #[test]
    fn shifted_unit_gaussians_have_symkl_nine() {
        let (b, t) = shifted();
        assert!((symmetrized_kl(&b, &t).unwrap() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn one_step_gap_is_full_symkl() {
        let (b, t) = shifted();
        let g = perfect_transition_gap(&b, &t, 1, 40_000, 1).unwrap();
        assert!((g.gap.mean - 9.0).abs() < 3.0 * g.gap.std_error);
    }

    #[test]
    fn bounds_enclose_log_normalizer() {
        let (b, t) = shifted();
        let g = perfect_transition_gap(&b, &t, 10, 20_000, 2).unwrap();
        assert!(g.forward.mean <= 2.0 + 3.0 * g.forward.std_error);
        assert!(g.backward.mean >= 2.0 - 3.0 * g.backward.std_error);
    }

    #[test]
    fn gap_halves_when_t_doubles() {
        let (b, t) = shifted();
        let g10 = perfect_transition_gap(&b, &t, 10, 40_000, 3).unwrap();
        let g20 = perfect_transition_gap(&b, &t, 20, 40_000, 4).unwrap();
        let ratio = g10.gap.mean / g20.gap.mean;
        let rel = ((g10.gap.std_error / g10.gap.mean).powi(2) + (g20.gap.std_error / g20.gap.mean).powi(2)).sqrt();
        assert!((ratio - 2.0).abs() < 3.0 * rel * ratio, "ratio {ratio}");
    }
}
