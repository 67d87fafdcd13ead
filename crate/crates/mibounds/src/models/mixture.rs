use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{check_vec, Capabilities, JointModel};
use crate::density::{sample_index, Gaussian, GradLogDensity, LogDensity, Sample};
use crate::rng::Stream;
use crate::stats::{logsumexp, softmax};
use crate::{error::param, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `Σ_m exp(logw_m) · N_m(z)` with normalized components; the total mass is
/// `exp(logsumexp(logw))`.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    pub logw: Vec<f64>,
    pub components: Vec<Gaussian>,
}

impl GaussianMixture {
    /// Component responsibilities at `z`.
    pub fn responsibilities(&self, z: &Vec<f64>) -> Vec<f64> {
        let l: Vec<f64> = self.logw.iter().zip(&self.components).map(|(w, c)| w + c.log_density(z)).collect();
        softmax(&l)
    }

    pub fn log_mass(&self) -> f64 {
        logsumexp(&self.logw)
    }
}

impl LogDensity<Vec<f64>> for GaussianMixture {
    fn log_density(&self, z: &Vec<f64>) -> f64 {
        let l: Vec<f64> = self.logw.iter().zip(&self.components).map(|(w, c)| w + c.log_density(z)).collect();
        logsumexp(&l)
    }
}

impl GradLogDensity for GaussianMixture {
    fn log_density_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let d = z.len();
        let mut parts = Vec::with_capacity(self.components.len());
        let mut grads = Vec::with_capacity(self.components.len());
        for (w, c) in self.logw.iter().zip(&self.components) {
            let mut g = vec![0.0; d];
            parts.push(w + c.log_density_grad(z, &mut g));
            grads.push(g);
        }
        let r = softmax(&parts);
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (ri, g) in r.iter().zip(&grads) {
            for i in 0..d {
                grad[i] += ri * g[i];
            }
        }
        logsumexp(&parts)
    }
}

impl Sample<Vec<f64>> for GaussianMixture {
    fn sample(&self, rng: &mut Stream) -> Vec<f64> {
        let m = sample_index(&softmax(&self.logw), rng);
        self.components[m].sample(rng)
    }
}

/// Mixture-of-Gaussians prior on a 1-D or 2-D latent with a linear Gaussian
/// likelihood `x ~ N(Az, σ²I)`. The posterior is a Gaussian mixture, so a
/// diagonal Gaussian `q` is misspecified whenever the modes separate.
#[derive(Debug, Clone)]
pub struct GaussianMixturePosteriorModel {
    prior: GaussianMixture,
    prior_nat: Vec<(DMatrix<f64>, DVector<f64>)>,
    loading: DMatrix<f64>,
    obs_std: f64,
}

impl GaussianMixturePosteriorModel {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        stds: Vec<Vec<f64>>,
        loading: DMatrix<f64>,
        obs_std: f64,
    ) -> Result<Self> {
        let m = weights.len();
        let d = loading.ncols();
        if m == 0 || means.len() != m || stds.len() != m {
            return Err(param("weights, means and stds need one entry per component"));
        }
        if !(1..=2).contains(&d) {
            return Err(param("latent dimension must be 1 or 2"));
        }
        if !(obs_std > 0.0) || weights.iter().any(|w| !(*w > 0.0)) {
            return Err(param("weights and obs_std must be positive"));
        }
        let ws: f64 = weights.iter().sum();
        let mut comps = Vec::with_capacity(m);
        let mut nat = Vec::with_capacity(m);
        for k in 0..m {
            if means[k].len() != d || stds[k].len() != d || stds[k].iter().any(|s| !(*s > 0.0)) {
                return Err(param(format!("component {k} has bad mean or std")));
            }
            let p = DMatrix::from_diagonal(&DVector::from_iterator(d, stds[k].iter().map(|s| 1.0 / (s * s))));
            let h = &p * DVector::from_column_slice(&means[k]);
            comps.push(Gaussian::from_precision(means[k].clone(), &p, 0.0).expect("diagonal precision"));
            nat.push((p, h));
        }
        let prior = GaussianMixture { logw: weights.iter().map(|w| (w / ws).ln()).collect(), components: comps };
        Ok(GaussianMixturePosteriorModel { prior, prior_nat: nat, loading, obs_std })
    }

    /// Two equal-weight modes at `±sep` on a 1-D latent observed through
    /// `obs_dim` noisy copies.
    pub fn bimodal(sep: f64, mode_std: f64, obs_dim: usize, obs_std: f64) -> Result<Self> {
        GaussianMixturePosteriorModel::new(
            vec![0.5, 0.5],
            vec![vec![-sep], vec![sep]],
            vec![vec![mode_std], vec![mode_std]],
            DMatrix::from_element(obs_dim, 1, 1.0),
            obs_std,
        )
    }

    fn mixture_at(&self, x: &[f64], normalize: bool) -> GaussianMixture {
        let s2 = self.obs_std * self.obs_std;
        let ata = self.loading.transpose() * &self.loading / s2;
        let atx = self.loading.transpose() * DVector::from_column_slice(x) / s2;
        let mut comps = Vec::with_capacity(self.prior_nat.len());
        let mut logw = Vec::with_capacity(self.prior_nat.len());
        for (k, (p0, h0)) in self.prior_nat.iter().enumerate() {
            let nat = crate::density::Natural { precision: p0 + &ata, shift: h0 + &atx };
            let post = Gaussian::from_natural(&nat, 0.0).expect("posterior precision is positive definite");
            let at = post.mean().to_vec();
            // log p(x | k) = log N_k(z) + log p(x|z) - log post_k(z), any z.
            let lxk = self.prior.components[k].log_density(&at) + self.log_likelihood(&x.to_vec(), &at)
                - post.log_density(&at);
            logw.push(self.prior.logw[k] + lxk);
            comps.push(post);
        }
        let mut g = GaussianMixture { logw, components: comps };
        if normalize {
            let l = g.log_mass();
            g.logw.iter_mut().for_each(|w| *w -= l);
        }
        g
    }
}

impl JointModel for GaussianMixturePosteriorModel {
    type X = Vec<f64>;
    type Z = Vec<f64>;
    type Prior = GaussianMixture;
    type Target = GaussianMixture;
    type Posterior = GaussianMixture;

    fn latent_dim(&self) -> usize {
        self.loading.ncols()
    }

    fn obs_dim(&self) -> usize {
        self.loading.nrows()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::SAMPLE_JOINT
            | Capabilities::LOGP_PRIOR
            | Capabilities::LOGP_LIKELIHOOD
            | Capabilities::EXACT_POSTERIOR_SAMPLE
    }

    fn prior(&self) -> GaussianMixture {
        self.prior.clone()
    }

    fn log_prior(&self, z: &Vec<f64>) -> f64 {
        self.prior.log_density(z)
    }

    fn log_likelihood(&self, x: &Vec<f64>, z: &Vec<f64>) -> f64 {
        let n = self.obs_dim();
        let mut s = 0.0;
        for i in 0..n {
            let mut mu = 0.0;
            for j in 0..z.len() {
                mu += self.loading[(i, j)] * z[j];
            }
            let u = (x[i] - mu) / self.obs_std;
            s += -0.5 * u * u;
        }
        s - n as f64 * (self.obs_std.ln() + 0.5 * LN_2PI)
    }

    fn sample_obs(&self, z: &Vec<f64>, rng: &mut Stream) -> Vec<f64> {
        let mean = &self.loading * DVector::from_column_slice(z);
        mean.iter()
            .map(|m| m + self.obs_std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn target(&self, x: &Vec<f64>) -> GaussianMixture {
        self.mixture_at(x, false)
    }

    fn posterior(&self, x: &Vec<f64>) -> Result<GaussianMixture> {
        Ok(self.mixture_at(x, true))
    }

    fn analytic_mi(&self) -> Result<f64> {
        Err(Error::Unsupported("analytic MI".into()))
    }

    fn check(&self, x: Option<&Vec<f64>>, z: Option<&Vec<f64>>) -> Result<()> {
        if let Some(x) = x {
            check_vec(x, self.obs_dim(), "observation")?;
        }
        if let Some(z) = z {
            check_vec(z, self.latent_dim(), "latent")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn responsibilities_sum_to_one() {
        let m = GaussianMixturePosteriorModel::bimodal(2.0, 0.5, 1, 1.0).unwrap();
        let post = m.posterior(&vec![0.3]).unwrap();
        let r = post.responsibilities(&vec![0.1]);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!((post.log_mass()).abs() < 1e-14);
    }

    #[test]
    fn target_normalizer_is_evidence_and_matches_joint() {
        let m = GaussianMixturePosteriorModel::bimodal(1.5, 0.6, 2, 0.8).unwrap();
        let mut r = rng::stream(4, 0, 0);
        for _ in 0..10 {
            let (x, z) = m.sample_joint(&mut r).unwrap();
            let t = m.target(&x);
            assert!((t.log_density(&z) - m.log_joint(&x, &z)).abs() < 1e-10);
        }
        // 1-D quadrature of the joint over z gives p(x).
        let x = vec![0.4, -0.2];
        let h = 1e-3;
        let mass: f64 = (-10_000..10_000).map(|i| (m.log_joint(&x, &vec![i as f64 * h])).exp() * h).sum();
        assert!((mass.ln() - m.target(&x).log_mass()).abs() < 1e-8);
    }

    #[test]
    fn posterior_is_bimodal_near_zero() {
        let m = GaussianMixturePosteriorModel::bimodal(2.0, 0.4, 1, 1.0).unwrap();
        let post = m.posterior(&vec![0.0]).unwrap();
        let at0 = post.log_density(&vec![0.0]);
        let at2 = post.log_density(&vec![2.0]);
        assert!(at2 > at0 + 1.0);
    }

    #[test]
    fn mixture_gradient_matches_finite_difference() {
        let m = GaussianMixturePosteriorModel::new(
            vec![0.3, 0.7],
            vec![vec![-1.0, 0.5], vec![1.0, 0.0]],
            vec![vec![0.5, 1.0], vec![0.8, 0.4]],
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, -0.5, 1.0]),
            1.0,
        )
        .unwrap();
        let t = m.target(&vec![0.3, 0.1]);
        let z = vec![0.2, -0.3];
        let mut g = vec![0.0; 2];
        t.log_density_grad(&z, &mut g);
        for i in 0..2 {
            let (mut a, mut b) = (z.clone(), z.clone());
            a[i] += 1e-5;
            b[i] -= 1e-5;
            let fd = (t.log_density(&a) - t.log_density(&b)) / 2e-5;
            assert!((fd - g[i]).abs() < 1e-7);
        }
    }
}
