use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{check_vec, Capabilities, JointModel};
use crate::density::{DiagGaussian, Gaussian};
use crate::rng::{self, Stream};
use crate::{error::param, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `z ~ N(0, I)`, `x | z ~ N(Wz + b, obs_std²·I)`.
#[derive(Debug, Clone)]
pub struct LinearGaussianVae {
    w: DMatrix<f64>,
    b: DVector<f64>,
    obs_std: f64,
    seed: Option<u64>,
    post_precision: DMatrix<f64>,
    post_chol: Cholesky<f64, nalgebra::Dyn>,
    // Wᵀ/σ², applied to (x - b) to get the posterior shift.
    wt_scaled: DMatrix<f64>,
}

impl LinearGaussianVae {
    pub fn new(w: DMatrix<f64>, b: DVector<f64>, obs_std: f64) -> Result<Self> {
        if !(obs_std > 0.0 && obs_std.is_finite()) {
            return Err(param("obs_std must be positive"));
        }
        if b.len() != w.nrows() {
            return Err(param("bias length must equal obs_dim"));
        }
        if w.ncols() == 0 || w.nrows() == 0 {
            return Err(param("dimensions must be positive"));
        }
        if w.iter().chain(b.iter()).any(|a| !a.is_finite()) {
            return Err(param("weights must be finite"));
        }
        let s2 = obs_std * obs_std;
        let d = w.ncols();
        let post_precision = DMatrix::identity(d, d) + w.transpose() * &w / s2;
        let post_chol = Cholesky::new(post_precision.clone()).expect("I + WᵀW/σ² is positive definite");
        let wt_scaled = w.transpose() / s2;
        Ok(LinearGaussianVae { w, b, obs_std, seed: None, post_precision, post_chol, wt_scaled })
    }

    /// Decoder weights with i.i.d. standard normal entries drawn from `seed`,
    /// zero bias.
    pub fn random(latent_dim: usize, obs_dim: usize, seed: u64, obs_std: f64) -> Result<Self> {
        let mut r = rng::stream(seed, 0, rng::AUX);
        let w = DMatrix::from_fn(obs_dim, latent_dim, |_, _| r.sample::<f64, _>(StandardNormal));
        let mut m = LinearGaussianVae::new(w, DVector::zeros(obs_dim), obs_std)?;
        m.seed = Some(seed);
        Ok(m)
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn obs_std(&self) -> f64 {
        self.obs_std
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn posterior_precision(&self) -> &DMatrix<f64> {
        &self.post_precision
    }

    pub fn posterior_mean(&self, x: &[f64]) -> Vec<f64> {
        let r = DVector::from_column_slice(x) - &self.b;
        let h = &self.wt_scaled * r;
        self.post_chol.solve(&h).iter().cloned().collect()
    }

    /// `log p(x)` evaluated as `log p(x, m) - log p(m | x)` at the posterior mean.
    pub fn log_evidence(&self, x: &[f64]) -> f64 {
        let m = self.posterior_mean(x);
        let d = self.latent_dim() as f64;
        let half_logdet: f64 = self.post_chol.l().diagonal().iter().map(|a| a.ln()).sum();
        let log_post_at_mean = half_logdet - 0.5 * d * LN_2PI;
        self.log_joint(&x.to_vec(), &m) - log_post_at_mean
    }

    /// Marginal covariance of x, `σ²I + WWᵀ`.
    pub fn marginal_covariance(&self) -> DMatrix<f64> {
        let n = self.obs_dim();
        DMatrix::identity(n, n) * (self.obs_std * self.obs_std) + &self.w * self.w.transpose()
    }
}

impl JointModel for LinearGaussianVae {
    type X = Vec<f64>;
    type Z = Vec<f64>;
    type Prior = DiagGaussian;
    type Target = Gaussian;
    type Posterior = Gaussian;

    fn latent_dim(&self) -> usize {
        self.w.ncols()
    }

    fn obs_dim(&self) -> usize {
        self.w.nrows()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::SAMPLE_JOINT
            | Capabilities::LOGP_PRIOR
            | Capabilities::LOGP_LIKELIHOOD
            | Capabilities::EXACT_POSTERIOR_SAMPLE
            | Capabilities::ANALYTIC_MI
    }

    fn prior(&self) -> DiagGaussian {
        DiagGaussian::standard(self.latent_dim())
    }

    fn log_prior(&self, z: &Vec<f64>) -> f64 {
        z.iter().map(|a| -0.5 * a * a - 0.5 * LN_2PI).sum()
    }

    fn log_likelihood(&self, x: &Vec<f64>, z: &Vec<f64>) -> f64 {
        let n = self.obs_dim();
        let mut s = 0.0;
        for i in 0..n {
            let mut mu = self.b[i];
            for j in 0..z.len() {
                mu += self.w[(i, j)] * z[j];
            }
            let u = (x[i] - mu) / self.obs_std;
            s += -0.5 * u * u;
        }
        s - n as f64 * (self.obs_std.ln() + 0.5 * LN_2PI)
    }

    fn sample_obs(&self, z: &Vec<f64>, rng: &mut Stream) -> Vec<f64> {
        let mean = &self.w * DVector::from_column_slice(z) + &self.b;
        mean.iter()
            .map(|m| m + self.obs_std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn target(&self, x: &Vec<f64>) -> Gaussian {
        let m = self.posterior_mean(x);
        let lz = self.log_evidence(x);
        Gaussian::from_precision(m, &self.post_precision, lz).expect("posterior precision is positive definite")
    }

    fn posterior(&self, x: &Vec<f64>) -> Result<Gaussian> {
        let m = self.posterior_mean(x);
        Ok(Gaussian::from_precision(m, &self.post_precision, 0.0).expect("posterior precision is positive definite"))
    }

    fn analytic_mi(&self) -> Result<f64> {
        Ok(self.post_chol.l().diagonal().iter().map(|a| a.ln()).sum())
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
    use crate::density::{LogDensity, Sample};
    use crate::models::sample_joint;

    fn small() -> LinearGaussianVae {
        LinearGaussianVae::random(3, 5, 11, 1.0).unwrap()
    }

    #[test]
    fn zero_decoder_has_no_information() {
        let m = LinearGaussianVae::new(DMatrix::zeros(4, 2), DVector::zeros(4), 1.0).unwrap();
        assert_eq!(m.analytic_mi().unwrap(), 0.0);
        let draws = sample_joint(&m, 20_000, 1).unwrap();
        let n = draws.len() as f64;
        let c: f64 = draws.iter().map(|(x, z)| x[0] * z[0]).sum::<f64>() / n;
        assert!(c.abs() < 4.0 / n.sqrt());
    }

    #[test]
    fn chain_rule_is_exact() {
        let m = small();
        let mut r = rng::stream(1, 0, 0);
        let (x, z) = m.sample_joint(&mut r).unwrap();
        assert_eq!(m.log_joint(&x, &z), m.log_prior(&z) + m.log_likelihood(&x, &z));
    }

    #[test]
    fn target_is_joint_density() {
        let m = small();
        let mut r = rng::stream(2, 0, 0);
        for _ in 0..20 {
            let (x, _) = m.sample_joint(&mut r).unwrap();
            let t = m.target(&x);
            let z: Vec<f64> = m.prior().sample(&mut r);
            let a = t.log_density(&z);
            let b = m.log_joint(&x, &z);
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn evidence_matches_marginal_gaussian() {
        let m = LinearGaussianVae::new(
            DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.3, 2.0, 0.7, 0.1]),
            DVector::from_vec(vec![0.1, -0.2, 0.3]),
            0.7,
        )
        .unwrap();
        let x = vec![0.4, -1.2, 2.0];
        let cov = m.marginal_covariance();
        let g = Gaussian::from_precision(m.bias().iter().cloned().collect(), &cov.try_inverse().unwrap(), 0.0).unwrap();
        assert!((g.log_density(&x) - m.log_evidence(&x)).abs() < 1e-12);
    }

    #[test]
    fn mi_matches_obs_space_log_det() {
        let m = LinearGaussianVae::random(4, 9, 5, 0.5).unwrap();
        let s2 = 0.25;
        let big = DMatrix::<f64>::identity(9, 9) + m.weights() * m.weights().transpose() / s2;
        let ld = big.lu().determinant().ln();
        assert!((0.5 * ld - m.analytic_mi().unwrap()).abs() < 1e-10);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = small();
        assert!(m.check(Some(&vec![0.0; 4]), None).is_err());
        assert!(m.check(None, Some(&vec![f64::NAN, 0.0, 0.0])).is_err());
        assert!(LinearGaussianVae::new(DMatrix::zeros(2, 1), DVector::zeros(2), 0.0).is_err());
    }

    #[test]
    fn seeded_weights_are_reproducible() {
        let a = LinearGaussianVae::random(3, 4, 9, 1.0).unwrap();
        let b = LinearGaussianVae::random(3, 4, 9, 1.0).unwrap();
        assert_eq!(a.weights(), b.weights());
        assert_eq!(a.seed(), Some(9));
    }
}
