use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use super::tape::Var;
use crate::density::DiagGaussian;
use crate::models::JointModel;
use crate::rng::{self, Stream};
use crate::task::Proposal;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum EncoderKind {
    Affine,
    Mlp { width: usize },
}

/// Amortized diagonal Gaussian `q(z|x)`. The encoder maps `x` to
/// `[mean, log_std]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalGaussian {
    net: Mlp,
    latent_dim: usize,
}

impl ConditionalGaussian {
    pub fn new(obs_dim: usize, latent_dim: usize, kind: EncoderKind, seed: u64) -> Self {
        let sizes = match kind {
            EncoderKind::Affine => vec![obs_dim, 2 * latent_dim],
            EncoderKind::Mlp { width } => vec![obs_dim, width, 2 * latent_dim],
        };
        ConditionalGaussian { net: Mlp::new(&sizes, seed), latent_dim }
    }

    /// Affine encoder with all parameters zero: `q(z|x) = N(0, I)`.
    pub fn standard(obs_dim: usize, latent_dim: usize) -> Self {
        ConditionalGaussian { net: Mlp::zeros(&[obs_dim, 2 * latent_dim]), latent_dim }
    }

    pub fn from_net(net: Mlp) -> Option<Self> {
        let out = *net.sizes().last()?;
        (out % 2 == 0).then_some(ConditionalGaussian { latent_dim: out / 2, net })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.net.sizes()[0]
    }

    pub fn at_row(&self, x: &[f64]) -> DiagGaussian {
        let out = self.net.row_forward(x);
        let d = self.latent_dim;
        DiagGaussian { mean: out[..d].to_vec(), log_std: out[d..].to_vec() }
    }

    /// `(mean, log_std)` for a batch of inputs, on the tape.
    pub fn encode<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> (Var<'t>, Var<'t>) {
        let out = self.net.forward_tape(p, x);
        (out.slice_cols(0, self.latent_dim), out.slice_cols(self.latent_dim, self.latent_dim))
    }

    /// Per-row `log q(z|x)` as an `n×1` column.
    pub fn log_density_tape<'t>(&self, p: &[Var<'t>], x: Var<'t>, z: Var<'t>) -> Var<'t> {
        let (mean, log_std) = self.encode(p, x);
        let u = z.sub(mean).mul(log_std.scale(-1.0).exp());
        u.square().scale(-0.5).sub(log_std).shift(-0.5 * LN_2PI).sum_cols()
    }

    /// Reparameterized draws `mean + exp(log_std)·eps`.
    pub fn sample_tape<'t>(&self, p: &[Var<'t>], x: Var<'t>, eps: Var<'t>) -> Var<'t> {
        let (mean, log_std) = self.encode(p, x);
        mean.add(log_std.exp().mul(eps))
    }

    /// `n` reparameterized draws at `x`, each with the noise that produced it.
    pub fn sample(&self, x: &[f64], n: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
        let q = self.at_row(x);
        (0..n as u64)
            .map(|i| {
                let mut r = rng::stream(seed, i, rng::AUX);
                let eps = std_normal(self.latent_dim, &mut r);
                (q.transform(&eps), eps)
            })
            .collect()
    }
}

pub(crate) fn std_normal(d: usize, rng: &mut Stream) -> Vec<f64> {
    use rand::Rng;
    (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
}

pub(crate) fn rows(v: &[Vec<f64>]) -> Array2<f64> {
    let c = v.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((v.len(), c), |(i, j)| v[i][j])
}

impl<M: JointModel<X = Vec<f64>, Z = Vec<f64>>> Proposal<M> for ConditionalGaussian {
    type At = DiagGaussian;
    fn at(&self, _model: &M, x: &Vec<f64>) -> DiagGaussian {
        self.at_row(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::LogDensity;
    use crate::stats::Summary;
    use crate::variational::tape::{gradient_check, Tape};

    #[test]
    fn standard_encoder_is_unit_gaussian() {
        let q = ConditionalGaussian::standard(3, 2);
        let g = q.at_row(&[1.0, 2.0, 3.0]);
        assert_eq!(g, DiagGaussian::standard(2));
        assert!((g.log_density(&vec![0.0, 0.0]) + LN_2PI).abs() < 1e-14);
    }

    #[test]
    fn zero_encoder_returns_raw_noise() {
        let q = ConditionalGaussian::standard(2, 3);
        for (z, eps) in q.sample(&[0.5, -0.5], 10, 4) {
            assert_eq!(z, eps);
        }
    }

    #[test]
    fn tape_density_matches_plain_density() {
        let q = ConditionalGaussian::new(3, 2, EncoderKind::Mlp { width: 5 }, 2);
        let x = vec![vec![0.1, -0.4, 0.8], vec![1.0, 0.0, -1.0]];
        let z = vec![vec![0.3, 0.2], vec![-1.0, 0.5]];
        let t = Tape::new();
        let p = q.net().leaves(&t);
        let lp = q.log_density_tape(&p, t.var(rows(&x)), t.var(rows(&z))).value();
        for i in 0..2 {
            assert!((lp[(i, 0)] - q.at_row(&x[i]).log_density(&z[i])).abs() < 1e-13);
        }
    }

    #[test]
    fn density_gradient_matches_finite_differences() {
        let q = ConditionalGaussian::new(3, 2, EncoderKind::Affine, 3);
        let x = rows(&[vec![0.1, -0.4, 0.8], vec![1.0, 0.3, -1.0]]);
        let z = rows(&[vec![0.3, 0.2], vec![-1.0, 0.5]]);
        let mut inputs = q.net().params().to_vec();
        inputs.push(x);
        inputs.push(z);
        let e = gradient_check(&inputs, 1e-4, |_, v| {
            let n = v.len();
            q.log_density_tape(&v[..n - 2], v[n - 2], v[n - 1]).sum()
        });
        assert!(e < 1e-5, "{e}");
    }

    #[test]
    fn sample_moments_match_encoder() {
        let q = ConditionalGaussian::new(2, 2, EncoderKind::Affine, 9);
        let x = [0.4, -0.3];
        let g = q.at_row(&x);
        let draws = q.sample(&x, 100_000, 1);
        for i in 0..2 {
            let v: Vec<f64> = draws.iter().map(|d| d.0[i]).collect();
            let s = Summary::of(&v);
            assert!((s.mean - g.mean[i]).abs() < 3.0 * s.std_error);
            let sd = (v.iter().map(|a| (a - s.mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
            // std of the sample std is about sd/sqrt(2n)
            assert!((sd - g.log_std[i].exp()).abs() < 3.0 * sd / (2.0 * v.len() as f64).sqrt());
        }
    }

    #[test]
    fn pathwise_gradient_of_second_moment() {
        // d/ds E[z²] with z = m + e^s ε is 2e^{2s}; the Monte Carlo pathwise
        // gradient should agree within its standard error.
        let d = 1;
        let mut q = ConditionalGaussian::standard(1, d);
        q.net_mut().params_mut()[1][(0, 1)] = 0.3;
        let n = 20_000;
        let eps: Vec<Vec<f64>> = (0..n as u64).map(|i| std_normal(d, &mut rng::stream(5, i, 0))).collect();
        let t = Tape::new();
        let p = q.net().leaves(&t);
        let z = q.sample_tape(&p, t.var(Array2::zeros((n, 1))), t.var(rows(&eps)));
        let per = z.square();
        let g = t.backward(per.mean()).of(p[1])[(0, 1)];
        let exact = 2.0 * (0.6f64).exp();
        let vals: Vec<f64> = eps.iter().map(|e| 2.0 * (0.6f64).exp() * e[0] * e[0]).collect();
        let s = Summary::of(&vals);
        assert!((g - exact).abs() < 3.0 * s.std_error, "{g} vs {exact}");
    }
}
