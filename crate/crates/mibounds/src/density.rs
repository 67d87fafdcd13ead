//! Density objects at a fixed observation.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng::Stream;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub trait LogDensity<Z> {
    fn log_density(&self, z: &Z) -> f64;
}

/// Log-density with its gradient in `z`. Returns the log-density and writes
/// the gradient into `grad`.
pub trait GradLogDensity: LogDensity<Vec<f64>> {
    fn log_density_grad(&self, z: &[f64], grad: &mut [f64]) -> f64;
}

pub trait Sample<Z> {
    fn sample(&self, rng: &mut Stream) -> Z;
}

/// Densities of the form `c - ½ zᵀPz + hᵀz`. Geometric mixtures of two such
/// densities stay in the family, which is what the exact-transition kernel
/// relies on.
pub trait GaussianForm {
    fn natural(&self) -> Natural;
}

/// Densities on `{0, .., n-1}`.
pub trait FiniteSupport: LogDensity<usize> {
    fn support(&self) -> usize;
}

#[derive(Debug, Clone)]
pub struct Natural {
    pub precision: DMatrix<f64>,
    pub shift: DVector<f64>,
}

impl Natural {
    pub fn mix(a: &Natural, b: &Natural, beta: f64) -> Natural {
        Natural {
            precision: &a.precision * (1.0 - beta) + &b.precision * beta,
            shift: &a.shift * (1.0 - beta) + &b.shift * beta,
        }
    }
}

fn std_normal_vec(d: usize, rng: &mut Stream) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Diagonal Gaussian `N(mean, diag(exp(2·log_std)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl DiagGaussian {
    pub fn standard(d: usize) -> Self {
        DiagGaussian { mean: vec![0.0; d], log_std: vec![0.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `mean + exp(log_std)·eps`.
    pub fn transform(&self, eps: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .zip(eps)
            .map(|((m, s), e)| m + s.exp() * e)
            .collect()
    }
}

impl LogDensity<Vec<f64>> for DiagGaussian {
    fn log_density(&self, z: &Vec<f64>) -> f64 {
        let mut s = 0.0;
        for i in 0..z.len() {
            let u = (z[i] - self.mean[i]) * (-self.log_std[i]).exp();
            s += -0.5 * u * u - self.log_std[i] - 0.5 * LN_2PI;
        }
        s
    }
}

impl GradLogDensity for DiagGaussian {
    fn log_density_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..z.len() {
            let inv = (-self.log_std[i]).exp();
            let u = (z[i] - self.mean[i]) * inv;
            s += -0.5 * u * u - self.log_std[i] - 0.5 * LN_2PI;
            grad[i] = -u * inv;
        }
        s
    }
}

impl Sample<Vec<f64>> for DiagGaussian {
    fn sample(&self, rng: &mut Stream) -> Vec<f64> {
        let eps = std_normal_vec(self.dim(), rng);
        self.transform(&eps)
    }
}

impl GaussianForm for DiagGaussian {
    fn natural(&self) -> Natural {
        let p: Vec<f64> = self.log_std.iter().map(|s| (-2.0 * s).exp()).collect();
        let h: Vec<f64> = p.iter().zip(&self.mean).map(|(a, m)| a * m).collect();
        Natural {
            precision: DMatrix::from_diagonal(&DVector::from_vec(p)),
            shift: DVector::from_vec(h),
        }
    }
}

/// Full-covariance Gaussian in precision form, scaled by `exp(offset)`.
/// With `offset = 0` it is normalized.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: Vec<f64>,
    precision: Vec<f64>,
    chol: DMatrix<f64>,
    log_norm: f64,
    pub offset: f64,
}

impl Gaussian {
    pub fn from_precision(mean: Vec<f64>, precision: &DMatrix<f64>, offset: f64) -> Option<Self> {
        let d = mean.len();
        let chol = Cholesky::new(precision.clone())?.l();
        let half_logdet: f64 = (0..d).map(|i| chol[(i, i)].ln()).sum();
        let mut p = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                p[i * d + j] = precision[(i, j)];
            }
        }
        Some(Gaussian {
            mean,
            precision: p,
            chol,
            log_norm: half_logdet - 0.5 * d as f64 * LN_2PI,
            offset,
        })
    }

    /// Gaussian with natural parameters `(P, h)`, i.e. mean `P⁻¹h`.
    pub fn from_natural(nat: &Natural, offset: f64) -> Option<Self> {
        let chol = Cholesky::new(nat.precision.clone())?;
        let mean = chol.solve(&nat.shift);
        Gaussian::from_precision(mean.iter().cloned().collect(), &nat.precision, offset)
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn precision(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.precision)
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let p = self.precision();
        Cholesky::new(p).expect("precision is positive definite").inverse()
    }

    /// Normalized log-density plus `offset`.
    fn eval(&self, z: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let d = self.dim();
        let mut quad = 0.0;
        let mut g = grad;
        for i in 0..d {
            let row = &self.precision[i * d..(i + 1) * d];
            let mut pi = 0.0;
            for j in 0..d {
                pi += row[j] * (z[j] - self.mean[j]);
            }
            quad += (z[i] - self.mean[i]) * pi;
            if let Some(g) = g.as_deref_mut() {
                g[i] = -pi;
            }
        }
        self.offset + self.log_norm - 0.5 * quad
    }
}

impl LogDensity<Vec<f64>> for Gaussian {
    fn log_density(&self, z: &Vec<f64>) -> f64 {
        self.eval(z, None)
    }
}

impl GradLogDensity for Gaussian {
    fn log_density_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        self.eval(z, Some(grad))
    }
}

impl Sample<Vec<f64>> for Gaussian {
    fn sample(&self, rng: &mut Stream) -> Vec<f64> {
        let eps = DVector::from_vec(std_normal_vec(self.dim(), rng));
        // P = L Lᵀ, so u = L⁻ᵀ eps has covariance P⁻¹.
        let u = self
            .chol
            .transpose()
            .solve_upper_triangular(&eps)
            .expect("triangular factor is nonsingular");
        self.mean.iter().zip(u.iter()).map(|(m, v)| m + v).collect()
    }
}

impl GaussianForm for Gaussian {
    fn natural(&self) -> Natural {
        let p = self.precision();
        let shift = &p * DVector::from_column_slice(&self.mean);
        Natural { precision: p, shift }
    }
}

/// Unnormalized weights on `{0, .., n-1}`, stored as logs.
#[derive(Debug, Clone, PartialEq)]
pub struct Discrete {
    pub logw: Vec<f64>,
}

impl Discrete {
    pub fn new(logw: Vec<f64>) -> Self {
        Discrete { logw }
    }

    pub fn from_probs(p: &[f64]) -> Self {
        Discrete { logw: p.iter().map(|a| a.ln()).collect() }
    }

    pub fn log_normalizer(&self) -> f64 {
        crate::stats::logsumexp(&self.logw)
    }

    pub fn probs(&self) -> Vec<f64> {
        crate::stats::softmax(&self.logw)
    }
}

impl LogDensity<usize> for Discrete {
    fn log_density(&self, z: &usize) -> f64 {
        self.logw[*z]
    }
}

impl FiniteSupport for Discrete {
    fn support(&self) -> usize {
        self.logw.len()
    }
}

impl Sample<usize> for Discrete {
    fn sample(&self, rng: &mut Stream) -> usize {
        let p = self.probs();
        sample_index(&p, rng)
    }
}

/// Cumulative-sum inversion with one uniform. Ties go to the lower index and
/// zero-probability entries are never returned.
pub fn sample_index(p: &[f64], rng: &mut Stream) -> usize {
    let total: f64 = p.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi <= 0.0 {
            continue;
        }
        acc += pi;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// `KL(N(m0, S0) ‖ N(m1, S1))` for full covariances.
pub fn gaussian_kl(m0: &DVector<f64>, s0: &DMatrix<f64>, m1: &DVector<f64>, s1: &DMatrix<f64>) -> f64 {
    let d = m0.len() as f64;
    let c1 = Cholesky::new(s1.clone()).expect("covariance is positive definite");
    let c0 = Cholesky::new(s0.clone()).expect("covariance is positive definite");
    let tr = (c1.solve(s0)).trace();
    let diff = m1 - m0;
    let maha = diff.dot(&c1.solve(&diff));
    let ld1: f64 = 2.0 * c1.l().diagonal().iter().map(|a| a.ln()).sum::<f64>();
    let ld0: f64 = 2.0 * c0.l().diagonal().iter().map(|a| a.ln()).sum::<f64>();
    0.5 * (tr + maha - d + ld1 - ld0)
}
