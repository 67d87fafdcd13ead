//! Variational conditionals `q(z|x)`, critics `T(x, z)`, and what it takes
//! to train them.

use std::sync::Arc;

use crate::density::{Discrete, LogDensity};
use crate::models::{DiscreteJoint, JointModel};
use crate::rng::Stream;
use crate::task::Proposal;
use crate::{Error, Result};

mod adam;
mod checkpoint;
mod critic;
mod gaussian;
mod mlp;
pub mod tape;

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use critic::{MlpCritic, MlpCriticAt};
pub use gaussian::{ConditionalGaussian, EncoderKind};
pub(crate) use gaussian::{rows, std_normal};
pub use mlp::Mlp;

/// A scalar function `T(x, z)`.
pub trait Critic<X, Z>: Send + Sync {
    type At: CriticAt<Z> + Send + Sync;
    /// The critic with `x` fixed; may cache work that depends only on `x`.
    fn at(&self, x: &X) -> Self::At;

    fn eval(&self, x: &X, z: &Z) -> f64 {
        self.at(x).value(z)
    }
}

pub trait CriticAt<Z> {
    fn value(&self, z: &Z) -> f64;
}

/// Critics with a gradient in `z`, needed by HMC on `q·e^T`.
pub trait CriticGrad {
    fn value_grad(&self, z: &[f64], grad: &mut [f64]) -> f64;
}

/// `T(x, z) = c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantCritic(pub f64);

impl<X, Z> Critic<X, Z> for ConstantCritic {
    type At = ConstantCritic;
    fn at(&self, _x: &X) -> ConstantCritic {
        *self
    }
}

impl<Z> CriticAt<Z> for ConstantCritic {
    fn value(&self, _z: &Z) -> f64 {
        self.0
    }
}

impl CriticGrad for ConstantCritic {
    fn value_grad(&self, _z: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        self.0
    }
}

/// Critic given by a closure.
pub struct FnCritic<F>(pub Arc<F>);

impl<F> FnCritic<F> {
    pub fn new(f: F) -> Self {
        FnCritic(Arc::new(f))
    }
}

impl<F> Clone for FnCritic<F> {
    fn clone(&self) -> Self {
        FnCritic(self.0.clone())
    }
}

pub struct FnCriticAt<F, X> {
    f: Arc<F>,
    x: X,
}

impl<X: Clone + Send + Sync, Z, F: Fn(&X, &Z) -> f64 + Send + Sync> Critic<X, Z> for FnCritic<F> {
    type At = FnCriticAt<F, X>;
    fn at(&self, x: &X) -> Self::At {
        FnCriticAt { f: self.0.clone(), x: x.clone() }
    }
}

impl<X, Z, F: Fn(&X, &Z) -> f64> CriticAt<Z> for FnCriticAt<F, X> {
    fn value(&self, z: &Z) -> f64 {
        (self.f)(&self.x, z)
    }
}

/// Critic on finite alphabets, a row-major `nx × nz` table.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticTable {
    pub nx: usize,
    pub nz: usize,
    pub values: Vec<f64>,
}

impl CriticTable {
    pub fn new(nx: usize, nz: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != nx * nz {
            return Err(Error::Dimension { expected: nx * nz, got: values.len() });
        }
        Ok(CriticTable { nx, nz, values })
    }

    pub fn get(&self, x: usize, z: usize) -> f64 {
        self.values[x * self.nz + z]
    }

    /// `T*(x, z) = log p(x, z) - log q(z|x)`, the critic that turns GIWAE
    /// into IWAE.
    pub fn optimal(model: &DiscreteJoint, q: &QTable) -> Self {
        let (nx, nz) = (model.nx(), model.nz());
        let values = (0..nx * nz).map(|k| model.p(k / nz, k % nz).ln() - q.log_q(k / nz, k % nz)).collect();
        CriticTable { nx, nz, values }
    }

    /// Applies `f` to every entry.
    pub fn map(&self, f: impl Fn(usize, usize, f64) -> f64) -> Self {
        let values = (0..self.nx * self.nz).map(|k| f(k / self.nz, k % self.nz, self.values[k])).collect();
        CriticTable { nx: self.nx, nz: self.nz, values }
    }
}

#[derive(Debug, Clone)]
pub struct TableRow(Vec<f64>);

impl Critic<usize, usize> for CriticTable {
    type At = TableRow;
    fn at(&self, x: &usize) -> TableRow {
        TableRow(self.values[x * self.nz..(x + 1) * self.nz].to_vec())
    }
    fn eval(&self, x: &usize, z: &usize) -> f64 {
        self.get(*x, *z)
    }
}

impl CriticAt<usize> for TableRow {
    fn value(&self, z: &usize) -> f64 {
        self.0[*z]
    }
}

/// `q(z|x)` on finite alphabets, stored as normalized log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub nx: usize,
    pub nz: usize,
    logq: Vec<f64>,
}

impl QTable {
    /// From row-major unnormalized weights; each row is normalized.
    pub fn from_weights(nx: usize, nz: usize, w: &[f64]) -> Result<Self> {
        if w.len() != nx * nz {
            return Err(Error::Dimension { expected: nx * nz, got: w.len() });
        }
        let mut logq = Vec::with_capacity(nx * nz);
        for x in 0..nx {
            let row = &w[x * nz..(x + 1) * nz];
            let s: f64 = row.iter().sum();
            if !(s > 0.0) || row.iter().any(|a| !(*a >= 0.0)) {
                return Err(Error::Parameter(format!("q row {x} is not a valid weight vector")));
            }
            logq.extend(row.iter().map(|a| (a / s).ln()));
        }
        Ok(QTable { nx, nz, logq })
    }

    pub fn uniform(nx: usize, nz: usize) -> Self {
        QTable { nx, nz, logq: vec![-(nz as f64).ln(); nx * nz] }
    }

    pub fn prior(model: &DiscreteJoint) -> Self {
        let (nx, nz) = (model.nx(), model.nz());
        let w: Vec<f64> = (0..nx * nz).map(|k| model.pz()[k % nz]).collect();
        QTable::from_weights(nx, nz, &w).expect("marginal is a valid row")
    }

    pub fn posterior(model: &DiscreteJoint) -> Self {
        QTable::from_weights(model.nx(), model.nz(), model.table()).expect("table rows are valid")
    }

    pub fn random(nx: usize, nz: usize, rng: &mut Stream) -> Self {
        use rand::Rng;
        let w: Vec<f64> = (0..nx * nz).map(|_| 0.05 + rng.random::<f64>()).collect();
        QTable::from_weights(nx, nz, &w).expect("positive weights")
    }

    pub fn log_q(&self, x: usize, z: usize) -> f64 {
        self.logq[x * self.nz + z]
    }

    pub fn q(&self, x: usize, z: usize) -> f64 {
        self.log_q(x, z).exp()
    }
}

impl Proposal<DiscreteJoint> for QTable {
    type At = Discrete;
    fn at(&self, _model: &DiscreteJoint, x: &usize) -> Discrete {
        Discrete::new(self.logq[x * self.nz..(x + 1) * self.nz].to_vec())
    }
}

/// `log q(z|x)` through any proposal.
pub fn q_log_density<M: JointModel, Q: Proposal<M>>(model: &M, q: &Q, x: &M::X, z: &M::Z) -> f64 {
    q.at(model, x).log_density(z)
}
