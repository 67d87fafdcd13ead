//! The per-observation problem every estimator consumes.
//!
//! A task supplies joint draws `(x, z)`, a sampleable normalized base `q(·|x)`,
//! an unnormalized target whose normalizer is the quantity being bounded, and
//! a "known" term. Each MI-style realization is `known(x, z) - log Ẑ(x)`.

use crate::density::{LogDensity, Sample};
use crate::models::{Capabilities, JointModel};
use crate::rng::Stream;
use crate::Result;

pub trait Task: Sync {
    type X: Send + Sync;
    type Z: Clone + Send + Sync;
    type Base: LogDensity<Self::Z> + Sample<Self::Z> + Send + Sync;
    type Target: LogDensity<Self::Z> + Send + Sync;

    fn draw(&self, rng: &mut Stream) -> Result<(Self::X, Self::Z)>;
    fn base(&self, x: &Self::X) -> Self::Base;
    fn target(&self, x: &Self::X) -> Self::Target;
    /// The term each MI-style realization subtracts `log Ẑ(x)` from, evaluated
    /// at a joint draw.
    fn known(&self, x: &Self::X, z: &Self::Z) -> f64;
    /// `log p(z)` under the model prior.
    fn log_prior(&self, z: &Self::Z) -> f64;
    /// Extra draws from the distribution `z` is jointly drawn from.
    fn sample_posterior(&self, x: &Self::X, rng: &mut Stream) -> Result<Self::Z>;
    fn capabilities(&self) -> Capabilities;
}

/// A variational conditional `q(z|x)` for model `M`.
pub trait Proposal<M: JointModel>: Send + Sync {
    type At: LogDensity<M::Z> + Sample<M::Z> + Send + Sync;
    fn at(&self, model: &M, x: &M::X) -> Self::At;
}

/// `q(z|x) = p(z)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PriorProposal;

impl<M: JointModel> Proposal<M> for PriorProposal {
    type At = M::Prior;
    fn at(&self, model: &M, _x: &M::X) -> M::Prior {
        model.prior()
    }
}

/// `q(z|x) = p(z|x)`; panics on models without a closed-form posterior.
#[derive(Debug, Clone, Copy, Default)]
pub struct PosteriorProposal;

impl<M: JointModel> Proposal<M> for PosteriorProposal {
    type At = M::Posterior;
    fn at(&self, model: &M, x: &M::X) -> M::Posterior {
        model.posterior(x).expect("model has a closed-form posterior")
    }
}

/// MI estimation: target is `p(x, ·)`, known term is `log p(x|z)`.
pub struct MiTask<'a, M, Q> {
    pub model: &'a M,
    pub q: &'a Q,
}

impl<'a, M, Q> MiTask<'a, M, Q> {
    pub fn new(model: &'a M, q: &'a Q) -> Self {
        MiTask { model, q }
    }
}

impl<'a, M: JointModel, Q: Proposal<M>> Task for MiTask<'a, M, Q> {
    type X = M::X;
    type Z = M::Z;
    type Base = Q::At;
    type Target = M::Target;

    fn draw(&self, rng: &mut Stream) -> Result<(M::X, M::Z)> {
        self.model.sample_joint(rng)
    }

    fn base(&self, x: &M::X) -> Q::At {
        self.q.at(self.model, x)
    }

    fn target(&self, x: &M::X) -> M::Target {
        self.model.target(x)
    }

    fn known(&self, x: &M::X, z: &M::Z) -> f64 {
        self.model.log_likelihood(x, z)
    }

    fn log_prior(&self, z: &M::Z) -> f64 {
        self.model.prior().log_density(z)
    }

    fn sample_posterior(&self, x: &M::X, rng: &mut Stream) -> Result<M::Z> {
        self.model.sample_posterior(x, rng)
    }

    fn capabilities(&self) -> Capabilities {
        self.model.capabilities()
    }
}
