//! Joint distributions `p(z) p(x|z)` consumed by every estimator.

use std::fmt::Debug;

use bitflags::bitflags;

use crate::density::{LogDensity, Sample};
use crate::rng::{self, Stream};
use crate::{Error, Result};

mod discrete;
mod linear;
mod mixture;

pub use discrete::DiscreteJoint;
pub use linear::LinearGaussianVae;
pub use mixture::{GaussianMixture, GaussianMixturePosteriorModel};

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub struct Capabilities: u32 {
        const SAMPLE_JOINT = 1;
        const LOGP_PRIOR = 1 << 1;
        const LOGP_LIKELIHOOD = 1 << 2;
        const EXACT_POSTERIOR_SAMPLE = 1 << 3;
        const ANALYTIC_MI = 1 << 4;
        const ENUMERABLE = 1 << 5;
    }
}

pub trait JointModel: Send + Sync {
    type X: Clone + Send + Sync + Debug;
    type Z: Clone + Send + Sync + Debug;
    type Prior: LogDensity<Self::Z> + Sample<Self::Z> + Clone + Send + Sync;
    /// `z ↦ log p(x, z)` at a fixed `x`; normalizes to `p(x)`.
    type Target: LogDensity<Self::Z> + Send + Sync;
    type Posterior: LogDensity<Self::Z> + Sample<Self::Z> + Send + Sync;

    fn latent_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn capabilities(&self) -> Capabilities;

    fn prior(&self) -> Self::Prior;
    fn log_prior(&self, z: &Self::Z) -> f64;
    fn log_likelihood(&self, x: &Self::X, z: &Self::Z) -> f64;
    fn sample_obs(&self, z: &Self::Z, rng: &mut Stream) -> Self::X;
    fn target(&self, x: &Self::X) -> Self::Target;
    fn posterior(&self, x: &Self::X) -> Result<Self::Posterior>;
    fn analytic_mi(&self) -> Result<f64>;

    /// Rejects out-of-support or non-finite inputs.
    fn check(&self, _x: Option<&Self::X>, _z: Option<&Self::Z>) -> Result<()> {
        Ok(())
    }

    fn log_joint(&self, x: &Self::X, z: &Self::Z) -> f64 {
        self.log_prior(z) + self.log_likelihood(x, z)
    }

    fn sample_joint(&self, rng: &mut Stream) -> Result<(Self::X, Self::Z)> {
        self.require(Capabilities::SAMPLE_JOINT, "joint sampling")?;
        let z = self.prior().sample(rng);
        let x = self.sample_obs(&z, rng);
        Ok((x, z))
    }

    fn sample_posterior(&self, x: &Self::X, rng: &mut Stream) -> Result<Self::Z> {
        self.require(Capabilities::EXACT_POSTERIOR_SAMPLE, "exact posterior sampling")?;
        Ok(self.posterior(x)?.sample(rng))
    }

    fn require(&self, cap: Capabilities, what: &str) -> Result<()> {
        if self.capabilities().contains(cap) {
            Ok(())
        } else {
            Err(Error::Unsupported(what.to_string()))
        }
    }
}

/// `n` i.i.d. joint draws; draw `i` comes from its own derived stream.
pub fn sample_joint<M: JointModel>(model: &M, n: usize, seed: u64) -> Result<Vec<(M::X, M::Z)>> {
    (0..n as u64)
        .map(|i| model.sample_joint(&mut rng::joint(seed, i)))
        .collect()
}

/// `n` exact posterior draws at `x`.
pub fn sample_posterior<M: JointModel>(model: &M, x: &M::X, n: usize, seed: u64) -> Result<Vec<M::Z>> {
    model.check(Some(x), None)?;
    (0..n as u64)
        .map(|i| model.sample_posterior(x, &mut rng::stream(seed, i, rng::AUX)))
        .collect()
}

pub(crate) fn check_vec(v: &[f64], dim: usize, what: &str) -> Result<()> {
    if v.len() != dim {
        return Err(Error::Dimension { expected: dim, got: v.len() });
    }
    if v.iter().any(|a| !a.is_finite()) {
        return Err(Error::Domain(what.to_string()));
    }
    Ok(())
}
