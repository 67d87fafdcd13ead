//! Energy-based MI bounds: MINE-DV, MINE-F, and the implicit BA bound (IBAL)
//! at the tilted posterior `π(z|x) ∝ q(z|x) e^{T(x,z)}`.
//!
//! IBAL evaluation is ordinary multi-sample AIS on an [`IbalTask`], whose base
//! is `q` and whose unnormalized target is `q·e^T`.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::ais::{Kernel, Schedule};
use crate::bounds::{ba_term, enumerate, BoundEstimate, Direction};
use crate::density::{FiniteSupport, GradLogDensity, LogDensity, Sample};
use crate::models::{Capabilities, DiscreteJoint, JointModel};
use crate::multisample::{run, Sides, Variant};
use crate::rng::{self, Stream};
use crate::stats::{logmeanexp, try_per_draw, Summary};
use crate::task::{Proposal, Task};
use crate::variational::{Critic, CriticAt, CriticGrad, CriticTable, QTable};
use crate::{Error, Result};

mod train;

pub use train::{train_bound, train_mine_ais, GiwaeSchedule, Mcmc, Objective, TrainConfig, TrainState};

/// `log q(z|x) + T(x, z)` at a fixed `x`.
#[derive(Debug, Clone)]
pub struct EnergyTarget<B, A> {
    pub base: B,
    pub critic: A,
}

impl<Z, B: LogDensity<Z>, A: CriticAt<Z>> LogDensity<Z> for EnergyTarget<B, A> {
    fn log_density(&self, z: &Z) -> f64 {
        self.base.log_density(z) + self.critic.value(z)
    }
}

impl<B: FiniteSupport, A: CriticAt<usize>> FiniteSupport for EnergyTarget<B, A> {
    fn support(&self) -> usize {
        self.base.support()
    }
}

impl<B: GradLogDensity, A: CriticAt<Vec<f64>> + CriticGrad> GradLogDensity for EnergyTarget<B, A> {
    fn log_density_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let lb = self.base.log_density_grad(z, grad);
        let mut gt = vec![0.0; z.len()];
        let t = self.critic.value_grad(z, &mut gt);
        for (g, a) in grad.iter_mut().zip(&gt) {
            *g += a;
        }
        lb + t
    }
}

/// The IBAL as a log-partition problem. The known term is
/// `log q(z|x) + T(x, z) - log p(z)`; "posterior" draws come from the model's
/// posterior, which is the tilted posterior only when the critic is optimal.
pub struct IbalTask<'a, M, Q, C> {
    pub model: &'a M,
    pub q: &'a Q,
    pub critic: &'a C,
}

impl<'a, M, Q, C> IbalTask<'a, M, Q, C> {
    pub fn new(model: &'a M, q: &'a Q, critic: &'a C) -> Self {
        IbalTask { model, q, critic }
    }
}

impl<'a, M, Q, C> Task for IbalTask<'a, M, Q, C>
where
    M: JointModel,
    Q: Proposal<M>,
    Q::At: Clone,
    C: Critic<M::X, M::Z>,
{
    type X = M::X;
    type Z = M::Z;
    type Base = Q::At;
    type Target = EnergyTarget<Q::At, C::At>;

    fn draw(&self, rng: &mut Stream) -> Result<(M::X, M::Z)> {
        self.model.sample_joint(rng)
    }

    fn base(&self, x: &M::X) -> Q::At {
        self.q.at(self.model, x)
    }

    fn target(&self, x: &M::X) -> Self::Target {
        EnergyTarget { base: self.q.at(self.model, x), critic: self.critic.at(x) }
    }

    fn known(&self, x: &M::X, z: &M::Z) -> f64 {
        self.q.at(self.model, x).log_density(z) + self.critic.eval(x, z) - self.log_prior(z)
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

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum IbalMode {
    /// IM-AIS lower bound on `log Z`: an upper bound on the IBAL.
    Upper,
    /// CR-AIS chains started at model posterior draws: exact only for the
    /// optimal critic.
    ApproxLower,
}

impl fmt::Display for IbalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IbalMode::Upper => "upper",
            IbalMode::ApproxLower => "approx-lower",
        })
    }
}

impl FromStr for IbalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "upper" => Ok(IbalMode::Upper),
            "approx-lower" | "lower" => Ok(IbalMode::ApproxLower),
            _ => Err(Error::Config(format!("unknown IBAL mode '{s}' (expected upper or approx-lower)"))),
        }
    }
}

/// IBAL through multi-sample AIS from `q` to `q·e^T`.
#[allow(clippy::too_many_arguments)]
pub fn eval_ibal_ais<M, Q, C, K>(
    model: &M,
    q: &Q,
    critic: &C,
    sched: &Schedule,
    kernel: &K,
    k: usize,
    n: usize,
    seed: u64,
    mode: IbalMode,
) -> Result<BoundEstimate>
where
    M: JointModel,
    Q: Proposal<M>,
    Q::At: Clone,
    C: Critic<M::X, M::Z>,
    K: Kernel<Q::At, EnergyTarget<Q::At, C::At>, M::Z>,
{
    let task = IbalTask::new(model, q, critic);
    Ok(match mode {
        IbalMode::Upper => run(&task, Variant::Im, sched, kernel, k, n, seed, Sides::Lower)?
            .upper_mi
            .expect("lower side requested")
            .renamed("ibal_upper"),
        IbalMode::ApproxLower => {
            let mut b = run(&task, Variant::Cr, sched, kernel, k, n, seed, Sides::Upper)?
                .lower_mi
                .expect("upper side requested")
                .renamed("ibal_approx_lower");
            b.approximate = true;
            b
        }
    })
}

/// Exact IBAL on a discrete model.
pub fn ibal_value_exact(model: &DiscreteJoint, q: &QTable, critic: &CriticTable) -> Result<f64> {
    enumerate::ibal(model, q, critic)
}

struct MineDraw {
    ba: f64,
    pos: f64,
    neg: f64,
}

fn mine_draws<T, C>(task: &T, critic: &C, n: usize, seed: u64) -> Result<Vec<MineDraw>>
where
    T: Task,
    C: Critic<T::X, T::Z>,
{
    try_per_draw(n, |i| {
        let (x, z) = task.draw(&mut rng::joint(seed, i))?;
        let base = task.base(&x);
        let zn = base.sample(&mut rng::slot(seed, i, 0));
        let at = critic.at(&x);
        Ok(MineDraw { ba: ba_term(task, &base, &z), pos: at.value(&z), neg: at.value(&zn) })
    })
}

/// Generalized MINE-DV: `BA + mean T(x, z) - log mean e^{T(x, z')}` with
/// `z' ~ q(·|x)`. The log-mean is across draws, so the standard error comes
/// from the delta method.
pub fn mine_dv<T, C>(task: &T, critic: &C, n: usize, seed: u64) -> Result<BoundEstimate>
where
    T: Task,
    C: Critic<T::X, T::Z>,
{
    let d = mine_draws(task, critic, n, seed)?;
    if d.is_empty() {
        return Err(Error::Degenerate("mine_dv needs at least one draw".into()));
    }
    // Shift by the first negative so a constant critic contributes exactly 0.
    let r = d[0].neg;
    let ba: Vec<f64> = d.iter().map(|m| m.ba).collect();
    let tp: Vec<f64> = d.iter().map(|m| m.pos - r).collect();
    let tn: Vec<f64> = d.iter().map(|m| m.neg - r).collect();
    let lme = logmeanexp(&tn);
    if !lme.is_finite() {
        return Err(Error::Degenerate("mine_dv: log-partition estimate is not finite".into()));
    }
    let value = Summary::of(&ba).mean + (Summary::of(&tp).mean - lme);
    let influence: Vec<f64> = d.iter().zip(&tn).map(|(m, t)| m.ba + m.pos - (t - lme).exp()).collect();
    let mut b = BoundEstimate::from_draws("mine_dv", Direction::LowerMi, influence, 1, 0, seed)?;
    b.value = value;
    Ok(b)
}

/// Generalized MINE-F: per-draw `BA + T(x, z) - e^{T(x, z')} + 1`.
pub fn mine_f<T, C>(task: &T, critic: &C, n: usize, seed: u64) -> Result<BoundEstimate>
where
    T: Task,
    C: Critic<T::X, T::Z>,
{
    let d = mine_draws(task, critic, n, seed)?;
    let v = d.iter().map(|m| m.ba + ((m.pos - m.neg.exp()) + 1.0)).collect();
    BoundEstimate::from_draws("mine_f", Direction::LowerMi, v, 1, 0, seed)
}
