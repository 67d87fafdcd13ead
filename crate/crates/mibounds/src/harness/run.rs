//! Building models, proposals, critics and kernels from a config, and
//! running estimator rows, sweeps and decompositions.

use std::time::Instant;

use serde::Serialize;

use super::config::{AnnealSpec, CriticSpec, EstimatorSpec, ExperimentConfig, ModelSpec, ProposalSpec, StepSize};
use super::report::{Columns, ReportRow, RunReport};
use crate::ais::{adapt_step_size, ChainStats, ExactDiscrete, Hmc, Kernel, Metropolis, Perfect, Schedule};
use crate::bounds::{self, enumerate, BoundEstimate, DecomposedBound, EstimatorId};
use crate::density::{DiagGaussian, FiniteSupport, Gaussian, GaussianForm, GradLogDensity, Natural, Sample};
use crate::energy::{self, train_bound, EnergyTarget, Objective, TrainConfig};
use crate::models::{DiscreteJoint, GaussianMixture, GaussianMixturePosteriorModel, JointModel, LinearGaussianVae};
use crate::multisample::{self, MultiEstimate, Sides, Variant};
use crate::rng::{self, Stream};
use crate::task::{MiTask, PosteriorProposal, PriorProposal, Proposal};
use crate::variational::{
    Checkpoint, ConditionalGaussian, ConstantCritic, Critic, CriticAt, CriticGrad, CriticTable, MlpCritic, MlpCriticAt, QTable,
};
use crate::{Error, Result};

/// Purpose id for harness-level streams (pilot draws, adaptation).
const PILOT: u64 = rng::AUX + 11;

pub enum Model {
    Linear(LinearGaussianVae),
    Mixture(GaussianMixturePosteriorModel),
    Discrete(DiscreteJoint),
    Bridge { base: DiagGaussian, target: Gaussian },
}

impl Model {
    pub fn build(spec: &ModelSpec) -> Result<Model> {
        Ok(match spec {
            ModelSpec::LinearVae { latent_dim, obs_dim, obs_std, seed } => {
                Model::Linear(LinearGaussianVae::random(*latent_dim, *obs_dim, *seed, *obs_std)?)
            }
            ModelSpec::Mixture { sep, mode_std, obs_dim, obs_std } => {
                Model::Mixture(GaussianMixturePosteriorModel::bimodal(*sep, *mode_std, *obs_dim, *obs_std)?)
            }
            ModelSpec::Discrete { nx, nz, alpha, seed } => {
                Model::Discrete(DiscreteJoint::random(*nx, *nz, *alpha, &mut rng::stream(*seed, 0, rng::AUX))?)
            }
            ModelSpec::GaussianBridge { dim, shift } => Model::Bridge {
                base: DiagGaussian::standard(*dim),
                target: Gaussian::from_precision(vec![*shift; *dim], &nalgebra::DMatrix::identity(*dim, *dim), 0.0)
                    .ok_or_else(|| Error::Parameter("gaussian bridge target".into()))?,
            },
        })
    }

    /// Short label for report rows.
    pub fn label(spec: &ModelSpec) -> String {
        match spec {
            ModelSpec::LinearVae { latent_dim, obs_dim, obs_std, seed } => {
                format!("linear_vae(latent={latent_dim},obs={obs_dim},obs_std={obs_std},seed={seed})")
            }
            ModelSpec::Mixture { sep, mode_std, obs_dim, obs_std } => {
                format!("mixture(sep={sep},mode_std={mode_std},obs={obs_dim},obs_std={obs_std})")
            }
            ModelSpec::Discrete { nx, nz, alpha, seed } => format!("discrete(nx={nx},nz={nz},alpha={alpha},seed={seed})"),
            ModelSpec::GaussianBridge { dim, shift } => format!("gaussian_bridge(dim={dim},shift={shift})"),
        }
    }

    /// Exact MI when it is available in closed form or by enumeration.
    pub fn reference_mi(&self) -> Option<f64> {
        match self {
            Model::Linear(m) => m.analytic_mi().ok(),
            Model::Mixture(m) => m.analytic_mi().ok(),
            Model::Discrete(m) => Some(enumerate::mi(m)),
            Model::Bridge { .. } => None,
        }
    }
}

pub enum Prop {
    Prior,
    Posterior,
    Encoder(ConditionalGaussian),
    Table(QTable),
}

impl Prop {
    pub fn build(spec: &ProposalSpec, model: &Model) -> Result<Prop> {
        Ok(match (spec, model) {
            (ProposalSpec::Prior, Model::Discrete(m)) => Prop::Table(QTable::prior(m)),
            (ProposalSpec::Posterior, Model::Discrete(m)) => Prop::Table(QTable::posterior(m)),
            (ProposalSpec::Random { seed }, Model::Discrete(m)) => {
                Prop::Table(QTable::random(m.nx(), m.nz(), &mut rng::stream(*seed, 0, rng::AUX + 1)))
            }
            (ProposalSpec::Prior, _) => Prop::Prior,
            (ProposalSpec::Posterior, _) => Prop::Posterior,
            (ProposalSpec::Encoder { path }, Model::Linear(_) | Model::Mixture(_)) => Prop::Encoder(Checkpoint::load(path)?.encoder()?),
            (s, _) => return Err(Error::Config(format!("proposal {s:?} does not fit this model"))),
        })
    }
}

/// Densities that may or may not be Gaussian in `z`.
pub trait MaybeGaussian {
    fn natural_form(&self) -> Option<Natural>;
}

impl MaybeGaussian for DiagGaussian {
    fn natural_form(&self) -> Option<Natural> {
        Some(self.natural())
    }
}

impl MaybeGaussian for Gaussian {
    fn natural_form(&self) -> Option<Natural> {
        Some(self.natural())
    }
}

impl MaybeGaussian for GaussianMixture {
    fn natural_form(&self) -> Option<Natural> {
        None
    }
}

impl<B, A> MaybeGaussian for EnergyTarget<B, A> {
    fn natural_form(&self) -> Option<Natural> {
        None
    }
}

struct Nat(Natural);

impl GaussianForm for Nat {
    fn natural(&self) -> Natural {
        self.0.clone()
    }
}

/// Kernels on continuous latents.
#[derive(Debug, Clone)]
pub enum ContKernel {
    Hmc(Hmc),
    /// Only valid when both endpoints are Gaussian; checked on construction.
    Perfect,
}

impl<B, T> Kernel<B, T, Vec<f64>> for ContKernel
where
    B: GradLogDensity + MaybeGaussian + Sync,
    T: GradLogDensity + MaybeGaussian + Sync,
{
    fn step(&self, base: &B, target: &T, beta: f64, z: &mut Vec<f64>, rng: &mut Stream, stats: &mut ChainStats) {
        match self {
            ContKernel::Hmc(h) => h.step(base, target, beta, z, rng, stats),
            ContKernel::Perfect => {
                let (Some(a), Some(b)) = (base.natural_form(), target.natural_form()) else {
                    panic!("perfect transitions need Gaussian endpoints");
                };
                Perfect.step(&Nat(a), &Nat(b), beta, z, rng, stats)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum DiscKernel {
    Metropolis,
    Exact,
}

impl<B: FiniteSupport + Sync, T: FiniteSupport + Sync> Kernel<B, T, usize> for DiscKernel {
    fn step(&self, base: &B, target: &T, beta: f64, z: &mut usize, rng: &mut Stream, stats: &mut ChainStats) {
        match self {
            DiscKernel::Metropolis => Metropolis.step(base, target, beta, z, rng, stats),
            DiscKernel::Exact => ExactDiscrete.step(base, target, beta, z, rng, stats),
        }
    }
}

/// Critics on continuous models.
#[derive(Debug, Clone)]
pub enum ContCritic {
    Constant(ConstantCritic),
    Mlp(MlpCritic),
}

pub enum ContCriticAt {
    Constant(ConstantCritic),
    Mlp(MlpCriticAt),
}

impl Critic<Vec<f64>, Vec<f64>> for ContCritic {
    type At = ContCriticAt;
    fn at(&self, x: &Vec<f64>) -> ContCriticAt {
        match self {
            ContCritic::Constant(c) => ContCriticAt::Constant(*c),
            ContCritic::Mlp(c) => ContCriticAt::Mlp(c.at(x)),
        }
    }
}

impl CriticAt<Vec<f64>> for ContCriticAt {
    fn value(&self, z: &Vec<f64>) -> f64 {
        match self {
            ContCriticAt::Constant(c) => c.0,
            ContCriticAt::Mlp(c) => c.value(z),
        }
    }
}

impl CriticGrad for ContCriticAt {
    fn value_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        match self {
            ContCriticAt::Constant(c) => c.value_grad(z, grad),
            ContCriticAt::Mlp(c) => c.value_grad(z, grad),
        }
    }
}

/// HMC with a fixed step or with sizes adapted on one pilot observation.
pub fn hmc_for<B, T>(base: &B, target: &T, a: &AnnealSpec, seed: u64) -> Hmc
where
    B: GradLogDensity + Sample<Vec<f64>>,
    T: GradLogDensity,
{
    match a.step_size {
        StepSize::Fixed(e) => Hmc::fixed(a.leapfrog, e),
        StepSize::Auto(_) => {
            let ad = adapt_step_size(a.leapfrog, base, target, 20, 0.05, 0.65, 100, 20, &mut rng::stream(seed, 1, PILOT));
            Hmc { leapfrog: a.leapfrog, step: ad.step }
        }
    }
}

fn cont_kernel<M, Q>(model: &M, q: &Q, a: &AnnealSpec, seed: u64) -> Result<ContKernel>
where
    M: JointModel<X = Vec<f64>, Z = Vec<f64>>,
    Q: Proposal<M>,
    Q::At: GradLogDensity + MaybeGaussian,
    M::Target: GradLogDensity + MaybeGaussian,
{
    let (x, _) = model.sample_joint(&mut rng::stream(seed, 0, PILOT))?;
    let base = q.at(model, &x);
    let target = model.target(&x);
    match a.kernel.as_deref().unwrap_or("hmc") {
        "hmc" => Ok(ContKernel::Hmc(hmc_for(&base, &target, a, seed))),
        "perfect" if base.natural_form().is_some() && target.natural_form().is_some() => Ok(ContKernel::Perfect),
        "perfect" => Err(Error::Unsupported("perfect transitions need a Gaussian base and target".into())),
        k => Err(Error::Unsupported(format!("kernel {k} needs a discrete model"))),
    }
}

fn disc_kernel(a: &AnnealSpec) -> Result<DiscKernel> {
    match a.kernel.as_deref().unwrap_or("metropolis") {
        "metropolis" => Ok(DiscKernel::Metropolis),
        "exact" => Ok(DiscKernel::Exact),
        k => Err(Error::Unsupported(format!("kernel {k} needs a continuous model"))),
    }
}

fn cont_critic<M>(model: &M, q: Option<&ConditionalGaussian>, spec: &CriticSpec) -> Result<ContCritic>
where
    M: JointModel<X = Vec<f64>, Z = Vec<f64>>,
{
    Ok(match spec {
        CriticSpec::Constant { value } => ContCritic::Constant(ConstantCritic(*value)),
        CriticSpec::Optimal => return Err(Error::Unsupported("closed-form optimal critics exist only for discrete models".into())),
        CriticSpec::Checkpoint { path } => ContCritic::Mlp(Checkpoint::load(path)?.critic()?),
        CriticSpec::Train { objective, hidden, steps, batch, lr, k, seed } => {
            let objective: Objective = objective.parse()?;
            let q = match (q, objective) {
                (Some(q), _) => q.clone(),
                (None, Objective::Infonce) => ConditionalGaussian::standard(model.obs_dim(), model.latent_dim()),
                (None, _) => {
                    return Err(Error::Unsupported(
                        "critic training needs a Gaussian proposal (prior on linear_vae, or an encoder)".into(),
                    ))
                }
            };
            let critic = MlpCritic::new(model.obs_dim(), model.latent_dim(), hidden, *seed);
            let cfg = TrainConfig { objective, k: *k, steps: *steps, batch: *batch, lr: *lr, seed: *seed, ..Default::default() };
            ContCritic::Mlp(train_bound(model, q, critic, &cfg)?.critic)
        }
    })
}

fn disc_critic(model: &DiscreteJoint, q: &QTable, spec: &CriticSpec) -> Result<CriticTable> {
    match spec {
        CriticSpec::Constant { value } => CriticTable::new(model.nx(), model.nz(), vec![*value; model.nx() * model.nz()]),
        CriticSpec::Optimal => Ok(CriticTable::optimal(model, q)),
        _ => Err(Error::Unsupported("discrete models take constant or optimal critics".into())),
    }
}

/// One grid cell of an estimator spec.
#[derive(Debug, Clone, Copy)]
struct Cell {
    id: EstimatorId,
    k: usize,
    t: usize,
    n: usize,
    seed: u64,
}

type Out = Vec<(BoundEstimate, Option<ChainStats>)>;

fn static_cell<M, Q, C>(model: &M, q: &Q, critic: Option<&C>, c: Cell) -> Result<Out>
where
    M: JointModel,
    Q: Proposal<M>,
    C: Critic<M::X, M::Z>,
{
    let task = MiTask::new(model, q);
    let prior = MiTask::new(model, &PriorProposal);
    let need = || critic.ok_or_else(|| Error::Config(format!("{} needs a critic", c.id)));
    let one = |b: BoundEstimate| vec![(b, None)];
    let (k, n, seed) = (c.k, c.n, c.seed);
    Ok(match c.id {
        EstimatorId::BaLower => one(bounds::ba_lower(&task, n, seed)?),
        EstimatorId::BaUpper => one(bounds::ba_upper(&task, n, seed)?),
        EstimatorId::IwaeLower => one(bounds::iwae_lower_mi(&task, k, n, seed)?.0),
        EstimatorId::IwaeUpper => one(bounds::iwae_upper_mi(&task, k, n, seed)?),
        EstimatorId::Giwae => one(bounds::giwae_lower(&task, need()?, k, n, seed)?.0),
        EstimatorId::Infonce => one(bounds::giwae_lower(&prior, need()?, k, n, seed)?.0.renamed("infonce")),
        EstimatorId::SInfonce => one(bounds::iwae_lower_mi(&prior, k, n, seed)?.0.renamed("s_infonce")),
        EstimatorId::Riwae => {
            let p = bounds::riwae_bounds(&task, k, n, seed)?;
            vec![(p.lower_mi, None), (p.upper_mi, None)]
        }
        EstimatorId::MineDv => one(energy::mine_dv(&task, need()?, n, seed)?),
        EstimatorId::MineF => one(energy::mine_f(&task, need()?, n, seed)?),
        id => return Err(Error::Config(format!("{id} is annealed"))),
    })
}

fn mi_rows(e: MultiEstimate) -> Out {
    [e.upper_mi, e.lower_mi].into_iter().flatten().map(|b| (b, Some(e.stats))).collect()
}

fn annealed_cell<M, Q, K>(model: &M, q: &Q, kernel: &K, sched: &Schedule, c: Cell) -> Result<Out>
where
    M: JointModel,
    Q: Proposal<M>,
    K: Kernel<Q::At, M::Target, M::Z>,
{
    let task = MiTask::new(model, q);
    let (k, n, seed) = (c.k, c.n, c.seed);
    let e = match c.id {
        EstimatorId::Ais => multisample::ais(&task, sched, kernel, n, seed)?,
        EstimatorId::ImAis => multisample::im_ais(&task, sched, kernel, k, n, seed)?,
        EstimatorId::IrAis => multisample::ir_ais(&task, sched, kernel, k, n, seed)?,
        EstimatorId::CrAis => multisample::cr_ais(&task, sched, kernel, k, n, seed)?,
        EstimatorId::Bdmc => multisample::bdmc(&task, sched, kernel, k, n, seed)?,
        id => return Err(Error::Config(format!("{id} is not annealed"))),
    };
    Ok(mi_rows(e))
}

struct RowCtx<'a> {
    cfg: &'a ExperimentConfig,
    label: String,
    reference: Option<f64>,
}

impl RowCtx<'_> {
    fn rows(&self, spec: &EstimatorSpec, cell: Cell, r: Result<Out>) -> Vec<ReportRow> {
        let t = if cell.id.annealed() { cell.t } else { 0 };
        let th = self.cfg.tight_threshold;
        match r {
            Ok(out) => out.iter().map(|(b, s)| ReportRow::estimate(b, &self.label, s.as_ref(), self.reference, th)).collect(),
            Err(Error::Unsupported(why)) => vec![ReportRow::skipped(&spec.id, &self.label, cell.k, t, cell.n, cell.seed, why)],
            Err(e) => vec![ReportRow::failed(&spec.id, &self.label, cell.k, t, cell.n, cell.seed, e.to_string())],
        }
    }

    fn cells(&self, spec: &EstimatorSpec) -> Result<Vec<Cell>> {
        let id: EstimatorId = spec.id.parse()?;
        let ts = if id.annealed() { spec.t.values() } else { vec![0] };
        let n = spec.n.unwrap_or(self.cfg.n);
        Ok(spec.k.values().iter().flat_map(|&k| ts.iter().map(move |&t| Cell { id, k, t, n, seed: self.cfg.seed })).collect())
    }

    /// Rows for one spec, given builders for its critic and kernel.
    fn spec_rows<C, K>(
        &self,
        spec: &EstimatorSpec,
        critic: impl FnOnce(&CriticSpec) -> Result<C>,
        kernel: impl FnOnce(&AnnealSpec) -> Result<K>,
        run_static: impl Fn(Option<&C>, Cell) -> Result<Out>,
        run_annealed: impl Fn(&K, &Schedule, Cell) -> Result<Out>,
    ) -> Vec<ReportRow> {
        let cells = match self.cells(spec) {
            Ok(c) => c,
            Err(e) => return vec![ReportRow::failed(&spec.id, &self.label, 0, 0, 0, self.cfg.seed, e.to_string())],
        };
        let fail_all = |e: Error| cells.iter().flat_map(|c| self.rows(spec, *c, Err(clone_err(&e)))).collect::<Vec<_>>();
        let critic = match spec.critic.as_ref().map(critic).transpose() {
            Ok(c) => c,
            Err(e) => return fail_all(e),
        };
        let annealed = cells.first().is_some_and(|c| c.id.annealed());
        if !annealed {
            return cells.iter().flat_map(|c| self.rows(spec, *c, run_static(critic.as_ref(), *c))).collect();
        }
        let kernel = match kernel(&spec.anneal()) {
            Ok(k) => k,
            Err(e) => return fail_all(e),
        };
        let kind = match spec.anneal().schedule_kind() {
            Ok(k) => k,
            Err(e) => return fail_all(e),
        };
        cells
            .iter()
            .flat_map(|c| {
                let r = Schedule::new(kind, c.t).and_then(|s| run_annealed(&kernel, &s, *c));
                self.rows(spec, *c, r)
            })
            .collect()
    }
}

fn clone_err(e: &Error) -> Error {
    match e {
        Error::Unsupported(s) => Error::Unsupported(s.clone()),
        e => Error::Config(e.to_string()),
    }
}

fn cont_rows<M, Q>(ctx: &RowCtx, model: &M, q: &Q, gq: Option<&ConditionalGaussian>) -> Vec<ReportRow>
where
    M: JointModel<X = Vec<f64>, Z = Vec<f64>>,
    Q: Proposal<M>,
    Q::At: GradLogDensity + MaybeGaussian,
    M::Target: GradLogDensity + MaybeGaussian,
{
    let seed = ctx.cfg.seed;
    ctx.cfg
        .estimators
        .iter()
        .flat_map(|spec| {
            ctx.spec_rows(
                spec,
                |c| cont_critic(model, gq, c),
                |a| cont_kernel(model, q, a, seed),
                |c, cell| static_cell(model, q, c, cell),
                |k, s, cell| annealed_cell(model, q, k, s, cell),
            )
        })
        .collect()
}

fn disc_rows(ctx: &RowCtx, model: &DiscreteJoint, q: &QTable) -> Vec<ReportRow> {
    ctx.cfg
        .estimators
        .iter()
        .flat_map(|spec| {
            ctx.spec_rows(
                spec,
                |c| disc_critic(model, q, c),
                disc_kernel,
                |c, cell| static_cell(model, q, c, cell),
                |k, s, cell| annealed_cell(model, q, k, s, cell),
            )
        })
        .collect()
}

/// Runs `f` on a pool of `workers` threads (the global pool if `None`).
pub fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match workers {
        None => Ok(f()),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(w).build().map_err(|e| Error::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// One row per (estimator, K, T) and bound direction. Rows that cannot run on
/// the model are `SKIPPED`; rows that fail are `FAILED`; neither stops the run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let model = Model::build(&cfg.model)?;
    let prop = Prop::build(&cfg.proposal, &model)?;
    let ctx = RowCtx { cfg, label: Model::label(&cfg.model), reference: model.reference_mi() };
    let rows = with_workers(cfg.workers, || match (&model, &prop) {
        (Model::Linear(m), Prop::Prior) => {
            let q = ConditionalGaussian::standard(m.obs_dim(), m.latent_dim());
            cont_rows(&ctx, m, &PriorProposal, Some(&q))
        }
        (Model::Linear(m), Prop::Posterior) => cont_rows(&ctx, m, &PosteriorProposal, None),
        (Model::Linear(m), Prop::Encoder(q)) => cont_rows(&ctx, m, q, Some(q)),
        (Model::Mixture(m), Prop::Prior) => cont_rows(&ctx, m, &PriorProposal, None),
        (Model::Mixture(m), Prop::Posterior) => cont_rows(&ctx, m, &PosteriorProposal, None),
        (Model::Mixture(m), Prop::Encoder(q)) => cont_rows(&ctx, m, q, Some(q)),
        (Model::Discrete(m), Prop::Table(q)) => disc_rows(&ctx, m, q),
        _ => Vec::new(),
    })?;
    Ok(RunReport::new(cfg.clone(), rows, start.elapsed().as_secs_f64()))
}

/// Sandwich gap of one variant at one `(T, K)`. `lower` and `upper` are MI
/// bounds (log-partition bounds for the Gaussian bridge), computed on the
/// same outer draws.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub variant: String,
    pub lower: f64,
    pub upper: f64,
    pub gap: f64,
    pub gap_std_error: f64,
}

impl Columns for SweepRow {
    const COLUMNS: &'static [&'static str] = &["T", "K", "variant", "lower", "upper", "gap", "gap_std_error"];
}

fn paired(variant: &str, t: usize, k: usize, lower: &BoundEstimate, upper: &BoundEstimate) -> SweepRow {
    let d: Vec<f64> = upper.draws.iter().zip(&lower.draws).map(|(u, l)| u - l).collect();
    let s = crate::stats::Summary::of(&d);
    SweepRow { t, k, variant: variant.to_string(), lower: lower.value, upper: upper.value, gap: s.mean, gap_std_error: s.std_error }
}

fn sweep_cell<M, Q, K>(model: &M, q: &Q, kernel: &K, variant: &str, sched: &Schedule, k: usize, n: usize, seed: u64) -> Result<SweepRow>
where
    M: JointModel,
    Q: Proposal<M>,
    K: Kernel<Q::At, M::Target, M::Z>,
{
    let task = MiTask::new(model, q);
    let e = match variant {
        "bdmc" => multisample::bdmc(&task, sched, kernel, k, n, seed)?,
        "ais" => multisample::run(&task, Variant::Im, sched, kernel, 1, n, seed, Sides::Both)?,
        v => multisample::run(&task, v.parse()?, sched, kernel, k, n, seed, Sides::Both)?,
    };
    let lo = e.lower_mi.as_ref().expect("both sides requested");
    let hi = e.upper_mi.as_ref().expect("both sides requested");
    Ok(paired(variant, sched.len(), k, lo, hi))
}

/// Sandwich gap against `T` for each configured variant and `K`. Rows come
/// out ordered by variant, then `K`, then increasing `T`.
pub fn sweep_gap_vs_t(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let s = cfg.sweep.as_ref().ok_or_else(|| Error::Config("missing [sweep] section".into()))?;
    let mut ts = s.t.clone();
    ts.sort_unstable();
    ts.dedup();
    let n = s.n.unwrap_or(cfg.n);
    let seed = cfg.seed;
    let kind = s.anneal().schedule_kind()?;
    let model = Model::build(&cfg.model)?;
    let prop = Prop::build(&cfg.proposal, &model)?;
    let a = s.anneal();
    let mut rows = Vec::new();
    with_workers(cfg.workers, || -> Result<()> {
        for v in &s.variants {
            for &k in &s.k.values() {
                for &t in &ts {
                    let sched = Schedule::new(kind, t)?;
                    let row = match (&model, &prop) {
                        (Model::Bridge { base, target }, _) => {
                            if v != "ais" || k != 1 || a.kernel.as_deref().unwrap_or("perfect") != "perfect" {
                                return Err(Error::Unsupported("the gaussian bridge sweeps single-chain ais with perfect transitions".into()));
                            }
                            if kind != crate::ais::ScheduleKind::Linear {
                                return Err(Error::Unsupported("the gaussian bridge sweep uses a linear schedule".into()));
                            }
                            let g = crate::ais::perfect_transition_gap(base, target, t, n, seed)?;
                            SweepRow {
                                t,
                                k,
                                variant: v.clone(),
                                lower: g.forward.mean,
                                upper: g.backward.mean,
                                gap: g.gap.mean,
                                gap_std_error: g.gap.std_error,
                            }
                        }
                        (Model::Linear(m), Prop::Prior) => sweep_cell(m, &PriorProposal, &cont_kernel(m, &PriorProposal, &a, seed)?, v, &sched, k, n, seed)?,
                        (Model::Linear(m), Prop::Posterior) => {
                            sweep_cell(m, &PosteriorProposal, &cont_kernel(m, &PosteriorProposal, &a, seed)?, v, &sched, k, n, seed)?
                        }
                        (Model::Linear(m), Prop::Encoder(q)) => sweep_cell(m, q, &cont_kernel(m, q, &a, seed)?, v, &sched, k, n, seed)?,
                        (Model::Mixture(m), Prop::Prior) => sweep_cell(m, &PriorProposal, &cont_kernel(m, &PriorProposal, &a, seed)?, v, &sched, k, n, seed)?,
                        (Model::Mixture(m), Prop::Posterior) => {
                            sweep_cell(m, &PosteriorProposal, &cont_kernel(m, &PosteriorProposal, &a, seed)?, v, &sched, k, n, seed)?
                        }
                        (Model::Mixture(m), Prop::Encoder(q)) => sweep_cell(m, q, &cont_kernel(m, q, &a, seed)?, v, &sched, k, n, seed)?,
                        (Model::Discrete(m), Prop::Table(q)) => sweep_cell(m, q, &disc_kernel(&a)?, v, &sched, k, n, seed)?,
                        _ => return Err(Error::Config("proposal does not fit the model".into())),
                    };
                    rows.push(row);
                }
            }
        }
        Ok(())
    })??;
    Ok(rows)
}

/// BA and contrastive parts of a GIWAE-family estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecomposeRow {
    pub estimator: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub ba_term: f64,
    pub contrastive_term: f64,
    pub total: f64,
    #[serde(rename = "logK")]
    pub log_k: f64,
    pub contrastive_std_error: f64,
    /// `contrastive_term <= log K + 3 std_error`.
    pub within_cap: bool,
}

impl Columns for DecomposeRow {
    const COLUMNS: &'static [&'static str] =
        &["estimator", "K", "ba_term", "contrastive_term", "total", "logK", "contrastive_std_error", "within_cap"];
}

impl DecomposeRow {
    fn new(estimator: &str, k: usize, d: &DecomposedBound) -> Self {
        let log_k = (k as f64).ln();
        DecomposeRow {
            estimator: estimator.to_string(),
            k,
            ba_term: d.ba_term,
            contrastive_term: d.contrastive_term,
            total: d.total,
            log_k,
            contrastive_std_error: d.contrastive_std_error,
            within_cap: d.contrastive_term <= log_k + 3.0 * d.contrastive_std_error,
        }
    }
}

fn decompose_cell<M, Q, C>(model: &M, q: &Q, critic: Option<&C>, c: Cell) -> Result<Option<DecomposeRow>>
where
    M: JointModel,
    Q: Proposal<M>,
    C: Critic<M::X, M::Z>,
{
    let task = MiTask::new(model, q);
    let prior = MiTask::new(model, &PriorProposal);
    let need = || critic.ok_or_else(|| Error::Config(format!("{} needs a critic", c.id)));
    let d = match c.id {
        EstimatorId::IwaeLower => bounds::iwae_lower_mi(&task, c.k, c.n, c.seed)?.1,
        EstimatorId::SInfonce => bounds::iwae_lower_mi(&prior, c.k, c.n, c.seed)?.1,
        EstimatorId::Giwae => bounds::giwae_lower(&task, need()?, c.k, c.n, c.seed)?.1,
        EstimatorId::Infonce => bounds::giwae_lower(&prior, need()?, c.k, c.n, c.seed)?.1,
        _ => return Ok(None),
    };
    Ok(Some(DecomposeRow::new(c.id.as_str(), c.k, &d)))
}

/// Decomposition rows for every configured estimator that has one (IWAE,
/// structured InfoNCE, GIWAE, InfoNCE); others are ignored.
pub fn decompose_report(cfg: &ExperimentConfig) -> Result<Vec<DecomposeRow>> {
    cfg.validate()?;
    let model = Model::build(&cfg.model)?;
    let prop = Prop::build(&cfg.proposal, &model)?;
    let ctx = RowCtx { cfg, label: String::new(), reference: None };
    let mut out = Vec::new();
    for spec in &cfg.estimators {
        for cell in ctx.cells(spec)? {
            let row = with_workers(cfg.workers, || match (&model, &prop) {
                (Model::Linear(m), Prop::Prior) => {
                    let q = ConditionalGaussian::standard(m.obs_dim(), m.latent_dim());
                    let c = spec.critic.as_ref().map(|c| cont_critic(m, Some(&q), c)).transpose()?;
                    decompose_cell(m, &PriorProposal, c.as_ref(), cell)
                }
                (Model::Linear(m), Prop::Posterior) => {
                    let c = spec.critic.as_ref().map(|c| cont_critic(m, None, c)).transpose()?;
                    decompose_cell(m, &PosteriorProposal, c.as_ref(), cell)
                }
                (Model::Linear(m), Prop::Encoder(q)) => {
                    let c = spec.critic.as_ref().map(|c| cont_critic(m, Some(q), c)).transpose()?;
                    decompose_cell(m, q, c.as_ref(), cell)
                }
                (Model::Mixture(m), Prop::Prior) => {
                    let c = spec.critic.as_ref().map(|c| cont_critic(m, None, c)).transpose()?;
                    decompose_cell(m, &PriorProposal, c.as_ref(), cell)
                }
                (Model::Mixture(m), Prop::Posterior) => {
                    let c = spec.critic.as_ref().map(|c| cont_critic(m, None, c)).transpose()?;
                    decompose_cell(m, &PosteriorProposal, c.as_ref(), cell)
                }
                (Model::Mixture(m), Prop::Encoder(q)) => {
                    let c = spec.critic.as_ref().map(|c| cont_critic(m, Some(q), c)).transpose()?;
                    decompose_cell(m, q, c.as_ref(), cell)
                }
                (Model::Discrete(m), Prop::Table(q)) => {
                    let c = spec.critic.as_ref().map(|c| disc_critic(m, q, c)).transpose()?;
                    decompose_cell(m, q, c.as_ref(), cell)
                }
                _ => Ok(None),
            })??;
            out.extend(row);
        }
    }
    Ok(out)
}

/// Critic training on the configured model with `q` = prior (linear VAE) or
/// the configured encoder.
pub fn train_critic(cfg: &ExperimentConfig, train: &TrainConfig, hidden: &[usize]) -> Result<energy::TrainState> {
    cfg.validate()?;
    let model = Model::build(&cfg.model)?;
    let prop = Prop::build(&cfg.proposal, &model)?;
    with_workers(cfg.workers, || {
        let go = |m: &dyn Fn(ConditionalGaussian, MlpCritic) -> Result<energy::TrainState>, q: ConditionalGaussian, x: usize, z: usize| {
            m(q, MlpCritic::new(x, z, hidden, train.seed))
        };
        match (&model, &prop) {
            (Model::Linear(m), Prop::Prior) => go(
                &|q, c| train_bound(m, q, c, train),
                ConditionalGaussian::standard(m.obs_dim(), m.latent_dim()),
                m.obs_dim(),
                m.latent_dim(),
            ),
            (Model::Linear(m), Prop::Encoder(q)) => go(&|q, c| train_bound(m, q, c, train), q.clone(), m.obs_dim(), m.latent_dim()),
            (Model::Mixture(m), Prop::Encoder(q)) => go(&|q, c| train_bound(m, q, c, train), q.clone(), m.obs_dim(), m.latent_dim()),
            (Model::Mixture(m), Prop::Prior) if train.objective == Objective::Infonce => go(
                &|q, c| train_bound(m, q, c, train),
                ConditionalGaussian::standard(m.obs_dim(), m.latent_dim()),
                m.obs_dim(),
                m.latent_dim(),
            ),
            _ => Err(Error::Unsupported(
                "critic training needs a continuous model with a Gaussian proposal (prior on linear_vae, or an encoder)".into(),
            )),
        }
    })?
}

/// IBAL evaluation with an MLP critic; HMC step sizes are adapted on the
/// energy target at one pilot observation unless fixed in `anneal`.
#[allow(clippy::too_many_arguments)]
pub fn eval_ibal(
    cfg: &ExperimentConfig,
    critic: &MlpCritic,
    anneal: &AnnealSpec,
    t: usize,
    k: usize,
    n: usize,
    mode: energy::IbalMode,
) -> Result<BoundEstimate> {
    cfg.validate()?;
    let model = Model::build(&cfg.model)?;
    let prop = Prop::build(&cfg.proposal, &model)?;
    let sched = Schedule::new(anneal.schedule_kind()?, t)?;
    let seed = cfg.seed;
    fn go<M: JointModel<X = Vec<f64>, Z = Vec<f64>>>(
        m: &M,
        q: &ConditionalGaussian,
        critic: &MlpCritic,
        a: &AnnealSpec,
        sched: &Schedule,
        k: usize,
        n: usize,
        seed: u64,
        mode: energy::IbalMode,
    ) -> Result<BoundEstimate> {
        let (x, _) = m.sample_joint(&mut rng::stream(seed, 0, PILOT))?;
        let base = q.at_row(&x);
        let target = EnergyTarget { base: base.clone(), critic: critic.at(&x) };
        let hmc = match a.kernel.as_deref().unwrap_or("hmc") {
            "hmc" => hmc_for(&base, &target, a, seed),
            k => return Err(Error::Unsupported(format!("IBAL evaluation uses HMC, not {k}"))),
        };
        energy::eval_ibal_ais(m, q, critic, sched, &hmc, k, n, seed, mode)
    }
    with_workers(cfg.workers, || match (&model, &prop) {
        (Model::Linear(m), Prop::Prior) => {
            go(m, &ConditionalGaussian::standard(m.obs_dim(), m.latent_dim()), critic, anneal, &sched, k, n, seed, mode)
        }
        (Model::Linear(m), Prop::Encoder(q)) => go(m, q, critic, anneal, &sched, k, n, seed, mode),
        (Model::Mixture(m), Prop::Encoder(q)) => go(m, q, critic, anneal, &sched, k, n, seed, mode),
        _ => Err(Error::Unsupported("IBAL evaluation needs a continuous model with a Gaussian proposal".into())),
    })?
}
