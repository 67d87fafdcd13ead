//! Critic and encoder training for GIWAE, InfoNCE, MINE-DV/F, BA and
//! MINE-AIS on continuous models.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::EnergyTarget;
use crate::ais::{ChainStats, Hmc, Kernel};
use crate::density::Sample;
use crate::models::{Capabilities, JointModel};
use crate::rng;
use crate::stats::try_per_draw;
use crate::variational::{rows, std_normal};
use crate::variational::tape::{Tape, Var};
use crate::variational::{Adam, ConditionalGaussian, Critic, MlpCritic};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Ba,
    Giwae,
    Infonce,
    MineDv,
    MineF,
    MineAis,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Ba => "ba",
            Objective::Giwae => "giwae",
            Objective::Infonce => "infonce",
            Objective::MineDv => "mine-dv",
            Objective::MineF => "mine-f",
            Objective::MineAis => "mine-ais",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "ba" => Ok(Objective::Ba),
            "giwae" => Ok(Objective::Giwae),
            "infonce" => Ok(Objective::Infonce),
            "mine-dv" => Ok(Objective::MineDv),
            "mine-f" => Ok(Objective::MineF),
            "mine-ais" => Ok(Objective::MineAis),
            _ => Err(Error::Config(format!("unknown objective '{s}'"))),
        }
    }
}

/// How GIWAE trains `q` and the critic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GiwaeSchedule {
    /// Both every step on the GIWAE objective.
    Joint,
    /// First half: `q` alone on the BA objective. Second half: the critic
    /// alone with `q` frozen.
    Staged,
}

/// Negative sampling for MINE-AIS: `m` HMC moves of `leapfrog` steps at
/// step size `eps`, targeting `q·e^T` from a posterior draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mcmc {
    pub m: usize,
    pub leapfrog: usize,
    pub eps: f64,
}

impl Default for Mcmc {
    fn default() -> Self {
        Mcmc { m: 10, leapfrog: 20, eps: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub k: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Update `q` as well as the critic (ignored by InfoNCE, which has no `q`).
    pub train_q: bool,
    pub schedule: GiwaeSchedule,
    pub mcmc: Mcmc,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Giwae,
            k: 10,
            steps: 1000,
            batch: 16,
            lr: 1e-4,
            seed: 0,
            train_q: false,
            schedule: GiwaeSchedule::Joint,
            mcmc: Mcmc::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub critic: MlpCritic,
    pub q: ConditionalGaussian,
    pub critic_opt: Adam,
    pub q_opt: Adam,
    /// Objective value per step (a bound estimate on the batch, except for
    /// MINE-AIS where it is the positive-minus-negative critic gap).
    pub losses: Vec<f64>,
    /// Steps dropped because a negative chain diverged.
    pub skipped: u64,
    /// Mean acceptance of MINE-AIS negative chains.
    pub acceptance: f64,
}

impl TrainState {
    pub fn new(q: ConditionalGaussian, critic: MlpCritic, lr: f64) -> Self {
        TrainState { critic, q, critic_opt: Adam::new(lr), q_opt: Adam::new(lr), losses: Vec::new(), skipped: 0, acceptance: f64::NAN }
    }

    fn apply(&mut self, gc: Option<Vec<Array2<f64>>>, gq: Option<Vec<Array2<f64>>>) {
        if let Some(g) = gc {
            let mut net = self.critic.net().clone();
            self.critic_opt.step(net.params_mut(), &g);
            self.critic.set_net(net);
        }
        if let Some(g) = gq {
            self.q_opt.step(self.q.net_mut().params_mut(), &g);
        }
    }
}

/// Joint draws for one step.
struct Batch {
    idx: Vec<u64>,
    x: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    log_prior: Vec<f64>,
}

fn batch<M>(model: &M, seed: u64, step: usize, size: usize) -> Result<Batch>
where
    M: JointModel<X = Vec<f64>, Z = Vec<f64>>,
{
    let idx: Vec<u64> = (0..size).map(|b| (step * size + b) as u64).collect();
    let mut x = Vec::with_capacity(size);
    let mut z = Vec::with_capacity(size);
    for &i in &idx {
        let (a, b) = model.sample_joint(&mut rng::joint(seed, i))?;
        x.push(a);
        z.push(b);
    }
    let log_prior = z.iter().map(|z| model.log_prior(z)).collect();
    Ok(Batch { idx, x, z, log_prior })
}

fn column(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("column shape")
}

/// Negated gradients (Adam descends) for a parameter list.
fn ascent(g: &crate::variational::tape::Grads, p: &[Var<'_>]) -> Vec<Array2<f64>> {
    p.iter().map(|v| -g.of(*v)).collect()
}

fn check(obj: f64, step: usize) -> Result<()> {
    if obj.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!("non-finite objective at step {step}")))
    }
}

/// Trains with one of the sampled objectives. `K` is the number of slots for
/// GIWAE and InfoNCE; MINE objectives use one negative per draw.
pub fn train_bound<M>(model: &M, q: ConditionalGaussian, critic: MlpCritic, cfg: &TrainConfig) -> Result<TrainState>
where
    M: JointModel<X = Vec<f64>, Z = Vec<f64>>,
{
    if cfg.objective == Objective::MineAis {
        return train_mine_ais(model, q, critic, cfg);
    }
    if cfg.k == 0 || cfg.batch == 0 {
        return Err(Error::Parameter("K and batch must be at least 1".into()));
    }
    if critic.x_dim() != model.obs_dim() || critic.z_dim() != model.latent_dim() {
        return Err(Error::Dimension { expected: model.obs_dim() + model.latent_dim(), got: critic.x_dim() + critic.z_dim() });
    }
    let mut st = TrainState::new(q, critic, cfg.lr);
    let k = cfg.k;
    let dz = model.latent_dim();
    let prior = model.prior();
    for step in 0..cfg.steps {
        let b = batch(model, cfg.seed, step, cfg.batch)?;
        let n = b.x.len();
        let staged_q = cfg.objective == Objective::Giwae && cfg.schedule == GiwaeSchedule::Staged && step < cfg.steps / 2;
        let tape = Tape::new();
        let pq = st.q.net().leaves(&tape);
        let pc = st.critic.net().leaves(&tape);
        let xv = tape.var(rows(&b.x));
        let z0 = tape.var(rows(&b.z));
        let ba = st.q.log_density_tape(&pq, xv, z0).sub(tape.var(column(&b.log_prior)));
        let (obj, update_c, update_q) = match cfg.objective {
            Objective::Ba => (ba.mean(), false, true),
            _ if staged_q => (ba.mean(), false, cfg.train_q),
            Objective::Giwae | Objective::Infonce => {
                let infonce = cfg.objective == Objective::Infonce;
                let xr = xv.repeat_rows(k);
                let mut mask = Array2::zeros((n * k, dz));
                let mut noise = Array2::zeros((n * k, dz));
                for (r, &i) in b.idx.iter().enumerate() {
                    mask.row_mut(r * k).fill(1.0);
                    for j in 1..k {
                        let mut s = rng::slot(cfg.seed, i, j);
                        let v = if infonce { prior.sample(&mut s) } else { std_normal(dz, &mut s) };
                        noise.row_mut(r * k + j).assign(&ndarray::ArrayView1::from(&v));
                    }
                }
                let inv = mask.mapv(|m: f64| 1.0 - m);
                let pos = z0.repeat_rows(k).mul(tape.var(mask));
                let neg = if infonce { tape.var(noise) } else { st.q.sample_tape(&pq, xr, tape.var(noise)) };
                let zall = pos.add(neg.mul(tape.var(inv)));
                let t = st.critic.forward_tape(&pc, xr, zall);
                let c = t.group_first(k).sub(t.logsumexp_groups(k)).shift((k as f64).ln());
                if infonce {
                    (c.mean(), true, false)
                } else {
                    let joint = cfg.schedule == GiwaeSchedule::Joint;
                    (ba.add(c).mean(), true, cfg.train_q && joint)
                }
            }
            Objective::MineDv | Objective::MineF => {
                let mut noise = Array2::zeros((n, dz));
                for (r, &i) in b.idx.iter().enumerate() {
                    let v = std_normal(dz, &mut rng::slot(cfg.seed, i, 1));
                    noise.row_mut(r).assign(&ndarray::ArrayView1::from(&v));
                }
                let zn = st.q.sample_tape(&pq, xv, tape.var(noise));
                let tp = st.critic.forward_tape(&pc, xv, z0);
                let tn = st.critic.forward_tape(&pc, xv, zn);
                let neg = if cfg.objective == Objective::MineDv {
                    tn.logsumexp_groups(n).shift(-(n as f64).ln())
                } else {
                    tn.exp().mean().shift(-1.0)
                };
                (ba.mean().add(tp.mean()).sub(neg), true, cfg.train_q)
            }
            Objective::MineAis => unreachable!("handled above"),
        };
        let value = obj.scalar();
        check(value, step)?;
        let g = tape.backward(obj);
        let gc = update_c.then(|| ascent(&g, &pc));
        let gq = update_q.then(|| ascent(&g, &pq));
        st.losses.push(value);
        st.apply(gc, gq);
    }
    Ok(st)
}

/// Contrastive-divergence-style IBAL training. Positives are joint draws;
/// each negative starts at its positive's `z` and takes `m` HMC moves
/// targeting `q·e^T`. The critic ascends `mean T(pos) - mean T(neg)`; with
/// `train_q`, `q` ascends the matching score difference.
pub fn train_mine_ais<M>(model: &M, q: ConditionalGaussian, critic: MlpCritic, cfg: &TrainConfig) -> Result<TrainState>
where
    M: JointModel<X = Vec<f64>, Z = Vec<f64>>,
{
    model.require(Capabilities::EXACT_POSTERIOR_SAMPLE, "MINE-AIS negative initialization")?;
    if cfg.batch == 0 {
        return Err(Error::Parameter("batch must be at least 1".into()));
    }
    let mut st = TrainState::new(q, critic, cfg.lr);
    let hmc = Hmc::fixed(cfg.mcmc.leapfrog, cfg.mcmc.eps);
    let mut acc = ChainStats::default();
    for step in 0..cfg.steps {
        let b = batch(model, cfg.seed, step, cfg.batch)?;
        let chains = try_per_draw(b.x.len(), |r| {
            let r = r as usize;
            let x = &b.x[r];
            let qa = st.q.at_row(x);
            let target = EnergyTarget { base: qa.clone(), critic: st.critic.at(&b.x[r]) };
            let mut z = b.z[r].clone();
            let mut s = ChainStats::default();
            let mut rng = rng::stream(cfg.seed, b.idx[r], rng::AUX + 7);
            for _ in 0..cfg.mcmc.m {
                hmc.step(&qa, &target, 1.0, &mut z, &mut rng, &mut s);
            }
            Ok((z, s))
        })?;
        let mut s = ChainStats::default();
        chains.iter().for_each(|c| s.merge(&c.1));
        acc.merge(&s);
        if s.divergences > 0 {
            st.skipped += 1;
            continue;
        }
        let neg: Vec<Vec<f64>> = chains.into_iter().map(|c| c.0).collect();
        let tape = Tape::new();
        let pq = st.q.net().leaves(&tape);
        let pc = st.critic.net().leaves(&tape);
        let xv = tape.var(rows(&b.x));
        let zp = tape.var(rows(&b.z));
        let zn = tape.var(rows(&neg));
        let mut obj = st.critic.forward_tape(&pc, xv, zp).mean().sub(st.critic.forward_tape(&pc, xv, zn).mean());
        if cfg.train_q {
            obj = obj.add(st.q.log_density_tape(&pq, xv, zp).mean().sub(st.q.log_density_tape(&pq, xv, zn).mean()));
        }
        let value = obj.scalar();
        check(value, step)?;
        let g = tape.backward(obj);
        let gc = Some(ascent(&g, &pc));
        let gq = cfg.train_q.then(|| ascent(&g, &pq));
        st.losses.push(value);
        st.apply(gc, gq);
    }
    st.acceptance = acc.acceptance_rate();
    Ok(st)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds;
    use crate::models::{GaussianMixturePosteriorModel, LinearGaussianVae};
    use crate::task::MiTask;
    use crate::variational::EncoderKind;

    fn vae() -> LinearGaussianVae {
        LinearGaussianVae::random(2, 6, 4, 0.5).unwrap()
    }

    #[test]
    fn k1_giwae_leaves_the_critic_alone() {
        let m = vae();
        let c = MlpCritic::new(6, 2, &[8], 1);
        let cfg = TrainConfig { objective: Objective::Giwae, k: 1, steps: 20, batch: 4, lr: 1e-2, ..Default::default() };
        let st = train_bound(&m, ConditionalGaussian::standard(6, 2), c.clone(), &cfg).unwrap();
        assert_eq!(st.critic, c);
        assert_eq!(st.critic_opt.steps(), 0);
    }

    #[test]
    fn mine_ais_with_no_moves_has_zero_gradient() {
        let m = vae();
        let c = MlpCritic::new(6, 2, &[8], 2);
        let cfg = TrainConfig {
            objective: Objective::MineAis,
            steps: 10,
            batch: 4,
            lr: 1e-2,
            mcmc: Mcmc { m: 0, leapfrog: 5, eps: 0.1 },
            ..Default::default()
        };
        let st = train_bound(&m, ConditionalGaussian::standard(6, 2), c.clone(), &cfg).unwrap();
        assert_eq!(st.critic, c);
        assert!(st.losses.iter().all(|l| *l == 0.0));
    }

    #[test]
    fn infonce_stays_below_log_k() {
        let m = LinearGaussianVae::random(3, 20, 5, 0.2).unwrap();
        let c = MlpCritic::new(20, 3, &[32, 32], 3);
        let cfg = TrainConfig { objective: Objective::Infonce, k: 20, steps: 300, batch: 8, lr: 1e-3, ..Default::default() };
        let st = train_bound(&m, ConditionalGaussian::standard(20, 3), c, &cfg).unwrap();
        let last: f64 = st.losses[250..].iter().sum::<f64>() / 50.0;
        assert!(last > 0.5, "{last}");
        let task = MiTask::new(&m, &crate::task::PriorProposal);
        let (v, _) = bounds::giwae_lower(&task, &st.critic, 20, 300, 77).unwrap();
        assert!(v.value <= 20f64.ln() + 1e-12);
    }

    #[test]
    fn giwae_beats_ba_on_bimodal_posterior() {
        let m = GaussianMixturePosteriorModel::bimodal(2.0, 0.3, 2, 1.5).unwrap();
        let q = ConditionalGaussian::new(2, 1, EncoderKind::Mlp { width: 16 }, 1);
        let c = MlpCritic::new(2, 1, &[32, 32], 1);
        let base = TrainConfig { k: 10, steps: 600, batch: 16, lr: 3e-3, train_q: true, ..Default::default() };
        let ba_cfg = TrainConfig { objective: Objective::Ba, ..base.clone() };
        let trained_q = train_bound(&m, q, c.clone(), &ba_cfg).unwrap().q;
        let gi_cfg = TrainConfig { objective: Objective::Giwae, train_q: false, ..base };
        let st = train_bound(&m, trained_q.clone(), c, &gi_cfg).unwrap();
        let task = MiTask::new(&m, &trained_q);
        let ba = bounds::ba_lower(&task, 2000, 9).unwrap();
        let (g, _) = bounds::giwae_lower(&task, &st.critic, 10, 2000, 9).unwrap();
        assert!(g.value > ba.value + 3.0 * g.std_error, "{} vs {}", g.value, ba.value);
    }

    #[test]
    fn objective_names_round_trip() {
        for o in [Objective::Ba, Objective::Giwae, Objective::Infonce, Objective::MineDv, Objective::MineF, Objective::MineAis] {
            assert_eq!(o.to_string().parse::<Objective>().unwrap(), o);
        }
        assert_eq!("mine_dv".parse::<Objective>().unwrap(), Objective::MineDv);
    }
}
