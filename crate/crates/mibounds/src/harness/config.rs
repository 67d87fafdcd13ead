//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ais::ScheduleKind;
use crate::bounds::EstimatorId;
use crate::energy::Objective;
use crate::multisample::Variant;
use crate::{Error, Result};

fn default_n() -> usize {
    128
}

fn default_tight() -> f64 {
    2.0
}

fn default_leapfrog() -> usize {
    20
}

/// A single value or a list, so `K = 10` and `K = [1, 10]` both parse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    One(usize),
    Many(Vec<usize>),
}

impl Grid {
    pub fn values(&self) -> Vec<usize> {
        match self {
            Grid::One(v) => vec![*v],
            Grid::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    LinearVae {
        latent_dim: usize,
        obs_dim: usize,
        obs_std: f64,
        #[serde(default)]
        seed: u64,
    },
    Mixture {
        sep: f64,
        mode_std: f64,
        obs_dim: usize,
        obs_std: f64,
    },
    Discrete {
        nx: usize,
        nz: usize,
        #[serde(default = "one")]
        alpha: f64,
        #[serde(default)]
        seed: u64,
    },
    /// `N(0, I)` to a unit-covariance Gaussian shifted by `shift` in every
    /// coordinate. Only usable by `sweep`.
    GaussianBridge { dim: usize, shift: f64 },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProposalSpec {
    #[default]
    Prior,
    Posterior,
    /// A random conditional table (discrete models only).
    Random {
        #[serde(default)]
        seed: u64,
    },
    /// A Gaussian encoder checkpoint (continuous models only).
    Encoder { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSize {
    Fixed(f64),
    Auto(String),
}

impl Default for StepSize {
    fn default() -> Self {
        StepSize::Auto("auto".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CriticSpec {
    Constant {
        #[serde(default)]
        value: f64,
    },
    /// `log p(x, z) - log q(z|x)`; discrete models only.
    Optimal,
    Checkpoint { path: PathBuf },
    Train {
        objective: String,
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(default = "default_steps")]
        steps: usize,
        #[serde(default = "default_batch")]
        batch: usize,
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(rename = "K", default = "default_train_k")]
        k: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_steps() -> usize {
    500
}

fn default_batch() -> usize {
    16
}

fn default_lr() -> f64 {
    1e-3
}

fn default_train_k() -> usize {
    10
}

/// Annealing settings shared by estimator rows and sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnealSpec {
    pub schedule: Option<String>,
    pub kernel: Option<String>,
    pub leapfrog: usize,
    pub step_size: StepSize,
}

impl Default for AnnealSpec {
    fn default() -> Self {
        AnnealSpec { schedule: None, kernel: None, leapfrog: default_leapfrog(), step_size: StepSize::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    pub id: String,
    #[serde(rename = "K", default = "grid_one")]
    pub k: Grid,
    #[serde(rename = "T", default = "grid_t")]
    pub t: Grid,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub critic: Option<CriticSpec>,
    #[serde(default)]
    pub schedule: Option<String>,
    #[serde(default)]
    pub kernel: Option<String>,
    #[serde(default = "default_leapfrog")]
    pub leapfrog: usize,
    #[serde(default)]
    pub step_size: StepSize,
}

fn grid_one() -> Grid {
    Grid::One(1)
}

fn grid_t() -> Grid {
    Grid::One(100)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub variants: Vec<String>,
    #[serde(rename = "T")]
    pub t: Vec<usize>,
    #[serde(rename = "K", default = "grid_one")]
    pub k: Grid,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub schedule: Option<String>,
    #[serde(default)]
    pub kernel: Option<String>,
    #[serde(default = "default_leapfrog")]
    pub leapfrog: usize,
    #[serde(default)]
    pub step_size: StepSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Outer draws per row.
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub workers: Option<usize>,
    /// Rows within this many nats of the reference MI are flagged tight.
    #[serde(default = "default_tight")]
    pub tight_threshold: f64,
    pub model: ModelSpec,
    #[serde(default)]
    pub proposal: ProposalSpec,
    #[serde(default)]
    pub estimators: Vec<EstimatorSpec>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub output: OutputSpec,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl AnnealSpec {
    pub fn schedule_kind(&self) -> Result<ScheduleKind> {
        self.schedule.as_deref().unwrap_or("linear").parse()
    }

    fn validate(&self, at: &str) -> Result<()> {
        self.schedule_kind().map_err(|e| bad(format!("{at}: {e}")))?;
        if let Some(k) = &self.kernel {
            if !["hmc", "perfect", "metropolis", "exact"].contains(&k.as_str()) {
                return Err(bad(format!("{at}: unknown kernel '{k}' (expected hmc, perfect, metropolis or exact)")));
            }
        }
        if self.leapfrog == 0 {
            return Err(bad(format!("{at}: leapfrog must be at least 1")));
        }
        match &self.step_size {
            StepSize::Fixed(e) if !(e.is_finite() && *e > 0.0) => Err(bad(format!("{at}: step_size must be positive"))),
            StepSize::Auto(s) if s != "auto" => Err(bad(format!("{at}: step_size must be a number or \"auto\", got \"{s}\""))),
            _ => Ok(()),
        }
    }
}

macro_rules! anneal_of {
    ($t:ty) => {
        impl $t {
            pub fn anneal(&self) -> AnnealSpec {
                AnnealSpec {
                    schedule: self.schedule.clone(),
                    kernel: self.kernel.clone(),
                    leapfrog: self.leapfrog,
                    step_size: self.step_size.clone(),
                }
            }
        }
    };
}

anneal_of!(EstimatorSpec);
anneal_of!(SweepSpec);

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(s).map_err(|e| bad(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s).map_err(|e| bad(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| bad(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(bad("n must be at least 1"));
        }
        if self.workers == Some(0) {
            return Err(bad("workers must be at least 1"));
        }
        if !(self.tight_threshold >= 0.0) {
            return Err(bad("tight_threshold must be non-negative"));
        }
        match &self.model {
            ModelSpec::LinearVae { latent_dim, obs_dim, obs_std, .. } => {
                if *latent_dim == 0 || *obs_dim == 0 {
                    return Err(bad("model: latent_dim and obs_dim must be at least 1"));
                }
                if !(*obs_std > 0.0) {
                    return Err(bad("model: obs_std must be positive"));
                }
            }
            ModelSpec::Mixture { sep, mode_std, obs_dim, obs_std } => {
                if !(*mode_std > 0.0 && *obs_std > 0.0 && sep.is_finite()) || *obs_dim == 0 {
                    return Err(bad("model: mixture needs finite sep, positive mode_std and obs_std, obs_dim >= 1"));
                }
            }
            ModelSpec::Discrete { nx, nz, alpha, .. } => {
                if *nx == 0 || *nz == 0 || !(*alpha > 0.0) {
                    return Err(bad("model: discrete needs nx, nz >= 1 and alpha > 0"));
                }
            }
            ModelSpec::GaussianBridge { dim, shift } => {
                if *dim == 0 || !shift.is_finite() {
                    return Err(bad("model: gaussian_bridge needs dim >= 1 and a finite shift"));
                }
                if !self.estimators.is_empty() {
                    return Err(bad("model: gaussian_bridge is only supported by sweep; remove [[estimators]]"));
                }
            }
        }
        let discrete = matches!(self.model, ModelSpec::Discrete { .. });
        match &self.proposal {
            ProposalSpec::Random { .. } if !discrete => return Err(bad("proposal: random tables need a discrete model")),
            ProposalSpec::Encoder { .. } if discrete => return Err(bad("proposal: encoders need a continuous model")),
            _ => {}
        }
        for (i, e) in self.estimators.iter().enumerate() {
            let at = format!("estimators[{i}] ({})", e.id);
            let id: EstimatorId = e.id.parse().map_err(|err| bad(format!("{at}: {err}")))?;
            if e.k.values().is_empty() || e.k.values().contains(&0) {
                return Err(bad(format!("{at}: K values must be at least 1")));
            }
            if e.t.values().is_empty() || e.t.values().contains(&0) {
                return Err(bad(format!("{at}: T values must be at least 1")));
            }
            if e.n == Some(0) {
                return Err(bad(format!("{at}: n must be at least 1")));
            }
            e.anneal().validate(&at)?;
            match (&e.critic, id.needs_critic()) {
                (None, true) => return Err(bad(format!("{at}: needs a critic, e.g. critic = {{ kind = \"constant\" }}"))),
                (Some(_), false) => return Err(bad(format!("{at}: takes no critic"))),
                (Some(CriticSpec::Train { objective, hidden, steps, batch, lr, k, .. }), _) => {
                    let o: Objective = objective.parse().map_err(|err| bad(format!("{at}: {err}")))?;
                    if o == Objective::MineAis {
                        return Err(bad(format!("{at}: train mine-ais critics with train-critic and load the checkpoint")));
                    }
                    if hidden.contains(&0) || *steps == 0 || *batch == 0 || *k == 0 || !(*lr > 0.0) {
                        return Err(bad(format!("{at}: training needs positive hidden sizes, steps, batch, K and lr")));
                    }
                }
                _ => {}
            }
        }
        if let Some(s) = &self.sweep {
            for v in &s.variants {
                if v != "ais" && v != "bdmc" {
                    v.parse::<Variant>().map_err(|err| bad(format!("sweep: {err}")))?;
                }
            }
            if s.t.is_empty() || s.t.contains(&0) {
                return Err(bad("sweep: T must be a non-empty list of values >= 1"));
            }
            if s.k.values().contains(&0) {
                return Err(bad("sweep: K values must be at least 1"));
            }
            if s.n == Some(0) {
                return Err(bad("sweep: n must be at least 1"));
            }
            s.anneal().validate("sweep")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
seed = 3
n = 50

[model]
kind = "linear_vae"
latent_dim = 2
obs_dim = 4
obs_std = 0.5

[[estimators]]
id = "iwae_lower"
K = [1, 10]

[[estimators]]
id = "cr_ais"
K = 4
T = [10, 100]
schedule = "linear"
kernel = "hmc"
step_size = 0.1
"#;

    #[test]
    fn parses_and_round_trips() {
        let c = ExperimentConfig::from_toml_str(BASIC).unwrap();
        assert_eq!(c.estimators[0].k.values(), vec![1, 10]);
        assert_eq!(c.estimators[1].t.values(), vec![10, 100]);
        assert_eq!(c.estimators[1].step_size, StepSize::Fixed(0.1));
        assert_eq!(c.proposal, ProposalSpec::Prior);
        let again = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn errors_are_actionable() {
        let cases = [
            (BASIC.replace("iwae_lower", "iwea_lower"), "unknown estimator"),
            (BASIC.replace("giwae", "x").replace("iwae_lower", "giwae_upper"), "use iwae_upper"),
            (BASIC.replace("K = 4", "K = 0"), "K values"),
            (BASIC.replace("obs_std = 0.5", "obs_std = -1.0"), "obs_std"),
            (BASIC.replace("seed = 3", "seed = 3\nbogus = 1"), "bogus"),
            (BASIC.replace("\"hmc\"", "\"gibbs\""), "unknown kernel"),
            (BASIC.replace("id = \"iwae_lower\"", "id = \"giwae\""), "needs a critic"),
        ];
        for (text, needle) in cases {
            let e = ExperimentConfig::from_toml_str(&text).unwrap_err().to_string();
            assert!(e.contains(needle), "{e}");
        }
    }

    #[test]
    fn missing_model_is_reported() {
        let e = ExperimentConfig::from_toml_str("seed = 1").unwrap_err().to_string();
        assert!(e.contains("model"), "{e}");
    }
}
