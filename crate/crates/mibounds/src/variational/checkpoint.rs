use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConditionalGaussian, Mlp, MlpCritic};
use crate::{Error, Result};

pub const FORMAT: &str = "mibounds-mlp";
pub const VERSION: u32 = 1;

/// Flat JSON parameter vector with architecture metadata. `f64` values are
/// written in shortest round-trip form, so reloading is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// `"critic"` or `"encoder"`.
    pub role: String,
    pub sizes: Vec<usize>,
    /// Width of the `x` block of the input (critics only).
    pub x_dim: usize,
    pub seed: Option<u64>,
    pub objective: Option<String>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_critic(c: &MlpCritic, seed: Option<u64>, objective: Option<&str>) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            role: "critic".into(),
            sizes: c.net().sizes().to_vec(),
            x_dim: c.x_dim(),
            seed,
            objective: objective.map(str::to_string),
            params: c.net().flat(),
        }
    }

    pub fn from_encoder(q: &ConditionalGaussian, seed: Option<u64>) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            role: "encoder".into(),
            sizes: q.net().sizes().to_vec(),
            x_dim: q.obs_dim(),
            seed,
            objective: None,
            params: q.net().flat(),
        }
    }

    fn net(&self) -> Result<Mlp> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format {} v{}", self.format, self.version)));
        }
        if self.sizes.len() < 2 {
            return Err(Error::Checkpoint("need at least two layer sizes".into()));
        }
        let mut net = Mlp::zeros(&self.sizes);
        if net.num_params() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                net.num_params(),
                self.params.len()
            )));
        }
        net.set_flat(&self.params);
        Ok(net)
    }

    pub fn critic(&self) -> Result<MlpCritic> {
        if self.role != "critic" {
            return Err(Error::Checkpoint(format!("expected a critic, found {}", self.role)));
        }
        MlpCritic::from_net(self.net()?, self.x_dim).ok_or_else(|| Error::Checkpoint("not a scalar critic".into()))
    }

    pub fn encoder(&self) -> Result<ConditionalGaussian> {
        if self.role != "encoder" {
            return Err(Error::Checkpoint(format!("expected an encoder, found {}", self.role)));
        }
        ConditionalGaussian::from_net(self.net()?).ok_or_else(|| Error::Checkpoint("odd encoder output".into()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::variational::EncoderKind;

    #[test]
    fn critic_round_trip_is_bit_exact() {
        let c = MlpCritic::new(4, 2, &[7, 3], 11);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        Checkpoint::from_critic(&c, Some(11), Some("giwae")).save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap().critic().unwrap();
        assert_eq!(back, c);
        let bits: Vec<u64> = back.net().flat().iter().map(|a| a.to_bits()).collect();
        let orig: Vec<u64> = c.net().flat().iter().map(|a| a.to_bits()).collect();
        assert_eq!(bits, orig);
    }

    #[test]
    fn encoder_round_trip_and_role_check() {
        let q = ConditionalGaussian::new(3, 2, EncoderKind::Mlp { width: 4 }, 1);
        let ck = Checkpoint::from_encoder(&q, None);
        assert_eq!(ck.encoder().unwrap(), q);
        assert!(ck.critic().is_err());
        let mut bad = ck.clone();
        bad.params.pop();
        assert!(bad.encoder().is_err());
    }
}
