use rand::Rng;

use super::{Capabilities, JointModel};
use crate::density::{sample_index, Discrete};
use crate::rng::Stream;
use crate::{error::param, Error, Result};

pub const MAX_ALPHABET: usize = 64;

/// Joint probability table over `{0..nx} × {0..nz}`, stored row-major with
/// `x` indexing rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    nx: usize,
    nz: usize,
    table: Vec<f64>,
    log_table: Vec<f64>,
    px: Vec<f64>,
    pz: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(nx: usize, nz: usize, table: Vec<f64>) -> Result<Self> {
        if nx == 0 || nz == 0 || nx > MAX_ALPHABET || nz > MAX_ALPHABET {
            return Err(param(format!("alphabets must be within 1..={MAX_ALPHABET}")));
        }
        if table.len() != nx * nz {
            return Err(Error::Dimension { expected: nx * nz, got: table.len() });
        }
        if table.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(param("table entries must be finite and nonnegative"));
        }
        let total: f64 = table.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(param(format!("table sums to {total}, expected 1")));
        }
        let mut px = vec![0.0; nx];
        let mut pz = vec![0.0; nz];
        for x in 0..nx {
            for z in 0..nz {
                px[x] += table[x * nz + z];
                pz[z] += table[x * nz + z];
            }
        }
        let log_table = table.iter().map(|p| p.ln()).collect();
        Ok(DiscreteJoint { nx, nz, table, log_table, px, pz })
    }

    /// Random table with Dirichlet(alpha)-like entries: `u^(1/alpha)`
    /// normalized, `u` uniform. Small `alpha` gives peaked tables.
    pub fn random(nx: usize, nz: usize, alpha: f64, rng: &mut Stream) -> Result<Self> {
        let raw: Vec<f64> = (0..nx * nz)
            .map(|_| {
                let u: f64 = rng.random::<f64>();
                (1e-3 + u).powf(1.0 / alpha)
            })
            .collect();
        let s: f64 = raw.iter().sum();
        DiscreteJoint::new(nx, nz, raw.into_iter().map(|a| a / s).collect())
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn p(&self, x: usize, z: usize) -> f64 {
        self.table[x * self.nz + z]
    }

    pub fn px(&self) -> &[f64] {
        &self.px
    }

    pub fn pz(&self) -> &[f64] {
        &self.pz
    }

    /// `p(z | x)` as a probability vector.
    pub fn posterior_row(&self, x: usize) -> Vec<f64> {
        (0..self.nz).map(|z| self.p(x, z) / self.px[x]).collect()
    }

    /// `H(x) + H(z) - H(x, z)`, an alternative route to the MI.
    pub fn mi_from_entropies(&self) -> f64 {
        let h = |v: &[f64]| -> f64 { v.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum() };
        h(&self.px) + h(&self.pz) - h(&self.table)
    }
}

impl JointModel for DiscreteJoint {
    type X = usize;
    type Z = usize;
    type Prior = Discrete;
    type Target = Discrete;
    type Posterior = Discrete;

    fn latent_dim(&self) -> usize {
        1
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::all()
    }

    fn prior(&self) -> Discrete {
        Discrete::from_probs(&self.pz)
    }

    fn log_prior(&self, z: &usize) -> f64 {
        self.pz[*z].ln()
    }

    fn log_likelihood(&self, x: &usize, z: &usize) -> f64 {
        self.log_table[x * self.nz + z] - self.pz[*z].ln()
    }

    fn log_joint(&self, x: &usize, z: &usize) -> f64 {
        self.log_prior(z) + self.log_likelihood(x, z)
    }

    fn sample_obs(&self, z: &usize, rng: &mut Stream) -> usize {
        let col: Vec<f64> = (0..self.nx).map(|x| self.p(x, *z)).collect();
        sample_index(&col, rng)
    }

    fn target(&self, x: &usize) -> Discrete {
        Discrete::new((0..self.nz).map(|z| self.log_joint(x, &z)).collect())
    }

    fn posterior(&self, x: &usize) -> Result<Discrete> {
        Ok(Discrete::from_probs(&self.posterior_row(*x)))
    }

    fn analytic_mi(&self) -> Result<f64> {
        let mut s = 0.0;
        for x in 0..self.nx {
            for z in 0..self.nz {
                let p = self.p(x, z);
                if p > 0.0 {
                    s += p * (p / (self.px[x] * self.pz[z])).ln();
                }
            }
        }
        Ok(s)
    }

    fn check(&self, x: Option<&usize>, z: Option<&usize>) -> Result<()> {
        if let Some(&x) = x {
            if x >= self.nx {
                return Err(Error::Domain(format!("x = {x} outside alphabet of size {}", self.nx)));
            }
        }
        if let Some(&z) = z {
            if z >= self.nz {
                return Err(Error::Domain(format!("z = {z} outside alphabet of size {}", self.nz)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::LogDensity;
    use crate::models::sample_joint;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn uniform_table_frequencies() {
        let m = DiscreteJoint::new(2, 2, vec![0.25; 4]).unwrap();
        let n = 40_000;
        let draws = sample_joint(&m, n, 3).unwrap();
        let sd = (0.25f64 * 0.75 / n as f64).sqrt();
        for cell in 0..4 {
            let f = draws.iter().filter(|(x, z)| x * 2 + z == cell).count() as f64 / n as f64;
            assert!((f - 0.25).abs() < 3.0 * sd, "cell {cell}: {f}");
        }
    }

    #[test]
    fn deterministic_channel_has_log_alphabet_mi() {
        let mut t = vec![0.0; 16];
        for i in 0..4 {
            t[i * 4 + i] = 0.25;
        }
        let m = DiscreteJoint::new(4, 4, t).unwrap();
        assert!((m.analytic_mi().unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn prior_is_marginal_row_sum() {
        let m = DiscreteJoint::new(2, 3, vec![0.1, 0.2, 0.05, 0.3, 0.15, 0.2]).unwrap();
        assert!((m.log_prior(&1) - 0.35f64.ln()).abs() < 1e-15);
        let t = m.target(&1);
        let lz = t.log_normalizer();
        assert!((lz - 0.65f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn validates_table() {
        assert!(DiscreteJoint::new(2, 2, vec![0.5, 0.5, 0.5, 0.5]).is_err());
        assert!(DiscreteJoint::new(2, 2, vec![0.5, 0.5, 0.0]).is_err());
        assert!(DiscreteJoint::new(65, 1, vec![1.0 / 65.0; 65]).is_err());
        let m = DiscreteJoint::new(2, 2, vec![0.25; 4]).unwrap();
        assert!(m.check(Some(&2), None).is_err());
    }

    proptest! {
        #[test]
        fn enumeration_mi_matches_entropy_form(seed in 0u64..1000, nx in 1usize..9, nz in 1usize..9) {
            let m = DiscreteJoint::random(nx, nz, 0.5, &mut rng::stream(seed, 0, 0)).unwrap();
            prop_assert!((m.analytic_mi().unwrap() - m.mi_from_entropies()).abs() < 1e-12);
        }

        #[test]
        fn chain_rule(seed in 0u64..1000) {
            let m = DiscreteJoint::random(4, 5, 1.0, &mut rng::stream(seed, 0, 0)).unwrap();
            for x in 0..4 {
                for z in 0..5 {
                    let lhs = m.log_joint(&x, &z);
                    prop_assert_eq!(lhs, m.log_prior(&z) + m.log_likelihood(&x, &z));
                    prop_assert!((lhs - m.p(x, z).ln()).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn prior_is_normalized(seed in 0u64..1000, nz in 1usize..9) {
            let m = DiscreteJoint::random(3, nz, 0.7, &mut rng::stream(seed, 0, 0)).unwrap();
            let lz = crate::stats::logsumexp(&(0..nz).map(|z| m.prior().log_density(&z)).collect::<Vec<_>>());
            prop_assert!(lz.abs() < 1e-12);
        }
    }
}
