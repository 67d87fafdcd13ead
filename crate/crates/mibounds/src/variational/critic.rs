use std::sync::Arc;

use ndarray::Array2;

use super::mlp::Mlp;
use super::tape::Var;
use super::{Critic, CriticAt, CriticGrad};

/// MLP critic on the concatenation `[x, z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCritic {
    net: Arc<Mlp>,
    x_dim: usize,
    z_dim: usize,
}

impl MlpCritic {
    /// `hidden` ReLU layers between the `x_dim + z_dim` input and a scalar.
    pub fn new(x_dim: usize, z_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let mut sizes = vec![x_dim + z_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        MlpCritic { net: Arc::new(Mlp::new(&sizes, seed)), x_dim, z_dim }
    }

    pub fn from_net(net: Mlp, x_dim: usize) -> Option<Self> {
        let (first, last) = (net.sizes()[0], *net.sizes().last()?);
        (last == 1 && first > x_dim).then(|| MlpCritic { z_dim: first - x_dim, x_dim, net: Arc::new(net) })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn set_net(&mut self, net: Mlp) {
        assert_eq!(net.sizes(), self.net.sizes());
        self.net = Arc::new(net);
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn z_dim(&self) -> usize {
        self.z_dim
    }

    /// Zeroes the last layer weights and sets its bias to `c`, so the output
    /// is exactly `c` for every input.
    pub fn set_constant(&mut self, c: f64) {
        let mut net = (*self.net).clone();
        let l = net.layers() - 1;
        net.params_mut()[2 * l].fill(0.0);
        net.params_mut()[2 * l + 1].fill(c);
        self.net = Arc::new(net);
    }

    /// Batch values on the tape: `x` and `z` are row-aligned.
    pub fn forward_tape<'t>(&self, p: &[Var<'t>], x: Var<'t>, z: Var<'t>) -> Var<'t> {
        self.net.forward_tape(p, x.concat_cols(z))
    }

    pub fn forward(&self, x: &Array2<f64>, z: &Array2<f64>) -> Array2<f64> {
        let inp = ndarray::concatenate(ndarray::Axis(1), &[x.view(), z.view()]).expect("row counts match");
        self.net.forward(inp.view())
    }
}

/// The critic with `x` fixed; the `x` part of the first layer is
/// precomputed.
#[derive(Debug, Clone)]
pub struct MlpCriticAt {
    net: Arc<Mlp>,
    x_dim: usize,
    pre: Vec<f64>,
}

impl Critic<Vec<f64>, Vec<f64>> for MlpCritic {
    type At = MlpCriticAt;
    fn at(&self, x: &Vec<f64>) -> MlpCriticAt {
        let w = self.net.weight(0);
        let b = self.net.bias(0);
        let h = w.ncols();
        let mut pre: Vec<f64> = b.iter().cloned().collect();
        let ws = w.as_slice().expect("standard layout");
        for i in 0..self.x_dim {
            let xi = x[i];
            let row = &ws[i * h..(i + 1) * h];
            for j in 0..h {
                pre[j] += xi * row[j];
            }
        }
        MlpCriticAt { net: self.net.clone(), x_dim: self.x_dim, pre }
    }
}

impl MlpCriticAt {
    /// Pre-activations of every layer.
    fn activations(&self, z: &[f64]) -> Vec<Vec<f64>> {
        let net = &*self.net;
        let w0 = net.weight(0).as_slice().expect("standard layout");
        let h0 = net.weight(0).ncols();
        let mut a = self.pre.clone();
        for (i, zi) in z.iter().enumerate() {
            let row = &w0[(self.x_dim + i) * h0..(self.x_dim + i + 1) * h0];
            for j in 0..h0 {
                a[j] += zi * row[j];
            }
        }
        let mut acts = vec![a];
        for l in 1..net.layers() {
            let w = net.weight(l).as_slice().expect("standard layout");
            let out = net.weight(l).ncols();
            let mut next: Vec<f64> = net.bias(l).iter().cloned().collect();
            let prev = acts.last().expect("nonempty");
            for (i, &v) in prev.iter().enumerate() {
                if v > 0.0 {
                    let row = &w[i * out..(i + 1) * out];
                    for j in 0..out {
                        next[j] += v * row[j];
                    }
                }
            }
            acts.push(next);
        }
        acts
    }
}

impl CriticAt<Vec<f64>> for MlpCriticAt {
    fn value(&self, z: &Vec<f64>) -> f64 {
        self.activations(z).last().expect("output layer")[0]
    }
}

impl CriticGrad for MlpCriticAt {
    fn value_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let net = &*self.net;
        let acts = self.activations(z);
        let layers = net.layers();
        let mut g = vec![1.0];
        for l in (1..layers).rev() {
            let w = net.weight(l).as_slice().expect("standard layout");
            let out = net.weight(l).ncols();
            let prev = &acts[l - 1];
            let mut gp = vec![0.0; prev.len()];
            for (i, gpi) in gp.iter_mut().enumerate() {
                if prev[i] > 0.0 {
                    let row = &w[i * out..(i + 1) * out];
                    let mut s = 0.0;
                    for j in 0..out {
                        s += row[j] * g[j];
                    }
                    *gpi = s;
                }
            }
            g = gp;
        }
        let w0 = net.weight(0).as_slice().expect("standard layout");
        let h0 = net.weight(0).ncols();
        for (i, gi) in grad.iter_mut().enumerate() {
            let row = &w0[(self.x_dim + i) * h0..(self.x_dim + i + 1) * h0];
            let mut s = 0.0;
            for j in 0..h0 {
                s += row[j] * g[j];
            }
            *gi = s;
        }
        acts[layers - 1][0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::variational::gaussian::rows;
    use crate::variational::tape::{gradient_check, Tape};

    fn critic() -> MlpCritic {
        MlpCritic::new(3, 2, &[16, 16], 4)
    }

    #[test]
    fn cached_and_batch_paths_agree() {
        let c = critic();
        let x = vec![0.3, -1.0, 0.2];
        let z = vec![0.7, -0.1];
        let a = c.eval(&x, &z);
        let b = c.forward(&rows(&[x.clone()]), &rows(&[z.clone()]))[(0, 0)];
        assert!((a - b).abs() < 1e-13);
        let t = Tape::new();
        let p = c.net().leaves(&t);
        let v = c.forward_tape(&p, t.var(rows(&[x])), t.var(rows(&[z]))).scalar();
        assert!((a - v).abs() < 1e-13);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let c = critic();
        let x = vec![0.3, -1.0, 0.2];
        let at = c.at(&x);
        let z = vec![0.7, -0.1];
        let mut g = vec![0.0; 2];
        at.value_grad(&z, &mut g);
        for i in 0..2 {
            let (mut a, mut b) = (z.clone(), z.clone());
            a[i] += 1e-4;
            b[i] -= 1e-4;
            let fd = (at.value(&a) - at.value(&b)) / 2e-4;
            assert!((fd - g[i]).abs() / 1f64.max(fd.abs()) < 1e-5, "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let c = MlpCritic::new(2, 1, &[6, 5], 8);
        let x = rows(&[vec![0.3, -0.2], vec![-0.5, 0.9]]);
        let z = rows(&[vec![0.4], vec![-0.6]]);
        let mut inputs = c.net().params().to_vec();
        inputs.push(x);
        inputs.push(z);
        let e = gradient_check(&inputs, 1e-4, |_, v| {
            let n = v.len();
            c.forward_tape(&v[..n - 2], v[n - 2], v[n - 1]).exp().sum()
        });
        assert!(e < 1e-5, "{e}");
    }

    #[test]
    fn constant_mode_is_constant() {
        let mut c = critic();
        c.set_constant(-0.75);
        for k in 0..10 {
            let x = vec![k as f64, -1.0, 0.5 * k as f64];
            let z = vec![(k as f64).sin(), 3.0];
            assert_eq!(c.eval(&x, &z), -0.75);
            let mut g = vec![1.0; 2];
            assert_eq!(c.at(&x).value_grad(&z, &mut g), -0.75);
            assert_eq!(g, vec![0.0, 0.0]);
        }
    }
}
