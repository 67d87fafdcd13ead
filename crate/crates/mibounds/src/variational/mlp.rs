use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use super::tape::{Tape, Var};
use crate::rng;

/// Fully connected network with ReLU between layers and a linear output.
/// Parameters are stored as `[W_0, b_0, W_1, b_1, ..]` with `W_l` of shape
/// `in × out` and `b_l` of shape `1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<Array2<f64>>,
}

impl Mlp {
    /// Fan-in uniform initialization, `U(-1/√fan_in, 1/√fan_in)`, from `seed`.
    pub fn new(sizes: &[usize], seed: u64) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        let mut r = rng::stream(seed, 0, rng::AUX + 1);
        let mut params = Vec::new();
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            params.push(Array2::from_shape_fn((w[0], w[1]), |_| r.random_range(-bound..bound)));
            params.push(Array2::from_shape_fn((1, w[1]), |_| r.random_range(-bound..bound)));
        }
        Mlp { sizes: sizes.to_vec(), params }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        let params = sizes
            .windows(2)
            .flat_map(|w| [Array2::zeros((w[0], w[1])), Array2::zeros((1, w[1]))])
            .collect();
        Mlp { sizes: sizes.to_vec(), params }
    }

    pub fn from_params(sizes: &[usize], params: Vec<Array2<f64>>) -> Option<Self> {
        let ok = params.len() == 2 * (sizes.len() - 1)
            && sizes.windows(2).enumerate().all(|(l, w)| {
                params[2 * l].dim() == (w[0], w[1]) && params[2 * l + 1].dim() == (1, w[1])
            });
        ok.then(|| Mlp { sizes: sizes.to_vec(), params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.iter().cloned()).collect()
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let mut k = 0;
        for p in &mut self.params {
            for a in p.iter_mut() {
                *a = v[k];
                k += 1;
            }
        }
    }

    pub fn weight(&self, l: usize) -> &Array2<f64> {
        &self.params[2 * l]
    }

    pub fn bias(&self, l: usize) -> &Array2<f64> {
        &self.params[2 * l + 1]
    }

    /// Batch forward pass, one input per row.
    pub fn forward(&self, input: ArrayView2<f64>) -> Array2<f64> {
        let mut h = input.dot(self.weight(0)) + self.bias(0);
        for l in 1..self.layers() {
            h.mapv_inplace(|v| v.max(0.0));
            h = h.dot(self.weight(l)) + self.bias(l);
        }
        h
    }

    /// Forward pass recorded on `tape` with parameters `p` (as returned by
    /// [`Mlp::leaves`]).
    pub fn forward_tape<'t>(&self, p: &[Var<'t>], input: Var<'t>) -> Var<'t> {
        let mut h = input.matmul(p[0]).add_row(p[1]);
        for l in 1..self.layers() {
            h = h.relu().matmul(p[2 * l]).add_row(p[2 * l + 1]);
        }
        h
    }

    pub fn leaves<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.var(p.clone())).collect()
    }

    /// Sum of squared parameters, used by tests and diagnostics.
    pub fn norm2(&self) -> f64 {
        self.params.iter().map(|p| p.iter().map(|a| a * a).sum::<f64>()).sum()
    }

    /// Adds `a` times each gradient to the parameters.
    pub fn axpy(&mut self, a: f64, grads: &[Array2<f64>]) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.scaled_add(a, g);
        }
    }

    pub fn row_forward(&self, x: &[f64]) -> Vec<f64> {
        let a = ArrayView2::from_shape((1, x.len()), x).expect("row input");
        self.forward(a).index_axis(Axis(0), 0).to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::variational::tape::gradient_check;

    #[test]
    fn tape_and_plain_forward_agree() {
        let m = Mlp::new(&[3, 5, 4, 2], 1);
        let x = Array2::from_shape_fn((6, 3), |(i, j)| (i as f64 - 2.0) * 0.3 + j as f64 * 0.1);
        let plain = m.forward(x.view());
        let t = Tape::new();
        let p = m.leaves(&t);
        let out = m.forward_tape(&p, t.var(x));
        assert!((&out.value() - &plain).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let m = Mlp::new(&[2, 4, 1], 2);
        let x = Array2::from_shape_vec((3, 2), vec![0.3, -0.7, 1.1, 0.4, -0.2, 0.9]).unwrap();
        let mut inputs: Vec<Array2<f64>> = m.params().to_vec();
        inputs.push(x);
        let e = gradient_check(&inputs, 1e-4, |_, v| {
            let n = v.len();
            m.forward_tape(&v[..n - 1], v[n - 1]).square().sum()
        });
        assert!(e < 1e-5, "{e}");
    }

    #[test]
    fn init_is_reproducible_and_bounded() {
        let a = Mlp::new(&[4, 8, 1], 5);
        let b = Mlp::new(&[4, 8, 1], 5);
        assert_eq!(a, b);
        assert!(a.weight(0).iter().all(|w| w.abs() <= 0.5));
        let mut c = a.clone();
        c.set_flat(&a.flat());
        assert_eq!(a, c);
    }
}
