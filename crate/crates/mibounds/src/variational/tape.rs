//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a `1×1` output returns the gradient with respect to
//! every recorded node.

use std::cell::RefCell;

use ndarray::{s, Array2, Axis};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sum(usize),
    SumCols(usize),
    LogSumExpGroups(usize, usize),
    GroupFirst(usize, usize),
    ConcatCols(usize, usize),
    SliceCols(usize, usize, usize),
    RepeatRows(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn var(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var<'_> {
        let mut n = self.nodes.borrow_mut();
        n.push(Node { value, op });
        Var { tape: self, id: n.len() - 1 }
    }

    /// Gradients of scalar `out` with respect to every node, indexed by node id.
    pub fn backward(&self, out: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[out.id].value.dim(), (1, 1), "backward needs a 1x1 output");
        let mut g: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        g[out.id] = Some(Array2::ones((1, 1)));
        for id in (0..=out.id).rev() {
            let Some(gy) = g[id].clone() else { continue };
            let val = &nodes[id].value;
            let mut acc = |i: usize, d: Array2<f64>| match &mut g[i] {
                Some(x) => *x += &d,
                slot => *slot = Some(d),
            };
            match nodes[id].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(a, gy.dot(&nodes[b].value.t()));
                    acc(b, nodes[a].value.t().dot(&gy));
                }
                Op::AddRow(a, b) => {
                    acc(b, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(a, gy);
                }
                Op::Add(a, b) => {
                    acc(a, gy.clone());
                    acc(b, gy);
                }
                Op::Sub(a, b) => {
                    acc(a, gy.clone());
                    acc(b, -gy);
                }
                Op::Mul(a, b) => {
                    acc(a, &gy * &nodes[b].value);
                    acc(b, &gy * &nodes[a].value);
                }
                Op::Scale(a, c) => acc(a, gy * c),
                Op::Shift(a) => acc(a, gy),
                Op::Relu(a) => {
                    let m = nodes[a].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    acc(a, gy * m);
                }
                Op::Exp(a) => acc(a, gy * val),
                Op::Log(a) => acc(a, gy / &nodes[a].value),
                Op::Square(a) => acc(a, gy * &nodes[a].value * 2.0),
                Op::Sum(a) => {
                    let c = gy[(0, 0)];
                    acc(a, Array2::from_elem(nodes[a].value.dim(), c));
                }
                Op::SumCols(a) => {
                    let (r, c) = nodes[a].value.dim();
                    let mut d = Array2::zeros((r, c));
                    for i in 0..r {
                        d.row_mut(i).fill(gy[(i, 0)]);
                    }
                    acc(a, d);
                }
                Op::LogSumExpGroups(a, k) => {
                    let x = &nodes[a].value;
                    let mut d = Array2::zeros(x.dim());
                    for gi in 0..val.nrows() {
                        for j in 0..k {
                            let r = gi * k + j;
                            d[(r, 0)] = gy[(gi, 0)] * (x[(r, 0)] - val[(gi, 0)]).exp();
                        }
                    }
                    acc(a, d);
                }
                Op::GroupFirst(a, k) => {
                    let mut d = Array2::zeros(nodes[a].value.dim());
                    for gi in 0..val.nrows() {
                        d[(gi * k, 0)] = gy[(gi, 0)];
                    }
                    acc(a, d);
                }
                Op::ConcatCols(a, b) => {
                    let ca = nodes[a].value.ncols();
                    acc(a, gy.slice(s![.., ..ca]).to_owned());
                    acc(b, gy.slice(s![.., ca..]).to_owned());
                }
                Op::SliceCols(a, start, len) => {
                    let mut d = Array2::zeros(nodes[a].value.dim());
                    d.slice_mut(s![.., start..start + len]).assign(&gy);
                    acc(a, d);
                }
                Op::RepeatRows(a, k) => {
                    let src = &nodes[a].value;
                    let mut d = Array2::zeros(src.dim());
                    for i in 0..src.nrows() {
                        for j in 0..k {
                            let row = gy.row(i * k + j);
                            let mut t = d.row_mut(i);
                            t += &row;
                        }
                    }
                    acc(a, d);
                }
            }
        }
        Grads { g }
    }
}

#[derive(Debug)]
pub struct Grads {
    g: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient for `v`; zeros of the right shape when `v` did not influence
    /// the output.
    pub fn of(&self, v: Var<'_>) -> Array2<f64> {
        match &self.g.get(v.id).and_then(|x| x.clone()) {
            Some(a) => a.clone(),
            None => Array2::zeros(v.value().dim()),
        }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Array2<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn scalar(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[(0, 0)]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dim()
    }

    fn unary(&self, f: impl Fn(&Array2<f64>) -> Array2<f64>, op: Op) -> Var<'t> {
        let v = f(&self.tape.nodes.borrow()[self.id].value);
        self.tape.push(v, op)
    }

    fn binary(&self, o: Var<'t>, f: impl Fn(&Array2<f64>, &Array2<f64>) -> Array2<f64>, op: Op) -> Var<'t> {
        let v = {
            let n = self.tape.nodes.borrow();
            f(&n[self.id].value, &n[o.id].value)
        };
        self.tape.push(v, op)
    }

    pub fn matmul(&self, o: Var<'t>) -> Var<'t> {
        self.binary(o, |a, b| a.dot(b), Op::MatMul(self.id, o.id))
    }

    /// Adds a `1×m` row to every row.
    pub fn add_row(&self, row: Var<'t>) -> Var<'t> {
        self.binary(row, |a, b| a + b, Op::AddRow(self.id, row.id))
    }

    pub fn add(&self, o: Var<'t>) -> Var<'t> {
        self.binary(o, |a, b| a + b, Op::Add(self.id, o.id))
    }

    pub fn sub(&self, o: Var<'t>) -> Var<'t> {
        self.binary(o, |a, b| a - b, Op::Sub(self.id, o.id))
    }

    pub fn mul(&self, o: Var<'t>) -> Var<'t> {
        self.binary(o, |a, b| a * b, Op::Mul(self.id, o.id))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(|a| a * c, Op::Scale(self.id, c))
    }

    pub fn shift(&self, c: f64) -> Var<'t> {
        self.unary(|a| a + c, Op::Shift(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|a| a.mapv(|v| v.max(0.0)), Op::Relu(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(|a| a.mapv(f64::exp), Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(|a| a.mapv(f64::ln), Op::Log(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(|a| a.mapv(|v| v * v), Op::Square(self.id))
    }

    /// Sum of all entries as `1×1`.
    pub fn sum(&self) -> Var<'t> {
        self.unary(|a| Array2::from_elem((1, 1), a.sum()), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = {
            let (r, c) = self.shape();
            (r * c) as f64
        };
        self.sum().scale(1.0 / n)
    }

    /// Row sums as an `n×1` column.
    pub fn sum_cols(&self) -> Var<'t> {
        self.unary(|a| a.sum_axis(Axis(1)).insert_axis(Axis(1)), Op::SumCols(self.id))
    }

    /// For an `n×1` column split into consecutive groups of `k`, the
    /// log-sum-exp of each group (`n/k × 1`), max-subtracted.
    pub fn logsumexp_groups(&self, k: usize) -> Var<'t> {
        self.unary(
            |a| {
                assert_eq!(a.ncols(), 1);
                assert_eq!(a.nrows() % k, 0);
                let g = a.nrows() / k;
                let col = a.column(0);
                Array2::from_shape_fn((g, 1), |(i, _)| {
                    let v: Vec<f64> = (0..k).map(|j| col[i * k + j]).collect();
                    crate::stats::logsumexp(&v)
                })
            },
            Op::LogSumExpGroups(self.id, k),
        )
    }

    /// First entry of each consecutive group of `k` rows in a column.
    pub fn group_first(&self, k: usize) -> Var<'t> {
        self.unary(
            |a| {
                let g = a.nrows() / k;
                Array2::from_shape_fn((g, 1), |(i, _)| a[(i * k, 0)])
            },
            Op::GroupFirst(self.id, k),
        )
    }

    pub fn concat_cols(&self, o: Var<'t>) -> Var<'t> {
        self.binary(
            o,
            |a, b| ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("row counts match"),
            Op::ConcatCols(self.id, o.id),
        )
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var<'t> {
        self.unary(|a| a.slice(s![.., start..start + len]).to_owned(), Op::SliceCols(self.id, start, len))
    }

    /// Each row repeated `k` times consecutively.
    pub fn repeat_rows(&self, k: usize) -> Var<'t> {
        self.unary(
            |a| {
                let (r, c) = a.dim();
                Array2::from_shape_fn((r * k, c), |(i, j)| a[(i / k, j)])
            },
            Op::RepeatRows(self.id, k),
        )
    }
}

/// Largest `|g - fd| / max(1, |g|, |fd|)` between the tape gradient of `f`
/// and central finite differences at step `h`, over every input entry.
pub fn gradient_check<F>(inputs: &[Array2<f64>], h: f64, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.var(a.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out);
    let eval = |xs: &[Array2<f64>]| -> f64 {
        let t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|a| t.var(a.clone())).collect();
        f(&t, &vs).scalar()
    };
    let mut worst: f64 = 0.0;
    for (k, inp) in inputs.iter().enumerate() {
        let g = grads.of(vars[k]);
        for idx in 0..inp.len() {
            let (r, c) = (idx / inp.ncols(), idx % inp.ncols());
            let mut plus = inputs.to_vec();
            plus[k][(r, c)] += h;
            let mut minus = inputs.to_vec();
            minus[k][(r, c)] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = g[(r, c)];
            let rel = (a - fd).abs() / 1f64.max(a.abs()).max(fd.abs());
            worst = worst.max(rel);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    const H: f64 = 1e-4;
    const TOL: f64 = 1e-5;

    fn rand_mat(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut g = rng::stream(seed, 0, 0);
        Array2::from_shape_fn((r, c), |_| g.random::<f64>() * 2.0 - 1.0)
    }

    // Entries bounded away from zero so ReLU and log stay smooth under ±H.
    fn away_from_zero(r: usize, c: usize, seed: u64) -> Array2<f64> {
        rand_mat(r, c, seed).mapv(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
    }

    #[test]
    fn matmul_and_bias() {
        let e = gradient_check(&[rand_mat(3, 4, 1), rand_mat(4, 2, 2), rand_mat(1, 2, 3)], H, |_, v| {
            v[0].matmul(v[1]).add_row(v[2]).square().sum()
        });
        assert!(e < TOL, "{e}");
    }

    #[test]
    fn elementwise() {
        let e = gradient_check(&[rand_mat(3, 3, 4), rand_mat(3, 3, 5)], H, |_, v| {
            v[0].add(v[1]).mul(v[0]).sub(v[1].scale(0.7)).shift(0.3).exp().sum()
        });
        assert!(e < TOL, "{e}");
    }

    #[test]
    fn relu_and_log() {
        let x = away_from_zero(4, 3, 6);
        let e = gradient_check(&[x], H, |_, v| v[0].relu().shift(0.5).ln().sum());
        assert!(e < TOL, "{e}");
    }

    #[test]
    fn reductions() {
        let e = gradient_check(&[rand_mat(6, 3, 7)], H, |_, v| v[0].sum_cols().logsumexp_groups(3).square().mean());
        assert!(e < TOL, "{e}");
        let e = gradient_check(&[rand_mat(6, 1, 8)], H, |_, v| v[0].group_first(2).scale(3.0).sum());
        assert!(e < TOL, "{e}");
    }

    #[test]
    fn shape_ops() {
        let e = gradient_check(&[rand_mat(2, 3, 9), rand_mat(2, 2, 10)], H, |_, v| {
            let c = v[0].concat_cols(v[1]);
            c.slice_cols(1, 3).repeat_rows(3).square().sum()
        });
        assert!(e < TOL, "{e}");
    }

    #[test]
    fn logsumexp_groups_is_stable() {
        let t = Tape::new();
        let x = t.var(Array2::from_shape_vec((2, 1), vec![700.0, 699.0]).unwrap());
        let l = x.logsumexp_groups(2);
        assert!(l.scalar().is_finite());
        let g = t.backward(l.sum()).of(x);
        assert!((g.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unused_input_gets_zero_gradient() {
        let t = Tape::new();
        let a = t.var(Array2::ones((2, 2)));
        let b = t.var(Array2::ones((1, 3)));
        let g = t.backward(a.sum());
        assert_eq!(g.of(b), Array2::<f64>::zeros((1, 3)));
    }
}
