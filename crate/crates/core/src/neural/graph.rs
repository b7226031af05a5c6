//! Tape-based reverse-mode differentiation over 2-d `f64` arrays.
//!
//! A [`Graph`] records every operation as a node. Parameters are referenced
//! by index into a borrowed [`ParamSet`] so building a graph never copies
//! weights. [`Graph::backward`] walks the tape once in reverse.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use super::params::{ParamId, ParamSet};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    /// `x · wᵀ` with `x: n×i`, `w: o×i`.
    MatMulT(Var, Var),
    /// Adds a `1×o` row to every row of an `n×o` input.
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    /// Fused LSTM update from gate pre-activations and the previous cell
    /// state; the output is `[h | c]`.
    LstmCell(Var, Var),
    Mean(Vec<Var>),
    Mse(Var, Var),
}

struct Node {
    // `None` for parameters; their value lives in the parameter set.
    value: Option<Array2<f64>>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    // one tape node per parameter, created on first use
    param_nodes: Vec<Option<Var>>,
}

/// Gradients of a scalar with respect to every node of a graph.
pub struct Grads {
    nodes: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn of(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes[v.0].as_ref()
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(value), _) => value,
            (None, Op::Param(id)) => self.params.get(*id),
            (None, _) => unreachable!("computed node without a value"),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    /// Node for a parameter. Repeated calls return the same node, so a
    /// weight shared across time steps accumulates a single gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.index()] = Some(v);
        v
    }

    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.ncols(), wv.ncols(), "matmul_t: inner dimensions differ");
        let y = xv.dot(&wv.t());
        self.push(y, Op::MatMulT(x, w))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!(rv.nrows(), 1, "add_row: bias must be a single row");
        assert_eq!(xv.ncols(), rv.ncols(), "add_row: width mismatch");
        let y = xv + rv;
        self.push(y, Op::AddRow(x, row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.dim(), bv.dim(), "add: shape mismatch");
        let y = av + bv;
        self.push(y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.dim(), bv.dim(), "mul: shape mismatch");
        let y = av * bv;
        self.push(y, Op::Mul(a, b))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(sigmoid);
        self.push(y, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(f64::tanh);
        self.push(y, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(|v| v.max(0.0));
        self.push(y, Op::Relu(a))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let y = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(y, Op::SliceCols(a, start))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let y = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(y, Op::SliceRows(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(y, Op::ConcatRows(parts.to_vec()))
    }

    /// LSTM cell update. `pre` holds the `n×4H` gate pre-activations in the
    /// order input, forget, cell, output; `c_prev` is `n×H`. Returns the
    /// `n×2H` node `[h | c]`.
    pub fn lstm_cell(&mut self, pre: Var, c_prev: Var) -> Var {
        let (pv, cv) = (self.value(pre), self.value(c_prev));
        let hd = cv.ncols();
        assert_eq!(pv.ncols(), 4 * hd, "lstm_cell: gate width must be 4x the state width");
        assert_eq!(pv.nrows(), cv.nrows(), "lstm_cell: row counts differ");
        let mut y = Array2::zeros((cv.nrows(), 2 * hd));
        for r in 0..cv.nrows() {
            for j in 0..hd {
                let i = sigmoid(pv[[r, j]]);
                let f = sigmoid(pv[[r, hd + j]]);
                let g = pv[[r, 2 * hd + j]].tanh();
                let o = sigmoid(pv[[r, 3 * hd + j]]);
                let c = f * cv[[r, j]] + i * g;
                y[[r, j]] = o * c.tanh();
                y[[r, hd + j]] = c;
            }
        }
        self.push(y, Op::LstmCell(pre, c_prev))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(y, Op::ConcatCols(parts.to_vec()))
    }

    /// Elementwise average of same-shaped nodes.
    pub fn mean(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "mean of nothing");
        let mut acc = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            let v = self.value(p);
            assert_eq!(acc.dim(), v.dim(), "mean: shape mismatch");
            acc += v;
        }
        acc /= parts.len() as f64;
        self.push(acc, Op::Mean(parts.to_vec()))
    }

    /// Mean squared difference over all entries, as a `1×1` node.
    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        let (pv, tv) = (self.value(pred), self.value(target));
        assert_eq!(pv.dim(), tv.dim(), "mse: shape mismatch");
        let n = pv.len() as f64;
        let loss = Zip::from(pv)
            .and(tv)
            .fold(0.0, |acc, &p, &t| acc + (p - t) * (p - t))
            / n;
        self.push(Array2::from_elem((1, 1), loss), Op::Mse(pred, target))
    }

    /// Reverse pass from a `1×1` output.
    pub fn backward(&self, output: Var) -> Grads {
        assert_eq!(self.value(output).dim(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones((1, 1)));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let y = self.nodes[i].value.as_ref();
            match &self.nodes[i].op {
                Op::Input | Op::Param(_) => {}
                Op::MatMulT(x, w) => {
                    let dx = g.dot(self.value(*w));
                    let dw = g.t().dot(self.value(*x));
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::AddRow(x, row) => {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, db);
                    accumulate(&mut grads, *x, g.clone());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Sigmoid(a) => {
                    let y = y.expect("sigmoid output");
                    let mut d = g.clone();
                    Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y * (1.0 - y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let y = y.expect("tanh output");
                    let mut d = g.clone();
                    Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
                    accumulate(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0
                            }
                        });
                    accumulate(&mut grads, *a, d);
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *a, d);
                }
                Op::SliceRows(a, start) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads, *a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        let d = g.slice(s![offset..offset + h, ..]).to_owned();
                        accumulate(&mut grads, p, d);
                        offset += h;
                    }
                }
                Op::LstmCell(pre, c_prev) => {
                    let (pv, cv) = (self.value(*pre), self.value(*c_prev));
                    let hd = cv.ncols();
                    let mut dpre = Array2::zeros(pv.raw_dim());
                    let mut dc_prev = Array2::zeros(cv.raw_dim());
                    let out = y.expect("lstm output");
                    for r in 0..cv.nrows() {
                        for j in 0..hd {
                            let i = sigmoid(pv[[r, j]]);
                            let f = sigmoid(pv[[r, hd + j]]);
                            let gg = pv[[r, 2 * hd + j]].tanh();
                            let o = sigmoid(pv[[r, 3 * hd + j]]);
                            let tc = out[[r, hd + j]].tanh();
                            let dh = g[[r, j]];
                            let dc = g[[r, hd + j]] + dh * o * (1.0 - tc * tc);
                            dpre[[r, j]] = dc * gg * i * (1.0 - i);
                            dpre[[r, hd + j]] = dc * cv[[r, j]] * f * (1.0 - f);
                            dpre[[r, 2 * hd + j]] = dc * i * (1.0 - gg * gg);
                            dpre[[r, 3 * hd + j]] = dh * tc * o * (1.0 - o);
                            dc_prev[[r, j]] = dc * f;
                        }
                    }
                    accumulate(&mut grads, *pre, dpre);
                    accumulate(&mut grads, *c_prev, dc_prev);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        let d = g.slice(s![.., offset..offset + w]).to_owned();
                        accumulate(&mut grads, p, d);
                        offset += w;
                    }
                }
                Op::Mean(parts) => {
                    let d = &g / parts.len() as f64;
                    for &p in parts {
                        accumulate(&mut grads, p, d.clone());
                    }
                }
                Op::Mse(pred, target) => {
                    let (pv, tv) = (self.value(*pred), self.value(*target));
                    let scale = 2.0 * g[[0, 0]] / pv.len() as f64;
                    let d = (pv - tv) * scale;
                    accumulate(&mut grads, *target, -&d);
                    accumulate(&mut grads, *pred, d);
                }
            }
            grads[i] = Some(g);
        }
        Grads { nodes: grads }
    }

    /// Sums the gradient of every parameter node into `into`, which is laid
    /// out like the parameter set.
    pub fn accumulate_param_grads(&self, grads: &Grads, into: &mut [Array2<f64>]) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.nodes[i]) {
                into[id.index()] += g;
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, d: Array2<f64>) {
    match &mut grads[v.0] {
        Some(g) => *g += &d,
        slot => *slot = Some(d),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_and_bias_forward() {
        let mut ps = ParamSet::default();
        let w = ps.add("w", array![[1.0, 2.0], [0.0, -1.0], [3.0, 1.0]]);
        let b = ps.add("b", array![[0.5, 0.0, -1.0]]);
        let mut g = Graph::new(&ps);
        let x = g.input(array![[1.0, 1.0], [2.0, 0.0]]);
        let wv = g.param(w);
        let bv = g.param(b);
        let xw = g.matmul_t(x, wv);
        let y = g.add_row(xw, bv);
        assert_eq!(g.value(y), &array![[3.5, -1.0, 3.0], [2.5, 0.0, 5.0]]);
    }

    #[test]
    fn relu_forward() {
        let ps = ParamSet::default();
        let mut g = Graph::new(&ps);
        let x = g.input(array![[-1.0, 2.0]]);
        let y = g.relu(x);
        assert_eq!(g.value(y), &array![[0.0, 2.0]]);
    }

    #[test]
    fn mse_forward_and_backward() {
        let ps = ParamSet::default();
        let mut g = Graph::new(&ps);
        let p = g.input(array![[0.1, 0.2]]);
        let t = g.input(array![[0.1, 0.4]]);
        let l = g.mse(p, t);
        assert!((g.value(l)[[0, 0]] - 0.02).abs() < 1e-15);
        let grads = g.backward(l);
        let dp = grads.of(p).unwrap();
        assert!((dp[[0, 1]] + 0.2).abs() < 1e-15);
        assert_eq!(dp[[0, 0]], 0.0);
    }

    #[test]
    fn shared_node_gradients_accumulate() {
        let ps = ParamSet::default();
        let mut g = Graph::new(&ps);
        let x = g.input(array![[3.0]]);
        let sq = g.mul(x, x);
        let zero = g.input(array![[0.0]]);
        let l = g.mse(sq, zero); // x^4
        let grads = g.backward(l);
        assert!((grads.of(x).unwrap()[[0, 0]] - 108.0).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
