use ndarray::Array2;
use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{uniform_init, ParamId, ParamSet};

/// Affine map `y = x Wᵀ + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = ps.add(format!("{name}.weight"), uniform_init(rng, out_dim, in_dim));
        let bias = ps.add(format!("{name}.bias"), Array2::zeros((1, out_dim)));
        Dense {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul_t(x, w);
        g.add_row(xw, b)
    }
}

/// LSTM cell parameters. Gate blocks are ordered input, forget, cell, output
/// along the `4·hidden` axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        rng: &mut R,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Self {
        let w_ih = ps.add(
            format!("{name}.w_ih"),
            uniform_init(rng, 4 * hidden_dim, input_dim),
        );
        let w_hh = ps.add(
            format!("{name}.w_hh"),
            uniform_init(rng, 4 * hidden_dim, hidden_dim),
        );
        let mut b = Array2::zeros((1, 4 * hidden_dim));
        b.slice_mut(ndarray::s![.., hidden_dim..2 * hidden_dim])
            .fill(1.0);
        let bias = ps.add(format!("{name}.bias"), b);
        LstmCell {
            w_ih,
            w_hh,
            bias,
            input_dim,
            hidden_dim,
        }
    }

    /// One recurrence step on `1×input_dim` input; returns `(h_t, c_t)`.
    pub fn step(&self, g: &mut Graph, x: Var, h_prev: Var, c_prev: Var) -> (Var, Var) {
        let w_ih = g.param(self.w_ih);
        let b = g.param(self.bias);
        let xi = g.matmul_t(x, w_ih);
        let xi = g.add_row(xi, b);
        self.recur(g, xi, Some(h_prev), c_prev)
    }

    // gate update given the input projection `xi` (bias included)
    fn recur(&self, g: &mut Graph, xi: Var, h_prev: Option<Var>, c_prev: Var) -> (Var, Var) {
        let hd = self.hidden_dim;
        let pre = match h_prev {
            Some(h) => {
                let w_hh = g.param(self.w_hh);
                let hh = g.matmul_t(h, w_hh);
                g.add(xi, hh)
            }
            None => xi,
        };
        let state = g.lstm_cell(pre, c_prev);
        let h = g.slice_cols(state, 0, hd);
        let c = g.slice_cols(state, hd, hd);
        (h, c)
    }

    /// Runs the cell over `xs` from zero state, returning every hidden state.
    pub fn unroll(&self, g: &mut Graph, xs: &[Var]) -> Vec<Var> {
        if xs.is_empty() {
            return Vec::new();
        }
        let x = g.concat_rows(xs);
        self.unroll_matrix(g, x)
    }

    /// Like [`LstmCell::unroll`] over the rows of an `L×input_dim` node. The
    /// input projection for all steps is one matrix product.
    pub fn unroll_matrix(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        self.run(g, x, false)
    }

    // With `reverse`, steps run from the last row to the first; outputs are
    // still indexed by row.
    fn run(&self, g: &mut Graph, x: Var, reverse: bool) -> Vec<Var> {
        let len = g.value(x).nrows();
        let w_ih = g.param(self.w_ih);
        let b = g.param(self.bias);
        let proj = g.matmul_t(x, w_ih);
        let proj = g.add_row(proj, b);
        let mut c = g.input(Array2::zeros((1, self.hidden_dim)));
        let mut h = None;
        let mut out = Vec::with_capacity(len);
        for step in 0..len {
            let t = if reverse { len - 1 - step } else { step };
            let xi = g.slice_rows(proj, t, 1);
            let (h_t, c_t) = self.recur(g, xi, h, c);
            out.push(h_t);
            h = Some(h_t);
            c = c_t;
        }
        if reverse {
            out.reverse();
        }
        out
    }
}

/// Value-level LSTM step, for callers outside a training graph.
pub fn lstm_step(
    ps: &ParamSet,
    cell: &LstmCell,
    x: &Array2<f64>,
    h_prev: &Array2<f64>,
    c_prev: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let mut g = Graph::new(ps);
    let x = g.input(x.clone());
    let h = g.input(h_prev.clone());
    let c = g.input(c_prev.clone());
    let (h, c) = cell.step(&mut g, x, h, c);
    (g.value(h).clone(), g.value(c).clone())
}

/// Bidirectional LSTM layer; each output step is `[h_fwd; h_bwd]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blstm {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
}

impl Blstm {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        rng: &mut R,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Self {
        let fwd = LstmCell::new(ps, rng, &format!("{name}.fwd"), input_dim, hidden_dim);
        let bwd = LstmCell::new(ps, rng, &format!("{name}.bwd"), input_dim, hidden_dim);
        Blstm { fwd, bwd }
    }

    pub fn output_dim(&self) -> usize {
        self.fwd.hidden_dim + self.bwd.hidden_dim
    }

    /// Panics on an empty sequence.
    pub fn forward(&self, g: &mut Graph, xs: &[Var]) -> Vec<Var> {
        assert!(!xs.is_empty(), "blstm over an empty sequence");
        let x = g.concat_rows(xs);
        let fwd = self.fwd.run(g, x, false);
        let bwd = self.bwd.run(g, x, true);
        fwd.into_iter()
            .zip(bwd)
            .map(|(f, b)| g.concat_cols(&[f, b]))
            .collect()
    }
}

/// Keeps steps 0, 2, 4, ...; a length-1 sequence stays length 1.
pub fn subsample_half<T: Copy>(xs: &[T]) -> Vec<T> {
    xs.iter().step_by(2).copied().collect()
}

pub fn mean_pool(g: &mut Graph, xs: &[Var]) -> Var {
    assert!(!xs.is_empty(), "mean_pool over an empty sequence");
    g.mean(xs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_dense_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::default();
        let d = Dense::new(&mut ps, &mut rng, "d", 3, 2);
        ps.fill(0.0);
        let mut g = Graph::new(&ps);
        let x = g.input(array![[1.0, -2.0, 3.0]]);
        let y = d.forward(&mut g, x);
        assert_eq!(g.value(y), &Array2::<f64>::zeros((1, 2)));
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::default();
        let c = LstmCell::new(&mut ps, &mut rng, "c", 2, 3);
        let b = ps.get(c.bias);
        assert_eq!(b.row(0).to_vec(), vec![0., 0., 0., 1., 1., 1., 0., 0., 0., 0., 0., 0.]);
    }

    #[test]
    fn zero_lstm_step_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::default();
        let cell = LstmCell::new(&mut ps, &mut rng, "c", 2, 3);
        ps.fill(0.0);
        let (h, c) = lstm_step(
            &ps,
            &cell,
            &array![[0.7, -1.2]],
            &array![[0.3, 0.1, -0.4]],
            &Array2::zeros((1, 3)),
        );
        assert_eq!(h, Array2::<f64>::zeros((1, 3)));
        assert_eq!(c, Array2::<f64>::zeros((1, 3)));
    }

    #[test]
    fn unroll_matches_manual_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::default();
        let cell = LstmCell::new(&mut ps, &mut rng, "c", 2, 4);
        let xs = [array![[0.1, 0.2]], array![[-0.5, 1.0]], array![[2.0, 0.0]]];

        let mut g = Graph::new(&ps);
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let hs = cell.unroll(&mut g, &vars);

        let mut h = Array2::zeros((1, 4));
        let mut c = Array2::zeros((1, 4));
        for (t, x) in xs.iter().enumerate() {
            (h, c) = lstm_step(&ps, &cell, x, &h, &c);
            assert_eq!(g.value(hs[t]), &h);
        }
    }

    #[test]
    fn blstm_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::default();
        let layer = Blstm::new(&mut ps, &mut rng, "b", 3, 5);
        let mut g = Graph::new(&ps);
        let x = g.input(array![[1.0, 2.0, 3.0]]);
        let out = layer.forward(&mut g, &[x]);
        assert_eq!(out.len(), 1);
        assert_eq!(g.value(out[0]).dim(), (1, 10));

        ps.fill(0.0);
        let mut g = Graph::new(&ps);
        let xs: Vec<Var> = (0..4).map(|i| g.input(array![[i as f64, 1.0, -1.0]])).collect();
        for o in layer.forward(&mut g, &xs) {
            assert!(g.value(o).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn blstm_palindrome_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamSet::default();
        let layer = Blstm::new(&mut ps, &mut rng, "b", 2, 3);
        // tie backward weights to forward ones
        for (src, dst) in [
            (layer.fwd.w_ih, layer.bwd.w_ih),
            (layer.fwd.w_hh, layer.bwd.w_hh),
            (layer.fwd.bias, layer.bwd.bias),
        ] {
            let v = ps.get(src).clone();
            *ps.get_mut(dst) = v;
        }
        let seq = [array![[0.3, -0.2]], array![[1.1, 0.4]], array![[0.3, -0.2]]];
        let mut g = Graph::new(&ps);
        let xs: Vec<Var> = seq.iter().map(|x| g.input(x.clone())).collect();
        let out: Vec<Array2<f64>> = layer
            .forward(&mut g, &xs)
            .into_iter()
            .map(|v| g.value(v).clone())
            .collect();
        for t in 0..3 {
            let a = &out[t];
            let b = &out[2 - t];
            for k in 0..3 {
                assert_eq!(a[[0, k]], b[[0, 3 + k]]);
                assert_eq!(a[[0, 3 + k]], b[[0, k]]);
            }
        }
    }

    #[test]
    fn subsample_and_pool() {
        assert_eq!(subsample_half(&[0, 1, 2, 3, 4]), vec![0, 2, 4]);
        assert_eq!(subsample_half(&[7]), vec![7]);
        assert_eq!(subsample_half(&[1, 2]), vec![1]);

        let ps = ParamSet::default();
        let mut g = Graph::new(&ps);
        let a = g.input(array![[0.0, 2.0]]);
        let b = g.input(array![[2.0, 0.0]]);
        let m = mean_pool(&mut g, &[a, b]);
        assert_eq!(g.value(m), &array![[1.0, 1.0]]);
        let c = g.input(array![[0.5, -3.0]]);
        let m = mean_pool(&mut g, &[c, c, c]);
        assert_eq!(g.value(m), &array![[0.5, -3.0]]);
    }
}
