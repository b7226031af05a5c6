#![allow(dead_code)]

use ndarray::Array2;
use pmkit::neural::{Graph, ParamSet, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
/// Relative errors are taken against max(|analytic|, |numeric|, this).
pub const REL_FLOOR: f64 = 1e-6;

/// Random point on the simplex with moderately peaked mass.
pub fn random_dist<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let scale: f64 = rng.random_range(0.1..3.0);
    let w: Vec<f64> = (0..k)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (scale * z).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// Largest relative error between the backward-pass parameter gradient of
/// `loss` and central finite differences over every parameter entry.
pub fn max_grad_error<F>(params: &ParamSet, loss: F) -> f64
where
    F: Fn(&mut Graph) -> Var,
{
    let mut g = Graph::new(params);
    let out = loss(&mut g);
    let grads = g.backward(out);
    let mut analytic = params.zeros_like();
    g.accumulate_param_grads(&grads, &mut analytic);

    let eval = |ps: &ParamSet| {
        let mut g = Graph::new(ps);
        let out = loss(&mut g);
        g.value(out)[[0, 0]]
    };
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (t, a) in analytic.iter().enumerate() {
        for (idx, &an) in a.indexed_iter() {
            let orig = probe.values()[t][idx];
            probe.values_mut()[t][idx] = orig + FD_STEP;
            let up = eval(&probe);
            probe.values_mut()[t][idx] = orig - FD_STEP;
            let down = eval(&probe);
            probe.values_mut()[t][idx] = orig;
            let num = (up - down) / (2.0 * FD_STEP);
            let rel = (an - num).abs() / an.abs().max(num.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

pub const GRAD_CASES: [&str; 7] = [
    "dense",
    "relu",
    "mse",
    "lstm-step",
    "blstm",
    "mean-pool",
    "subsample-composite",
];

fn rows_as_params(ps: &mut ParamSet, x: &Array2<f64>, name: &str) -> Vec<pmkit::neural::ParamId> {
    x.rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| ps.add(format!("{name}{i}"), r.to_owned().insert_axis(ndarray::Axis(0))))
        .collect()
}

/// Builds the named composite with random parameters and inputs drawn from
/// `seed`, then returns its worst gradient error. Inputs are registered as
/// parameters so their gradients are checked too.
pub fn grad_case(name: &str, seed: u64) -> f64 {
    use pmkit::neural::{mean_pool, subsample_half, Blstm, Dense, LstmCell};
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::default();
    match name {
        "dense" => {
            let x = ps.add("x", random_matrix(&mut rng, 3, 4));
            let t = random_matrix(&mut rng, 3, 5);
            let d = Dense::new(&mut ps, &mut rng, "d", 4, 5);
            ps.values_mut()[d.bias.index()] = random_matrix(&mut rng, 1, 5);
            max_grad_error(&ps, |g| {
                let x = g.param(x);
                let y = d.forward(g, x);
                let t = g.input(t.clone());
                g.mse(y, t)
            })
        }
        "relu" => {
            let x = ps.add("x", random_matrix(&mut rng, 4, 3));
            let t = random_matrix(&mut rng, 4, 6);
            let d = Dense::new(&mut ps, &mut rng, "d", 3, 6);
            max_grad_error(&ps, |g| {
                let x = g.param(x);
                let y = d.forward(g, x);
                let y = g.relu(y);
                let t = g.input(t.clone());
                g.mse(y, t)
            })
        }
        "mse" => {
            let p = ps.add("p", random_matrix(&mut rng, 5, 7));
            let t = random_matrix(&mut rng, 5, 7);
            max_grad_error(&ps, |g| {
                let p = g.param(p);
                let t = g.input(t.clone());
                g.mse(p, t)
            })
        }
        "lstm-step" => {
            let cell = LstmCell::new(&mut ps, &mut rng, "cell", 3, 4);
            ps.values_mut()[cell.bias.index()] = random_matrix(&mut rng, 1, 16);
            let x = ps.add("x", random_matrix(&mut rng, 1, 3));
            let h0 = ps.add("h0", random_matrix(&mut rng, 1, 4));
            let c0 = ps.add("c0", random_matrix(&mut rng, 1, 4));
            let t = random_matrix(&mut rng, 1, 8);
            max_grad_error(&ps, |g| {
                let (x, h0, c0) = (g.param(x), g.param(h0), g.param(c0));
                let (h, c) = cell.step(g, x, h0, c0);
                let hc = g.concat_cols(&[h, c]);
                let t = g.input(t.clone());
                g.mse(hc, t)
            })
        }
        "blstm" => {
            let layer = Blstm::new(&mut ps, &mut rng, "b", 3, 4);
            let xs = rows_as_params(&mut ps, &random_matrix(&mut rng, 5, 3), "x");
            let t = random_matrix(&mut rng, 1, 5 * 8);
            max_grad_error(&ps, |g| {
                let seq: Vec<Var> = xs.iter().map(|&x| g.param(x)).collect();
                let out = layer.forward(g, &seq);
                let all = g.concat_cols(&out);
                let t = g.input(t.clone());
                g.mse(all, t)
            })
        }
        "mean-pool" => {
            let xs = rows_as_params(&mut ps, &random_matrix(&mut rng, 6, 4), "x");
            let d = Dense::new(&mut ps, &mut rng, "d", 4, 2);
            let t = random_matrix(&mut rng, 1, 2);
            max_grad_error(&ps, |g| {
                let seq: Vec<Var> = xs.iter().map(|&x| g.param(x)).collect();
                let pooled = mean_pool(g, &seq);
                let y = d.forward(g, pooled);
                let t = g.input(t.clone());
                g.mse(y, t)
            })
        }
        "subsample-composite" => {
            let b1 = Blstm::new(&mut ps, &mut rng, "b1", 3, 3);
            let b2 = Blstm::new(&mut ps, &mut rng, "b2", 6, 2);
            let d = Dense::new(&mut ps, &mut rng, "d", 4, 1);
            let xs = rows_as_params(&mut ps, &random_matrix(&mut rng, 7, 3), "x");
            let t = random_matrix(&mut rng, 1, 1);
            max_grad_error(&ps, |g| {
                let seq: Vec<Var> = xs.iter().map(|&x| g.param(x)).collect();
                let h = subsample_half(&b1.forward(g, &seq));
                let h = subsample_half(&b2.forward(g, &h));
                let pooled = mean_pool(g, &h);
                let y = d.forward(g, pooled);
                let t = g.input(t.clone());
                g.mse(y, t)
            })
        }
        other => panic!("unknown gradient case {other}"),
    }
}
