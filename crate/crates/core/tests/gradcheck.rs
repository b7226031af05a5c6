mod common;

use common::{grad_case, max_grad_error, random_matrix};
use pmkit::neural::ParamSet;
use pmkit::rnn::{utterance_loss_and_grad, RnnConfig, RnnModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn over_seeds(case: &str) {
    for seed in 0..20 {
        let err = grad_case(case, seed);
        assert!(err < TOL, "{case} seed {seed}: relative error {err:e}");
    }
}

#[test]
fn dense() {
    over_seeds("dense");
}

#[test]
fn relu() {
    over_seeds("relu");
}

#[test]
fn mse() {
    over_seeds("mse");
}

#[test]
fn lstm_step() {
    over_seeds("lstm-step");
}

#[test]
fn blstm() {
    over_seeds("blstm");
}

#[test]
fn mean_pool() {
    over_seeds("mean-pool");
}

#[test]
fn subsample_composite() {
    over_seeds("subsample-composite");
}

#[test]
fn elementwise_ops() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::default();
        let a = ps.add("a", random_matrix(&mut rng, 3, 6));
        let b = ps.add("b", random_matrix(&mut rng, 3, 6));
        let t = random_matrix(&mut rng, 3, 5);
        let err = max_grad_error(&ps, |g| {
            let (a, b) = (g.param(a), g.param(b));
            let s = g.sigmoid(a);
            let h = g.tanh(b);
            let m = g.mul(s, h);
            let sum = g.add(m, a);
            let cut = g.slice_cols(sum, 1, 5);
            let t = g.input(t.clone());
            g.mse(cut, t)
        });
        assert!(err < TOL, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn rnn_forward_length_four() {
    for seed in 0..20 {
        let mut model = RnnModel::new(RnnConfig {
            input_dim: 5,
            layers: 2,
            hidden: 3,
            linear_width: 4,
            seed,
            ..RnnConfig::desk()
        })
        .unwrap();
        // keep the output ReLU in its active region
        let bias = model.output_layer().bias;
        model.params_mut().get_mut(bias).fill(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x = random_matrix(&mut rng, 4, 5);
        let target = 0.3;

        let (_, analytic) = utterance_loss_and_grad(&model, model.params(), &x, target);
        let mut probe = model.params().clone();
        let loss_at = |ps: &ParamSet| utterance_loss_and_grad(&model, ps, &x, target).0;
        for (t, a) in analytic.iter().enumerate() {
            for (idx, &an) in a.indexed_iter() {
                let orig = probe.values()[t][idx];
                probe.values_mut()[t][idx] = orig + common::FD_STEP;
                let up = loss_at(&probe);
                probe.values_mut()[t][idx] = orig - common::FD_STEP;
                let down = loss_at(&probe);
                probe.values_mut()[t][idx] = orig;
                let num = (up - down) / (2.0 * common::FD_STEP);
                let rel = (an - num).abs() / an.abs().max(num.abs()).max(common::REL_FLOOR);
                assert!(rel < TOL, "seed {seed} tensor {t} {idx:?}: {an} vs {num}");
            }
        }
    }
}
